"""Minimal reverse-mode differentiation over dense batched arrays.

Nodes hold float64 values of rank <= 2 (a batch dimension plus a feature or
atom dimension) and form a DAG; each op installs a closure that scatters the
output gradient back to its parents. Everything is deterministic: topological
order, parameter iteration, and optimizer updates depend only on graph
construction order.

Subgradient conventions: relu'(0) = 0, |.|'(0) = 0, and the projection
gradient is 0 at hat-function kinks and in clipped regions.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable

import numpy as np

from .distcore import SupportSpec, uniform_atoms

CE_FLOOR = 1e-12


class Node:
    """One value in the computation DAG."""

    __slots__ = ("value", "grad", "parents", "requires_grad", "_backward")

    def __init__(self, value, parents=(), requires_grad=False, backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        if self.value.ndim > 2:
            raise ValueError(f"rank must be <= 2, got shape {self.value.shape}")
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents)
        self._backward = backward

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Node:
    return Node(value)


def parameter(value) -> Node:
    return Node(np.array(value, dtype=np.float64, copy=True), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Node, b: Node) -> Node:
    out = Node(a.value + b.value, (a, b))

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad, a.value.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad, b.value.shape)

    out._backward = backward
    return out


def mul(a: Node, b: Node) -> Node:
    out = Node(a.value * b.value, (a, b))

    def backward():
        if a.requires_grad:
            a.grad += _unbroadcast(out.grad * b.value, a.value.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad * a.value, b.value.shape)

    out._backward = backward
    return out


def matmul(a: Node, b: Node) -> Node:
    out = Node(a.value @ b.value, (a, b))

    def backward():
        if a.requires_grad:
            a.grad += out.grad @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ out.grad

    out._backward = backward
    return out


def dense(x: Node, w: Node, b: Node) -> Node:
    """Affine map: x (B,F) @ w (F,O) + b (O,)."""
    out = Node(x.value @ w.value + b.value, (x, w, b))

    def backward():
        if x.requires_grad:
            x.grad += out.grad @ w.value.T
        if w.requires_grad:
            w.grad += x.value.T @ out.grad
        if b.requires_grad:
            b.grad += _unbroadcast(out.grad, b.value.shape)

    out._backward = backward
    return out


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def activation(x: Node, kind: str) -> Node:
    """Elementwise relu/elu/abs, or softmax over the last axis."""
    v = x.value
    if kind == "relu":
        out_v = np.maximum(v, 0.0)
    elif kind == "elu":
        out_v = np.where(v > 0, v, np.expm1(v))
    elif kind == "abs":
        out_v = np.abs(v)
    elif kind == "softmax":
        out_v = _softmax_last(v)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    out = Node(out_v, (x,))

    def backward():
        if not x.requires_grad:
            return
        g = out.grad
        if kind == "relu":
            x.grad += g * (v > 0)
        elif kind == "elu":
            x.grad += g * np.where(v > 0, 1.0, np.exp(v))
        elif kind == "abs":
            x.grad += g * np.sign(v)  # sign(0) = 0: subgradient 0 at the kink
        else:
            p = out_v
            x.grad += p * (g - (g * p).sum(axis=-1, keepdims=True))

    out._backward = backward
    return out


def reduce_sum(x: Node) -> Node:
    out = Node(np.asarray(x.value.sum()), (x,))

    def backward():
        if x.requires_grad:
            x.grad += out.grad  # scalar broadcasts

    out._backward = backward
    return out


def slice_cols(x: Node, start: int, stop: int) -> Node:
    """Column slice of a (B, C) node."""
    out = Node(x.value[:, start:stop].copy(), (x,))

    def backward():
        if x.requires_grad:
            x.grad[:, start:stop] += out.grad

    out._backward = backward
    return out


def pick_action_block(logits: Node, actions: np.ndarray, m: int) -> Node:
    """Per-row block gather: row b keeps columns [a_b*m, (a_b+1)*m)."""
    actions = np.asarray(actions, dtype=np.intp)
    b = logits.value.shape[0]
    rows = np.arange(b)[:, None]
    cols = actions[:, None] * m + np.arange(m)[None, :]
    out = Node(logits.value[rows, cols], (logits,))

    def backward():
        if logits.requires_grad:
            np.add.at(logits.grad, (rows, cols), out.grad)

    out._backward = backward
    return out


def graph_convolve(p1: Node, p2: Node) -> Node:
    """Row-wise convolution of mass matrices: (B,M1) x (B,M2) -> (B,M1+M2-1)."""
    v1, v2 = p1.value, p2.value
    if v1.ndim != 2 or v2.ndim != 2:
        raise ValueError("graph_convolve expects rank-2 mass matrices")
    b, m1 = v1.shape
    _, m2 = v2.shape
    if v2.shape[0] != b:
        raise ValueError("batch sizes differ")
    out_v = np.zeros((b, m1 + m2 - 1))
    for k in range(m2):
        out_v[:, k:k + m1] += v1 * v2[:, k:k + 1]
    out = Node(out_v, (p1, p2))

    def backward():
        g = out.grad
        if p1.requires_grad:
            for k in range(m2):
                p1.grad += g[:, k:k + m1] * v2[:, k:k + 1]
        if p2.requires_grad:
            for k in range(m2):
                p2.grad[:, k] += np.sum(g[:, k:k + m1] * v1, axis=1)

    out._backward = backward
    return out


def graph_project(probs: Node, source_atoms: Node, target: SupportSpec) -> Node:
    """Differentiable hat-function projection of batched masses onto a grid.

    Gradients flow to both the masses and the source atoms. Per atom, the
    atom-gradient is +-1/delta inside an open hat segment, 0 where the atom is
    clipped out of range, and 0 exactly at the kinks.
    """
    v_probs = probs.value
    v_atoms = source_atoms.value
    if v_probs.ndim != 2:
        raise ValueError("graph_project expects (B, M) masses")
    if v_atoms.ndim == 1:
        v_atoms = v_atoms[None, :]
    bsz, m = v_probs.shape
    if v_atoms.shape[1] != m:
        raise ValueError("atoms and masses disagree on M")
    atoms_b = np.broadcast_to(v_atoms, (bsz, m))
    zhat = target.atoms()
    dhat = target.delta
    clipped = np.clip(atoms_b, target.v_min, target.v_max)
    diff = clipped[:, :, None] - zhat[None, None, :]
    coeff = np.clip(1.0 - np.abs(diff) / dhat, 0.0, 1.0)  # (B, M, K)
    out = Node(np.einsum("bm,bmk->bk", v_probs, coeff), (probs, source_atoms))

    def backward():
        g = out.grad
        if probs.requires_grad:
            probs.grad += np.einsum("bk,bmk->bm", g, coeff)
        if source_atoms.requires_grad:
            absd = np.abs(diff)
            inband = (absd > 0.0) & (absd < dhat)
            slope = np.where(inband, -np.sign(diff) / dhat, 0.0)
            inrange = (atoms_b > target.v_min) & (atoms_b < target.v_max)
            g_atoms = v_probs * np.einsum("bk,bmk->bm", g, slope) * inrange
            source_atoms.grad += _unbroadcast(g_atoms, source_atoms.value.shape)

    out._backward = backward
    return out


def convolution_atoms(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Atom grid of a convolution result, matching distcore bookkeeping."""
    return uniform_atoms(s1[0] + s2[0], s1[-1] + s2[-1], s1.size + s2.size - 1)


def cross_entropy_loss(target: np.ndarray, predicted: Node) -> Node:
    """Mean over rows of -sum_j t_j log(max(q_j, 1e-12)); target is constant."""
    t = np.asarray(target, dtype=np.float64)
    q = predicted.value
    if t.shape != q.shape:
        raise ValueError(f"shape mismatch: target {t.shape} vs predicted {q.shape}")
    if t.ndim == 1:
        t = t[None, :]
        q = q[None, :]
    q_safe = np.maximum(q, CE_FLOOR)
    rows = -(t * np.log(q_safe)).sum(axis=1)
    out = Node(np.asarray(rows.mean()), (predicted,))

    def backward():
        if predicted.requires_grad:
            g = out.grad * np.where(q > CE_FLOOR, -t / q_safe, 0.0) / t.shape[0]
            predicted.grad += g.reshape(predicted.value.shape)

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate gradients of a scalar loss into every reachable node."""
    if loss.value.shape != ():
        raise ValueError("backward requires a scalar loss node")
    loss.grad = np.ones(())
    for node in reversed(_topo_order(loss)):
        if node._backward is not None and node.requires_grad:
            node._backward()


def zero_graph(root: Node) -> None:
    """Zero the gradient of every node reachable from ``root``."""
    for node in _topo_order(root):
        node.grad = np.zeros_like(node.value)


# ---------------------------------------------------------------------------
# Parameters, optimizers, checkpoints
# ---------------------------------------------------------------------------

class ParameterSet:
    """Named parameter nodes with deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Node] = {}

    def add(self, name: str, value) -> Node:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        node = parameter(value)
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> Node:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Node]]:
        return self._params.items()

    def zero_grad(self) -> None:
        for node in self._params.values():
            node.grad = np.zeros_like(node.value)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: node.value.copy() for name, node in self._params.items()}

    def clone(self) -> "ParameterSet":
        other = ParameterSet()
        for name, node in self._params.items():
            other.add(name, node.value.copy())
        return other

    def copy_to(self, target: "ParameterSet") -> None:
        """Bit-identical value copy into an identically shaped set."""
        if target.names() != self.names():
            raise ValueError("parameter sets have different names")
        for name, node in self._params.items():
            np.copyto(target[name].value, node.value)

    def to_json_obj(self) -> dict:
        return {name: node.value.tolist() for name, node in self._params.items()}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ParameterSet":
        ps = cls()
        for name, value in obj.items():
            ps.add(name, np.asarray(value, dtype=np.float64))
        return ps

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_obj(), fh)

    @classmethod
    def load(cls, path) -> "ParameterSet":
        with open(path) as fh:
            return cls.from_json_obj(json.load(fh))


def sync(source: ParameterSet, target: ParameterSet) -> None:
    """Copy online parameters into a target set, bit-exact."""
    source.copy_to(target)


class SGD:
    """Plain gradient descent; kept for gradient-check baselines."""

    def __init__(self, params: ParameterSet, lr: float = 1e-2):
        self.params = params
        self.lr = float(lr)

    def step(self) -> None:
        for _, node in self.params.items():
            node.value -= self.lr * node.grad


class Adam:
    def __init__(self, params: ParameterSet, lr: float = 5e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = {name: np.zeros_like(node.value) for name, node in params.items()}
        self._v = {name: np.zeros_like(node.value) for name, node in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, node in self.params.items():
            g = node.grad
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            node.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
