"""Exact algebra over categorical return distributions.

A categorical distribution is a finite probability mass vector over a strictly
increasing list of real-valued atoms. Uniformly spaced atom lists are
interchangeable with a compact ``SupportSpec``. All operations are pure:
inputs are never mutated and every result is a fresh, validated distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

# Mass-normalization tolerance for validated distributions.
PROB_TOL = 1e-9
# Relative tolerance under which an atom list counts as uniformly spaced.
SPACING_RTOL = 1e-12
# Relative tolerance for matching the spacings of two convolution operands.
CONV_SPACING_RTOL = 1e-9
# Floor applied to denominator masses inside KL.
LOG_FLOOR = 1e-12


class SpacingMismatch(ValueError):
    """Two distributions do not share a single uniform atom spacing."""


class SupportMismatch(ValueError):
    """An operation that requires identical atom grids got different ones."""


class NonMonotoneFunction(ValueError):
    """A function that is not monotone non-decreasing was offered to the registry."""


def uniform_atoms(lo: float, hi: float, n: int) -> np.ndarray:
    """Uniform grid with exact endpoints; the one constructor for atom grids."""
    return np.linspace(float(lo), float(hi), int(n))


@dataclass(frozen=True)
class SupportSpec:
    """Uniform atom grid: ``m`` atoms from ``v_min`` to ``v_max`` inclusive."""

    v_min: float
    v_max: float
    m: int

    def __post_init__(self):
        object.__setattr__(self, "v_min", float(self.v_min))
        object.__setattr__(self, "v_max", float(self.v_max))
        object.__setattr__(self, "m", int(self.m))
        if not self.v_min < self.v_max:
            raise ValueError(f"v_min must be < v_max, got [{self.v_min}, {self.v_max}]")
        if self.m < 2:
            raise ValueError(f"need at least two atoms, got m={self.m}")

    @property
    def delta(self) -> float:
        return (self.v_max - self.v_min) / (self.m - 1)

    def atoms(self) -> np.ndarray:
        return uniform_atoms(self.v_min, self.v_max, self.m)


@dataclass(frozen=True)
class CategoricalDistribution:
    """Probability masses over a strictly increasing atom list.

    ``atoms`` may be non-uniform (e.g. after a nonlinear function); uniform
    lists round-trip through :attr:`support`. Masses are non-negative and sum
    to one within ``PROB_TOL``.
    """

    atoms: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        atoms = np.ascontiguousarray(self.atoms, dtype=np.float64)
        probs = np.ascontiguousarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "probs", probs)
        if atoms.ndim != 1 or probs.ndim != 1:
            raise ValueError("atoms and probs must be 1-D")
        if atoms.shape != probs.shape:
            raise ValueError(f"length mismatch: {atoms.shape} atoms vs {probs.shape} probs")
        if atoms.size == 0:
            raise ValueError("empty distribution")
        if atoms.size > 1 and not np.all(np.diff(atoms) > 0):
            raise ValueError("atoms must be strictly increasing")
        if np.any(probs < 0) or np.any(probs > 1 + PROB_TOL):
            raise ValueError("masses must lie in [0, 1]")
        total = float(probs.sum())
        if abs(total - 1.0) > PROB_TOL:
            raise ValueError(f"masses must sum to 1 within {PROB_TOL}, got {total!r}")

    @classmethod
    def from_support(cls, support: SupportSpec, probs) -> "CategoricalDistribution":
        return cls(support.atoms(), np.asarray(probs, dtype=np.float64))

    @classmethod
    def point_mass(cls, value: float) -> "CategoricalDistribution":
        return cls(np.array([float(value)]), np.array([1.0]))

    @property
    def m(self) -> int:
        return int(self.atoms.size)

    @property
    def spacing(self) -> float | None:
        """Common atom spacing, or None when the list is not uniform."""
        if self.m < 2:
            return None
        diffs = np.diff(self.atoms)
        d0 = diffs[0]
        if np.all(np.abs(diffs - d0) <= SPACING_RTOL * abs(d0)):
            return float(d0)
        return None

    @property
    def support(self) -> SupportSpec | None:
        """Compact SupportSpec form, or None when spacing is non-uniform."""
        if self.m >= 2 and self.spacing is not None:
            return SupportSpec(float(self.atoms[0]), float(self.atoms[-1]), self.m)
        return None

    def to_json_obj(self) -> dict:
        sp = self.support
        if sp is not None:
            return {"v_min": sp.v_min, "v_max": sp.v_max, "m": sp.m,
                    "probs": self.probs.tolist()}
        return {"atoms": self.atoms.tolist(), "probs": self.probs.tolist()}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CategoricalDistribution":
        if "atoms" in obj:
            return cls(np.asarray(obj["atoms"]), np.asarray(obj["probs"]))
        sp = SupportSpec(obj["v_min"], obj["v_max"], obj["m"])
        return cls.from_support(sp, obj["probs"])


# ---------------------------------------------------------------------------
# The five operations
# ---------------------------------------------------------------------------

def weighting(x: CategoricalDistribution, w: float) -> CategoricalDistribution:
    """Scale every atom by ``w``; masses are untouched.

    ``w < 0`` reverses the atom order to keep the list increasing; ``w == 0``
    annihilates the distribution to a point mass at zero.
    """
    w = float(w)
    if w == 0.0:
        return CategoricalDistribution.point_mass(0.0)
    atoms = w * x.atoms
    probs = x.probs
    if w < 0:
        atoms = atoms[::-1]
        probs = probs[::-1]
    return CategoricalDistribution(atoms.copy(), probs.copy())


def bias(x: CategoricalDistribution, b: float) -> CategoricalDistribution:
    """Shift every atom by ``b``; masses are untouched."""
    return CategoricalDistribution(x.atoms + float(b), x.probs.copy())


def convolve(x1: CategoricalDistribution,
             x2: CategoricalDistribution) -> CategoricalDistribution:
    """Distribution of the sum of independent draws from ``x1`` and ``x2``.

    Both operands must be uniformly spaced with equal spacing within
    ``CONV_SPACING_RTOL`` (relative); a point mass is the neutral shift.
    """
    if x1.m == 1:
        shifted = bias(x2, float(x1.atoms[0]))
        return CategoricalDistribution(shifted.atoms, shifted.probs * float(x1.probs[0]))
    if x2.m == 1:
        shifted = bias(x1, float(x2.atoms[0]))
        return CategoricalDistribution(shifted.atoms, shifted.probs * float(x2.probs[0]))
    d1, d2 = x1.spacing, x2.spacing
    if d1 is None or d2 is None:
        raise SpacingMismatch("convolution requires uniformly spaced operands")
    if abs(d1 - d2) > CONV_SPACING_RTOL * max(abs(d1), abs(d2)):
        raise SpacingMismatch(f"atom spacings differ: {d1!r} vs {d2!r}")
    probs = np.convolve(x1.probs, x2.probs)
    atoms = uniform_atoms(x1.atoms[0] + x2.atoms[0],
                          x1.atoms[-1] + x2.atoms[-1],
                          x1.m + x2.m - 1)
    return CategoricalDistribution(atoms, probs)


def project(x: CategoricalDistribution, target: SupportSpec) -> CategoricalDistribution:
    """Project onto a uniform target grid by clip-then-linear-split.

    Each source atom is clipped into ``[target.v_min, target.v_max]``; its mass
    then splits between the two nearest target atoms with hat-function
    coefficients ``1 - |clip(x_j) - z_k| / delta`` bounded to [0, 1]. Source
    atoms that coincide exactly with a target atom keep their whole mass there,
    which makes projection exactly idempotent. Clipping preserves mass, not
    expectation.
    """
    zhat = target.atoms()
    k = target.m
    dhat = target.delta
    clipped = np.clip(x.atoms, target.v_min, target.v_max)
    pos = (clipped - target.v_min) / dhat
    near = np.clip(np.rint(pos).astype(np.intp), 0, k - 1)
    exact = clipped == zhat[near]
    out = np.zeros(k)
    if np.any(exact):
        np.add.at(out, near[exact], x.probs[exact])
    if not np.all(exact):
        rest = ~exact
        lo = np.floor(pos[rest]).astype(np.intp)
        np.clip(lo, 0, k - 2, out=lo)
        frac = pos[rest] - lo
        p = x.probs[rest]
        np.add.at(out, lo, p * (1.0 - frac))
        np.add.at(out, lo + 1, p * frac)
    return CategoricalDistribution(zhat, out)


def _identity(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).copy()


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def _elu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0, x, np.expm1(x))


_MONOTONE_GRID = np.linspace(-60.0, 60.0, 4001)

FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {}


def register_function(name: str, fn: Callable[[np.ndarray], np.ndarray]) -> None:
    """Admit ``fn`` to the registry iff it is monotone non-decreasing.

    Monotonicity is checked on a dense reference grid; order-reversing
    functions (e.g. abs) raise ``NonMonotoneFunction``.
    """
    values = np.asarray(fn(_MONOTONE_GRID), dtype=np.float64)
    if values.shape != _MONOTONE_GRID.shape:
        raise ValueError(f"{name!r} must map arrays elementwise")
    if np.any(np.diff(values) < 0):
        raise NonMonotoneFunction(f"{name!r} is not monotone non-decreasing")
    FUNCTIONS[name] = fn


register_function("identity", _identity)
register_function("relu", _relu)
register_function("elu", _elu)


def apply_function(x: CategoricalDistribution, f: str) -> CategoricalDistribution:
    """Apply a registered monotone function to the atoms; masses follow.

    Atoms that collapse onto the same value (relu plateaus) are merged and
    their masses summed. The result may be non-uniformly spaced; project
    before convolving.
    """
    if f not in FUNCTIONS:
        raise KeyError(f"unknown function tag {f!r}; registered: {sorted(FUNCTIONS)}")
    atoms = np.asarray(FUNCTIONS[f](x.atoms), dtype=np.float64)
    uniq, inverse = np.unique(atoms, return_inverse=True)
    if uniq.size == atoms.size:
        return CategoricalDistribution(atoms, x.probs.copy())
    probs = np.bincount(inverse, weights=x.probs, minlength=uniq.size)
    return CategoricalDistribution(uniq, probs)


# ---------------------------------------------------------------------------
# Summary statistics and divergences
# ---------------------------------------------------------------------------

def expectation(x: CategoricalDistribution) -> float:
    return float(np.dot(x.probs, x.atoms))


def variance(x: CategoricalDistribution) -> float:
    mu = np.dot(x.probs, x.atoms)
    return float(np.dot(x.probs, (x.atoms - mu) ** 2))


def _require_same_support(p: CategoricalDistribution, q: CategoricalDistribution) -> None:
    if p.m != q.m or not np.allclose(p.atoms, q.atoms, rtol=1e-12, atol=1e-12):
        raise SupportMismatch("operation requires identical atom grids")


def kl_divergence(p: CategoricalDistribution, q: CategoricalDistribution) -> float:
    """KL(p || q) on identical supports; 0·log 0 = 0, q floored at 1e-12."""
    _require_same_support(p, q)
    q_safe = np.maximum(q.probs, LOG_FLOOR)
    mask = p.probs > 0
    return float(np.sum(p.probs[mask] * np.log(p.probs[mask] / q_safe[mask])))


def cramer_distance(p: CategoricalDistribution, q: CategoricalDistribution) -> float:
    """l2 distance between the discrete CDFs, scaled by the atom spacing.

    ``sqrt(delta * sum_j (F_p[j] - F_q[j])^2)`` over a shared uniform grid.
    """
    _require_same_support(p, q)
    d = p.spacing
    if d is None:
        raise SupportMismatch("cramer distance requires a uniform grid")
    gap = np.cumsum(p.probs) - np.cumsum(q.probs)
    return float(math.sqrt(d * float(np.dot(gap, gap))))
