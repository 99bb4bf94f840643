"""Categorical return-distribution algebra and distributional value factorization."""

from .distcore import CategoricalDistribution, SupportSpec

__version__ = "0.1.0"

__all__ = ["CategoricalDistribution", "SupportSpec", "__version__"]
