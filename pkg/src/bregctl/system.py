"""Discrete-time linear plant and symmetric noise models.

The noise generator is counter based (Philox) with streams derived
explicitly from ``(seed, step)``, so rollouts are bit-reproducible and
independent steps or shards can be drawn in parallel without coordination.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ValidationError

RNG_ALGORITHM = "philox4x64"

NOISE_FAMILIES = ("gaussian", "uniform", "rademacher", "degenerate-zero")


def _stream(seed: int, counter: int) -> np.random.Generator:
    if seed < 0 or counter < 0:
        raise ValidationError("seed and stream counters must be nonnegative")
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(counter)]))


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean noise, symmetric about the origin by construction.

    ``covariance`` is the second moment W.  The uniform and rademacher
    families are componentwise and therefore require a diagonal W; the
    gaussian family accepts any symmetric PSD W.
    """

    family: str
    covariance: np.ndarray
    _factor: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise ValidationError(
                f"unknown noise family {self.family!r}; symmetric families are "
                f"{NOISE_FAMILIES}")
        W = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        if W.shape[0] != W.shape[1]:
            raise ValidationError("noise covariance must be square")
        if not np.allclose(W, W.T, atol=1e-12):
            raise ValidationError("noise covariance must be symmetric")
        eigvals, eigvecs = np.linalg.eigh(W)
        if eigvals.min() < -1e-12 * max(1.0, eigvals.max(), 0.0):
            raise ValidationError("noise covariance must be PSD")
        if self.family == "degenerate-zero" and eigvals.max() > 0:
            raise ValidationError("degenerate-zero noise requires a zero covariance")
        if self.family in ("uniform", "rademacher"):
            if not np.allclose(W, np.diag(np.diag(W)), atol=1e-12):
                raise ValidationError(
                    f"{self.family} noise is componentwise; covariance must be diagonal")
        factor = eigvecs @ np.diag(np.sqrt(np.clip(eigvals, 0.0, None)))
        object.__setattr__(self, "covariance", W)
        object.__setattr__(self, "_factor", factor)

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @classmethod
    def degenerate(cls, dim: int) -> "NoiseModel":
        return cls("degenerate-zero", np.zeros((dim, dim)))

    def _draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        n = self.dim
        if self.family == "degenerate-zero":
            return np.zeros((count, n))
        if self.family == "gaussian":
            return rng.standard_normal((count, n)) @ self._factor.T
        std = np.sqrt(np.diag(self.covariance))
        if self.family == "uniform":
            half = np.sqrt(3.0) * std
            return rng.uniform(-1.0, 1.0, size=(count, n)) * half
        # rademacher
        signs = rng.integers(0, 2, size=(count, n)) * 2 - 1
        return signs * std

    def sample_step(self, seed: int, step: int) -> np.ndarray:
        """The single draw w_step of the stream derived from (seed, step)."""
        return self._draw(_stream(seed, step), 1)[0]

    def sample_shard(self, seed: int, shard: int, count: int) -> np.ndarray:
        """A (count, n) block from the stream derived from (seed, shard)."""
        return self._draw(_stream(seed, shard), count)


@dataclass(frozen=True)
class LinearSystem:
    """x_{k+1} = A x_k + B u_k + w_k with invertible A and full-rank B."""

    A: np.ndarray
    B: np.ndarray
    noise: Optional[NoiseModel] = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValidationError(f"A must be square, got shape {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValidationError(
                f"B must have {A.shape[0]} rows to match A, got shape {B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        self._require_invertible(A)
        if np.linalg.matrix_rank(B) < min(B.shape):
            raise ValidationError("B must be full rank")
        if self.noise is None:
            object.__setattr__(self, "noise", NoiseModel.degenerate(A.shape[0]))
        elif self.noise.dim != A.shape[0]:
            raise ValidationError(
                f"noise dimension {self.noise.dim} does not match state dimension "
                f"{A.shape[0]}")

    @staticmethod
    def _require_invertible(A: np.ndarray):
        svals = np.linalg.svd(A, compute_uv=False)
        if svals.min() <= 1e-12 * max(1.0, svals.max()):
            raise ValidationError("A must be invertible")

    @classmethod
    def unchecked(cls, A, B, noise: Optional[NoiseModel] = None) -> "LinearSystem":
        """Bypass the invertibility invariant (degenerate baseline cases
        such as A = 0 in the Riccati recursion).  Synthesis re-validates."""
        obj = object.__new__(cls)
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        object.__setattr__(obj, "A", A)
        object.__setattr__(obj, "B", B)
        object.__setattr__(obj, "noise", noise if noise is not None
                           else NoiseModel.degenerate(A.shape[0]))
        return obj

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def is_scalar(self) -> bool:
        return self.n == 1 and self.m == 1

    @property
    def a(self) -> float:
        if not self.is_scalar:
            raise ValidationError("scalar accessor on a matrix system")
        return float(self.A[0, 0])

    @property
    def b(self) -> float:
        if not self.is_scalar:
            raise ValidationError("scalar accessor on a matrix system")
        return float(self.B[0, 0])

    def require_invertible(self):
        self._require_invertible(self.A)

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def is_stable(self) -> bool:
        return self.spectral_radius() < 1.0


def scalar_system(a: float, b: float, noise: Optional[NoiseModel] = None) -> LinearSystem:
    """Convenience constructor for n = m = 1 plants."""
    return LinearSystem(np.array([[float(a)]]), np.array([[float(b)]]), noise)
