"""Sample grids for the universally quantified feasibility conditions.

The matrix inequalities hold "for all x" (or xi); at desk scale they are
checked exhaustively on symmetric log grids (scalars) or quasi-random
direction/radius products (n <= 4), with margins reported so callers can
tighten coverage.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.stats import qmc
from scipy.special import ndtri

DEFAULT_SEED = 170914


@dataclass(frozen=True)
class GridSpec:
    """Parameters of the check grid; serialized with certificates."""

    points: int = 2001
    lo: float = 1e-4
    hi: float = 100.0
    directions: int = 500
    radii: int = 20

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**d)


def symmetric_log_grid(points: int = 2001, lo: float = 1e-4, hi: float = 100.0) -> np.ndarray:
    """Log-spaced grid of `points` values, symmetric about (and including) 0."""
    half = (points - 1) // 2
    pos = np.logspace(np.log10(lo), np.log10(hi), half)
    return np.concatenate([-pos[::-1], [0.0], pos])


def scalar_grid(spec: GridSpec) -> np.ndarray:
    return symmetric_log_grid(spec.points, spec.lo, spec.hi)


def direction_radius_grid(dim: int, spec: GridSpec) -> np.ndarray:
    """Quasi-random directions times log-spaced radii: shape (D*R, dim).

    Directions come from a Sobol sequence pushed through the normal inverse
    CDF and normalized, which distributes them quasi-uniformly on the
    sphere.
    """
    sampler = qmc.Sobol(d=dim, scramble=True, seed=DEFAULT_SEED)
    u = sampler.random(spec.directions)
    z = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    dirs = z / norms
    radii = np.logspace(np.log10(spec.lo), np.log10(spec.hi), spec.radii)
    pts = (dirs[:, None, :] * radii[None, :, None]).reshape(-1, dim)
    return pts


def check_points(dim: int, spec: GridSpec) -> np.ndarray:
    """The canonical feasibility sample set: (N,) for scalars, (N, dim) else."""
    if dim == 1:
        return scalar_grid(spec)
    return direction_radius_grid(dim, spec)


def signed_log_samples(count: int, lo: float, hi: float) -> np.ndarray:
    """count log-spaced magnitudes split evenly across both signs."""
    half = count // 2
    pos = np.logspace(np.log10(lo), np.log10(hi), half)
    return np.concatenate([-pos[::-1], pos])


def random_points(dim: int, count: int, halfwidth: float,
                  seed: int = DEFAULT_SEED) -> np.ndarray:
    """Seeded uniform sample in the centered box, for residual spot checks."""
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(0)]))
    if dim == 1:
        return rng.uniform(-halfwidth, halfwidth, size=count)
    return rng.uniform(-halfwidth, halfwidth, size=(count, dim))
