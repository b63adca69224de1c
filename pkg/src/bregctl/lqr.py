"""Classical discrete-time LQR baseline.

The algebraic Riccati fixed point is solved by iterating the recursion from
K = Q.  At the sizes this package targets (n <= 8) that is fast, converges
whenever the pair is stabilizable and Q is detectable, and avoids a
dependence on structured eigensolvers; divergence of the iteration is the
non-stabilizability signal.
"""

from __future__ import annotations

import numpy as np

from .errors import DivergenceError
from .system import LinearSystem

MAX_DARE_ITER = 100_000


def _riccati_map(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
                 K: np.ndarray) -> np.ndarray:
    BtKB = B.T @ K @ B
    gain_core = np.linalg.solve(BtKB + R, B.T @ K)
    return Q + A.T @ (K - K @ B @ gain_core) @ A


def dare_residual(system: LinearSystem, K: np.ndarray, Q, R) -> float:
    """Frobenius norm of K - RiccatiMap(K), the fixed-point defect."""
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return float(np.linalg.norm(K - _riccati_map(system.A, system.B, Q, R, K), "fro"))


def solve_dare(system: LinearSystem, Q, R, max_iter: int = MAX_DARE_ITER) -> np.ndarray:
    """Stabilizing solution of K = Q + A'(K - K B (B'KB + R)^{-1} B'K) A.

    Returns K with relative fixed-point residual below 1e-10; raises
    ``DivergenceError`` when the iteration fails to settle, which signals a
    non-stabilizable pair (or an unbounded value function).
    """
    A, B = system.A, system.B
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    K = Q.copy()
    for _ in range(max_iter):
        K_next = _riccati_map(A, B, Q, R, K)
        diff = np.linalg.norm(K_next - K, "fro")
        K = K_next
        if not np.isfinite(diff) or np.linalg.norm(K, "fro") > 1e14:
            raise DivergenceError("Riccati iteration diverged; pair looks non-stabilizable")
        if diff <= 1e-14 * (1.0 + np.linalg.norm(K, "fro")):
            break
    else:
        raise DivergenceError(
            f"Riccati iteration did not converge in {max_iter} sweeps "
            f"(last step {diff:.3e})")
    resid = dare_residual(system, K, Q, R)
    if resid > 1e-10 * (1.0 + np.linalg.norm(K, "fro")):
        raise DivergenceError(f"Riccati fixed point too loose: residual {resid:.3e}")
    return K


def lqr_gain(system: LinearSystem, K, R) -> np.ndarray:
    """F = (B'KB + R)^{-1} B'KA, so that u = -F x closes the loop."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    B = system.B
    return np.linalg.solve(B.T @ K @ B + R, B.T @ K @ system.A)


def closed_loop(system: LinearSystem, F: np.ndarray) -> np.ndarray:
    return system.A - system.B @ np.atleast_2d(np.asarray(F, dtype=float))


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(np.asarray(M, float))))))
