"""Value-function synthesis: feasibility of the quadratic cost-to-go matrix,
derivation of the companion cost, and the nonlinear feedback law.

The design problem fixes one cost (state or control) and asks for a positive
definite M such that the identity

    p*(xi) + r*(B' xi) = xi' A M^{-1} A' xi / 4,     p(x) = q(x) + x' M x

admits a convex, even, nonnegative companion.  Feasibility of M is a matrix
inequality quantified over all points; it is checked exhaustively on sample
grids with the smallest-eigenvalue slack reported per condition, so callers
can see exactly how binding each inequality is.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import convex as cv
from .convex import ConvexFunction, conjugate, dual_gradient, dual_hessian, dual_value
from .errors import (
    ConvergenceError,
    InfeasibleDerivationError,
    InfeasibleSearchError,
    InsufficientHypothesesError,
    UnsupportedConfigurationError,
    ValidationError,
)
from .grids import GridSpec, check_points, signed_log_samples
from .system import LinearSystem

MODE_STATE_FIRST = "state-cost-first"
MODE_CONTROL_FIRST = "control-cost-first"

DEFAULT_TOLERANCES = {
    "tol_dual": 1e-9,
    "tol_riccati": 1e-6,
    "tol_kkt": 1e-6,
    "tol_bellman": 1e-6,
    "margin_floor": 1e-8,
}

_EIG_SLACK = 1e-10  # numerical slack when turning eigenvalue margins into verdicts

CERTIFICATE_FORMAT = "bregctl-certificate-v1"


def _as_matrix(M, n: int) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape != (n, n):
        raise ValidationError(f"M must be {n}x{n}, got {M.shape}")
    if not np.allclose(M, M.T, atol=1e-12 * max(1.0, float(np.abs(M).max()))):
        raise ValidationError("M must be symmetric")
    return 0.5 * (M + M.T)


def _require_pd(M: np.ndarray, label: str = "M"):
    eigs = np.linalg.eigvalsh(M)
    if eigs.min() <= 0:
        raise ValidationError(f"{label} must be positive definite "
                              f"(min eigenvalue {eigs.min():.3e})")


def _min_eig(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())


def _hessian_matrix(phi: ConvexFunction, x) -> np.ndarray:
    h = phi.hessian(x)
    if phi.dim == 1:
        return np.array([[float(np.asarray(h, float))]])
    return np.atleast_2d(np.asarray(h, dtype=float))


# ---------------------------------------------------------------------------
# Feasibility checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeasibilityReport:
    """Outcome of a matrix-inequality sweep over the sample grid."""

    feasible: bool
    margins: dict
    numeric_convexity_verdict: Optional[bool]
    route: Optional[str]
    grid_size: int

    def min_margin(self) -> float:
        return min(self.margins.values())


def check_M_given_q(system: LinearSystem, q: ConvexFunction, M,
                    spec: GridSpec = GridSpec()) -> FeasibilityReport:
    """Feasibility of M for a designer-chosen state cost.

    Evaluates  M - A'MA/2 <= A' hess q(x) A / 2  at every grid point
    (fully or over-actuated systems only) and separately derives the dual
    companion control cost on the grid to check its convexity and
    positivity by second differences.  Distributional kinks contribute
    their two-sided-limit Hessian, which is the conservative reading.
    """
    system.require_invertible()
    if system.m < system.n:
        raise UnsupportedConfigurationError(
            f"state-cost-first design needs m >= n inputs, got m={system.m} < n={system.n}")
    n = system.n
    M = _as_matrix(M, n)
    _require_pd(M)
    A = system.A
    lhs = M - 0.5 * A.T @ M @ A
    pts = check_points(n, spec)
    worst = math.inf
    for x in pts:
        H = _hessian_matrix(q, float(x) if n == 1 else x)
        slack = _min_eig(0.5 * A.T @ H @ A - lhs)
        worst = min(worst, slack)
    scale_ref = max(1.0, float(np.abs(lhs).max()))
    feasible = worst >= -_EIG_SLACK * scale_ref
    verdict = _companion_r_convex_verdict(system, q, M, spec)
    return FeasibilityReport(
        feasible=bool(feasible),
        margins={"state_cost_condition": worst},
        numeric_convexity_verdict=verdict,
        route=None,
        grid_size=len(pts),
    )


def _companion_r_convex_verdict(system, q, M, spec: GridSpec) -> bool:
    """Direct second-difference convexity/positivity verdict on the derived
    dual control cost, reported independently of the matrix condition."""
    rts = _control_dual_candidate(system, q, M)
    try:
        report = _shape_report_any(rts, halfwidth=_dual_halfwidth(system, M, spec),
                                   points=801 if rts.dim == 1 else None)
    except (ConvergenceError, cv.UnboundedDualError):
        return False
    return bool(report.min_second_difference >= -1e-8 and report.min_value >= -1e-8)


def _dual_halfwidth(system: LinearSystem, M: np.ndarray, spec: GridSpec) -> float:
    gain = np.linalg.norm(2.0 * system.B.T @ np.linalg.solve(system.A.T, M), 2)
    return max(1.0, gain * spec.hi * 1.25)


def check_M_given_r(system: LinearSystem, r: ConvexFunction, M,
                    spec: GridSpec = GridSpec(), bounds=None,
                    route: Optional[str] = None) -> FeasibilityReport:
    """Feasibility of M for a designer-chosen control cost.

    Route "stable" (spectral radius of A below one) samples

        (A M^{-1} A' - M^{-1})/2  <=  B hess r*(B' xi) B'  <=  A M^{-1} A'/2

    over the grid.  Route "bounds" works for any A given positive definite
    quadratic bounds  xi'L xi <= r*(B' xi) <= xi'U xi  (supplied, or
    estimated from grid ratios when the dual is quadratically sandwiched)
    and checks  U <= A M^{-1} A'/4 <= L + M^{-1}.
    """
    system.require_invertible()
    n = system.n
    M = _as_matrix(M, n)
    _require_pd(M)
    A = system.A
    B = system.B
    Minv = np.linalg.inv(M)
    AMA = A @ Minv @ A.T
    if route is None:
        route = "stable" if system.is_stable() else "bounds"
    pts = check_points(n, spec)

    if route == "stable":
        if not system.is_stable():
            raise InsufficientHypothesesError(
                "the stable-A route needs spectral radius(A) < 1; "
                f"got {system.spectral_radius():.4f}")
        lhs = 0.5 * (AMA - Minv)
        rhs = 0.5 * AMA
        lo_margin = math.inf
        hi_margin = math.inf
        for xi in pts:
            nu = system.B.T @ (np.array([xi]) if n == 1 else xi)
            hstar = dual_hessian(r, float(nu[0]) if system.m == 1 else nu)
            Hs = np.array([[float(np.asarray(hstar, float))]]) if system.m == 1 \
                else np.atleast_2d(np.asarray(hstar, float))
            mid = B @ Hs @ B.T
            lo_margin = min(lo_margin, _min_eig(mid - lhs))
            hi_margin = min(hi_margin, _min_eig(rhs - mid))
        margins = {"stable_route_lower": lo_margin, "stable_route_upper": hi_margin}
        scale_ref = max(1.0, float(np.abs(rhs).max()))
        feasible = min(margins.values()) >= -_EIG_SLACK * scale_ref
        return FeasibilityReport(bool(feasible), margins, None, "stable", len(pts))

    if bounds is not None:
        L, U = (np.atleast_2d(np.asarray(b, float)) for b in bounds)
    else:
        L, U = _estimate_dual_quadratic_bounds(system, r, pts)
    lo_margin = _min_eig(0.25 * AMA - U)
    hi_margin = _min_eig(L + Minv - 0.25 * AMA)
    margins = {"bounds_route_lower": lo_margin, "bounds_route_upper": hi_margin}
    scale_ref = max(1.0, float(np.abs(AMA).max()))
    feasible = min(margins.values()) >= -_EIG_SLACK * scale_ref
    return FeasibilityReport(bool(feasible), margins, None, "bounds", len(pts))


def _estimate_dual_quadratic_bounds(system, r, pts):
    """Grid estimate of PD matrices L, U with L <= r*(B'.)/|.|^2 <= U.

    Only meaningful when the dual control cost is quadratically sandwiched;
    a vanishing lower ratio means no strong convexity and the route is
    rejected.
    """
    ratios = []
    for xi in pts:
        x = np.array([xi]) if system.n == 1 else np.asarray(xi, float)
        nrm2 = float(x @ x)
        if nrm2 <= 0:
            continue
        nu = system.B.T @ x
        val = dual_value(r, float(nu[0]) if system.m == 1 else nu)
        ratios.append(val / nrm2)
    ratios = np.asarray(ratios)
    rmin, rmax = float(ratios.min()), float(ratios.max())
    if rmin <= 1e-9 * max(rmax, 1.0) or rmax <= 0:
        raise InsufficientHypothesesError(
            "A is unstable and the dual control cost admits no positive "
            f"definite quadratic bounds on the grid (ratio range [{rmin:.3e}, "
            f"{rmax:.3e}]); supply bounds explicitly or stabilize A")
    eye = np.eye(system.n)
    return rmin * eye, rmax * eye


# ---------------------------------------------------------------------------
# Companion-cost derivations
# ---------------------------------------------------------------------------


def make_p(q: ConvexFunction, M: np.ndarray) -> ConvexFunction:
    """p(x) = q(x) + x'Mx, with closed forms preserved when q is cataloged."""
    n = M.shape[0]
    if q.meta and q.meta.get("kind") == "quadratic":
        P = q.meta["P"]
        if np.ndim(P) == 0:
            return cv.quadratic(float(P) + float(M[0, 0]), name="p")
        return cv.quadratic(np.asarray(P, float) + M, name="p")
    if q.meta and q.meta.get("kind") == "abs-plus-quadratic" and n == 1:
        return cv.abs_plus_quadratic(q.meta["epsilon"] + float(M[0, 0]),
                                     q.meta["weight"], name="p")
    quad = cv.quadratic(float(M[0, 0]) if n == 1 else M, name="value-quadratic")
    return cv.add(q, quad, name="p")


def _control_dual_candidate(system: LinearSystem, q: ConvexFunction,
                            M: np.ndarray) -> ConvexFunction:
    """The candidate dual control cost induced by (q, M):
    nu -> -p*(pinv(B') nu) + nu' pinv(B) A M^{-1} A' pinv(B') nu / 4."""
    p = make_p(q, M)
    p_star = conjugate(p)
    A = system.A
    B = system.B
    Minv = np.linalg.inv(M)
    B_pinv = np.linalg.pinv(B)            # (m, n)
    C = B_pinv.T                          # (B')^dagger, (n, m)
    S = 0.25 * B_pinv @ A @ Minv @ A.T @ B_pinv.T

    if system.m == 1:
        c = float(C[0, 0]) if system.n == 1 else None
        s = float(S[0, 0])
        if system.n == 1:
            def value(nu):
                nu = np.asarray(nu, float)
                return -np.asarray(p_star.value(c * nu), float) + s * nu ** 2

            def grad(nu):
                nu = np.asarray(nu, float)
                return -c * np.asarray(p_star.gradient(c * nu), float) + 2.0 * s * nu

            def hess(nu):
                nu = np.asarray(nu, float)
                return -c * c * np.asarray(p_star.hessian(c * nu), float) + 2.0 * s
        else:
            def value(nu):
                nu = np.asarray(nu, float)
                xi = C[:, 0] * nu[..., None] if nu.ndim else C[:, 0] * nu
                return -float(p_star.value(np.asarray(xi, float))) + s * float(nu) ** 2

            def grad(nu):
                xi = C[:, 0] * float(nu)
                return -float(B_pinv[0] @ np.asarray(p_star.gradient(xi), float)) + 2.0 * s * float(nu)

            def hess(nu):
                xi = C[:, 0] * float(nu)
                Hp = np.atleast_2d(np.asarray(p_star.hessian(xi), float))
                return -float(B_pinv[0] @ Hp @ B_pinv[0]) + 2.0 * s
        return ConvexFunction(dim=1, value=value, gradient=grad, hessian=hess,
                              kind=cv.KIND_BICONJUGATE, name="control-dual-candidate")

    def value(nu):
        nu = np.asarray(nu, float).reshape(system.m)
        return -float(p_star.value(C @ nu)) + float(nu @ S @ nu)

    def grad(nu):
        nu = np.asarray(nu, float).reshape(system.m)
        return -B_pinv @ np.asarray(p_star.gradient(C @ nu), float) + 2.0 * (S @ nu)

    def hess(nu):
        nu = np.asarray(nu, float).reshape(system.m)
        Hp = np.atleast_2d(np.asarray(p_star.hessian(C @ nu), float))
        return -B_pinv @ Hp @ B_pinv.T + 2.0 * S

    return ConvexFunction(dim=system.m, value=value, gradient=grad, hessian=hess,
                          kind=cv.KIND_BICONJUGATE, name="control-dual-candidate")


def derive_r_from_q(system: LinearSystem, q: ConvexFunction, M,
                    spec: GridSpec = GridSpec()) -> ConvexFunction:
    """Companion control cost for a chosen state cost: the biconjugate of
    the induced dual candidate.

    Raises ``InfeasibleDerivationError`` (carrying the worst violation) when
    the candidate dual fails convexity or positivity on the grid, in which
    case no admissible control cost exists for this M.
    """
    system.require_invertible()
    if system.m < system.n:
        raise UnsupportedConfigurationError(
            f"state-cost-first design needs m >= n inputs, got m={system.m} < n={system.n}")
    M = _as_matrix(M, system.n)
    _require_pd(M)
    rts = _control_dual_candidate(system, q, M)
    report = _shape_report_any(rts, halfwidth=_dual_halfwidth(system, M, spec),
                               points=801 if rts.dim == 1 else None)
    worst = min(report.min_second_difference, report.min_value)
    if worst < -1e-8:
        raise InfeasibleDerivationError(
            "induced dual control cost is not convex and positive on the grid "
            f"(worst violation {worst:.3e}); M is infeasible for this state cost",
            worst_violation=worst)
    r = conjugate(rts)
    return ConvexFunction(
        dim=r.dim, value=r.value, gradient=r.gradient, hessian=r.hessian,
        kind=cv.KIND_BICONJUGATE, name="derived-control-cost", scale=r.scale,
        conjugate_value=r.conjugate_value, conjugate_gradient=r.conjugate_gradient,
        conjugate_hessian=r.conjugate_hessian)


def derive_q_from_r(system: LinearSystem, r: ConvexFunction, M,
                    spec: GridSpec = GridSpec()):
    """Companion state cost for a chosen control cost.

    Builds the dual value-shape p*(xi) = -r*(B'xi) + xi'A M^{-1}A' xi/4,
    recovers p by conjugation, and peels off the quadratic to get q.
    Both are validated for the admissible-cost shape on the grid.
    """
    system.require_invertible()
    n = system.n
    M = _as_matrix(M, n)
    _require_pd(M)
    A, B = system.A, system.B
    Minv = np.linalg.inv(M)
    T = 0.25 * A @ Minv @ A.T
    r_star = conjugate(r)

    if n == 1:
        bvec = B[0]
        t = float(T[0, 0])
        if system.m == 1:
            b = float(bvec[0])

            def ps_value(xi):
                xi = np.asarray(xi, float)
                return -np.asarray(r_star.value(b * xi), float) + t * xi ** 2

            def ps_grad(xi):
                xi = np.asarray(xi, float)
                return -b * np.asarray(r_star.gradient(b * xi), float) + 2.0 * t * xi

            def ps_hess(xi):
                xi = np.asarray(xi, float)
                return -b * b * np.asarray(r_star.hessian(b * xi), float) + 2.0 * t
        else:
            def ps_value(xi):
                nu = bvec * float(xi)
                return -float(r_star.value(nu)) + t * float(xi) ** 2

            def ps_grad(xi):
                nu = bvec * float(xi)
                return -float(bvec @ np.asarray(r_star.gradient(nu), float)) + 2.0 * t * float(xi)

            def ps_hess(xi):
                nu = bvec * float(xi)
                Hr = np.atleast_2d(np.asarray(r_star.hessian(nu), float))
                return -float(bvec @ Hr @ bvec) + 2.0 * t
        p_star = ConvexFunction(dim=1, value=ps_value, gradient=ps_grad,
                                hessian=ps_hess, kind=cv.KIND_BICONJUGATE,
                                name="value-shape-dual")
    else:
        def ps_value(xi):
            xi = np.asarray(xi, float).reshape(n)
            nu = B.T @ xi
            return -float(r_star.value(float(nu[0]) if system.m == 1 else nu)) + float(xi @ T @ xi)

        def ps_grad(xi):
            xi = np.asarray(xi, float).reshape(n)
            nu = B.T @ xi
            g = r_star.gradient(float(nu[0]) if system.m == 1 else nu)
            g = np.atleast_1d(np.asarray(g, float))
            return -B @ g + 2.0 * (T @ xi)

        def ps_hess(xi):
            xi = np.asarray(xi, float).reshape(n)
            nu = B.T @ xi
            Hr = r_star.hessian(float(nu[0]) if system.m == 1 else nu)
            Hr = np.atleast_2d(np.asarray(Hr, float))
            return -B @ Hr @ B.T + 2.0 * T
        p_star = ConvexFunction(dim=n, value=ps_value, gradient=ps_grad,
                                hessian=ps_hess, kind=cv.KIND_BICONJUGATE,
                                name="value-shape-dual")

    shape = _shape_report_any(p_star, halfwidth=_xi_halfwidth(system, M, spec),
                              points=801 if n == 1 else None)
    worst = min(shape.min_second_difference, shape.min_value)
    if worst < -1e-8:
        raise InfeasibleDerivationError(
            "dual value shape is not convex and positive on the grid "
            f"(worst violation {worst:.3e}); M is infeasible for this control cost",
            worst_violation=worst)

    p = conjugate(p_star)
    p = ConvexFunction(dim=p.dim, value=p.value, gradient=p.gradient,
                       hessian=p.hessian, kind=cv.KIND_BICONJUGATE,
                       name="derived-value-shape", scale=p.scale,
                       conjugate_value=p.conjugate_value,
                       conjugate_gradient=p.conjugate_gradient,
                       conjugate_hessian=p.conjugate_hessian)
    q = _subtract_quadratic(p, M)
    qshape = _shape_report_any(q, halfwidth=min(spec.hi, 50.0),
                               points=401 if n == 1 else None)
    worst_q = min(qshape.min_second_difference, qshape.min_value)
    if worst_q < -1e-8 or abs(qshape.value_at_zero) > 1e-8:
        raise InfeasibleDerivationError(
            "derived state cost fails convexity or positivity on the grid "
            f"(worst violation {worst_q:.3e})", worst_violation=worst_q)
    return q, p


def _subtract_quadratic(p: ConvexFunction, M: np.ndarray) -> ConvexFunction:
    n = M.shape[0]
    if n == 1:
        m = float(M[0, 0])

        def value(x):
            x = np.asarray(x, float)
            return np.asarray(p.value(x), float) - m * x ** 2

        def grad(x):
            x = np.asarray(x, float)
            return np.asarray(p.gradient(x), float) - 2.0 * m * x

        def hess(x):
            x = np.asarray(x, float)
            return np.asarray(p.hessian(x), float) - 2.0 * m
        return ConvexFunction(dim=1, value=value, gradient=grad, hessian=hess,
                              kind=cv.KIND_BICONJUGATE, name="derived-state-cost",
                              scale=p.scale)

    def value(x):
        x = np.asarray(x, float).reshape(n)
        return float(p.value(x)) - float(x @ M @ x)

    def grad(x):
        x = np.asarray(x, float).reshape(n)
        return np.asarray(p.gradient(x), float) - 2.0 * (M @ x)

    def hess(x):
        x = np.asarray(x, float).reshape(n)
        return np.atleast_2d(np.asarray(p.hessian(x), float)) - 2.0 * M
    return ConvexFunction(dim=n, value=value, gradient=grad, hessian=hess,
                          kind=cv.KIND_BICONJUGATE, name="derived-state-cost",
                          scale=p.scale)


def _xi_halfwidth(system: LinearSystem, M: np.ndarray, spec: GridSpec) -> float:
    gain = np.linalg.norm(2.0 * np.linalg.solve(system.A.T, M), 2)
    return max(1.0, gain * spec.hi * 1.25)


def _shape_report_any(phi: ConvexFunction, halfwidth: float, points=None):
    """Admissible-cost shape evidence for scalar or matrix arguments."""
    if phi.dim == 1:
        return cv.cost_shape_report(phi, halfwidth=halfwidth, points=points or 2001)
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(1234), np.uint64(phi.dim)]))
    dirs = rng.standard_normal((64, phi.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    ts = np.linspace(-halfwidth, halfwidth, 41)
    v0 = float(phi.value(np.zeros(phi.dim)))
    g0 = float(np.linalg.norm(np.asarray(phi.gradient(np.zeros(phi.dim)), float)))
    min_val = math.inf
    min_second = math.inf
    even_gap = 0.0
    for d in dirs:
        vals = np.array([float(phi.value(t * d)) for t in ts])
        finite = np.isfinite(vals)
        scale = 1.0 + float(np.max(np.abs(vals[finite]))) if finite.any() else 1.0
        min_val = min(min_val, float(np.min(vals)))
        second = vals[:-2] - 2.0 * vals[1:-1] + vals[2:]
        second = second[np.isfinite(second)]
        if second.size:
            min_second = min(min_second, float(np.min(second)) / scale)
        even_gap = max(even_gap, float(np.max(np.abs(vals - vals[::-1]))) / scale)
    return cv.CostShapeReport(value_at_zero=v0, gradient_norm_at_zero=g0,
                              max_evenness_gap=even_gap, min_value=min_val,
                              min_second_difference=min_second)


# ---------------------------------------------------------------------------
# Controller and pointwise optimality diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Controller:
    """State feedback u = grad r*(-2 B' A^{-T} M x).

    ``feedback_map`` overrides the dual-gradient composition with a closed
    form (the printed piecewise laws use this); it must agree with the
    composition wherever the printed law is consistent.
    """

    system: LinearSystem
    M: np.ndarray
    r_dual_gradient: Callable
    feedback_map: Optional[Callable] = None
    gain: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        G = -2.0 * self.system.B.T @ np.linalg.solve(self.system.A.T, self.M)
        object.__setattr__(self, "gain", G)

    def feedback(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(self.system.n)
        if self.feedback_map is not None:
            return np.atleast_1d(np.asarray(self.feedback_map(x), dtype=float))
        return np.atleast_1d(np.asarray(self.r_dual_gradient(self.gain @ x), dtype=float))

    def feedback_scalar(self, x: float) -> float:
        if self.system.m != 1:
            raise ValidationError("feedback_scalar needs a single-input system")
        return float(self.feedback(np.array([float(x)]))[0])


def build_controller(system: LinearSystem, r: ConvexFunction, M) -> Controller:
    """The optimal feedback for a consistent (q, r, p, M) tuple."""
    system.require_invertible()
    M = _as_matrix(M, system.n)
    _require_pd(M)
    if r.dim == 1:
        def rdg(nu):
            return np.array([float(dual_gradient(r, float(np.atleast_1d(nu)[0])))])
    else:
        def rdg(nu):
            return np.asarray(dual_gradient(r, nu), dtype=float).reshape(system.m)
    return Controller(system=system, M=M, r_dual_gradient=rdg)


def _subgradient_interval_1d(phi: ConvexFunction, v: float):
    """One-sided bracket [g_lo, g_hi] of the subdifferential at v; collapses
    to the gradient at smooth points."""
    delta = 1e-9 * (1.0 + abs(v))
    g_mid = float(np.asarray(phi.gradient(v), float))
    try:
        g_lo = float(np.asarray(phi.gradient(v - delta), float))
        g_hi = float(np.asarray(phi.gradient(v + delta), float))
    except cv.DomainError:
        return g_mid, g_mid
    if g_hi - g_lo > 1e-7 * (1.0 + abs(g_mid)):
        return g_lo, g_hi
    return g_mid, g_mid


def kkt_residual(system: LinearSystem, r: ConvexFunction, p: ConvexFunction,
                 M, x, u):
    """Stationarity residuals of the one-step problem at (x, u).

    At smooth points these are the classical
    rho1 = grad r(u) + B' grad p(Ax+Bu) and rho2 = A' grad p(Ax+Bu) - 2Mx.
    At scalar kinks of p (a sparsity cost puts one at the origin, exactly
    where a dead-beat loop lands) the subgradient of p is selected
    consistently: the unique g solving the second condition is projected
    onto the subdifferential.  At a saturated input, rho1 is the distance
    from -B'g to the boundary subgradient ray of r.
    """
    M = _as_matrix(M, system.n)
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(system.n)
    u = np.atleast_1d(np.asarray(u, dtype=float)).reshape(system.m)
    z = system.A @ x + system.B @ u
    if p.dim == 1:
        zf = float(z[0])
        g_lo, g_hi = _subgradient_interval_1d(p, zf)
        if g_hi > g_lo:
            g_target = 2.0 * float((M @ x)[0]) / float(system.A[0, 0])
            gp = np.array([min(max(g_target, g_lo), g_hi)])
        else:
            gp = np.array([g_lo])
    else:
        gp = np.atleast_1d(np.asarray(p.gradient(z), dtype=float)).reshape(system.n)
    rho2 = system.A.T @ gp - 2.0 * (M @ x)
    target = -system.B.T @ gp
    radius = r.domain_halfwidth
    if r.dim == 1:
        uu = float(u[0])
        t = float(target[0])
        if math.isfinite(radius) and abs(uu) >= radius * (1.0 - 1e-12):
            edge = float(np.asarray(r.gradient(math.copysign(radius, uu)), float))
            rho1 = np.array([max(0.0, edge - t) if uu > 0 else max(0.0, t - edge)])
        else:
            r_lo, r_hi = _subgradient_interval_1d(r, uu)
            if r_hi > r_lo:
                rho1 = np.array([max(r_lo - t, t - r_hi, 0.0)])
            else:
                rho1 = np.array([r_lo - t])
    else:
        gr = np.atleast_1d(np.asarray(r.gradient(u), dtype=float)).reshape(system.m)
        rho1 = gr - target
    return rho1, rho2


def lyapunov_identity_residual(system: LinearSystem, q: ConvexFunction,
                               r: ConvexFunction, p: ConvexFunction,
                               controller: Controller, x) -> float:
    """Relative residual of p(Ax+Bu*) - p(x) + r(u*) + q(x) = 0."""
    x = np.atleast_1d(np.asarray(x, dtype=float)).reshape(system.n)
    u = controller.feedback(x)
    z = system.A @ x + system.B @ u
    pz = float(p.value(float(z[0]))) if p.dim == 1 else float(p.value(z))
    px = float(p.value(float(x[0]))) if p.dim == 1 else float(p.value(x))
    ru = float(r.value(float(u[0]))) if r.dim == 1 else float(r.value(u))
    qx = float(q.value(float(x[0]))) if q.dim == 1 else float(q.value(x))
    resid = pz - px + ru + qx
    return abs(resid) / (1.0 + abs(pz) + abs(px) + abs(ru) + abs(qx))


def _minimize_r_plus_p_scalar(system: LinearSystem, r: ConvexFunction,
                              p: ConvexFunction, x: float) -> float:
    """min_u r(u) + p(a x + b u) for scalar plants, honoring dom r."""
    a, b = system.a, system.b

    def fval(u):
        ru = float(np.asarray(r.value(u), float))
        if not math.isfinite(ru):
            return math.inf
        return ru + float(np.asarray(p.value(a * x + b * u), float))

    def fgrad(u):
        return float(np.asarray(r.gradient(u), float)) + b * float(np.asarray(p.gradient(a * x + b * u), float))

    radius = r.domain_halfwidth
    lo_dom = -radius
    hi_dom = radius
    s = max(abs(x), 1.0)
    g0 = fgrad(0.0 if radius is math.inf else max(min(0.0, hi_dom), lo_dom))
    # bracket the minimizer with the monotone derivative
    if g0 >= 0:
        hi = 0.0
        lo = max(-s, lo_dom)
        while fgrad(lo) > 0:
            if lo <= lo_dom:
                lo = lo_dom
                break
            lo = max(lo * 2.0 if lo < 0 else -s, lo_dom)
            if lo < -1e13 * s:
                raise ConvergenceError("inner minimization bracket diverged")
    else:
        lo = 0.0
        hi = min(s, hi_dom)
        while fgrad(hi) < 0:
            if hi >= hi_dom:
                hi = hi_dom
                break
            hi = min(hi * 2.0, hi_dom)
            if hi > 1e13 * s:
                raise ConvergenceError("inner minimization bracket diverged")
    u = cv._golden_argmax(lambda u: -fval(u), lo, hi,
                          residual=fgrad, res_tol=1e-11)
    candidates = [u, lo, hi]
    best = min(candidates, key=fval)
    return fval(best)


def bellman_fixed_point_check(certificate: "SynthesisCertificate", grid) -> float:
    """Max relative gap between min_u [r(u) + p(Ax+Bu)] and x'Mx on a grid.

    The inner minimization reuses the shared one-dimensional optimizer for
    scalar plants and damped-Newton ascent otherwise.
    """
    system = certificate.system
    M = certificate.M
    r = certificate.r
    p = certificate.p
    worst = 0.0
    for x in np.atleast_1d(np.asarray(grid, dtype=float)) if system.n == 1 \
            else np.atleast_2d(np.asarray(grid, dtype=float)):
        if system.n == 1:
            xval = float(x)
            target = float(M[0, 0]) * xval * xval
            minval = _minimize_r_plus_p_scalar(system, r, p, xval)
        else:
            xvec = np.asarray(x, float).reshape(system.n)
            target = float(xvec @ M @ xvec)
            minval = _minimize_r_plus_p_nd(system, r, p, xvec)
        worst = max(worst, abs(minval - target) / (1.0 + abs(target)))
    return worst


def _minimize_r_plus_p_nd(system, r, p, x):
    def neg_val(u):
        return -(float(r.value(u)) + float(p.value(system.A @ x + system.B @ u)))

    def neg_grad(u):
        z = system.A @ x + system.B @ u
        return -(np.asarray(r.gradient(u), float)
                 + system.B.T @ np.asarray(p.gradient(z), float))

    hess = None
    if r.hessian is not None and p.hessian is not None:
        def hess(u):
            z = system.A @ x + system.B @ u
            return (np.atleast_2d(np.asarray(r.hessian(u), float))
                    + system.B.T @ np.atleast_2d(np.asarray(p.hessian(z), float)) @ system.B)
    u, val = cv._maximize_concave_nd(neg_val, neg_grad, np.zeros(system.m),
                                     tol=1e-10, hessian=hess)
    return -val


# ---------------------------------------------------------------------------
# Identity validation (independent numeric route)
# ---------------------------------------------------------------------------


def riccati_residual(system: LinearSystem, q: ConvexFunction, r: ConvexFunction,
                     p: ConvexFunction, M, xi_samples) -> float:
    """Max relative residual of p*(xi) + r*(B'xi) = xi'A M^{-1}A'xi / 4.

    Both conjugates are recomputed numerically from the primal functions,
    never from attached closed forms, so this check is independent of the
    construction that produced the certificate.  Since the control cost is
    even, r*(B'xi) and r*(-B'xi) must agree; their gap is folded into the
    residual.
    """
    M = _as_matrix(M, system.n)
    AMA = system.A @ np.linalg.inv(M) @ system.A.T
    worst = 0.0
    for xi in np.atleast_1d(np.asarray(xi_samples, dtype=float)) if system.n == 1 \
            else np.atleast_2d(np.asarray(xi_samples, dtype=float)):
        if system.n == 1:
            xv = np.array([float(xi)])
        else:
            xv = np.asarray(xi, float).reshape(system.n)
        quad = 0.25 * float(xv @ AMA @ xv)
        ps = dual_value(p, float(xv[0]) if p.dim == 1 else xv, force_numeric=True)
        nu = system.B.T @ xv
        nu_arg = float(nu[0]) if r.dim == 1 else nu
        rs = dual_value(r, nu_arg, force_numeric=True)
        rs_neg = dual_value(r, -nu_arg if r.dim == 1 else -nu, force_numeric=True)
        denom = 1.0 + abs(ps) + abs(rs) + abs(quad)
        worst = max(worst, abs(ps + rs - quad) / denom, abs(rs - rs_neg) / denom)
    return worst


def pq_consistency_residual(q: ConvexFunction, p: ConvexFunction, M, samples) -> float:
    """Max |p(x) - q(x) - x'Mx| (relative) over the sample set."""
    M = np.atleast_2d(np.asarray(M, float))
    n = M.shape[0]
    worst = 0.0
    for x in np.atleast_1d(np.asarray(samples, dtype=float)) if n == 1 \
            else np.atleast_2d(np.asarray(samples, dtype=float)):
        if n == 1:
            xv = float(x)
            quad = float(M[0, 0]) * xv * xv
            pv = float(np.asarray(p.value(xv), float))
            qv = float(np.asarray(q.value(xv), float))
        else:
            xv = np.asarray(x, float).reshape(n)
            quad = float(xv @ M @ xv)
            pv = float(p.value(xv))
            qv = float(q.value(xv))
        worst = max(worst, abs(pv - qv - quad) / (1.0 + abs(pv) + abs(qv) + abs(quad)))
    return worst


# ---------------------------------------------------------------------------
# Certificates
# ---------------------------------------------------------------------------


@dataclass
class SynthesisCertificate:
    """A validated (M, q, r, p) tuple plus the evidence that produced it."""

    system: LinearSystem
    M: np.ndarray
    mode: str
    q: ConvexFunction
    r: ConvexFunction
    p: ConvexFunction
    margins: dict
    sample_set: np.ndarray
    family: Optional[str] = None
    params: dict = field(default_factory=dict)
    grid_spec: GridSpec = field(default_factory=GridSpec)
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))

    def controller(self) -> Controller:
        return build_controller(self.system, self.r, self.M)

    def riccati_residual(self, xi_samples=None) -> float:
        xis = xi_samples if xi_samples is not None else self.sample_set
        return riccati_residual(self.system, self.q, self.r, self.p, self.M, xis)

    def to_json_dict(self) -> dict:
        return {
            "format": CERTIFICATE_FORMAT,
            "A": self.system.A.tolist(),
            "B": self.system.B.tolist(),
            "noise": {
                "family": self.system.noise.family,
                "covariance": self.system.noise.covariance.tolist(),
            },
            "M": self.M.tolist(),
            "mode": self.mode,
            "family": self.family,
            "params": self.params,
            "margins": self.margins,
            "grid_spec": self.grid_spec.to_dict(),
            "tolerances": self.tolerances,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "SynthesisCertificate":
        from .families import certificate_costs  # deferred: families builds on synthesis
        from .system import NoiseModel

        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != CERTIFICATE_FORMAT:
            raise ValidationError(f"unrecognized certificate format {doc.get('format')!r}")
        noise = NoiseModel(doc["noise"]["family"], np.asarray(doc["noise"]["covariance"]))
        system = LinearSystem(np.asarray(doc["A"]), np.asarray(doc["B"]), noise)
        M = np.asarray(doc["M"], dtype=float)
        spec = GridSpec.from_dict(doc["grid_spec"])
        q, r, p = certificate_costs(doc["family"], doc["params"], system, M, doc["mode"])
        sample_set = signed_log_samples(200, 1e-3, 30.0)
        return cls(system=system, M=M, mode=doc["mode"], q=q, r=r, p=p,
                   margins=doc["margins"], sample_set=sample_set,
                   family=doc["family"], params=doc["params"], grid_spec=spec,
                   tolerances=doc["tolerances"])


def default_xi_samples(system: LinearSystem, count: int = 200) -> np.ndarray:
    if system.n == 1:
        return signed_log_samples(count, 1e-3, 30.0)
    mags = signed_log_samples(count, 1e-3, 30.0)
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(7177), np.uint64(system.n)]))
    dirs = rng.standard_normal((len(mags), system.n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * np.abs(mags)[:, None]


def validate_certificate(cert: SynthesisCertificate) -> dict:
    """Re-validate the certificate invariants; returns worst residuals."""
    _require_pd(cert.M)
    riccati = cert.riccati_residual()
    pq = pq_consistency_residual(cert.q, cert.p, cert.M, cert.sample_set
                                 if cert.system.n == 1 else
                                 default_xi_samples(cert.system, 50))
    return {"riccati": riccati, "pq_consistency": pq,
            "M_min_eig": _min_eig(cert.M)}


def assemble_certificate(system, M, mode, q, r, p, margins, family=None,
                         params=None, spec: GridSpec = GridSpec(),
                         tolerances=None, validate: bool = True) -> SynthesisCertificate:
    cert = SynthesisCertificate(
        system=system, M=_as_matrix(M, system.n), mode=mode, q=q, r=r, p=p,
        margins=dict(margins), sample_set=default_xi_samples(system),
        family=family, params=dict(params or {}), grid_spec=spec,
        tolerances=dict(tolerances or DEFAULT_TOLERANCES))
    if validate:
        resid = validate_certificate(cert)
        tol = cert.tolerances.get("tol_riccati", 1e-6)
        if resid["riccati"] > tol or resid["pq_consistency"] > tol:
            raise InfeasibleDerivationError(
                f"certificate failed identity validation: {resid}",
                worst_violation=max(resid["riccati"], resid["pq_consistency"]))
    return cert


# ---------------------------------------------------------------------------
# Search for M
# ---------------------------------------------------------------------------

OBJECTIVES = ("max-m-scalar", "min-trace", "max-margin")


def _certificate_for(system, fixed_cost, mode, M, margins, spec, family=None,
                     params=None) -> SynthesisCertificate:
    if mode == MODE_STATE_FIRST:
        q = fixed_cost
        r = derive_r_from_q(system, q, M, spec)
        p = make_p(q, _as_matrix(M, system.n))
    elif mode == MODE_CONTROL_FIRST:
        r = fixed_cost
        q, p = derive_q_from_r(system, r, M, spec)
    else:
        raise ValidationError(f"unknown synthesis mode {mode!r}")
    return assemble_certificate(system, M, mode, q, r, p, margins, family=family,
                                params=params, spec=spec)


def _feasibility(system, fixed_cost, mode, M, spec, bounds=None) -> FeasibilityReport:
    if mode == MODE_STATE_FIRST:
        return check_M_given_q(system, fixed_cost, M, spec)
    if mode == MODE_CONTROL_FIRST:
        return check_M_given_r(system, fixed_cost, M, spec, bounds=bounds)
    raise ValidationError(f"unknown synthesis mode {mode!r}")


def search_M(system: LinearSystem, fixed_cost: ConvexFunction, mode: str,
             objective: str = "max-m-scalar", m_hi: float = 100.0,
             spec: GridSpec = GridSpec(), bounds=None) -> SynthesisCertificate:
    """Search for a feasible positive definite M and emit a full certificate.

    Scalar plants: a log sweep of m locates the feasible set, then bisection
    (absolute tolerance 1e-6) pins the requested edge: the largest feasible
    m (``max-m-scalar``), the smallest sampled one (``min-trace``), or the
    margin-maximizing interior point (``max-margin``).  Matrix plants use a
    diagonal(-rescaled) parameterization with coordinate descent on the
    eigenvalue margins; any M with all margins above the floor is accepted.
    The returned certificate is always re-validated against the identity
    invariants.
    """
    system.require_invertible()
    if objective not in OBJECTIVES:
        raise ValidationError(f"objective must be one of {OBJECTIVES}")
    shape = _shape_report_any(fixed_cost, halfwidth=min(spec.hi, 50.0),
                              points=401 if fixed_cost.dim == 1 else None)
    if not shape.ok(1e-6):
        raise ValidationError(
            "fixed cost is not an admissible design cost (needs zero value and "
            f"gradient at the origin, evenness, convexity): {shape}")
    if system.is_scalar:
        return _search_m_scalar(system, fixed_cost, mode, objective, m_hi, spec, bounds)
    return _search_m_matrix(system, fixed_cost, mode, objective, m_hi, spec, bounds)


def _search_m_scalar(system, fixed_cost, mode, objective, m_hi, spec, bounds):
    margin_floor = DEFAULT_TOLERANCES["margin_floor"]

    def probe(m):
        rep = _feasibility(system, fixed_cost, mode, np.array([[m]]), spec, bounds)
        return rep

    ms = np.logspace(math.log10(m_hi) - 12.0, math.log10(m_hi), 97)
    reports = [probe(m) for m in ms]
    feas = np.array([r.feasible for r in reports])
    if not feas.any():
        best = max(range(len(ms)), key=lambda i: reports[i].min_margin())
        raise InfeasibleSearchError(
            f"no feasible m in (0, {m_hi}] for {mode}; best margins at "
            f"m={ms[best]:.6g}: {reports[best].margins}",
            best_margins=reports[best].margins)

    idx = np.where(feas)[0]
    lo_i, hi_i = idx[0], idx[-1]

    def bisect_edge(m_feas, m_infeas):
        for _ in range(200):
            if abs(m_infeas - m_feas) <= 1e-6:
                break
            mid = 0.5 * (m_feas + m_infeas)
            if probe(mid).feasible:
                m_feas = mid
            else:
                m_infeas = mid
        return m_feas

    if objective == "max-m-scalar":
        if hi_i == len(ms) - 1:
            m_star = float(ms[-1])
        else:
            m_star = bisect_edge(float(ms[hi_i]), float(ms[hi_i + 1]))
    elif objective == "min-trace":
        if lo_i == 0:
            m_star = float(ms[0])
        else:
            m_star = bisect_edge(float(ms[lo_i]), float(ms[lo_i - 1]))
    else:  # max-margin: golden search on the sampled feasible interval
        lo, hi = float(ms[lo_i]), float(ms[hi_i])
        golden = (math.sqrt(5.0) - 1.0) / 2.0
        a, b = lo, hi
        c = b - golden * (b - a)
        d = a + golden * (b - a)
        fc = probe(c).min_margin()
        fd = probe(d).min_margin()
        for _ in range(60):
            if abs(b - a) <= 1e-6:
                break
            if fc >= fd:
                b, d, fd = d, c, fc
                c = b - golden * (b - a)
                fc = probe(c).min_margin()
            else:
                a, c, fc = c, d, fd
                d = a + golden * (b - a)
                fd = probe(d).min_margin()
        m_star = c if fc >= fd else d

    report = probe(m_star)
    if not report.feasible or report.min_margin() < -margin_floor:
        raise InfeasibleSearchError(
            f"search landed on infeasible m={m_star:.6g}: {report.margins}",
            best_margins=report.margins)
    M = np.array([[m_star]])
    return _certificate_for(system, fixed_cost, mode, M, report.margins, spec)


def _search_m_matrix(system, fixed_cost, mode, objective, m_hi, spec, bounds):
    margin_floor = DEFAULT_TOLERANCES["margin_floor"]
    n = system.n

    def margins_of(M):
        try:
            rep = _feasibility(system, fixed_cost, mode, M, spec, bounds)
        except (InsufficientHypothesesError, ValidationError):
            raise
        return rep

    # isotropic sweep seeds the search
    ts = np.logspace(math.log10(m_hi) - 10.0, math.log10(m_hi), 41)
    best_t = None
    best_rep = None
    for t in ts:
        rep = margins_of(t * np.eye(n))
        if best_rep is None or rep.min_margin() > best_rep.min_margin():
            best_rep, best_t = rep, t
    if objective == "max-m-scalar":
        feas_ts = [t for t in ts if margins_of(t * np.eye(n)).feasible]
        if not feas_ts:
            raise InfeasibleSearchError(
                f"no feasible isotropic M in (0, {m_hi}]; best margins "
                f"{best_rep.margins} at t={best_t:.6g}",
                best_margins=best_rep.margins)
        t_star = max(feas_ts)
        M = t_star * np.eye(n)
        rep = margins_of(M)
        return _certificate_for(system, fixed_cost, mode, M, rep.margins, spec)

    diag = np.full(n, best_t)
    rep = margins_of(np.diag(diag))
    for _ in range(8):
        improved = False
        for i in range(n):
            for factor in (1.25, 0.8):
                trial = diag.copy()
                trial[i] *= factor
                trial_rep = margins_of(np.diag(trial))
                better_margin = trial_rep.min_margin() > rep.min_margin() + 1e-12
                smaller_trace = (trial_rep.feasible and rep.feasible
                                 and trial.sum() < diag.sum() - 1e-12
                                 and trial_rep.min_margin() >= margin_floor)
                take = better_margin if objective == "max-margin" else (
                    smaller_trace or (not rep.feasible and better_margin))
                if take:
                    diag, rep = trial, trial_rep
                    improved = True
        if not improved:
            break
    if not rep.feasible or rep.min_margin() < margin_floor:
        raise InfeasibleSearchError(
            f"coordinate descent found no M with margins above {margin_floor}; "
            f"best margins {rep.margins}", best_margins=rep.margins)
    M = np.diag(diag)
    return _certificate_for(system, fixed_cost, mode, M, rep.margins, spec)
