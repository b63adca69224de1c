"""Convex-function algebra: Bregman divergences, Fenchel conjugation, and
gradient inversion.

Conventions
-----------
A ``ConvexFunction`` with ``dim == 1`` is elementwise: ``value``, ``gradient``
and ``hessian`` accept floats or arrays of any shape and return the same
shape ("hessian" is then the scalar second derivative).  With ``dim > 1``
they map ``(n,)`` points to a float, an ``(n,)`` gradient, and an ``(n, n)``
Hessian (``value`` additionally accepts batched ``(..., n)`` input for the
built-in constructors).

Extended-value functions signal their effective domain two ways: a symmetric
box via ``domain_halfwidth`` (values outside are ``inf``), and hard domain
violations (negative coordinates for the entropy) via ``DomainError``.  The
numeric conjugation machinery treats both correctly.

Dual evaluations carry a stationarity tolerance ``TOL_DUAL``; closed-form
conjugates are used when a function carries them, unless a caller forces the
numeric route (independent-oracle checks do).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    ConvergenceError,
    DomainError,
    OutOfRangeError,
    UnboundedDualError,
    ValidationError,
)

TOL_DUAL = 1e-9

KIND_ANALYTIC = "analytic-closed-form"
KIND_PIECEWISE = "piecewise-closed-form"
KIND_BICONJUGATE = "numeric-biconjugate"

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
_EXPANSION_CAP = 1e13


@dataclass(frozen=True)
class ConvexFunction:
    """A convex cost with analytic first-order (and usually second-order)
    information, plus optional closed-form conjugate data.

    Instances are immutable and all evaluations are pure, so they are safe
    to share across threads.
    """

    dim: int
    value: Callable
    gradient: Callable
    hessian: Optional[Callable] = None
    kind: str = KIND_ANALYTIC
    name: str = ""
    scale: float = 1.0
    domain_halfwidth: float = math.inf
    distributional_hessian: bool = False
    conjugate_value: Optional[Callable] = None
    conjugate_gradient: Optional[Callable] = None
    conjugate_hessian: Optional[Callable] = None
    meta: Optional[dict] = None

    def __call__(self, x):
        return self.value(x)

    def has_closed_conjugate(self) -> bool:
        return self.conjugate_value is not None and self.conjugate_gradient is not None


@dataclass(frozen=True)
class DualFunction:
    """View of the Fenchel dual of a primal ``ConvexFunction``.

    ``dual_value(xi)`` is ``sup_x { x . xi - primal(x) }`` and
    ``dual_gradient`` inverts the primal gradient map.
    """

    primal: ConvexFunction

    def dual_value(self, xi, force_numeric: bool = False) -> float:
        return dual_value(self.primal, xi, force_numeric=force_numeric)

    def dual_gradient(self, xi, force_numeric: bool = False):
        return dual_gradient(self.primal, xi, force_numeric=force_numeric)

    def dual_hessian(self, xi, force_numeric: bool = False):
        return dual_hessian(self.primal, xi, force_numeric=force_numeric)


# ---------------------------------------------------------------------------
# Bregman divergence and its identities
# ---------------------------------------------------------------------------


def eval_bregman(phi: ConvexFunction, x, y) -> float:
    """D_phi(x, y) = phi(x) - phi(y) - <grad phi(y), x - y>.

    Nonnegative for convex phi, zero exactly at x = y for strictly convex
    phi.  Domain violations raise ``DomainError``.
    """
    if phi.dim == 1:
        x = float(np.asarray(x, dtype=float))
        y = float(np.asarray(y, dtype=float))
        return float(phi.value(x) - phi.value(y) - phi.gradient(y) * (x - y))
    x = np.asarray(x, dtype=float).reshape(phi.dim)
    y = np.asarray(y, dtype=float).reshape(phi.dim)
    return float(phi.value(x) - phi.value(y) - np.dot(phi.gradient(y), x - y))


def law_of_cosines_residual(phi: ConvexFunction, x, y, z) -> float:
    """Relative residual of the three-point divergence identity."""
    dxy = eval_bregman(phi, x, y)
    dxz = eval_bregman(phi, x, z)
    dzy = eval_bregman(phi, z, y)
    if phi.dim == 1:
        corr = (phi.gradient(float(y)) - phi.gradient(float(z))) * (float(x) - float(z))
    else:
        corr = np.dot(phi.gradient(np.asarray(y, float)) - phi.gradient(np.asarray(z, float)),
                      np.asarray(x, float) - np.asarray(z, float))
    resid = dxy - (dxz + dzy - corr)
    denom = 1.0 + abs(dxy) + abs(dxz) + abs(dzy) + abs(float(corr))
    return abs(resid) / denom


def completion_of_squares_residual(phi1: ConvexFunction, phi2: ConvexFunction,
                                   x, y, z) -> float:
    """Relative residual of the two-function completion identity.

    The completion point solves grad(phi1 + phi2)(x*) = grad phi1(y) +
    grad phi2(z); it is found with the same numeric gradient inversion used
    by ``dual_gradient`` (closed forms are deliberately bypassed).
    """
    total = add(phi1, phi2)
    if phi1.dim == 1:
        target = float(phi1.gradient(float(y)) + phi2.gradient(float(z)))
    else:
        target = phi1.gradient(np.asarray(y, float)) + phi2.gradient(np.asarray(z, float))
    xstar = dual_gradient(total, target, force_numeric=True, tol=1e-12)
    lhs = eval_bregman(phi1, x, y) + eval_bregman(phi2, x, z)
    rhs = (eval_bregman(total, x, xstar)
           + eval_bregman(phi1, xstar, y)
           + eval_bregman(phi2, xstar, z))
    return abs(lhs - rhs) / (1.0 + abs(lhs) + abs(rhs))


def biconjugation_residual(phi: ConvexFunction, points) -> float:
    """Max absolute gap between phi and its numeric biconjugate on a grid."""
    worst = 0.0
    for x in np.atleast_1d(np.asarray(points, dtype=float)):
        xi = dual_gradient_support_point(phi, x)
        # phi**(x) = sup_xi { x.xi - phi*(xi) }; evaluate through the numeric dual
        val = x * xi - dual_value(phi, xi, force_numeric=True) if phi.dim == 1 else None
        if phi.dim != 1:
            raise ValidationError("biconjugation_residual supports dim == 1 only")
        worst = max(worst, abs(val - float(phi.value(x))))
    return worst


def dual_gradient_support_point(phi: ConvexFunction, x: float) -> float:
    """The slope xi attaining phi**(x); for differentiable phi this is
    grad phi(x)."""
    return float(phi.gradient(float(x)))


def hessian_inverse_residual(phi: ConvexFunction, xi) -> float:
    """Max-norm residual of  hess phi(grad phi*(xi)) . hess phi*(xi) = I.

    The dual Hessian is computed by finite differences of the numeric
    gradient inversion, independently of the primal Hessian.
    """
    u = dual_gradient(phi, xi, force_numeric=True, tol=1e-13)
    hp = phi.hessian(u)
    hd = dual_hessian(phi, xi, force_numeric=True)
    if phi.dim == 1:
        return abs(float(hp) * float(hd) - 1.0)
    prod = np.asarray(hp, float) @ np.asarray(hd, float)
    return float(np.max(np.abs(prod - np.eye(phi.dim))))


# ---------------------------------------------------------------------------
# One-dimensional conjugation machinery
# ---------------------------------------------------------------------------


def _grad_1d(phi: ConvexFunction, u: float) -> float:
    return float(phi.gradient(float(u)))


def _value_1d(phi: ConvexFunction, u: float) -> float:
    try:
        return float(phi.value(float(u)))
    except DomainError:
        return math.inf


def _bracket_argmax_1d(phi: ConvexFunction, xi: float):
    """Bracket the maximizer of g(u) = u*xi - phi(u) using the monotone
    gradient.  Returns (lo, hi); raises UnboundedDualError when phi grows
    too slowly in the queried direction."""
    radius = phi.domain_halfwidth
    s = max(abs(phi.scale), 1e-8)
    g0 = _grad_1d(phi, 0.0)
    if xi == g0:
        return (0.0, 0.0)
    if xi > g0:
        lo, hi = 0.0, min(s, radius)
        while _grad_1d(phi, hi) < xi:
            if hi >= radius:
                return (lo, radius)
            lo = hi
            hi = min(2.0 * hi, radius)
            if hi > _EXPANSION_CAP * s:
                raise UnboundedDualError(
                    f"sup of u*xi - phi(u) diverges for xi={xi!r} "
                    f"(phi={phi.name or 'anonymous'})")
        return (lo, hi)
    lo, hi = -min(s, radius), 0.0
    while _grad_1d(phi, lo) > xi:
        if lo <= -radius:
            return (-radius, hi)
        hi = lo
        lo = max(2.0 * lo, -radius)
        if lo < -_EXPANSION_CAP * s:
            raise UnboundedDualError(
                f"sup of u*xi - phi(u) diverges for xi={xi!r} "
                f"(phi={phi.name or 'anonymous'})")
    return (lo, hi)


def _golden_argmax(g: Callable[[float], float], lo: float, hi: float,
                   residual: Optional[Callable[[float], float]] = None,
                   res_tol: float = TOL_DUAL, max_iter: int = 400) -> float:
    """Golden-section maximization of a concave g on [lo, hi]."""
    if hi <= lo:
        return lo
    width_tol = 1e-12 * max(1.0, abs(lo), abs(hi))
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = g(c), g(d)
    for _ in range(max_iter):
        if (b - a) <= width_tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = g(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = g(d)
        if residual is not None:
            best = c if fc >= fd else d
            if abs(residual(best)) <= res_tol and (b - a) <= 1e-6 * max(1.0, abs(best)):
                break
    return c if fc >= fd else d


def _argmax_linear_minus_phi_1d(phi: ConvexFunction, xi: float,
                                tol: float = TOL_DUAL):
    """Maximize g(u) = u*xi - phi(u); returns (u*, g(u*))."""
    lo, hi = _bracket_argmax_1d(phi, xi)
    g = lambda u: u * xi - _value_1d(phi, u)
    u = _golden_argmax(g, lo, hi, residual=lambda u: xi - _grad_1d(phi, u),
                       res_tol=tol)
    # keep the origin and bracket edges as candidates: Assumption-1 costs
    # then return exact zeros at xi = 0, and boundary suprema are exact
    candidates = [u, lo, hi]
    if -phi.domain_halfwidth <= 0.0 <= phi.domain_halfwidth:
        candidates.append(0.0)
    best = max(candidates, key=g)
    return best, g(best)


def _invert_gradient_1d(phi: ConvexFunction, target: float,
                        tol: float = TOL_DUAL) -> float:
    """Solve grad phi(u) = target for the minimum-norm selection.

    Flat gradient stretches resolve to the solution-interval edge nearest
    the origin; targets beyond the gradient range of a box-constrained phi
    resolve to the domain boundary; otherwise they are out of range.
    """
    radius = phi.domain_halfwidth
    s = max(abs(phi.scale), 1e-8)
    g0 = _grad_1d(phi, 0.0)
    if target == g0:
        return 0.0
    if target > g0:
        lo, hi = 0.0, min(s, radius)
        while _grad_1d(phi, hi) < target:
            if hi >= radius:
                return radius
            lo = hi
            hi = min(2.0 * hi, radius)
            if hi > _EXPANSION_CAP * s:
                raise OutOfRangeError(
                    f"gradient target {target!r} exceeds the range of "
                    f"grad {phi.name or 'phi'} and no domain boundary resolves it")
        for _ in range(200):
            if (hi - lo) <= 1e-15 * max(1.0, abs(hi)):
                break
            mid = 0.5 * (lo + hi)
            if _grad_1d(phi, mid) >= target:
                hi = mid
            else:
                lo = mid
        return hi
    lo, hi = -min(s, radius), 0.0
    while _grad_1d(phi, lo) > target:
        if lo <= -radius:
            return -radius
        hi = lo
        lo = max(2.0 * lo, -radius)
        if lo < -_EXPANSION_CAP * s:
            raise OutOfRangeError(
                f"gradient target {target!r} exceeds the range of "
                f"grad {phi.name or 'phi'} and no domain boundary resolves it")
    for _ in range(200):
        if (hi - lo) <= 1e-15 * max(1.0, abs(lo)):
            break
        mid = 0.5 * (lo + hi)
        if _grad_1d(phi, mid) <= target:
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# Multi-dimensional conjugation machinery
# ---------------------------------------------------------------------------


def _maximize_concave_nd(value, grad, x0, tol: float, max_iter: int = 50000,
                         scale: float = 1.0, hessian=None):
    """Backtracking gradient ascent for a concave objective.

    ``value`` may return -inf (or raise DomainError) outside the domain;
    such steps are rejected by the line search.  Plain ascent stalls around
    1e-12 stationarity in double precision, so when a Hessian of the
    underlying primal is supplied the result is polished with damped Newton
    steps before the tolerance is enforced.
    """

    def safe_value(x):
        try:
            v = float(value(x))
        except DomainError:
            return -math.inf
        return v

    x = np.asarray(x0, dtype=float).copy()
    fx = safe_value(x)
    if not math.isfinite(fx):
        raise DomainError("ascent started outside the effective domain")
    step = 1.0
    gnorm = math.inf
    ascent_tol = max(tol, 1e-9) if hessian is not None else tol
    stalled = False
    for _ in range(max_iter):
        try:
            d = np.asarray(grad(x), dtype=float)
        except DomainError as exc:
            raise ConvergenceError(f"gradient unavailable at iterate: {exc}",
                                   residual=gnorm)
        gnorm = float(np.linalg.norm(d))
        if gnorm <= ascent_tol:
            break
        if float(np.linalg.norm(x)) > 1e10 * max(scale, 1.0):
            raise UnboundedDualError("ascent iterates diverged; supremum unbounded")
        t = step
        rejected = False
        while True:
            xn = x + t * d
            fn = safe_value(xn)
            if fn >= fx + 1e-4 * t * gnorm * gnorm:
                break
            t *= 0.5
            if t < 1e-18:
                # flat to machine precision
                rejected = True
                break
        if rejected:
            stalled = True
            break
        x, fx = xn, fn
        step = min(t * 2.0, 1e8)
    if hessian is not None:
        for _ in range(50):
            d = np.asarray(grad(x), dtype=float)
            gnorm = float(np.linalg.norm(d))
            if gnorm <= max(tol * 1e-3, 1e-15):
                break
            try:
                dx = np.linalg.solve(np.asarray(hessian(x), dtype=float), d)
            except np.linalg.LinAlgError:
                break
            t = 1.0
            while t > 1e-12:
                xn = x + t * dx
                try:
                    gn = float(np.linalg.norm(np.asarray(grad(xn), dtype=float)))
                except DomainError:
                    gn = math.inf
                if gn < gnorm:
                    x = xn
                    gnorm = gn
                    break
                t *= 0.5
            else:
                break
        fx = safe_value(x)
    d = np.asarray(grad(x), dtype=float)
    gnorm = float(np.linalg.norm(d))
    if gnorm <= tol or (stalled and gnorm <= 1e3 * tol):
        return x, fx
    raise ConvergenceError(
        f"concave maximization did not reach tolerance {tol:g}", residual=gnorm)


# ---------------------------------------------------------------------------
# Public dual evaluations
# ---------------------------------------------------------------------------


def dual_value(phi: ConvexFunction, xi, tol: float = TOL_DUAL,
               force_numeric: bool = False) -> float:
    """Fenchel dual phi*(xi) = sup_x { x . xi - phi(x) }."""
    if phi.has_closed_conjugate() and not force_numeric:
        if phi.dim == 1:
            return float(phi.conjugate_value(float(np.asarray(xi, float))))
        return float(phi.conjugate_value(np.asarray(xi, float).reshape(phi.dim)))
    if phi.dim == 1:
        _, val = _argmax_linear_minus_phi_1d(phi, float(np.asarray(xi, float)), tol)
        return val
    xi = np.asarray(xi, dtype=float).reshape(phi.dim)
    x0 = _interior_start(phi)
    u, val = _maximize_concave_nd(
        value=lambda u: float(np.dot(u, xi)) - float(phi.value(u)),
        grad=lambda u: xi - np.asarray(phi.gradient(u), float),
        x0=x0, tol=tol, scale=phi.scale, hessian=phi.hessian)
    # the origin is a valid candidate whenever it is admissible
    try:
        v0 = -float(phi.value(np.zeros(phi.dim)))
    except DomainError:
        v0 = -math.inf
    return max(val, v0)


def dual_gradient(phi: ConvexFunction, xi, tol: float = TOL_DUAL,
                  force_numeric: bool = False):
    """grad phi*(xi): the point u solving grad phi(u) = xi.

    Non-smooth cases use the minimum-norm subdifferential selection; targets
    beyond the gradient range of a box-domain phi return the boundary point.
    """
    if phi.has_closed_conjugate() and not force_numeric:
        if phi.dim == 1:
            return float(phi.conjugate_gradient(float(np.asarray(xi, float))))
        return np.asarray(phi.conjugate_gradient(np.asarray(xi, float).reshape(phi.dim)),
                          dtype=float)
    if phi.dim == 1:
        return _invert_gradient_1d(phi, float(np.asarray(xi, float)), tol)
    xi = np.asarray(xi, dtype=float).reshape(phi.dim)
    x0 = _interior_start(phi)
    u, _ = _maximize_concave_nd(
        value=lambda u: float(np.dot(u, xi)) - float(phi.value(u)),
        grad=lambda u: xi - np.asarray(phi.gradient(u), float),
        x0=x0, tol=tol, scale=phi.scale, hessian=phi.hessian)
    return u


def dual_hessian(phi: ConvexFunction, xi, force_numeric: bool = False):
    """hess phi*(xi), by closed form when available, else by central finite
    differences of the (tightly solved) numeric gradient inversion."""
    if phi.conjugate_hessian is not None and not force_numeric:
        if phi.dim == 1:
            return float(phi.conjugate_hessian(float(np.asarray(xi, float))))
        return np.asarray(phi.conjugate_hessian(np.asarray(xi, float).reshape(phi.dim)),
                          dtype=float)
    if phi.dim == 1:
        x = float(np.asarray(xi, float))
        h = 1e-4 * (1.0 + abs(x))
        up = dual_gradient(phi, x + h, tol=1e-13, force_numeric=True)
        um = dual_gradient(phi, x - h, tol=1e-13, force_numeric=True)
        return (up - um) / (2.0 * h)
    xi = np.asarray(xi, dtype=float).reshape(phi.dim)
    n = phi.dim
    jac = np.zeros((n, n))
    for j in range(n):
        h = 1e-5 * (1.0 + abs(xi[j]))
        e = np.zeros(n)
        e[j] = h
        up = dual_gradient(phi, xi + e, tol=1e-11, force_numeric=True)
        um = dual_gradient(phi, xi - e, tol=1e-11, force_numeric=True)
        jac[:, j] = (np.asarray(up) - np.asarray(um)) / (2.0 * h)
    return 0.5 * (jac + jac.T)


def _interior_start(phi: ConvexFunction) -> np.ndarray:
    zero = np.zeros(phi.dim)
    try:
        v = float(phi.value(zero))
        phi.gradient(zero)
        if math.isfinite(v):
            return zero
    except DomainError:
        pass
    return np.full(phi.dim, max(abs(phi.scale), 1e-3))


def conjugate(phi: ConvexFunction, force_numeric: bool = False) -> ConvexFunction:
    """The Fenchel dual as a first-class ConvexFunction.

    When phi carries closed conjugate data (and the numeric route is not
    forced) the result is analytic; otherwise value and gradient solve the
    supremum pointwise.  Either way the result's own conjugate is phi
    itself, which is exact for the closed convex functions handled here.
    """
    if phi.has_closed_conjugate() and not force_numeric:
        return ConvexFunction(
            dim=phi.dim,
            value=phi.conjugate_value,
            gradient=phi.conjugate_gradient,
            hessian=phi.conjugate_hessian,
            kind=phi.kind,
            name=(phi.name + "*") if phi.name else "dual",
            scale=_dual_scale(phi),
            conjugate_value=phi.value,
            conjugate_gradient=phi.gradient,
            conjugate_hessian=phi.hessian,
        )
    if phi.dim == 1:
        value = _elementwise(lambda x: dual_value(phi, x, force_numeric=True))
        grad = _elementwise(lambda x: dual_gradient(phi, x, force_numeric=True))
        hess = _elementwise(lambda x: dual_hessian(phi, x, force_numeric=True))
    else:
        value = lambda x: dual_value(phi, x, force_numeric=True)
        grad = lambda x: dual_gradient(phi, x, force_numeric=True)
        hess = lambda x: dual_hessian(phi, x, force_numeric=True)
    return ConvexFunction(
        dim=phi.dim,
        value=value,
        gradient=grad,
        hessian=hess,
        kind=KIND_BICONJUGATE,
        name=(phi.name + "*") if phi.name else "dual",
        scale=_dual_scale(phi),
        conjugate_value=phi.value,
        conjugate_gradient=phi.gradient,
        conjugate_hessian=phi.hessian,
    )


def _dual_scale(phi: ConvexFunction) -> float:
    s = max(abs(phi.scale), 1e-8)
    try:
        if phi.dim == 1:
            probe = min(s, phi.domain_halfwidth * 0.5) or s
            g = abs(_grad_1d(phi, probe))
        else:
            g = float(np.linalg.norm(phi.gradient(np.full(phi.dim, s))))
    except DomainError:
        return 1.0
    return max(g, 1e-6)


def _elementwise(fscalar: Callable[[float], float]) -> Callable:
    def wrapped(x):
        arr = np.asarray(x, dtype=float)
        if arr.ndim == 0:
            return fscalar(float(arr))
        flat = np.array([fscalar(float(v)) for v in arr.ravel()])
        return flat.reshape(arr.shape)

    return wrapped


# ---------------------------------------------------------------------------
# Catalog of primitive convex functions
# ---------------------------------------------------------------------------


def quadratic(P, name: str = "quadratic") -> ConvexFunction:
    """x -> x' P x (scalar coefficient c gives c*x^2 elementwise).

    Positive definite P carries the exact conjugate xi' P^{-1} xi / 4.
    """
    P_arr = np.asarray(P, dtype=float)
    if P_arr.ndim == 0:
        c = float(P_arr)
        if c < 0:
            raise ValidationError("quadratic coefficient must be nonnegative")
        conj = None
        conj_grad = None
        conj_hess = None
        if c > 0:
            conj = lambda xi: np.asarray(xi, float) ** 2 / (4.0 * c)
            conj_grad = lambda xi: np.asarray(xi, float) / (2.0 * c)
            conj_hess = lambda xi: np.full_like(np.asarray(xi, float), 1.0 / (2.0 * c))
        return ConvexFunction(
            dim=1,
            value=lambda x: c * np.asarray(x, float) ** 2,
            gradient=lambda x: 2.0 * c * np.asarray(x, float),
            hessian=lambda x: np.full_like(np.asarray(x, float), 2.0 * c),
            kind=KIND_ANALYTIC,
            name=name,
            conjugate_value=conj,
            conjugate_gradient=conj_grad,
            conjugate_hessian=conj_hess,
            meta={"kind": "quadratic", "P": c},
        )
    n = P_arr.shape[0]
    if P_arr.shape != (n, n):
        raise ValidationError("quadratic coefficient matrix must be square")
    P_sym = 0.5 * (P_arr + P_arr.T)
    eigs = np.linalg.eigvalsh(P_sym)
    if eigs.min() < -1e-12 * max(1.0, eigs.max()):
        raise ValidationError("quadratic coefficient matrix must be PSD")
    invertible = eigs.min() > 1e-12 * max(1.0, eigs.max())
    P_inv = np.linalg.inv(P_sym) if invertible else None

    def value(x):
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, P_sym, x)

    conj = None
    conj_grad = None
    conj_hess = None
    if invertible:
        conj = lambda xi: 0.25 * float(np.asarray(xi, float) @ P_inv @ np.asarray(xi, float))
        conj_grad = lambda xi: 0.5 * (P_inv @ np.asarray(xi, float))
        conj_hess = lambda xi: 0.5 * P_inv
    return ConvexFunction(
        dim=n,
        value=value,
        gradient=lambda x: 2.0 * (P_sym @ np.asarray(x, float)),
        hessian=lambda x: 2.0 * P_sym,
        kind=KIND_ANALYTIC,
        name=name,
        conjugate_value=conj,
        conjugate_gradient=conj_grad,
        conjugate_hessian=conj_hess,
        meta={"kind": "quadratic", "P": P_sym},
    )


def abs_plus_quadratic(epsilon: float, weight: float = 1.0,
                       name: str = "abs-plus-quadratic") -> ConvexFunction:
    """x -> weight*|x| + epsilon*x^2, the sparsity-promoting scalar cost.

    The Hessian at the kink is distributional; the stored callable returns
    the two-sided limit 2*epsilon there.  For epsilon > 0 the conjugate is
    the squared soft threshold.
    """
    if epsilon < 0 or weight < 0:
        raise ValidationError("abs_plus_quadratic needs nonnegative parameters")
    eps = float(epsilon)
    w = float(weight)

    def soft(xi):
        xi = np.asarray(xi, float)
        return np.sign(xi) * np.maximum(np.abs(xi) - w, 0.0)

    conj = None
    conj_grad = None
    conj_hess = None
    if eps > 0:
        conj = lambda xi: soft(xi) ** 2 / (4.0 * eps)
        conj_grad = lambda xi: soft(xi) / (2.0 * eps)
        conj_hess = lambda xi: np.where(np.abs(np.asarray(xi, float)) > w, 1.0, 0.0) / (2.0 * eps)
    return ConvexFunction(
        dim=1,
        value=lambda x: w * np.abs(np.asarray(x, float)) + eps * np.asarray(x, float) ** 2,
        gradient=lambda x: w * np.sign(np.asarray(x, float)) + 2.0 * eps * np.asarray(x, float),
        hessian=lambda x: np.full_like(np.asarray(x, float), 2.0 * eps),
        kind=KIND_PIECEWISE,
        name=name,
        distributional_hessian=True,
        conjugate_value=conj,
        conjugate_gradient=conj_grad,
        conjugate_hessian=conj_hess,
        meta={"kind": "abs-plus-quadratic", "epsilon": eps, "weight": w},
    )


def exp_abs(name: str = "exp-abs") -> ConvexFunction:
    """u -> exp(|u|) - |u| - 1: even, superlinear, machine-checkable dual."""

    def value(u):
        u = np.abs(np.asarray(u, float))
        return np.exp(np.minimum(u, 700.0)) - u - 1.0

    def grad(u):
        u = np.asarray(u, float)
        return np.sign(u) * (np.exp(np.minimum(np.abs(u), 700.0)) - 1.0)

    return ConvexFunction(
        dim=1,
        value=value,
        gradient=grad,
        hessian=lambda u: np.exp(np.minimum(np.abs(np.asarray(u, float)), 700.0)),
        kind=KIND_ANALYTIC,
        name=name,
        conjugate_value=lambda v: (1.0 + np.abs(np.asarray(v, float))) * np.log1p(np.abs(np.asarray(v, float))) - np.abs(np.asarray(v, float)),
        conjugate_gradient=lambda v: np.sign(np.asarray(v, float)) * np.log1p(np.abs(np.asarray(v, float))),
        conjugate_hessian=lambda v: 1.0 / (1.0 + np.abs(np.asarray(v, float))),
        meta={"kind": "exp-abs"},
    )


def quartic(c: float = 1.0, name: str = "quartic") -> ConvexFunction:
    """x -> c*x^4 (scalar test vector with a closed conjugate)."""
    if c <= 0:
        raise ValidationError("quartic coefficient must be positive")

    def conj_value(xi):
        xi = np.abs(np.asarray(xi, float))
        return 0.75 * xi ** (4.0 / 3.0) / (4.0 * c) ** (1.0 / 3.0)

    def conj_grad(xi):
        xi = np.asarray(xi, float)
        return np.sign(xi) * (np.abs(xi) / (4.0 * c)) ** (1.0 / 3.0)

    return ConvexFunction(
        dim=1,
        value=lambda x: c * np.asarray(x, float) ** 4,
        gradient=lambda x: 4.0 * c * np.asarray(x, float) ** 3,
        hessian=lambda x: 12.0 * c * np.asarray(x, float) ** 2,
        kind=KIND_ANALYTIC,
        name=name,
        conjugate_value=conj_value,
        conjugate_gradient=conj_grad,
    )


def box_quadratic(t: float, name: str = "box-quadratic") -> ConvexFunction:
    """u -> u^2 on [-t, t], +inf outside (the hard input budget cost).

    The closure value at |u| = t is t^2; the conjugate saturates at the
    budget:  nu^2/4 inside |nu| <= 2t, then t|nu| - t^2.
    """
    if t <= 0:
        raise ValidationError("budget t must be positive")
    t = float(t)

    def value(u):
        u = np.asarray(u, float)
        return np.where(np.abs(u) <= t, u ** 2, np.inf)

    def grad(u):
        arr = np.asarray(u, float)
        if np.any(np.abs(arr) > t * (1.0 + 1e-12)):
            raise DomainError(f"gradient queried outside the budget |u| <= {t}")
        return 2.0 * np.clip(arr, -t, t)

    def conj_value(v):
        v = np.asarray(v, float)
        return np.where(np.abs(v) <= 2.0 * t, v ** 2 / 4.0, t * np.abs(v) - t ** 2)

    return ConvexFunction(
        dim=1,
        value=value,
        gradient=grad,
        hessian=lambda u: np.full_like(np.asarray(u, float), 2.0),
        kind=KIND_PIECEWISE,
        name=name,
        scale=t,
        domain_halfwidth=t,
        conjugate_value=conj_value,
        conjugate_gradient=lambda v: np.clip(np.asarray(v, float) / 2.0, -t, t),
        conjugate_hessian=lambda v: np.where(np.abs(np.asarray(v, float)) < 2.0 * t, 0.5, 0.0),
        meta={"kind": "box-quadratic", "t": t},
    )


def negative_entropy(dim: int = 1, name: str = "negative-entropy") -> ConvexFunction:
    """x -> sum x_i log x_i - x_i on the positive orthant (test vector for
    divergence identities; not an admissible control cost)."""

    def value(x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise DomainError("negative entropy requires nonnegative coordinates")
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0)) - x, 0.0)
        return float(np.sum(terms)) if dim > 1 else terms

    def grad(x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise DomainError("entropy gradient requires positive coordinates")
        return np.log(x)

    def hess(x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise DomainError("entropy Hessian requires positive coordinates")
        return np.diag(1.0 / x) if dim > 1 else 1.0 / x

    return ConvexFunction(
        dim=dim,
        value=value,
        gradient=grad,
        hessian=hess,
        kind=KIND_ANALYTIC,
        name=name,
        conjugate_value=(lambda xi: float(np.sum(np.exp(np.asarray(xi, float)))))
        if dim > 1 else (lambda xi: np.exp(np.asarray(xi, float))),
        conjugate_gradient=lambda xi: np.exp(np.asarray(xi, float)),
        conjugate_hessian=(lambda xi: np.diag(np.exp(np.asarray(xi, float))))
        if dim > 1 else (lambda xi: np.exp(np.asarray(xi, float))),
    )


def add(f: ConvexFunction, g: ConvexFunction, name: str = "") -> ConvexFunction:
    """Pointwise sum of two convex functions on a common domain."""
    if f.dim != g.dim:
        raise ValidationError("cannot add convex functions of different dimension")
    hess = None
    if f.hessian is not None and g.hessian is not None:
        hess = lambda x: np.asarray(f.hessian(x)) + np.asarray(g.hessian(x))
    return ConvexFunction(
        dim=f.dim,
        value=lambda x: f.value(x) + g.value(x),
        gradient=lambda x: np.asarray(f.gradient(x)) + np.asarray(g.gradient(x)),
        hessian=hess,
        kind=KIND_PIECEWISE if KIND_PIECEWISE in (f.kind, g.kind) else KIND_ANALYTIC,
        name=name or f"{f.name}+{g.name}",
        scale=max(f.scale, g.scale),
        domain_halfwidth=min(f.domain_halfwidth, g.domain_halfwidth),
        distributional_hessian=f.distributional_hessian or g.distributional_hessian,
    )


# ---------------------------------------------------------------------------
# Expectation decomposition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecompositionReport:
    """Monte-Carlo comparison of E[D_q(z, -w)] against q(z) + E[D_q(0, -w)]."""

    lhs: float
    rhs: float
    constant: float
    residual: float
    std_error: float
    samples: int
    seed: int

    def within(self, k_sigma: float = 4.0) -> bool:
        return self.residual <= k_sigma * self.std_error + 1e-15


def expectation_decomposition_check(q: ConvexFunction, noise, z,
                                    samples: int = 1_000_000,
                                    seed: int = 0,
                                    shard_size: int = 100_000) -> DecompositionReport:
    """Estimate both sides of the noise-averaged divergence split.

    Samples are drawn in fixed-size shards from independently keyed streams
    and merged in shard order, so the estimate is reproducible and safe to
    parallelize.  The reported standard error is that of the per-sample
    difference, which is the right scale for the residual.
    """
    if samples < 1000:
        raise ValidationError("need at least 1000 samples for a meaningful estimate")
    if q.dim == 1:
        z_val = float(np.asarray(z, float))
    else:
        z_val = np.asarray(z, float).reshape(q.dim)

    sum_a = 0.0
    sum_b = 0.0
    sum_d = 0.0
    sum_d2 = 0.0
    drawn = 0
    shard = 0
    while drawn < samples:
        count = min(shard_size, samples - drawn)
        w = noise.sample_shard(seed, shard, count)
        if q.dim == 1:
            wv = w[:, 0]
            qmw = np.asarray(q.value(-wv), float)
            gmw = np.asarray(q.gradient(-wv), float)
            a = q.value(z_val) - qmw - gmw * (z_val + wv)
            b = -qmw - gmw * wv
        else:
            a = np.empty(count)
            b = np.empty(count)
            for i in range(count):
                a[i] = eval_bregman(q, z_val, -w[i])
                b[i] = eval_bregman(q, np.zeros(q.dim), -w[i])
        d = a - b
        sum_a += float(np.sum(a))
        sum_b += float(np.sum(b))
        sum_d += float(np.sum(d))
        sum_d2 += float(np.sum(d * d))
        drawn += count
        shard += 1

    n = float(samples)
    lhs = sum_a / n
    constant = sum_b / n
    qz = float(q.value(z_val)) if q.dim == 1 else float(q.value(z_val))
    rhs = qz + constant
    mean_d = sum_d / n
    var_d = max(sum_d2 / n - mean_d * mean_d, 0.0) * n / max(n - 1.0, 1.0)
    std_error = math.sqrt(var_d / n)
    return DecompositionReport(lhs=lhs, rhs=rhs, constant=constant,
                               residual=abs(lhs - rhs), std_error=std_error,
                               samples=samples, seed=seed)


# ---------------------------------------------------------------------------
# Assumption checks used by synthesis and verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostShapeReport:
    """Grid evidence that a function is an admissible control/state cost:
    zero value and gradient at the origin, even, nonnegative, convex."""

    value_at_zero: float
    gradient_norm_at_zero: float
    max_evenness_gap: float
    min_value: float
    min_second_difference: float

    def ok(self, tol: float = 1e-8) -> bool:
        return (abs(self.value_at_zero) <= tol
                and self.gradient_norm_at_zero <= tol
                and self.max_evenness_gap <= tol
                and self.min_value >= -tol
                and self.min_second_difference >= -tol)


def cost_shape_report(phi: ConvexFunction, halfwidth: Optional[float] = None,
                      points: int = 2001) -> CostShapeReport:
    """Second-difference convexity and symmetry evidence on a uniform grid.

    Piecewise costs with distributional Hessians are checked this way
    instead of pointwise, so measure-zero kinks cannot produce false
    verdicts.
    """
    if phi.dim != 1:
        raise ValidationError("cost_shape_report covers scalar costs; use "
                              "ray_convexity_report for matrices")
    hw = halfwidth if halfwidth is not None else 10.0 * max(abs(phi.scale), 1.0)
    hw = min(hw, phi.domain_halfwidth * 0.999) if math.isfinite(phi.domain_halfwidth) else hw
    grid = np.linspace(-hw, hw, points)
    vals = np.asarray(phi.value(grid), dtype=float)
    v0 = float(phi.value(0.0))
    g0 = abs(float(phi.gradient(0.0)))
    even_gap = float(np.max(np.abs(vals - vals[::-1])))
    second = vals[:-2] - 2.0 * vals[1:-1] + vals[2:]
    scale = 1.0 + float(np.max(np.abs(vals[np.isfinite(vals)]))) if np.any(np.isfinite(vals)) else 1.0
    return CostShapeReport(
        value_at_zero=v0,
        gradient_norm_at_zero=g0,
        max_evenness_gap=even_gap / scale,
        min_value=float(np.min(vals)),
        min_second_difference=float(np.min(second[np.isfinite(second)])) / scale,
    )
