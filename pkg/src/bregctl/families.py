"""Scalar controller families with printed closed forms.

Each family packages a designer-chosen cost, its companion cost, and the
printed feedback law for a scalar plant x+ = a x + b u + w.  The printed
formulas are implemented verbatim, including the hard-budget family's
saturated branch, whose printed level (-a sign x) differs from the
dual-gradient composition (which saturates at the budget t); the consistent
controller is always available through ``SynthesisCertificate.controller``.

Parameter validation errors quote the violated inequality.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import convex as cv
from . import synthesis as syn
from .convex import ConvexFunction
from .errors import FamilyInfeasibilityError, ValidationError
from .grids import GridSpec
from .system import LinearSystem, NoiseModel, scalar_system

FAMILY_NAMES = ("bangbang", "exponential", "elasticnet")


@dataclass(frozen=True)
class ScalarFamilyParams:
    """Scalar plant and design parameters: gain a, input gain b, value
    matrix entry m, plus the input budget t (hard-budget family) or the
    curvature epsilon (sparsity family)."""

    a: float
    b: float
    m: float
    t: Optional[float] = None
    epsilon: Optional[float] = None

    def __post_init__(self):
        if self.b == 0:
            raise ValidationError("b must be nonzero")
        if self.m <= 0:
            raise ValidationError("m must be positive")
        if self.a == 0:
            raise ValidationError("a must be nonzero (A must be invertible)")

    def to_dict(self) -> dict:
        d = {"a": self.a, "b": self.b, "m": self.m}
        if self.t is not None:
            d["t"] = self.t
        if self.epsilon is not None:
            d["epsilon"] = self.epsilon
        return d


@dataclass(frozen=True)
class FamilyTriple:
    """A family instance: costs, printed controller, and the plant."""

    name: str
    params: ScalarFamilyParams
    q: ConvexFunction
    r: ConvexFunction
    controller: syn.Controller
    system: LinearSystem
    mode: str

    @property
    def M(self) -> np.ndarray:
        return np.array([[self.params.m]])

    def p(self) -> ConvexFunction:
        return syn.make_p(self.q, self.M)

    def feasibility(self, spec: GridSpec = GridSpec()) -> syn.FeasibilityReport:
        if self.mode == syn.MODE_STATE_FIRST:
            return syn.check_M_given_q(self.system, self.q, self.M, spec)
        return syn.check_M_given_r(self.system, self.r, self.M, spec)

    def certificate(self, noise: Optional[NoiseModel] = None,
                    spec: GridSpec = GridSpec(),
                    M_override=None) -> syn.SynthesisCertificate:
        """Assemble the certificate for this family instance.

        The matrix condition margins are recorded as evidence but do not
        gate assembly: the closed forms satisfy the synthesis identity
        whenever the family's own denominators are positive (the condition
        can be conservative at kinks), and assembly re-validates the
        identity directly.
        """
        system = self.system if noise is None else scalar_system(
            self.params.a, self.params.b, noise)
        M = self.M if M_override is None else np.atleast_2d(np.asarray(M_override, float))
        report = self.feasibility(spec)
        margins = dict(report.margins)
        if report.numeric_convexity_verdict is not None:
            margins["numeric_convexity"] = 1.0 if report.numeric_convexity_verdict else 0.0
        margins["matrix_condition_feasible"] = 1.0 if report.feasible else 0.0
        return syn.assemble_certificate(
            system, M, self.mode, self.q, self.r, self.p(), margins,
            family=self.name, params=self.params.to_dict(), spec=spec,
            validate=(M_override is None))


def _scalar_controller(system: LinearSystem, M: np.ndarray,
                       r: ConvexFunction, printed) -> syn.Controller:
    def rdg(nu):
        return np.array([float(cv.dual_gradient(r, float(np.atleast_1d(nu)[0])))])

    return syn.Controller(system=system, M=M, r_dual_gradient=rdg,
                          feedback_map=lambda x: np.array([printed(float(x[0]))]))


# ---------------------------------------------------------------------------
# Hard input budget (saturating feedback)
# ---------------------------------------------------------------------------


def bangbang_family(params: ScalarFamilyParams) -> FamilyTriple:
    """Quadratic control cost with a hard budget |u| < t.

    The companion state cost is quadratic near the origin and switches to a
    quadratic-plus-absolute branch where the budget binds.  The printed
    feedback is -(bm/a) x inside |x| <= at/(bm) and -a sign(x) beyond.
    """
    a, b, m, t = params.a, params.b, params.m, params.t
    if t is None or t <= 0:
        raise ValidationError("the hard-budget family needs t > 0")
    if a * a - b * b * m <= 0:
        raise FamilyInfeasibilityError(
            f"family feasibility violated: a^2 - b^2*m > 0 "
            f"(got {a * a:.6g} - {b * b * m:.6g} = {a * a - b * b * m:.6g})")

    r = cv.box_quadratic(t, name="bangbang-control-cost")

    c_in = m * (1.0 / (a * a - b * b * m) - 1.0)
    c_out = m * (1.0 / (a * a) - 1.0)
    lin_out = 2.0 * m * b * t / (a * a)
    const_out = t * t * (m * b * b / (a * a) - 1.0)
    x_break = a * a * t / (m * b) - t * b

    def q_value(x):
        x = np.asarray(x, float)
        ax = np.abs(x)
        return np.where(ax <= x_break,
                        c_in * x ** 2,
                        c_out * x ** 2 + lin_out * ax + const_out)

    def q_grad(x):
        x = np.asarray(x, float)
        return np.where(np.abs(x) <= x_break,
                        2.0 * c_in * x,
                        2.0 * c_out * x + lin_out * np.sign(x))

    def q_hess(x):
        x = np.asarray(x, float)
        return np.where(np.abs(x) <= x_break, 2.0 * c_in, 2.0 * c_out)

    q = ConvexFunction(dim=1, value=q_value, gradient=q_grad, hessian=q_hess,
                       kind=cv.KIND_PIECEWISE, name="bangbang-state-cost",
                       scale=max(1.0, x_break))

    x_sat = a * t / (b * m)

    def printed(x: float) -> float:
        if abs(x) <= x_sat:
            return -(b * m / a) * x
        return -a * float(np.sign(x))

    system = scalar_system(a, b)
    controller = _scalar_controller(system, np.array([[m]]), r, printed)
    return FamilyTriple("bangbang", params, q, r, controller, system,
                        syn.MODE_CONTROL_FIRST)


# ---------------------------------------------------------------------------
# Exponential input penalty (cheap-control feedback)
# ---------------------------------------------------------------------------


def exponential_family(params: ScalarFamilyParams, spec: GridSpec = GridSpec()) -> FamilyTriple:
    """Control cost exp(|u|) - |u| - 1 with the logarithmic feedback law
    u(x) = -sign(x) log(|2bm/a| |x| + 1).

    The companion state cost has no closed form; it is produced by the
    shared conjugation machinery and gated by the synthesis identity.
    """
    a, b, m = params.a, params.b, params.m
    r = cv.exp_abs(name="exponential-control-cost")
    system = scalar_system(a, b)
    q, _ = syn.derive_q_from_r(system, r, np.array([[m]]), spec)

    k = 2.0 * b * m / a

    def printed(x: float) -> float:
        return -float(np.sign(x)) * float(np.log(abs(k * x) + 1.0))

    controller = _scalar_controller(system, np.array([[m]]), r, printed)
    return FamilyTriple("exponential", params, q, r, controller, system,
                        syn.MODE_CONTROL_FIRST)


# ---------------------------------------------------------------------------
# Sparsity-promoting state cost (soft-thresholded feedback)
# ---------------------------------------------------------------------------


def elasticnet_family(params: ScalarFamilyParams) -> FamilyTriple:
    """State cost |x| + eps x^2; companion control cost is quadratic inside
    |u| <= a^2/(2mb) with a soft-threshold branch beyond.

    The printed feedback cancels the plant (-a/b x) until |2mx/a| exceeds
    one, then backs off by the thresholded correction; with noise-free
    dynamics the inner branch is exactly dead-beat.
    """
    a, b, m, eps = params.a, params.b, params.m, params.epsilon
    if eps is None or eps <= 0:
        raise ValidationError("the sparsity family needs epsilon > 0")
    denom = a * a * (eps + m) - m
    if denom <= 0:
        raise FamilyInfeasibilityError(
            f"family feasibility violated: a^2*(epsilon+m) - m > 0 "
            f"(got {a * a * (eps + m):.6g} - {m:.6g} = {denom:.6g})")

    q = cv.abs_plus_quadratic(eps, name="elasticnet-state-cost")

    alpha = m * b * b * (eps + m) / denom
    beta = b * m / denom
    gamma = a * a / (4.0 * denom)
    u_break = a * a / (2.0 * m * b)

    def r_value(u):
        u = np.asarray(u, float)
        au = np.abs(u)
        return np.where(au <= u_break,
                        (m * b * b / (a * a)) * u ** 2,
                        alpha * u ** 2 - beta * au + gamma)

    def r_grad(u):
        u = np.asarray(u, float)
        return np.where(np.abs(u) <= u_break,
                        2.0 * (m * b * b / (a * a)) * u,
                        2.0 * alpha * u - beta * np.sign(u))

    def r_hess(u):
        u = np.asarray(u, float)
        return np.where(np.abs(u) <= u_break, 2.0 * m * b * b / (a * a), 2.0 * alpha)

    def soft(x):
        x = np.asarray(x, float)
        return np.sign(x) * np.maximum(np.abs(x) - 1.0, 0.0)

    # dual of r in closed form: quadratic minus the soft-threshold square
    s_quad = a * a / (4.0 * m * b * b)

    def r_conj_value(nu):
        nu = np.asarray(nu, float)
        return s_quad * nu ** 2 - soft(nu / b) ** 2 / (4.0 * (eps + m))

    def r_conj_grad(nu):
        nu = np.asarray(nu, float)
        return 2.0 * s_quad * nu - soft(nu / b) / (2.0 * b * (eps + m))

    def r_conj_hess(nu):
        nu = np.asarray(nu, float)
        inner = np.abs(nu / b) <= 1.0
        return 2.0 * s_quad - np.where(inner, 0.0, 1.0) / (2.0 * b * b * (eps + m))

    r = ConvexFunction(dim=1, value=r_value, gradient=r_grad, hessian=r_hess,
                       kind=cv.KIND_PIECEWISE, name="elasticnet-control-cost",
                       scale=max(1.0, u_break),
                       conjugate_value=r_conj_value,
                       conjugate_gradient=r_conj_grad,
                       conjugate_hessian=r_conj_hess)

    def printed(x: float) -> float:
        s = 2.0 * m * x / a
        if abs(s) <= 1.0:
            return -(a / b) * x
        return -(a / b) * x + (abs(s) - 1.0) * float(np.sign(s)) / (2.0 * b * (eps + m))

    system = scalar_system(a, b)
    controller = _scalar_controller(system, np.array([[m]]), r, printed)
    return FamilyTriple("elasticnet", params, q, r, controller, system,
                        syn.MODE_STATE_FIRST)


# ---------------------------------------------------------------------------
# Name-based construction (CLI configs and certificate files)
# ---------------------------------------------------------------------------


def build_family(name: str, a: float, b: float, params: dict) -> FamilyTriple:
    """Instantiate a family by registry name with plant gains (a, b)."""
    extra = dict(params)
    extra.pop("a", None)
    extra.pop("b", None)
    fp = ScalarFamilyParams(a=a, b=b, m=float(extra.pop("m")),
                            t=float(extra["t"]) if "t" in extra else None,
                            epsilon=float(extra["epsilon"]) if "epsilon" in extra else None)
    unknown = set(extra) - {"t", "epsilon"}
    if unknown:
        raise ValidationError(f"unknown family parameters: {sorted(unknown)}")
    if name == "bangbang":
        return bangbang_family(fp)
    if name == "exponential":
        return exponential_family(fp)
    if name == "elasticnet":
        return elasticnet_family(fp)
    raise ValidationError(f"unknown family {name!r}; known: {FAMILY_NAMES}")


def build_registered_cost(name: str, params: dict, dim: int) -> ConvexFunction:
    """Registered standalone costs for the custom design modes."""
    params = dict(params)
    if name == "quadratic":
        P = np.asarray(params.pop("P"), dtype=float)
        if params:
            raise ValidationError(f"unknown quadratic parameters: {sorted(params)}")
        if dim == 1:
            return cv.quadratic(float(P if P.ndim == 0 else P.reshape(())),
                                name="quadratic-cost") if P.size == 1 \
                else cv.quadratic(P)
        return cv.quadratic(P.reshape(dim, dim))
    if name == "elastic_net":
        eps = float(params.pop("epsilon"))
        weight = float(params.pop("weight", 1.0))
        if params:
            raise ValidationError(f"unknown elastic_net parameters: {sorted(params)}")
        if dim != 1:
            raise ValidationError("elastic_net cost is scalar")
        return cv.abs_plus_quadratic(eps, weight)
    if name == "bangbang":
        t = float(params.pop("t"))
        if params:
            raise ValidationError(f"unknown bangbang parameters: {sorted(params)}")
        if dim != 1:
            raise ValidationError("bangbang cost is scalar")
        return cv.box_quadratic(t)
    if name == "exponential":
        if params:
            raise ValidationError(f"unknown exponential parameters: {sorted(params)}")
        if dim != 1:
            raise ValidationError("exponential cost is scalar")
        return cv.exp_abs()
    raise ValidationError(
        f"unknown registered cost {name!r}; known: quadratic, elastic_net, "
        f"bangbang, exponential")


def certificate_costs(family: Optional[str], params: dict, system: LinearSystem,
                      M: np.ndarray, mode: str):
    """Reconstruct (q, r, p) for a stored certificate.

    Family costs are pinned by the family parameters (so a perturbed M is
    detectable by the identity checks); custom costs re-derive their
    companion against the stored M.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if family in FAMILY_NAMES:
        if not system.is_scalar:
            raise ValidationError("closed-form families are scalar")
        triple = build_family(family, system.a, system.b, params)
        q, r = triple.q, triple.r
        p = syn.make_p(q, M)
        return q, r, p
    if family is None:
        raise ValidationError("certificate carries no cost identity")
    if mode == syn.MODE_STATE_FIRST:
        q = build_registered_cost(family, params, system.n)
        r = syn.derive_r_from_q(system, q, M)
        p = syn.make_p(q, M)
        return q, r, p
    r = build_registered_cost(family, params, system.m)
    q, p = syn.derive_q_from_r(system, r, M)
    return q, r, p
