"""Closed-loop rollouts, divergence cost accounting, and Lyapunov monitoring.

Rollouts are bit-reproducible: the disturbance at step k comes from a
counter-based stream keyed by (seed, k), so the same seed always produces
the same trajectory and different controllers can be compared under common
random numbers by sharing seeds.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .convex import ConvexFunction, eval_bregman
from .errors import MalformedTrajectoryError, ValidationError
from .synthesis import Controller
from .system import RNG_ALGORITHM, LinearSystem


@dataclass(frozen=True)
class Trajectory:
    """Realized states, inputs and disturbances of one closed-loop run."""

    states: np.ndarray   # (N+1, n)
    inputs: np.ndarray   # (N, m)
    noises: np.ndarray   # (N, n)
    seed: int
    rng_algorithm: str = RNG_ALGORITHM

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        noises = np.atleast_2d(np.asarray(self.noises, dtype=float))
        if len(states) != len(inputs) + 1 or len(noises) != len(inputs):
            raise MalformedTrajectoryError(
                "need N+1 states and N inputs and N noise records")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "noises", noises)

    @property
    def horizon(self) -> int:
        return len(self.inputs)

    def dynamics_consistent(self, system: LinearSystem) -> bool:
        """Exact (bitwise) replay of x+ = Ax + Bu + w."""
        for k in range(self.horizon):
            predicted = system.A @ self.states[k] + system.B @ self.inputs[k] + self.noises[k]
            if not np.array_equal(predicted, self.states[k + 1]):
                return False
        return True


def rollout(system: LinearSystem, controller: Controller, x0, horizon: int,
            seed: int) -> Trajectory:
    """Run the closed loop for `horizon` steps under the seeded noise."""
    if horizon < 1:
        raise ValidationError("horizon must be at least 1")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).reshape(system.n)
    states = np.zeros((horizon + 1, system.n))
    inputs = np.zeros((horizon, system.m))
    noises = np.zeros((horizon, system.n))
    states[0] = x0
    for k in range(horizon):
        try:
            u = controller.feedback(states[k])
        except BregctlError as exc:
            raise type(exc)(f"controller failed at step {k}: {exc}") from exc
        w = system.noise.sample_step(seed, k)
        inputs[k] = u
        noises[k] = w
        states[k + 1] = system.A @ states[k] + system.B @ u + w
    return Trajectory(states=states, inputs=inputs, noises=noises, seed=seed)


@dataclass(frozen=True)
class CostReport:
    """Per-step divergence costs of a trajectory.

    ``per_step_state_cost[j]`` is the state summand indexed k = j+1: the
    divergence between the deterministic update A x_k-1 + B u_k-1 (equal to
    x_k - w_k-1) and the reflected disturbance.  ``state_cost_at_states``
    reports the plain q(x_k) alongside for comparison, since the summand
    penalizes the pre-noise update rather than the realized state itself.
    """

    per_step_state_cost: np.ndarray      # length N-1, summands k = 1..N-1
    per_step_control_cost: np.ndarray    # length N,   summands k = 0..N-1
    average_cost: float
    lyapunov_values: Optional[np.ndarray]  # length N+1 when p was supplied
    noise_floor_estimate: float
    state_cost_at_states: np.ndarray     # q(x_k) for k = 0..N


def evaluate_cost(trajectory: Trajectory, q: ConvexFunction, r: ConvexFunction,
                  system: LinearSystem, p: Optional[ConvexFunction] = None) -> CostReport:
    """Account the infinite-horizon divergence cost along a finite run.

    The state summand at index k needs the recorded disturbance w_{k-1};
    trajectories without noise records are rejected.  The noise floor is
    the Monte-Carlo mean of D_q(0, -w) over the recorded draws.
    """
    N = trajectory.horizon
    if trajectory.noises.shape != (N, system.n):
        raise MalformedTrajectoryError("trajectory is missing noise records")
    scalar = q.dim == 1

    def qval(x):
        return float(q.value(float(x[0]))) if scalar else float(q.value(x))

    state_costs = np.zeros(max(N - 1, 0))
    for k in range(1, N):
        z = trajectory.states[k] - trajectory.noises[k - 1]
        w = trajectory.noises[k - 1]
        if scalar:
            state_costs[k - 1] = eval_bregman(q, float(z[0]), float(-w[0]))
        else:
            state_costs[k - 1] = eval_bregman(q, z, -w)
    control_costs = np.zeros(N)
    for k in range(N):
        u = trajectory.inputs[k]
        control_costs[k] = float(r.value(float(u[0]))) if r.dim == 1 else float(r.value(u))
    total = float(state_costs.sum() + control_costs.sum())
    lyap = None
    if p is not None:
        lyap = np.array([float(p.value(float(x[0]))) if p.dim == 1 else float(p.value(x))
                         for x in trajectory.states])
    floors = []
    zero = 0.0 if scalar else np.zeros(q.dim)
    for w in trajectory.noises:
        floors.append(eval_bregman(q, zero, float(-w[0]) if scalar else -w))
    return CostReport(
        per_step_state_cost=state_costs,
        per_step_control_cost=control_costs,
        average_cost=total / N,
        lyapunov_values=lyap,
        noise_floor_estimate=float(np.mean(floors)),
        state_cost_at_states=np.array([qval(x) for x in trajectory.states]),
    )


@dataclass(frozen=True)
class LyapunovReport:
    residuals: np.ndarray
    max_residual: float
    strict_decrease: bool
    first_violation: Optional[int]


def lyapunov_monitor(trajectory: Trajectory, p: ConvexFunction, q: ConvexFunction,
                     r: ConvexFunction, controller: Controller,
                     system: LinearSystem) -> LyapunovReport:
    """Per-step residuals of p(Ax+Bu) - p(x) + r(u) + q(x) = 0.

    For noise-free trajectories additionally reports whether p decreased
    strictly at every step taken from a nonzero state.  The trajectory's
    inputs are checked against the controller, since the identity is a
    statement about the closed loop.
    """
    N = trajectory.horizon
    scalar = p.dim == 1
    noiseless = not np.any(trajectory.noises)
    residuals = np.zeros(N)
    strict = True
    first_violation = None
    for k in range(N):
        x = trajectory.states[k]
        u = trajectory.inputs[k]
        if not np.allclose(u, controller.feedback(x), atol=1e-9, rtol=1e-9):
            raise ValidationError(
                f"trajectory input at step {k} does not match the controller")
        z = system.A @ x + system.B @ u

        def ev(f, v):
            return float(f.value(float(v[0]))) if f.dim == 1 else float(f.value(v))

        pz = ev(p, z)
        px = ev(p, x)
        ru = float(r.value(float(u[0]))) if r.dim == 1 else float(r.value(u))
        qx = ev(q, x)
        residuals[k] = (pz - px + ru + qx) / (1.0 + abs(pz) + abs(px) + abs(ru) + abs(qx))
        if noiseless and float(np.linalg.norm(x)) > 0.0:
            if not ev(p, trajectory.states[k + 1]) < px:
                strict = False
                if first_violation is None:
                    first_violation = k
    return LyapunovReport(residuals=residuals,
                          max_residual=float(np.max(np.abs(residuals))) if N else 0.0,
                          strict_decrease=strict if noiseless else True,
                          first_violation=first_violation)


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def trajectory_csv_text(trajectory: Trajectory, report: CostReport,
                        system: LinearSystem) -> str:
    """Render one run as CSV: k, x[0..n), u[0..m), w[0..n), state_cost,
    control_cost, lyapunov.  The state-cost column at row k carries the
    summand indexed k (zero at k = 0, which has no state summand); floats
    use shortest round-trip repr, LF line endings, UTF-8."""
    n, m = system.n, system.m
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = (["k"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
              + [f"w{i}" for i in range(n)] + ["state_cost", "control_cost", "lyapunov"])
    writer.writerow(header)
    N = trajectory.horizon
    for k in range(N):
        state_cost = 0.0 if k == 0 else float(report.per_step_state_cost[k - 1])
        lyap = "" if report.lyapunov_values is None else repr(float(report.lyapunov_values[k]))
        row = ([k]
               + [repr(float(v)) for v in trajectory.states[k]]
               + [repr(float(v)) for v in trajectory.inputs[k]]
               + [repr(float(v)) for v in trajectory.noises[k]]
               + [repr(state_cost), repr(float(report.per_step_control_cost[k])), lyap])
        writer.writerow(row)
    return buf.getvalue()


def write_trajectory_csv(path, trajectory: Trajectory, report: CostReport,
                         system: LinearSystem) -> Path:
    path = Path(path)
    path.write_bytes(trajectory_csv_text(trajectory, report, system).encode("utf-8"))
    return path
