"""Forward simulation of the spatially averaged impulsive model.

Between pulses the scalar inhibition rate obeys

    d/dt Theta = alpha(t) * (1 - Theta / (1 - sigma*u(t))),

i.e. exponential relaxation towards the attractor 1 - sigma*u at rate
alpha/(1 - sigma*u); at each realized pulse time Theta jumps to v_i * Theta.
Each integration step freezes alpha at the step midpoint and u at the step's
stored sample and applies the exact exponential update

    Theta <- attr + (Theta - attr) * exp(-rate * dt).

This evaluates the semiflow's two integral terms in closed form for the
frozen coefficients: it is exact for (step-aligned) piecewise-constant
alpha and u, second-order for smooth alpha, and maps [0,1] into [0,1]
unconditionally since the update is a convex combination.

Pulse thresholding: a candidate time t_k becomes a realized pulse time iff
Theta(t_k) >= sigma_star (pre-jump value, ties trigger).  Stored trajectory
values are left limits; post-jump values live in the jump records.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import (
    AveragedProblem,
    ContinuousControl,
    CostBreakdown,
    CostSpec,
    ProblemError,
    PulseStrategy,
    QuadratureError,
)


@dataclass(frozen=True)
class Jump:
    """One realized pulse: state pre/post values and the applied v."""

    time: float
    node_index: int
    candidate_index: int
    pre: float | np.ndarray
    post: float | np.ndarray
    applied: float | np.ndarray


@dataclass
class AveragedTrajectory:
    """Scalar state per integration node, left-continuous at pulses."""

    times: np.ndarray
    values: np.ndarray
    jumps: list[Jump]

    def post_values(self) -> np.ndarray:
        """Node values with post-jump values substituted at pulse nodes."""
        y = self.values.copy()
        for j in self.jumps:
            y[j.node_index] = j.post
        return y


def _step_coefficients(problem: AveragedProblem, u: ContinuousControl):
    """Per-step frozen rate/attractor/decay arrays for the exponential update."""
    tg = problem.time_grid
    alpha_mid = np.asarray(problem.alpha(tg.mid_times), dtype=float)
    alpha_mid = np.broadcast_to(alpha_mid, tg.mid_times.shape)
    bad = ~np.isfinite(alpha_mid)
    if bad.any():
        raise QuadratureError(float(tg.mid_times[np.argmax(bad)]))
    attr = 1.0 - problem.chem.sigma * u.samples
    rate = alpha_mid / attr
    decay = np.exp(-rate * tg.dt)
    return attr, rate, decay


def semiflow_step(
    theta_start: float,
    t_from: float,
    t_to: float,
    alpha: Callable,
    u: Callable,
    sigma: float,
    step: float = 1e-3,
) -> float:
    """Advance the pulse-free flow from t_from to t_to.

    ``alpha`` and ``u`` are time callables (must broadcast over arrays); the
    span is subdivided with step <= ``step`` and integrated with the
    exponential midpoint update.  Composes exactly across aligned sub-spans.
    """
    if not t_from < t_to:
        raise ProblemError(f"need t_from < t_to, got {t_from} >= {t_to}")
    n = max(1, int(np.ceil((t_to - t_from) / step - 1e-12)))
    edges = t_from + (t_to - t_from) * np.arange(n + 1) / n
    mids = (edges[:-1] + edges[1:]) / 2.0
    a = np.broadcast_to(np.asarray(alpha(mids), dtype=float), mids.shape)
    bad = ~np.isfinite(a)
    if bad.any():
        raise QuadratureError(float(mids[np.argmax(bad)]))
    attr = 1.0 - sigma * np.broadcast_to(np.asarray(u(mids), dtype=float), mids.shape)
    decay = np.exp(-(a / attr) * np.diff(edges))
    theta = float(theta_start)
    for k in range(n):
        theta = attr[k] + (theta - attr[k]) * decay[k]
    return theta


def simulate_averaged(
    problem: AveragedProblem,
    u: ContinuousControl | None = None,
    v: PulseStrategy | None = None,
) -> AveragedTrajectory:
    """Integrate the averaged model with threshold-gated pulses.

    With sigma_star = 0 every candidate time is a realized pulse time.  The
    strategy must carry one value per candidate time; only realized
    candidates consume theirs.
    """
    tg = problem.time_grid
    if u is None:
        u = ContinuousControl.constant(tg, 0.0)
    if v is None:
        v = PulseStrategy.no_intervention(tg)
    if len(v) != tg.n_candidates:
        raise ProblemError(
            f"strategy has {len(v)} values for {tg.n_candidates} candidate pulse times"
        )
    attr, _, decay = _step_coefficients(problem, u)

    values = np.empty(len(tg.times))
    jumps: list[Jump] = []
    pulse_at = {node: k for k, node in enumerate(tg.candidate_indices)}
    theta = float(problem.theta0)
    for n in range(len(tg.times)):
        values[n] = theta
        k = pulse_at.get(n)
        if k is not None and theta >= problem.chem.sigma_star:
            post = float(v.values[k]) * theta
            jumps.append(Jump(tg.times[n], n, k, theta, post, float(v.values[k])))
            theta = post
        if n < tg.n_steps:
            theta = attr[n] + (theta - attr[n]) * decay[n]
    return AveragedTrajectory(tg.times.copy(), values, jumps)


def cost_averaged(
    traj: AveragedTrajectory,
    v: PulseStrategy,
    u: ContinuousControl | None,
    costs: CostSpec,
) -> CostBreakdown:
    """Evaluate the cost functional on a simulated trajectory.

    Running state: trapezoid on the stored grid split at jumps (post-jump
    value starts each span).  Running control: exact per-step C*u*dt.
    Pulse: sum of c_i*(1-v_i)*Theta(tau_i) over realized pulses with pre-jump
    values.  Final: C_f*Theta(T) (left limit).
    """
    if costs.pulse_unit.shape[0] != len(v):
        raise ProblemError(
            f"{costs.pulse_unit.shape[0]} pulse unit costs for a strategy of length {len(v)}"
        )
    if traj.jumps and max(j.candidate_index for j in traj.jumps) >= len(v):
        raise ProblemError("trajectory jumps refer to candidates beyond the strategy length")
    dt = np.diff(traj.times)
    left = traj.post_values()[:-1]
    right = traj.values[1:]
    running_state = float(np.sum(dt * (left + right) / 2.0))

    running_control = 0.0
    if u is not None and u.samples.size:
        running_control = float(np.sum(costs.continuous_unit * u.samples * dt))

    pulse = 0.0
    for j in traj.jumps:
        pulse += float(costs.pulse_unit[j.candidate_index]) * (1.0 - j.applied) * j.pre
    final = float(costs.final) * traj.values[-1]
    return CostBreakdown.assemble(running_state, running_control, pulse, final)


def sensitivity_pulse_averaged(
    problem: AveragedProblem,
    u: ContinuousControl | None,
    base: PulseStrategy,
    direction: PulseStrategy | np.ndarray,
    forward: AveragedTrajectory | None = None,
) -> AveragedTrajectory:
    """Directional state derivative z with respect to the pulse strategy.

    z decays at the same rate as the state between pulses and jumps by
    z(tau_i^+) = d_i*Theta(tau_i) + v_i*z(tau_i) where d is the direction.
    Verification oracle for the adjoint pulse gradient; the discrete z is the
    exact derivative of the discrete forward map.
    """
    tg = problem.time_grid
    if u is None:
        u = ContinuousControl.constant(tg, 0.0)
    d = direction.values if isinstance(direction, PulseStrategy) else np.asarray(direction, float)
    if forward is None:
        forward = simulate_averaged(problem, u, base)
    _, _, decay = _step_coefficients(problem, u)

    z_values = np.empty(len(tg.times))
    jumps: list[Jump] = []
    realized = {j.node_index: j for j in forward.jumps}
    z = 0.0
    for n in range(len(tg.times)):
        z_values[n] = z
        j = realized.get(n)
        if j is not None:
            z_post = float(d[j.candidate_index]) * j.pre + j.applied * z
            jumps.append(Jump(j.time, n, j.candidate_index, z, z_post, j.applied))
            z = z_post
        if n < tg.n_steps:
            z = z * decay[n]
    return AveragedTrajectory(tg.times.copy(), z_values, jumps)
