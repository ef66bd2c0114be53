"""Crank-Nicolson solver for the space-dependent impulsive model.

Semi-discrete operator M = -diag(alpha/(1-sigma*u)) + div(A grad .) with the
seven-point face-weighted divergence stencil

    (div A grad phi)_ijk = [ A1_(i+.5) (phi_(i+1)-phi_i) - A1_(i-.5) (phi_i-phi_(i-1))
                             + ... (axes 2,3) ] / ds^2,

whose face coefficients vanish on boundary-crossing faces (no-flux).  The
stencil telescopes, so the grid sum of div(A grad phi) is exactly zero.

Time stepping solves the centered-difference update

    (I - h/2 M) theta^(1) = h*alpha^(.5) + (I + h/2 M) theta^(0)

with matrix-free conjugate gradient (the operator is symmetric positive
definite for admissible inputs).  alpha is evaluated at t + h/2, u at the
step's stored sample.  Pulses are exact pointwise multiplications applied at
realized candidate times; realization is gated by the grid-quadrature L2
threshold ||theta|| >= sigma_star * |Omega|.

All reductions are single-threaded numpy sums, so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .averaged import AveragedTrajectory, Jump
from .model import (
    ContinuousControl,
    CostBreakdown,
    CostSpec,
    DiffusionField,
    LinearSolverError,
    PdeProblem,
    ProblemError,
    PulseStrategy,
    ScalarField,
)

CG_RTOL = 1e-10
CG_ITER_FACTOR = 10


def _div(diffusion: DiffusionField, phi: np.ndarray, spacing: float) -> np.ndarray:
    """Face-weighted divergence stencil; grid sum is exactly zero."""
    out = np.zeros_like(phi)
    f1, f2, f3 = diffusion.interior_faces()
    flux = f1 * np.diff(phi, axis=0)
    out[:-1] += flux
    out[1:] -= flux
    flux = f2 * np.diff(phi, axis=1)
    out[:, :-1] += flux
    out[:, 1:] -= flux
    flux = f3 * np.diff(phi, axis=2)
    out[:, :, :-1] += flux
    out[:, :, 1:] -= flux
    out /= spacing**2
    return out


def apply_divergence(diffusion: DiffusionField, phi: ScalarField) -> ScalarField:
    """div(A grad phi) on the grid; conservative by construction."""
    if diffusion.grid.dims != phi.grid.dims:
        raise ProblemError(
            f"diffusion grid {diffusion.grid.dims} does not match field grid {phi.grid.dims}"
        )
    return ScalarField(phi.grid, _div(diffusion, phi.values, phi.grid.spacing))


@dataclass(frozen=True)
class DiscreteOperator:
    """The affine map's linear part M = -diag(rate) + div(A grad .), applied by stencil."""

    diffusion: DiffusionField
    rate: np.ndarray  # alpha^(.5) / (1 - sigma * u^(.5)), one value per point
    spacing: float

    def apply(self, phi: np.ndarray) -> np.ndarray:
        return -self.rate * phi + _div(self.diffusion, phi, self.spacing)


def _cg(op: DiscreteOperator, half_h: float, b: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """Solve (I - half_h*M) x = b by matrix-free conjugate gradient."""

    def apply_system(x: np.ndarray) -> np.ndarray:
        return x - half_h * op.apply(x)

    bnorm = float(np.sqrt(np.vdot(b, b).real))
    if bnorm == 0.0:
        return np.zeros_like(b)
    maxiter = CG_ITER_FACTOR * b.size
    x = x0.copy()
    r = b - apply_system(x)
    d = r.copy()
    rs = float(np.vdot(r, r).real)
    for _ in range(maxiter):
        if np.sqrt(rs) <= CG_RTOL * bnorm:
            return x
        ad = apply_system(d)
        alpha = rs / float(np.vdot(d, ad).real)
        x += alpha * d
        r -= alpha * ad
        rs_new = float(np.vdot(r, r).real)
        d = r + (rs_new / rs) * d
        rs = rs_new
    if np.sqrt(rs) <= CG_RTOL * bnorm:
        return x
    raise LinearSolverError(float(np.sqrt(rs)) / bnorm, maxiter)


def _cn_advance(
    theta: np.ndarray,
    op: DiscreteOperator,
    source: np.ndarray | float,
    h: float,
) -> np.ndarray:
    """One Crank-Nicolson step: solve (I - h/2 M) x = h*source + (I + h/2 M) theta."""
    rhs = h * source + theta + (h / 2.0) * op.apply(theta)
    return _cg(op, h / 2.0, rhs, theta)


def _step_operator(problem: PdeProblem, u_sample: np.ndarray | float, t_mid: float) -> DiscreteOperator:
    rate = problem.pressure.field_at(t_mid) / (1.0 - problem.chem.sigma * u_sample)
    rate = np.broadcast_to(rate, problem.grid.dims)
    return DiscreteOperator(problem.diffusion, rate, problem.grid.spacing)


def cn_step(
    theta: ScalarField,
    t: float,
    h: float,
    problem: PdeProblem,
    u_sample: ScalarField | np.ndarray | float = 0.0,
) -> ScalarField:
    """Advance the field from t to t+h (no pulse inside the step)."""
    if not h > 0:
        raise ProblemError(f"step must be > 0, got {h}")
    if theta.grid.dims != problem.grid.dims:
        raise ProblemError("field grid does not match problem grid")
    u_val = u_sample.values if isinstance(u_sample, ScalarField) else u_sample
    op = _step_operator(problem, u_val, t + h / 2.0)
    source = problem.pressure.field_at(t + h / 2.0)
    return ScalarField(theta.grid, _cn_advance(theta.values, op, source, h))


@dataclass
class FieldTrajectory:
    """Field per stored node (left limits), with every jump always recorded.

    ``node_indices`` maps stored rows to global integration nodes; with
    ``store_every`` > 1 the stored rows are every m-th node plus all pulse
    nodes and the final node.
    """

    grid: object
    times: np.ndarray
    node_indices: np.ndarray
    fields: np.ndarray  # (n_stored, d1, d2, d3)
    jumps: list[Jump]
    store_every: int = 1

    @property
    def complete(self) -> bool:
        return self.store_every == 1

    def post_fields(self) -> np.ndarray:
        """Stored fields with post-jump values substituted at pulse rows."""
        out = self.fields.copy()
        row_of = {int(n): r for r, n in enumerate(self.node_indices)}
        for j in self.jumps:
            out[row_of[j.node_index]] = j.post
        return out


def _uniform_u_samples(problem: PdeProblem, u: ContinuousControl | None) -> np.ndarray:
    if u is None:
        return np.zeros(problem.time_grid.n_steps)
    return u.samples


def simulate_pde(
    problem: PdeProblem,
    u: ContinuousControl | None = None,
    v: PulseStrategy | None = None,
    store_every: int = 1,
) -> FieldTrajectory:
    """Step the field with cn_step, applying threshold-gated multiplicative pulses."""
    tg = problem.time_grid
    grid = problem.grid
    if v is None:
        v = PulseStrategy.no_intervention(tg)
    if len(v) != tg.n_candidates:
        raise ProblemError(
            f"strategy has {len(v)} values for {tg.n_candidates} candidate pulse times"
        )
    if store_every < 1:
        raise ProblemError("store_every must be >= 1")
    u_samples = _uniform_u_samples(problem, u)
    pulse_at = {node: k for k, node in enumerate(tg.candidate_indices)}
    threshold = problem.chem.sigma_star * grid.volume

    stored_rows: list[int] = []
    fields: list[np.ndarray] = []
    jumps: list[Jump] = []
    theta = problem.initial.values.copy()
    n_nodes = len(tg.times)
    for n in range(n_nodes):
        keep = (n % store_every == 0) or (n == n_nodes - 1) or (n in pulse_at)
        if keep:
            stored_rows.append(n)
            fields.append(theta.copy())
        k = pulse_at.get(n)
        if k is not None:
            l2 = float(np.sqrt(np.sum(theta**2) * grid.cell_volume))
            if l2 >= threshold:
                applied = v.values[k]
                post = applied * theta
                jumps.append(Jump(tg.times[n], n, k, theta.copy(), post.copy(), applied))
                theta = post
        if n < tg.n_steps:
            op = _step_operator(problem, u_samples[n], tg.mid_times[n])
            source = problem.pressure.field_at(tg.mid_times[n])
            theta = _cn_advance(theta, op, source, tg.dt[n])
    idx = np.array(stored_rows)
    return FieldTrajectory(grid, tg.times[idx].copy(), idx, np.stack(fields), jumps, store_every)


def cost_pde(
    traj: FieldTrajectory,
    v: PulseStrategy,
    u: ContinuousControl | None,
    costs: CostSpec,
    problem: PdeProblem,
) -> CostBreakdown:
    """Cost functional with space integrals by grid quadrature sum(.) * ds^3."""
    grid = problem.grid
    w = grid.cell_volume
    if costs.pulse_unit.shape[0] != len(v):
        raise ProblemError(
            f"{costs.pulse_unit.shape[0]} pulse unit costs for a strategy of length {len(v)}"
        )
    space_left = np.sum(traj.post_fields(), axis=(1, 2, 3)) * w
    space_right = np.sum(traj.fields, axis=(1, 2, 3)) * w
    dt = np.diff(traj.times)
    running_state = float(np.sum(dt * (space_left[:-1] + space_right[1:]) / 2.0))

    running_control = 0.0
    if u is not None and u.samples.size:
        unit = costs.continuous_unit
        if unit.ndim == 1 and u.samples.ndim > 1:
            unit = unit[:, None, None, None]
        cu = unit * u.samples
        if cu.ndim == 1:  # uniform in space
            running_control = float(np.sum(cu * problem.time_grid.dt) * grid.npoints * w)
        else:
            running_control = float(
                np.sum(np.sum(cu, axis=(1, 2, 3)) * w * problem.time_grid.dt)
            )

    pulse = 0.0
    for j in traj.jumps:
        c_i = costs.pulse_unit[j.candidate_index]
        pulse += float(np.sum(c_i * (1.0 - j.applied) * j.pre) * w)
    final = float(np.sum(costs.final * traj.fields[-1]) * w)
    return CostBreakdown.assemble(running_state, running_control, pulse, final)


def spatial_average(traj: FieldTrajectory) -> AveragedTrajectory:
    """Per-time grid mean of the field trajectory; jump records averaged likewise."""
    values = traj.fields.mean(axis=(1, 2, 3))
    jumps = [
        Jump(
            j.time,
            j.node_index,
            j.candidate_index,
            float(np.mean(j.pre)),
            float(np.mean(j.post)),
            float(np.mean(j.applied)),
        )
        for j in traj.jumps
    ]
    return AveragedTrajectory(traj.times.copy(), values, jumps)
