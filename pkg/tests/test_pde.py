import numpy as np
import pytest

import inhibopt as ib
from conftest import rel_err, reference_pde


def random_diffusion(grid, rng, scale=1.0):
    d1, d2, d3 = grid.dims
    a1 = np.zeros((d1 + 1, d2, d3))
    a2 = np.zeros((d1, d2 + 1, d3))
    a3 = np.zeros((d1, d2, d3 + 1))
    a1[1:-1] = scale * rng.random((max(d1 - 1, 0), d2, d3))
    a2[:, 1:-1] = scale * rng.random((d1, max(d2 - 1, 0), d3))
    a3[:, :, 1:-1] = scale * rng.random((d1, d2, max(d3 - 1, 0)))
    return ib.DiffusionField(grid, a1, a2, a3)


class TestApplyDivergence:
    def test_uniform_field_maps_to_exact_zero(self, rng):
        grid = ib.SpaceGrid.from_cells(4, 3, 2)
        A = random_diffusion(grid, rng)
        out = ib.apply_divergence(A, ib.ScalarField.uniform(grid, 0.7))
        assert np.all(out.values == 0.0)

    def test_unit_spike_seven_point_stencil(self):
        grid = ib.SpaceGrid.from_cells(2, 2, 2)  # 3x3x3 points, ds=1
        A = ib.DiffusionField.isotropic(grid, 1.0)
        spike = np.zeros(grid.dims)
        spike[1, 1, 1] = 1.0
        out = ib.apply_divergence(A, ib.ScalarField(grid, spike)).values
        assert out[1, 1, 1] == -6.0
        for n in ((0, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 1), (1, 1, 0), (1, 1, 2)):
            assert out[n] == 1.0
        assert out.sum() == 0.0

    def test_conservation_on_random_data(self, rng):
        for _ in range(100):
            cells = tuple(int(n) for n in rng.integers(1, 6, size=3))
            grid = ib.SpaceGrid.from_cells(*cells, spacing=float(rng.uniform(0.5, 2.0)))
            A = random_diffusion(grid, rng, scale=float(rng.uniform(0.1, 10.0)))
            phi = ib.ScalarField(grid, rng.random(grid.dims))
            out = ib.apply_divergence(A, phi)
            scale = grid.npoints * max(A.max_abs(), 1e-300) * np.abs(phi.values).max()
            assert abs(out.values.sum()) <= 1e-12 * scale

    def test_grid_mismatch_rejected(self):
        g1 = ib.SpaceGrid.from_cells(2, 2, 2)
        g2 = ib.SpaceGrid.from_cells(3, 2, 2)
        with pytest.raises(ib.ProblemError):
            ib.apply_divergence(ib.DiffusionField.isotropic(g1, 1.0),
                                ib.ScalarField.uniform(g2, 0.5))


class TestCnStep:
    def test_no_dynamics_is_identity(self):
        grid = ib.SpaceGrid.from_cells(2, 2, 1)
        prob = reference_pde(cells=(2, 2, 1), diffusion=0.0,
                         amplitude=ib.ScalarField.uniform(grid, 0.0))
        theta = ib.ScalarField(grid, np.random.default_rng(0).random(grid.dims))
        out = ib.cn_step(theta, 0.0, 1e-3, prob)
        assert np.array_equal(out.values, theta.values)

    def test_scalar_closed_form_third_order_local_error(self):
        # single step with constant alpha=1 against the exact exponential
        grid = ib.SpaceGrid.from_cells(1, 1, 1)
        prob = ib.PdeProblem(
            ib.TimeGrid(1.0, 1e-3, ()), grid, ib.ConstantPressure.uniform(grid, 1.0),
            ib.DiffusionField.isotropic(grid, 0.0), ib.ChemicalParams(0.0, 0.0),
            ib.ScalarField.uniform(grid, 0.4),
        )
        errs = []
        for h in (1e-2, 5e-3):
            out = ib.cn_step(ib.ScalarField.uniform(grid, 0.4), 0.0, h, prob)
            exact = 1.0 + (0.4 - 1.0) * np.exp(-h)
            errs.append(abs(float(out.values[0, 0, 0]) - exact))
        assert errs[0] < 1e-7
        assert errs[0] / errs[1] == pytest.approx(8.0, rel=0.2)  # O(h^3) per step

    def test_uniform_field_stays_uniform(self):
        prob = reference_pde(cells=(3, 3, 2), diffusion=7.5)
        theta = ib.ScalarField.uniform(prob.grid, 0.4)
        out = ib.cn_step(theta, 0.1, 1e-3, prob, u_sample=0.5)
        assert out.values.max() == out.values.min()

    def test_bad_step_rejected(self):
        prob = reference_pde(cells=(1, 1, 1))
        with pytest.raises(ib.ProblemError):
            ib.cn_step(ib.ScalarField.uniform(prob.grid, 0.4), 0.0, -1e-3, prob)


class TestSimulatePde:
    def test_noop_pulses(self):
        prob = reference_pde(cells=(2, 2, 1), t_end=0.2)
        traj = ib.simulate_pde(prob)
        assert len(traj.jumps) == prob.time_grid.n_candidates
        for j in traj.jumps:
            assert np.array_equal(j.pre, j.post)

    def test_diffusion_invisible_on_uniform_data(self):
        t1 = ib.simulate_pde(reference_pde(cells=(4, 4, 2), t_end=0.3, diffusion=1.0))
        t10 = ib.simulate_pde(reference_pde(cells=(4, 4, 2), t_end=0.3, diffusion=10.0))
        assert np.array_equal(t1.fields, t10.fields)

    def test_pulse_is_exact_pointwise_multiplication(self, rng):
        prob = reference_pde(cells=(3, 2, 1), t_end=0.2)
        v = ib.PulseStrategy(rng.random((prob.time_grid.n_candidates, *prob.grid.dims)))
        traj = ib.simulate_pde(prob, None, v)
        for j in traj.jumps:
            assert np.array_equal(j.post, j.applied * j.pre)

    def test_zero_threshold_realizes_all_candidates(self):
        prob = reference_pde(cells=(2, 2, 1), t_end=0.3, sigma_star=0.0)
        traj = ib.simulate_pde(prob)
        assert [j.candidate_index for j in traj.jumps] == list(range(prob.time_grid.n_candidates))

    def test_threshold_gates_pulses(self):
        # pick sigma_star so that the L2 gate opens partway through the run:
        # the state grows from 0.4, so early candidates stay unrealized
        grid = ib.SpaceGrid.from_cells(2, 2, 1)
        free = ib.simulate_pde(reference_pde(cells=(2, 2, 1), t_end=0.3, sigma_star=0.0))
        mid = free.fields[len(free.fields) // 2]
        thr = float(np.sqrt(np.sum(mid**2) * grid.cell_volume)) / grid.volume
        prob = reference_pde(cells=(2, 2, 1), t_end=0.3, sigma_star=thr)
        traj = ib.simulate_pde(prob)
        assert 0 < len(traj.jumps) < len(free.jumps)
        for j in traj.jumps:
            l2 = float(np.sqrt(np.sum(j.pre**2) * grid.cell_volume))
            assert l2 >= thr * grid.volume

    def test_storage_decimation_keeps_jumps_and_end(self):
        prob = reference_pde(cells=(2, 2, 1), t_end=0.2)
        traj = ib.simulate_pde(prob, store_every=7)
        nodes = set(int(n) for n in traj.node_indices)
        assert len(prob.time_grid.times) - 1 in nodes
        for j in traj.jumps:
            assert j.node_index in nodes

    def test_invariance_small_sweep(self, rng):
        for _ in range(5):
            cells = tuple(int(n) for n in rng.integers(1, 5, size=3))
            grid = ib.SpaceGrid.from_cells(*cells)
            prob = reference_pde(
                cells=cells, t_end=0.25,
                diffusion=float(rng.uniform(0, 10)),
                amplitude=ib.build_random_amplitude(grid, float(rng.uniform(0.2, 2.0)),
                                                    seed=int(rng.integers(1 << 31))),
                initial=ib.ScalarField(grid, rng.random(grid.dims)),
                sigma=float(rng.uniform(0, 0.9)),
            )
            u = ib.ContinuousControl.constant(prob.time_grid, float(rng.uniform(0, 0.9)))
            v = ib.PulseStrategy(rng.random((prob.time_grid.n_candidates, *grid.dims)))
            traj = ib.simulate_pde(prob, u, v)
            assert traj.fields.min() >= -1e-6 and traj.fields.max() <= 1 + 1e-6


class TestCostPde:
    def test_zero_field_zero_cost(self):
        prob = reference_pde(cells=(2, 2, 1), t_end=0.2, initial=0.0,
                         amplitude=ib.ScalarField.uniform(ib.SpaceGrid.from_cells(2, 2, 1), 0.0))
        traj = ib.simulate_pde(prob)
        v = ib.PulseStrategy.no_intervention(prob.time_grid)
        cost = ib.cost_pde(traj, v, None, ib.CostSpec.constant(prob.time_grid, 0.5), prob)
        assert cost.total == 0.0

    def test_uniform_problem_scales_with_point_count(self, rng):
        prob_p = reference_pde(cells=(3, 2, 1), t_end=0.3)
        tg = prob_p.time_grid
        n = prob_p.grid.npoints
        v_scalar = rng.random(tg.n_candidates)
        u = ib.ContinuousControl.constant(tg, 0.4)
        costs = ib.CostSpec.constant(tg, 0.5, continuous_unit=0.7, final=0.25)

        traj_p = ib.simulate_pde(prob_p, u, ib.PulseStrategy(v_scalar))
        cost_p = ib.cost_pde(traj_p, ib.PulseStrategy(v_scalar), u, costs, prob_p)

        prob_a = prob_p.averaged()
        traj_a = ib.simulate_averaged(prob_a, u, ib.PulseStrategy(v_scalar))
        cost_a = ib.cost_averaged(traj_a, ib.PulseStrategy(v_scalar), u, costs)

        for name in ("running_state", "running_control", "pulse", "final", "total"):
            assert rel_err(getattr(cost_p, name), n * getattr(cost_a, name)) < 1e-6, name


def test_uniform_reference_cost_reduces_to_averaged_times_volume():
    # uniform data, c = 0.55, C_f = 0: the space-dependent total is the
    # averaged total scaled by the quadrature volume
    prob_p = reference_pde(cells=(10, 10, 3))
    tg = prob_p.time_grid
    costs = ib.CostSpec.constant(tg, 0.55)
    v = ib.PulseStrategy.no_intervention(tg)
    total_p = ib.cost_pde(ib.simulate_pde(prob_p, None, v), v, None, costs, prob_p).total
    total_a = ib.cost_averaged(ib.simulate_averaged(prob_p.averaged(), None, v), v, None, costs).total
    assert rel_err(total_p, prob_p.grid.volume * total_a) < 1e-6


class TestSpatialAverage:
    def test_uniform_value_passthrough(self):
        prob = reference_pde(cells=(2, 2, 1), t_end=0.1)
        avg = ib.spatial_average(ib.simulate_pde(prob))
        assert avg.values[0] == pytest.approx(0.4, abs=1e-15)

    def test_sine_initial_mean(self):
        grid = ib.SpaceGrid.from_cells(10, 10, 3)
        rho = ib.build_initial_condition(grid, 0.4, floor=0.2)
        prob = reference_pde(cells=(10, 10, 3), t_end=0.05, initial=rho)
        avg = ib.spatial_average(ib.simulate_pde(prob, store_every=10))
        assert abs(avg.values[0] - 0.4) <= 1e-12

    def test_uniform_run_tracks_averaged_solver(self):
        prob_p = reference_pde(cells=(4, 4, 2), t_end=0.5, diffusion=3.0)
        traj_p = ib.simulate_pde(prob_p)
        traj_a = ib.simulate_averaged(prob_p.averaged())
        avg = ib.spatial_average(traj_p)
        assert np.max(np.abs(avg.values - traj_a.values)) < 1e-8


class TestConvergenceOrder:
    def test_second_order_in_time_constant_coefficients(self):
        grid = ib.SpaceGrid.from_cells(1, 1, 1)

        def terminal(h):
            prob = ib.PdeProblem(
                ib.TimeGrid(1.0, h, ()), grid, ib.ConstantPressure.uniform(grid, 1.0),
                ib.DiffusionField.isotropic(grid, 0.0), ib.ChemicalParams(0.0, 0.0),
                ib.ScalarField.uniform(grid, 0.4),
            )
            return float(ib.simulate_pde(prob, store_every=10**9).fields[-1][0, 0, 0])

        exact = 1.0 + (0.4 - 1.0) * np.exp(-1.0)
        e1 = abs(terminal(1e-2) - exact)
        e2 = abs(terminal(5e-3) - exact)
        assert 3.5 <= e1 / e2 <= 4.5

    def test_second_order_against_fine_reference_smooth_problem(self):
        grid = ib.SpaceGrid.from_cells(2, 2, 2)
        rho = ib.ScalarField(grid, 0.2 + 0.6 * np.random.default_rng(4).random(grid.dims))

        def terminal(h):
            prob = reference_pde(cells=(2, 2, 2), t_end=0.25, diffusion=2.0, initial=rho)
            prob = ib.PdeProblem(ib.TimeGrid(0.25, h, ()), prob.grid, prob.pressure,
                                 prob.diffusion, prob.chem, prob.initial)
            return ib.simulate_pde(prob, store_every=10**9).fields[-1]

        ref = terminal(2.5e-4)
        e1 = np.abs(terminal(4e-3) - ref).max()
        e2 = np.abs(terminal(2e-3) - ref).max()
        assert 3.5 <= e1 / e2 <= 4.5


def test_cg_iteration_budget_failure_reports_residual(monkeypatch, rng):
    import inhibopt.pde as pde_mod

    monkeypatch.setattr(pde_mod, "CG_ITER_FACTOR", 0)  # exhaust the budget immediately
    grid = ib.SpaceGrid.from_cells(2, 2, 1)
    op = ib.DiscreteOperator(ib.DiffusionField.isotropic(grid, 1.0),
                             np.full(grid.dims, 0.5), 1.0)
    with pytest.raises(ib.LinearSolverError) as err:
        pde_mod._cg(op, 0.5, rng.random(grid.dims), np.zeros(grid.dims))
    assert err.value.residual > 0
