#!/usr/bin/env python3
"""
Tests for the control solver: problem validation, the trivial fixed points of
both transcriptions, the trapezoidal residual on a test field, and the Heun
rollout integrator.
"""
import math

import numpy as np
import pytest

import solver
from capmodel import CapacitanceModel
from diffengine import Tape, finite_difference_grad, grad, value_of
from field import DiscretePotentials, ElectrodeArray, FieldConstants, force, potential_energy
from kde import Bandwidth, DensityGrid, gaussian_target, kde_evaluate, kde_values
from nnmap import PotentialMap
from optim import AdamConfig
from solver import (
    ControlProblem,
    PotentialSchedule,
    SolveError,
    SolverSettings,
    endpoint_gap,
    potential_snapshot,
    rollout,
    solve,
    solve_collocation,
    solve_continuous,
    trajectory_frame,
    uniform_potentials,
    zero_control_mse,
)

BOX = (-1.0, 1.0, -1.0, 1.0)
WIDE = (-2.0, 2.0, -2.0, 2.0)
CAP = CapacitanceModel.single(1.0, 0.4, 0.25)
X0 = np.array([[-0.2, -0.1], [0.1, 0.2], [0.25, -0.15], [0.0, 0.0]])


def _problem(x0, times, mode="continuous", target=None, bounds=BOX, h=0.2, cells=32):
    grid = DensityGrid.empty(bounds, cells)
    bw = Bandwidth(h, h)
    target = kde_evaluate(x0, bw, grid) if target is None else target
    return ControlProblem(
        bounds,
        np.asarray(times, dtype=float),
        ElectrodeArray.grid(3, 3, 0.5, 1.0),
        CAP,
        FieldConstants(sigma=CAP.sigma, gh_order=3),
        x0,
        target,
        bw,
        mode,
    )


def _quiet(**overrides):
    base = dict(log_every=0, deterministic=True, trajectory_hidden=8, potential_hidden=8)
    base.update(overrides)
    return SolverSettings(**base)


def test_problem_validation():
    times = np.linspace(0.0, 1.0, 5)
    with pytest.raises(ValueError):
        _problem(X0, np.array([0.1, 0.5, 1.0]))
    with pytest.raises(ValueError):
        _problem(X0, np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ValueError):
        _problem(np.array([[1.5, 0.0]]), times, target=gaussian_target((0, 0), 0.2, DensityGrid.empty(BOX, 32)))
    with pytest.raises(ValueError):
        _problem(X0, times, target=DensityGrid.empty(BOX, 32))
    with pytest.raises(ValueError):
        _problem(X0, times, mode="mpc")
    problem = _problem(X0, times)
    assert problem.horizon == 1.0
    assert problem.n_particles == 4


def test_settings_validation():
    with pytest.raises(ValueError):
        SolverSettings(dual_every=0)
    with pytest.raises(ValueError):
        SolverSettings(collocation_batch=0)
    with pytest.raises(ValueError):
        SolverSettings(lambda0=-1.0)


def test_zero_control_mse_ignores_particle_order():
    times = np.linspace(0.0, 1.0, 3)
    target = gaussian_target((0.0, 0.0), 0.3, DensityGrid.empty(BOX, 32))
    a = _problem(X0, times, target=target)
    b = _problem(X0[::-1].copy(), times, target=target)
    assert zero_control_mse(a) == pytest.approx(zero_control_mse(b), rel=1e-12)


def test_rollout_under_zero_and_uniform_potentials_is_stationary():
    problem = _problem(X0, np.linspace(0.0, 1.0, 6))
    for value in (0.0, 0.8):
        result = rollout(problem, uniform_potentials(problem.array, value), substeps=4)
        assert result.positions.shape == (6, 4, 2)
        assert np.allclose(result.positions, X0[None], rtol=0, atol=1e-12)
        assert not result.exited.any()


def test_rollout_matches_exponential_decay():
    problem = _problem(np.array([[1.0, 0.5]]), np.linspace(0.0, 1.0, 11), bounds=WIDE, h=0.5)
    result = rollout(problem, None, substeps=100, force_override=lambda x, t: -x)
    assert result.positions[-1, 0, 0] == pytest.approx(math.exp(-1.0), abs=1e-3)
    assert result.positions[-1, 0, 1] == pytest.approx(0.5 * math.exp(-1.0), abs=1e-3)


def test_rollout_is_second_order():
    problem = _problem(np.array([[1.0, 0.5]]), np.linspace(0.0, 1.0, 11), bounds=WIDE, h=0.5)
    coarse = rollout(problem, None, substeps=2, force_override=lambda x, t: -x).positions[-1, 0, 0]
    fine = rollout(problem, None, substeps=4, force_override=lambda x, t: -x).positions[-1, 0, 0]
    ratio = abs(coarse - math.exp(-1.0)) / abs(fine - math.exp(-1.0))
    assert 3.5 <= ratio <= 4.5, ratio


def test_rollout_threads_do_not_change_results():
    problem = _problem(X0, np.linspace(0.0, 1.0, 4))
    schedule = PotentialSchedule(problem.times, np.linspace(-1.0, 1.0, 36).reshape(4, 9))
    one = rollout(problem, schedule, substeps=3)
    three = rollout(problem, schedule, substeps=3, threads=3)
    assert np.allclose(one.positions, three.positions, rtol=0, atol=1e-14)


@pytest.mark.parametrize("threads", [2, 3, 8])
def test_deterministic_rollout_is_bitwise_independent_of_threads(threads):
    x0 = np.random.default_rng(3).uniform(-0.6, 0.6, size=(2 * solver.ROLLOUT_BLOCK + 5, 2))
    problem = _problem(x0, np.linspace(0.0, 1.0, 4))
    schedule = PotentialSchedule(problem.times, np.linspace(-1.0, 1.0, 36).reshape(4, 9))
    one = rollout(problem, schedule, substeps=3, deterministic=True)
    many = rollout(problem, schedule, substeps=3, threads=threads, deterministic=True)
    assert np.array_equal(one.positions, many.positions)
    assert np.array_equal(one.exited, many.exited)
    with pytest.raises(ValueError):
        rollout(problem, schedule, threads=0)


def test_rollout_flags_and_clamps_escaping_particles():
    problem = _problem(np.array([[0.5, 0.0], [0.0, 0.0]]), np.linspace(0.0, 1.0, 3), h=0.3)
    result = rollout(problem, None, substeps=10, force_override=lambda x, t: 10.0 * x)
    assert result.exited.tolist() == [True, False]
    assert result.positions[-1, 0, 0] == 1.5
    assert np.array_equal(result.positions[:, 1], np.zeros((3, 2)))
    with pytest.raises(ValueError):
        rollout(problem, None, substeps=0, force_override=lambda x, t: -x)


def test_collocation_fixed_point():
    """Zero potentials and target = initial KDE leave every variable in place"""
    problem = _problem(X0, np.linspace(0.0, 1.0, 4), mode="collocation")
    settings = _quiet(iterations=5, potential_init_scale=0.0, dual_every=2)
    report = solve(problem, settings)
    assert report.mode == "collocation"
    assert report.status == "ok"
    assert np.array_equal(report.trajectories, np.broadcast_to(X0, (4, 4, 2)))
    assert report.residual_sum == 0.0
    assert report.l2_final == pytest.approx(0.0, abs=1e-20)
    assert np.array_equal(report.control.values, np.zeros((4, 9)))
    assert report.wall_time_s is None
    assert all(lam >= 0 for _, _, _, lam in report.history)
    assert [h[0] for h in report.history] == list(range(5))


def test_collocation_is_deterministic():
    problem = _problem(X0, np.linspace(0.0, 1.0, 4), mode="collocation")
    settings = _quiet(iterations=8, potential_init_scale=0.2, collocation_batch=2, seed=3)
    first = solve_collocation(problem, settings).to_dict()
    second = solve_collocation(problem, settings).to_dict()
    assert first == second


def test_trapezoid_on_linear_test_field():
    """With F = -x the residual vanishes at x1 = x0 (1 - dt/2) / (1 + dt/2)"""
    x0 = np.array([[1.0, 0.5]])
    dt = 0.1
    ratio = (1 - dt / 2) / (1 + dt / 2)
    assert ratio == pytest.approx(0.904762, abs=1e-6)
    grid = DensityGrid.empty(WIDE, 32)
    bw = Bandwidth(0.5, 0.5)
    problem = _problem(x0, [0.0, dt], mode="collocation", target=kde_evaluate(x0 * ratio, bw, grid), bounds=WIDE, h=0.5)
    settings = _quiet(iterations=3000, adam=AdamConfig(lr=2e-3), potential_init_scale=0.0, lambda0=10.0)
    report = solve_collocation(problem, settings, force_override=lambda x, t: -x)
    assert np.allclose(report.trajectories[1], x0 * ratio, atol=1e-3)
    assert report.residual_sum < 1e-6


def test_continuous_fixed_point():
    """Target equal to the initial KDE with a near-zero map: nothing needs to move"""
    problem = _problem(X0, np.linspace(0.0, 1.0, 5))
    settings = _quiet(
        iterations=6, adam=AdamConfig(lr=1e-4), dual_every=3, eps_tol=1e-2, potential_init_scale=1e-3
    )
    report = solve_continuous(problem, settings)
    assert report.status == "ok"
    assert report.mse_initial < 1e-12
    assert report.trajectories.shape == (5, 4, 2)
    assert np.max(np.abs(report.positions - X0)) < 2e-2
    assert np.all((report.trajectories >= -1.0) & (report.trajectories <= 1.0))
    snapshot = potential_snapshot(problem, report.control.as_source(report.control_params), 0.5)
    assert snapshot.same_geometry(problem.target)
    assert np.max(np.abs(snapshot.values)) <= 0.02 * problem.array.v_max
    assert all(lam >= 0 for _, _, _, lam in report.history)
    assert list(report.history_frame().columns) == ["iteration", "l2", "residual", "lambda"]


def test_nan_loss_aborts_with_diagnostics():
    problem = _problem(X0, np.linspace(0.0, 1.0, 3), mode="collocation")
    with pytest.raises(SolveError) as info:
        solve_collocation(problem, _quiet(iterations=2), force_override=lambda x, t: x * np.inf)
    assert info.value.iteration == 0


@pytest.mark.slow
def test_both_modes_reach_comparable_density():
    grid = DensityGrid.empty(BOX, 32)
    target = gaussian_target((0.0, 0.0), 0.3, grid)
    x0 = np.array([[x, y] for x in (-0.5, 0.0, 0.5) for y in (-0.5, 0.0, 0.5)])
    times = np.linspace(0.0, 1.0, 20)
    settings = _quiet(iterations=1500, adam=AdamConfig(lr=5e-3), dual_every=50, eps_tol=1e-2, seed=2)
    problem = _problem(x0, times, target=target, h=0.3)
    baseline = zero_control_mse(problem)
    continuous = solve_continuous(problem, settings)
    collocation = solve_collocation(_problem(x0, times, mode="collocation", target=target, h=0.3), settings)
    assert continuous.mse_final <= 0.5 * baseline, (continuous.mse_final, baseline)
    assert collocation.mse_final <= 0.5 * baseline, (collocation.mse_final, baseline)
    assert continuous.mse_final <= 2.0 * collocation.mse_final
    assert collocation.mse_final <= 2.0 * continuous.mse_final


class _Captured(Exception):
    def __init__(self, theta, objective, batch_count):
        super().__init__("objective captured")
        self.theta = theta
        self.objective = objective
        self.batch_count = batch_count


def _capture(problem, settings, theta, objective, full_residual, batch_count, project=None):
    raise _Captured(theta, objective, batch_count)


def _loss_closure(monkeypatch, solve_fn, problem, settings) -> _Captured:
    """The objective and starting parameters the primal-dual loop would receive"""
    monkeypatch.setattr(solver, "_primal_dual", _capture)
    with pytest.raises(_Captured) as info:
        solve_fn(problem, settings)
    return info.value


def _random_instance(seed, mode):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    x0 = rng.uniform(-0.6, 0.6, size=(n, 2))
    target = gaussian_target(tuple(rng.uniform(-0.3, 0.3, 2)), 0.3, DensityGrid.empty(BOX, 16))
    times = np.linspace(0.0, 1.0, int(rng.integers(3, 6)))
    return rng, _problem(x0, times, mode=mode, target=target, cells=16)


def _directional_gap(f, theta, g, v, h=1e-6):
    fd = (float(value_of(f(theta + h * v))) - float(value_of(f(theta - h * v)))) / (2 * h)
    return abs(float(g @ v) - fd)


@pytest.mark.parametrize("seed", range(50))
def test_primal_loss_gradient_matches_finite_differences(monkeypatch, seed):
    for mode, solve_fn in (("continuous", solve_continuous), ("collocation", solve_collocation)):
        rng, problem = _random_instance(seed, mode)
        settings = _quiet(seed=seed, potential_init_scale=0.5, trajectory_hidden=4, potential_hidden=4)
        captured = _loss_closure(monkeypatch, solve_fn, problem, settings)
        idx = np.arange(captured.batch_count)
        lam = float(rng.uniform(0.5, 2.0))

        def loss(theta):
            l2, residual, penalty = captured.objective(theta, idx)
            return l2 + lam * residual + penalty

        def residual(theta):
            return captured.objective(theta, idx)[1]

        for f, tol in ((loss, 1e-5), (residual, 1e-4)):
            tape = Tape()
            w = tape.variable(captured.theta)
            g = tape.gradient(f(w), w)
            assert np.linalg.norm(g) > 0
            for _ in range(3):
                v = rng.normal(size=g.size)
                v /= np.linalg.norm(v)
                assert _directional_gap(f, captured.theta, g, v) <= tol * np.linalg.norm(g), (mode, seed)


@pytest.mark.parametrize("seed", range(50))
def test_density_and_force_gradients_match_finite_differences(seed):
    rng, problem = _random_instance(seed, "continuous")
    x = problem.x0.reshape(-1)

    def density_loss(p):
        diff = kde_values(p.reshape(-1, 2), problem.bandwidth, problem.target) - problem.target.values
        return (diff * diff).sum()

    fd = finite_difference_grad(density_loss, x)
    assert np.allclose(grad(density_loss, x), fd, rtol=1e-5, atol=1e-5 * np.max(np.abs(fd)))

    sources = (
        DiscretePotentials(rng.uniform(-1.0, 1.0, problem.array.count)),
        PotentialMap.create(4, BOX, 1.0, 1.0, seed=seed, init_scale=0.5).as_source(),
    )
    for source in sources:
        def energy(p):
            return potential_energy(p.reshape(-1, 2), source, 0.5, problem.array, problem.cap, problem.consts).sum()

        F = np.asarray(value_of(force(problem.x0, source, 0.5, problem.array, problem.cap, problem.consts)))
        fd = finite_difference_grad(energy, x)
        assert np.allclose(F.reshape(-1), fd, rtol=1e-5, atol=1e-5 * np.max(np.abs(fd)))


def test_reported_residual_covers_every_step():
    """Minibatched iterations, but the report sums the residual over all steps"""
    x0 = np.array([[1.0, 0.5], [-0.4, 0.2]])
    times = np.linspace(0.0, 0.5, 6)
    problem = _problem(x0, times, mode="collocation", bounds=WIDE, h=0.5)
    settings = _quiet(iterations=20, collocation_batch=2, potential_init_scale=0.0, seed=5)
    report = solve_collocation(problem, settings, force_override=lambda x, t: -x)
    X = report.trajectories
    dt = np.diff(times)[:, None, None]
    r = X[1:] - X[:-1] + 0.5 * dt * (X[1:] + X[:-1])
    assert report.residual_sum == pytest.approx(float(np.sum(r * r)), rel=1e-12)
    assert report.residual_mean == pytest.approx(report.residual_sum / (5 * 2), rel=1e-15)


def test_schedule_interpolates_linearly():
    schedule = PotentialSchedule(np.array([0.0, 1.0, 3.0]), np.array([[0.0, 2.0], [1.0, 0.0], [3.0, 4.0]]))
    assert np.allclose(schedule.at(0.5).values, [0.5, 1.0])
    assert np.allclose(schedule.at(2.0).values, [2.0, 2.0])
    assert np.allclose(schedule.at(3.0).values, [3.0, 4.0])
    assert np.allclose(schedule.at(7.0).values, [3.0, 4.0])


def test_electrode_snapshot_layout():
    problem = _problem(X0, np.linspace(0.0, 1.0, 3))
    values = np.arange(9, dtype=float)
    snapshot = potential_snapshot(problem, PotentialSchedule(problem.times, np.tile(values, (3, 1))), 0.4)
    assert (snapshot.nx1, snapshot.nx2) == (3, 3)
    assert snapshot.bounds == (-0.75, 0.75, -0.75, 0.75)
    assert np.allclose(snapshot.values, values.reshape(3, 3), rtol=1e-15, atol=1e-15)


def test_trajectory_frame_and_gap():
    positions = np.arange(12, dtype=float).reshape(2, 3, 2)
    frame = trajectory_frame(np.array([0.0, 1.0]), positions)
    assert list(frame.columns) == ["t", "particle_id", "x1", "x2"]
    assert frame["particle_id"].tolist() == [0, 1, 2, 0, 1, 2]
    assert frame["t"].tolist() == [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
    assert frame["x2"].tolist() == [1.0, 3.0, 5.0, 7.0, 9.0, 11.0]
    assert np.allclose(endpoint_gap([[0.0, 0.0], [1.0, 1.0]], [[3.0, 4.0], [1.0, 1.0]]), [5.0, 0.0])


if __name__ == "__main__":
    test_rollout_matches_exponential_decay()
    test_rollout_is_second_order()
    test_collocation_fixed_point()
    test_trapezoid_on_linear_test_field()
    print("✓ solver checks passed")
