"""
Density-shaping optimal control.

Two transcriptions share one primal-dual loop:

- continuous: trajectory networks X(t; theta) and a potential map V(y, t; beta);
  the dynamics residual uses dX/dt from forward mode and the force from the
  Gauss-Hermite energy of the map.
- collocation: raw positions x_k and per-electrode potentials V_k at every time
  sample, tied together by the trapezoidal rule.

Each primal step runs Adam on

    L = sum_cells (KDE(X_T) - f_d)^2 + lambda * R + box penalty

and every ``dual_every`` steps lambda takes a projected ascent step on the
full residual sum R.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

import field as fieldmod
from capmodel import CapacitanceModel
from diffengine import EvaluationError, Tape, Var, clip, stack, value_of
from field import ContinuousMap, DiscretePotentials, ElectrodeArray, FieldConstants
from kde import Bandwidth, DensityGrid, grid_mse, kde_evaluate, kde_values
from nnmap import PotentialMap, TrajectoryBundle, prefit
from optim import AdamConfig, DualState, adam_step, dual_step, initial_alpha, project_box

logger = logging.getLogger(__name__)

MODES = ("continuous", "collocation")
SAFETY_FACTOR = 1.5
MASS_TOLERANCE = 0.05
# Particles per rollout work unit in deterministic mode
ROLLOUT_BLOCK = 16


class SolveError(RuntimeError):
    """Non-finite loss; carries the iteration and the term values seen."""

    def __init__(self, message: str, iteration: int, terms: Dict[str, float]):
        super().__init__(message)
        self.iteration = iteration
        self.terms = terms


@dataclass(frozen=True, eq=False)
class ControlProblem:
    bounds: Tuple[float, float, float, float]
    times: np.ndarray
    array: ElectrodeArray
    cap: CapacitanceModel
    consts: FieldConstants
    x0: np.ndarray
    target: DensityGrid
    bandwidth: Bandwidth
    mode: str = "continuous"

    def __post_init__(self):
        x1_min, x1_max, x2_min, x2_max = self.bounds
        if not (x1_min < x1_max and x2_min < x2_max):
            raise ValueError(f"domain bounds must be ordered, got {self.bounds}")
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("need at least two time samples")
        if times[0] != 0.0:
            raise ValueError(f"time samples must start at 0, got {times[0]}")
        if np.any(np.diff(times) <= 0):
            raise ValueError("time samples must be strictly increasing")
        x0 = np.asarray(self.x0, dtype=float)
        if x0.ndim != 2 or x0.shape[1] != 2 or x0.shape[0] < 1:
            raise ValueError(f"initial positions must be (n, 2), got {x0.shape}")
        inside = (x0[:, 0] >= x1_min) & (x0[:, 0] <= x1_max) & (x0[:, 1] >= x2_min) & (x0[:, 1] <= x2_max)
        if not inside.all():
            raise ValueError(f"initial position {int(np.flatnonzero(~inside)[0])} lies outside the domain")
        mass = self.target.mass()
        if abs(mass - 1.0) > MASS_TOLERANCE:
            raise ValueError(f"target density integrates to {mass:.4f} on its grid, expected about 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n_particles(self) -> int:
        return self.x0.shape[0]

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.bounds[0], self.bounds[2]])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.bounds[1], self.bounds[3]])


@dataclass(frozen=True)
class SolverSettings:
    iterations: int = 2000
    adam: AdamConfig = field(default_factory=AdamConfig)
    dual_every: int = 50
    lambda0: float = 1.0
    alpha: Optional[float] = None
    eps_tol: float = 1e-4
    collocation_batch: Optional[int] = None
    box_penalty: float = 10.0
    residual_grid_multiplier: bool = False
    trajectory_hidden: int = 32
    potential_hidden: int = 32
    potential_init_scale: float = 0.1
    seed: int = 0
    deterministic: bool = False
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError(f"iterations must be nonnegative, got {self.iterations}")
        if self.dual_every < 1:
            raise ValueError(f"dual_every must be positive, got {self.dual_every}")
        if self.lambda0 < 0:
            raise ValueError(f"lambda0 must be nonnegative, got {self.lambda0}")
        if self.collocation_batch is not None and self.collocation_batch < 1:
            raise ValueError(f"collocation_batch must be positive, got {self.collocation_batch}")


@dataclass(frozen=True, eq=False)
class PotentialSchedule:
    """Per-electrode potentials at the time samples, linear in between."""

    times: np.ndarray
    values: np.ndarray

    def at(self, t: float) -> DiscretePotentials:
        t = float(np.clip(t, self.times[0], self.times[-1]))
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2))
        span = self.times[k + 1] - self.times[k]
        w = (t - self.times[k]) / span
        return DiscretePotentials((1.0 - w) * self.values[k] + w * self.values[k + 1])


@dataclass(frozen=True, eq=False)
class SolveReport:
    mode: str
    status: str
    iterations: int
    positions: np.ndarray
    kde: DensityGrid
    history: List[Tuple[int, float, float, float]]
    mse_initial: float
    mse_final: float
    l2_final: float
    residual_sum: float
    residual_mean: float
    lambda_final: float
    wall_time_s: Optional[float]
    trajectories: np.ndarray
    times: np.ndarray
    control: Union[PotentialMap, PotentialSchedule, None] = None
    control_params: Optional[np.ndarray] = None
    bundle: Optional[TrajectoryBundle] = None

    @property
    def mse_reduction(self) -> float:
        if self.mse_initial == 0:
            return 0.0
        return 1.0 - self.mse_final / self.mse_initial

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["iteration", "l2", "residual", "lambda"])

    def to_dict(self) -> Dict:
        return {
            "mode": self.mode,
            "status": self.status,
            "iterations": self.iterations,
            "mse_initial": self.mse_initial,
            "mse_final": self.mse_final,
            "mse_reduction": self.mse_reduction,
            "l2_final": self.l2_final,
            "residual_sum": self.residual_sum,
            "residual_mean": self.residual_mean,
            "lambda_final": self.lambda_final,
            "wall_time_s": self.wall_time_s,
            "final_positions": self.positions.tolist(),
            "history": {
                "iteration": [h[0] for h in self.history],
                "l2": [h[1] for h in self.history],
                "residual": [h[2] for h in self.history],
                "lambda": [h[3] for h in self.history],
            },
        }


def _full_shape(t, shape):
    if value_of(t).shape == tuple(shape):
        return t
    return t + np.zeros(shape)


def _batch(rng: np.random.Generator, count: int, size: Optional[int]) -> np.ndarray:
    if size is None or size >= count:
        return np.arange(count)
    return np.sort(rng.choice(count, size=size, replace=False))


def _l2(points, problem: ControlProblem):
    diff = kde_values(points, problem.bandwidth, problem.target) - problem.target.values
    return (diff * diff).sum()


def _residual_weight(problem: ControlProblem, settings: SolverSettings) -> float:
    return float(problem.target.nx1 * problem.target.nx2) if settings.residual_grid_multiplier else 1.0


def _primal_dual(
    problem: ControlProblem,
    settings: SolverSettings,
    theta: np.ndarray,
    objective: Callable,
    full_residual: Callable[[np.ndarray], float],
    batch_count: int,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
):
    """Shared Adam + projected-dual loop. Returns (theta, dual state, history)."""
    adam = settings.adam.state(theta.size)
    r0 = full_residual(theta)
    alpha = settings.alpha if settings.alpha is not None else initial_alpha(r0)
    dual = DualState(settings.lambda0, alpha, settings.eps_tol)
    rng = np.random.default_rng(settings.seed)
    weight = _residual_weight(problem, settings)
    history: List[Tuple[int, float, float, float]] = []

    for it in range(settings.iterations):
        batch = _batch(rng, batch_count, settings.collocation_batch)
        tape = Tape()
        w = tape.variable(theta)
        try:
            l2, residual, penalty = objective(w, batch)
            loss = l2 + (dual.lam * weight * batch_count / len(batch)) * residual + penalty
        except EvaluationError as exc:
            raise SolveError(f"NaN during iteration {it}: {exc}", it, {"lambda": dual.lam}) from exc
        terms = {
            "l2": float(value_of(l2)),
            "residual": float(value_of(residual)) * batch_count / len(batch),
            "penalty": float(value_of(penalty)),
            "lambda": dual.lam,
        }
        if not math.isfinite(float(value_of(loss))):
            raise SolveError(f"non-finite loss at iteration {it}: {terms}", it, terms)
        grads = tape.gradient(loss, w) if isinstance(loss, Var) else np.zeros_like(theta)
        adam, theta = adam_step(adam, theta, grads)
        if project is not None:
            theta = project(theta)
        history.append((it, terms["l2"], terms["residual"], dual.lam))
        if (it + 1) % settings.dual_every == 0:
            dual = dual_step(dual, full_residual(theta))
        if settings.log_every and (it + 1) % settings.log_every == 0:
            logger.info(
                "iter %d: l2=%.4e residual=%.4e lambda=%.4e", it + 1, terms["l2"], terms["residual"], dual.lam
            )
    return theta, dual, history


def _finish(
    problem: ControlProblem,
    settings: SolverSettings,
    trajectories: np.ndarray,
    dual: DualState,
    history,
    residual_sum: float,
    points: int,
    mse_initial: float,
    started: float,
    **extra,
) -> SolveReport:
    final = trajectories[-1]
    grid = kde_evaluate(final, problem.bandwidth, problem.target)
    mse_final = grid_mse(grid, problem.target)
    residual_mean = residual_sum / points
    status = "ok" if residual_mean <= settings.eps_tol else "residual_warning"
    if status != "ok":
        logger.warning(
            "mean dynamics residual %.3e per point exceeds tolerance %.3e", residual_mean, settings.eps_tol
        )
    return SolveReport(
        mode=problem.mode,
        status=status,
        iterations=settings.iterations,
        positions=final,
        kde=grid,
        history=history,
        mse_initial=mse_initial,
        mse_final=mse_final,
        l2_final=float(np.sum((grid.values - problem.target.values) ** 2)),
        residual_sum=residual_sum,
        residual_mean=residual_mean,
        lambda_final=dual.lam,
        wall_time_s=None if settings.deterministic else time.perf_counter() - started,
        trajectories=trajectories,
        times=problem.times,
        **extra,
    )


def build_networks(problem: ControlProblem, settings: SolverSettings) -> Tuple[TrajectoryBundle, PotentialMap]:
    """Trajectory bundle pre-fitted to the initial positions and a near-zero potential map."""
    bundle = TrajectoryBundle.create(
        problem.n_particles, settings.trajectory_hidden, problem.bounds, problem.horizon, seed=settings.seed
    )
    bundle = prefit(bundle, problem.x0)
    potential = PotentialMap.create(
        settings.potential_hidden,
        problem.bounds,
        problem.horizon,
        problem.array.v_max,
        seed=settings.seed + 2,
        init_scale=settings.potential_init_scale,
    )
    return bundle, potential


def solve_continuous(
    problem: ControlProblem,
    settings: SolverSettings,
    bundle: Optional[TrajectoryBundle] = None,
    potential: Optional[PotentialMap] = None,
) -> SolveReport:
    """Learn trajectory networks and a potential map by the primal-dual scheme."""
    started = time.perf_counter()
    if bundle is None or potential is None:
        built = build_networks(problem, settings)
        bundle = bundle or built[0]
        potential = potential or built[1]
    times = problem.times
    K = times.size
    k = bundle.size
    lo, hi = problem.lower, problem.upper
    consts = problem.consts

    def residual_terms(wt, wp, idx):
        t = times[idx]
        raw = bundle.positions(t, wt, project=False)
        X = clip(raw, lo, hi)
        vel = bundle.velocities(t, wt)
        F = fieldmod.force(X, potential.as_source(wp), t[:, None], problem.array, problem.cap, consts)
        r = vel - F / consts.mu
        return raw, X, (r * r).sum()

    def objective(w, idx):
        wt, wp = w[:k], w[k:]
        raw, _, residual = residual_terms(wt, wp, idx)
        raw_T = bundle.positions(times[-1:], wt, project=False)[0]
        X_T = clip(raw_T, lo, hi)
        out_b = raw - clip(raw, lo, hi)
        out_T = raw_T - X_T
        penalty = settings.box_penalty * ((out_b * out_b).sum() + (out_T * out_T).sum())
        return _l2(X_T, problem), residual, penalty

    def full_residual(theta):
        return float(value_of(residual_terms(theta[:k], theta[k:], np.arange(K))[2]))

    theta0 = np.concatenate([bundle.params, potential.net.params])
    X0 = value_of(clip(bundle.positions(times[-1:], theta0[:k], project=False)[0], lo, hi))
    mse_initial = grid_mse(kde_evaluate(X0, problem.bandwidth, problem.target), problem.target)
    logger.info(
        "continuous solve: %d particles, %d time samples, %d parameters", problem.n_particles, K, theta0.size
    )

    theta, dual, history = _primal_dual(problem, settings, theta0, objective, full_residual, K)

    trained = bundle.with_params(theta[:k])
    trajectories = np.asarray(value_of(clip(trained.positions(times, project=False), lo, hi)))
    return _finish(
        problem,
        settings,
        trajectories,
        dual,
        history,
        full_residual(theta),
        K * problem.n_particles,
        mse_initial,
        started,
        control=potential,
        control_params=theta[k:].copy(),
        bundle=trained,
    )


def solve_collocation(
    problem: ControlProblem,
    settings: SolverSettings,
    force_override: Optional[Callable] = None,
) -> SolveReport:
    """Trapezoidal collocation with raw positions and per-step electrode potentials.

    ``force_override(x, t)`` replaces the electrostatic force when given.
    """
    started = time.perf_counter()
    times = problem.times
    K = times.size
    n = problem.n_particles
    E = problem.array.count
    v_max = problem.array.v_max
    consts = problem.consts
    nX = (K - 1) * n * 2
    dt = np.diff(times)[:, None, None]

    def forces(X, V):
        if force_override is not None:
            return force_override(X, times[:, None, None])
        source = DiscretePotentials(V[:, None, :])
        return fieldmod.force(X, source, times[:, None], problem.array, problem.cap, consts)

    def unpack(w):
        free = w[:nX].reshape(K - 1, n, 2)
        V = w[nX:].reshape(K, E)
        X = stack([problem.x0] + [free[i] for i in range(K - 1)], axis=0)
        return X, V

    def trapezoid(w):
        X, V = unpack(w)
        vel = forces(X, V) / consts.mu
        vel = _full_shape(vel, (K, n, 2))
        r = X[1:] - X[:-1] - (0.5 * dt) * (vel[1:] + vel[:-1])
        return X, r

    def objective(w, idx):
        X, r = trapezoid(w)
        rb = r[idx]
        return _l2(X[K - 1], problem), (rb * rb).sum(), 0.0

    def full_residual(theta):
        r = value_of(trapezoid(theta)[1])
        return float(np.sum(r * r))

    lower = np.concatenate([np.tile(problem.lower, (K - 1) * n), np.full(K * E, -v_max)])
    upper = np.concatenate([np.tile(problem.upper, (K - 1) * n), np.full(K * E, v_max)])

    rng = np.random.default_rng(settings.seed)
    V0 = settings.potential_init_scale * v_max * rng.uniform(-1.0, 1.0, K * E)
    theta0 = np.concatenate([np.tile(problem.x0.reshape(-1), K - 1), V0])
    mse_initial = zero_control_mse(problem)
    logger.info("collocation solve: %d particles, %d time samples, %d electrodes", n, K, E)

    theta, dual, history = _primal_dual(
        problem,
        settings,
        theta0,
        objective,
        full_residual,
        K - 1,
        project=lambda th: project_box(th, lower, upper),
    )

    X, _ = unpack(theta)
    return _finish(
        problem,
        settings,
        np.asarray(value_of(X)),
        dual,
        history,
        full_residual(theta),
        (K - 1) * n,
        mse_initial,
        started,
        control=PotentialSchedule(times, theta[nX:].reshape(K, E).copy()),
    )


def solve(problem: ControlProblem, settings: SolverSettings) -> SolveReport:
    if problem.mode == "collocation":
        return solve_collocation(problem, settings)
    return solve_continuous(problem, settings)


@dataclass(frozen=True, eq=False)
class RolloutResult:
    times: np.ndarray
    positions: np.ndarray
    exited: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return trajectory_frame(self.times, self.positions)


def trajectory_frame(times: np.ndarray, positions: np.ndarray) -> pd.DataFrame:
    """Long table ``t, particle_id, x1, x2`` with time outer."""
    K, n, _ = positions.shape
    return pd.DataFrame(
        {
            "t": np.repeat(times, n),
            "particle_id": np.tile(np.arange(n), K),
            "x1": positions[:, :, 0].reshape(-1),
            "x2": positions[:, :, 1].reshape(-1),
        }
    )


def _source_at(source, t: float):
    if isinstance(source, PotentialSchedule):
        return source.at(t)
    return source


def _integrate_chunk(problem, source, x, substeps, force_override):
    consts = problem.consts
    center = 0.5 * (problem.lower + problem.upper)
    half = SAFETY_FACTOR * 0.5 * (problem.upper - problem.lower)
    lo, hi = center - half, center + half
    exited = np.zeros(x.shape[0], dtype=bool)

    def vel(x, t):
        if force_override is not None:
            return np.asarray(force_override(x, t), dtype=float) / consts.mu
        return fieldmod.velocity(x, _source_at(source, t), t, problem.array, problem.cap, consts)

    out = [x.copy()]
    for k in range(problem.times.size - 1):
        t0 = problem.times[k]
        h = (problem.times[k + 1] - t0) / substeps
        for s in range(substeps):
            t = t0 + s * h
            f1 = vel(x, t)
            f2 = vel(x + h * f1, t + h)
            x = x + 0.5 * h * (f1 + f2)
            outside = np.any((x < lo) | (x > hi), axis=1)
            if outside.any():
                exited |= outside
                x = np.clip(x, lo, hi)
        out.append(x.copy())
    return np.stack(out), exited


def rollout(
    problem: ControlProblem,
    source,
    x0: Optional[np.ndarray] = None,
    substeps: int = 10,
    force_override: Optional[Callable] = None,
    threads: int = 1,
    deterministic: bool = False,
) -> RolloutResult:
    """Heun integration of mu dx/dt = F(x, t) for every particle, sampled at the problem's times.

    Particles leaving the enlarged safety box are flagged and clamped. With ``deterministic`` the
    particles are cut into fixed blocks of ``ROLLOUT_BLOCK``, so the result does not depend on
    ``threads``.
    """
    if substeps < 1:
        raise ValueError(f"substeps must be positive, got {substeps}")
    if threads < 1:
        raise ValueError(f"threads must be positive, got {threads}")
    x0 = problem.x0 if x0 is None else np.asarray(x0, dtype=float)
    n = x0.shape[0]
    if deterministic:
        chunks = [np.arange(start, min(start + ROLLOUT_BLOCK, n)) for start in range(0, n, ROLLOUT_BLOCK)]
    else:
        chunks = np.array_split(np.arange(n), max(1, min(threads, n)))
    if len(chunks) == 1:
        results = [_integrate_chunk(problem, source, x0, substeps, force_override)]
    else:
        with ThreadPoolExecutor(max_workers=min(threads, len(chunks))) as pool:
            results = list(
                pool.map(lambda idx: _integrate_chunk(problem, source, x0[idx], substeps, force_override), chunks)
            )
    positions = np.concatenate([r[0] for r in results], axis=1)
    exited = np.concatenate([r[1] for r in results])
    if exited.any():
        logger.warning("%d particle(s) left the safety box during rollout", int(exited.sum()))
    return RolloutResult(problem.times, positions, exited)


def zero_control_mse(problem: ControlProblem) -> float:
    """Grid MSE when no potentials are applied (particles stay at x0)."""
    return grid_mse(kde_evaluate(problem.x0, problem.bandwidth, problem.target), problem.target)


def potential_snapshot(problem: ControlProblem, source, t: float) -> DensityGrid:
    """Potential at time ``t``: the map on the loss grid, or electrode values on the electrode lattice."""
    if isinstance(source, ContinuousMap):
        mesh = problem.target.mesh()
        values = np.asarray(value_of(source.evaluate(mesh[:, 0], mesh[:, 1], float(t))), dtype=float)
        return problem.target.like(np.broadcast_to(values, mesh.shape[:1]))
    discrete = _source_at(source, t)
    values = np.broadcast_to(np.asarray(discrete.values, dtype=float), (problem.array.count,))
    if problem.array.shape is None:
        raise ValueError("electrode snapshots need a rectangular electrode array")
    nx, ny = problem.array.shape
    pos = problem.array.positions
    half = 0.5 * problem.array.pitch
    bounds = (pos[:, 0].min() - half, pos[:, 0].max() + half, pos[:, 1].min() - half, pos[:, 1].max() + half)
    return DensityGrid(*bounds, nx, ny, values.reshape(nx, ny))


def endpoint_gap(rolled: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """Per-particle distance between rollout endpoints and predicted endpoints."""
    return np.linalg.norm(np.asarray(rolled) - np.asarray(predicted), axis=-1)


def uniform_potentials(array: ElectrodeArray, value: float = 0.0) -> DiscretePotentials:
    return DiscretePotentials(np.full(array.count, float(value)))
