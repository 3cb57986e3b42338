"""
Error-function capacitance model between a particle and one electrode.

    C(xi) = sum_i a_i [erf((xi + delta) / c_i) - erf((xi - delta) / c_i)]

The model has a probabilistic reading. For a single term, C(xi) equals
2a times the mass that N(xi, sigma^2) places on the electrode window
[-delta, delta], where sigma = c / sqrt(2).
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import special, stats

from diffengine import Dual, value_of

logger = logging.getLogger(__name__)

SAMPLES_HEADER = ("xi", "capacitance")
# Costs below this fraction of sum(target^2) are at roundoff level
_COST_FLOOR = 1e-24


@lru_cache(maxsize=None)
def _note(message: str) -> None:
    logger.info(message)


class FitError(RuntimeError):
    """Gauss-Newton did not converge; carries the best iterate found."""

    def __init__(self, message: str, model: "CapacitanceModel", rms: float):
        super().__init__(message)
        self.model = model
        self.rms = rms


class SampleFormatError(ValueError):
    """Malformed capacitance sample CSV; ``line`` is 1-based."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class CapacitanceModel:
    """Error-function mixture: ``terms`` are (a_i, c_i) pairs, ``delta`` is half the pitch."""

    terms: Tuple[Tuple[float, float], ...]
    delta: float

    def __post_init__(self):
        if not self.terms:
            raise ValueError("capacitance model needs at least one term")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        for a, c in self.terms:
            if not c > 0:
                raise ValueError(f"length scale c must be positive, got {c}")

    @classmethod
    def single(cls, a: float, c: float, delta: float) -> "CapacitanceModel":
        return cls(((float(a), float(c)),), float(delta))

    @property
    def sigma(self) -> float:
        """Gaussian width c / sqrt(2); amplitude-weighted RMS width for mixtures."""
        if len(self.terms) == 1:
            return self.terms[0][1] / math.sqrt(2.0)
        a = np.array([abs(t[0]) for t in self.terms])
        c = np.array([t[1] for t in self.terms])
        if a.sum() == 0:
            return float(c.mean()) / math.sqrt(2.0)
        return float(math.sqrt(np.dot(a, c * c) / a.sum()) / math.sqrt(2.0))

    @property
    def scale(self) -> float:
        """The a multiplier of the energy formula (sum of term amplitudes)."""
        return float(sum(t[0] for t in self.terms))

    def to_dict(self) -> Dict:
        return {"terms": [{"a": a, "c": c} for a, c in self.terms], "delta": self.delta}

    @classmethod
    def from_dict(cls, data: Dict) -> "CapacitanceModel":
        try:
            terms = tuple((float(t["a"]), float(t["c"])) for t in data["terms"])
            return cls(terms, float(data["delta"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed capacitance model document: {exc}") from exc


@dataclass(frozen=True)
class CapacitanceSamples:
    positions: Tuple[float, ...]
    values: Tuple[float, ...]
    metadata: Dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.positions) != len(self.values):
            raise ValueError(f"{len(self.positions)} positions but {len(self.values)} values")
        if np.any(np.diff(np.asarray(self.positions, dtype=float)) <= 0):
            raise ValueError("sample positions must be strictly increasing")

    def as_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.positions, dtype=float), np.asarray(self.values, dtype=float)


def _term(a, c, xi, delta):
    return a * (special.erf((xi + delta) / c) - special.erf((xi - delta) / c))


def eval_1d(model: CapacitanceModel, xi):
    """C(xi) for arrays, traced values or duals."""
    total = None
    for a, c in model.terms:
        term = _term(a, c, xi, model.delta)
        total = term if total is None else total + term
    return total


def radial_distance(d1, d2, delta: float):
    """sqrt(d1^2 + d2^2), smoothed by (1e-12 delta)^2 so the gradient at zero is finite."""
    eps = 1e-12 * delta
    return np.sqrt(d1 * d1 + d2 * d2 + eps * eps)


def eval_2d(model: CapacitanceModel, x, y_electrode):
    """C(||x - y||) for broadcast-compatible (..., 2) positions."""
    x_arr = x if isinstance(x, Dual) else np.asarray(x, dtype=float)
    y = np.asarray(y_electrode, dtype=float)
    d1 = x_arr[..., 0] - y[..., 0]
    d2 = x_arr[..., 1] - y[..., 1]
    return eval_1d(model, radial_distance(d1, d2, model.delta))


def discretized_gaussian(model: CapacitanceModel, xi) -> np.ndarray:
    """2a times the N(xi, sigma^2) mass on [-delta, delta], term by term (sigma = c / sqrt 2)."""
    _note(
        "discretized-Gaussian window uses limits of +/- delta (half pitch); the "
        "+/- delta/2 variant is not used so that sigma = c/sqrt(2) stays consistent"
    )
    xi = np.asarray(xi, dtype=float)
    total = np.zeros_like(xi)
    for a, c in model.terms:
        sigma = c / math.sqrt(2.0)
        mass = stats.norm.cdf(model.delta, loc=xi, scale=sigma) - stats.norm.cdf(-model.delta, loc=xi, scale=sigma)
        total = total + 2.0 * a * mass
    return total


def synth_samples(
    a: float,
    c: float,
    delta: float,
    grid: Sequence[float],
    noise_rel: float = 0.0,
    seed: int = 0,
) -> CapacitanceSamples:
    """Synthetic capacitance samples from a single-term model, with optional relative noise."""
    if not c > 0 or not delta > 0:
        raise ValueError(f"c and delta must be positive, got c={c}, delta={delta}")
    xi = np.asarray(grid, dtype=float)
    values = np.asarray(eval_1d(CapacitanceModel.single(a, c, delta), xi), dtype=float)
    if noise_rel:
        rng = np.random.default_rng(seed)
        values = values * (1.0 + noise_rel * rng.standard_normal(values.shape))
    metadata = {"a": a, "c": c, "delta": delta, "noise_rel": noise_rel, "seed": seed}
    return CapacitanceSamples(tuple(xi.tolist()), tuple(values.tolist()), metadata)


def _unpack(p: np.ndarray, m: int, delta: float) -> CapacitanceModel:
    return CapacitanceModel(tuple((float(p[i]), float(math.exp(p[m + i]))) for i in range(m)), delta)


def _residual_and_jacobian(p: np.ndarray, m: int, delta: float, xi: np.ndarray, target: np.ndarray):
    """Residual C(xi; p) - target and its Jacobian in (a_i, log c_i), by forward mode."""
    basis = np.eye(p.size)
    P = Dual(p, list(basis))
    total = None
    for i in range(m):
        term = P[i] * (special.erf((xi + delta) / np.exp(P[m + i])) - special.erf((xi - delta) / np.exp(P[m + i])))
        total = term if total is None else total + term
    r = value_of(total) - target
    J = np.stack([np.broadcast_to(value_of(t), xi.shape) for t in total.tangents], axis=1)
    return r, J


def _gauss_newton(
    p: np.ndarray,
    m: int,
    delta: float,
    xi: np.ndarray,
    target: np.ndarray,
    max_iter: int,
    ftol: float,
    xtol: float,
) -> Tuple[np.ndarray, float, bool]:
    """Levenberg-damped Gauss-Newton. Returns (params, cost, converged)."""
    damping = 1e-3
    floor = _COST_FLOOR * float(target @ target)
    r, J = _residual_and_jacobian(p, m, delta, xi, target)
    cost = float(r @ r)
    if cost == 0.0:
        return p, cost, True
    for _ in range(max_iter):
        JtJ = J.T @ J
        g = J.T @ r
        A = JtJ + damping * np.diag(np.maximum(np.diag(JtJ), 1e-300))
        try:
            step = -np.linalg.solve(A, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(A, g, rcond=None)[0]
        trial = p + step
        r_new, J_new = _residual_and_jacobian(trial, m, delta, xi, target)
        cost_new = float(r_new @ r_new)
        if np.isfinite(cost_new) and cost_new <= cost:
            reduction = cost - cost_new
            p, r, J = trial, r_new, J_new
            damping = max(damping / 3.0, 1e-12)
            if cost_new <= floor or reduction <= ftol * cost or np.linalg.norm(step) <= xtol * (np.linalg.norm(p) + xtol):
                return p, cost_new, True
            cost = cost_new
        else:
            damping *= 4.0
            if damping > 1e12:
                stalled = cost <= floor or np.linalg.norm(g) <= 1e-8 * np.linalg.norm(J) * math.sqrt(cost)
                return p, cost, bool(stalled)
    return p, cost, False


def fit(
    samples: CapacitanceSamples,
    m: int = 1,
    delta: Optional[float] = None,
    max_iter: int = 200,
    max_restarts: int = 3,
    ftol: float = 1e-12,
    xtol: float = 1e-12,
) -> Tuple[CapacitanceModel, float]:
    """Least-squares fit of an m-term model to samples.

    Args:
        samples: capacitance samples
        m: number of error-function terms
        delta: half electrode pitch (taken from sample metadata when omitted)
        max_iter: Gauss-Newton iterations per attempt
        max_restarts: re-initialisations with a rescaled length scale

    Returns:
        (model, rms residual)

    Raises:
        ValueError: on bad arguments
        FitError: when no attempt converges
    """
    if isinstance(m, bool) or not isinstance(m, int) or m < 1:
        raise ValueError(f"term count m must be a positive integer, got {m!r}")
    if delta is None:
        delta = samples.metadata.get("delta")
    if delta is None or not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    xi, values = samples.as_arrays()
    if xi.size < 2 * m + 1:
        raise ValueError(f"need at least {2 * m + 1} samples for {m} term(s), got {xi.size}")

    a0 = float(np.max(values)) / 2.0
    best: Optional[Tuple[np.ndarray, float]] = None
    for attempt in range(1, max_restarts + 2):
        c_scale = 1.0 if attempt == 1 else 1.5 * (attempt - 1)
        p0 = np.concatenate(
            [np.full(m, a0 / m), np.log(delta * c_scale * 2.0 ** np.arange(m, dtype=float))]
        )
        p, cost, converged = _gauss_newton(p0, m, delta, xi, values, max_iter, ftol, xtol)
        if best is None or cost < best[1]:
            best = (p, cost)
        if converged:
            rms = math.sqrt(cost / xi.size)
            logger.info("capacitance fit converged on attempt %d, rms=%.3e", attempt, rms)
            return _unpack(p, m, delta), rms
        logger.info("capacitance fit attempt %d did not converge (cost=%.3e)", attempt, cost)

    p, cost = best
    rms = math.sqrt(cost / xi.size)
    raise FitError(
        f"capacitance fit did not converge after {max_restarts + 1} attempts (rms={rms:.3e})",
        _unpack(p, m, delta),
        rms,
    )


def save_samples_csv(samples: CapacitanceSamples, path) -> None:
    xi, values = samples.as_arrays()
    pd.DataFrame({SAMPLES_HEADER[0]: xi, SAMPLES_HEADER[1]: values}).to_csv(path, index=False)


def _decimal(cell) -> float:
    if not isinstance(cell, str):
        return math.nan
    try:
        return float(cell.strip())
    except ValueError:
        return math.nan


def load_samples_csv(path) -> CapacitanceSamples:
    """Read ``xi,capacitance`` rows; errors name the offending 1-based line."""
    try:
        df = pd.read_csv(path, dtype=str, skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        raise SampleFormatError("file is empty", 1)
    except pd.errors.ParserError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise SampleFormatError(str(exc), int(m.group(1)) if m else 1)
    if tuple(c.strip() for c in df.columns) != SAMPLES_HEADER:
        raise SampleFormatError(f"expected header {','.join(SAMPLES_HEADER)}, got {','.join(df.columns)}", 1)
    if df.empty:
        raise SampleFormatError("no sample rows", 2)
    numeric = df.map(_decimal)
    bad = numeric.isna().any(axis=1) | ~np.isfinite(numeric.to_numpy(dtype=float)).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise SampleFormatError(f"not a finite decimal pair: {','.join(str(v) for v in df.iloc[row])}", row + 2)
    xi = numeric[SAMPLES_HEADER[0]].to_numpy(dtype=float)
    values = numeric[SAMPLES_HEADER[1]].to_numpy(dtype=float)
    steps = np.diff(xi)
    if np.any(steps <= 0):
        row = int(np.flatnonzero(steps <= 0)[0]) + 1
        raise SampleFormatError("positions must be strictly increasing", row + 2)
    return CapacitanceSamples(tuple(xi.tolist()), tuple(values.tolist()), {"source": str(path)})


def save_model(model: CapacitanceModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2), encoding="utf-8")


def load_model(path) -> CapacitanceModel:
    return CapacitanceModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
