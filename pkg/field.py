"""
Electrode array, particle potential, potential energy and the DEP force.

Three energy forms are available:

- ``discrete``:   U = 1/2 sum_k C_k(x) (V_k - v(x))^2, v = sum C V / sum C
- ``normalized``: U = a sum_k p_k(x) (V_k - v(x))^2, p = C / sum C
- ``gh``:         U = a E[(V(Y) - E[V(Y)])^2], Y ~ N(x, sigma^2 I), by a
                  tensor-product Gauss-Hermite rule on a continuous map

The force is F = grad_x U (sign kept as in the source model) and the
particle velocity is F / mu. Gradients come from forward-mode duals, so every
form works with traced positions and traced potentials.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple, Union

import numpy as np

from capmodel import CapacitanceModel, eval_1d, radial_distance
from diffengine import Dual, Var, stack, value_of
from quadrature import GHRule, gauss_hermite, tensor_offsets

logger = logging.getLogger(__name__)

DEFAULT_GH_ORDER = 30
ENERGY_FORMS = ("gh", "discrete", "normalized")


@dataclass(frozen=True, eq=False)
class ElectrodeArray:
    """Electrode centres (E, 2), their pitch and the potential bound."""

    positions: np.ndarray
    pitch: float
    v_max: float
    shape: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        positions = np.asarray(self.positions, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != 2 or positions.shape[0] < 1:
            raise ValueError(f"electrode positions must be (E, 2), got {positions.shape}")
        if len(np.unique(positions, axis=0)) != len(positions):
            raise ValueError("electrode positions must be distinct")
        if not self.pitch > 0:
            raise ValueError(f"pitch must be positive, got {self.pitch}")
        if not self.v_max > 0:
            raise ValueError(f"v_max must be positive, got {self.v_max}")
        object.__setattr__(self, "positions", positions)

    @classmethod
    def grid(
        cls,
        nx: int,
        ny: int,
        pitch: float,
        v_max: float,
        center: Tuple[float, float] = (0.0, 0.0),
    ) -> "ElectrodeArray":
        """nx x ny electrodes on a square lattice centred at ``center``; x1 index outer."""
        if nx < 1 or ny < 1:
            raise ValueError(f"electrode grid needs at least one electrode per axis, got {nx} x {ny}")
        p1 = center[0] + (np.arange(nx) - (nx - 1) / 2.0) * pitch
        p2 = center[1] + (np.arange(ny) - (ny - 1) / 2.0) * pitch
        g1, g2 = np.meshgrid(p1, p2, indexing="ij")
        positions = np.stack([g1.reshape(-1), g2.reshape(-1)], axis=1)
        return cls(positions, float(pitch), float(v_max), (int(nx), int(ny)))

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def check_potentials(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.count:
            raise ValueError(f"expected {self.count} electrode potentials, got trailing size {values.shape[-1]}")
        worst = float(np.max(np.abs(values))) if values.size else 0.0
        if worst > self.v_max * (1.0 + 1e-12):
            raise ValueError(f"electrode potential {worst} exceeds v_max={self.v_max}")
        return values


@dataclass(frozen=True, eq=False)
class DiscretePotentials:
    """Per-electrode potentials; ``values`` broadcasts against (..., E)."""

    values: object


@dataclass(frozen=True, eq=False)
class ContinuousMap:
    """Potential map V(y1, y2, t) evaluated elementwise on broadcast arguments."""

    evaluate: Callable


PotentialSource = Union[DiscretePotentials, ContinuousMap]


@dataclass(frozen=True)
class FieldConstants:
    sigma: float
    mu: float = 1.0
    energy_scale: float = 1.0
    gh_order: int = DEFAULT_GH_ORDER
    energy_form: str = "gh"

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.gh_order < 2:
            raise ValueError(f"gh_order must be at least 2, got {self.gh_order}")
        if self.energy_form not in ENERGY_FORMS:
            raise ValueError(f"energy_form must be one of {ENERGY_FORMS}, got {self.energy_form!r}")

    def rule(self) -> GHRule:
        return gauss_hermite(self.gh_order)


def capacitances(x, array: ElectrodeArray, cap: CapacitanceModel):
    """C(||x - y_k||) for every electrode, shape (..., E)."""
    y = array.positions
    d1 = x[..., 0][..., None] - y[:, 0]
    d2 = x[..., 1][..., None] - y[:, 1]
    return eval_1d(cap, radial_distance(d1, d2, cap.delta))


def _potential_values(V):
    return V.values if isinstance(V, DiscretePotentials) else V


def particle_potential_discrete(x, array: ElectrodeArray, V, cap: CapacitanceModel):
    """Steady-state particle potential sum C V / sum C."""
    C = capacitances(x, array, cap)
    values = _potential_values(V)
    return (C * values).sum(axis=-1) / C.sum(axis=-1)


def potential_energy_discrete(x, array: ElectrodeArray, V, cap: CapacitanceModel, consts: Optional[FieldConstants] = None):
    C = capacitances(x, array, cap)
    values = _potential_values(V)
    v = (C * values).sum(axis=-1) / C.sum(axis=-1)
    dev = values - v[..., None]
    return 0.5 * (C * (dev * dev)).sum(axis=-1)


def potential_energy_normalized(x, array: ElectrodeArray, V, cap: CapacitanceModel, consts: FieldConstants):
    """Energy with normalised capacitances as the probability mass of the window."""
    C = capacitances(x, array, cap)
    p = C / C.sum(axis=-1)[..., None]
    values = _potential_values(V)
    v = (p * values).sum(axis=-1)
    dev = values - v[..., None]
    return consts.energy_scale * (p * (dev * dev)).sum(axis=-1)


def _gh_samples(x, vmap: ContinuousMap, t, consts: FieldConstants, rule: Optional[GHRule]):
    rule = consts.rule() if rule is None else rule
    offsets, weights = tensor_offsets(rule, consts.sigma)
    y1 = x[..., 0][..., None] + offsets[:, 0]
    y2 = x[..., 1][..., None] + offsets[:, 1]
    t_arr = t if isinstance(t, (Var, Dual)) else np.asarray(t, dtype=float)
    if value_of(t_arr).ndim:
        t_arr = t_arr[..., None]
    return vmap.evaluate(y1, y2, t_arr), weights


def mean_potential_gh(x, vmap: ContinuousMap, t, consts: FieldConstants, rule: Optional[GHRule] = None):
    """E[V(Y, t)] for Y ~ N(x, sigma^2 I)."""
    V, w = _gh_samples(x, vmap, t, consts, rule)
    return (V * w).sum(axis=-1)


def potential_energy_gh(x, vmap: ContinuousMap, t, consts: FieldConstants, rule: Optional[GHRule] = None):
    """energy_scale times the conditional variance of V(Y, t)."""
    V, w = _gh_samples(x, vmap, t, consts, rule)
    vbar = (V * w).sum(axis=-1)
    dev = V - vbar[..., None]
    return consts.energy_scale * (w * (dev * dev)).sum(axis=-1)


def map_to_discrete(vmap: ContinuousMap, array: ElectrodeArray, t):
    """Electrode potentials V(y_k, t), shape t.shape + (E,)."""
    y = array.positions
    t_arr = t if isinstance(t, (Var, Dual)) else np.asarray(t, dtype=float)
    if value_of(t_arr).ndim:
        return vmap.evaluate(y[:, 0], y[:, 1], t_arr[..., None])
    return vmap.evaluate(y[:, 0], y[:, 1], t_arr)


def potential_energy(
    x,
    source: PotentialSource,
    t,
    array: ElectrodeArray,
    cap: CapacitanceModel,
    consts: FieldConstants,
    rule: Optional[GHRule] = None,
):
    """Energy of the form selected by ``consts.energy_form`` for either source kind.

    Discrete potentials always use a discrete form ("normalized" when
    selected, otherwise the steady-state sum). ``t`` is a scalar or an array
    broadcasting against ``x[..., 0]``.
    """
    if isinstance(source, ContinuousMap):
        if consts.energy_form == "gh":
            return potential_energy_gh(x, source, t, consts, rule)
        source = DiscretePotentials(map_to_discrete(source, array, t))
    elif not isinstance(source, DiscretePotentials):
        raise TypeError(f"unknown potential source {type(source).__name__}")
    if consts.energy_form == "normalized":
        return potential_energy_normalized(x, array, source, cap, consts)
    return potential_energy_discrete(x, array, source, cap, consts)


def _full(t, shape):
    if value_of(t).shape == tuple(shape):
        return t
    return t + np.zeros(shape)


def force(
    x,
    source: PotentialSource,
    t,
    array: ElectrodeArray,
    cap: CapacitanceModel,
    consts: FieldConstants,
    rule: Optional[GHRule] = None,
):
    """F = grad_x U at every position in ``x`` (..., 2), returned with the same shape.

    Positions are independent, so one forward pass per axis gives all
    per-particle gradients at once. ``x`` may be traced.
    """
    shape = value_of(x).shape
    e1 = np.zeros(shape)
    e1[..., 0] = 1.0
    e2 = np.zeros(shape)
    e2[..., 1] = 1.0
    U = potential_energy(Dual(x, (e1, e2)), source, t, array, cap, consts, rule)
    if not isinstance(U, Dual):
        return np.zeros(shape)
    out_shape = shape[:-1]
    return stack([_full(U.tangents[0], out_shape), _full(U.tangents[1], out_shape)], axis=-1)


def velocity(x, source: PotentialSource, t, array, cap, consts: FieldConstants, rule: Optional[GHRule] = None):
    """Overdamped particle velocity F / mu."""
    return force(x, source, t, array, cap, consts, rule) / consts.mu
