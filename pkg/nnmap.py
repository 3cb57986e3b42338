"""
One-hidden-layer tanh networks for the potential map and the trajectory bundle.

Parameters live in one flat vector per network, laid out as
W1 (in_dim x hidden_dim, row-major), b1, W2 (hidden_dim x out_dim), b2, so the
optimizer and the checkpoint file see a single array. Every function accepts
an explicit ``params`` argument, which may be a traced value.
"""

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from diffengine import Dual, Var, clip, stack, value_of
from field import ContinuousMap

logger = logging.getLogger(__name__)

OUTPUT_TRANSFORMS = ("identity", "clip", "box")
CHECKPOINT_FORMAT = 1


def param_count(in_dim: int, hidden_dim: int, out_dim: int) -> int:
    return hidden_dim * (in_dim + 1) + out_dim * (hidden_dim + 1)


@dataclass(frozen=True, eq=False)
class Mlp:
    in_dim: int
    hidden_dim: int
    out_dim: int
    params: np.ndarray
    output_transform: str = "identity"
    bound: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if min(self.in_dim, self.hidden_dim, self.out_dim) < 1:
            raise ValueError(
                f"network sizes must be positive, got {self.in_dim}-{self.hidden_dim}-{self.out_dim}"
            )
        if self.output_transform not in OUTPUT_TRANSFORMS:
            raise ValueError(f"output_transform must be one of {OUTPUT_TRANSFORMS}, got {self.output_transform!r}")
        if self.output_transform != "identity":
            if self.bound is None or not self.bound[0] <= self.bound[1]:
                raise ValueError(f"{self.output_transform} transform needs ordered bounds, got {self.bound}")
        params = np.asarray(self.params, dtype=float).reshape(-1)
        if params.size != self.size:
            raise ValueError(f"expected {self.size} parameters, got {params.size}")
        object.__setattr__(self, "params", params)

    @property
    def size(self) -> int:
        return param_count(self.in_dim, self.hidden_dim, self.out_dim)

    def with_params(self, params) -> "Mlp":
        return replace(self, params=np.array(params, dtype=float))

    def unpack(self, params=None):
        """(W1, b1, W2, b2) views of a flat vector; traced vectors give traced slices."""
        p = self.params if params is None else params
        i, h, o = self.in_dim, self.hidden_dim, self.out_dim
        k1 = i * h
        k2 = k1 + h
        k3 = k2 + h * o
        return p[:k1].reshape(i, h), p[k1:k2], p[k2:k3].reshape(h, o), p[k3:k3 + o]


def init(
    in_dim: int,
    hidden_dim: int,
    out_dim: int,
    seed: int = 0,
    output_transform: str = "identity",
    bound: Optional[Tuple[float, float]] = None,
    output_scale: float = 1.0,
) -> Mlp:
    """Uniform(-s, s) weights with s = 1/sqrt(fan_in); the output layer is further scaled by ``output_scale``."""
    if hidden_dim < 1:
        raise ValueError(f"hidden_dim must be positive, got {hidden_dim}")
    if in_dim < 1 or out_dim < 1:
        raise ValueError(f"in_dim and out_dim must be positive, got {in_dim}, {out_dim}")
    rng = np.random.default_rng(seed)
    s1 = 1.0 / math.sqrt(in_dim)
    s2 = output_scale / math.sqrt(hidden_dim)
    params = np.concatenate(
        [
            rng.uniform(-s1, s1, in_dim * hidden_dim),
            rng.uniform(-s1, s1, hidden_dim),
            rng.uniform(-s2, s2, hidden_dim * out_dim),
            rng.uniform(-s2, s2, out_dim),
        ]
    )
    return Mlp(in_dim, hidden_dim, out_dim, params, output_transform, bound)


def hidden(net: Mlp, columns: Sequence, params=None):
    """tanh(W1^T u + b1) from per-input columns that broadcast against each other."""
    W1, b1, _, _ = net.unpack(params)
    z = b1
    for c, col in enumerate(columns):
        col = col if isinstance(col, (Var, Dual)) else np.asarray(col, dtype=float)
        z = z + col[..., None] * W1[c]
    return np.tanh(z)


def _transform(net: Mlp, out):
    if net.output_transform == "identity":
        return out
    lo, hi = net.bound
    return clip(out, lo, hi)


def apply_columns(net: Mlp, columns: Sequence, params=None, project: bool = True):
    """Network output (..., out_dim) from input columns; skips the output transform when not ``project``."""
    if len(columns) != net.in_dim:
        raise ValueError(f"network takes {net.in_dim} inputs, got {len(columns)}")
    _, _, W2, b2 = net.unpack(params)
    out = hidden(net, columns, params) @ W2 + b2
    return _transform(net, out) if project else out


def forward(net: Mlp, inputs, params=None, project: bool = True):
    """Batch forward pass on (..., in_dim) inputs."""
    width = value_of(inputs).shape[-1] if value_of(inputs).ndim else 1
    if width != net.in_dim:
        raise ValueError(f"input width {width} does not match in_dim={net.in_dim}")
    if not isinstance(inputs, (Var, Dual)):
        inputs = np.asarray(inputs, dtype=float)
    columns = [inputs[..., c] for c in range(net.in_dim)]
    return apply_columns(net, columns, params, project)


def time_derivative(net: Mlp, t, params=None):
    """d/dt of the pre-projection output of a 1-input network at times ``t`` (K,), shape (K, out_dim)."""
    if net.in_dim != 1:
        raise ValueError(f"time_derivative needs a 1-input network, got in_dim={net.in_dim}")
    t = np.asarray(t, dtype=float)
    out = apply_columns(net, [Dual(t, (np.ones_like(t),))], params, project=False)
    return out.tangents[0]


@dataclass(frozen=True, eq=False)
class PotentialMap:
    """V(y1, y2, t) = clip(v_max * net(u1, u2, tau), -v_max, v_max) with inputs scaled to [-1, 1]."""

    net: Mlp
    bounds: Tuple[float, float, float, float]
    horizon: float
    v_max: float

    @classmethod
    def create(
        cls,
        hidden_dim: int,
        bounds: Sequence[float],
        horizon: float,
        v_max: float,
        seed: int = 0,
        init_scale: float = 0.1,
    ) -> "PotentialMap":
        if init_scale == 0:
            raise ValueError("potential init_scale must be nonzero")
        net = init(3, hidden_dim, 1, seed=seed, output_scale=init_scale)
        return cls(net, tuple(float(b) for b in bounds), float(horizon), float(v_max))

    @property
    def size(self) -> int:
        return self.net.size

    def evaluate(self, y1, y2, t, params=None):
        x1_min, x1_max, x2_min, x2_max = self.bounds
        u1 = (y1 - 0.5 * (x1_min + x1_max)) * (2.0 / (x1_max - x1_min))
        u2 = (y2 - 0.5 * (x2_min + x2_max)) * (2.0 / (x2_max - x2_min))
        tau = t * (2.0 / self.horizon) - 1.0
        out = apply_columns(self.net, [u1, u2, tau], params, project=False)[..., 0]
        return clip(self.v_max * out, -self.v_max, self.v_max)

    def as_source(self, params=None) -> ContinuousMap:
        return ContinuousMap(lambda y1, y2, t: self.evaluate(y1, y2, t, params))


@dataclass(frozen=True, eq=False)
class TrajectoryBundle:
    """Two 1 -> H -> n networks, one per axis, driven by normalised time tau = t / T.

    ``params`` for the bundle is the concatenation of both networks' vectors.
    """

    nets: Tuple[Mlp, Mlp]
    horizon: float

    @classmethod
    def create(
        cls, n_particles: int, hidden_dim: int, bounds: Sequence[float], horizon: float, seed: int = 0
    ) -> "TrajectoryBundle":
        x1_min, x1_max, x2_min, x2_max = (float(b) for b in bounds)
        net1 = init(1, hidden_dim, n_particles, seed=seed, output_transform="box", bound=(x1_min, x1_max))
        net2 = init(1, hidden_dim, n_particles, seed=seed + 1, output_transform="box", bound=(x2_min, x2_max))
        return cls((net1, net2), float(horizon))

    @property
    def n_particles(self) -> int:
        return self.nets[0].out_dim

    @property
    def size(self) -> int:
        return self.nets[0].size + self.nets[1].size

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.nets[0].params, self.nets[1].params])

    def with_params(self, params) -> "TrajectoryBundle":
        p1, p2 = self.split(np.asarray(params, dtype=float))
        return replace(self, nets=(self.nets[0].with_params(p1), self.nets[1].with_params(p2)))

    def split(self, params=None):
        params = self.params if params is None else params
        k = self.nets[0].size
        return params[:k], params[k:]

    def positions(self, t, params=None, project: bool = True):
        """Particle positions (K, n, 2) at times ``t`` (K,)."""
        p1, p2 = self.split(params)
        tau = np.asarray(t, dtype=float) / self.horizon
        x1 = apply_columns(self.nets[0], [tau], p1, project)
        x2 = apply_columns(self.nets[1], [tau], p2, project)
        return stack([x1, x2], axis=-1)

    def velocities(self, t, params=None):
        """dX/dt of the pre-projection positions, (K, n, 2)."""
        p1, p2 = self.split(params)
        t = np.asarray(t, dtype=float)
        tau = Dual(t / self.horizon, (np.full(t.shape, 1.0 / self.horizon),))
        v1 = apply_columns(self.nets[0], [tau], p1, project=False).tangents[0]
        v2 = apply_columns(self.nets[1], [tau], p2, project=False).tangents[0]
        return stack([v1, v2], axis=-1)


def prefit(bundle: TrajectoryBundle, x0: np.ndarray, path=None, samples: int = 64, ridge: float = 1e-10) -> TrajectoryBundle:
    """Refit both output layers so the bundle follows ``path`` (default: stay at ``x0``).

    Hidden layers are kept; the output layer is a ridge least-squares solve
    over ``samples`` normalised times plus an exactly weighted t = 0 row.
    ``path(tau)`` returns (n, 2) positions for tau in [0, 1].
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (bundle.n_particles, 2):
        raise ValueError(f"initial positions must be ({bundle.n_particles}, 2), got {x0.shape}")
    tau = np.linspace(0.0, 1.0, samples)
    if path is None:
        targets = np.broadcast_to(x0, (samples,) + x0.shape)
    else:
        targets = np.stack([np.asarray(path(s), dtype=float) for s in tau])
        targets[0] = x0
    refit = []
    for axis, net in enumerate(bundle.nets):
        H = hidden(net, [tau])
        design = np.hstack([H, np.ones((samples, 1))])
        weight = np.ones(samples)
        weight[0] = 1e3
        A = design * weight[:, None]
        b = targets[:, :, axis] * weight[:, None]
        reg = np.sqrt(ridge) * np.eye(net.hidden_dim + 1)
        reg[-1, -1] = 0.0
        solution = np.linalg.lstsq(np.vstack([A, reg]), np.vstack([b, np.zeros((net.hidden_dim + 1, b.shape[1]))]), rcond=None)[0]
        W1, b1, _, _ = net.unpack()
        refit.append(net.with_params(np.concatenate([W1.reshape(-1), b1, solution[:-1].reshape(-1), solution[-1]])))
    fitted = replace(bundle, nets=tuple(refit))
    gap = float(np.max(np.abs(value_of(fitted.positions([0.0], project=False))[0] - x0)))
    logger.info("trajectory prefit done, max |x(0) - x0| = %.3e", gap)
    return fitted


def _net_to_dict(net: Mlp) -> Dict:
    return {
        "in_dim": net.in_dim,
        "hidden_dim": net.hidden_dim,
        "out_dim": net.out_dim,
        "output_transform": net.output_transform,
        "bound": list(net.bound) if net.bound is not None else None,
        "params": net.params.tolist(),
    }


def _net_from_dict(data: Dict) -> Mlp:
    bound = tuple(data["bound"]) if data.get("bound") is not None else None
    return Mlp(
        int(data["in_dim"]),
        int(data["hidden_dim"]),
        int(data["out_dim"]),
        np.asarray(data["params"], dtype=float),
        data.get("output_transform", "identity"),
        bound,
    )


def save_checkpoint(path, networks: Dict[str, Mlp], metadata: Optional[Dict] = None) -> None:
    document = {
        "format": CHECKPOINT_FORMAT,
        "networks": {name: _net_to_dict(net) for name, net in networks.items()},
        "metadata": metadata or {},
    }
    Path(path).write_text(json.dumps(document, indent=1), encoding="utf-8")


def load_checkpoint(path) -> Tuple[Dict[str, Mlp], Dict]:
    """Return (networks by name, metadata). Raises ValueError on a malformed file."""
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
        if document.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {document.get('format')!r}")
        networks = {name: _net_from_dict(d) for name, d in document["networks"].items()}
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"malformed checkpoint {path}: {exc}") from exc
    return networks, document.get("metadata", {})
