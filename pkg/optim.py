"""
Adam, the projected dual update for the constraint weight, and box projections.
"""

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

ADAM_DEFAULTS = {"lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
DUAL_ALPHA_FACTOR = 1e-3


class OptimizerError(FloatingPointError):
    """Non-finite gradient; ``index`` is the first offending parameter."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class AdamConfig:
    lr: float = ADAM_DEFAULTS["lr"]
    beta1: float = ADAM_DEFAULTS["beta1"]
    beta2: float = ADAM_DEFAULTS["beta2"]
    eps: float = ADAM_DEFAULTS["eps"]

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")

    def state(self, n: int) -> "AdamState":
        return AdamState.zeros(n, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass(frozen=True, eq=False)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = ADAM_DEFAULTS["lr"]
    beta1: float = ADAM_DEFAULTS["beta1"]
    beta2: float = ADAM_DEFAULTS["beta2"]
    eps: float = ADAM_DEFAULTS["eps"]

    def __post_init__(self):
        if self.step < 0:
            raise ValueError(f"step must be nonnegative, got {self.step}")
        if np.shape(self.m) != np.shape(self.v):
            raise ValueError(f"moment shapes differ: {np.shape(self.m)} vs {np.shape(self.v)}")

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(0, np.zeros(n), np.zeros(n), **hyper)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> Tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update. Returns (new state, new params)."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    bad = ~np.isfinite(grads)
    if bad.any():
        index = int(np.flatnonzero(bad.reshape(-1))[0])
        raise OptimizerError(f"non-finite gradient at parameter {index}", index)
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=step, m=m, v=v), new_params


@dataclass(frozen=True)
class DualState:
    lam: float
    alpha: float
    eps_tol: float

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.eps_tol > 0:
            raise ValueError(f"eps_tol must be positive, got {self.eps_tol}")


def dual_step(state: DualState, residual_sum: float) -> DualState:
    """lambda <- max(0, lambda + alpha (residual_sum - eps_tol))."""
    if not residual_sum >= 0:
        raise ValueError(f"residual_sum must be nonnegative, got {residual_sum}")
    lam = max(0.0, state.lam + state.alpha * (float(residual_sum) - state.eps_tol))
    return replace(state, lam=lam)


def initial_alpha(residual: float, factor: float = DUAL_ALPHA_FACTOR) -> float:
    """Dual step size scaled to the first residual; falls back to ``factor`` for a zero residual."""
    residual = abs(float(residual))
    return factor * residual if residual > 0 else factor


def project_box(values, lo, hi) -> np.ndarray:
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValueError(f"projection bounds are not ordered: lo={lo}, hi={hi}")
    return np.clip(values, lo, hi)
