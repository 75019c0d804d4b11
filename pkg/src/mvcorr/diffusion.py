"""Deterministic DDIM inversion and sampling over pluggable noise predictors.

A predictor is any callable ``pred(x, level, cond, ctx=None)`` returning a
noise estimate shaped like ``x``. ``level`` indexes ``Schedule.alphas_cumprod``.
Predictors with attention layers route them through ``ctx.attend`` so callers
can swap in modified attention, and report per-layer features through
``ctx.record``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .attention import AttentionWeights, self_attention
from .errors import ShapeError

DEFAULT_STEPS = 20
DEFAULT_INVERSION_ITERS = 5

# (step, layer, features, weights) -> replacement attention output
AttentionHook = Callable[[int, int, np.ndarray, AttentionWeights], np.ndarray]


@dataclass(frozen=True, eq=False)
class Schedule:
    alphas_cumprod: np.ndarray
    timesteps: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.alphas_cumprod) - 1


def make_schedule(n_steps: int = DEFAULT_STEPS, n_train: int = 1000,
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    """Linear beta ramp over ``n_train`` steps, subsampled to ``n_steps`` levels.

    Level 0 is the clean signal (alpha_bar = 1); level k uses training
    timestep round(k * n_train / n_steps) - 1.
    """
    if not 1 <= n_steps <= n_train:
        raise ValueError(f"n_steps must be in [1, {n_train}], got {n_steps}")
    betas = np.linspace(beta_start, beta_end, n_train, dtype=np.float64)
    abar = np.cumprod(1.0 - betas)
    ts = np.round(np.arange(1, n_steps + 1) * n_train / n_steps).astype(np.int64) - 1
    ac = np.concatenate([[1.0], abar[ts]])
    return Schedule(ac, np.concatenate([[-1], ts]))


class FeatureRecord(dict):
    """Mapping (step, layer) -> recorded feature grid."""

    def steps(self):
        return sorted({k[0] for k in self})

    def layers(self):
        return sorted({k[1] for k in self})


class StepContext:
    """Per-call handle given to predictors: attention routing and feature recording."""

    def __init__(self, step: int, record: Optional[FeatureRecord] = None,
                 hook: Optional[AttentionHook] = None):
        self.step = step
        self._record = record
        self._hook = hook

    def record(self, layer: int, grid: np.ndarray) -> None:
        if self._record is not None:
            self._record[(self.step, layer)] = np.array(grid, copy=True)

    def attend(self, layer: int, f: np.ndarray, w: AttentionWeights) -> np.ndarray:
        if self._hook is None:
            return self_attention(f, w)
        return self._hook(self.step, layer, f, w)


def _predict(pred, x, level, cond, ctx):
    eps = np.asarray(pred(x, level, cond, ctx), dtype=np.float64)
    if eps.shape != x.shape:
        raise ShapeError(f"predictor returned shape {eps.shape} for input {x.shape}")
    return eps


def ddim_invert(x0, sched: Schedule, pred, cond=None, hook: Optional[AttentionHook] = None,
                fixed_point_iters: int = DEFAULT_INVERSION_ITERS):
    """Map a clean latent to level T; returns (z_T, FeatureRecord).

    The step leaving level k evaluates the predictor at level k+1 on x_k and
    applies the DDIM update. With ``fixed_point_iters`` > 0 the noise estimate
    is then re-evaluated at the new point and the step repeated, which makes
    the step the exact inverse of the corresponding sampling step once it
    converges. Records are keyed by k (0 .. T-1) and hold the last evaluation.
    """
    x = np.array(x0, dtype=np.float64)
    ac = sched.alphas_cumprod
    rec = FeatureRecord()
    for k in range(sched.n_steps):
        eps = _predict(pred, x, k + 1, cond, StepContext(k, rec, hook))
        x0_hat = (x - np.sqrt(1.0 - ac[k]) * eps) / np.sqrt(ac[k])
        nxt = np.sqrt(ac[k + 1]) * x0_hat + np.sqrt(1.0 - ac[k + 1]) * eps
        for _ in range(fixed_point_iters):
            eps = _predict(pred, nxt, k + 1, cond, StepContext(k, rec, hook))
            x0_hat = (x - np.sqrt(1.0 - ac[k]) * eps) / np.sqrt(ac[k])
            nxt = np.sqrt(ac[k + 1]) * x0_hat + np.sqrt(1.0 - ac[k + 1]) * eps
        x = nxt
    return x, rec


def ddim_sample(z_t, sched: Schedule, pred, cond=None, hook: Optional[AttentionHook] = None,
                record: Optional[FeatureRecord] = None):
    """Deterministic reverse process from level T to 0.

    Features are written into ``record`` (when given) keyed by level k (T .. 1).
    """
    x = np.array(z_t, dtype=np.float64)
    ac = sched.alphas_cumprod
    for k in range(sched.n_steps, 0, -1):
        eps = _predict(pred, x, k, cond, StepContext(k, record, hook))
        x0_hat = (x - np.sqrt(1.0 - ac[k]) * eps) / np.sqrt(ac[k])
        x = np.sqrt(ac[k - 1]) * x0_hat + np.sqrt(1.0 - ac[k - 1]) * eps
    return x


# --- toy predictors ---------------------------------------------------------------

class ZeroPredictor:
    n_layers = 0

    def __call__(self, x, level, cond=None, ctx=None):
        return np.zeros_like(x, dtype=np.float64)


class ConstantPredictor:
    n_layers = 0

    def __init__(self, value: float = 0.1):
        self.value = float(value)

    def __call__(self, x, level, cond=None, ctx=None):
        return np.full(np.shape(x), self.value)


class LinearPredictor:
    """eps = A x per token, with A seeded and scaled by ``gain``."""

    n_layers = 0

    def __init__(self, seed: int = 0, gain: float = 0.1):
        self.seed = seed
        self.gain = gain
        self._mats = {}

    def matrix(self, dim: int) -> np.ndarray:
        if dim not in self._mats:
            rng = np.random.default_rng([self.seed, dim])
            self._mats[dim] = self.gain * rng.uniform(-1, 1, size=(dim, dim)) / np.sqrt(dim)
        return self._mats[dim]

    def __call__(self, x, level, cond=None, ctx=None):
        x = np.asarray(x, dtype=np.float64)
        return x @ self.matrix(x.shape[-1]).T


class MixerPredictor:
    """Two residual attention blocks with seeded weights.

    The hidden state starts as ``x + cond`` (conditioning enters as a bias)
    and passes through two residual attention blocks. Its linear read-out is
    treated as the denoised mean ``mu`` and the noise estimate is
    ``sqrt(1 - abar) * (x - sqrt(abar) * mu)``, the exact form for a
    unit-variance Gaussian prior centred on ``mu``; this keeps the DDIM flow
    well conditioned. Layers 0 and 1 record the input of their attention
    block, layer 2 the final hidden state.
    """

    n_layers = 3
    attention_layers = (0, 1)

    def __init__(self, dim: int = 16, seed: int = 0, schedule: Schedule | None = None,
                 prior_weight: float = 0.5, weight_scale: float = 1.0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.schedule = schedule or make_schedule()
        self.prior_weight = prior_weight
        s = weight_scale * np.sqrt(3.0 / dim)
        self.blocks = [AttentionWeights.random(dim, rng, scale=s) for _ in self.attention_layers]
        self.w_out = np.eye(dim) + rng.uniform(-1, 1, size=(dim, dim)) * 0.1 * np.sqrt(3.0 / dim)

    def __call__(self, x, level, cond=None, ctx=None):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"mixer built for dim {self.dim}, got {x.shape[-1]}")
        if not 0 <= level <= self.schedule.n_steps:
            raise ValueError(f"level {level} outside the mixer's schedule")
        ctx = ctx or StepContext(level)
        h = x if cond is None else x + np.asarray(cond, dtype=np.float64)
        for layer, w in zip(self.attention_layers, self.blocks):
            ctx.record(layer, h)
            h = h + ctx.attend(layer, h, w)
        ctx.record(2, h)
        abar = self.schedule.alphas_cumprod[level]
        mu = self.prior_weight * (h @ self.w_out.T)
        return np.sqrt(1.0 - abar) * (x - np.sqrt(abar) * mu)


def toy_predictor(kind: str, dim: int = 16, seed: int = 0, **kwargs):
    if kind == "zero":
        return ZeroPredictor()
    if kind == "constant":
        return ConstantPredictor(**kwargs)
    if kind == "linear":
        return LinearPredictor(seed=seed, **kwargs)
    if kind == "mixer":
        return MixerPredictor(dim=dim, seed=seed, **kwargs)
    raise ValueError(f"unknown predictor kind {kind!r}")
