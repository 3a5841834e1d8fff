"""Per-sensor-group linear noise schedules, forward noising and ancestral sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .errors import ConfigError, DomainError, NumericalError
from .spectral import SPEC_SHAPE, STRUCTURAL_ZERO

log = logging.getLogger(__name__)

ACC, GYRO = 0, 1
GROUP_NAMES = ("Acc", "Gyro")
# real/imag channels of acc axes vs gyro axes
CHANNEL_GROUP = np.array([ACC, ACC, ACC, GYRO, GYRO, GYRO] * 2)
SCHEDULE_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_end: tuple[float, float]
    beta_start_fraction: float
    beta: np.ndarray  # (2, T)
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def channel(self, name: str) -> np.ndarray:
        """(12, T) view of one of beta/alpha/alpha_bar, expanded over channels."""
        return getattr(self, name)[CHANNEL_GROUP]

    def to_json(self) -> str:
        return json.dumps({"version": SCHEDULE_VERSION, "T": self.T,
                           "beta_end_acc": self.beta_end[ACC], "beta_end_gyro": self.beta_end[GYRO],
                           "beta_start_fraction": self.beta_start_fraction}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NoiseSchedule":
        obj = json.loads(text)
        if obj.get("version") != SCHEDULE_VERSION:
            raise ConfigError(f"unsupported schedule version {obj.get('version')}")
        return build_linear_schedule(obj["beta_end_acc"], obj["beta_end_gyro"], obj["T"],
                                     obj["beta_start_fraction"])


def build_linear_schedule(beta_end_acc: float = 9e-4, beta_end_gyro: float = 6e-4, T: int = 3000,
                          beta_start_fraction: float = 0.01) -> NoiseSchedule:
    """Linear beta ramp per group from ``beta_start_fraction * beta_end`` to ``beta_end``.

    ``beta_start_fraction=1`` gives a constant schedule.
    """
    T = int(T)
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    ends = (float(beta_end_acc), float(beta_end_gyro))
    for end in ends:
        start = beta_start_fraction * end
        if not (0 < start <= end < 1):
            raise ConfigError(f"invalid beta range [{start}, {end}]")
    if T == 1:
        beta = np.array([[ends[0]], [ends[1]]])
    else:
        beta = np.stack([np.linspace(beta_start_fraction * e, e, T) for e in ends])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha, axis=1)
    for a in (beta, alpha, alpha_bar):
        a.setflags(write=False)
    return NoiseSchedule(T, ends, float(beta_start_fraction), beta, alpha, alpha_bar)


def _coef(schedule: NoiseSchedule, name: str, t, like, fn=None):
    """Per-channel coefficient at step(s) t, broadcastable against ``like``.

    Scalar t gives shape (12, 1, 1); an array of t (one per batch row) gives (B, 12, 1, 1).
    """
    t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.T):
        raise DomainError(f"step {t_arr.tolist()} outside [0, {schedule.T})")
    vals = schedule.channel(name)[:, t_arr]
    if fn is not None:
        vals = fn(vals)
    vals = np.moveaxis(vals, 0, -1)[..., None, None]
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(vals, dtype=like.dtype, device=like.device)
    return vals


def _check(x):
    if tuple(x.shape[-3:]) != SPEC_SHAPE:
        raise DomainError(f"expected (..., {SPEC_SHAPE}), got {tuple(x.shape)}")


def forward_diffuse_step(x_prev, t, schedule: NoiseSchedule, noise):
    _check(x_prev)
    if tuple(noise.shape) != tuple(x_prev.shape):
        raise DomainError("noise shape must match x_prev")
    keep = _coef(schedule, "alpha", t, x_prev, np.sqrt)
    add = _coef(schedule, "beta", t, x_prev, np.sqrt)
    return keep * x_prev + add * noise


def forward_diffuse_closed(x0, t, schedule: NoiseSchedule, noise):
    _check(x0)
    if tuple(noise.shape) != tuple(x0.shape):
        raise DomainError("noise shape must match x0")
    keep = _coef(schedule, "alpha_bar", t, x0, np.sqrt)
    add = _coef(schedule, "alpha_bar", t, x0, lambda a: np.sqrt(1.0 - a))
    return keep * x0 + add * noise


def reverse_step(x_t, t, eps_hat, schedule: NoiseSchedule, noise=None):
    """One ancestral step x_t -> x_{t-1}; sigma_t = sqrt(beta_t), forced to 0 at t == 0."""
    _check(x_t)
    if tuple(eps_hat.shape) != tuple(x_t.shape):
        raise DomainError("eps_hat shape must match x_t")
    inv_sqrt_alpha = _coef(schedule, "alpha", t, x_t, lambda a: 1.0 / np.sqrt(a))
    beta = schedule.channel("beta")
    eps_coef = _coef(schedule, "alpha_bar", t, x_t,
                     lambda ab: beta[:, np.asarray(t)] / np.sqrt(1.0 - ab))
    out = inv_sqrt_alpha * (x_t - eps_coef * eps_hat)
    if noise is not None:
        if tuple(noise.shape) != tuple(x_t.shape):
            raise DomainError("noise shape must match x_t")
        positive = np.asarray(t) > 0
        out = out + _coef(schedule, "beta", t, x_t, lambda b: np.sqrt(b) * positive) * noise
    return out


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    """Independent stream per (seed, chain index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(chain)]))


def sample(model, n: int, schedule: NoiseSchedule, seed: int, first_chain: int = 0,
           batch_size: int = 128, progress: Callable[[int, int], None] | None = None) -> np.ndarray:
    """Ancestral sampling of ``n`` scaled spectrograms, returned as (n, 12, 12, 80) float64.

    Chain ``first_chain + i`` draws all of its noise from ``chain_rng(seed, first_chain + i)``,
    so the noise a chain sees does not depend on how chains are batched or split across calls.
    The chain state is kept in double precision; the network runs in its own dtype.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    model_T = getattr(model, "T", None)
    if model_T is not None and model_T != schedule.T:
        raise ConfigError(f"model was trained with T={model_T}, schedule has T={schedule.T}")
    out = []
    for b0 in range(0, n, batch_size):
        chains = range(first_chain + b0, first_chain + min(n, b0 + batch_size))
        out.append(_sample_batch(model, list(chains), schedule, seed, progress))
    return np.concatenate(out)


def _sample_batch(model, chains, schedule, seed, progress):
    rngs = [chain_rng(seed, c) for c in chains]
    x = torch.from_numpy(np.stack([r.standard_normal(SPEC_SHAPE) for r in rngs]))
    param = next(model.parameters())
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for t in range(schedule.T - 1, -1, -1):
                tt = torch.full((len(chains),), t, dtype=torch.long)
                eps = model(x.to(param.dtype), tt).to(torch.float64)
                noise = None
                if t > 0:
                    noise = torch.from_numpy(np.stack([r.standard_normal(SPEC_SHAPE) for r in rngs]))
                x = reverse_step(x, t, eps, schedule, noise)
                if progress is not None:
                    progress(schedule.T - t, schedule.T)
    finally:
        model.train(was_training)
    out = x.numpy()
    out[:, STRUCTURAL_ZERO, :] = 0.0
    if not np.all(np.isfinite(out)):
        raise NumericalError("sampling produced non-finite values")
    return out
