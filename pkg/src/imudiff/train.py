"""Loss, optimizer and the training loops for the denoiser and the classifier."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .classify import N_CLASSES, ClassifierConfig, ClassifierModel, macro_f1, predict
from .diffusion import NoiseSchedule, build_linear_schedule, forward_diffuse_closed
from .errors import ConfigError, DomainError, NumericalError
from .network import DenoiserModel, UNetConfig
from .spectral import SpectralScaler, fit_scaler, scale, stft

log = logging.getLogger(__name__)


def smooth_l1(pred, target, beta: float = 1.0):
    """Mean of 0.5*d**2/beta for |d| < beta, else |d| - 0.5*beta."""
    if tuple(np.shape(pred)) != tuple(np.shape(target)):
        raise DomainError(f"shape mismatch {tuple(np.shape(pred))} vs {tuple(np.shape(target))}")
    if beta <= 0:
        raise DomainError("beta must be positive")
    if isinstance(pred, torch.Tensor):
        d = (pred - target).abs()
        return torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta).mean()
    d = np.abs(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
    return float(np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta).mean())


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor], **kw) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
              lr: float, names: Sequence[str] | None = None):
    """Bias-corrected Adam; returns (new_params, new_state) without mutating inputs."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise DomainError("params, grads and moments must have equal length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise DomainError(f"gradient {i} has shape {tuple(g.shape)}, expected {tuple(params[i].shape)}")
        if not torch.all(torch.isfinite(g)):
            name = names[i] if names is not None else f"#{i}"
            raise NumericalError(f"non-finite gradient in {name}")
    b1, b2 = state.beta1, state.beta2
    step = state.step + 1
    m = [b1 * mi + (1 - b1) * g for mi, g in zip(state.m, grads)]
    v = [b2 * vi + (1 - b2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - b1 ** step, 1 - b2 ** step
    new = [p - lr * (mi / c1) / (torch.sqrt(vi / c2) + state.eps) for p, mi, vi in zip(params, m, v)]
    return new, AdamState(m, v, step, b1, b2, state.eps)


class Adam:
    """In-place wrapper around :func:`adam_step` for ``nn.Module`` parameters."""

    def __init__(self, named_params, lr: float):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.lr = lr
        self.state = AdamState.zeros_like([p.detach() for p in self.params])

    def step(self):
        grads = [torch.zeros_like(p) if p.grad is None else p.grad for p in self.params]
        new, self.state = adam_step([p.detach() for p in self.params], grads, self.state, self.lr, self.names)
        with torch.no_grad():
            for p, q in zip(self.params, new):
                p.copy_(q)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class DiffusionTrainConfig:
    epochs: int = 4500
    learning_rate: float = 4e-4
    smooth_l1_beta: float = 1.0
    batch_size: int = 22
    seed: int = 0
    T: int = 3000
    beta_end_acc: float = 9e-4
    beta_end_gyro: float = 6e-4
    beta_start_fraction: float = 0.01
    dtype: str = "float32"
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)
        for k in ("epochs", "learning_rate", "smooth_l1_beta", "batch_size", "T"):
            if not getattr(self, k) > 0:
                raise ConfigError(f"diffusion.{k} must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("diffusion.dtype must be float32 or float64")

    def schedule(self) -> NoiseSchedule:
        return build_linear_schedule(self.beta_end_acc, self.beta_end_gyro, self.T, self.beta_start_fraction)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DiffusionResult:
    model: DenoiserModel
    scaler: SpectralScaler
    losses: list[float]


def train_denoiser(x0: np.ndarray, config: DiffusionTrainConfig,
                   progress: Callable[[int, float], None] | None = None):
    """Fit a fresh denoiser to scaled spectrograms ``x0`` (n, 12, 12, 80).

    Returns the model and the per-epoch mean loss.
    """
    dtype = getattr(torch, config.dtype)
    schedule = config.schedule()
    model = DenoiserModel(config.unet, T=config.T, seed=config.seed).to(dtype)
    opt = Adam(model.named_parameters(), config.learning_rate)
    gen = torch.Generator().manual_seed(int(config.seed))
    data = torch.as_tensor(np.asarray(x0), dtype=dtype)
    n = len(data)
    bs = min(config.batch_size, n)
    losses = []
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(n, generator=gen) if bs < n else torch.arange(n)
        total = 0.0
        for step, b0 in enumerate(range(0, n, bs)):
            batch = data[order[b0:b0 + bs]]
            t = torch.randint(0, config.T, (len(batch),), generator=gen)
            noise = torch.randn(batch.shape, generator=gen, dtype=dtype)
            x_t = forward_diffuse_closed(batch, t, schedule, noise)
            loss = smooth_l1(model(x_t, t), noise, config.smooth_l1_beta)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite diffusion loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        losses.append(total / n)
        if progress is not None:
            progress(epoch, losses[-1])
    model.eval()
    return model, losses


def train_diffusion(windows: np.ndarray, config: DiffusionTrainConfig,
                    progress: Callable[[int, float], None] | None = None) -> DiffusionResult:
    """Train on standardized (n, 160, 6) windows of one class.

    The spectral scaler is fit on the same windows and returned with the model.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or len(windows) == 0:
        raise DomainError("expected a non-empty (n, 160, 6) stack")
    specs = stft(windows)
    scaler = fit_scaler(specs)
    model, losses = train_denoiser(scale(specs, scaler), config, progress)
    return DiffusionResult(model, scaler, losses)


@dataclass
class ClassifierTrace:
    train_loss: list[float] = field(default_factory=list)
    train_f1: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def train_classifier(train_x: np.ndarray, train_y: np.ndarray, val_x: np.ndarray, val_y: np.ndarray,
                     config: ClassifierConfig | None = None):
    """Cross-entropy + L2 training; keeps the epoch with the best validation macro-F1.

    Returns (model, trace); ties keep the earliest epoch.
    """
    cfg = config or ClassifierConfig()
    train_y = np.asarray(train_y, dtype=np.int64)
    missing = sorted(set(range(N_CLASSES)) - set(train_y.tolist()))
    if missing:
        raise ConfigError(f"classes {missing} absent from the training set")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = ClassifierModel(cfg)
    opt = Adam(model.named_parameters(), cfg.learning_rate)
    x = torch.as_tensor(np.asarray(train_x), dtype=torch.float32)
    y = torch.as_tensor(train_y)
    trace = ClassifierTrace()
    best_state, best_f1 = None, -math.inf
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(len(x), generator=gen)
        total = 0.0
        for b0 in range(0, len(x), cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            logits = model(x[idx])
            loss = torch.nn.functional.cross_entropy(logits, y[idx]) + cfg.l2 * model.l2_penalty()
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite classifier loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        trace.train_loss.append(total / len(x))
        trace.train_f1.append(macro_f1(train_y, predict(model, train_x)))
        val_f1 = macro_f1(val_y, predict(model, val_x)) if len(val_y) else trace.train_f1[-1]
        trace.val_f1.append(val_f1)
        if val_f1 > best_f1:
            best_f1, trace.best_epoch = val_f1, epoch
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
    model.load_state_dict(best_state)
    model.eval()
    return model, trace
