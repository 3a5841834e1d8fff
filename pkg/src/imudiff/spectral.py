"""STFT of 160x6 windows into 12x12x80 real tensors, and its inverse."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateError, DomainError, NumericalError

WINDOW_LEN = 160
N_AXES = 6
FFT_LEN = 22
HOP = 2
PAD = 10
N_BINS = FFT_LEN // 2 + 1
N_FRAMES = (WINDOW_LEN + 2 * PAD - FFT_LEN) // HOP + 1
N_CHANNELS = 2 * N_AXES
SPEC_SHAPE = (N_CHANNELS, N_BINS, N_FRAMES)
SCALER_VERSION = 1

# periodic Hann
HANN = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(FFT_LEN) / FFT_LEN)

# imaginary parts of the DC and Nyquist bins are identically zero for real input
STRUCTURAL_ZERO = np.zeros(SPEC_SHAPE[:2], dtype=bool)
STRUCTURAL_ZERO[N_AXES:, 0] = True
STRUCTURAL_ZERO[N_AXES:, N_BINS - 1] = True


def _frame_starts():
    return np.arange(N_FRAMES) * HOP


def _ola_norm() -> np.ndarray:
    norm = np.zeros(WINDOW_LEN + 2 * PAD)
    for s in _frame_starts():
        norm[s:s + FFT_LEN] += HANN ** 2
    return norm


_NORM = _ola_norm()


def stft(window: np.ndarray) -> np.ndarray:
    """(..., 160, 6) -> (..., 12, 12, 80); channels are [real axes 0-5, imag axes 0-5]."""
    x = np.asarray(window, dtype=np.float64)
    if x.shape[-2:] != (WINDOW_LEN, N_AXES):
        raise DomainError(f"expected (..., {WINDOW_LEN}, {N_AXES}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DomainError("stft input contains non-finite values")
    x = np.swapaxes(x, -1, -2)
    pad = [(0, 0)] * (x.ndim - 1) + [(PAD, PAD)]
    x = np.pad(x, pad)
    frames = np.lib.stride_tricks.sliding_window_view(x, FFT_LEN, axis=-1)[..., ::HOP, :]
    spec = np.fft.rfft(frames * HANN, n=FFT_LEN, axis=-1)  # (..., axes, frames, bins)
    spec = np.swapaxes(spec, -1, -2)  # (..., axes, bins, frames)
    return np.concatenate([spec.real, spec.imag], axis=-3)


def istft(spec: np.ndarray) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`; the pads are discarded."""
    s = np.asarray(spec, dtype=np.float64)
    if s.shape[-3:] != SPEC_SHAPE:
        raise DomainError(f"expected (..., {SPEC_SHAPE}), got {s.shape}")
    z = s[..., :N_AXES, :, :] + 1j * s[..., N_AXES:, :, :]
    frames = np.fft.irfft(np.swapaxes(z, -1, -2), n=FFT_LEN, axis=-1) * HANN  # (..., axes, frames, 22)
    out = np.zeros(s.shape[:-3] + (N_AXES, WINDOW_LEN + 2 * PAD))
    for k, start in enumerate(_frame_starts()):
        out[..., start:start + FFT_LEN] += frames[..., k, :]
    norm = _NORM[PAD:PAD + WINDOW_LEN]
    if np.any(norm <= 0):
        raise NumericalError("zero overlap-add normalization inside the window")
    out = out[..., PAD:PAD + WINDOW_LEN] / norm
    return np.swapaxes(out, -1, -2)


def zero_structural(spec: np.ndarray) -> np.ndarray:
    out = np.array(spec, dtype=np.float64, copy=True)
    out[..., STRUCTURAL_ZERO, :] = 0.0
    return out


@dataclass(frozen=True)
class SpectralScaler:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != (N_CHANNELS,) or self.std.shape != (N_CHANNELS,):
            raise DomainError("SpectralScaler expects 12 means and 12 stds")
        if np.any(~(self.std > 0)):
            raise DegenerateError("SpectralScaler std must be positive")

    def to_json(self) -> str:
        return json.dumps({"version": SCALER_VERSION, "mean": self.mean.tolist(),
                           "std": self.std.tolist()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SpectralScaler":
        obj = json.loads(text)
        if obj.get("version") != SCALER_VERSION:
            raise ConfigError(f"unsupported SpectralScaler version {obj.get('version')}")
        return cls(np.array(obj["mean"], dtype=float), np.array(obj["std"], dtype=float))


def fit_scaler(specs) -> SpectralScaler:
    """Per-channel mean/std over all (bin, frame) cells, skipping structural zeros."""
    s = np.asarray(specs, dtype=np.float64)
    if s.ndim == 3:
        s = s[None]
    if s.shape[0] == 0 or s.shape[1:] != SPEC_SHAPE:
        raise DomainError(f"need a non-empty stack of {SPEC_SHAPE} spectrograms")
    mean = np.empty(N_CHANNELS)
    std = np.empty(N_CHANNELS)
    for c in range(N_CHANNELS):
        cells = s[:, c, ~STRUCTURAL_ZERO[c], :]
        mean[c] = cells.mean()
        std[c] = cells.std()
    bad = np.flatnonzero(std < 1e-12)
    if len(bad):
        raise DegenerateError(f"zero-variance spectral channels {bad.tolist()}")
    return SpectralScaler(mean, std)


def _per_cell(values: np.ndarray, fill: float) -> np.ndarray:
    grid = np.repeat(values[:, None], N_BINS, axis=1)
    grid[STRUCTURAL_ZERO] = fill
    return grid[:, :, None]


def scale(spec: np.ndarray, scaler: SpectralScaler) -> np.ndarray:
    return (np.asarray(spec, dtype=np.float64) - _per_cell(scaler.mean, 0.0)) / _per_cell(scaler.std, 1.0)


def unscale(spec: np.ndarray, scaler: SpectralScaler) -> np.ndarray:
    return np.asarray(spec, dtype=np.float64) * _per_cell(scaler.std, 1.0) + _per_cell(scaler.mean, 0.0)
