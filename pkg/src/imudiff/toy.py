"""Synthetic 6-axis sinusoid corpus used for desk-scale checks and demos."""

from __future__ import annotations

import numpy as np

from .ingest import SAMPLE_RATE, WINDOW_LEN, Activity, RawRecording, WindowSet

CLASS_FREQS = (2.0, 4.0, 6.0, 8.0)
AXIS_GAIN = np.array([1.0, 0.8, 0.6, 1.2, 0.9, 0.5])
AXIS_PHASE = np.array([0.0, 0.5, 1.0, 1.5, 2.0, 2.5]) * np.pi / 3


def toy_signal(freq: float, n: int, rng: np.random.Generator, noise: float = 0.1) -> np.ndarray:
    """(n, 6): per-axis sinusoids at ``freq`` Hz with one random phase, plus white noise."""
    t = np.arange(n) / SAMPLE_RATE
    phase = rng.uniform(0, 2 * np.pi)
    x = AXIS_GAIN * np.sin(2 * np.pi * freq * t[:, None] + phase + AXIS_PHASE)
    return x + noise * rng.standard_normal((n, 6))


def toy_windows(label: int, n: int, rng: np.random.Generator, pid: int = 0, noise: float = 0.1) -> WindowSet:
    data = np.stack([toy_signal(CLASS_FREQS[label], WINDOW_LEN, rng, noise) for _ in range(n)])
    return WindowSet(data, np.full(n, pid), np.full(n, label), np.zeros(n, dtype=np.int64))


def toy_corpus(n_per_class: int, seed: int, pid: int = 0, noise: float = 0.1) -> WindowSet:
    rng = np.random.default_rng(seed)
    return WindowSet.concat(toy_windows(c, n_per_class, rng, pid, noise) for c in range(len(CLASS_FREQS)))


def toy_recording(pid: int, activity: Activity, n: int, rng: np.random.Generator,
                  noise: float = 0.1) -> RawRecording:
    return RawRecording(pid, activity, toy_signal(CLASS_FREQS[int(activity)], n, rng, noise))


def dominant_frequency(windows: np.ndarray) -> np.ndarray:
    """Frequency (Hz) of the strongest non-DC bin of the 160-point spectrum, power summed over axes."""
    w = np.asarray(windows, dtype=float)
    w = w - w.mean(axis=-2, keepdims=True)
    power = (np.abs(np.fft.rfft(w, axis=-2)) ** 2).sum(axis=-1)
    k = np.argmax(power[..., 1:], axis=-1) + 1
    return k * SAMPLE_RATE / w.shape[-2]


def at_class_frequency(windows: np.ndarray, label: int) -> np.ndarray:
    """True where the dominant bin is one of the two bins bracketing the class frequency."""
    spacing = SAMPLE_RATE / WINDOW_LEN
    return np.abs(dominant_frequency(windows) - CLASS_FREQS[label]) < spacing
