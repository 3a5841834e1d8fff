"""Recording parsing, windowing, per-axis standardization and LOSOCV folds."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from . import ACTIVITIES, PIDS
from .errors import (
    ConfigError,
    DegenerateError,
    DomainError,
    InsufficientDataError,
    ParseError,
    TooShortError,
)

log = logging.getLogger(__name__)

SAMPLE_RATE = 50
WINDOW_LEN = 160
SHIFT = 40
N_AXES = 6
AXIS_NAMES = ("acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z")
MIN_STD = 1e-9
STATS_VERSION = 1
MANIFEST_VERSION = 1


class Activity(IntEnum):
    Walking = 0
    Running = 1
    JumpUp = 2
    Cycling = 3

    @classmethod
    def parse(cls, value: "str | int | Activity") -> "Activity":
        if isinstance(value, str):
            try:
                return cls[value]
            except KeyError:
                raise ConfigError(f"unknown activity {value!r}; expected one of {ACTIVITIES}") from None
        return cls(int(value))


@dataclass(frozen=True)
class RawRecording:
    participant_id: int
    activity: Activity
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise DomainError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if self.samples.ndim != 2 or self.samples.shape[1] != N_AXES:
            raise DomainError(f"samples must be N x {N_AXES}, got {self.samples.shape}")
        if len(self.samples) < WINDOW_LEN:
            raise TooShortError(f"recording has {len(self.samples)} rows, need at least {WINDOW_LEN}")
        if not np.all(np.isfinite(self.samples)):
            raise DomainError("recording contains non-finite values")


@dataclass(frozen=True)
class Window:
    participant_id: int
    activity: Activity
    data: np.ndarray
    source_offset: int


@dataclass
class WindowSet:
    """Column-oriented batch of windows: data is (n, 160, 6)."""

    data: np.ndarray
    pid: np.ndarray
    label: np.ndarray
    offset: np.ndarray
    synthetic: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.data)
        if self.synthetic is None:
            self.synthetic = np.zeros(n, dtype=bool)
        for name in ("pid", "label", "offset", "synthetic"):
            if len(getattr(self, name)) != n:
                raise DomainError(f"WindowSet column {name} has wrong length")

    def __len__(self):
        return len(self.data)

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(self.data[idx], self.pid[idx], self.label[idx], self.offset[idx], self.synthetic[idx])

    @classmethod
    def from_windows(cls, windows: Sequence[Window]) -> "WindowSet":
        if not windows:
            return cls.empty()
        return cls(
            np.stack([w.data for w in windows]),
            np.array([w.participant_id for w in windows], dtype=np.int64),
            np.array([int(w.activity) for w in windows], dtype=np.int64),
            np.array([w.source_offset for w in windows], dtype=np.int64),
        )

    @classmethod
    def empty(cls) -> "WindowSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, WINDOW_LEN, N_AXES)), z, z.copy(), z.copy())

    @classmethod
    def concat(cls, sets: Iterable["WindowSet"]) -> "WindowSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            return cls.empty()
        return cls(*(np.concatenate([getattr(s, k) for s in sets])
                     for k in ("data", "pid", "label", "offset", "synthetic")))

    def to_windows(self) -> list[Window]:
        return [Window(int(p), Activity(int(y)), d, int(o))
                for d, p, y, o in zip(self.data, self.pid, self.label, self.offset)]


@dataclass(frozen=True)
class AxisStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != (N_AXES,) or self.std.shape != (N_AXES,):
            raise DomainError("AxisStats expects 6 means and 6 stds")
        bad = np.flatnonzero(~(self.std >= MIN_STD))
        if len(bad):
            raise DegenerateError(f"degenerate axes {[AXIS_NAMES[i] for i in bad]} (std < {MIN_STD})")

    def to_json(self) -> str:
        return json.dumps({"version": STATS_VERSION, "axes": list(AXIS_NAMES),
                           "mean": self.mean.tolist(), "std": self.std.tolist()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "AxisStats":
        obj = json.loads(text)
        if obj.get("version") != STATS_VERSION:
            raise ConfigError(f"unsupported AxisStats version {obj.get('version')}")
        return cls(np.array(obj["mean"], dtype=float), np.array(obj["std"], dtype=float))


@dataclass(frozen=True)
class FoldSpec:
    held_out_pid: int
    train_pids: tuple[int, ...]


def parse_recording(source: "IO[bytes] | IO[str] | bytes | str | Path", participant_id: int,
                    activity) -> RawRecording:
    """Parse whitespace-separated 6-column text, one sample per line, no header."""
    if isinstance(source, Path):
        text = source.read_bytes().decode("utf-8")
    elif isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    rows = []
    for lineno, line in enumerate(io.StringIO(text), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != N_AXES:
            raise ParseError(f"expected {N_AXES} fields, got {len(fields)}", lineno)
        try:
            row = [float(f) for f in fields]
        except ValueError:
            raise ParseError(f"non-numeric token in {line.strip()!r}", lineno) from None
        if not all(np.isfinite(row)):
            raise ParseError("non-finite value", lineno)
        rows.append(row)
    if len(rows) < WINDOW_LEN:
        raise TooShortError(f"recording has {len(rows)} rows, need at least {WINDOW_LEN}")
    return RawRecording(int(participant_id), Activity.parse(activity), np.array(rows, dtype=np.float64))


def window_count(n: int, window_len: int = WINDOW_LEN, shift: int = SHIFT) -> int:
    if n < window_len:
        return 0
    return (n - window_len) // shift + 1


def segment(recording: RawRecording, window_len: int = WINDOW_LEN, shift: int = SHIFT) -> list[Window]:
    n = len(recording.samples)
    if n < window_len:
        raise TooShortError(f"recording has {n} rows, need at least {window_len}")
    return [
        Window(recording.participant_id, recording.activity,
               recording.samples[k * shift:k * shift + window_len].copy(), k * shift)
        for k in range(window_count(n, window_len, shift))
    ]


def _as_array(windows) -> np.ndarray:
    if isinstance(windows, WindowSet):
        return windows.data
    if isinstance(windows, np.ndarray):
        return windows
    return np.stack([w.data for w in windows])


def fit_stats(windows) -> AxisStats:
    data = _as_array(windows)
    if data.size == 0:
        raise DomainError("cannot fit stats on an empty window list")
    flat = data.reshape(-1, N_AXES)
    return AxisStats(flat.mean(axis=0), flat.std(axis=0))


def _rewrap(windows, data):
    if isinstance(windows, np.ndarray):
        return data
    if isinstance(windows, WindowSet):
        return WindowSet(data, windows.pid, windows.label, windows.offset, windows.synthetic)
    return [Window(w.participant_id, w.activity, d, w.source_offset) for w, d in zip(windows, data)]


def standardize(windows, stats: AxisStats):
    return _rewrap(windows, (_as_array(windows) - stats.mean) / stats.std)


def destandardize(windows, stats: AxisStats):
    return _rewrap(windows, _as_array(windows) * stats.std + stats.mean)


def select_training_subset(windows: Sequence, n: int = 22, seed: int = 0, randomize: bool = False):
    """A contiguous run of ``n`` windows.

    The run starts at 0 unless ``randomize`` is set, in which case the start is
    drawn from ``seed``.
    """
    available = len(windows)
    if available < n:
        raise InsufficientDataError(f"need {n} windows, only {available} available")
    start = 0
    if randomize:
        start = int(np.random.default_rng(seed).integers(0, available - n + 1))
    if isinstance(windows, WindowSet):
        return windows.subset(np.arange(start, start + n))
    return list(windows[start:start + n])


def make_folds(pids: Sequence[int] = PIDS) -> list[FoldSpec]:
    pids = [int(p) for p in pids]
    if len(set(pids)) != len(pids):
        raise ConfigError(f"duplicate participant ids in {pids}")
    if len(pids) < 2:
        raise ConfigError("LOSOCV needs at least two participants")
    return [FoldSpec(p, tuple(q for q in pids if q != p)) for p in pids]


@dataclass(frozen=True)
class ManifestEntry:
    participant_id: int
    activity: Activity
    path: Path


def load_manifest(path: "str | Path", pids: Sequence[int] = PIDS) -> list[ManifestEntry]:
    """Load a JSON manifest and check it covers the full (PID, activity) grid.

    Participants outside ``pids`` are dropped; missing pairs for retained
    participants raise a ConfigError that lists all of them.
    """
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
    if obj.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise ConfigError(f"unsupported manifest version {obj.get('version')}")
    if obj.get("sample_rate", SAMPLE_RATE) != SAMPLE_RATE:
        raise ConfigError(f"manifest sample_rate must be {SAMPLE_RATE}")
    wanted = set(int(p) for p in pids)
    entries: dict[tuple[int, Activity], ManifestEntry] = {}
    for rec in obj.get("recordings", []):
        pid = int(rec["pid"])
        act = Activity.parse(rec["activity"])
        if pid not in wanted:
            log.info("dropping participant %d (not in the retained PID set)", pid)
            continue
        if (pid, act) in entries:
            raise ConfigError(f"duplicate manifest entry for pid {pid}, {act.name}")
        p = Path(rec["path"])
        entries[(pid, act)] = ManifestEntry(pid, act, p if p.is_absolute() else path.parent / p)
    missing = [(p, a.name) for p in sorted(wanted) for a in Activity if (p, a) not in entries]
    if missing:
        raise ConfigError("manifest incomplete; missing (pid, activity) pairs: "
                          + ", ".join(f"({p}, {a})" for p, a in missing))
    absent = [str(e.path) for e in entries.values() if not e.path.exists()]
    if absent:
        raise ConfigError(f"manifest references missing files: {absent}")
    return sorted(entries.values(), key=lambda e: (e.participant_id, int(e.activity)))


def write_manifest(path: "str | Path", entries: Iterable[tuple[int, "Activity | str", "str | Path"]]):
    recs = [{"pid": int(p), "activity": Activity.parse(a).name, "path": str(f)} for p, a, f in entries]
    Path(path).write_text(json.dumps({"version": MANIFEST_VERSION, "sample_rate": SAMPLE_RATE,
                                      "recordings": recs}, indent=2))


def format_recording(samples: np.ndarray) -> str:
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in samples)
