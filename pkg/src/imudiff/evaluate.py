"""LOSOCV harness for the three classifier variants, the synthetic sweep, and feature export."""

from __future__ import annotations

import io
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .classify import N_CLASSES, ClassifierConfig, ClassMetrics, aggregate_confusions, predict
from .errors import ConfigError, DomainError
from .ingest import FoldSpec, WindowSet, fit_stats, select_training_subset, standardize
from .seeding import derive_rng, derive_seed
from .train import train_classifier

log = logging.getLogger(__name__)

POOL_SIZE = 3840
SUBSET_SIZE = 22


class Variant(str, Enum):
    TwoSample = "TwoSample"
    FullSet = "FullSet"
    TwoSampleFullSynth = "TwoSampleFullSynth"


@dataclass(frozen=True)
class VariantSpec:
    name: Variant
    real_fraction: float = 1.0
    synthetic_fraction: float = 0.0

    @classmethod
    def of(cls, name: "Variant | str") -> "VariantSpec":
        v = Variant(name)
        if v is Variant.FullSet:
            return cls(v, real_fraction=0.8)
        if v is Variant.TwoSampleFullSynth:
            return cls(v, synthetic_fraction=1.0)
        return cls(v)


@dataclass
class SyntheticPool:
    """Generated windows (physical units) for one (fold, class), in generation order."""

    held_out_pid: int
    label: int
    data: np.ndarray
    source_pids: tuple[int, ...]


@dataclass
class FoldSets:
    fold: FoldSpec
    diffusion_idx: dict[int, np.ndarray]
    two_sample_val_idx: np.ndarray
    full_train_idx: np.ndarray
    full_val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def two_sample_idx(self) -> np.ndarray:
        return np.concatenate([self.diffusion_idx[c] for c in sorted(self.diffusion_idx)])


def subset_per_participant(n_pids: int, total: int = SUBSET_SIZE) -> list[int]:
    """Split ``total`` windows over participants as evenly as possible (2 each for 11)."""
    base, extra = divmod(total, n_pids)
    return [base + (i < extra) for i in range(n_pids)]


def build_fold_sets(dataset: WindowSet, fold: FoldSpec, seed: int, subset_size: int = SUBSET_SIZE,
                    random_offset: bool = False, full_val_fraction: float = 0.2) -> FoldSets:
    """Index sets for one fold; every index refers to ``dataset``.

    The per-class diffusion subset takes a contiguous run from each training
    participant's recording; the TwoSample validation draws ``subset_size`` more
    per class from the remaining training windows.
    """
    train_pids = sorted(fold.train_pids)
    diffusion_idx = {}
    val_idx = []
    full_train, full_val = [], []
    counts = subset_per_participant(len(train_pids), subset_size)
    for c in range(N_CLASSES):
        chosen = []
        for pid, n in zip(train_pids, counts):
            idx = np.flatnonzero((dataset.pid == pid) & (dataset.label == c))
            idx = idx[np.argsort(dataset.offset[idx], kind="stable")]
            if n:
                chosen.append(select_training_subset(idx, n, derive_seed(seed, "subset", fold.held_out_pid, pid, c),
                                                     randomize=random_offset))
        diffusion_idx[c] = np.concatenate(chosen).astype(np.int64)
        pool = np.flatnonzero(np.isin(dataset.pid, train_pids) & (dataset.label == c))
        rest = np.setdiff1d(pool, diffusion_idx[c])
        if len(rest) < subset_size:
            raise ConfigError(f"fold {fold.held_out_pid}: only {len(rest)} validation windows for class {c}")
        rng = derive_rng(seed, "val", fold.held_out_pid, c)
        val_idx.append(np.sort(rng.choice(rest, subset_size, replace=False)))
        perm = derive_rng(seed, "fullset", fold.held_out_pid, c).permutation(pool)
        n_val = int(round(full_val_fraction * len(pool)))
        full_val.append(np.sort(perm[:n_val]))
        full_train.append(np.sort(perm[n_val:]))
    test_idx = np.flatnonzero(dataset.pid == fold.held_out_pid)
    return FoldSets(fold, diffusion_idx, np.concatenate(val_idx), np.concatenate(full_train),
                    np.concatenate(full_val), test_idx)


def audit_fold(dataset: WindowSet, sets: FoldSets, pools: Sequence[SyntheticPool] = ()):
    """Raise if the held-out participant leaks into any training or validation set."""
    held = sets.fold.held_out_pid
    for name in ("two_sample_idx", "two_sample_val_idx", "full_train_idx", "full_val_idx"):
        idx = getattr(sets, name)
        if np.any(dataset.pid[idx] == held):
            raise DomainError(f"fold {held}: held-out participant found in {name}")
    if np.any(dataset.pid[sets.test_idx] != held):
        raise DomainError(f"fold {held}: test set contains other participants")
    for pool in pools:
        if held in pool.source_pids or pool.held_out_pid != held:
            raise DomainError(f"fold {held}: synthetic pool for class {pool.label} was built from held-out data")


def synthetic_count(fraction_step: int, pool_size: int = POOL_SIZE, grid: int = 100) -> int:
    """round(step / grid * pool_size) with halves rounded up, in exact integer arithmetic."""
    return (2 * fraction_step * pool_size + grid) // (2 * grid)


def synthetic_windows(pools: dict, held_out_pid: int, count: int) -> WindowSet:
    sets = []
    for c in range(N_CLASSES):
        pool = pools.get((held_out_pid, c))
        if pool is None:
            raise ConfigError(f"missing synthetic pool for fold {held_out_pid}, class {c}")
        if len(pool.data) < count:
            raise ConfigError(f"synthetic pool for fold {held_out_pid}, class {c} has {len(pool.data)} "
                              f"windows, need {count}")
        sets.append(WindowSet(pool.data[:count], np.zeros(count, dtype=np.int64), np.full(count, c),
                              np.arange(count), np.ones(count, dtype=bool)))
    return WindowSet.concat(sets)


@dataclass
class TrainingSets:
    train: WindowSet
    val: WindowSet
    test: WindowSet


def variant_sets(dataset: WindowSet, sets: FoldSets, variant: VariantSpec, pools: dict | None = None,
                 n_synthetic: int | None = None) -> TrainingSets:
    """Standardized train/val/test sets; stats are fit on the variant's real training windows."""
    if variant.name is Variant.FullSet:
        real, val = dataset.subset(sets.full_train_idx), dataset.subset(sets.full_val_idx)
    else:
        real, val = dataset.subset(sets.two_sample_idx), dataset.subset(sets.two_sample_val_idx)
    train = real
    if variant.name is Variant.TwoSampleFullSynth:
        if n_synthetic is None:
            n_synthetic = int(round(variant.synthetic_fraction * POOL_SIZE))
        train = WindowSet.concat([real, synthetic_windows(pools or {}, sets.fold.held_out_pid, n_synthetic)])
    stats = fit_stats(real)
    return TrainingSets(standardize(train, stats), standardize(val, stats),
                        standardize(dataset.subset(sets.test_idx), stats))


TrainFn = Callable[..., tuple]


def fit_and_score(ts: TrainingSets, cfg: ClassifierConfig, train_fn: TrainFn = train_classifier) -> dict:
    model, trace = train_fn(ts.train.data, ts.train.label, ts.val.data, ts.val.label, cfg)
    val_pred = predict(model, ts.val.data) if len(ts.val) else np.zeros(0, dtype=np.int64)
    test_metrics = ClassMetrics.from_labels(ts.test.label, predict(model, ts.test.data))
    val_f1 = ClassMetrics.from_labels(ts.val.label, val_pred).macro_f1 if len(ts.val) else float("nan")
    return {"test": test_metrics, "val_f1": val_f1, "n_train": len(ts.train),
            "n_synthetic": int(ts.train.synthetic.sum()), "n_val": len(ts.val), "n_test": len(ts.test),
            "trace": trace.to_dict() if hasattr(trace, "to_dict") else None}


@dataclass
class LosocvResult:
    variant: str
    folds: list[dict] = field(default_factory=list)

    @property
    def macro_f1(self) -> list[float]:
        return [f["test"].macro_f1 for f in self.folds]

    def aggregate(self) -> dict:
        agg = aggregate_confusions([f["test"].confusion_matrix for f in self.folds])
        return {"mean_macro_f1": float(np.mean(self.macro_f1)), "confusion_mean": agg["mean"].tolist(),
                "confusion_std": agg["std"].tolist(), "confusion_affected": agg["affected"].tolist(),
                "folds": agg["folds"]}

    def to_dict(self) -> dict:
        folds = [{**{k: v for k, v in f.items() if k != "test"}, "test": f["test"].to_dict()} for f in self.folds]
        return {"variant": self.variant, "folds": folds, "aggregate": self.aggregate()}


def run_losocv(dataset: WindowSet, variant: "VariantSpec | str", folds: Sequence[FoldSpec], seed: int,
               classifier: ClassifierConfig | None = None, pools: dict | None = None,
               train_fn: TrainFn = train_classifier, subset_size: int = SUBSET_SIZE,
               random_offset: bool = False, pool_size: int = POOL_SIZE) -> LosocvResult:
    variant = variant if isinstance(variant, VariantSpec) else VariantSpec.of(variant)
    classifier = classifier or ClassifierConfig()
    result = LosocvResult(variant.name.value)
    for fold in folds:
        sets = build_fold_sets(dataset, fold, seed, subset_size, random_offset)
        fold_pools = []
        if variant.name is Variant.TwoSampleFullSynth:
            for c in range(N_CLASSES):
                if (fold.held_out_pid, c) not in (pools or {}):
                    raise ConfigError(f"missing synthetic pool for fold {fold.held_out_pid}, class {c}")
                fold_pools.append(pools[(fold.held_out_pid, c)])
        audit_fold(dataset, sets, fold_pools)
        ts = variant_sets(dataset, sets, variant, pools, int(round(variant.synthetic_fraction * pool_size)))
        cfg = replace(classifier, seed=derive_seed(seed, "classifier", variant.name.value, fold.held_out_pid) % 2**31)
        scored = fit_and_score(ts, cfg, train_fn)
        scored["pid"] = fold.held_out_pid
        log.info("%s fold %d: macro-F1 %.3f", variant.name.value, fold.held_out_pid, scored["test"].macro_f1)
        result.folds.append(scored)
    return result


@dataclass
class SweepPoint:
    fraction: float
    per_class: int
    folds: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def sweep_grid(grid: int = 100) -> list[int]:
    return list(range(1, grid + 1))


def run_sweep(dataset: WindowSet, folds: Sequence[FoldSpec], pools: dict, seed: int,
              classifier: ClassifierConfig | None = None, train_fn: TrainFn = train_classifier,
              grid: int = 100, pool_size: int = POOL_SIZE, subset_size: int = SUBSET_SIZE,
              random_offset: bool = False) -> list[SweepPoint]:
    """Retrain from scratch at each fraction k/grid using the first round(k/grid * pool_size)
    synthetic windows per class, so every point's synthetic set extends the previous one."""
    classifier = classifier or ClassifierConfig()
    points = [SweepPoint(k / grid, synthetic_count(k, pool_size, grid)) for k in sweep_grid(grid)]
    variant = VariantSpec.of(Variant.TwoSampleFullSynth)
    for fold in folds:
        sets = build_fold_sets(dataset, fold, seed, subset_size, random_offset)
        audit_fold(dataset, sets, [pools[(fold.held_out_pid, c)] for c in range(N_CLASSES)
                                   if (fold.held_out_pid, c) in pools])
        for k, point in zip(sweep_grid(grid), points):
            ts = variant_sets(dataset, sets, variant, pools, point.per_class)
            cfg = replace(classifier, seed=derive_seed(seed, "sweep", fold.held_out_pid, k) % 2**31)
            scored = fit_and_score(ts, cfg, train_fn)
            point.folds.append({"pid": fold.held_out_pid, "val_f1": scored["val_f1"],
                                "test_f1": scored["test"].macro_f1, "n_synthetic": scored["n_synthetic"]})
    return points


def sweep_table(points: Sequence[SweepPoint]) -> str:
    lines = ["fraction\tfold\tper_class\tval_f1\ttest_f1"]
    for p in points:
        for f in p.folds:
            lines.append(f"{p.fraction:.2f}\t{f['pid']}\t{p.per_class}\t{f['val_f1']:.6f}\t{f['test_f1']:.6f}")
    return "\n".join(lines) + "\n"


FEATURE_COLUMNS = [f"t{t}_{a}" for t in range(160) for a in range(6)] + ["pid", "label", "synthetic"]


def export_features(windows: WindowSet, path: "str | Path | None" = None) -> str:
    """One row per window: 960 flattened values (time-major) then pid, label, synthetic flag."""
    n = len(windows)
    mat = np.column_stack([windows.data.reshape(n, -1), windows.pid, windows.label,
                           windows.synthetic.astype(np.int64)]) if n else np.zeros((0, len(FEATURE_COLUMNS)))
    buf = io.StringIO()
    np.savetxt(buf, mat, fmt="%.17g", delimiter="\t", header="\t".join(FEATURE_COLUMNS), comments="")
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_features(source: "str | Path") -> WindowSet:
    text = Path(source).read_text() if isinstance(source, Path) else source
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    mat = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter="\t", ndmin=2)
    if mat.shape[1] != len(FEATURE_COLUMNS):
        raise DomainError(f"expected {len(FEATURE_COLUMNS)} columns, got {mat.shape[1]}")
    n = len(mat)
    return WindowSet(mat[:, :960].reshape(n, 160, 6), mat[:, 960].astype(np.int64),
                     mat[:, 961].astype(np.int64), np.zeros(n, dtype=np.int64), mat[:, 962].astype(bool))
