"""Pipeline stages with content-digest caching and an append-only run ledger.

Stage DAG: ingest -> train-diffusion -> synthesize -> evaluate / sweep.
``cluster`` and ``export-features`` need ingest, and synthesis when synthetic
windows are requested.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__, container
from .classify import format_confusion
from .cluster import kmeans_dtw
from .config import ExperimentConfig
from .diffusion import sample
from .errors import ConfigError, StageOrderError
from .evaluate import (
    SyntheticPool,
    Variant,
    VariantSpec,
    build_fold_sets,
    export_features,
    run_losocv,
    run_sweep,
    sweep_table,
)
from .ingest import (
    Activity,
    AxisStats,
    FoldSpec,
    WindowSet,
    destandardize,
    fit_stats,
    load_manifest,
    make_folds,
    parse_recording,
    segment,
    standardize,
)
from .network import DenoiserModel, UNetConfig
from .seeding import derive_seed
from .spectral import SpectralScaler, istft, unscale, zero_structural
from .train import train_diffusion

log = logging.getLogger(__name__)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


class Ledger:
    """Append-only JSON-lines record of completed stage tasks."""

    def __init__(self, out: Path):
        self.path = Path(out) / "ledger.jsonl"

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def lookup(self, stage: str, key: str, inputs: str, config: str) -> dict | None:
        out_dir = self.path.parent
        for e in reversed(self.entries()):
            if (e["stage"], e["key"], e["inputs_digest"], e["config_digest"]) != (stage, key, inputs, config):
                continue
            if all((out_dir / p).exists() and sha256_file(out_dir / p) == h for p, h in e["outputs"].items()):
                return e
        return None

    def append(self, stage: str, key: str, inputs: str, config: str, outputs: list[Path], seconds: float):
        out_dir = self.path.parent
        rec = {"stage": stage, "key": key, "inputs_digest": inputs, "config_digest": config,
               "outputs": {str(Path(p).relative_to(out_dir)): sha256_file(p) for p in outputs},
               "seconds": round(seconds, 3), "version": __version__}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as f:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec


class Pipeline:
    def __init__(self, config: ExperimentConfig, jobs: int = 1):
        self.raw_config = config
        self.cfg = config.effective()
        self.out = Path(config.out)
        self.jobs = max(1, int(jobs))
        self.ledger = Ledger(self.out)
        self.config_digest = config.digest()

    # provenance -----------------------------------------------------------
    def provenance(self, **extra) -> dict:
        return {"config_digest": self.config_digest, "seed": self.cfg.seed, "version": __version__, **extra}

    def _cached(self, stage, key, inputs) -> bool:
        hit = self.ledger.lookup(stage, key, inputs, self.config_digest)
        if hit:
            log.info("%s[%s]: up to date, skipped", stage, key)
        return hit is not None

    def stamp(self, text: str, **extra) -> str:
        """Add a provenance block to a JSON document."""
        obj = json.loads(text)
        obj["provenance"] = self.provenance(**extra)
        return json.dumps(obj, indent=2, sort_keys=True)

    def _record(self, stage, key, inputs, outputs, t0):
        self.ledger.append(stage, key, inputs, self.config_digest, outputs, time.perf_counter() - t0)

    # paths ----------------------------------------------------------------
    def window_path(self, pid, act: Activity) -> Path:
        return self.out / "ingest" / "windows" / f"p{pid:02d}_{act.name}.bin"

    def model_dir(self, fold_pid, act: Activity) -> Path:
        return self.out / "diffusion" / f"fold_{fold_pid:02d}" / act.name

    def pool_path(self, fold_pid, act: Activity) -> Path:
        return self.out / "synthetic" / f"fold_{fold_pid:02d}" / f"{act.name}.bin"

    def report_dir(self) -> Path:
        return self.out / "reports"

    # ingest ---------------------------------------------------------------
    def ingest(self) -> dict:
        entries = load_manifest(self.raw_config.manifest, self.cfg.pids)
        digest = hashlib.sha256()
        for e in entries:
            digest.update(f"{e.participant_id}:{e.activity.name}:".encode())
            digest.update(e.path.read_bytes())
        inputs = digest.hexdigest()
        if self._cached("ingest", "all", inputs):
            return json.loads((self.out / "ingest" / "summary.json").read_text())
        t0 = time.perf_counter()
        # parse everything before writing anything
        windows = {}
        for e in entries:
            rec = parse_recording(e.path, e.participant_id, e.activity)
            windows[(e.participant_id, e.activity)] = WindowSet.from_windows(segment(rec))
        outputs = []
        counts = {}
        for (pid, act), ws in windows.items():
            p = self.window_path(pid, act)
            container.save(p, self.provenance(pid=pid, activity=act.name, kind="windows"),
                           {"data": ws.data, "offset": ws.offset})
            s = self.out / "ingest" / "stats" / f"p{pid:02d}_{act.name}.json"
            container.atomic_write(s, self.stamp(fit_stats(ws).to_json(), pid=pid, activity=act.name))
            outputs += [p, s]
            counts.setdefault(str(pid), {})[act.name] = len(ws)
        for fold in make_folds(self.cfg.pids):
            p = self.out / "ingest" / "folds" / f"fold_{fold.held_out_pid:02d}.json"
            container.atomic_write(p, json.dumps({"held_out_pid": fold.held_out_pid,
                                                  "train_pids": list(fold.train_pids),
                                                  "provenance": self.provenance()}, indent=2))
            outputs.append(p)
        summary = {"windows_per_pid_class": counts, "provenance": self.provenance()}
        p = self.out / "ingest" / "summary.json"
        container.atomic_write(p, json.dumps(summary, indent=2, sort_keys=True))
        outputs.append(p)
        self._record("ingest", "all", inputs, outputs, t0)
        return summary

    def _ingest_digest(self) -> str:
        p = self.out / "ingest" / "summary.json"
        if not p.exists():
            raise StageOrderError(f"no ingest outputs under {self.out}; run `imudiff ingest` first")
        return hashlib.sha256(b"".join(
            sha256_file(f).encode() for f in sorted((self.out / "ingest" / "windows").glob("*.bin")))).hexdigest()

    def dataset(self) -> WindowSet:
        self._ingest_digest()
        sets = []
        for pid in self.cfg.pids:
            for act in Activity:
                p = self.window_path(pid, act)
                if not p.exists():
                    raise StageOrderError(f"missing ingest output {p}; rerun `imudiff ingest`")
                _, t = container.load(p)
                n = len(t["data"])
                sets.append(WindowSet(t["data"], np.full(n, pid), np.full(n, int(act)), t["offset"]))
        return WindowSet.concat(sets)

    def folds(self, only: list[int] | None = None) -> list[FoldSpec]:
        folds = make_folds(self.cfg.pids)
        if only:
            unknown = set(only) - set(self.cfg.pids)
            if unknown:
                raise ConfigError(f"unknown fold participant ids {sorted(unknown)}")
            folds = [f for f in folds if f.held_out_pid in only]
        return folds

    # diffusion ------------------------------------------------------------
    def _tasks(self, folds, activities):
        acts = [Activity.parse(a) for a in activities] if activities else list(Activity)
        return [(f, a) for f in self.folds(folds) for a in acts]

    def train_diffusion(self, folds=None, activities=None) -> list[Path]:
        inputs = self._ingest_digest()
        dataset = self.dataset()
        todo = []
        for fold, act in self._tasks(folds, activities):
            key = f"fold{fold.held_out_pid}/{act.name}"
            if not self._cached("train-diffusion", key, inputs):
                todo.append((fold, act, key))
        results = self._map(_train_task, [(self.raw_config, self.jobs, dataset, f, a) for f, a, _ in todo])
        for (fold, act, key), (outputs, seconds) in zip(todo, results):
            self.ledger.append("train-diffusion", key, inputs, self.config_digest, outputs, seconds)
        return [self.model_dir(f.held_out_pid, a) / "model.bin" for f, a in self._tasks(folds, activities)]

    def _train_one(self, dataset: WindowSet, fold: FoldSpec, act: Activity):
        t0 = time.perf_counter()
        sets = build_fold_sets(dataset, fold, self.cfg.seed, self.cfg.subset_size, self.cfg.random_subset_offset)
        subset = dataset.subset(sets.diffusion_idx[int(act)])
        stats = fit_stats(subset)
        dcfg = replace(self.cfg.diffusion, seed=derive_seed(self.cfg.seed, "diffusion", fold.held_out_pid,
                                                            act.name) % 2**31)
        torch.set_num_threads(1)
        result = train_diffusion(standardize(subset.data, stats), dcfg)
        d = self.model_dir(fold.held_out_pid, act)
        meta = self.provenance(kind="denoiser", fold=fold.held_out_pid, activity=act.name,
                               unet=dcfg.unet.to_dict(), T=dcfg.T, dtype=dcfg.dtype,
                               source_pids=sorted(set(subset.pid.tolist())),
                               schedule=json.loads(dcfg.schedule().to_json()))
        container.save_model(d / "model.bin", result.model, meta)
        container.atomic_write(d / "stats.json", self.stamp(stats.to_json()))
        container.atomic_write(d / "scaler.json", self.stamp(result.scaler.to_json()))
        container.atomic_write(d / "schedule.json", self.stamp(dcfg.schedule().to_json()))
        container.atomic_write(d / "loss.tsv", "# " + json.dumps(self.provenance()) + "\nepoch\tloss\n"
                               + "".join(f"{i}\t{v!r}\n" for i, v in enumerate(result.losses, 1)))
        outputs = [d / n for n in ("model.bin", "stats.json", "scaler.json", "schedule.json", "loss.tsv")]
        return outputs, time.perf_counter() - t0

    def load_denoiser(self, fold_pid, act: Activity):
        d = self.model_dir(fold_pid, act)
        if not (d / "model.bin").exists():
            raise StageOrderError(f"missing checkpoint {d / 'model.bin'}; run `imudiff train-diffusion` first")
        meta, state = container.load_state(d / "model.bin")
        model = DenoiserModel(UNetConfig(**meta["unet"]), T=meta["T"]).to(getattr(torch, meta["dtype"]))
        model.load_state_dict(state)
        model.eval()
        stats = AxisStats.from_json((d / "stats.json").read_text())
        scaler = SpectralScaler.from_json((d / "scaler.json").read_text())
        return model, stats, scaler, meta

    # synthesis ------------------------------------------------------------
    def synthesize(self, folds=None, activities=None) -> list[Path]:
        todo = []
        for fold, act in self._tasks(folds, activities):
            ck = self.model_dir(fold.held_out_pid, act) / "model.bin"
            if not ck.exists():
                raise StageOrderError(f"missing checkpoint {ck}; run `imudiff train-diffusion` first")
            inputs = sha256_file(ck)
            key = f"fold{fold.held_out_pid}/{act.name}"
            if not self._cached("synthesize", key, inputs):
                todo.append((fold, act, key, inputs))
        results = self._map(_synth_task, [(self.raw_config, self.jobs, f, a) for f, a, _, _ in todo])
        for (fold, act, key, inputs), (outputs, seconds) in zip(todo, results):
            self.ledger.append("synthesize", key, inputs, self.config_digest, outputs, seconds)
        return [self.pool_path(f.held_out_pid, a) for f, a in self._tasks(folds, activities)]

    def _synth_one(self, fold: FoldSpec, act: Activity):
        t0 = time.perf_counter()
        torch.set_num_threads(1)
        model, stats, scaler, meta = self.load_denoiser(fold.held_out_pid, act)
        syn = self.cfg.synthesis
        schedule = self.cfg.diffusion.schedule()
        root = derive_seed(self.cfg.seed, "synthesize", fold.held_out_pid, act.name)
        specs = []
        for b in range(syn.n_batches):
            specs.append(sample(model, syn.batch_size, schedule, root, first_chain=b * syn.batch_size,
                                batch_size=syn.batch_size))
            log.info("fold %d %s: batch %d/%d", fold.held_out_pid, act.name, b + 1, syn.n_batches)
        specs = np.concatenate(specs)
        windows = destandardize(istft(zero_structural(unscale(specs, scaler))), stats)
        p = self.pool_path(fold.held_out_pid, act)
        container.save(p, self.provenance(kind="synthetic_pool", fold=fold.held_out_pid, activity=act.name,
                                          source_pids=meta["source_pids"], batch_size=syn.batch_size,
                                          n_batches=syn.n_batches),
                       {"data": windows, "index": np.arange(len(windows))})
        return [p], time.perf_counter() - t0

    def pools(self, folds: list[FoldSpec]) -> dict:
        pools = {}
        for fold in folds:
            for act in Activity:
                p = self.pool_path(fold.held_out_pid, act)
                if not p.exists():
                    raise StageOrderError(f"missing synthetic pool {p}; run `imudiff synthesize` first")
                meta, t = container.load(p)
                pools[(fold.held_out_pid, int(act))] = SyntheticPool(
                    fold.held_out_pid, int(act), t["data"], tuple(meta["source_pids"]))
        return pools

    # evaluation -----------------------------------------------------------
    def evaluate(self, folds=None, variants=None) -> Path:
        dataset = self.dataset()
        fold_list = self.folds(folds)
        names = variants or list(self.cfg.variants)
        pools = self.pools(fold_list) if Variant.TwoSampleFullSynth.value in names else None
        report = {"provenance": self.provenance(), "variants": {}}
        tables = []
        for name in names:
            spec = VariantSpec.of(name)
            res = run_losocv(dataset, spec, fold_list, self.cfg.seed, self.cfg.classifier, pools,
                             subset_size=self.cfg.subset_size, random_offset=self.cfg.random_subset_offset,
                             pool_size=self.cfg.synthesis.pool_size)
            report["variants"][name] = res.to_dict()
            agg = res.aggregate()
            tables.append(f"== {name} ==\nmean macro-F1 {agg['mean_macro_f1']:.4f}\n"
                          + "\n".join(f"pid {f['pid']}: {f['test'].macro_f1:.4f}" for f in res.folds)
                          + "\nconfusion mean (affected folds)\n"
                          + format_confusion([[f"{m:.2f}±{s:.2f}({a})" for m, s, a in zip(mr, sr, ar)]
                                              for mr, sr, ar in zip(agg["confusion_mean"], agg["confusion_std"],
                                                                    agg["confusion_affected"])]) + "\n")
        p = self.report_dir() / "evaluate.json"
        container.atomic_write(p, json.dumps(report, indent=2, sort_keys=True))
        container.atomic_write(self.report_dir() / "evaluate.txt",
                               "# " + json.dumps(self.provenance()) + "\n" + "\n".join(tables))
        return p

    def sweep(self, folds=None) -> Path:
        dataset = self.dataset()
        fold_list = self.folds(folds)
        pools = self.pools(fold_list)
        points = run_sweep(dataset, fold_list, pools, self.cfg.seed, self.cfg.classifier,
                           grid=self.cfg.sweep_grid, pool_size=self.cfg.synthesis.pool_size,
                           subset_size=self.cfg.subset_size, random_offset=self.cfg.random_subset_offset)
        p = self.report_dir() / "sweep.tsv"
        container.atomic_write(p, "# " + json.dumps(self.provenance()) + "\n" + sweep_table(points))
        container.atomic_write(self.report_dir() / "sweep.json",
                               json.dumps({"provenance": self.provenance(),
                                           "points": [pt.to_dict() for pt in points]}, indent=2))
        return p

    def cluster(self, fold_pid: int, activity, axis: int, source: str = "both", k: int | None = None) -> Path:
        if source not in ("real", "synthetic", "both"):
            raise ConfigError("source must be real, synthetic or both")
        act = Activity.parse(activity)
        if not 0 <= axis < 6:
            raise ConfigError("axis must be in [0, 6)")
        dataset = self.dataset()
        fold = self.folds([fold_pid])[0]
        sets = build_fold_sets(dataset, fold, self.cfg.seed, self.cfg.subset_size, self.cfg.random_subset_offset)
        real = dataset.subset(sets.full_train_idx)
        stats = fit_stats(real)
        parts = []
        if source in ("real", "both"):
            parts.append(real.subset(np.flatnonzero(real.label == int(act))))
            parts.append(dataset.subset(sets.test_idx[dataset.label[sets.test_idx] == int(act)]))
        if source in ("synthetic", "both"):
            pool = self.pools([fold])[(fold_pid, int(act))]
            n = len(pool.data)
            parts.append(WindowSet(pool.data, np.zeros(n, dtype=np.int64), np.full(n, int(act)),
                                   np.arange(n), np.ones(n, dtype=bool)))
        ws = standardize(WindowSet.concat(parts), stats)
        k = k or self.cfg.cluster.k
        res = kmeans_dtw(ws.data[:, :, axis], k, derive_seed(self.cfg.seed, "cluster", fold_pid, act.name, axis),
                         self.cfg.cluster.max_iter, self.cfg.cluster.dba_iter)
        d = self.out / "clusters" / f"fold_{fold_pid:02d}" / act.name / f"axis{axis}_{source}"
        head = "# " + json.dumps(self.provenance(k=k, inertia=res.inertia)) + "\n"
        container.atomic_write(d / "assignments.tsv", head + "pid\tsynthetic\theld_out\tcluster\n" + "".join(
            f"{p}\t{int(s)}\t{int(p == fold_pid and not s)}\t{c}\n"
            for p, s, c in zip(ws.pid, ws.synthetic, res.assignments)))
        container.atomic_write(d / "centers.tsv", head + "".join(
            "\t".join(repr(float(v)) for v in c) + "\n" for c in res.centers))
        return d

    def export(self, fold_pid: int | None = None, synthetic: bool = False) -> Path:
        dataset = self.dataset()
        parts = [dataset]
        if synthetic:
            folds = self.folds([fold_pid] if fold_pid else None)
            for pool in self.pools(folds).values():
                n = len(pool.data)
                parts.append(WindowSet(pool.data, np.zeros(n, dtype=np.int64), np.full(n, pool.label),
                                       np.arange(n), np.ones(n, dtype=bool)))
        ws = WindowSet.concat(parts)
        stats = fit_stats(dataset)
        name = f"features_fold{fold_pid:02d}.tsv" if fold_pid else "features.tsv"
        p = self.out / "features" / name
        container.atomic_write(p, "# " + json.dumps(self.provenance()) + "\n"
                               + export_features(standardize(ws, stats)))
        return p

    def _map(self, fn, args):
        if self.jobs > 1 and len(args) > 1:
            with ProcessPoolExecutor(self.jobs) as ex:
                return list(ex.map(fn, args))
        return [fn(a) for a in args]


def _train_task(args):
    cfg, jobs, dataset, fold, act = args
    return Pipeline(cfg, jobs)._train_one(dataset, fold, act)


def _synth_task(args):
    cfg, jobs, fold, act = args
    return Pipeline(cfg, jobs)._synth_one(fold, act)
