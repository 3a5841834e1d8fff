"""Small builders shared by the harness and acceptance tests."""

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from imudiff import PIDS
from imudiff.classify import N_CLASSES
from imudiff.evaluate import SyntheticPool
from imudiff.ingest import Activity, WindowSet, format_recording, write_manifest
from imudiff.toy import CLASS_FREQS, toy_recording, toy_windows


def stub_dataset(pids=PIDS, per_class=10, seed=0) -> WindowSet:
    rng = np.random.default_rng(seed)
    sets = []
    for pid in pids:
        for c in range(N_CLASSES):
            ws = toy_windows(c, per_class, rng, pid=pid)
            ws.offset[:] = np.arange(per_class) * 40
            sets.append(ws)
    return WindowSet.concat(sets)


def stub_pools(folds, pool_size, seed=0) -> dict:
    rng = np.random.default_rng(seed)
    pools = {}
    for f in folds:
        for c in range(N_CLASSES):
            data = toy_windows(c, pool_size, rng).data
            pools[(f.held_out_pid, c)] = SyntheticPool(f.held_out_pid, c, data, tuple(f.train_pids))
    return pools


class FrequencyModel(torch.nn.Module):
    """Stand-in classifier: picks the toy class whose frequency carries the most power."""

    def forward(self, x):
        spec = torch.fft.rfft(x - x.mean(dim=1, keepdim=True), dim=1).abs().pow(2).sum(-1)
        freqs = torch.fft.rfftfreq(x.shape[1], d=1 / 50)
        bins = [int(torch.argmin((freqs - f).abs())) for f in CLASS_FREQS]
        return spec[:, bins].log1p().to(torch.float64)


def stub_train_fn(calls=None, model=None):
    """Training stub that records what it was given and returns a fixed model."""

    def fn(train_x, train_y, val_x, val_y, cfg):
        if calls is not None:
            calls.append({"train_x": train_x, "train_y": np.asarray(train_y), "val_y": np.asarray(val_y),
                          "seed": cfg.seed})
        return (model or FrequencyModel()), None

    return fn


PIDS3 = [1, 2, 3]
MICRO = {
    "pids": PIDS3,
    "diffusion": {"epochs": 1, "T": 4,
                  "unet": {"base_channels": 8, "attention_heads": 2, "norm_groups": 4, "embedding_dim": 16}},
    "synthesis": {"batch_size": 4, "n_batches": 2},
    "classifier": {"epochs": 1, "conv_channels": [4, 8, 8], "hidden": [16, 8]},
    "sweep_grid": 2,
    "cluster": {"k": 3, "max_iter": 2, "dba_iter": 2},
}


def make_workspace(root: Path, skip=None, config=MICRO):
    rng = np.random.default_rng(0)
    data = root / "data"
    data.mkdir(parents=True, exist_ok=True)
    entries = []
    for pid in PIDS3:
        for a in Activity:
            if (pid, a) == skip:
                continue
            p = data / f"p{pid}_{a.name}.txt"
            p.write_text(format_recording(toy_recording(pid, a, 1400, rng).samples))
            entries.append((pid, a, f"data/{p.name}"))
    write_manifest(root / "manifest.json", entries)
    (root / "cfg.json").write_text(json.dumps({**config, "manifest": "manifest.json"}))
    return root / "cfg.json"


def digests(out: Path) -> dict:
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != "ledger.jsonl"}


