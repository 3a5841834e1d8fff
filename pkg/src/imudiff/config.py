"""Experiment configuration, the desk profile and config digests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import PIDS
from .classify import ClassifierConfig
from .errors import ConfigError
from .evaluate import Variant
from .train import DiffusionTrainConfig


@dataclass(frozen=True)
class SynthesisConfig:
    batch_size: int = 128
    n_batches: int = 30

    @property
    def pool_size(self) -> int:
        return self.batch_size * self.n_batches


@dataclass(frozen=True)
class ClusterConfig:
    k: int = 20
    max_iter: int = 10
    dba_iter: int = 5


@dataclass(frozen=True)
class DeskProfile:
    """Divisors applied by ``--profile desk``; results are rounded and floored at 1."""

    T_divisor: float = 15.0
    epoch_divisor: float = 11.25
    synth_batch_divisor: float = 6.0
    classifier_epoch_divisor: float = 10.0
    # fewer optimizer steps need a larger step size to reach a usable denoiser
    diffusion_lr_multiplier: float = 5.0
    # keep the terminal alpha_bar of the shorter chain close to the full one
    scale_beta: bool = True


@dataclass
class ExperimentConfig:
    manifest: str = "manifest.json"
    out: str = "runs/default"
    seed: int = 0
    profile: str = "full"
    pids: tuple[int, ...] = PIDS
    subset_size: int = 22
    random_subset_offset: bool = False
    diffusion: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    sweep_grid: int = 100
    variants: tuple[str, ...] = tuple(v.value for v in Variant)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    desk: DeskProfile = field(default_factory=DeskProfile)

    def __post_init__(self):
        if self.profile not in ("full", "desk"):
            raise ConfigError(f"profile must be 'full' or 'desk', got {self.profile!r}")
        for v in self.variants:
            try:
                Variant(v)
            except ValueError:
                raise ConfigError(f"unknown variant {v!r}") from None
        if self.sweep_grid < 1 or self.subset_size < 1:
            raise ConfigError("sweep_grid and subset_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "diffusion" in d:
                d["diffusion"] = DiffusionTrainConfig(**d["diffusion"])
            if "synthesis" in d:
                d["synthesis"] = SynthesisConfig(**d["synthesis"])
            if "classifier" in d:
                d["classifier"] = ClassifierConfig.from_dict(d["classifier"])
            if "cluster" in d:
                d["cluster"] = ClusterConfig(**d["cluster"])
            if "desk" in d:
                d["desk"] = DeskProfile(**d["desk"])
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        for k in ("pids", "variants"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path: "str | Path") -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def effective(self) -> "ExperimentConfig":
        """Apply the desk profile if selected; the full profile is returned unchanged."""
        if self.profile != "desk":
            return self
        p = self.desk

        def div(v, d):
            return max(1, int(round(v / d)))

        dcfg = self.diffusion
        beta_scale = p.T_divisor if p.scale_beta else 1.0
        diffusion = replace(
            dcfg, T=div(dcfg.T, p.T_divisor), epochs=div(dcfg.epochs, p.epoch_divisor),
            learning_rate=dcfg.learning_rate * p.diffusion_lr_multiplier,
            beta_end_acc=min(dcfg.beta_end_acc * beta_scale, 0.999),
            beta_end_gyro=min(dcfg.beta_end_gyro * beta_scale, 0.999))
        synthesis = replace(self.synthesis, n_batches=div(self.synthesis.n_batches, p.synth_batch_divisor))
        classifier = replace(self.classifier, epochs=div(self.classifier.epochs, p.classifier_epoch_divisor))
        return replace(self, diffusion=diffusion, synthesis=synthesis, classifier=classifier)

    def digest(self) -> str:
        """Digest of everything that affects results (output location excluded)."""
        d = self.effective().to_dict()
        d.pop("out")
        d.pop("manifest")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()
