"""Four-class CNN activity classifier and the metrics reported for it."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import ACTIVITIES
from .errors import DomainError

N_CLASSES = 4
WINDOW_LEN = 160
N_AXES = 6


@dataclass(frozen=True)
class ClassifierConfig:
    conv_channels: tuple[int, ...] = (32, 64, 64)
    kernel: int = 5
    hidden: tuple[int, ...] = (256, 64)
    dropout: float = 0.3
    l2: float = 1e-4
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        d = dict(d)
        for k in ("conv_channels", "hidden"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


class ClassifierModel(nn.Module):
    """Input (B, 160, 6) is treated as a one-channel 160x6 image; kernels are 5x1."""

    def __init__(self, config: ClassifierConfig | None = None):
        super().__init__()
        cfg = config or ClassifierConfig()
        self.config = cfg
        c1, c2, c3 = cfg.conv_channels
        pad = (cfg.kernel // 2, 0)
        self.conv1 = nn.Conv2d(1, c1, (cfg.kernel, 1), padding=pad)
        self.conv2 = nn.Conv2d(c1, c2, (cfg.kernel, 1), padding=pad)
        self.pool = nn.MaxPool2d((2, 1))
        self.conv3 = nn.Conv2d(c2, c3, (cfg.kernel, 1), padding=pad)
        h1, h2 = cfg.hidden
        self.fc1 = nn.Linear(c3 * (WINDOW_LEN // 2) * N_AXES, h1)
        self.fc2 = nn.Linear(h1, h2)
        self.fc3 = nn.Linear(h2, N_CLASSES)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x):
        if x.ndim != 3 or tuple(x.shape[1:]) != (WINDOW_LEN, N_AXES):
            raise DomainError(f"expected (B, {WINDOW_LEN}, {N_AXES}), got {tuple(x.shape)}")
        h = F.relu(self.conv1(x[:, None]))
        h = self.pool(F.relu(self.conv2(h)))
        h = F.relu(self.conv3(h)).flatten(1)
        h = self.drop(F.relu(self.fc1(h)))
        h = self.drop(F.relu(self.fc2(h)))
        return self.fc3(h)

    def l2_penalty(self):
        return sum((fc.weight ** 2).sum() for fc in (self.fc1, self.fc2, self.fc3))


def classify(model: ClassifierModel, windows, batch_size: int = 512) -> np.ndarray:
    """Logits for one (160, 6) window or a stack (n, 160, 6), in evaluation mode."""
    x = np.asarray(windows, dtype=np.float32)
    single = x.ndim == 2
    if single:
        x = x[None]
    was_training = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model(torch.from_numpy(x[i:i + batch_size])).double().numpy())
    model.train(was_training)
    logits = np.concatenate(out) if out else np.zeros((0, N_CLASSES))
    return logits[0] if single else logits


def predict(model: ClassifierModel, windows) -> np.ndarray:
    return np.argmax(np.atleast_2d(classify(model, windows)), axis=1)


def _check_labels(y_true, y_pred, n_classes):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DomainError("label vectors differ in length")
    if len(y_true) == 0:
        raise DomainError("empty label vectors")
    for y in (y_true, y_pred):
        if y.min() < 0 or y.max() >= n_classes:
            raise DomainError(f"labels must lie in [0, {n_classes})")
    return y_true, y_pred


def confusion(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true, y_pred = _check_labels(y_true, y_pred, n_classes)
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (y_true, y_pred), 1)
    return m


def per_class_scores(cm: np.ndarray):
    """Precision, recall, F1 per class; undefined ratios count as 0."""
    tp = np.diag(cm).astype(float)
    pred = cm.sum(axis=0).astype(float)
    true = cm.sum(axis=1).astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred > 0, tp / pred, 0.0)
        recall = np.where(true > 0, tp / true, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return precision, recall, f1


def macro_f1(y_true, y_pred, n_classes: int = N_CLASSES) -> float:
    return float(per_class_scores(confusion(y_true, y_pred, n_classes))[2].mean())


@dataclass
class ClassMetrics:
    macro_f1: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion_matrix: list[list[int]]
    class_names: list[str] = field(default_factory=lambda: list(ACTIVITIES))

    @classmethod
    def from_labels(cls, y_true, y_pred, n_classes: int = N_CLASSES) -> "ClassMetrics":
        cm = confusion(y_true, y_pred, n_classes)
        p, r, f = per_class_scores(cm)
        return cls(float(f.mean()), p.tolist(), r.tolist(), f.tolist(), cm.tolist(),
                   list(ACTIVITIES[:n_classes]))

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_confusions(matrices) -> dict:
    """Per-cell mean, population std and number of folds with a non-zero count."""
    stack = np.asarray(matrices, dtype=float)
    if stack.ndim != 3 or len(stack) == 0:
        raise DomainError("need a non-empty list of square matrices")
    return {
        "mean": stack.mean(axis=0),
        "std": stack.std(axis=0),
        "affected": (stack > 0).sum(axis=0).astype(np.int64),
        "folds": len(stack),
    }


def format_confusion(m, names=ACTIVITIES) -> str:
    m = np.asarray(m)
    width = max(max(len(n) for n in names), max(len(str(v)) for v in m.ravel())) + 2
    lines = ["true\\pred".ljust(width) + "".join(n.rjust(width) for n in names)]
    for name, row in zip(names, m):
        lines.append(name.ljust(width) + "".join(str(v).rjust(width) for v in row))
    return "\n".join(lines)
