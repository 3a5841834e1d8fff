"""Named random substreams derived from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *keys) -> int:
    """Stable 63-bit seed for the substream ``keys`` (stage, fold, class, batch, ...)."""
    digest = hashlib.sha256(repr((int(root),) + tuple(str(k) for k in keys)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def derive_rng(root: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))
