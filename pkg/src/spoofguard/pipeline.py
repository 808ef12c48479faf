"""Glue between waveforms, features and models."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .lfcc import FrontendConfig, lfcc, summary_stats
from .model import ModelConfig, RawRes2Net, TinyReferenceClassifier
from .signal_io import fix_length


def worker_count(default=1):
    value = os.environ.get("SPOOFGUARD_THREADS")
    if not value:
        return default
    return max(1, int(value))


def extract_features(waves, cfg: FrontendConfig | None = None, threads: int | None = None):
    """LFCC for every waveform; output order always matches input order."""
    cfg = cfg or FrontendConfig()
    threads = threads or worker_count()
    if threads <= 1:
        return [lfcc(w, cfg) for w in waves]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda w: lfcc(w, cfg), waves))


def summary_matrix(features) -> np.ndarray:
    return np.stack([summary_stats(f) for f in features])


def waveform_matrix(waves, length) -> np.ndarray:
    return np.stack([fix_length(w, length).samples for w in waves])


def build_model(kind: str, seed: int = 0, n_in: int = 120, preset: str = "full"):
    if kind in ("tiny", "tiny_reference"):
        return TinyReferenceClassifier(n_in=n_in, seed=seed)
    if kind in ("raw-res2net", "raw_res2net"):
        cfg = ModelConfig() if preset == "full" else ModelConfig.tiny()
        return RawRes2Net(cfg, seed=seed)
    raise ValueError(f"unknown model {kind!r}")
