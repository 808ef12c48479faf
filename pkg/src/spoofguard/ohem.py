"""Online hard example mining and the training loop that uses it.

Each mini-batch of N samples is ranked by per-sample loss and only the top
ceil(fraction * |pool|) contribute to the loss; the rest are dropped, so they
receive exactly zero gradient. With ``scope="negatives_only"`` the pool is the
spoof samples of the batch and every bona fide sample is always kept.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InvalidInputError
from .signal_io import ScoreSet

BONAFIDE_LABEL = 1
SPOOF_LABEL = 0

SCOPES = ("all_samples", "negatives_only")
RANK_KEYS = ("per_sample_loss", "bonafide_score")


@dataclass
class OhemConfig:
    enabled: bool = True
    fraction: float = 0.25
    min_selected: int = 1
    scope: str = "negatives_only"
    rank_key: str = "per_sample_loss"
    warmup_epochs: int = 0

    def validate(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"OHEM fraction must lie in (0, 1], got {self.fraction}")
        if self.min_selected < 1:
            raise ConfigError("min_selected must be >= 1")
        if self.scope not in SCOPES:
            raise ConfigError(f"scope must be one of {SCOPES}, got {self.scope!r}")
        if self.rank_key not in RANK_KEYS:
            raise ConfigError(f"rank_key must be one of {RANK_KEYS}, got {self.rank_key!r}")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    model: str = "tiny_reference"

    def validate(self, ohem: OhemConfig | None = None):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if ohem is not None and ohem.enabled and self.batch_size < 4:
            raise ConfigError("batch_size must be >= 4 when OHEM is enabled")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


def n_selected(pool_size: int, cfg: OhemConfig) -> int:
    # the tiny slack keeps e.g. 0.1 * 30 from rounding up to 4
    k = max(cfg.min_selected, math.ceil(cfg.fraction * pool_size - 1e-9))
    return min(k, pool_size)


def _select(losses, labels, cfg: OhemConfig, scores=None):
    losses = np.asarray(losses, dtype=np.float64)
    labels = np.asarray(labels)
    if losses.ndim != 1 or losses.size == 0 or labels.shape != losses.shape:
        raise InvalidInputError("need matching non-empty 1-D losses and labels")
    if not np.all(np.isfinite(losses)):
        raise InvalidInputError("per-sample losses must be finite")
    idx = np.arange(losses.size)
    scope = cfg.scope
    fallback = False
    if scope == "negatives_only" and not np.any(labels == SPOOF_LABEL):
        scope, fallback = "all_samples", True
    pool = idx if scope == "all_samples" else idx[labels == SPOOF_LABEL]

    if cfg.rank_key == "per_sample_loss":
        key = losses
    else:
        if scores is None:
            raise InvalidInputError("rank_key='bonafide_score' needs the model's bona fide scores")
        scores = np.asarray(scores, dtype=np.float64)
        # a spoof is hard when it scores high, a bona fide trial when it scores low
        key = np.where(labels == SPOOF_LABEL, scores, -scores)

    k = n_selected(pool.size, cfg)
    # stable sort on the negated key: descending rank, ties to the smaller index
    order = pool[np.argsort(-key[pool], kind="stable")]
    chosen = order[:k]
    if scope == "negatives_only":
        chosen = np.concatenate([chosen, idx[labels != SPOOF_LABEL]])
    return np.sort(chosen), fallback


def select_hard(per_sample_losses, labels, cfg: OhemConfig, scores=None) -> np.ndarray:
    """Indices (ascending) of the samples that enter the OHEM loss."""
    return _select(per_sample_losses, labels, cfg, scores)[0]


def ohem_loss(per_sample_losses, labels, cfg: OhemConfig, scores=None) -> T.Tensor:
    """Mean loss over the selected hard examples; plain mean when OHEM is disabled."""
    losses = per_sample_losses if isinstance(per_sample_losses, T.Tensor) else T.Tensor(per_sample_losses)
    if not cfg.enabled:
        return T.mean(losses)
    chosen = select_hard(losses.data, labels, cfg, scores)
    return T.mean(T.take(losses, chosen))


# --- training ----------------------------------------------------------------

@dataclass
class BatchStats:
    epoch: int
    batch: int
    loss_selected: float
    loss_discarded: float
    n_selected: int
    fallback: bool = False


@dataclass
class TrainResult:
    params: dict
    batches: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)


def train(model, inputs, labels, train_cfg: TrainConfig, ohem_cfg: OhemConfig) -> TrainResult:
    """Mini-batch Adam training with optional OHEM, deterministic given the seed.

    A trailing batch with fewer than two samples is skipped (batch norm needs
    at least two).
    """
    ohem_cfg.validate()
    train_cfg.validate(ohem_cfg)
    inputs = np.asarray(inputs)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        raise InvalidInputError("empty training set")
    if len(inputs) != n:
        raise InvalidInputError(f"{len(inputs)} inputs but {n} labels")
    rng = np.random.default_rng(train_cfg.seed)
    opt = T.AdamState(lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps)
    result = TrainResult(model.params)

    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        mining = ohem_cfg.enabled and epoch >= ohem_cfg.warmup_epochs
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = perm[start:start + train_cfg.batch_size]
            if idx.size < 2:
                continue
            y = labels[idx]
            logits = model.forward(inputs[idx], train=True)
            losses = T.softmax_xent(logits, y)
            if mining:
                scores = logits.data[:, BONAFIDE_LABEL] - logits.data[:, SPOOF_LABEL]
                chosen, fallback = _select(losses.data, y, ohem_cfg, scores)
                loss = T.mean(T.take(losses, chosen))
            else:
                chosen, fallback = np.arange(idx.size), False
                loss = T.mean(losses)
            loss.backward()
            grads = {k: p.grad for k, p in model.params.items()}
            T.adam_step(model.params, grads, opt)
            for p in model.params.values():
                p.grad = None

            mask = np.zeros(idx.size, dtype=bool)
            mask[chosen] = True
            dropped = losses.data[~mask]
            result.batches.append(BatchStats(
                epoch, b, float(losses.data[mask].mean()),
                float(dropped.mean()) if dropped.size else float("nan"),
                int(mask.sum()), fallback))
            total += float(losses.data.sum())
            count += idx.size
        result.epoch_loss.append(total / max(1, count))
    return result


def score_dataset(model, inputs, ids, batch_size: int = 64) -> ScoreSet:
    """Bona fide logit minus spoof logit, evaluated in inference mode."""
    inputs = np.asarray(inputs)
    ids = list(ids)
    if len(ids) != len(inputs):
        raise InvalidInputError(f"{len(inputs)} inputs but {len(ids)} ids")
    out = {}
    for start in range(0, len(ids), batch_size):
        logits = model.forward(inputs[start:start + batch_size], train=False).data
        for u, row in zip(ids[start:start + batch_size], logits):
            out[u] = float(row[BONAFIDE_LABEL] - row[SPOOF_LABEL])
    return out


def write_stats_csv(path, batches):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "batch", "loss_selected", "loss_discarded", "n_selected"])
        for s in batches:
            w.writerow([s.epoch, s.batch, repr(s.loss_selected), repr(s.loss_discarded), s.n_selected])
