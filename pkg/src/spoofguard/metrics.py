"""ASVspoof-style countermeasure evaluation.

Convention: higher score means more bona fide, and a trial is accepted as
bona fide when ``score >= threshold``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, IdMismatchError, InvalidInputError
from .signal_io import ScoreSet, TrialRecord


@dataclass
class TdcfParams:
    """Cost model of the ASVspoof 2019 t-DCF.

    The ASV error rates describe a fixed speaker-verification operating point;
    the defaults are placeholders, supply the rates of the ASV system in use.
    """

    cost_miss_asv: float = 1.0
    cost_fa_asv: float = 10.0
    cost_miss_cm: float = 1.0
    cost_fa_cm: float = 10.0
    prior_target: float = 0.9405
    prior_nontarget: float = 0.0095
    prior_spoof: float = 0.05
    asv_p_miss: float = 0.0248
    asv_p_fa: float = 0.0248
    asv_p_miss_spoof: float = 0.30

    def validate(self):
        costs = (self.cost_miss_asv, self.cost_fa_asv, self.cost_miss_cm, self.cost_fa_cm)
        if min(costs) < 0:
            raise ConfigError("costs must be nonnegative")
        priors = (self.prior_target, self.prior_nontarget, self.prior_spoof)
        if min(priors) < 0 or abs(sum(priors) - 1.0) > 1e-9:
            raise ConfigError(f"priors must be nonnegative and sum to 1, got {priors}")
        for r in (self.asv_p_miss, self.asv_p_fa, self.asv_p_miss_spoof):
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"ASV rate {r} outside [0, 1]")

    def weights(self):
        """(C1, C2): cost weights of the CM miss and false-alarm rates."""
        c1 = (self.prior_target * (self.cost_miss_cm - self.cost_miss_asv * self.asv_p_miss)
              - self.prior_nontarget * self.cost_fa_asv * self.asv_p_fa)
        c2 = self.cost_fa_cm * self.prior_spoof * (1.0 - self.asv_p_miss_spoof)
        return c1, c2


@dataclass
class DetCurve:
    """DET points ordered by increasing threshold, including both infinite ends."""

    thresholds: np.ndarray
    p_miss: np.ndarray
    p_fa: np.ndarray

    def __iter__(self):
        return iter(zip(self.thresholds.tolist(), self.p_miss.tolist(), self.p_fa.tolist()))

    def __len__(self):
        return self.thresholds.size


def split_scores(scores: ScoreSet, keys) -> tuple[np.ndarray, np.ndarray]:
    """Return (bona fide scores, spoof scores) for the scored trials."""
    key_of = {r.utterance_id: r for r in keys} if not isinstance(keys, dict) else keys
    missing = [u for u in scores if u not in key_of]
    if missing:
        raise IdMismatchError(f"{len(missing)} scored ids have no key, e.g. {missing[:5]}")
    bona = np.array([s for u, s in scores.items() if key_of[u].is_bonafide], dtype=np.float64)
    spoof = np.array([s for u, s in scores.items() if not key_of[u].is_bonafide], dtype=np.float64)
    return bona, spoof


def det_from_arrays(bona, spoof) -> DetCurve:
    bona = np.asarray(bona, dtype=np.float64)
    spoof = np.asarray(spoof, dtype=np.float64)
    if bona.size == 0 or spoof.size == 0:
        raise InvalidInputError("need at least one bona fide and one spoof trial")
    if not (np.all(np.isfinite(bona)) and np.all(np.isfinite(spoof))):
        raise InvalidInputError("scores must be finite")
    thr = np.unique(np.concatenate([bona, spoof]))
    bs, ss = np.sort(bona), np.sort(spoof)
    # rejected bona fide: score < thr; accepted spoof: score >= thr
    miss = np.searchsorted(bs, thr, side="left") / bs.size
    fa = (ss.size - np.searchsorted(ss, thr, side="left")) / ss.size
    return DetCurve(
        np.concatenate([[-np.inf], thr, [np.inf]]),
        np.concatenate([[0.0], miss, [1.0]]),
        np.concatenate([[1.0], fa, [0.0]]),
    )


def det_curve(scores: ScoreSet, keys) -> DetCurve:
    return det_from_arrays(*split_scores(scores, keys))


def _eer_from_det(det: DetCurve) -> tuple[float, float]:
    d = det.p_miss - det.p_fa  # non-decreasing from -1 to +1
    i = int(np.argmax(d >= 0))
    if d[i] == 0:
        return float(det.p_miss[i]), _finite_threshold(det.thresholds, i, i)
    frac = -d[i - 1] / (d[i] - d[i - 1])
    rate = det.p_miss[i - 1] + frac * (det.p_miss[i] - det.p_miss[i - 1])
    t0, t1 = det.thresholds[i - 1], det.thresholds[i]
    if np.isfinite(t0) and np.isfinite(t1):
        thr = t0 + frac * (t1 - t0)
    else:
        thr = _finite_threshold(det.thresholds, i - 1, i)
    return float(rate), float(thr)


def _finite_threshold(thresholds, i, j):
    for k in (i, j):
        if np.isfinite(thresholds[k]):
            return float(thresholds[k])
    finite = thresholds[np.isfinite(thresholds)]
    return float(finite[0] if i == 0 else finite[-1])


def eer_from_arrays(bona, spoof) -> tuple[float, float]:
    return _eer_from_det(det_from_arrays(bona, spoof))


def eer(scores: ScoreSet, keys) -> tuple[float, float]:
    """Equal error rate and its threshold.

    The crossing of miss and false-alarm rates is located by linear
    interpolation between the two DET points that bracket it.
    """
    return eer_from_arrays(*split_scores(scores, keys))


def min_tdcf_from_arrays(bona, spoof, p: TdcfParams | None = None) -> float:
    p = p or TdcfParams()
    p.validate()
    c1, c2 = p.weights()
    norm = min(c1, c2)
    if norm <= 0:
        raise ConfigError(f"degenerate cost model: normalisation divisor min(C1, C2) = {norm}")
    det = det_from_arrays(bona, spoof)
    tdcf = (c1 * det.p_miss + c2 * det.p_fa) / norm
    return max(0.0, float(tdcf.min()))


def min_tdcf(cm_scores: ScoreSet, keys, p: TdcfParams | None = None) -> float:
    return min_tdcf_from_arrays(*split_scores(cm_scores, keys), p)


def per_attack_eer(scores: ScoreSet, keys, attacks=None) -> dict:
    """EER of bona fide trials against each attack's spoofs separately.

    ``attacks`` lists ids to report; ids with no scored trials are skipped
    with a warning. By default every attack present among the scored trials
    is reported, in sorted order.
    """
    key_of = {r.utterance_id: r for r in keys}
    bona, _ = split_scores(scores, key_of)
    by_attack = {}
    for u, s in scores.items():
        r = key_of[u]
        if not r.is_bonafide:
            by_attack.setdefault(r.attack_id, []).append(s)
    wanted = sorted(by_attack) if attacks is None else list(attacks)
    out = {}
    for a in wanted:
        if a not in by_attack:
            warnings.warn(f"attack {a} has no scored trials; omitted", stacklevel=2)
            continue
        out[a] = eer_from_arrays(bona, by_attack[a])[0]
    return out


def fuse_scores(systems: list, weights=None) -> ScoreSet:
    """Z-normalise each system over all its trials, then take the weighted mean per id."""
    if not systems:
        raise InvalidInputError("no systems to fuse")
    ids = list(systems[0])
    base = set(ids)
    for i, s in enumerate(systems[1:], start=1):
        other = set(s)
        if other != base:
            diff = sorted(base ^ other)
            raise IdMismatchError(f"system {i} id set differs from system 0; symmetric difference: {diff[:10]}"
                                  + (" ..." if len(diff) > 10 else ""))
    if weights is None:
        weights = [1.0] * len(systems)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(systems),) or np.any(weights < 0) or weights.sum() <= 0:
        raise InvalidInputError("weights must be nonnegative, one per system, not all zero")
    fused = np.zeros(len(ids))
    for i, (s, w) in enumerate(zip(systems, weights)):
        v = np.array([s[u] for u in ids], dtype=np.float64)
        sd = v.std()
        if sd == 0:
            raise InvalidInputError(f"system {i} has zero score variance")
        fused += w * (v - v.mean()) / sd
    fused /= weights.sum()
    return dict(zip(ids, fused.tolist()))


# --- reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    eer_percent: float
    min_tdcf: float
    threshold: float
    per_attack: dict = field(default_factory=dict)
    det: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def to_table(self) -> str:
        lines = [f"{'system':<12}{'EER(%)':>10}{'min t-DCF':>12}",
                 f"{'pooled':<12}{self.eer_percent:>10.2f}{self.min_tdcf:>12.4f}"]
        if self.per_attack:
            lines.append("")
            lines.append(f"{'attack':<12}{'EER(%)':>10}")
            for a, v in self.per_attack.items():
                lines.append(f"{a:<12}{v:>10.2f}")
        return "\n".join(lines) + "\n"


def evaluate_report(scores: ScoreSet, keys, p: TdcfParams | None = None) -> EvalReport:
    keys = list(keys)
    bona, spoof = split_scores(scores, keys)
    rate, thr = eer_from_arrays(bona, spoof)
    det = det_from_arrays(bona, spoof)
    finite = np.isfinite(det.thresholds)
    det_points = [[float(t), float(m), float(f)] for t, m, f in
                  zip(det.thresholds[finite], det.p_miss[finite], det.p_fa[finite])]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        attacks = per_attack_eer(scores, keys)
    return EvalReport(
        eer_percent=100.0 * rate,
        min_tdcf=min_tdcf_from_arrays(bona, spoof, p),
        threshold=thr,
        per_attack={a: 100.0 * v for a, v in attacks.items()},
        det=det_points,
    )


def keys_by_id(records: list[TrialRecord]) -> dict:
    return {r.utterance_id: r for r in records}


def is_finite_report(report: EvalReport) -> bool:
    vals = [report.eer_percent, report.min_tdcf, report.threshold, *report.per_attack.values()]
    return all(math.isfinite(v) for v in vals)
