"""Waveform ingestion, ASVspoof-style protocol/score files and a synthetic corpus.

The synthetic generator stands in for the ASVspoof 2019 LA corpus. Bona fide
utterances are harmonic series with a syllabic envelope; spoofed utterances are
drawn from the same source model and then damaged by parametric artifacts
(band attenuation, phase jitter, inharmonic tones). The artifact magnitude
shrinks as ``difficulty`` rises, and a ``hard_fraction`` share of spoofs get the
smallest magnitude, which gives a controllable population of hard negatives.
"""

from __future__ import annotations

import io
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import IdMismatchError, InvalidInputError, ParseError

DEFAULT_SAMPLE_RATE = 16000
# ~4 s at 16 kHz; the exact count makes the sinc/pooling chain land on 29 frames.
DEFAULT_UTTERANCE_LEN = 64600

BONAFIDE = "bonafide"
SPOOF = "spoof"

ScoreSet = dict  # utterance_id -> float, higher means more bona fide


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size == 0:
            raise InvalidInputError("waveform is empty")
        if self.sample_rate <= 0:
            raise InvalidInputError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class TrialRecord:
    speaker_id: str
    utterance_id: str
    attack_id: str
    key: str
    system_field: str = "-"

    def __post_init__(self):
        if self.key not in (BONAFIDE, SPOOF):
            raise InvalidInputError(f"unknown key {self.key!r}")
        if (self.key == BONAFIDE) != (self.attack_id == "-"):
            raise InvalidInputError(
                f"{self.utterance_id}: key {self.key} inconsistent with attack {self.attack_id}")

    @property
    def is_bonafide(self):
        return self.key == BONAFIDE

    def to_line(self):
        return f"{self.speaker_id} {self.utterance_id} {self.system_field} {self.attack_id} {self.key}"


def fix_length(w: Waveform, target: int) -> Waveform:
    """Truncate to ``target`` samples, or tile end-to-end and truncate if shorter."""
    if target < 1:
        raise InvalidInputError(f"target length must be >= 1, got {target}")
    x = w.samples
    if x.size >= target:
        out = x[:target].copy()
    else:
        reps = -(-target // x.size)
        out = np.tile(x, reps)[:target]
    return Waveform(out, w.sample_rate)


# --- protocol files ---------------------------------------------------------

def parse_protocol(text: str | Iterable[str]) -> list[TrialRecord]:
    lines = text.splitlines() if isinstance(text, str) else text
    records = []
    seen = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields, got {len(fields)}: {line!r}", lineno)
        spk, utt, sysf, attack, key = fields
        if key not in (BONAFIDE, SPOOF):
            raise ParseError(f"unknown key token {key!r}", lineno)
        if utt in seen:
            raise ParseError(f"duplicate utterance id {utt!r}", lineno)
        seen.add(utt)
        try:
            records.append(TrialRecord(spk, utt, attack, key, sysf))
        except InvalidInputError as exc:
            raise ParseError(str(exc), lineno) from None
    return records


def format_protocol(records: Iterable[TrialRecord]) -> str:
    return "".join(r.to_line() + "\n" for r in records)


def read_protocol(path) -> list[TrialRecord]:
    return parse_protocol(Path(path).read_text(encoding="utf-8"))


def write_protocol(path, records):
    Path(path).write_text(format_protocol(records), encoding="utf-8", newline="\n")


# --- score files ------------------------------------------------------------

def parse_scores(text: str) -> ScoreSet:
    scores = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 2:
            raise ParseError(f"expected 'UTT_ID SCORE', got {line!r}", lineno)
        utt, value = fields
        try:
            score = float(value)
        except ValueError:
            raise ParseError(f"score {value!r} is not a number", lineno) from None
        if not math.isfinite(score):
            raise ParseError(f"score {value!r} is not finite", lineno)
        if utt in scores:
            raise IdMismatchError(f"line {lineno}: duplicate utterance id {utt!r}")
        scores[utt] = score
    return scores


def format_scores(scores: ScoreSet) -> str:
    out = io.StringIO()
    for utt, score in scores.items():
        score = float(score)
        if not math.isfinite(score):
            raise InvalidInputError(f"{utt}: non-finite score {score}")
        # repr gives the shortest string that round-trips the double exactly
        out.write(f"{utt} {score!r}\n")
    return out.getvalue()


def read_scores(path) -> ScoreSet:
    if hasattr(path, "read"):
        return parse_scores(path.read())
    return parse_scores(Path(path).read_text(encoding="utf-8"))


def write_scores(path, scores: ScoreSet):
    text = format_scores(scores)
    if hasattr(path, "write"):
        path.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8", newline="\n")


# --- waveform containers ----------------------------------------------------

def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise InvalidInputError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
            if fh.getsampwidth() != 2:
                raise InvalidInputError(f"{path}: expected 16-bit PCM")
            rate = fh.getframerate()
            frames = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InvalidInputError(f"{path}: unreadable WAVE file ({exc})") from None
    pcm = np.frombuffer(frames, dtype="<i2")
    if pcm.size == 0:
        raise InvalidInputError(f"{path}: no samples")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform):
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_raw(path, sample_rate=DEFAULT_SAMPLE_RATE) -> Waveform:
    return Waveform(np.fromfile(path, dtype="<f4").astype(np.float64), sample_rate)


def write_raw(path, w: Waveform):
    w.samples.astype("<f4").tofile(path)


# --- synthetic corpus -------------------------------------------------------

DEFAULT_ATTACKS = ("A01", "A02", "A03", "A04", "A05", "A06")

# (band attenuation, phase jitter, tone) weights; cycled over the attack set
_ATTACK_PROFILES = (
    (1.0, 0.0, 0.4),
    (0.0, 1.0, 0.4),
    (0.3, 0.3, 1.0),
    (1.0, 1.0, 0.3),
    (0.0, 0.5, 0.8),
    (0.6, 0.0, 0.6),
)

_HARD_MAGNITUDE = 0.15
_REGULAR_MAGNITUDE = (0.3, 1.0)
_NOISE_STD = 0.003


@dataclass
class SynthConfig:
    n_bonafide: int = 258
    n_spoof: int = 2280
    utterance_len: int = DEFAULT_UTTERANCE_LEN
    difficulty: float = 0.5
    hard_fraction: float = 0.2
    seed: int = 0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    attacks: tuple = field(default=DEFAULT_ATTACKS)
    n_speakers: int = 10
    prefix: str = "SG"

    def validate(self):
        if self.n_bonafide < 1 or self.n_spoof < 1:
            raise InvalidInputError("n_bonafide and n_spoof must be >= 1")
        if self.utterance_len < 1:
            raise InvalidInputError("utterance_len must be >= 1")
        if not 0.0 <= self.difficulty <= 1.0:
            raise InvalidInputError(f"difficulty must lie in [0,1], got {self.difficulty}")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise InvalidInputError(f"hard_fraction must lie in [0,1], got {self.hard_fraction}")
        if self.sample_rate <= 0 or not self.attacks or self.n_speakers < 1:
            raise InvalidInputError("sample_rate, attacks and n_speakers must be non-empty/positive")
        for a in self.attacks:
            if a == "-":
                raise InvalidInputError("'-' is reserved for bona fide trials")


def _voice(rng, n, fs, f0, jitter):
    t = np.arange(n) / fs
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * vibrato) / fs
    n_harm = int(min(12, (0.45 * fs) // f0))
    out = np.zeros(n)
    for h in range(1, n_harm + 1):
        amp = rng.uniform(0.5, 1.0) / h
        offset = rng.uniform(0, 2 * np.pi)
        if jitter > 0:
            # smoothed random walk in phase, stronger on upper harmonics
            walk = np.cumsum(rng.standard_normal(n)) * (jitter * 0.05 * math.sqrt(h))
            offset = offset + walk
        out += amp * np.sin(h * phase + offset)
    env = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 2 * np.pi))
    out *= env
    peak = np.max(np.abs(out))
    return 0.5 * out / peak if peak > 0 else out


def _attenuate_high_band(x, fs, amount, cutoff_hz=4000.0):
    spec = np.fft.rfft(x)
    freqs = np.fft.rfftfreq(x.size, 1.0 / fs)
    spec[freqs > cutoff_hz] *= 1.0 - amount
    return np.fft.irfft(spec, n=x.size)


def _synth_one(rng, n, fs, f0, spoof_magnitude=None, profile=None):
    jitter = 0.0
    if spoof_magnitude is not None:
        jitter = profile[1] * spoof_magnitude
    x = _voice(rng, n, fs, f0, jitter)
    if spoof_magnitude is not None:
        band, _, tone = profile
        if band > 0:
            x = _attenuate_high_band(x, fs, min(1.0, band * spoof_magnitude))
        if tone > 0:
            t = np.arange(n) / fs
            for f in rng.uniform(5000, 0.47 * fs, size=2):
                x = x + 0.05 * tone * spoof_magnitude * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return x + _NOISE_STD * rng.standard_normal(n)


def generate_synthetic_dataset(cfg: SynthConfig) -> tuple[list[Waveform], list[TrialRecord]]:
    """Build a labelled corpus; bona fide trials first, then spoofs.

    Output is a pure function of ``cfg``: each utterance draws from its own
    child of ``SeedSequence(cfg.seed)``.
    """
    cfg.validate()
    n_total = cfg.n_bonafide + cfg.n_spoof
    children = np.random.SeedSequence(cfg.seed).spawn(n_total + 1)
    meta = np.random.default_rng(children[-1])
    speaker_f0 = meta.uniform(95.0, 240.0, size=cfg.n_speakers)
    n_hard = int(round(cfg.hard_fraction * cfg.n_spoof))
    hard = np.zeros(cfg.n_spoof, dtype=bool)
    hard[meta.permutation(cfg.n_spoof)[:n_hard]] = True
    scale = 1.0 - cfg.difficulty

    waves, records = [], []
    for i in range(n_total):
        rng = np.random.default_rng(children[i])
        spk = i % cfg.n_speakers
        f0 = speaker_f0[spk] * rng.uniform(0.95, 1.05)
        utt = f"{cfg.prefix}_{i:07d}"
        speaker = f"{cfg.prefix}_S{spk:03d}"
        if i < cfg.n_bonafide:
            x = _synth_one(rng, cfg.utterance_len, cfg.sample_rate, f0)
            rec = TrialRecord(speaker, utt, "-", BONAFIDE)
        else:
            j = i - cfg.n_bonafide
            a = j % len(cfg.attacks)
            u = _HARD_MAGNITUDE if hard[j] else rng.uniform(*_REGULAR_MAGNITUDE)
            profile = _ATTACK_PROFILES[a % len(_ATTACK_PROFILES)]
            x = _synth_one(rng, cfg.utterance_len, cfg.sample_rate, f0, scale * u, profile)
            rec = TrialRecord(speaker, utt, cfg.attacks[a], SPOOF)
        waves.append(Waveform(x, cfg.sample_rate))
        records.append(rec)
    return waves, records


def labels_from_records(records) -> np.ndarray:
    """Class indices used throughout training: 1 = bona fide, 0 = spoof."""
    return np.array([1 if r.is_bonafide else 0 for r in records], dtype=np.int64)
