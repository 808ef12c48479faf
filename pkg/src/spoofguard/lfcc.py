"""Linear-frequency cepstral coefficients.

Pipeline: Hamming-windowed frames -> power spectrum -> linear triangular
filterbank -> floored log -> orthonormal DCT-II -> static + delta + delta-delta.
With the defaults (20 ms / 10 ms at 16 kHz, 20 filters, 20 cepstra) a
64600-sample utterance gives a 60 x 402 matrix.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft

from .errors import ConfigError, InvalidInputError, ParseError
from .signal_io import Waveform


@dataclass
class FrontendConfig:
    win_ms: float = 20.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_filters: int = 20
    n_ceps: int = 20
    delta_width: int = 2
    log_floor: float = 1e-10
    pre_emphasis: float = 0.0

    def win_length(self, sample_rate):
        return int(round(self.win_ms * sample_rate / 1000.0))

    def hop_length(self, sample_rate):
        return int(round(self.hop_ms * sample_rate / 1000.0))

    def validate(self, sample_rate):
        if not (self.win_ms >= self.hop_ms > 0):
            raise ConfigError("need win_ms >= hop_ms > 0")
        if self.hop_length(sample_rate) < 1:
            raise ConfigError("hop shorter than one sample")
        if self.n_fft < self.win_length(sample_rate):
            raise ConfigError(f"n_fft={self.n_fft} shorter than window {self.win_length(sample_rate)}")
        if not 1 <= self.n_ceps <= self.n_filters:
            raise ConfigError("need 1 <= n_ceps <= n_filters")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.delta_width < 1:
            raise ConfigError("delta_width must be >= 1")


@dataclass
class FeatureMatrix:
    data: np.ndarray  # coefficients x frames

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise InvalidInputError("feature matrix must be 2-D")
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError("feature matrix has non-finite entries")

    @property
    def n_coeffs(self):
        return self.data.shape[0]

    @property
    def n_frames(self):
        return self.data.shape[1]


def frame_signal(w: Waveform, cfg: FrontendConfig) -> np.ndarray:
    """Return windowed frames as a (window_length, n_frames) matrix."""
    win = cfg.win_length(w.sample_rate)
    hop = cfg.hop_length(w.sample_rate)
    x = w.samples
    if cfg.pre_emphasis:
        x = np.append(x[0], x[1:] - cfg.pre_emphasis * x[:-1])
    if x.size < win:
        raise InvalidInputError(f"waveform has {x.size} samples, shorter than one {win}-sample window")
    n_frames = (x.size - win) // hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    return (frames * np.hamming(win)).T


def linear_filterbank(n_filters, n_fft, sample_rate) -> np.ndarray:
    """Triangular filters with centres evenly spaced on a linear scale over 0..fs/2."""
    if n_filters < 1:
        raise ConfigError("n_filters must be >= 1")
    n_bins = n_fft // 2 + 1
    edges_hz = np.linspace(0.0, sample_rate / 2.0, n_filters + 2)
    bins = np.round(edges_hz / (sample_rate / 2.0) * (n_bins - 1)).astype(int)
    if np.any(np.diff(bins) < 1):
        raise ConfigError(f"{n_filters} filters do not fit into {n_bins} FFT bins")
    fb = np.zeros((n_filters, n_bins))
    k = np.arange(n_bins)
    for i in range(n_filters):
        lo, mid, hi = bins[i], bins[i + 1], bins[i + 2]
        rise = (k - lo) / (mid - lo)
        fall = (hi - k) / (hi - mid)
        fb[i] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def filter_centers(n_filters, n_fft, sample_rate) -> np.ndarray:
    """Centre bin of each filter in :func:`linear_filterbank`."""
    return np.argmax(linear_filterbank(n_filters, n_fft, sample_rate), axis=1)


def reference_dft(frame) -> np.ndarray:
    """Direct O(n^2) evaluation of the DFT definition (test oracle)."""
    x = np.asarray(frame, dtype=np.complex128)
    n = x.size
    idx = np.arange(n)
    # reduce kn mod n before scaling keeps the twiddle phases accurate for large n
    twiddle = np.exp(-2j * np.pi * (np.outer(idx, idx) % n) / n)
    return twiddle @ x


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    spec = np.fft.rfft(frames, n=n_fft, axis=0)
    return spec.real ** 2 + spec.imag ** 2


def deltas(feat: np.ndarray, width: int = 2) -> np.ndarray:
    """Regression deltas along the frame axis with replicate edge padding."""
    n_frames = feat.shape[1]
    padded = np.pad(feat, ((0, 0), (width, width)), mode="edge")
    denom = 2.0 * sum(n * n for n in range(1, width + 1))
    out = np.zeros_like(feat, dtype=np.float64)
    for n in range(1, width + 1):
        out += n * (padded[:, width + n:width + n + n_frames] - padded[:, width - n:width - n + n_frames])
    return out / denom


def lfcc(w: Waveform, cfg: FrontendConfig | None = None) -> FeatureMatrix:
    cfg = cfg or FrontendConfig()
    cfg.validate(w.sample_rate)
    frames = frame_signal(w, cfg)
    power = power_spectrum(frames, cfg.n_fft)
    fb = linear_filterbank(cfg.n_filters, cfg.n_fft, w.sample_rate)
    energies = fb @ power
    logs = np.log(np.maximum(energies, cfg.log_floor))
    static = scipy.fft.dct(logs, type=2, norm="ortho", axis=0)[:cfg.n_ceps]
    d1 = deltas(static, cfg.delta_width)
    d2 = deltas(d1, cfg.delta_width)
    return FeatureMatrix(np.vstack([static, d1, d2]))


def summary_stats(feat: FeatureMatrix) -> np.ndarray:
    """Per-coefficient mean and variance over frames, concatenated."""
    return np.concatenate([feat.data.mean(axis=1), feat.data.var(axis=1)])


# --- feature dump -----------------------------------------------------------
# Each block: uint32 rows, uint32 cols (little-endian), then row-major float32.

def write_feature_dump(path, features: dict) -> dict:
    """Write ``{utt_id: FeatureMatrix}`` to ``path`` and a ``.manifest`` beside it.

    Returns the ``{utt_id: offset}`` manifest.
    """
    path = Path(path)
    offsets = {}
    with open(path, "wb") as fh:
        for utt, feat in features.items():
            data = feat.data if isinstance(feat, FeatureMatrix) else np.asarray(feat)
            offsets[utt] = fh.tell()
            fh.write(struct.pack("<II", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    manifest = "".join(f"{utt} {off}\n" for utt, off in offsets.items())
    manifest_path(path).write_text(manifest, encoding="utf-8", newline="\n")
    return offsets


def manifest_path(dump_path) -> Path:
    dump_path = Path(dump_path)
    return dump_path.with_name(dump_path.name + ".manifest")


def read_feature_dump(path) -> dict:
    path = Path(path)
    offsets = {}
    for lineno, line in enumerate(manifest_path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"bad manifest entry {line!r}", lineno)
        offsets[parts[0]] = int(parts[1])
    blob = path.read_bytes()
    out = {}
    for utt, off in offsets.items():
        rows, cols = struct.unpack_from("<II", blob, off)
        data = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=off + 8)
        out[utt] = data.reshape(rows, cols).astype(np.float64)
    return out
