"""Raw-Res2Net and a tiny reference classifier.

Raw-Res2Net layer stack (full size, 64600-sample input):

    fixed sinc conv (20 x 1024) -> maxpool 3 -> BN -> LeakyReLU   (21192, 20)
    2 x SE-Res2Net block @ 20 ch, each ending in maxpool 3          (2354, 20)
    4 x SE-Res2Net block @ 128 ch                                   (29, 128)
    GRU(1024) over the 29 steps, last hidden state                  (1024)
    FC 1024 -> LeakyReLU -> output layer                            (2)

The sinc kernels are stored as a buffer, never as a parameter, so the
optimiser cannot touch them.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import BatchNormState, Tensor

LEAKY_SLOPE = 0.3


# --- configuration -----------------------------------------------------------

@dataclass
class SincConfig:
    n_filters: int = 20
    kernel_len: int = 1024
    sample_rate: int = 16000
    min_low_hz: float = 50.0
    min_band_hz: float = 50.0
    spacing: str = "mel"


@dataclass
class BlockConfig:
    channels: int = 20
    scales: int = 2
    se_reduction: int = 4
    pool: int = 3

    def validate(self):
        if self.channels % self.scales:
            raise ConfigError(f"channels {self.channels} not divisible by scales {self.scales}")
        if self.channels % self.se_reduction:
            raise ConfigError(f"se_reduction {self.se_reduction} does not divide channels {self.channels}")


@dataclass
class ModelConfig:
    sinc: SincConfig = field(default_factory=SincConfig)
    stage1: BlockConfig = field(default_factory=lambda: BlockConfig(20, 2, 4, 3))
    stage1_blocks: int = 2
    stage2: BlockConfig = field(default_factory=lambda: BlockConfig(128, 4, 4, 3))
    stage2_blocks: int = 4
    front_pool: int = 3
    gru_hidden: int = 1024
    fc_dim: int = 1024
    n_classes: int = 2
    input_len: int = 64600

    @classmethod
    def tiny(cls):
        """Small configuration for gradient checks and quick training runs."""
        return cls(
            sinc=SincConfig(n_filters=4, kernel_len=64),
            stage1=BlockConfig(4, 2, 2, 3), stage1_blocks=2,
            stage2=BlockConfig(8, 2, 2, 3), stage2_blocks=2,
            gru_hidden=8, fc_dim=8, input_len=654,
        )

    def time_chain(self):
        """Sequence lengths after the sinc conv, front pool and every block."""
        t = self.input_len - self.sinc.kernel_len + 1
        chain = [self.input_len, t]
        t //= self.front_pool
        chain.append(t)
        for cfg, n in ((self.stage1, self.stage1_blocks), (self.stage2, self.stage2_blocks)):
            for _ in range(n):
                t //= cfg.pool
                chain.append(t)
        return chain

    def validate(self):
        self.stage1.validate()
        self.stage2.validate()
        if min(self.stage1_blocks, self.stage2_blocks, self.gru_hidden, self.fc_dim, self.n_classes) < 1:
            raise ConfigError("block counts and layer widths must be >= 1")
        if self.time_chain()[-1] < 1:
            raise ConfigError(f"input_len {self.input_len} too short for the pooling chain {self.time_chain()}")
        sinc_cutoffs(self.sinc)

    def to_header(self) -> dict:
        return _flatten(dataclasses.asdict(self))

    @classmethod
    def from_header(cls, header: dict):
        nested = {}
        for key, value in header.items():
            parts = key.split(".")
            d = nested
            for p in parts[:-1]:
                d = d.setdefault(p, {})
            d[parts[-1]] = value
        return _build(cls, nested)


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _build(cls, values):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), v)
        else:
            kwargs[f.name] = type(default)(v)
    return cls(**kwargs)


# --- sinc front end ----------------------------------------------------------

def _hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def _mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def sinc_cutoffs(cfg: SincConfig):
    """Return (low, high) band edges in Hz, adjacent bands sharing an edge."""
    lo, hi = cfg.min_low_hz, cfg.sample_rate / 2.0 - cfg.min_band_hz
    if cfg.n_filters < 1 or lo <= 0 or hi <= lo:
        raise ConfigError(f"no valid sinc band layout for range [{lo}, {hi}] Hz")
    if cfg.spacing == "mel":
        edges = _mel_to_hz(np.linspace(_hz_to_mel(lo), _hz_to_mel(hi), cfg.n_filters + 1))
    elif cfg.spacing == "linear":
        edges = np.linspace(lo, hi, cfg.n_filters + 1)
    else:
        raise ConfigError(f"unknown sinc spacing {cfg.spacing!r}")
    return edges[:-1], edges[1:]


def band_pass_kernel(f1, f2, kernel_len, sample_rate):
    """Hamming-windowed difference of two low-pass sinc kernels, symmetric about the centre."""
    if not (0 <= f1 <= f2 < sample_rate / 2.0):
        raise ConfigError(f"invalid cutoffs f1={f1}, f2={f2} for sample rate {sample_rate}")
    n = np.arange(kernel_len) - (kernel_len - 1) / 2.0
    a, b = f1 / sample_rate, f2 / sample_rate
    # np.sinc(u) = sin(pi u)/(pi u), so np.sinc(2 f n) = sin(2 pi f n)/(2 pi f n)
    g = 2 * b * np.sinc(2 * b * n) - 2 * a * np.sinc(2 * a * n)
    return g * np.hamming(kernel_len)


def sinc_kernels(cfg: SincConfig) -> np.ndarray:
    """Fixed filterbank of shape (n_filters, 1, kernel_len)."""
    low, high = sinc_cutoffs(cfg)
    bank = [band_pass_kernel(f1, f2, cfg.kernel_len, cfg.sample_rate) for f1, f2 in zip(low, high)]
    return np.stack(bank)[:, None, :]


# --- building blocks ---------------------------------------------------------

def se_layer(x: Tensor, w1: Tensor, w2: Tensor, return_scale=False):
    """Squeeze-excitation gate: scale each channel by sigmoid(relu(mean_t(x) w1) w2)."""
    if x.ndim != 3 or w1.shape[0] != x.shape[1] or w2.shape != (w1.shape[1], x.shape[1]):
        raise ShapeError(f"se_layer: input {x.shape} with weights {w1.shape}, {w2.shape}")
    squeezed = T.mean(x, axis=2)
    scale = T.sigmoid(T.matmul(T.relu(T.matmul(squeezed, w1)), w2))
    out = x * T.reshape(scale, scale.shape + (1,))
    return (out, scale) if return_scale else out


def bn(x, params, states, name, train):
    return T.batchnorm1d(x, params[f"{name}.gamma"], params[f"{name}.beta"], states[name], train)


def res2net_block(x: Tensor, cfg: BlockConfig, params: dict, states: dict, prefix: str, train: bool) -> Tensor:
    """Pre-activation SE-Res2Net block; output time is floor(time / pool)."""
    cfg.validate()
    ch_in, ch_out = x.shape[1], cfg.channels
    act = lambda t: T.leaky_relu(t, LEAKY_SLOPE)
    p = lambda n: params[f"{prefix}.{n}"]

    h = act(bn(x, params, states, f"{prefix}.bn0", train))
    h = T.conv1d(h, p("conv_in"))
    h = act(bn(h, params, states, f"{prefix}.bn1", train))

    width = ch_out // cfg.scales
    parts = T.split(h, [width] * cfg.scales, axis=1)
    ys = [parts[0]]
    for i in range(1, cfg.scales):
        ys.append(T.conv1d(parts[i] + ys[-1], p(f"conv3_{i}"), padding=1))
    h = T.concat(ys, axis=1)

    h = T.conv1d(h, p("conv_out"))
    h = act(bn(h, params, states, f"{prefix}.bn2", train))
    shortcut = x if ch_in == ch_out else T.conv1d(x, p("proj"))
    h = T.maxpool1d(h + shortcut, cfg.pool)
    return se_layer(h, p("se_w1"), p("se_w2"))


def init_block(rng, prefix, ch_in, cfg: BlockConfig):
    cfg.validate()
    ch = cfg.channels
    width = ch // cfg.scales
    he = lambda shape: rng.standard_normal(shape) * np.sqrt(2.0 / (shape[1] * shape[2]))
    params = {}
    for name, n in (("bn0", ch_in), ("bn1", ch), ("bn2", ch)):
        params[f"{prefix}.{name}.gamma"] = np.ones(n)
        params[f"{prefix}.{name}.beta"] = np.zeros(n)
    params[f"{prefix}.conv_in"] = he((ch, ch_in, 1))
    for i in range(1, cfg.scales):
        params[f"{prefix}.conv3_{i}"] = he((width, width, 3))
    params[f"{prefix}.conv_out"] = he((ch, ch, 1))
    if ch_in != ch:
        params[f"{prefix}.proj"] = he((ch, ch_in, 1))
    hidden = ch // cfg.se_reduction
    params[f"{prefix}.se_w1"] = rng.standard_normal((ch, hidden)) / np.sqrt(ch)
    params[f"{prefix}.se_w2"] = rng.standard_normal((hidden, ch)) / np.sqrt(hidden)
    bn_names = [f"{prefix}.bn0", f"{prefix}.bn1", f"{prefix}.bn2"]
    return params, bn_names


# --- models ------------------------------------------------------------------

class RawRes2Net:
    kind = "raw_res2net"

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        self.cfg = cfg or ModelConfig()
        self.cfg.validate()
        c = self.cfg
        rng = np.random.default_rng(seed)
        self.buffers = {"sinc": sinc_kernels(c.sinc)}
        raw = {"front_bn.gamma": np.ones(c.sinc.n_filters), "front_bn.beta": np.zeros(c.sinc.n_filters)}
        bn_names = ["front_bn"]
        ch = c.sinc.n_filters
        self.blocks = []
        for stage, (bcfg, n) in enumerate(((c.stage1, c.stage1_blocks), (c.stage2, c.stage2_blocks)), start=1):
            for i in range(n):
                prefix = f"stage{stage}.block{i}"
                p, names = init_block(rng, prefix, ch, bcfg)
                raw.update(p)
                bn_names += names
                self.blocks.append((prefix, bcfg))
                ch = bcfg.channels
        raw.update({f"gru.{k}": v for k, v in T.init_gru(rng, ch, c.gru_hidden).items()})
        for name, (n_in, n_out) in (("fc", (c.gru_hidden, c.fc_dim)), ("out", (c.fc_dim, c.n_classes))):
            bound = 1.0 / np.sqrt(n_in)
            raw[f"{name}.w"] = rng.uniform(-bound, bound, size=(n_in, n_out))
            raw[f"{name}.b"] = rng.uniform(-bound, bound, size=n_out)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in raw.items()}
        self.bn_states = {name: BatchNormState.fresh(self.params[f"{name}.gamma"].shape[0]) for name in bn_names}

    def forward(self, x, train=False, trace=None) -> Tensor:
        """Logits for a (batch, input_len) array of waveforms.

        If ``trace`` is a list, (layer name, per-sample output shape) pairs are
        appended to it; conv stages report (time, channels).
        """
        x = np.asarray(x, dtype=np.float64)
        c = self.cfg
        if x.ndim != 2 or x.shape[1] != c.input_len:
            raise ShapeError(f"expected waveforms of shape (batch, {c.input_len}), got {x.shape}")
        note = (lambda name, t: trace.append((name, _sample_shape(t)))) if trace is not None else (lambda *a: None)
        P = self.params

        h = T.conv1d(Tensor(x[:, None, :]), Tensor(self.buffers["sinc"]))
        h = T.maxpool1d(h, c.front_pool)
        h = T.leaky_relu(bn(h, P, self.bn_states, "front_bn", train), LEAKY_SLOPE)
        note("sinc", h)
        for prefix, bcfg in self.blocks:
            h = res2net_block(h, bcfg, P, self.bn_states, prefix, train)
            note(prefix, h)
        h = T.transpose(h, (0, 2, 1))
        _, h = T.gru_forward(h, {k: P[f"gru.{k}"] for k in ("w_ih", "w_hh", "b_ih", "b_hh")})
        note("gru", h)
        h = T.affine(h, P["fc.w"], P["fc.b"])
        note("fc", h)
        logits = T.affine(T.leaky_relu(h, LEAKY_SLOPE), P["out.w"], P["out.b"])
        note("output", logits)
        return logits

    def header(self):
        return {"model": self.kind, **self.cfg.to_header()}

    def state_arrays(self):
        arrays = {k: p.data for k, p in self.params.items()}
        arrays.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        for name, st in self.bn_states.items():
            arrays[f"bnstat.{name}.mean"] = st.running_mean
            arrays[f"bnstat.{name}.var"] = st.running_var
        return arrays

    def load_state(self, arrays):
        for k, p in self.params.items():
            p.data = np.array(arrays[k])
        for k in self.buffers:
            self.buffers[k] = np.array(arrays[f"buffer.{k}"])
        for name, st in self.bn_states.items():
            st.running_mean = np.array(arrays[f"bnstat.{name}.mean"])
            st.running_var = np.array(arrays[f"bnstat.{name}.var"])

    @classmethod
    def from_header(cls, header):
        return cls(ModelConfig.from_header({k: v for k, v in header.items() if k != "model"}))


def _sample_shape(t: Tensor):
    s = t.shape[1:]
    return (s[1], s[0]) if len(s) == 2 else s


class TinyReferenceClassifier:
    """Two-layer perceptron over standardised LFCC summary statistics."""

    kind = "tiny_reference"

    def __init__(self, n_in=120, hidden=32, seed=0):
        self.n_in, self.hidden = n_in, hidden
        rng = np.random.default_rng(seed)
        self.params = {
            "w1": Tensor(rng.standard_normal((n_in, hidden)) * np.sqrt(2.0 / n_in), requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(rng.standard_normal((hidden, 2)) * np.sqrt(1.0 / hidden), requires_grad=True),
            "b2": Tensor(np.zeros(2), requires_grad=True),
        }
        self.buffers = {"mean": np.zeros(n_in), "scale": np.ones(n_in)}

    def fit_normalizer(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.buffers["mean"] = x.mean(axis=0)
        std = x.std(axis=0)
        self.buffers["scale"] = np.where(std > 0, std, 1.0)

    def forward(self, x, train=False, trace=None) -> Tensor:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"expected inputs of shape (batch, {self.n_in}), got {x.shape}")
        z = Tensor((x - self.buffers["mean"]) / self.buffers["scale"])
        P = self.params
        h = T.leaky_relu(T.affine(z, P["w1"], P["b1"]), LEAKY_SLOPE)
        return T.affine(h, P["w2"], P["b2"])

    def header(self):
        return {"model": self.kind, "n_in": self.n_in, "hidden": self.hidden}

    def state_arrays(self):
        arrays = {k: p.data for k, p in self.params.items()}
        arrays.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        return arrays

    def load_state(self, arrays):
        for k, p in self.params.items():
            p.data = np.array(arrays[k])
        for k in self.buffers:
            self.buffers[k] = np.array(arrays[f"buffer.{k}"])

    @classmethod
    def from_header(cls, header):
        return cls(int(header["n_in"]), int(header["hidden"]))


MODELS = {RawRes2Net.kind: RawRes2Net, TinyReferenceClassifier.kind: TinyReferenceClassifier}


def save_model(path, model):
    T.save_checkpoint(path, model.state_arrays(), model.header())


def load_model(path):
    arrays, header = T.load_checkpoint(path)
    kind = header.get("model")
    if kind not in MODELS:
        raise ConfigError(f"{path}: unknown model kind {kind!r}")
    model = MODELS[kind].from_header(header)
    model.load_state(arrays)
    return model
