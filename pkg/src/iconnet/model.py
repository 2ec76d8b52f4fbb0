"""IConNet and the MFCC+FFN baseline, parameter accounting and model files.

An IConNet front-end block is a FIRConv layer (learnable window times a
fixed sinc band-pass carrier per kernel), full-wave rectification and a
max-pool. Two blocks feed a global max-pool and a two-hidden-layer FFN.
"""

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import grad as G
from .dsp import cosine_window, mel_band_edges, sinc_bandpass
from .errors import ConfigurationError, CorruptModelError, ShapeError

MAGIC = b"ICON"
FORMAT_VERSION = 1
F_MIN_HZ = 30.0

_DTYPES = {"float32": np.float32, "float64": np.float64}


# --------------------------------------------------------------------------
# FIRConv
# --------------------------------------------------------------------------

class FirConvLayer:
    """Bank of FIR kernels ``windows[k] * carrier[k]``; only ``windows`` is trained."""

    def __init__(self, windows, carrier, cutoffs_hz, sample_rate_hz, stride=1):
        windows = np.asarray(windows)
        carrier = np.asarray(carrier)
        if windows.shape != carrier.shape or windows.ndim != 2:
            raise ShapeError(f"windows {windows.shape} and carrier {carrier.shape} must be equal 2-D shapes")
        nyquist = sample_rate_hz / 2.0
        for lo, hi in cutoffs_hz:
            if not 0.0 <= lo < hi <= nyquist:
                raise ConfigurationError(f"invalid band ({lo}, {hi}) for Nyquist {nyquist}")
        self.windows = G.Tensor(windows, requires_grad=True, name="windows")
        self.carrier = G.Tensor(carrier.astype(windows.dtype))
        self.cutoffs_hz = [(float(lo), float(hi)) for lo, hi in cutoffs_hz]
        self.sample_rate_hz = sample_rate_hz
        self.stride = stride

    @property
    def n_kernels(self):
        return self.windows.shape[0]

    @property
    def kernel_len(self):
        return self.windows.shape[1]

    @property
    def n_trainable(self):
        return self.windows.size

    def kernel_tensor(self):
        """Effective kernels as a differentiable ``[n_kernels, 1, kernel_len]`` Tensor."""
        eff = G.mul(self.windows, self.carrier)
        return G.reshape(eff, (self.n_kernels, 1, self.kernel_len))

    def effective_kernels(self):
        return self.windows.data * self.carrier.data

    def __call__(self, x):
        return G.conv1d(x, self.kernel_tensor(), stride=self.stride, padding="same")


def design_bands(n_kernels, sample_rate_hz, spacing="mel", f_min_hz=F_MIN_HZ):
    """Band edges tiling ``[f_min, Nyquist]`` with uniformly spaced centres and 50% overlap."""
    nyquist = sample_rate_hz / 2.0
    if spacing == "mel":
        edges = mel_band_edges(n_kernels, f_min_hz, nyquist)
    elif spacing == "linear":
        edges = np.linspace(f_min_hz, nyquist, n_kernels + 2)
    else:
        raise ConfigurationError(f"unknown spacing {spacing!r}")
    edges[-1] = nyquist
    return [(float(edges[k]), float(edges[k + 2])) for k in range(n_kernels)]


def init_firconv(n_kernels, kernel_len, sample_rate_hz, window_kind="hann",
                 spacing="mel", stride=1, dtype=np.float64):
    """Deterministic FIRConv layer: sinc band-pass carriers, cosine-window initial windows."""
    if kernel_len < 8:
        raise ConfigurationError("kernel_len must be >= 8")
    if n_kernels < 1:
        raise ConfigurationError("n_kernels must be >= 1")
    if n_kernels > kernel_len // 2:
        raise ConfigurationError(
            f"{n_kernels} kernels cannot be distinct bands at length {kernel_len} "
            f"(at most {kernel_len // 2})"
        )
    if sample_rate_hz / 2.0 <= F_MIN_HZ:
        raise ConfigurationError(f"sample rate {sample_rate_hz} leaves no band above {F_MIN_HZ} Hz")
    bands = design_bands(n_kernels, sample_rate_hz, spacing)
    if any(hi - lo <= 0 for lo, hi in bands):
        raise ConfigurationError("bands collapse; reduce n_kernels")
    carrier = np.stack([sinc_bandpass(lo, hi, kernel_len, sample_rate_hz) for lo, hi in bands])
    window = cosine_window(window_kind, kernel_len)
    windows = np.tile(window, (n_kernels, 1))
    return FirConvLayer(windows.astype(dtype), carrier.astype(dtype), bands, sample_rate_hz, stride)


def effective_kernels(layer):
    return layer.effective_kernels()


# --------------------------------------------------------------------------
# Feed-forward classifier
# --------------------------------------------------------------------------

class Ffn:
    """Stack of linear layers with relu between them."""

    def __init__(self, sizes, seed=0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.sizes = tuple(int(s) for s in sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
            self.weights.append(G.Tensor(w, requires_grad=True))
            self.biases.append(G.Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))

    def named_parameters(self, prefix="ffn"):
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}.{i}.weight", w))
            out.append((f"{prefix}.{i}.bias", b))
        return out

    def __call__(self, h):
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = G.linear(h, w, b)
            if i < last:
                h = G.relu(h)
        return h


# --------------------------------------------------------------------------
# IConNet
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockConfig:
    n_kernels: int
    kernel_len: int
    stride: int = 1
    pool: int = 4


@dataclass(frozen=True)
class IConNetConfig:
    sample_rate_hz: int = 16000
    segment_len: int = 80000
    block1: BlockConfig = BlockConfig(128, 256)
    block2: BlockConfig = BlockConfig(32, 400)
    nonlinearity: str = "abs"
    ffn_hidden: tuple = (256, 256)
    n_classes: int = 2
    window: str = "hann"
    spacing: str = "mel"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("block1", "block2"):
            block = getattr(self, name)
            if isinstance(block, dict):
                object.__setattr__(self, name, BlockConfig(**block))
        object.__setattr__(self, "ffn_hidden", tuple(int(h) for h in self.ffn_hidden))
        if self.nonlinearity not in ("abs", "relu"):
            raise ConfigurationError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.front_end_length() < 1:
            raise ConfigurationError("segment too short for the two pooling stages")

    @property
    def block2_rate_hz(self):
        return self.sample_rate_hz / (self.block1.stride * self.block1.pool)

    def front_end_length(self):
        t = self.segment_len
        for b in (self.block1, self.block2):
            t = (t - 1) // b.stride + 1
            t = (t - b.pool) // b.pool + 1
        return t

    def to_dict(self):
        d = asdict(self)
        d["ffn_hidden"] = list(self.ffn_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def with_dtype(self, dtype):
        return IConNetConfig(**{**self.to_dict(), "dtype": dtype})


class IConNet:
    """Raw-waveform classifier: two FIRConv blocks, global max-pool, FFN."""

    kind = "iconnet"

    def __init__(self, config=IConNetConfig()):
        self.config = config
        dtype = _DTYPES[config.dtype]
        b1, b2 = config.block1, config.block2
        self.block1 = init_firconv(b1.n_kernels, b1.kernel_len, config.sample_rate_hz,
                                   config.window, config.spacing, b1.stride, dtype)
        self.block2 = init_firconv(b2.n_kernels, b2.kernel_len, config.block2_rate_hz,
                                   config.window, config.spacing, b2.stride, dtype)
        self.ffn = Ffn((b2.n_kernels, *config.ffn_hidden, config.n_classes), config.seed, dtype)

    @property
    def dtype(self):
        return _DTYPES[self.config.dtype]

    def named_parameters(self):
        return [("block1.windows", self.block1.windows),
                ("block2.windows", self.block2.windows),
                *self.ffn.named_parameters()]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        return []

    def _block(self, layer, pool, x):
        h = layer(x)
        h = G.abs(h) if self.config.nonlinearity == "abs" else G.relu(h)
        return G.max_pool1d(h, pool, pool)

    def features(self, x):
        """Front-end output after global max pooling, ``[batch, block2.n_kernels]``."""
        x = _check_input(x, self.config.segment_len, self.dtype)
        h = self._block(self.block1, self.config.block1.pool, x)
        # block-2 kernels filter every input channel and the results are summed;
        # by linearity that equals filtering the channel sum once
        h = G.channel_sum(h)
        h = self._block(self.block2, self.config.block2.pool, h)
        return G.global_max_pool1d(h)

    def forward(self, x):
        return self.ffn(self.features(x))

    __call__ = forward


def _check_input(x, length, dtype):
    if not isinstance(x, G.Tensor):
        x = G.Tensor(np.asarray(x, dtype=dtype))
    if x.data.ndim == 2:
        x = G.Tensor(x.data[:, None, :])
    if x.data.ndim != 3 or x.shape[1] != 1 or x.shape[2] != length:
        raise ShapeError(f"expected segments of shape [batch, 1, {length}], got {x.shape}")
    if x.dtype != dtype:
        x = G.Tensor(x.data.astype(dtype))
    return x


def iconnet_forward(model, segment):
    return model.forward(segment)


# --------------------------------------------------------------------------
# MFCC + FFN baseline
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MfccFfnConfig:
    n_features: int = 80
    ffn_hidden: tuple = (256, 256)
    n_classes: int = 2
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "ffn_hidden", tuple(int(h) for h in self.ffn_hidden))
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}")

    def to_dict(self):
        d = asdict(self)
        d["ffn_hidden"] = list(self.ffn_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class MfccFfn:
    """FFN over standardized MFCC summary vectors."""

    kind = "mfcc-ffn"

    def __init__(self, config=MfccFfnConfig()):
        self.config = config
        dtype = _DTYPES[config.dtype]
        self.ffn = Ffn((config.n_features, *config.ffn_hidden, config.n_classes), config.seed, dtype)
        self.feature_mean = G.Tensor(np.zeros(config.n_features, dtype=dtype))
        self.feature_scale = G.Tensor(np.ones(config.n_features, dtype=dtype))

    @property
    def dtype(self):
        return _DTYPES[self.config.dtype]

    def named_parameters(self):
        return self.ffn.named_parameters()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        return [("feature_mean", self.feature_mean), ("feature_scale", self.feature_scale)]

    def forward(self, features):
        f = np.asarray(features.data if isinstance(features, G.Tensor) else features)
        if f.ndim != 2 or f.shape[1] != self.config.n_features:
            raise ShapeError(f"expected features [batch, {self.config.n_features}], got {f.shape}")
        z = ((f - self.feature_mean.data) / self.feature_scale.data).astype(self.dtype)
        return self.ffn(G.Tensor(z))

    __call__ = forward


def mfcc_ffn_forward(model, feature_vector):
    return model.forward(feature_vector)


# --------------------------------------------------------------------------
# Accounting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamCount:
    front_end: int
    classifier: int

    @property
    def total(self):
        return self.front_end + self.classifier

    def as_dict(self):
        return {"front_end": self.front_end, "classifier": self.classifier, "total": self.total}


def count_params(model):
    """Trainable parameter counts split into front-end and classifier."""
    front = classifier = 0
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if name.startswith("block"):
            front += p.size
        else:
            classifier += p.size
    return ParamCount(front, classifier)


# --------------------------------------------------------------------------
# Model files
# --------------------------------------------------------------------------

_MODEL_KINDS = {"iconnet": (IConNet, IConNetConfig), "mfcc-ffn": (MfccFfn, MfccFfnConfig)}


def save_model(model, path, metadata=None):
    """Write the binary model file.

    Layout: ``ICON`` | u32 version | u32 metadata length | UTF-8 JSON
    metadata | per tensor: u32 rank, u32 dims, float32 LE payload.
    """
    tensors = model.named_parameters() + model.named_buffers()
    meta = {
        "kind": model.kind,
        "config": model.config.to_dict(),
        "tensors": [name for name, _ in tensors],
        **(metadata or {}),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta_bytes)), meta_bytes]
    for _, t in tensors:
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path):
    """Read and validate a model file; nothing is returned unless it is complete."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise CorruptModelError("file too short for header", len(blob))
    if blob[:4] != MAGIC:
        raise CorruptModelError(f"bad magic {blob[:4]!r}", 0)
    version, meta_len = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CorruptModelError(f"unsupported format version {version}", 4)
    pos = 12
    if pos + meta_len > len(blob):
        raise CorruptModelError("metadata runs past end of file", pos)
    try:
        meta = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
        model_cls, config_cls = _MODEL_KINDS[meta["kind"]]
        config = config_cls.from_dict(meta["config"])
        names = list(meta["tensors"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptModelError(f"invalid metadata: {exc}", pos) from None
    pos += meta_len
    arrays = {}
    for name in names:
        if pos + 4 > len(blob):
            raise CorruptModelError(f"truncated before tensor {name!r}", pos)
        (rank,) = struct.unpack_from("<I", blob, pos)
        if rank > 8 or pos + 4 + 4 * rank > len(blob):
            raise CorruptModelError(f"bad rank for tensor {name!r}", pos)
        dims = struct.unpack_from(f"<{rank}I", blob, pos + 4)
        pos += 4 + 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(blob):
            raise CorruptModelError(f"truncated payload for tensor {name!r}", pos)
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims)
        pos += nbytes
    if pos != len(blob):
        raise CorruptModelError("trailing bytes after last tensor", pos)

    model = model_cls(config)
    targets = dict(model.named_parameters() + model.named_buffers())
    if set(targets) != set(names):
        raise CorruptModelError(f"tensor names {names} do not match a {meta['kind']} model", 12)
    for name, arr in arrays.items():
        if targets[name].shape != arr.shape:
            raise CorruptModelError(
                f"tensor {name!r} has shape {arr.shape}, expected {targets[name].shape}", 12
            )
    for name, arr in arrays.items():
        targets[name].data = arr.astype(model.dtype)
    model.metadata = meta
    return model


def model_file_size(model, metadata=None):
    import tempfile

    with tempfile.NamedTemporaryFile(suffix=".icon") as fh:
        save_model(model, fh.name, metadata)
        return Path(fh.name).stat().st_size
