"""A small tape-based reverse-mode differentiation engine on numpy arrays.

Only the operators the models need are provided. Operations are recorded on
the active :class:`Tape` (entered with ``with tape:``) whenever an input
requires a gradient; outside a tape nothing is recorded, which is how
inference runs.

>>> x = Tensor(3.0, requires_grad=True)
>>> with Tape() as tape:
...     y = mul(x, x)
>>> backward(tape, y)
>>> float(x.grad)
6.0
"""

import contextvars
from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from .errors import NonFiniteError, ShapeError

FFT_MIN_KERNEL = 64

_ACTIVE_TAPE = contextvars.ContextVar("iconnet_active_tape", default=None)
_fft_workers = 1


def set_fft_workers(n):
    """Thread count for FFT convolution (each transform stays single-threaded)."""
    global _fft_workers
    _fft_workers = max(1, int(n))


class Tensor:
    """An n-dimensional array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward_fn: object


@dataclass
class Tape:
    """Execution-ordered record of differentiable operations."""

    nodes: list = field(default_factory=list)

    def __post_init__(self):
        self._tokens = []

    def __enter__(self):
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._tokens.pop())
        return False

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, tensor):
        return any(node.output is tensor for node in self.nodes)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.is_leaf = True
    tape = _ACTIVE_TAPE.get()
    if out.requires_grad and tape is not None:
        out.is_leaf = False
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(tape, root):
    """Propagate d(root)/d(tensor) to every tensor on ``tape`` that needs it.

    Gradients are summed into ``.grad`` (leaf gradients accumulate across
    calls until :meth:`Tensor.zero_grad`).
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if root.is_leaf:
        if root.requires_grad:
            root.grad = np.ones_like(root.data) + (0 if root.grad is None else root.grad)
            return
        raise ValueError("root tensor is not on the tape")
    if root not in tape:
        raise ValueError("root tensor is not on the tape")
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g if node.output.grad is None else node.output.grad + g
        input_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.is_leaf:
                inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
            elif key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi


# --------------------------------------------------------------------------
# Elementwise and reduction ops
# --------------------------------------------------------------------------

def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a, factor):
    a = _as_tensor(a)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def sum_all(a):
    a = _as_tensor(a)
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),), "sum_all")


def reshape(a, shape):
    a = _as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def abs(x):  # noqa: A001 - mirrors the math name
    x = _as_tensor(x)
    sign = np.sign(x.data)
    return _result(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def channel_sum(x):
    """Sum ``[batch, ch, T]`` over channels, keeping a singleton channel axis."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"channel_sum expects [batch, ch, T], got {x.shape}")
    return _result(
        x.data.sum(axis=1, keepdims=True), (x,),
        lambda g: (np.broadcast_to(g, x.shape).copy(),), "channel_sum",
    )


def linear(x, weight, bias):
    """``x @ weight + bias`` for ``x`` [batch, in], ``weight`` [in, out]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(f"linear: bad ranks {x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[0] or weight.shape[1] != bias.shape[0]:
        raise ShapeError(f"linear: shapes {x.shape}, {weight.shape}, {bias.shape} do not conform")

    def back(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), back, "linear")


# --------------------------------------------------------------------------
# Pooling
# --------------------------------------------------------------------------

def max_pool1d(x, window, stride=None):
    """Windowed maximum over the last axis of ``[batch, ch, T]``.

    Ties route the gradient to the first maximal index.
    """
    x = _as_tensor(x)
    stride = window if stride is None else stride
    if x.data.ndim != 3:
        raise ShapeError(f"max_pool1d expects [batch, ch, T], got {x.shape}")
    B, C, T = x.shape
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    if window > T:
        raise ShapeError(f"max_pool1d: window {window} exceeds length {T}")
    n_out = (T - window) // stride + 1
    if window == stride:
        view = x.data[:, :, : n_out * window].reshape(B, C, n_out, window)
    else:
        view = np.lib.stride_tricks.sliding_window_view(x.data, window, axis=2)[:, :, ::stride]
    arg = _first_argmax(view)
    out = np.take_along_axis(view, arg[..., None], axis=-1)[..., 0]
    pos = arg + (np.arange(n_out) * stride)

    def back(g):
        dx = np.zeros_like(x.data)
        if window <= stride:
            np.put_along_axis(dx, pos, g, axis=2)
        else:
            bi, ci, _ = np.indices(pos.shape)
            np.add.at(dx, (bi, ci, pos), g)
        return (dx,)

    return _result(out, (x,), back, "max_pool1d")


def _first_argmax(view):
    # np.argmax over a short trailing axis is slow; compare slices instead
    w = view.shape[-1]
    if w > 16:
        return np.argmax(view, axis=-1)
    best = view[..., 0].copy()
    arg = np.zeros(best.shape, dtype=np.intp)
    for j in range(1, w):
        cur = view[..., j]
        better = cur > best
        arg[better] = j
        np.maximum(best, cur, out=best)
    return arg


def global_max_pool1d(x):
    """``[batch, ch, T]`` -> ``[batch, ch]`` maximum over time."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"global_max_pool1d expects [batch, ch, T], got {x.shape}")
    arg = np.argmax(x.data, axis=2)
    out = np.take_along_axis(x.data, arg[..., None], axis=2)[..., 0]

    def back(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, arg[..., None], g[..., None], axis=2)
        return (dx,)

    return _result(out, (x,), back, "global_max_pool1d")


# --------------------------------------------------------------------------
# Convolution
# --------------------------------------------------------------------------

def _pad_amounts(padding, L):
    padding = padding.lower()
    if padding == "valid":
        return 0, 0
    if padding == "same":
        return (L - 1) // 2, L - 1 - (L - 1) // 2
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv1d(signal, kernels, stride=1, padding="valid", method="auto"):
    """Cross-correlation of ``signal`` [B, C, T] with ``kernels`` [O, C, L].

    ``method`` is ``"direct"``, ``"fft"`` or ``"auto"`` (FFT when L >= 64).
    Output length is ``(T_padded - L) // stride + 1``.
    """
    signal, kernels = _as_tensor(signal), _as_tensor(kernels)
    if signal.data.ndim != 3 or kernels.data.ndim != 3 or signal.shape[1] != kernels.shape[1]:
        raise ShapeError(f"conv1d: signal {signal.shape} and kernels {kernels.shape} do not conform")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    B, C, T = signal.shape
    O, _, L = kernels.shape
    left, right = _pad_amounts(padding, L)
    Tp = T + left + right
    if L > Tp:
        raise ShapeError(f"conv1d: kernel length {L} exceeds padded signal length {Tp}")
    if method == "auto":
        method = "fft" if L >= FFT_MIN_KERNEL else "direct"
    x = signal.data
    if left or right:
        x = np.pad(x, ((0, 0), (0, 0), (left, right)))
    n_full = Tp - L + 1
    if method == "direct":
        out, back_core = _conv_direct(x, kernels.data, stride, n_full)
    elif method == "fft":
        out, back_core = _conv_fft(x, kernels.data, stride, n_full,
                                   signal.requires_grad, kernels.requires_grad)
    else:
        raise ValueError(f"unknown conv1d method {method!r}")

    def back(g):
        dx, dk = back_core(g)
        if dx is not None and (left or right):
            dx = dx[:, :, left : left + T]
        return dx, dk

    return _result(out, (signal, kernels), back, "conv1d")


def _conv_direct(x, k, stride, n_full):
    L = k.shape[2]
    windows = np.lib.stride_tricks.sliding_window_view(x, L, axis=2)[:, :, :n_full:stride]
    # windows: [B, C, T', L]
    out = np.tensordot(windows, k, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        dk = np.tensordot(g, windows, axes=([0, 2], [0, 2]))
        contrib = np.tensordot(g, k, axes=([1], [0]))  # [B, T', C, L]
        dx = np.zeros_like(x)
        t_out = g.shape[2]
        span = stride * (t_out - 1) + 1
        for l in range(L):
            dx[:, :, l : l + span : stride] += contrib[:, :, :, l].transpose(0, 2, 1)
        return dx, dk

    return out, back


def _spectral_mix(a, b, conj_b, contract):
    """Frequency-domain channel mixing.

    contract "c": [B,C,F] x [O,C,F] -> [B,O,F];
    contract "o": [B,O,F] x [O,C,F] -> [B,C,F];
    contract "b": [B,O,F] x [B,C,F] -> [O,C,F].
    """
    if conj_b:
        b = np.conj(b)
    if contract == "c":
        if a.shape[1] == 1:
            return a[:, :1] * b[None, :, 0]
        return np.einsum("bcf,ocf->bof", a, b, optimize=True)
    if contract == "o":
        if b.shape[1] == 1:
            return np.einsum("bof,of->bf", a, b[:, 0], optimize=True)[:, None]
        return np.einsum("bof,ocf->bcf", a, b, optimize=True)
    if b.shape[1] == 1:
        return np.einsum("bof,bf->of", a, b[:, 0], optimize=True)[:, None]
    return np.einsum("bof,bcf->ocf", a, b, optimize=True)


def _conv_fft(x, k, stride, n_full, need_dx, need_dk):
    B, C, Tp = x.shape
    O, _, L = k.shape
    nfft = scipy.fft.next_fast_len(Tp, real=True)
    w = _fft_workers
    X = scipy.fft.rfft(x, nfft, axis=2, workers=w)
    K = scipy.fft.rfft(k, nfft, axis=2, workers=w)
    Y = _spectral_mix(X, K, True, "c")
    full = scipy.fft.irfft(Y, nfft, axis=2, workers=w)[:, :, :n_full]
    del Y
    out = np.ascontiguousarray(full[:, :, ::stride]).astype(x.dtype, copy=False)
    del full

    def back(g):
        if stride > 1:
            gf = np.zeros((B, O, n_full), dtype=g.dtype)
            gf[:, :, ::stride] = g
        else:
            gf = g
        G = scipy.fft.rfft(gf, nfft, axis=2, workers=w)
        dx = dk = None
        if need_dk:
            # sum_b conj(G) X  <->  sum_t g[t] x[t + l]
            dk = scipy.fft.irfft(_spectral_mix(np.conj(G), X, False, "b"), nfft, axis=2, workers=w)
            dk = dk[:, :, :L].astype(k.dtype, copy=False)
        if need_dx:
            dx = scipy.fft.irfft(_spectral_mix(G, K, False, "o"), nfft, axis=2, workers=w)
            dx = dx[:, :, :Tp].astype(x.dtype, copy=False)
        return dx, dk

    return out, back


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------

def weighted_cross_entropy(logits, targets, class_weights, normalizer=None):
    """Class-weighted softmax cross-entropy averaged over the batch.

    The loss is ``sum_i w[y_i] * nll_i / sum_i w[y_i]``. Passing
    ``normalizer`` replaces the denominator, which lets a large batch be
    processed in pieces whose losses (and gradients) add up exactly.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    weights = np.asarray(class_weights, dtype=np.float64)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    n_classes = logits.shape[1]
    if weights.shape != (n_classes,) or np.any(weights <= 0):
        raise ValueError("class weights must be positive, one per class")
    if targets.shape != (logits.shape[0],) or np.any((targets < 0) | (targets >= n_classes)):
        raise ValueError(f"targets must be class indices in [0, {n_classes})")
    targets = targets.astype(np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    nll = log_norm - z[np.arange(len(targets)), targets]
    w = weights[targets]
    denom = w.sum() if normalizer is None else float(normalizer)
    loss = np.asarray((w * nll).sum() / denom, dtype=logits.dtype)

    def back(g):
        p = np.exp(z - log_norm[:, None])
        p[np.arange(len(targets)), targets] -= 1.0
        return ((g * (w / denom))[:, None] * p).astype(logits.dtype, copy=False),

    return _result(loss, (logits,), back, "weighted_cross_entropy")


def softmax(logits):
    """Plain numpy softmax over the last axis (no tape)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam update applied in place to ``params``."""
    if len(params) != len(grads):
        raise ShapeError("adam_step: params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("adam_step: optimizer state does not match parameter list")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def finite_diff_check(f, params, epsilon=1e-6):
    """Max relative error between backward() and central differences.

    ``f`` maps the list ``params`` (read through their ``.data``) to a scalar
    Tensor. The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f(params)
    backward(tape, out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = flat[i]
            plus = float(f(params).data)
            flat[i] = orig - epsilon
            lo = flat[i]
            minus = float(f(params).data)
            flat[i] = orig
            # divide by the step actually represented, not the nominal one
            numeric = (plus - minus) / (hi - lo)
            err = np.abs(a_flat[i] - numeric) / max(np.abs(a_flat[i]), np.abs(numeric), 1e-8)
            worst = max(worst, float(err))
    return worst
