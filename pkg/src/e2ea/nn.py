"""Small neural layers with explicit forward and backward passes.

Everything runs in float64 on numpy arrays.  Each layer exposes a
``*_forward`` returning ``(output, cache)`` and a matching ``*_backward``
that takes the upstream gradient plus the cache, accumulates parameter
gradients into a :class:`ParamStore`, and returns the input gradient.
Parameters of one layer live under a common name prefix in the store,
e.g. ``enc.l0.fw.Wx``.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NEG_INF = -np.inf


class ConfigurationError(ValueError):
    """Inconsistent shapes or hyper-parameters."""


class EmptyInputError(ValueError):
    """A sequence operation received zero frames."""


# ---------------------------------------------------------------------------
# parameter storage
# ---------------------------------------------------------------------------


class ParamStore:
    """Named float64 tensors, each paired with a gradient buffer of equal shape."""

    def __init__(self, seed: int = 0, init_scale: float = 0.1):
        self.seed = seed
        self.init_scale = init_scale
        self._rng = np.random.default_rng(seed)
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, shape, init: str = "uniform") -> np.ndarray:
        if name in self.params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "uniform":
            value = self._rng.uniform(-self.init_scale, self.init_scale, size=shape)
        elif init == "zeros":
            value = np.zeros(shape)
        else:
            raise ConfigurationError(f"unknown init {init!r}")
        self.params[name] = value.astype(np.float64)
        self.grads[name] = np.zeros(shape)
        return self.params[name]

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if name in self.params and self.params[name].shape != value.shape:
            raise ConfigurationError(
                f"{name}: shape {value.shape} != {self.params[name].shape}"
            )
        self.params[name] = value.copy()
        self.grads[name] = np.zeros(value.shape)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list:
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        other = ParamStore(self.seed, self.init_scale)
        for name, value in self.params.items():
            other.set(name, value)
        return other


# ---------------------------------------------------------------------------
# stable scalar / vector primitives
# ---------------------------------------------------------------------------


def log_sum_exp(values) -> float:
    """Return log(sum(exp(values))) via max-shift.  All -inf input gives -inf."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty list")
    assert not np.isnan(v).any(), "NaN passed to log_sum_exp"
    m = v.max()
    if m == NEG_INF:
        return NEG_INF
    if m == np.inf:
        return np.inf
    return float(m + math.log(np.exp(v - m).sum()))


def softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_backward(dlogp: np.ndarray, logp: np.ndarray) -> np.ndarray:
    return dlogp - np.exp(logp) * dlogp.sum(axis=-1, keepdims=True)


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------


def init_linear(store: ParamStore, prefix: str, n_in: int, n_out: int) -> None:
    store.add(f"{prefix}.W", (n_in, n_out))
    store.add(f"{prefix}.b", (n_out,))


def linear_forward(store, prefix, x):
    return x @ store[f"{prefix}.W"] + store[f"{prefix}.b"], x


def linear_backward(store, prefix, dy, x):
    W = store[f"{prefix}.W"]
    if dy.ndim == 1:
        store.grads[f"{prefix}.W"] += np.outer(x, dy)
        store.grads[f"{prefix}.b"] += dy
    else:
        store.grads[f"{prefix}.W"] += x.T @ dy
        store.grads[f"{prefix}.b"] += dy.sum(axis=0)
    return dy @ W.T


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------
# Gate layout along the 4H axis: input, forget, cell candidate, output.


def init_lstm(store: ParamStore, prefix: str, n_in: int, hidden: int) -> None:
    store.add(f"{prefix}.Wx", (n_in, 4 * hidden))
    store.add(f"{prefix}.Wh", (hidden, 4 * hidden))
    store.add(f"{prefix}.b", (4 * hidden,))


def _lstm_hidden(store, prefix) -> int:
    return store[f"{prefix}.Wh"].shape[0]


def _lstm_gates(z, H):
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H : 2 * H])
    g = np.tanh(z[..., 2 * H : 3 * H])
    o = sigmoid(z[..., 3 * H :])
    return i, f, g, o


def lstm_step(store, prefix, x, h_prev, c_prev):
    """One LSTM step.  Returns ``(h, c, cache)``."""
    Wx = store[f"{prefix}.Wx"]
    H = _lstm_hidden(store, prefix)
    if x.shape[-1] != Wx.shape[0] or h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise ConfigurationError(
            f"{prefix}: lstm_step got x{x.shape} h{h_prev.shape} c{c_prev.shape}, "
            f"expected input {Wx.shape[0]} hidden {H}"
        )
    z = x @ Wx + h_prev @ store[f"{prefix}.Wh"] + store[f"{prefix}.b"]
    i, f, g, o = _lstm_gates(z, H)
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x, h_prev, c_prev, i, f, g, o, tc)


def _gate_grads(dh, dc, c_prev, i, f, g, o, tc):
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate(
        [
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            dh * tc * o * (1.0 - o),
        ],
        axis=-1,
    )
    return dz, dc * f


def lstm_step_backward(store, prefix, dh, dc, cache):
    """Backward of :func:`lstm_step`.  Returns ``(dx, dh_prev, dc_prev)``."""
    x, h_prev, c_prev, i, f, g, o, tc = cache
    dz, dc_prev = _gate_grads(dh, dc, c_prev, i, f, g, o, tc)
    store.grads[f"{prefix}.Wx"] += np.outer(x, dz)
    store.grads[f"{prefix}.Wh"] += np.outer(h_prev, dz)
    store.grads[f"{prefix}.b"] += dz
    dx = store[f"{prefix}.Wx"] @ dz
    dh_prev = store[f"{prefix}.Wh"] @ dz
    return dx, dh_prev, dc_prev


def lstm_forward(store, prefix, X, reverse: bool = False):
    """Run an LSTM from zero state over the rows of ``X`` (T x D).

    With ``reverse`` the sequence is consumed from the last row to the
    first; output row t is still aligned with input row t.
    """
    T = X.shape[0]
    if T == 0:
        raise EmptyInputError(f"{prefix}: empty input sequence")
    H = _lstm_hidden(store, prefix)
    if X.shape[1] != store[f"{prefix}.Wx"].shape[0]:
        raise ConfigurationError(
            f"{prefix}: input dim {X.shape[1]} != {store[f'{prefix}.Wx'].shape[0]}"
        )
    Wh = store[f"{prefix}.Wh"]
    Z = X @ store[f"{prefix}.Wx"] + store[f"{prefix}.b"]
    order = range(T - 1, -1, -1) if reverse else range(T)
    Hs = np.zeros((T, H))
    Cs = np.zeros((T, H))
    gates = np.zeros((T, 4 * H))
    h = np.zeros(H)
    c = np.zeros(H)
    # one tanh for all gates: sigmoid(z) = 0.5 * tanh(0.5 * z) + 0.5
    pre_scale = np.full(4 * H, 0.5)
    pre_scale[2 * H : 3 * H] = 1.0
    post_shift = np.full(4 * H, 0.5)
    post_shift[2 * H : 3 * H] = 0.0
    Z *= pre_scale
    Whs = Wh * pre_scale
    for t in order:
        s = np.tanh(Z[t] + h @ Whs)
        s *= pre_scale
        s += post_shift
        gates[t] = s
        c = s[H : 2 * H] * c + s[:H] * s[2 * H : 3 * H]
        h = s[3 * H :] * np.tanh(c)
        Hs[t] = h
        Cs[t] = c
    return Hs, (X, Hs, Cs, gates, reverse)


def lstm_backward(store, prefix, dHs, cache):
    X, Hs, Cs, gates, reverse = cache
    T, H = Hs.shape
    Wh = store[f"{prefix}.Wh"]
    order = list(range(T)) if reverse else list(range(T - 1, -1, -1))
    dZ = np.zeros((T, 4 * H))
    Hprev = np.zeros((T, H))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    zero = np.zeros(H)
    for k, t in enumerate(order):
        # the step consumed before t in forward order
        prev = order[k + 1] if k + 1 < T else None
        c_prev = Cs[prev] if prev is not None else zero
        if prev is not None:
            Hprev[t] = Hs[prev]
        i = gates[t, :H]
        f = gates[t, H : 2 * H]
        g = gates[t, 2 * H : 3 * H]
        o = gates[t, 3 * H :]
        tc = np.tanh(Cs[t])
        dz, dc_next = _gate_grads(dHs[t] + dh_next, dc_next, c_prev, i, f, g, o, tc)
        dZ[t] = dz
        dh_next = Wh @ dz
    store.grads[f"{prefix}.Wx"] += X.T @ dZ
    store.grads[f"{prefix}.Wh"] += Hprev.T @ dZ
    store.grads[f"{prefix}.b"] += dZ.sum(axis=0)
    return dZ @ store[f"{prefix}.Wx"].T


def init_blstm(store: ParamStore, prefix: str, n_in: int, hidden: int) -> None:
    init_lstm(store, f"{prefix}.fw", n_in, hidden)
    init_lstm(store, f"{prefix}.bw", n_in, hidden)


def blstm_forward(store, prefix, X):
    """Bidirectional LSTM: ``T x D -> T x 2H`` (forward half first)."""
    if X.shape[0] == 0:
        raise EmptyInputError(f"{prefix}: empty input sequence")
    hf, cf = lstm_forward(store, f"{prefix}.fw", X)
    hb, cb = lstm_forward(store, f"{prefix}.bw", X, reverse=True)
    return np.concatenate([hf, hb], axis=1), (cf, cb)


def blstm_backward(store, prefix, dY, cache):
    cf, cb = cache
    H = dY.shape[1] // 2
    dX = lstm_backward(store, f"{prefix}.fw", dY[:, :H], cf)
    dX += lstm_backward(store, f"{prefix}.bw", dY[:, H:], cb)
    return dX


# ---------------------------------------------------------------------------
# 2-D convolution (3x3, same padding, ReLU) and max pooling (3x3, stride 2)
# ---------------------------------------------------------------------------


def init_conv2d(store: ParamStore, prefix: str, c_in: int, c_out: int) -> None:
    store.add(f"{prefix}.W", (c_out, c_in, 3, 3))
    store.add(f"{prefix}.b", (c_out,))


def conv2d_forward(store, prefix, X, relu: bool = True):
    """3x3 convolution with zero padding 1 over a ``C x T x F`` image."""
    W = store[f"{prefix}.W"]
    c_out, c_in = W.shape[:2]
    if X.ndim != 3 or X.shape[0] != c_in:
        raise ConfigurationError(f"{prefix}: expected {c_in} input channels, got {X.shape}")
    _, T, F = X.shape
    padded = np.pad(X, ((0, 0), (1, 1), (1, 1)))
    # (C, T, F, 3, 3) -> (T*F, C*9)
    cols = sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = cols.transpose(1, 2, 0, 3, 4).reshape(T * F, c_in * 9)
    out = cols @ W.reshape(c_out, -1).T + store[f"{prefix}.b"]
    out = out.T.reshape(c_out, T, F)
    if relu:
        out = np.maximum(out, 0.0)
    return out, (cols, X.shape, out if relu else None)


def conv2d_backward(store, prefix, dY, cache):
    cols, in_shape, relu_out = cache
    W = store[f"{prefix}.W"]
    c_out = W.shape[0]
    c_in, T, F = in_shape
    if relu_out is not None:
        dY = dY * (relu_out > 0)
    dmat = dY.reshape(c_out, T * F).T
    store.grads[f"{prefix}.W"] += (dmat.T @ cols).reshape(W.shape)
    store.grads[f"{prefix}.b"] += dmat.sum(axis=0)
    dcols = (dmat @ W.reshape(c_out, -1)).reshape(T, F, c_in, 3, 3)
    dpad = np.zeros((c_in, T + 2, F + 2))
    for u in range(3):
        for v in range(3):
            dpad[:, u : u + T, v : v + F] += dcols[:, :, :, u, v].transpose(2, 0, 1)
    return dpad[:, 1:-1, 1:-1]


def maxpool2d_forward(X):
    """3x3 max pooling, stride 2, ceil mode; output ``C x ceil(T/2) x ceil(F/2)``.

    Windows are centred on even input indices, so the pad is one -inf row
    before and one or two after.
    """
    C, T, F = X.shape
    if T < 1 or F < 1:
        raise EmptyInputError("maxpool2d on an empty image")
    To, Fo = (T + 1) // 2, (F + 1) // 2
    padded = np.full((C, 2 * To + 1, 2 * Fo + 1), NEG_INF)
    padded[:, 1 : T + 1, 1 : F + 1] = X
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))[:, ::2, ::2]
    flat = win.reshape(C, To, Fo, 9)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (X.shape, arg)


def maxpool2d_backward(dY, cache):
    (C, T, F), arg = cache
    To, Fo = dY.shape[1:]
    dpad = np.zeros((C, 2 * To + 1, 2 * Fo + 1))
    u, v = np.divmod(arg, 3)
    ci, ti, fi = np.indices(arg.shape)
    np.add.at(dpad, (ci, 2 * ti + u, 2 * fi + v), dY)
    return dpad[:, 1 : T + 1, 1 : F + 1]


# ---------------------------------------------------------------------------
# location-aware attention
# ---------------------------------------------------------------------------


def init_location_attention(
    store: ParamStore, prefix: str, key_dim: int, query_dim: int, att_dim: int,
    filters: int, width: int,
) -> None:
    if width % 2 != 1:
        raise ConfigurationError(f"attention filter width must be odd, got {width}")
    if filters < 1:
        raise ConfigurationError("attention needs at least one filter")
    store.add(f"{prefix}.Wk", (key_dim, att_dim))
    store.add(f"{prefix}.Wq", (query_dim, att_dim))
    store.add(f"{prefix}.Wf", (filters, att_dim))
    store.add(f"{prefix}.b", (att_dim,))
    store.add(f"{prefix}.w", (att_dim,))
    store.add(f"{prefix}.filt", (filters, width))


def attention_keys(store, prefix, Henc):
    """Project encoder frames once per utterance; reused by every step."""
    return Henc @ store[f"{prefix}.Wk"]


def _prev_windows(a_prev, width):
    half = width // 2
    return sliding_window_view(np.pad(a_prev, half), width)


def location_attention_step(store, prefix, Henc, q_prev, a_prev, keys=None):
    """Score frames from content and from convolved previous weights.

    Returns ``(a, r, cache)`` where ``a`` sums to one over the T frames and
    ``r = a @ Henc``.
    """
    T = Henc.shape[0]
    if T == 0:
        raise EmptyInputError(f"{prefix}: attention over zero frames")
    if keys is None:
        keys = attention_keys(store, prefix, Henc)
    filt = store[f"{prefix}.filt"]
    win = _prev_windows(a_prev, filt.shape[1])  # T x W
    conv = win @ filt.T  # T x K
    pre = keys + (q_prev @ store[f"{prefix}.Wq"] + store[f"{prefix}.b"]) + conv @ store[f"{prefix}.Wf"]
    act = np.tanh(pre)
    e = act @ store[f"{prefix}.w"]
    a = softmax(e)
    r = a @ Henc
    return a, r, (Henc, q_prev, win, conv, act, a)


def location_attention_backward(store, prefix, da, dr, cache):
    """Returns ``(dHenc, dq_prev, da_prev)``; dHenc includes the key path."""
    Henc, q_prev, win, conv, act, a = cache
    filt = store[f"{prefix}.filt"]
    K, W = filt.shape
    T = Henc.shape[0]
    dH = np.outer(a, dr)
    da = da + Henc @ dr
    de = a * (da - a @ da)
    w = store[f"{prefix}.w"]
    store.grads[f"{prefix}.w"] += act.T @ de
    dpre = np.outer(de, w) * (1.0 - act * act)
    dsum = dpre.sum(axis=0)
    store.grads[f"{prefix}.b"] += dsum
    store.grads[f"{prefix}.Wq"] += np.outer(q_prev, dsum)
    dq = store[f"{prefix}.Wq"] @ dsum
    store.grads[f"{prefix}.Wk"] += Henc.T @ dpre
    dH += dpre @ store[f"{prefix}.Wk"].T
    store.grads[f"{prefix}.Wf"] += conv.T @ dpre
    dconv = dpre @ store[f"{prefix}.Wf"].T  # T x K
    store.grads[f"{prefix}.filt"] += dconv.T @ win
    dwin = dconv @ filt  # T x W
    half = W // 2
    dpad = np.zeros(T + 2 * half)
    for j in range(W):
        dpad[j : j + T] += dwin[:, j]
    return dH, dq, dpad[half : half + T]


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


class GradientCheckError(AssertionError):
    pass


def finite_diff_check(
    f: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
) -> float:
    """Compare analytic gradients against central differences.

    ``f`` re-evaluates the scalar objective from the *current* contents of
    ``params``; each coordinate is perturbed in place and restored.  Returns
    the max over coordinates of ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    worst = 0.0
    for name in names if names is not None else list(params):
        theta = params[name]
        grad = np.asarray(analytic[name])
        flat = theta.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = f()
            flat[k] = orig - eps
            fm = f()
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradientCheckError(f"non-finite objective perturbing {name}[{k}]")
            num = (fp - fm) / (2.0 * eps)
            ana = grad.reshape(-1)[k]
            rel = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, rel)
    return worst
