"""Attention decoder, character RNN-LM and pre-softmax fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .nn import (
    ConfigurationError,
    EmptyInputError,
    ParamStore,
    attention_keys,
    init_linear,
    init_location_attention,
    init_lstm,
    location_attention_backward,
    location_attention_step,
    log_softmax,
    lstm_backward,
    lstm_forward,
    lstm_step,
    lstm_step_backward,
)

FUSION_MODES = ("none", "separate", "joint")


@dataclass
class DecoderConfig:
    hidden: int = 320
    att_dim: int = 320
    att_filters: int = 10
    att_width: int = 101


@dataclass
class FusionConfig:
    mode: str = "none"
    gamma: float = 0.3

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ConfigurationError(f"unknown fusion mode {self.mode!r}")
        if self.gamma < 0:
            raise ConfigurationError("fusion gamma must be >= 0")

    @property
    def weight(self) -> float:
        """Multiplier applied to LM pre-activations."""
        return {"none": 0.0, "separate": self.gamma, "joint": 1.0}[self.mode]

    @property
    def uses_lm(self) -> bool:
        return self.mode != "none"


@dataclass
class DecoderState:
    h: np.ndarray
    c: np.ndarray
    att: np.ndarray
    prev: int


@dataclass
class RnnLmState:
    h: np.ndarray
    c: np.ndarray
    prev: int


def _input_row(label: int, n_rows: int) -> int:
    # rows 0..n-1 are characters 1..n, row n is sos (= n + 2)
    n = n_rows - 1
    if 1 <= label <= n:
        return label - 1
    if label == n + 2:
        return n
    raise ValueError(f"label {label} cannot be fed to the decoder/LM (expected a character or sos)")


# ---------------------------------------------------------------------------
# attention decoder
# ---------------------------------------------------------------------------


def init_decoder(store: ParamStore, cfg: DecoderConfig, vocab_size: int, enc_dim: int, prefix: str = "dec") -> None:
    """``vocab_size`` is |U|; outputs cover U + eos, inputs cover U + sos."""
    store.add(f"{prefix}.embed", (vocab_size + 1, cfg.hidden))
    init_location_attention(
        store, f"{prefix}.att", enc_dim, cfg.hidden, cfg.att_dim, cfg.att_filters, cfg.att_width
    )
    init_lstm(store, f"{prefix}.lstm", cfg.hidden + enc_dim, cfg.hidden)
    init_linear(store, f"{prefix}.out", cfg.hidden, vocab_size + 1)


def decoder_init_state(store: ParamStore, enc_len: int, sos: int, prefix: str = "dec") -> DecoderState:
    if enc_len < 1:
        raise EmptyInputError("decoder needs a non-empty encoder output")
    H = store[f"{prefix}.lstm.Wh"].shape[0]
    return DecoderState(np.zeros(H), np.zeros(H), np.full(enc_len, 1.0 / enc_len), sos)


def decoder_step(store: ParamStore, Henc: np.ndarray, state: DecoderState, keys=None, prefix: str = "dec"):
    """Attend, advance the LSTM on ``[embed(prev); context]``, project.

    Returns ``(pre_softmax, new_state)``; ``pre_softmax`` has |U| + 1 entries
    with eos last.
    """
    if Henc.shape[0] == 0:
        raise EmptyInputError("decoder_step over an empty encoder output")
    emb = store[f"{prefix}.embed"]
    a, r, _ = location_attention_step(store, f"{prefix}.att", Henc, state.h, state.att, keys)
    x = np.concatenate([emb[_input_row(state.prev, emb.shape[0])], r])
    h, c, _ = lstm_step(store, f"{prefix}.lstm", x, state.h, state.c)
    pre = h @ store[f"{prefix}.out.W"] + store[f"{prefix}.out.b"]
    return pre, DecoderState(h, c, a, None)


def decoder_advance(state: DecoderState, label: int) -> DecoderState:
    """Record the emitted label so the next step embeds it."""
    return DecoderState(state.h, state.c, state.att, label)


# ---------------------------------------------------------------------------
# character RNN-LM
# ---------------------------------------------------------------------------


def init_rnnlm(store: ParamStore, vocab_size: int, hidden: int, prefix: str = "lm") -> None:
    store.add(f"{prefix}.embed", (vocab_size + 1, hidden))
    init_lstm(store, f"{prefix}.lstm", hidden, hidden)
    init_linear(store, f"{prefix}.out", hidden, vocab_size + 1)


def rnnlm_init_state(store: ParamStore, sos: int, prefix: str = "lm") -> RnnLmState:
    H = store[f"{prefix}.lstm.Wh"].shape[0]
    return RnnLmState(np.zeros(H), np.zeros(H), sos)


def rnnlm_step(store: ParamStore, state: RnnLmState, label: int, prefix: str = "lm"):
    """Feed ``label``; return next-label pre-activations and the new state."""
    emb = store[f"{prefix}.embed"]
    x = emb[_input_row(label, emb.shape[0])]
    h, c, _ = lstm_step(store, f"{prefix}.lstm", x, state.h, state.c)
    pre = h @ store[f"{prefix}.out.W"] + store[f"{prefix}.out.b"]
    return pre, RnnLmState(h, c, label)


def lm_forward(store: ParamStore, inputs: Sequence[int], prefix: str = "lm"):
    """Teacher-forced LM over ``inputs``; returns ``(L x V pre-activations, cache)``."""
    emb = store[f"{prefix}.embed"]
    rows = np.array([_input_row(x, emb.shape[0]) for x in inputs])
    X = emb[rows]
    Hs, lc = lstm_forward(store, f"{prefix}.lstm", X)
    pre = Hs @ store[f"{prefix}.out.W"] + store[f"{prefix}.out.b"]
    return pre, (rows, Hs, lc)


def lm_backward(store: ParamStore, dpre: np.ndarray, cache, prefix: str = "lm") -> None:
    rows, Hs, lc = cache
    store.grads[f"{prefix}.out.W"] += Hs.T @ dpre
    store.grads[f"{prefix}.out.b"] += dpre.sum(axis=0)
    dH = dpre @ store[f"{prefix}.out.W"].T
    dX = lstm_backward(store, f"{prefix}.lstm", dH, lc)
    np.add.at(store.grads[f"{prefix}.embed"], rows, dX)


def lm_nll(store: ParamStore, target: Sequence[int], sos: int, eos: int, backward: bool = True,
           prefix: str = "lm") -> float:
    """Sequence NLL of ``target + eos`` under the LM; accumulates gradients."""
    inputs = [sos, *target]
    outputs = np.array([*target, eos]) - 1
    pre, cache = lm_forward(store, inputs, prefix)
    logp = log_softmax(pre)
    idx = np.arange(len(outputs))
    nll = -float(logp[idx, outputs].sum())
    if backward:
        d = np.exp(logp)
        d[idx, outputs] -= 1.0
        lm_backward(store, d, cache, prefix)
    return nll


# ---------------------------------------------------------------------------
# fusion and teacher-forced loss
# ---------------------------------------------------------------------------


def fuse(dec_pre: np.ndarray, lm_pre: Optional[np.ndarray], cfg: FusionConfig) -> np.ndarray:
    """Combine decoder and LM pre-activations; return a log-distribution."""
    if cfg.mode == "none" or lm_pre is None:
        if cfg.uses_lm and lm_pre is None:
            raise ConfigurationError(f"fusion mode {cfg.mode!r} needs LM pre-activations")
        return log_softmax(dec_pre)
    if np.shape(dec_pre) != np.shape(lm_pre):
        raise ConfigurationError(f"fusion dims differ: {np.shape(dec_pre)} vs {np.shape(lm_pre)}")
    return log_softmax(dec_pre + cfg.weight * lm_pre)


def attention_nll(
    store: ParamStore,
    Henc: np.ndarray,
    target: Sequence[int],
    sos: int,
    eos: int,
    fusion: FusionConfig = FusionConfig(),
    lm_store: Optional[ParamStore] = None,
    backward: bool = True,
    scale: float = 1.0,
    prefix: str = "dec",
):
    """Teacher-forced ``-log p_att(target + eos | X)``.

    With ``backward`` the gradients of ``scale * nll`` are accumulated into
    the decoder (and, when fused, LM) stores and ``d(scale * nll)/dHenc`` is
    returned; otherwise that slot is None.
    """
    T = Henc.shape[0]
    state = decoder_init_state(store, T, sos, prefix)
    inputs = [sos, *target]
    outputs = [c - 1 for c in (*target, eos)]
    keys = attention_keys(store, f"{prefix}.att", Henc)
    emb = store[f"{prefix}.embed"]
    Hd = emb.shape[1]
    lm_pre = lm_cache = None
    if fusion.uses_lm:
        if lm_store is None:
            raise ConfigurationError(f"fusion mode {fusion.mode!r} needs an LM")
        lm_pre, lm_cache = lm_forward(lm_store, inputs)
    h, c, a = state.h, state.c, state.att
    steps = []
    nll = 0.0
    for l, label in enumerate(inputs):
        row = _input_row(label, emb.shape[0])
        a, r, att_cache = location_attention_step(store, f"{prefix}.att", Henc, h, a, keys)
        x = np.concatenate([emb[row], r])
        h, c, lstm_cache = lstm_step(store, f"{prefix}.lstm", x, h, c)
        pre = h @ store[f"{prefix}.out.W"] + store[f"{prefix}.out.b"]
        logp = fuse(pre, None if lm_pre is None else lm_pre[l], fusion)
        nll -= logp[outputs[l]]
        steps.append((row, att_cache, lstm_cache, h, logp))
    if not backward:
        return float(nll), None

    dHenc = np.zeros_like(Henc)
    dlm = np.zeros_like(lm_pre) if lm_pre is not None else None
    dh = np.zeros(Hd)
    dc = np.zeros(Hd)
    da = np.zeros(T)
    Wout = store[f"{prefix}.out.W"]
    for l in range(len(inputs) - 1, -1, -1):
        row, att_cache, lstm_cache, h_l, logp = steps[l]
        dz = np.exp(logp)
        dz[outputs[l]] -= 1.0
        dz *= scale
        if dlm is not None:
            dlm[l] = fusion.weight * dz
        store.grads[f"{prefix}.out.W"] += np.outer(h_l, dz)
        store.grads[f"{prefix}.out.b"] += dz
        dh = dh + Wout @ dz
        dx, dh_prev, dc = lstm_step_backward(store, f"{prefix}.lstm", dh, dc, lstm_cache)
        store.grads[f"{prefix}.embed"][row] += dx[:Hd]
        dH_part, dq, da = location_attention_backward(store, f"{prefix}.att", da, dx[Hd:], att_cache)
        dHenc += dH_part
        dh = dh_prev + dq
    if dlm is not None and lm_store is not None:
        lm_backward(lm_store, dlm, lm_cache)
    return float(nll), dHenc


def attention_logprob(store, Henc, target, sos, eos, fusion=FusionConfig(), lm_store=None) -> float:
    """Forward-only ``log p_att(target + eos | X)`` (fused if configured)."""
    nll, _ = attention_nll(store, Henc, target, sos, eos, fusion, lm_store, backward=False)
    return -nll

