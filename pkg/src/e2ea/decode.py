"""Label-synchronous beam search with optional CTC and LM scoring.

Three modes share one search loop:

* ``attention``: hypotheses ranked by the accumulated attention score.
* ``rescoring``: attention search, then the n-best list is re-ranked by
  ``lam * log p_ctc + (1 - lam) * att``.
* ``one-pass``: every expansion is ranked by ``lam * ctc_prefix + (1 - lam) * att``
  where the CTC term is the prefix probability of the extended hypothesis
  (or the full-sequence probability when eos closes it).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .attdec import (
    DecoderState,
    FusionConfig,
    RnnLmState,
    attention_logprob,
    decoder_advance,
    decoder_init_state,
    decoder_step,
    fuse,
    rnnlm_init_state,
    rnnlm_step,
)
from .ctc import CtcPrefixState, ctc_full_logprob, prefix_extend_many, prefix_init, prefix_terminal
from .encoder import EncoderOutput, FeatureSequence
from .model import JointModel
from .nn import NEG_INF, ConfigurationError, EmptyInputError, ParamStore, attention_keys

MODES = ("attention", "rescoring", "one-pass")


@dataclass
class BeamConfig:
    beam_width: int = 20
    lam: float = 0.5
    mode: str = "one-pass"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    max_len_ratio: float = 1.0
    max_len: Optional[int] = None  # absolute cap; overrides the ratio when set
    nbest: Optional[int] = None  # rescoring list size; defaults to beam_width

    def __post_init__(self):
        if self.beam_width < 1:
            raise ConfigurationError("beam width must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown decode mode {self.mode!r}")
        if not 0.0 < self.max_len_ratio <= 1.0:
            raise ConfigurationError("max_len_ratio must lie in (0, 1]")

    def length_limit(self, enc_len: int) -> int:
        if self.max_len is not None:
            return self.max_len
        return max(1, int(np.floor(self.max_len_ratio * enc_len)))


@dataclass
class Hypothesis:
    prefix: Tuple[int, ...]
    att_score: float
    score: float
    dec_state: DecoderState
    ctc_state: Optional[CtcPrefixState] = None
    lm_state: Optional[RnnLmState] = None
    finished: bool = False


@dataclass
class NBestEntry:
    sequence: Tuple[int, ...]
    att_score: float
    ctc_score: float
    joint_score: float


@dataclass
class DecodeResult:
    best: Tuple[int, ...]
    nbest: List[NBestEntry]
    stats: dict = field(default_factory=dict)


def joint_score(lam: float, ctc: float, att: float) -> float:
    """``lam * ctc + (1 - lam) * att`` without forming ``0 * -inf``."""
    if lam == 0.0:
        return att
    if lam == 1.0:
        return ctc
    return lam * ctc + (1.0 - lam) * att


def _rank_key(score: float, seq: Tuple[int, ...]):
    return (-score, seq)


def _search(model: JointModel, enc: EncoderOutput, cfg: BeamConfig, lam: float, use_ctc: bool,
            lm: Optional[ParamStore]) -> Tuple[List[Hypothesis], int]:
    H = enc.hidden
    T = H.shape[0]
    if T == 0:
        raise EmptyInputError("cannot decode an empty encoder output")
    v = model.vocab
    store = model.store
    fusion = cfg.fusion
    if fusion.uses_lm and lm is None:
        raise ConfigurationError(f"fusion mode {fusion.mode!r} needs an LM")
    keys = attention_keys(store, "dec.att", H)
    grid = model.ctc_logp(enc) if use_ctc else None
    chars = np.array(list(v.char_ids))
    root = Hypothesis(
        (), 0.0, 0.0, decoder_init_state(store, T, v.sos),
        prefix_init(grid) if use_ctc else None,
        rnnlm_init_state(lm, v.sos) if fusion.uses_lm else None,
    )
    live = [root]
    finished: List[Hypothesis] = []
    limit = cfg.length_limit(T)
    beam = cfg.beam_width
    expanded = 0
    for step in range(limit + 1):
        cands = []
        last_step = step == limit
        for hyp in live:
            expanded += 1
            pre, dstate = decoder_step(store, H, hyp.dec_state, keys)
            lm_pre = lstate = None
            if fusion.uses_lm:
                lm_pre, lstate = rnnlm_step(lm, hyp.lm_state, hyp.lm_state.prev)
            logp = fuse(pre, lm_pre, fusion)
            # eos
            att = hyp.att_score + logp[v.eos - 1]
            ctc = prefix_terminal(hyp.ctc_state) if use_ctc else 0.0
            cands.append((joint_score(lam, ctc, att), hyp.prefix, v.eos, att, None, hyp, dstate, lstate))
            if last_step:
                continue
            if use_ctc:
                last = hyp.prefix[-1] if hyp.prefix else None
                with np.errstate(invalid="ignore"):
                    psi, r_n, r_b = prefix_extend_many(hyp.ctc_state, grid, last, chars)
            for j, c in enumerate(chars):
                att_c = hyp.att_score + logp[c - 1]
                ctc_c = float(psi[j]) if use_ctc else 0.0
                ctc_state = (j, psi, r_n, r_b) if use_ctc else None
                cands.append((joint_score(lam, ctc_c, att_c), hyp.prefix + (int(c),), int(c), att_c,
                              ctc_state, hyp, dstate, lstate))
        cands.sort(key=lambda x: _rank_key(x[0], x[1] if x[2] != v.eos else x[1] + (v.eos,)))
        live = []
        for score, seq, label, att, ctc_state, parent, dstate, lstate in cands[:beam]:
            if label == v.eos:
                finished.append(Hypothesis(seq, att, score, dstate, parent.ctc_state, lstate, True))
                continue
            cs = None
            if ctc_state is not None:
                j, psi, r_n, r_b = ctc_state
                cs = CtcPrefixState(r_n[:, j].copy(), r_b[:, j].copy(), float(psi[j]))
            ls = RnnLmState(lstate.h, lstate.c, label) if lstate is not None else None
            live.append(Hypothesis(seq, att, score, decoder_advance(dstate, label), cs, ls))
        if not live:
            break
        if len(finished) >= beam:
            kth = sorted((h.score for h in finished), reverse=True)[beam - 1]
            if max(h.score for h in live) < kth:
                break
    finished.sort(key=lambda h: _rank_key(h.score, h.prefix))
    return finished, expanded


def _entries(model, grid, hyps, n) -> List[NBestEntry]:
    return [NBestEntry(h.prefix, h.att_score, ctc_full_logprob(grid, h.prefix), h.score) for h in hyps[:n]]


def beam_search_attention(model: JointModel, enc: EncoderOutput, cfg: BeamConfig,
                          lm: Optional[ParamStore] = None) -> DecodeResult:
    hyps, expanded = _search(model, enc, cfg, 0.0, False, lm)
    grid = model.ctc_logp(enc)
    n = cfg.nbest or cfg.beam_width
    nbest = _entries(model, grid, hyps, n)
    return DecodeResult(nbest[0].sequence, nbest, {"expanded": expanded})


def rescore_with_ctc(model: JointModel, enc: EncoderOutput, nbest: Sequence[NBestEntry], lam: float) -> DecodeResult:
    """Re-rank complete hypotheses by the joint score; unalignable ones sink to the end."""
    grid = model.ctc_logp(enc)
    out = []
    for e in nbest:
        ctc = ctc_full_logprob(grid, e.sequence)
        out.append(NBestEntry(e.sequence, e.att_score, ctc, joint_score(lam, ctc, e.att_score)))
    out.sort(key=lambda e: _rank_key(e.joint_score, e.sequence))
    return DecodeResult(out[0].sequence, out, {"rescored": len(out)})


def beam_search_one_pass(model: JointModel, enc: EncoderOutput, cfg: BeamConfig,
                         lm: Optional[ParamStore] = None) -> DecodeResult:
    hyps, expanded = _search(model, enc, cfg, cfg.lam, True, lm)
    grid = model.ctc_logp(enc)
    nbest = _entries(model, grid, hyps, cfg.beam_width)
    return DecodeResult(nbest[0].sequence, nbest, {"expanded": expanded})


def decode(model: JointModel, enc: EncoderOutput, cfg: BeamConfig, lm: Optional[ParamStore] = None) -> DecodeResult:
    if cfg.mode == "attention":
        return beam_search_attention(model, enc, cfg, lm)
    if cfg.mode == "rescoring":
        first = beam_search_attention(model, enc, cfg, lm)
        result = rescore_with_ctc(model, enc, first.nbest, cfg.lam)
        result.stats.update(first.stats)
        return result
    return beam_search_one_pass(model, enc, cfg, lm)


def decode_features(model: JointModel, x: FeatureSequence, cfg: BeamConfig, lm: Optional[ParamStore] = None) -> DecodeResult:
    return decode(model, model.encode(x), cfg, lm)


def greedy_decode(model: JointModel, enc: EncoderOutput, max_len: Optional[int] = None,
                  fusion: FusionConfig = FusionConfig(), lm: Optional[ParamStore] = None) -> Tuple[int, ...]:
    """Pick the most likely label each step until eos (or the length cap)."""
    v = model.vocab
    H = enc.hidden
    keys = attention_keys(model.store, "dec.att", H)
    state = decoder_init_state(model.store, H.shape[0], v.sos)
    lstate = rnnlm_init_state(lm, v.sos) if fusion.uses_lm else None
    limit = H.shape[0] if max_len is None else max_len
    out: List[int] = []
    while True:
        pre, state = decoder_step(model.store, H, state, keys)
        lm_pre = None
        if lstate is not None:
            lm_pre, lstate = rnnlm_step(lm, lstate, lstate.prev)
        logp = fuse(pre, lm_pre, fusion)
        label = v.eos if len(out) >= limit else int(np.argmax(logp)) + 1
        if label == v.eos:
            return tuple(out)
        out.append(label)
        state = decoder_advance(state, label)
        if lstate is not None:
            lstate = RnnLmState(lstate.h, lstate.c, label)


# ---------------------------------------------------------------------------
# exhaustive search oracle
# ---------------------------------------------------------------------------


def all_sequences(n_chars: int, max_len: int, limit: int = 100_000):
    if (n_chars + 1) ** max_len > limit:
        raise ValueError(f"{n_chars + 1}^{max_len} sequences exceeds the oracle limit {limit}")
    for L in range(max_len + 1):
        yield from itertools.product(range(1, n_chars + 1), repeat=L)


def sequence_scores(model: JointModel, enc: EncoderOutput, max_len: int,
                    fusion: FusionConfig = FusionConfig(), lm: Optional[ParamStore] = None):
    """Teacher-forced attention and full CTC log-probabilities of every sequence up to ``max_len``."""
    v = model.vocab
    grid = model.ctc_logp(enc)
    out = []
    for seq in all_sequences(v.n, max_len):
        att = attention_logprob(model.store, enc.hidden, seq, v.sos, v.eos, fusion, lm)
        out.append((seq, att, ctc_full_logprob(grid, seq)))
    return out


def exhaustive_oracle(model: JointModel, enc: EncoderOutput, lam: float, max_len: int,
                      fusion: FusionConfig = FusionConfig(), lm: Optional[ParamStore] = None,
                      scores=None) -> Tuple[Tuple[int, ...], float]:
    """Best sequence of length <= ``max_len`` under the joint score; ties go to the smaller sequence."""
    if scores is None:
        scores = sequence_scores(model, enc, max_len, fusion, lm)
    best = min(((joint_score(lam, ctc, att), seq) for seq, att, ctc in scores),
               key=lambda x: _rank_key(*x))
    return best[1], best[0]


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("CER is undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def corpus_cer(pairs: Sequence[Tuple[Sequence, Sequence]]) -> float:
    """Total edit distance over total reference length."""
    errs = sum(edit_distance(r, h) for r, h in pairs)
    total = sum(len(r) for r, _ in pairs)
    if total == 0:
        raise ValueError("corpus CER over empty references")
    return errs / total
