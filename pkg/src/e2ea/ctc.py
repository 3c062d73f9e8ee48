"""CTC head: loss, sequence log-probability and prefix scoring.

A posterior grid is a ``T x V`` array of framewise log-posteriors where
column 0 is blank and column ``k`` (1..|U|) is character ``k``.  All
dynamic programming runs in the log domain.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np

from .nn import NEG_INF, log_softmax

BLANK = 0


class Vocab:
    """Character inventory with reserved ids.

    blank = 0, characters = 1..n, eos = n + 1, sos = n + 2.  The decoder and
    LM output over characters plus eos (index ``id - 1``); their input
    embeddings cover characters plus sos.
    """

    def __init__(self, chars: str):
        if len(set(chars)) != len(chars) or not chars:
            raise ValueError(f"vocabulary must be non-empty distinct characters, got {chars!r}")
        self.chars = chars
        self.n = len(chars)
        self.blank = BLANK
        self.eos = self.n + 1
        self.sos = self.n + 2
        self._index = {ch: i + 1 for i, ch in enumerate(chars)}

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other):
        return isinstance(other, Vocab) and other.chars == self.chars

    @property
    def char_ids(self) -> range:
        return range(1, self.n + 1)

    @property
    def output_size(self) -> int:
        """Decoder/LM output classes: characters plus eos."""
        return self.n + 1

    @property
    def grid_size(self) -> int:
        """CTC classes: blank plus characters."""
        return self.n + 1

    def encode(self, text: str) -> Tuple[int, ...]:
        try:
            return tuple(self._index[ch] for ch in text)
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.chars[i - 1] for i in ids)

    def is_char(self, label: int) -> bool:
        return 1 <= label <= self.n


@dataclass
class CtcPrefixState:
    log_gamma_n: np.ndarray  # prefix emitted, last frame non-blank
    log_gamma_b: np.ndarray  # prefix emitted, last frame blank
    prefix_logprob: float


def posterior_grid(logits: np.ndarray) -> np.ndarray:
    return log_softmax(logits)


def _extended(target: Sequence[int]) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=int)
    ext[1::2] = target
    return ext


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to align ``target``: one per label plus a blank per repeat."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_target(target, V):
    for c in target:
        if not 1 <= c < V:
            raise ValueError(f"CTC target label {c} outside 1..{V - 1}")


def _forward(logp, ext, skip):
    T, S = logp.shape[0], ext.size
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = logp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = logp[0, ext[1]]
    emit = logp[:, ext]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + emit[t]
    return alpha


def _backward(logp, ext, skip):
    T, S = logp.shape[0], ext.size
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
    emit = logp[:, ext]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[2:], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + emit[t]
    return beta


def _skip_mask(ext):
    skip = np.zeros(ext.size, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return skip


def ctc_full_logprob(logp: np.ndarray, target: Sequence[int]) -> float:
    """log p_ctc(target | X) by the forward algorithm."""
    logp = np.asarray(logp, dtype=np.float64)
    target = tuple(target)
    _check_target(target, logp.shape[1])
    if logp.shape[0] < min_frames(target):
        return NEG_INF
    ext = _extended(target)
    alpha = _forward(logp, ext, _skip_mask(ext))
    return float(np.logaddexp(alpha[-1, -1], alpha[-1, -2]) if ext.size > 1 else alpha[-1, -1])


def ctc_loss(logp: np.ndarray, target: Sequence[int]):
    """Negative log-likelihood and its gradient with respect to ``logp``.

    An unalignable target (too few frames) gives ``(inf, zeros)``.
    """
    logp = np.asarray(logp, dtype=np.float64)
    target = tuple(target)
    _check_target(target, logp.shape[1])
    grad = np.zeros_like(logp)
    if logp.shape[0] < min_frames(target):
        return np.inf, grad
    ext = _extended(target)
    skip = _skip_mask(ext)
    alpha = _forward(logp, ext, skip)
    beta = _backward(logp, ext, skip)
    if ext.size > 1:
        log_total = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        log_total = alpha[-1, -1]
    if log_total == NEG_INF:
        return np.inf, grad
    # alpha and beta both include the emission at t
    occ = alpha + beta - logp[:, ext]
    for k in np.unique(ext):
        cols = occ[:, ext == k]
        m = cols.max(axis=1, keepdims=True)
        finite = np.isfinite(m[:, 0])
        lse = np.full(cols.shape[0], NEG_INF)
        lse[finite] = m[finite, 0] + np.log(np.exp(cols[finite] - m[finite]).sum(axis=1))
        grad[:, k] = -np.exp(lse - log_total)
    return float(-log_total), grad


# ---------------------------------------------------------------------------
# prefix scoring
# ---------------------------------------------------------------------------


def prefix_init(logp: np.ndarray) -> CtcPrefixState:
    """State of the empty prefix: only blanks emitted so far."""
    logp = np.asarray(logp, dtype=np.float64)
    gb = np.cumsum(logp[:, BLANK])
    return CtcPrefixState(np.full(logp.shape[0], NEG_INF), gb, 0.0)


def prefix_extend_many(state: CtcPrefixState, logp: np.ndarray, last: int | None, labels: Sequence[int]):
    """Extend a prefix by each of ``labels`` (characters only) at once.

    ``last`` is the final label of the current prefix, or None if empty.
    Returns ``(scores, gamma_n, gamma_b)`` with shapes ``C``, ``T x C``, ``T x C``.
    """
    labels = np.asarray(labels, dtype=int)
    T = logp.shape[0]
    C = labels.size
    emit = logp[:, labels]  # T x C
    gn, gb = state.log_gamma_n, state.log_gamma_b
    both = np.logaddexp(gn, gb)
    phi = np.repeat(both[:, None], C, axis=1)
    if last is not None:
        same = labels == last
        phi[:, same] = gb[:, None]
    r_n = np.full((T, C), NEG_INF)
    r_b = np.full((T, C), NEG_INF)
    if last is None:
        r_n[0] = emit[0]
    blank = logp[:, BLANK]
    for t in range(1, T):
        r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + emit[t]
        r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + blank[t]
    terms = np.vstack([r_n[:1], phi[:-1] + emit[1:]])
    m = terms.max(axis=0)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        psi = safe + np.log(np.exp(terms - safe).sum(axis=0))
    psi = np.where(np.isfinite(m), psi, NEG_INF)
    return psi, r_n, r_b


def prefix_terminal(state: CtcPrefixState) -> float:
    """Score of closing the prefix with eos: the full-sequence log-probability."""
    return float(np.logaddexp(state.log_gamma_n[-1], state.log_gamma_b[-1]))


def prefix_extend(state: CtcPrefixState, logp: np.ndarray, prefix: Sequence[int], c: int, eos: int):
    """Extend ``prefix`` by one label.

    For a character, returns the new :class:`CtcPrefixState` whose
    ``prefix_logprob`` is the total probability of every sequence that
    starts with ``prefix + [c]``.  For ``eos``, returns the float
    ``log p_ctc(prefix | X)``.
    """
    logp = np.asarray(logp, dtype=np.float64)
    if c == eos:
        return prefix_terminal(state)
    if not 1 <= c < logp.shape[1]:
        raise ValueError(f"cannot extend a CTC prefix by label {c} (blank/sos are not emittable)")
    last = prefix[-1] if len(prefix) else None
    psi, r_n, r_b = prefix_extend_many(state, logp, last, [c])
    return CtcPrefixState(r_n[:, 0].copy(), r_b[:, 0].copy(), float(psi[0]))


# ---------------------------------------------------------------------------
# brute-force oracles
# ---------------------------------------------------------------------------


def collapse(path: Iterable[int]) -> Tuple[int, ...]:
    out = []
    prev = None
    for z in path:
        if z != prev and z != BLANK:
            out.append(z)
        prev = z
    return tuple(out)


def brute_force_collapse_table(logp: np.ndarray, max_paths: int = 200_000) -> Dict[Tuple[int, ...], float]:
    """Sum every framewise path into its collapsed label sequence.

    Returns a map ``sequence -> log probability`` over all sequences with
    non-zero mass.  Independent of the forward algorithm.
    """
    logp = np.asarray(logp, dtype=np.float64)
    T, V = logp.shape
    if V**T > max_paths:
        raise ValueError(f"{V}^{T} paths exceeds the brute-force limit {max_paths}")
    probs: Dict[Tuple[int, ...], list] = {}
    for path in itertools.product(range(V), repeat=T):
        score = float(logp[np.arange(T), path].sum())
        probs.setdefault(collapse(path), []).append(score)
    out = {}
    for seq, scores in probs.items():
        s = np.array(scores)
        m = s.max()
        out[seq] = float(m + np.log(np.exp(s - m).sum())) if np.isfinite(m) else NEG_INF
    return out


def brute_force_prefix_oracle(logp: np.ndarray, prefix: Sequence[int]) -> float:
    """log of the summed full-sequence probability of all sequences starting with ``prefix``.

    Enumerates every label sequence of length <= T and scores each with
    :func:`ctc_full_logprob`.  Limited to T <= 8 and |U| <= 3.
    """
    logp = np.asarray(logp, dtype=np.float64)
    T, V = logp.shape
    n = V - 1
    if T > 8 or n > 3:
        raise ValueError(f"prefix oracle refuses T={T}, |U|={n} (limit T<=8, |U|<=3)")
    prefix = tuple(prefix)
    if len(prefix) > T:
        return NEG_INF
    scores = []
    for extra in range(T - len(prefix) + 1):
        for tail in itertools.product(range(1, V), repeat=extra):
            scores.append(ctc_full_logprob(logp, prefix + tail))
    s = np.array(scores)
    m = s.max()
    if not np.isfinite(m):
        return NEG_INF
    return float(m + np.log(np.exp(s - m).sum()))
