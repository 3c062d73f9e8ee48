"""Multi-task objective, optimiser, synthetic data and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .attdec import FusionConfig, lm_nll
from .ctc import Vocab
from .encoder import FeatureSequence, speed_perturb
from .model import JointModel
from .nn import ConfigurationError, ParamStore


@dataclass
class MtlConfig:
    lam: float = 0.5
    epochs: int = 15
    clip_norm: float = 5.0
    seed: int = 1
    speed_factors: Tuple[float, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive")


def mtl_loss(lam: float, ctc_nll: float, att_nll: float) -> float:
    """``lam * ctc + (1 - lam) * att``; the zero-weight term is dropped so inf*0 never occurs."""
    if lam == 0.0:
        return att_nll
    if lam == 1.0:
        return ctc_nll
    return lam * ctc_nll + (1.0 - lam) * att_nll


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_grad_norm(grads: Mapping[str, np.ndarray], tau: float) -> Mapping[str, np.ndarray]:
    """Rescale all gradients in place so their joint L2 norm is at most ``tau``."""
    if tau <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads.values())
    if norm > tau:
        factor = tau / norm
        for g in grads.values():
            g *= factor
    return grads


class AdaDelta:
    """AdaDelta with running averages of squared gradients and squared updates."""

    def __init__(self, rho: float = 0.95, eps: float = 1e-8):
        self.rho = rho
        self.eps = eps
        self.sq_grad: Dict[str, np.ndarray] = {}
        self.sq_delta: Dict[str, np.ndarray] = {}

    def update(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        rho, eps = self.rho, self.eps
        for name, g in grads.items():
            if name not in self.sq_grad:
                self.sq_grad[name] = np.zeros_like(g)
                self.sq_delta[name] = np.zeros_like(g)
            eg = self.sq_grad[name]
            ed = self.sq_delta[name]
            eg *= rho
            eg += (1.0 - rho) * g * g
            delta = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
            ed *= rho
            ed += (1.0 - rho) * delta * delta
            params[name] += delta

    def step(self, store: ParamStore) -> None:
        self.update(store.params, store.grads)


# ---------------------------------------------------------------------------
# synthetic character-transduction task
# ---------------------------------------------------------------------------


@dataclass
class ToyTaskSpec:
    vocab: str = "abcde"
    feat_dim: int = 8
    dur_min: int = 8
    dur_max: int = 12
    noise: float = 0.3
    len_min: int = 2
    len_max: int = 5
    seed: int = 7
    # adjacent equal labels emit one unbroken template run, which no model can split
    no_repeat: bool = True

    def __post_init__(self):
        if self.dur_min < 1 or self.dur_max < self.dur_min:
            raise ConfigurationError("need 1 <= dur_min <= dur_max")
        if self.len_min < 1 or self.len_max < self.len_min:
            raise ConfigurationError("need 1 <= len_min <= len_max")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")
        if self.no_repeat and len(self.vocab) < 2 and self.len_max > 1:
            raise ConfigurationError("no_repeat needs at least two characters")

    def templates(self) -> np.ndarray:
        t = np.random.default_rng(self.seed).normal(size=(len(self.vocab), self.feat_dim))
        for i in range(len(t)):
            for j in range(i):
                if np.allclose(t[i], t[j]):
                    raise ConfigurationError("character templates collide")
        return t


@dataclass
class Utterance:
    uid: str
    features: FeatureSequence
    labels: Tuple[int, ...]


def generate_toy_dataset(spec: ToyTaskSpec, n: int, split: int = 0, durations=None) -> List[Utterance]:
    """``n`` utterances; templates depend only on ``spec.seed``, content on ``split`` too.

    ``durations`` (optional int) pins every segment length, mostly for tests.
    """
    if n < 1:
        raise ValueError("dataset size must be >= 1")
    templates = spec.templates()
    rng = np.random.default_rng([spec.seed, split + 1])
    U = len(spec.vocab)
    out = []
    for k in range(n):
        L = int(rng.integers(spec.len_min, spec.len_max + 1))
        labels = []
        for _ in range(L):
            if spec.no_repeat and labels:
                c = int(rng.integers(1, U))
                c = c if c < labels[-1] else c + 1
            else:
                c = int(rng.integers(1, U + 1))
            labels.append(c)
        if durations is None:
            durs = rng.integers(spec.dur_min, spec.dur_max + 1, size=L)
        else:
            durs = np.full(L, int(durations))
        frames = np.concatenate([np.repeat(templates[c - 1][None], d, axis=0) for c, d in zip(labels, durs)])
        if spec.noise > 0:
            frames = frames + spec.noise * rng.normal(size=frames.shape)
        out.append(Utterance(f"s{split}-{k:05d}", FeatureSequence(frames), tuple(labels)))
    return out


def augment_speed(data: Sequence[Utterance], factors: Sequence[float]) -> List[Utterance]:
    """Original utterances plus one time-rescaled copy per factor."""
    out = list(data)
    for f in factors:
        for u in data:
            out.append(Utterance(f"{u.uid}-sp{f:g}", FeatureSequence(speed_perturb(u.features.frames, f)), u.labels))
    return out


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


@dataclass
class EpochStats:
    epoch: int
    ctc_nll: float
    att_nll: float
    mtl: float
    skipped: int = 0
    extra: Dict[str, float] = field(default_factory=dict)


def train_epoch(
    model: JointModel,
    optimizer: AdaDelta,
    dataset: Sequence[Utterance],
    cfg: MtlConfig,
    epoch: int,
    fusion: FusionConfig = FusionConfig(),
    lm: Optional[ParamStore] = None,
) -> EpochStats:
    """One pass over ``dataset`` in a seeded shuffled order, batch size one.

    With ``fusion.mode == "joint"`` the LM is updated together with the
    model; in ``separate`` mode it stays frozen.
    """
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
    train_lm = lm is not None and fusion.mode == "joint"
    ctc_sum = att_sum = mtl_sum = 0.0
    used = skipped = 0
    for idx in order:
        utt = dataset[idx]
        model.store.zero_grad()
        if lm is not None:
            lm.zero_grad()
        ctc_nll, att_nll = model.loss_and_grads(utt.features, utt.labels, cfg.lam, fusion, lm)
        if not np.isfinite(ctc_nll):
            skipped += 1
            continue
        grads = dict(model.store.grads)
        if train_lm:
            grads.update({f"lm/{k}": v for k, v in lm.grads.items()})
        clip_grad_norm(grads, cfg.clip_norm)
        optimizer.update(model.store.params, model.store.grads)
        if train_lm:
            optimizer.update({f"lm/{k}": v for k, v in lm.params.items()},
                             {f"lm/{k}": v for k, v in lm.grads.items()})
        ctc_sum += ctc_nll
        att_sum += att_nll
        mtl_sum += mtl_loss(cfg.lam, ctc_nll, att_nll)
        used += 1
    n = max(used, 1)
    return EpochStats(epoch, ctc_sum / n, att_sum / n, mtl_sum / n, skipped)


def lm_perplexity(lm: ParamStore, texts: Sequence[Sequence[int]], vocab: Vocab) -> float:
    """Per-symbol perplexity, eos included."""
    total = sum(lm_nll(lm, t, vocab.sos, vocab.eos, backward=False) for t in texts)
    count = sum(len(t) + 1 for t in texts)
    return math.exp(total / count)


def train_lm_epoch(
    lm: ParamStore, optimizer: AdaDelta, texts: Sequence[Sequence[int]], vocab: Vocab,
    epoch: int, seed: int, clip_norm: float = 5.0,
) -> float:
    """One shuffled pass of character-LM training; returns training perplexity."""
    order = np.random.default_rng([seed, epoch]).permutation(len(texts))
    total = 0.0
    count = 0
    for idx in order:
        lm.zero_grad()
        total += lm_nll(lm, texts[idx], vocab.sos, vocab.eos)
        count += len(texts[idx]) + 1
        clip_grad_norm(lm.grads, clip_norm)
        optimizer.step(lm)
    return math.exp(total / count)
