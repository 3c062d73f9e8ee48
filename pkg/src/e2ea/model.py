"""Joint CTC/attention model: one shared encoder feeding two heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attdec import DecoderConfig, FusionConfig, attention_nll, init_decoder, init_rnnlm
from .ctc import Vocab, ctc_loss
from .encoder import EncoderConfig, EncoderOutput, FeatureSequence, encode, encode_backward, init_encoder
from .nn import ParamStore, init_linear, linear_backward, linear_forward, log_softmax, log_softmax_backward


@dataclass
class ModelConfig:
    vocab: str = "abcde"
    feat_dim: int = 8
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)


class JointModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, store: Optional[ParamStore] = None):
        self.cfg = cfg
        self.vocab = Vocab(cfg.vocab)
        if store is None:
            store = ParamStore(seed)
            init_encoder(store, cfg.encoder, cfg.feat_dim)
            init_linear(store, "ctc.out", cfg.encoder.output_dim, self.vocab.grid_size)
            init_decoder(store, cfg.decoder, self.vocab.n, cfg.encoder.output_dim)
        self.store = store

    def prepare(self, x: FeatureSequence) -> FeatureSequence:
        if self.cfg.encoder.variant == "vgg-blstm" and x.channels is None:
            return x.with_deltas()
        return x

    def encode(self, x: FeatureSequence) -> EncoderOutput:
        return encode(self.store, self.cfg.encoder, self.prepare(x))

    def ctc_logp(self, enc: EncoderOutput) -> np.ndarray:
        logits, _ = linear_forward(self.store, "ctc.out", enc.hidden)
        return log_softmax(logits)

    def loss_and_grads(
        self,
        x: FeatureSequence,
        target: Sequence[int],
        lam: float,
        fusion: FusionConfig = FusionConfig(),
        lm: Optional[ParamStore] = None,
    ):
        """One utterance: both heads, weighted backprop into the shared encoder.

        Gradients accumulate in ``self.store`` (and ``lm`` when fused).
        Returns ``(ctc_nll, att_nll)``; if the CTC target is unalignable the
        CTC NLL is inf and no gradient is accumulated.
        """
        enc = self.encode(x)
        H = enc.hidden
        logits, lin_in = linear_forward(self.store, "ctc.out", H)
        logp = log_softmax(logits)
        ctc_nll, dlogp = ctc_loss(logp, target)
        if not np.isfinite(ctc_nll):
            return ctc_nll, float("nan")
        v = self.vocab
        att_nll, dH_att = attention_nll(self.store, H, target, v.sos, v.eos, fusion, lm,
                                        backward=lam < 1.0, scale=1.0 - lam)
        dH = np.zeros_like(H)
        if lam > 0.0:
            dlogits = log_softmax_backward(lam * dlogp, logp)
            dH += linear_backward(self.store, "ctc.out", dlogits, lin_in)
        if lam < 1.0:
            dH += dH_att
        encode_backward(self.store, self.cfg.encoder, dH, enc)
        return ctc_nll, att_nll


def new_lm(vocab: Vocab, hidden: int, seed: int) -> ParamStore:
    store = ParamStore(seed)
    init_rnnlm(store, vocab.n, hidden)
    return store
