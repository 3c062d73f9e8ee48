"""Finite-difference checks for every hand-written backward pass.

Each check builds a tiny seeded instance, reduces the component output to a
scalar with random weights, and compares the analytic gradient (parameters
and inputs) against central differences.
"""

from __future__ import annotations

import time
from typing import Callable, Dict, Iterable, List, Tuple

import numpy as np

from . import nn
from .attdec import DecoderConfig, FusionConfig, attention_nll, init_decoder, init_rnnlm, lm_nll
from .ctc import ctc_loss
from .encoder import EncoderConfig, FeatureSequence, compute_deltas, encode, encode_backward, init_encoder
from .model import JointModel, ModelConfig
from .nn import ParamStore, finite_diff_check

TOLERANCE = 1e-4
EPS = 1e-5
# whole-model objective sums many terms; its roundoff needs a wider step
MTL_EPS = 1e-4
# Parameter scale of each check instance.  Central differences at eps=1e-5 carry
# ~1e-11 absolute error, so a coordinate whose true gradient is below ~1e-7
# fails the relative test by noise alone; too small a scale starves attention
# gradients, too large saturates LSTM gates.  Scales are pinned per component.
INIT_SCALE = 1.0
SCALES = {"encoder_vgg": 0.4, "attention_nll": 1.5, "fused_lm_nll": 1.5}


def _scale(component: str) -> float:
    return SCALES.get(component, INIT_SCALE)


def _run(store: ParamStore, loss: Callable[[bool], float], inputs: Dict[str, np.ndarray] | None = None,
         input_grads: Callable[[], Dict[str, np.ndarray]] | None = None, eps: float = EPS,
         names=None) -> float:
    """``loss(True)`` must accumulate grads (and fill input grads); ``loss(False)`` only evaluates."""
    store.zero_grad()
    loss(True)
    analytic = {k: v.copy() for k, v in store.grads.items()}
    params = dict(store.params)
    if inputs:
        analytic.update(input_grads())
        params.update(inputs)
    return finite_diff_check(lambda: loss(False), params, analytic, eps, names)


def check_linear(seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore(seed, init_scale=INIT_SCALE)
    nn.init_linear(store, "lin", 4, 3)
    x = rng.normal(size=(5, 4))
    y = rng.integers(0, 3, size=5)
    box = {}

    def loss(backward):
        z, cache = nn.linear_forward(store, "lin", x)
        logp = nn.log_softmax(z)
        val = -logp[np.arange(5), y].sum()
        if backward:
            d = np.exp(logp)
            d[np.arange(5), y] -= 1
            box["x"] = nn.linear_backward(store, "lin", d, cache)
        return val

    return _run(store, loss, {"x": x}, lambda: {"x": box["x"]}, eps)


def check_lstm_step(seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore(seed, init_scale=INIT_SCALE)
    nn.init_lstm(store, "cell", 3, 2)
    x, h0, c0 = rng.normal(size=3), rng.normal(size=2), rng.normal(size=2)
    wh, wc = rng.normal(size=2), rng.normal(size=2)
    box = {}

    def loss(backward):
        h, c, cache = nn.lstm_step(store, "cell", x, h0, c0)
        if backward:
            box["x"], box["h0"], box["c0"] = nn.lstm_step_backward(store, "cell", wh, wc, cache)
        return float(wh @ h + wc @ c)

    return _run(store, loss, {"x": x, "h0": h0, "c0": c0}, lambda: dict(box), eps)


def check_blstm(seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore(seed, init_scale=INIT_SCALE)
    nn.init_blstm(store, "b", 2, 2)
    X = rng.normal(size=(3, 2))
    R = rng.normal(size=(3, 4))
    box = {}

    def loss(backward):
        Y, cache = nn.blstm_forward(store, "b", X)
        if backward:
            box["X"] = nn.blstm_backward(store, "b", R, cache)
        return float((R * Y).sum())

    return _run(store, loss, {"X": X}, lambda: dict(box), eps)


def check_conv2d(seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore(seed, init_scale=INIT_SCALE)
    nn.init_conv2d(store, "conv", 2, 3)
    X = rng.normal(size=(2, 4, 4))
    R = rng.normal(size=(3, 4, 4))
    box = {}

    def loss(backward):
        Y, cache = nn.conv2d_forward(store, "conv", X)
        if backward:
            box["X"] = nn.conv2d_backward(store, "conv", R, cache)
        return float((R * Y).sum())

    return _run(store, loss, {"X": X}, lambda: dict(box), eps)


def check_maxpool2d(seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore(seed)
    X = rng.normal(size=(2, 5, 4))
    R = rng.normal(size=(2, 3, 2))
    box = {}

    def loss(backward):
        Y, cache = nn.maxpool2d_forward(X)
        if backward:
            box["X"] = nn.maxpool2d_backward(R, cache)
        return float((R * Y).sum())

    return _run(store, loss, {"X": X}, lambda: dict(box), eps)


def check_location_attention(seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore(seed, init_scale=INIT_SCALE)
    T, E, Q = 5, 3, 2
    nn.init_location_attention(store, "att", E, Q, 4, filters=2, width=3)
    Henc = rng.normal(size=(T, E))
    q = rng.normal(size=Q)
    a_prev = nn.softmax(rng.normal(size=T))
    Ra, Rr = rng.normal(size=T), rng.normal(size=E)
    box = {}

    def loss(backward):
        a, r, cache = nn.location_attention_step(store, "att", Henc, q, a_prev)
        if backward:
            box["Henc"], box["q"], box["a_prev"] = nn.location_attention_backward(store, "att", Ra, Rr, cache)
        return float(Ra @ a + Rr @ r)

    return _run(store, loss, {"Henc": Henc, "q": q, "a_prev": a_prev}, lambda: dict(box), eps)


def _check_encoder(seed: int, variant: str, eps: float) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore(seed, init_scale=_scale(f"encoder_{variant.split('-')[0]}"))
    if variant == "blstm":
        cfg = EncoderConfig("blstm", num_layers=2, hidden=2, proj=3, subsample_layers=(0, 1))
        T = 5
    else:
        cfg = EncoderConfig("vgg-blstm", num_layers=1, hidden=2, proj=2, subsample_layers=(), vgg_channels=(2, 2))
        T = 4
    D = 4
    init_encoder(store, cfg, D)
    frames = rng.normal(size=(T, D))
    chans = compute_deltas(frames)
    Tout = -(-T // 4)
    R = rng.normal(size=(Tout, cfg.output_dim))
    box = {}

    def loss(backward):
        x = FeatureSequence(frames, chans if variant != "blstm" else None)
        out = encode(store, cfg, x)
        if backward:
            box["input"] = encode_backward(store, cfg, R, out)
        return float((R * out.hidden).sum())

    inputs = {"input": frames if variant == "blstm" else chans}
    return _run(store, loss, inputs, lambda: dict(box), eps)


def check_encoder_blstm(seed: int, eps: float = EPS) -> float:
    return _check_encoder(seed, "blstm", eps)


def check_encoder_vgg(seed: int, eps: float = EPS) -> float:
    return _check_encoder(seed, "vgg-blstm", eps)


def check_ctc_loss(seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore(seed)
    logits = rng.normal(size=(6, 4))
    target = tuple(int(c) for c in rng.integers(1, 4, size=2))
    box = {}

    def loss(backward):
        logp = nn.log_softmax(logits)
        nll, d = ctc_loss(logp, target)
        if backward:
            box["logits"] = nn.log_softmax_backward(d, logp)
        return nll

    return _run(store, loss, {"logits": logits}, lambda: dict(box), eps)


def _decoder_setup(seed, component):
    rng = np.random.default_rng(seed)
    store = ParamStore(seed, init_scale=_scale(component))
    n, E = 3, 3
    init_decoder(store, DecoderConfig(hidden=3, att_dim=3, att_filters=2, att_width=3), n, E)
    Henc = rng.normal(size=(4, E))
    target = tuple(int(c) for c in rng.integers(1, n + 1, size=2))
    return rng, store, n, Henc, target


def check_attention_nll(seed: int, eps: float = EPS) -> float:
    _, store, n, Henc, target = _decoder_setup(seed, "attention_nll")
    box = {}

    def loss(backward):
        nll, dH = attention_nll(store, Henc, target, n + 2, n + 1, backward=backward)
        if backward:
            box["Henc"] = dH
        return nll

    return _run(store, loss, {"Henc": Henc}, lambda: dict(box), eps)


def check_fused_lm_nll(seed: int, eps: float = EPS) -> float:
    """Decoder and LM gradients through pre-softmax fusion, both fusion modes."""
    worst = 0.0
    for mode in ("separate", "joint"):
        _, store, n, Henc, target = _decoder_setup(seed, "fused_lm_nll")
        init_rnnlm(store, n, 3, prefix="lm")
        fusion = FusionConfig(mode, gamma=0.7)
        # LM parameters live in the same store so one check covers both
        box = {}

        def loss(backward):
            nll, dH = attention_nll(store, Henc, target, n + 2, n + 1, fusion, store, backward=backward)
            if backward:
                box["Henc"] = dH
            return nll

        worst = max(worst, _run(store, loss, {"Henc": Henc}, lambda: dict(box), eps))
    return worst


def check_lm_nll(seed: int, eps: float = EPS) -> float:
    rng = np.random.default_rng(seed)
    store = ParamStore(seed, init_scale=INIT_SCALE)
    init_rnnlm(store, 3, 3)
    target = tuple(int(c) for c in rng.integers(1, 4, size=3))
    return _run(store, lambda backward: lm_nll(store, target, 5, 4, backward=backward), eps=eps)


def _scaled_store(cfg: ModelConfig, seed: int) -> ParamStore:
    store = JointModel(cfg, seed).store
    for name in store:
        store.params[name] *= INIT_SCALE / store.init_scale
    return store


def check_mtl_model(seed: int, eps: float = MTL_EPS) -> float:
    """Whole model: shared encoder receives lam*grad(ctc) + (1-lam)*grad(att).

    Only encoder and CTC-head parameters are compared; decoder parameters are
    covered by ``attention_nll`` and are far below the noise floor here.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(
        vocab="ab", feat_dim=3,
        encoder=EncoderConfig("blstm", num_layers=2, hidden=2, proj=2, subsample_layers=(0, 1)),
        decoder=DecoderConfig(hidden=2, att_dim=2, att_filters=1, att_width=3),
    )
    model = JointModel(cfg, store=_scaled_store(cfg, seed))
    x = FeatureSequence(rng.normal(size=(9, 3)))
    target = (1, 2)
    lam = 0.3

    def loss(backward):
        if backward:
            c, a = model.loss_and_grads(x, target, lam)
            return lam * c + (1 - lam) * a
        enc = model.encode(x)
        c, _ = ctc_loss(model.ctc_logp(enc), target)
        a, _ = attention_nll(model.store, enc.hidden, target, model.vocab.sos, model.vocab.eos, backward=False)
        return lam * c + (1 - lam) * a

    return _run(model.store, loss, eps=eps, names=model.store.names("enc.") + model.store.names("ctc."))


CHECKS: Dict[str, Callable[[int], float]] = {
    "linear": check_linear,
    "lstm_step": check_lstm_step,
    "blstm": check_blstm,
    "conv2d": check_conv2d,
    "maxpool2d": check_maxpool2d,
    "location_attention": check_location_attention,
    "encoder_blstm": check_encoder_blstm,
    "encoder_vgg": check_encoder_vgg,
    "ctc_loss": check_ctc_loss,
    "attention_nll": check_attention_nll,
    "fused_lm_nll": check_fused_lm_nll,
    "lm_nll": check_lm_nll,
}


def run_suite(seeds: Iterable[int] = (0, 1, 2), checks: Dict[str, Callable[[int], float]] | None = None,
              tol: float = TOLERANCE) -> List[Tuple[str, float, bool]]:
    """Worst relative error per component over ``seeds``."""
    results = []
    for name, fn in (checks or CHECKS).items():
        worst = max(fn(s) for s in seeds)
        results.append((name, worst, worst < tol))
    return results


if __name__ == "__main__":  # pragma: no cover
    t = time.time()
    for row in run_suite():
        print(*row, sep="\t")
    print(f"{time.time() - t:.1f}s")
