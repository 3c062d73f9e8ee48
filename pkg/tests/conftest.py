import numpy as np
import pytest

from e2ea.attdec import DecoderConfig
from e2ea.ctc import posterior_grid
from e2ea.encoder import EncoderConfig, FeatureSequence
from e2ea.model import JointModel, ModelConfig


def random_grid(rng, T, V, sharpness=1.5):
    """Random framewise log-posteriors, T x V, rows normalised."""
    return posterior_grid(sharpness * rng.normal(size=(T, V)))


def tiny_model(seed, vocab="abc", feat_dim=3, hidden=4, scale=1.0, variant="blstm"):
    """Untrained joint model with parameters drawn from uniform(-scale, scale)."""
    enc = EncoderConfig(variant, num_layers=2, hidden=hidden,
                        subsample_layers=(0, 1) if variant == "blstm" else (),
                        vgg_channels=(2, 2))
    cfg = ModelConfig(vocab, feat_dim, enc, DecoderConfig(hidden=hidden, att_dim=hidden, att_filters=2, att_width=3))
    model = JointModel(cfg, seed)
    for name in model.store:
        model.store.params[name] *= scale / model.store.init_scale
    return model


def tiny_input(seed, T=24, D=3):
    return FeatureSequence(np.random.default_rng(seed + 1000).normal(size=(T, D)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def read_tsv(path):
    """Data rows (header and summary lines skipped) and ``#key -> value`` summaries."""
    rows, summary = [], {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if parts[0].startswith("#"):
                if len(parts) == 2:
                    summary[parts[0][1:]] = parts[1]
                continue
            rows.append(parts)
    return rows, summary


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The shipped toy preset trained end to end through the CLI (pinned seed 1).

    Produces the MTL model, the separately trained LM and four decodes of the
    test split; about three minutes on one core.
    """
    import time

    from e2ea.cli import main

    d = tmp_path_factory.mktemp("toy")
    timings = {}
    t0 = time.perf_counter()
    assert main(["train", "--config", "toy", "--ckpt", str(d / "model.ckpt"), "--out", str(d / "train.tsv")]) == 0
    timings["train"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    assert main(["lm-train", "--config", "toy", "--ckpt", str(d / "lm.ckpt"), "--out", str(d / "lm.tsv")]) == 0
    timings["lm-train"] = time.perf_counter() - t0
    decodes = {
        "attention": ["--mode", "attention"],
        "rescoring": ["--mode", "rescoring"],
        "one-pass": ["--mode", "one-pass"],
        "one-pass-lm": ["--mode", "one-pass", "--fusion", "separate", "--gamma", "0.3", "--lm-ckpt", str(d / "lm.ckpt")],
    }
    for name, flags in decodes.items():
        t0 = time.perf_counter()
        assert main(["decode", "--ckpt", str(d / "model.ckpt"), "--out", str(d / f"{name}.tsv"), *flags]) == 0
        timings[f"decode {name}"] = time.perf_counter() - t0
    return d, timings
