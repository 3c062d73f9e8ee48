"""Acceptance criteria, one test and one PASS/FAIL report line each.

Run ``pytest tests/test_acceptance.py -v -s`` to see the report lines.
"""

import itertools
import math
import time

import numpy as np
import pytest

from e2ea import checkpoint
from e2ea.attdec import FusionConfig
from e2ea.checkpoint import checkpoint_load, checkpoint_save
from e2ea.cli import main
from e2ea.config import load_config
from e2ea.ctc import BLANK, brute_force_prefix_oracle, ctc_loss, prefix_extend, prefix_init
from e2ea.decode import (
    BeamConfig,
    beam_search_attention,
    beam_search_one_pass,
    exhaustive_oracle,
    rescore_with_ctc,
    sequence_scores,
)
from e2ea.encoder import FeatureSequence
from e2ea.gradcheck import run_suite
from e2ea.model import new_lm
from e2ea.train import AdaDelta

from conftest import random_grid, read_tsv, tiny_input, tiny_model

# pinned tolerances and budgets
LOG_TOL = 1e-10
ADADELTA_TOL = 1e-12
GRAD_TOL = 1e-4
CER_TARGET = 0.15
CER_SLACK = 0.02
TOY_BUDGET_S = 600.0
TOY_MAX_EPOCHS = 15


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


def alignment_table(logp):
    """Independent oracle: probability of every collapsed sequence by path enumeration."""
    T, V = logp.shape
    table = {}
    for path in itertools.product(range(V), repeat=T):
        out, prev = [], None
        for z in path:
            if z != BLANK and z != prev:
                out.append(z)
            prev = z
        p = math.exp(sum(logp[t, z] for t, z in enumerate(path)))
        table[tuple(out)] = table.get(tuple(out), 0.0) + p
    return table


def grid_case(seed):
    rng = np.random.default_rng(seed)
    T, n = int(rng.integers(1, 7)), int(rng.integers(1, 4))
    return rng, random_grid(rng, T, n + 1), n


def test_c1_ctc_oracle(report):
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for seed in range(100):
        rng, grid, n = grid_case(seed)
        table = alignment_table(grid)
        targets = [tuple(int(c) for c in rng.integers(1, n + 1, size=L)) for L in range(4)]
        for target in targets:
            nll, _ = ctc_loss(grid, target)
            p = table.get(target, 0.0)
            if p == 0.0:
                err = 0.0 if nll == math.inf else math.inf
            else:
                err = abs(-nll - math.log(p))
            worst = max(worst, err)
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= LOG_TOL and elapsed < 10
    report(1, ok, f"{checked} targets on 100 grids, max |log err| {worst:.2e} (tol {LOG_TOL:g}), {elapsed:.1f}s (< 10s)")
    assert worst <= LOG_TOL
    assert elapsed < 10


def test_c2_prefix_oracle(report):
    t0 = time.perf_counter()
    worst_oracle = worst_decomp = 0.0
    for seed in range(100):
        _, grid, n = grid_case(seed)
        eos = n + 1
        states = {(): prefix_init(grid)}
        for L in range(1, 4):
            for prefix in itertools.product(range(1, n + 1), repeat=L):
                states[prefix] = prefix_extend(states[prefix[:-1]], grid, prefix[:-1], prefix[-1], eos)
        for prefix, state in states.items():
            want = brute_force_prefix_oracle(grid, prefix)
            got = state.prefix_logprob
            err = 0.0 if want == got == -math.inf else abs(got - want)
            worst_oracle = max(worst_oracle, err)
            if len(prefix) < 3:
                full = prefix_extend(state, grid, prefix, eos, eos)
                rest = sum(math.exp(states[prefix + (c,)].prefix_logprob) for c in range(1, n + 1))
                worst_decomp = max(worst_decomp, abs(math.exp(got) - math.exp(full) - rest))
    elapsed = time.perf_counter() - t0
    ok = worst_oracle <= LOG_TOL and worst_decomp <= LOG_TOL and elapsed < 30
    report(2, ok, f"prefix max err {worst_oracle:.2e}, decomposition max err {worst_decomp:.2e} "
                  f"(tol {LOG_TOL:g}), {elapsed:.1f}s (< 30s)")
    assert worst_oracle <= LOG_TOL and worst_decomp <= LOG_TOL
    assert elapsed < 30


def exact_case(seed):
    model = tiny_model(seed, vocab="abc", scale=2.0)
    enc = model.encode(tiny_input(seed))
    assert enc.length == 6
    return model, enc


def test_c3_exact_search(report):
    t0 = time.perf_counter()
    mismatches, worst = 0, 0.0
    for seed in range(50):
        model, enc = exact_case(seed)
        scores = sequence_scores(model, enc, 3)
        for lam in (0.0, 0.3, 0.5, 1.0):
            # 4^3 = 64 covers every sequence of length <= 3 plus eos
            res = beam_search_one_pass(model, enc, BeamConfig(beam_width=64, lam=lam, max_len=3))
            best, score = exhaustive_oracle(model, enc, lam, 3, scores=scores)
            mismatches += res.best != best
            worst = max(worst, abs(res.nbest[0].joint_score - score))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and worst <= LOG_TOL and elapsed < 60
    report(3, ok, f"200 searches, {mismatches} sequence mismatches, max score err {worst:.2e} "
                  f"(tol {LOG_TOL:g}), {elapsed:.1f}s (< 60s)")
    assert mismatches == 0 and worst <= LOG_TOL
    assert elapsed < 60


def test_c4_rescoring_consistency(report):
    worst, compared = 0.0, 0
    for seed in range(20):
        model, enc = exact_case(seed)
        for lam in (0.3, 0.5, 0.8):
            onepass = beam_search_one_pass(model, enc, BeamConfig(beam_width=10, lam=lam))
            rescored = {e.sequence: e.joint_score for e in rescore_with_ctc(model, enc, onepass.nbest, lam).nbest}
            for e in onepass.nbest:
                worst = max(worst, abs(rescored[e.sequence] - e.joint_score))
                compared += 1
    ok = worst <= LOG_TOL
    report(4, ok, f"{compared} finished hypotheses, max |rescored - one-pass| {worst:.2e} (tol {LOG_TOL:g})")
    assert ok


def test_c5_gradient_suite(report):
    t0 = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - t0
    worst = max(r[1] for r in results)
    failed = [r[0] for r in results if not r[2]]
    ok = not failed and worst < GRAD_TOL and elapsed < 60
    report(5, ok, f"{len(results)} components x 3 seeds, max rel err {worst:.2e} (tol {GRAD_TOL:g}), "
                  f"failed {failed or 'none'}, {elapsed:.1f}s (< 60s)")
    assert not failed and worst < GRAD_TOL
    assert elapsed < 60


def test_c6_adadelta_closed_form(report):
    x = {"x": np.array([0.0])}
    AdaDelta(rho=0.95, eps=1e-8).update(x, {"x": np.array([1.0])})
    want = -math.sqrt(1e-8) / math.sqrt(0.05 + 1e-8)
    err = abs(x["x"][0] - want)
    ok = err <= ADADELTA_TOL
    report(6, ok, f"first update {x['x'][0]:.12e}, closed form {want:.12e}, err {err:.1e} (tol {ADADELTA_TOL:g})")
    assert ok


def test_c7_shape_contracts(report):
    bad = []
    for variant in ("blstm", "vgg-blstm"):
        model = tiny_model(0, feat_dim=2, hidden=2, variant=variant)
        for T in range(1, 1001):
            out = model.encode(FeatureSequence(np.ones((T, 2))))
            if out.length != math.ceil(T / 4):
                bad.append((variant, T, out.length))
    vgg = tiny_model(0, feat_dim=40, variant="vgg-blstm")
    chans = np.random.default_rng(0).normal(size=(3, 100, 40))
    frames = vgg.encode(FeatureSequence(chans[0], chans)).length
    ok = not bad and frames == 25
    report(7, ok, f"T'=ceil(T/4) for T=1..1000 on both variants ({len(bad)} violations), "
                  f"VGG 3x100x40 -> {frames} frames (want 25)")
    assert not bad
    assert frames == 25


def test_c8_toy_trend(toy_run, report):
    d, timings = toy_run
    cfg = load_config("toy")
    cer = {name: float(read_tsv(d / f"{name}.tsv")[1]["corpus_cer"])
           for name in ("attention", "rescoring", "one-pass", "one-pass-lm")}
    total = sum(timings.values())
    epochs = len(read_tsv(d / "train.tsv")[0])
    a = cer["attention"] < CER_TARGET
    b = cer["one-pass"] <= cer["attention"] + CER_SLACK
    c = cer["one-pass-lm"] <= cer["one-pass"] + CER_SLACK
    budget = total < TOY_BUDGET_S and epochs <= TOY_MAX_EPOCHS
    ok = a and b and c and budget
    report("8", ok, f"toy preset seed {cfg.seed}, lambda {cfg.train.lam}, {epochs} epochs, {total:.0f}s (< {TOY_BUDGET_S:.0f}s)")
    report("8a", a, f"attention-only test CER {cer['attention']:.4f} < {CER_TARGET} "
                    f"(one-pass {cer['one-pass']:.4f}, rescoring {cer['rescoring']:.4f})")
    report("8b", b, f"one-pass CER {cer['one-pass']:.4f} <= attention {cer['attention']:.4f} + {CER_SLACK}")
    report("8c", c, f"one-pass + LM (gamma {cfg.fusion.gamma}) CER {cer['one-pass-lm']:.4f} "
                    f"<= one-pass {cer['one-pass']:.4f} + {CER_SLACK}")
    assert cfg.train.lam == 0.5 and cfg.fusion.gamma == 0.3
    assert (cfg.toy.vocab, cfg.toy.feat_dim, cfg.data.n_train, cfg.data.n_test) == ("abcde", 8, 300, 50)
    assert a and b and c
    assert budget


def test_c9_determinism(tmp_path, report):
    flags = ["--config", "toy", "--set", "train.epochs=2", "--set", "data.n_train=60", "--set", "data.n_dev=10"]
    for run in ("a", "b"):
        assert main(["train", *flags, "--ckpt", str(tmp_path / f"{run}.ckpt"), "--out", str(tmp_path / f"{run}.tsv")]) == 0
    first, second = (tmp_path / "a.ckpt").read_bytes(), (tmp_path / "b.ckpt").read_bytes()
    same_train = first == second
    loaded = checkpoint_load(tmp_path / "a.ckpt")
    checkpoint_save(tmp_path / "c.ckpt", loaded)
    reloaded = checkpoint.decode_tensors(checkpoint.encode_tensors(loaded.tensors))
    same_trip = (tmp_path / "c.ckpt").read_bytes() == first and all(
        reloaded[k].tobytes() == v.tobytes() and reloaded[k].shape == v.shape for k, v in loaded.tensors.items())
    ok = same_train and same_trip
    report(9, ok, f"two trains byte-identical: {same_train} ({len(first)} bytes); "
                  f"load/save round trip bit-exact: {same_trip}")
    assert same_train
    assert same_trip


def test_c10_lambda_gamma_zero(report):
    nbest_equal, fused_equal = 0, 0
    for seed in range(20):
        model, enc = exact_case(seed)
        cfg = BeamConfig(beam_width=8, lam=0.0)
        nbest_equal += beam_search_one_pass(model, enc, cfg).nbest == beam_search_attention(model, enc, cfg).nbest
        lm = new_lm(model.vocab, 4, seed)
        plain = beam_search_one_pass(model, enc, BeamConfig(beam_width=8, lam=0.5))
        fused = beam_search_one_pass(
            model, enc, BeamConfig(beam_width=8, lam=0.5, fusion=FusionConfig("separate", 0.0)), lm)
        fused_equal += fused.nbest == plain.nbest
    ok = nbest_equal == 20 and fused_equal == 20
    report(10, ok, f"lambda=0 one-pass n-best identical to attention-only on {nbest_equal}/20 models; "
                   f"gamma=0 fusion n-best identical to no-LM on {fused_equal}/20")
    assert nbest_equal == 20
    assert fused_equal == 20
