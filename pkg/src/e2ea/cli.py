"""Command-line entry point: ``e2ea <command> [options]``.

Result streams are tab-separated UTF-8 on stdout (or ``--out``); lines
starting with ``#`` are headers or summaries.  Exit codes: 0 success,
1 gradient check failure, 2 invalid configuration, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, TextIO

from . import gradcheck
from .checkpoint import Checkpoint, CheckpointError, checkpoint_load, checkpoint_save, load_dataset, save_dataset
from .config import RunConfig, dump_config, load_config, parse_config
from .ctc import Vocab
from .decode import MODES, corpus_cer, decode_features, greedy_decode
from .model import JointModel, new_lm
from .nn import ConfigurationError, ParamStore
from .train import (
    AdaDelta,
    Utterance,
    augment_speed,
    generate_toy_dataset,
    lm_perplexity,
    train_epoch,
    train_lm_epoch,
)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
SPLITS = {"train": 0, "test": 1, "dev": 2}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _apply_overrides(cfg: RunConfig, args, command: str) -> RunConfig:
    lines = list(getattr(args, "set", None) or [])
    if args.seed is not None:
        lines.append(f"seed={args.seed}")
    if getattr(args, "lam", None) is not None:
        lines.append(f"decode.lambda={args.lam}")
        if command == "train":
            lines.append(f"train.lambda={args.lam}")
    for flag, key in (("mode", "decode.mode"), ("beam", "decode.beam_width"),
                      ("gamma", "fusion.gamma"), ("fusion", "fusion.mode")):
        value = getattr(args, flag, None)
        if value is not None:
            lines.append(f"{key}={value}")
    # applied one at a time so a later override wins
    for line in lines:
        cfg = parse_config(line, base=cfg)
    return cfg


def _config(args, command: str, fallback: Optional[str] = None) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif fallback is not None:
        cfg = parse_config(fallback)
    else:
        raise ConfigurationError("--config is required")
    return _apply_overrides(cfg, args, command)


def load_split(cfg: RunConfig, split: str) -> List[Utterance]:
    path = getattr(cfg.data, f"{split}_path")
    if path:
        return load_dataset(path)
    n = getattr(cfg.data, f"n_{split}")
    return generate_toy_dataset(cfg.toy, n, SPLITS[split])


def _meta(cfg: RunConfig, epoch: int) -> dict:
    return {"epoch": epoch, "seed": cfg.seed, "config_hash": cfg.hash()}


def _store_from(tensors: dict, template: ParamStore, what: str) -> ParamStore:
    missing = set(template.params) - set(tensors)
    if missing:
        raise ConfigurationError(f"{what} lacks tensors {sorted(missing)[:3]}")
    for name, value in template.params.items():
        if tensors[name].shape != value.shape:
            raise ConfigurationError(f"{what}: tensor {name} has shape {tensors[name].shape}, config expects {value.shape}")
        template.set(name, tensors[name].copy())
    return template


def load_model(cfg: RunConfig, ckpt: Checkpoint) -> JointModel:
    model = JointModel(cfg.model_config(), cfg.seed)
    _store_from(ckpt.tensors, model.store, "checkpoint")
    return model


def load_lm(cfg: RunConfig, tensors: dict, what: str) -> ParamStore:
    return _store_from(tensors, new_lm(Vocab(cfg.toy.vocab), cfg.lm.hidden, cfg.seed), what)


def save_model(path: str, cfg: RunConfig, model: JointModel, epoch: int, lm: Optional[ParamStore] = None) -> None:
    tensors = dict(model.store.params)
    if lm is not None:
        tensors.update(lm.params)
    checkpoint_save(path, Checkpoint(tensors, _meta(cfg, epoch), dump_config(cfg)))


def _dev_cer(model: JointModel, data: Sequence[Utterance]) -> float:
    pairs = [(u.labels, greedy_decode(model, model.encode(u.features))) for u in data]
    return corpus_cer(pairs)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _threads() -> int:
    raw = os.environ.get("E2EA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"E2EA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError("E2EA_THREADS must be >= 1")
    return n


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args, out: TextIO) -> int:
    cfg = _config(args, "train")
    if not args.ckpt:
        raise ConfigurationError("train needs --ckpt")
    mtl = cfg.mtl()
    fusion = cfg.fusion
    lm = None
    if fusion.mode == "separate":
        raise ConfigurationError("fusion.mode=separate applies at decode time; train with none or joint")
    if fusion.mode == "joint":
        if not args.lm_ckpt:
            raise ConfigurationError("joint fusion training starts from a trained LM; pass --lm-ckpt")
        lm = load_lm(cfg, checkpoint_load(args.lm_ckpt).tensors, "LM checkpoint")
    train = augment_speed(load_split(cfg, "train"), mtl.speed_factors)
    dev = load_split(cfg, "dev")
    model = JointModel(cfg.model_config(), cfg.seed)
    opt = AdaDelta(cfg.adadelta.rho, cfg.adadelta.eps)
    save_model(args.ckpt, cfg, model, 0, lm)
    out.write("#epoch\tctc_nll\tatt_nll\tmtl\tdev_cer\n")
    for epoch in range(1, mtl.epochs + 1):
        st = train_epoch(model, opt, train, mtl, epoch, fusion, lm)
        dev_cer = _dev_cer(model, dev)
        out.write(f"{epoch}\t{_fmt(st.ctc_nll)}\t{_fmt(st.att_nll)}\t{_fmt(st.mtl)}\t{_fmt(dev_cer)}\n")
        out.flush()
        save_model(args.ckpt, cfg, model, epoch, lm)
        shutil.copyfile(args.ckpt, f"{args.ckpt}.epoch{epoch}")
    return EXIT_OK


def cmd_lm_train(args, out: TextIO) -> int:
    cfg = _config(args, "lm-train")
    if not args.ckpt:
        raise ConfigurationError("lm-train needs --ckpt for the LM output")
    vocab = Vocab(cfg.toy.vocab)
    texts = [u.labels for u in load_split(cfg, "train")]
    lm = new_lm(vocab, cfg.lm.hidden, cfg.seed)
    opt = AdaDelta(cfg.adadelta.rho, cfg.adadelta.eps)
    out.write("#epoch\tperplexity\n")
    out.write(f"0\t{_fmt(lm_perplexity(lm, texts, vocab))}\n")
    for epoch in range(1, cfg.lm.epochs + 1):
        train_lm_epoch(lm, opt, texts, vocab, epoch, cfg.seed, cfg.train.clip_norm)
        out.write(f"{epoch}\t{_fmt(lm_perplexity(lm, texts, vocab))}\n")
        out.flush()
    checkpoint_save(args.ckpt, Checkpoint(dict(lm.params), _meta(cfg, cfg.lm.epochs), dump_config(cfg)))
    return EXIT_OK


def _decode_setup(args, command: str):
    if not args.ckpt:
        raise ConfigurationError(f"{command} needs --ckpt")
    ckpt = checkpoint_load(args.ckpt)
    cfg = _config(args, command, fallback=ckpt.config_text)
    model = load_model(cfg, ckpt)
    lm = None
    if cfg.fusion.mode == "separate":
        if not args.lm_ckpt:
            raise ConfigurationError("fusion.mode=separate needs --lm-ckpt")
        lm = load_lm(cfg, checkpoint_load(args.lm_ckpt).tensors, "LM checkpoint")
    elif cfg.fusion.mode == "joint":
        source = checkpoint_load(args.lm_ckpt).tensors if args.lm_ckpt else ckpt.tensors
        lm = load_lm(cfg, source, "jointly trained LM")
    return cfg, model, lm


def decode_records(model: JointModel, data: Sequence[Utterance], cfg: RunConfig,
                   lm: Optional[ParamStore] = None, threads: int = 1) -> List[tuple]:
    """``(uid, ref, hyp, att, ctc, joint)`` per utterance, in input order."""
    beam = cfg.beam()
    v = model.vocab

    def one(u: Utterance):
        res = decode_features(model, u.features, beam, lm)
        top = res.nbest[0]
        return (u.uid, v.decode(u.labels), v.decode(top.sequence), top.att_score, top.ctc_score, top.joint_score)

    if threads == 1:
        return [one(u) for u in data]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, data))


def write_records(records, out: TextIO) -> float:
    out.write("#uid\tref\thyp\tatt_score\tctc_score\tjoint_score\n")
    for uid, ref, hyp, att, ctc, joint in records:
        out.write(f"{uid}\t{ref}\t{hyp}\t{float(att)!r}\t{float(ctc)!r}\t{float(joint)!r}\n")
    value = corpus_cer([(r[1], r[2]) for r in records])
    out.write(f"#corpus_cer\t{float(value)!r}\n")
    return value


def read_records(lines) -> List[tuple]:
    rows = []
    for line in lines:
        line = line.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise ConfigurationError(f"malformed record: {line!r}")
        try:
            rows.append((parts[0], parts[1], parts[2], float(parts[3]), float(parts[4]), float(parts[5])))
        except ValueError:
            raise ConfigurationError(f"malformed score in record: {line!r}") from None
    return rows


def cmd_decode(args, out: TextIO) -> int:
    threads = _threads()
    cfg, model, lm = _decode_setup(args, "decode")
    data = load_split(cfg, args.split)
    write_records(decode_records(model, data, cfg, lm, threads), out)
    return EXIT_OK


def cmd_eval(args, out: TextIO) -> int:
    """Recompute corpus CER from a decode result file."""
    if not args.results:
        raise ConfigurationError("eval needs a results file")
    with open(args.results, encoding="utf-8") as fh:
        records = read_records(fh)
    if not records:
        raise ConfigurationError("results file holds no records")
    pairs = [(r[1], r[2]) for r in records]
    errs = sum(1 for r, h in pairs if r != h)
    out.write(f"#utterances\t{len(records)}\n#sentence_errors\t{errs}\n")
    out.write(f"#corpus_cer\t{corpus_cer(pairs)!r}\n")
    return EXIT_OK


def cmd_gen_data(args, out: TextIO) -> int:
    cfg = _config(args, "gen-data")
    if not args.out:
        raise ConfigurationError("gen-data needs --out")
    n = getattr(cfg.data, f"n_{args.split}")
    data = generate_toy_dataset(cfg.toy, n, SPLITS[args.split])
    save_dataset(args.out, data)
    sys.stderr.write(f"wrote {len(data)} utterances to {args.out}\n")
    return EXIT_OK


def cmd_gradcheck(args, out: TextIO) -> int:
    base = 0 if args.seed is None else args.seed
    results = gradcheck.run_suite(seeds=range(base, base + 3))
    out.write("#component\tmax_rel_err\tstatus\n")
    failed = []
    for name, worst, ok in results:
        out.write(f"{name}\t{worst:.3e}\t{'PASS' if ok else 'FAIL'}\n")
        if not ok:
            failed.append(name)
    if failed:
        sys.stderr.write(f"gradient check failed: {', '.join(failed)}\n")
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "lm-train": cmd_lm_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "gen-data": cmd_gen_data,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="e2ea", description="Joint CTC/attention speech recognition toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--seed", type=int, help="override the config seed")
        if name == "gradcheck":
            continue
        if name == "eval":
            p.add_argument("results", help="file written by 'decode --out'")
            p.add_argument("--out", help="write the summary here instead of stdout")
            continue
        p.add_argument("--config", help="config file or preset name")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--out", help="output file (results stream, or dataset for gen-data)")
        if name in ("train", "lm-train", "decode"):
            p.add_argument("--ckpt", help="model checkpoint (LM checkpoint for lm-train)")
        if name in ("train", "decode"):
            p.add_argument("--lm-ckpt", help="language model checkpoint")
            p.add_argument("--lambda", dest="lam", type=float, help="CTC weight")
        if name == "decode":
            p.add_argument("--mode", choices=MODES)
            p.add_argument("--beam", type=int)
            p.add_argument("--gamma", type=float, help="LM weight for separate fusion")
            p.add_argument("--fusion", choices=("none", "separate", "joint"))
        if name in ("decode", "gen-data"):
            p.add_argument("--split", choices=tuple(SPLITS), default="test")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handler = COMMANDS[args.command]
    stream_to_file = args.command != "gen-data" and getattr(args, "out", None)
    try:
        if stream_to_file:
            with open(args.out, "w", encoding="utf-8") as fh:
                return handler(args, fh)
        return handler(args, sys.stdout)
    except ConfigurationError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONFIG
    except (OSError, CheckpointError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
