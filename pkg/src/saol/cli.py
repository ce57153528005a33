"""Operator surface: preprocess, train, translate, evaluate,
significance, ablate, bench, count-params.

Exit codes: 0 success, 1 contract/argument error, 2 I/O error.
A training run owns its output directory through a lock file.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bpe, checkpoint, data, evaluate, ndmath, outlayer, sampler, seq2seq, synth
from .config import RunConfig, apply_overrides, format_config, load_config, save_config
from .errors import ArgumentError, CorpusError, SaolError
from .outlayer import LayerVariant
from .seq2seq import AdamOptimizer, ModelConfig, Seq2SeqModel

LAYER_FORMS = {
    LayerVariant.FULL: "W^T h_t",
    LayerVariant.TIED: "E h_t",
    LayerVariant.BILINEAR: "E W h_t",
    LayerVariant.NONLIN_OUT: "sigma(E W) h_t",
    LayerVariant.NONLIN_CTX: "E sigma(W h_t)",
    LayerVariant.JOINT: "sigma(E W_o) sigma(W_c h_t)",
}


def _read_lines(path) -> list:
    try:
        with open(path, encoding="utf-8") as f:
            return f.read().splitlines()
    except OSError as e:
        raise CorpusError(f"cannot read corpus: {e}", path=path) from e


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


class OutputDirLock:
    """Exclusive ownership of a training output directory."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ArgumentError(
                f"output directory is locked by another run: {self.path}") from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.path)
        except OSError:
            pass
        return False


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    src_lines = _read_lines(args.src)
    tgt_lines = _read_lines(args.tgt)
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(
            f"source has {len(src_lines)} lines but target has {len(tgt_lines)}",
            path=args.tgt, line=min(len(src_lines), len(tgt_lines)) + 1)
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    if args.joint_bpe:
        merges = bpe.learn_bpe(src_lines + tgt_lines, args.ops)
        src_merges = tgt_merges = merges
    else:
        src_merges = bpe.learn_bpe(src_lines, args.ops)
        tgt_merges = bpe.learn_bpe(tgt_lines, args.ops)
    bpe.save_merges(src_merges, out / "bpe.src.merges")
    bpe.save_merges(tgt_merges, out / "bpe.tgt.merges")
    src_tok = [bpe.apply_bpe(src_merges, line) for line in src_lines]
    tgt_tok = [bpe.apply_bpe(tgt_merges, line) for line in tgt_lines]
    max_vocab = args.max_vocab or None
    src_vocab = bpe.build_vocab(src_tok, max_vocab)
    tgt_vocab = bpe.build_vocab(tgt_tok, max_vocab)
    bpe.save_vocab(src_vocab, out / "vocab.src")
    bpe.save_vocab(tgt_vocab, out / "vocab.tgt")
    _write_lines(out / "train.src.bpe", [" ".join(t) for t in src_tok])
    _write_lines(out / "train.tgt.bpe", [" ".join(t) for t in tgt_tok])
    print(f"pairs\t{len(src_lines)}")
    print(f"src_vocab\t{len(src_vocab)}")
    print(f"tgt_vocab\t{len(tgt_vocab)}")
    print(f"src_tokens\t{sum(len(t) for t in src_tok)}")
    print(f"tgt_tokens\t{sum(len(t) for t in tgt_tok)}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_artifacts(cfg: RunConfig):
    d = Path(cfg.data_dir)
    src_merges = bpe.load_merges(d / "bpe.src.merges")
    tgt_merges = bpe.load_merges(d / "bpe.tgt.merges")
    src_vocab = bpe.load_vocab(d / "vocab.src")
    tgt_vocab = bpe.load_vocab(d / "vocab.tgt")
    train_src = _read_lines(d / "train.src.bpe")
    train_tgt = _read_lines(d / "train.tgt.bpe")
    return src_merges, tgt_merges, src_vocab, tgt_vocab, train_src, train_tgt


def _model_config(cfg: RunConfig, src_vocab_size: int, tgt_vocab_size: int) -> ModelConfig:
    return ModelConfig(
        src_vocab=src_vocab_size, tgt_vocab=tgt_vocab_size,
        d=cfg.d, d_h=cfg.d_h, d_j=cfg.d_j, layers=cfg.layers,
        dropout_p=cfg.dropout_p, max_len=cfg.max_len,
        variant=LayerVariant.parse(cfg.variant), sample_rate=cfg.sample_rate,
        seed=cfg.seed, bidirectional=cfg.bidirectional)


def _dev_bleu(model, dev_src_ids, dev_tgt_lines, tgt_vocab, max_len) -> float:
    hyp_ids = seq2seq.greedy_decode_batch(model, dev_src_ids, max_len)
    hyps = [bpe.detokenize(" ".join(tgt_vocab.to_tokens(ids))) for ids in hyp_ids]
    return evaluate.corpus_bleu(hyps, dev_tgt_lines).bleu


def _save_train_checkpoint(path, model, opt, cfg, src_vocab, tgt_vocab,
                           shuffle_rng, epoch, best_bleu):
    checkpoint.save_checkpoint(
        path,
        config=vars(cfg).copy(),
        src_vocab=src_vocab, tgt_vocab=tgt_vocab,
        params=model.params,
        adam={name: st for name, st in opt.state.items()},
        rng_states={
            "dropout": checkpoint.rng_state(model.dropout_rng),
            "sampler": checkpoint.rng_state(model.sampler_rng),
            "shuffle": checkpoint.rng_state(shuffle_rng),
        },
        meta={"epoch": epoch, "best_bleu": best_bleu,
              "global_step": opt.global_step})


def cmd_train(cfg: RunConfig, resume: str | None = None) -> int:
    src_merges, tgt_merges, src_vocab, tgt_vocab, train_src, train_tgt = _load_artifacts(cfg)
    src_ids = data.corpus_to_ids(train_src, src_vocab)
    tgt_ids = data.corpus_to_ids(train_tgt, tgt_vocab)
    train_pairs = data.filter_pairs(src_ids, tgt_ids, cfg.max_len)
    if not train_pairs:
        raise ArgumentError("no training pairs within max_len")

    dev_src_lines = _read_lines(cfg.dev_src)
    dev_tgt_lines = _read_lines(cfg.dev_tgt)
    if len(dev_src_lines) != len(dev_tgt_lines):
        raise CorpusError("dev corpora are misaligned", path=cfg.dev_tgt,
                          line=min(len(dev_src_lines), len(dev_tgt_lines)) + 1)
    dev_src_ids = [src_vocab.to_ids(bpe.apply_bpe(src_merges, line))[:cfg.max_len]
                   for line in dev_src_lines]

    mc = _model_config(cfg, len(src_vocab), len(tgt_vocab))
    model = Seq2SeqModel(mc)
    opt = AdamOptimizer(model.params, lr=cfg.lr)
    shuffle_rng = ndmath.stream_rng(cfg.seed, "shuffle")
    start_epoch = 0
    best_bleu = -1.0

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if resume:
        ck = checkpoint.load_checkpoint(resume)
        for name, arr in ck.params.items():
            model.params[name][...] = arr
        for name, st in (ck.adam or {}).items():
            opt.state[name] = st
        model.dropout_rng = checkpoint.restore_rng(ck.rng_states["dropout"])
        model.sampler_rng = checkpoint.restore_rng(ck.rng_states["sampler"])
        shuffle_rng = checkpoint.restore_rng(ck.rng_states["shuffle"])
        start_epoch = int(ck.meta["epoch"])
        best_bleu = float(ck.meta["best_bleu"])
        opt.global_step = int(ck.meta.get("global_step", 0))

    save_config(cfg, out_dir / "run.config")
    metrics_path = out_dir / "metrics.tsv"
    decode_len = cfg.max_len + 2

    with OutputDirLock(out_dir):
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            t0 = time.perf_counter()
            batches = data.make_batches(train_pairs, cfg.batch_size, shuffle_rng)
            loss_sum = 0.0
            token_sum = 0
            for batch in batches:
                loss = seq2seq.train_step(model, batch, opt)
                loss_sum += loss * batch.target_tokens
                token_sum += batch.target_tokens
            elapsed = time.perf_counter() - t0
            mean_loss = loss_sum / token_sum
            bleu = _dev_bleu(model, dev_src_ids, dev_tgt_lines, tgt_vocab, decode_len)
            tps = token_sum / elapsed if elapsed > 0 else 0.0
            with open(metrics_path, "a", encoding="utf-8") as f:
                f.write(f"{epoch}\t{mean_loss:.6f}\t{bleu:.4f}\t{tps:.1f}\n")
            print(f"epoch {epoch}: loss {mean_loss:.4f} dev-bleu {bleu:.2f} "
                  f"({tps:.0f} tok/s)")
            new_best = bleu > best_bleu
            if new_best:
                best_bleu = bleu
            _save_train_checkpoint(out_dir / "last.saol", model, opt, cfg,
                                   src_vocab, tgt_vocab, shuffle_rng, epoch, best_bleu)
            if new_best:
                _save_train_checkpoint(out_dir / "best.saol", model, opt, cfg,
                                       src_vocab, tgt_vocab, shuffle_rng, epoch, best_bleu)
    return 0


def model_from_checkpoint(ck: checkpoint.CheckpointData) -> Seq2SeqModel:
    cfg = RunConfig(**ck.config)
    mc = _model_config(cfg, len(ck.src_vocab), len(ck.tgt_vocab))
    model = Seq2SeqModel(mc)
    for name, arr in ck.params.items():
        if name not in model.params:
            raise ArgumentError(f"checkpoint tensor {name} unknown to this config")
        model.params[name][...] = arr
    return model


# ---------------------------------------------------------------------------
# translate / evaluate / significance
# ---------------------------------------------------------------------------

def _checkpoint_dir_merges(ck_path) -> bpe.MergeTable:
    ck = checkpoint.load_checkpoint(ck_path)
    cfg = RunConfig(**ck.config)
    return bpe.load_merges(Path(cfg.data_dir) / "bpe.src.merges"), ck, cfg


def cmd_translate(args) -> int:
    src_merges, ck, cfg = _checkpoint_dir_merges(args.checkpoint)
    model = model_from_checkpoint(ck)
    lines = _read_lines(args.input)
    src_ids = [ck.src_vocab.to_ids(bpe.apply_bpe(src_merges, line))[:cfg.max_len]
               for line in lines]
    hyp_ids = seq2seq.greedy_decode_batch(model, src_ids, args.max_len or cfg.max_len + 2)
    hyps = [bpe.detokenize(" ".join(ck.tgt_vocab.to_tokens(ids))) for ids in hyp_ids]
    _write_lines(args.output, hyps)
    print(f"translated\t{len(hyps)}")
    return 0


def cmd_evaluate(args) -> int:
    hyps = _read_lines(args.hyp)
    refs = _read_lines(args.ref)
    report = evaluate.corpus_bleu(hyps, refs)
    text = evaluate.format_bleu_report(report)
    if args.checkpoint:
        ck = checkpoint.load_checkpoint(args.checkpoint)
        bins = bpe.frequency_bins(ck.tgt_vocab)
        binned = evaluate.binned_scores(hyps, refs, bins, ck.tgt_vocab)
        text += "\n" + evaluate.format_binned_report(binned)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    return 0


def cmd_significance(args) -> int:
    hyp_a = _read_lines(args.hyp_a)
    hyp_b = _read_lines(args.hyp_b)
    refs = _read_lines(args.ref)
    rng = ndmath.stream_rng(args.seed, "bootstrap")
    report = evaluate.paired_bootstrap(hyp_a, hyp_b, refs, args.resamples, rng)
    print(evaluate.format_significance_report(report))
    return 0


# ---------------------------------------------------------------------------
# ablate / bench / count-params
# ---------------------------------------------------------------------------

def _ablation_rows(cfg: RunConfig, dj_grid) -> list:
    rows = []
    for variant in LayerVariant:
        djs = dj_grid if variant is LayerVariant.JOINT else [cfg.d_j]
        for d_j in djs:
            rows.append((variant, d_j))
            if variant is not LayerVariant.JOINT:
                break
    return rows


def cmd_ablate(cfg: RunConfig, dj_grid) -> int:
    src_merges, tgt_merges, src_vocab, tgt_vocab, train_src, train_tgt = _load_artifacts(cfg)
    src_ids = data.corpus_to_ids(train_src, src_vocab)
    tgt_ids = data.corpus_to_ids(train_tgt, tgt_vocab)
    train_pairs = data.filter_pairs(src_ids, tgt_ids, cfg.max_len)
    dev_src_lines = _read_lines(cfg.dev_src)
    dev_tgt_lines = _read_lines(cfg.dev_tgt)
    dev_src_ids = [src_vocab.to_ids(bpe.apply_bpe(src_merges, line))[:cfg.max_len]
                   for line in dev_src_lines]
    decode_len = cfg.max_len + 2

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["variant\td_j\tlayer_form\tbleu\tparams"]
    for variant, d_j in _ablation_rows(cfg, dj_grid):
        run = apply_overrides(cfg, {"variant": variant.value, "d_j": d_j})
        mc = _model_config(run, len(src_vocab), len(tgt_vocab))
        model = Seq2SeqModel(mc)
        opt = AdamOptimizer(model.params, lr=cfg.lr)
        shuffle_rng = ndmath.stream_rng(cfg.seed, "shuffle")
        for _ in range(cfg.epochs):
            for batch in data.make_batches(train_pairs, cfg.batch_size, shuffle_rng):
                seq2seq.train_step(model, batch, opt)
        bleu = _dev_bleu(model, dev_src_ids, dev_tgt_lines, tgt_vocab, decode_len)
        params = seq2seq.capacity_param_count(model)
        dj_text = str(d_j) if variant is LayerVariant.JOINT else "-"
        lines.append(f"{variant.value}\t{dj_text}\t{LAYER_FORMS[variant]}\t"
                     f"{bleu:.4f}\t{params}")
    table = "\n".join(lines)
    print(table)
    with open(out_dir / "ablation.tsv", "w", encoding="utf-8") as f:
        f.write(table + "\n")
    return 0


def cmd_bench(args) -> int:
    dj_grid = [int(x) for x in args.dj_grid.split(",")]
    rates = [float(x) for x in args.rates.split(",")]
    variants = [LayerVariant.parse(v) for v in args.variants.split(",")]
    batches = synth.bench_batches(args.vocab_size, args.batches,
                                  args.batch_size, args.length, seed=args.seed)
    lines = ["variant\td_j\trate\ttokens_per_sec\tsteps"]
    for variant in variants:
        djs = dj_grid if variant is LayerVariant.JOINT else [dj_grid[0]]
        for d_j in djs:
            for rate in rates:
                mc = ModelConfig(
                    src_vocab=args.vocab_size, tgt_vocab=args.vocab_size,
                    d=args.d, d_h=args.d_h, d_j=d_j, layers=1,
                    variant=variant, sample_rate=rate, seed=args.seed)
                res = synth.measure_throughput(mc, batches, warmup=args.warmup,
                                               steps=args.steps)
                lines.append(f"{res.variant}\t{res.d_j}\t{res.sample_rate}\t"
                             f"{res.tokens_per_sec:.1f}\t{res.steps}")
    print("\n".join(lines))
    return 0


def cmd_count_params(args) -> int:
    dj_grid = [int(x) for x in args.dj_grid.split(",")] if args.dj_grid else [args.d_j]
    print("variant\td_j\teffective_params\tbreakdown")
    for variant in LayerVariant:
        if variant is LayerVariant.TIED and args.d != args.d_h:
            continue
        djs = dj_grid if variant is LayerVariant.JOINT else [0]
        for d_j in djs:
            rep = outlayer.param_count(variant, args.vocab_size, args.d, args.d_h,
                                       d_j=d_j if variant is LayerVariant.JOINT else 0)
            breakdown = "+".join(f"{name}:{count}" for name, count in rep.breakdown)
            dj_text = str(d_j) if variant is LayerVariant.JOINT else "-"
            print(f"{variant.value}\t{dj_text}\t{rep.effective_param_count}\t{breakdown}")
    if args.d == args.d_h:
        chain = outlayer.capacity_order(args.vocab_size, args.d, args.d_h, dj_grid)
        lo, hi = chain.dj_interval
        print(f"chain\tC_tied={chain.c_tied} < C_bilinear={chain.c_bilinear} "
              f"<= C_joint(d_j) <= C_base={chain.c_base} for d_j in [{lo}, {hi}]")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    for name, kind in (("train-src", str), ("train-tgt", str), ("dev-src", str),
                       ("dev-tgt", str), ("data-dir", str), ("out-dir", str),
                       ("variant", str)):
        p.add_argument(f"--{name}", type=kind, default=None)
    for name in ("bpe-ops", "max-vocab", "d", "d-h", "d-j", "layers",
                 "max-len", "epochs", "batch-size", "seed"):
        p.add_argument(f"--{name}", type=int, default=None)
    for name in ("dropout-p", "sample-rate", "lr"):
        p.add_argument(f"--{name}", type=float, default=None)
    p.add_argument("--bidirectional", action="store_true", default=None)
    p.add_argument("--joint-bpe", action="store_true", default=None)


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    overrides = {}
    for field in vars(RunConfig()):
        flag = field
        if hasattr(args, flag):
            overrides[field] = getattr(args, flag)
    return apply_overrides(cfg, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saol",
        description="Desk-scale NMT with pluggable structure-aware output layers")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="learn BPE, build vocabs, tokenize")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--ops", type=int, required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--joint-bpe", action="store_true")
    p.add_argument("--max-vocab", type=int, default=0)

    p = sub.add_parser("train", help="train a model on preprocessed data")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("translate", help="greedy-decode a text file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--max-len", type=int, default=None)

    p = sub.add_parser("evaluate", help="BLEU (and binned report) for a hypothesis file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--checkpoint", help="enables the frequency-binned report")
    p.add_argument("--out", help="also write the report here")

    p = sub.add_parser("significance", help="paired bootstrap between two hypothesis files")
    p.add_argument("--hyp-a", required=True)
    p.add_argument("--hyp-b", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=1)

    p = sub.add_parser("ablate", help="train every output-layer variant on one config")
    _add_config_flags(p)
    p.add_argument("--dj-grid", default="512,2048")

    p = sub.add_parser("bench", help="training throughput over d_j and sampling rates")
    p.add_argument("--vocab-size", type=int, default=32000)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--d-h", type=int, default=64)
    p.add_argument("--dj-grid", default="512,2048,4096")
    p.add_argument("--rates", default="0.5,0.25,0.05")
    p.add_argument("--variants", default="joint")
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--batches", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--length", type=int, default=10)
    p.add_argument("--seed", type=int, default=1)

    p = sub.add_parser("count-params", help="capacity reports and the ordering chain")
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--d-h", type=int, required=True)
    p.add_argument("--d-j", type=int, default=512)
    p.add_argument("--dj-grid", default=None)

    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "preprocess":
        return cmd_preprocess(args)
    if args.command == "train":
        return cmd_train(_config_from_args(args), resume=args.resume)
    if args.command == "translate":
        return cmd_translate(args)
    if args.command == "evaluate":
        return cmd_evaluate(args)
    if args.command == "significance":
        return cmd_significance(args)
    if args.command == "ablate":
        cfg = _config_from_args(args)
        dj_grid = [int(x) for x in args.dj_grid.split(",")]
        return cmd_ablate(cfg, dj_grid)
    if args.command == "bench":
        return cmd_bench(args)
    if args.command == "count-params":
        return cmd_count_params(args)
    raise ArgumentError(f"unknown command {args.command}")


def main(argv=None) -> int:
    try:
        return run(argv)
    except CorpusError as e:
        print(f"saol: I/O error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"saol: I/O error: {e}", file=sys.stderr)
        return 2
    except (SaolError, ValueError) as e:
        print(f"saol: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
