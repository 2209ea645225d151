"""Command-line entry point: ``hwsi <command> ...``.

Exit codes: 0 success, 1 usage or validation error (bad flags, bad config,
malformed inputs, violated ordering contracts), 2 runtime failure
(non-finite loss, failed gradient check, I/O errors).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from hwsi import __version__
from hwsi.config import RunConfig, parse_config
from hwsi.errors import (
    CapacityError,
    ConfigError,
    ContractError,
    FormatError,
    HwsiError,
    VocabularyError,
)

log = logging.getLogger("hwsi")

VALIDATION_ERRORS = (ConfigError, ContractError, FormatError, VocabularyError, CapacityError)
MODEL_KEYS = ("d_cell", "d_patch", "d_text", "d_joint", "ccaf_blocks", "ccaf_heads", "region_blocks",
              "region_heads", "wsi_blocks", "wsi_heads", "ff_mult", "activation", "dtype")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def thread_count() -> int:
    raw = os.environ.get("HWSI_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"HWSI_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"HWSI_THREADS must be a positive integer, got {raw!r}")
    return n


def write_run_header(directory, command: str, cfg: RunConfig | None, extra: dict | None = None,
                     name: str | None = None) -> Path:
    """Config echo + seed + version; deterministic content (no timestamps)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {"command": command, "version": __version__, "threads": thread_count()}
    if cfg is not None:
        header.update({"seed": cfg.seed, "config": cfg.to_dict(),
                       "provenance": {k: cfg.provenance.get(k, "default") for k in cfg.to_dict()}})
    header.update(extra or {})
    path = directory / f"run_{name or command}.json"
    path.write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return path


# -- helpers ------------------------------------------------------------------------

def _load_corpus(path):
    from hwsi.synthgen import load_corpus

    return load_corpus(path)


def _sample(corpus, sample_id):
    try:
        return corpus.by_id(sample_id)
    except KeyError:
        raise ContractError(f"no sample {sample_id!r} in corpus") from None


def _ckpt_run_config(ckpt, args=None) -> RunConfig:
    """The checkpoint's run config, optionally updated by ``--config``/flags.

    Model-shape keys must agree with the checkpoint, since the parameters
    were built from them.
    """
    from hwsi.config import _merge

    run = ckpt.config.get("run")
    if run is None:
        raise FormatError("checkpoint carries no run configuration")
    cfg = _merge(RunConfig(), run, "file")
    stored = ckpt.config.get("provenance", {})
    cfg = replace(cfg, provenance={k: v for k, v in stored.items() if v != "default"})
    if args is not None:
        overlay = parse_config(args.config, _flag_overrides(args)) if (args.config or _flag_overrides(args)) else None
        if overlay is not None:
            values = {k: getattr(overlay, k) for k, src in overlay.provenance.items()}
            for key in MODEL_KEYS:
                if key in values and values[key] != getattr(cfg, key):
                    raise ConfigError(f"{key}: {values[key]!r} differs from the checkpoint's {getattr(cfg, key)!r}")
            cfg = _merge(cfg, values, "flag")
            cfg = replace(cfg, provenance={**cfg.provenance, **overlay.provenance})
    return cfg.validate()


def _flag_overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        out[f"epochs_stage{args.stage}"] = args.epochs
    return out


# -- commands -------------------------------------------------------------------------

def cmd_gen(args) -> int:
    from hwsi.synthgen import generate_corpus, save_corpus

    cfg = parse_config(args.config, {"seed": args.seed})
    corpus = generate_corpus(cfg.gen_config())
    out = save_corpus(corpus, args.out)
    write_run_header(out, "gen", cfg)
    counts = {s: len(corpus.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(corpus.samples)} samples to {out} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']}; vocab {corpus.bank.vocab_size})")
    return 0


def cmd_spf(args) -> int:
    from hwsi.spf import SpfConfig, spf_pipeline

    if args.mode == "infer" and args.tokens is not None:
        raise ContractError("inference mode runs heterogeneous patch selection only; --tokens is not allowed")
    cfg = parse_config(args.config, {"top_k": args.top_k})
    corpus = _load_corpus(args.data)
    sample = _sample(corpus, args.sample)
    mode = "training" if args.mode == "train" else "inference"
    spf_cfg = SpfConfig(top_k=cfg.top_k, mode=mode).validate()
    tokens = None
    if mode == "training":
        ids = sample.tokens if args.tokens is None else _parse_ids(args.tokens)
        tokens = corpus.bank.text_embedding(ids)
    regions = []
    for i in range(sample.n_regions):
        res = spf_pipeline(sample.patches[i], tokens, spf_cfg)
        regions.append({
            "region": i, "kept": res.kept.tolist(), "final": res.final.tolist(),
            "mean": res.stats.mean, "std": res.stats.std, "threshold": res.stats.threshold,
            "relevance": None if res.relevance is None else [round(float(r), 6) for r in res.relevance],
        })
    payload = {"sample": sample.sample_id, "mode": mode, "top_k": spf_cfg.top_k, "regions": regions}
    text = json.dumps(payload, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n")
        write_run_header(Path(args.out).parent, "spf", cfg, {"sample": sample.sample_id, "mode": mode})
    print(text)
    return 0


def _parse_ids(raw: str) -> list:
    try:
        ids = [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--tokens expects comma-separated integer ids, got {raw!r}") from None
    if not ids:
        raise ConfigError("--tokens is empty")
    return ids


def _checkpoint_config(cfg: RunConfig, stage_cfg) -> dict:
    prov = {k: cfg.provenance.get(k, "default") for k in cfg.to_dict()}
    return {"run": cfg.to_dict(), "provenance": prov, "stage": asdict(stage_cfg)}


def _write_log(rows, ckpt_path, stage) -> Path:
    from hwsi.plotting import figure_path, plot_training_log
    from hwsi.training import write_log_csv

    csv_path = Path(ckpt_path).with_name(Path(ckpt_path).name + f".stage{stage}.csv")
    write_log_csv(rows, csv_path)
    plot_training_log(rows, figure_path(csv_path))
    return csv_path


def cmd_train(args) -> int:
    from hwsi.training import (
        Checkpoint,
        init_params,
        load_checkpoint,
        run_stage,
        save_checkpoint,
    )

    stage = args.stage
    ckpt_path = Path(args.ckpt)
    out_path = Path(args.out) if args.out else ckpt_path
    corpus = _load_corpus(args.data)
    state = None

    if stage == 1:
        if args.resume:
            if not ckpt_path.exists():
                raise ContractError(f"--resume given but no checkpoint at {ckpt_path}")
            ckpt = load_checkpoint(ckpt_path)
            if ckpt.state.stage != 1:
                raise ContractError(f"{ckpt_path} holds a stage-{ckpt.state.stage} checkpoint; cannot resume stage 1")
            cfg = _ckpt_run_config(ckpt, args)
            params, state = ckpt.params, (None if ckpt.complete else ckpt.state)
            if ckpt.complete:
                print(f"stage 1 already complete in {ckpt_path}")
                return 0
        else:
            cfg = parse_config(args.config, _flag_overrides(args))
            params = init_params(cfg.encoder_config(corpus), cfg.seed)
    else:
        if not ckpt_path.exists():
            raise ContractError(f"stage 2 needs a completed stage-1 checkpoint; {ckpt_path} does not exist")
        ckpt = load_checkpoint(ckpt_path)
        resumable = args.resume and ckpt.state.stage == 2 and not ckpt.complete
        if args.resume and out_path != ckpt_path and out_path.exists():
            ckpt = load_checkpoint(out_path)
            resumable = ckpt.state.stage == 2 and not ckpt.complete
        if not resumable and not (ckpt.state.stage == 1 and ckpt.complete):
            raise ContractError(f"stage 2 needs a completed stage-1 checkpoint; {ckpt_path} holds stage "
                                f"{ckpt.state.stage} ({'complete' if ckpt.complete else 'incomplete'})")
        cfg = _ckpt_run_config(ckpt, args)
        params = ckpt.params
        state = ckpt.state if resumable else None

    enc_cfg = cfg.encoder_config(corpus)
    stage_cfg = cfg.stage_config(stage)
    loss_cfg, spf_cfg = cfg.loss_config(), cfg.spf_config("training")
    meta = _checkpoint_config(cfg, stage_cfg)
    save_path = ckpt_path if stage == 1 else out_path

    def on_epoch(p, st):
        save_checkpoint(Checkpoint(p, st, False, meta), save_path)
        last = [r["L_HCA"] for r in st.log if r["epoch"] == st.epochs_done]
        print(f"stage {stage} epoch {st.epochs_done}/{stage_cfg.epochs} L_HCA {np.mean(last):.6f}", flush=True)

    params, state = run_stage(corpus, params, stage_cfg, enc_cfg, loss_cfg, spf_cfg, state=state,
                              stop_after=args.stop_after, on_epoch=on_epoch)
    complete = state.epochs_done >= stage_cfg.epochs
    save_checkpoint(Checkpoint(params, state, complete, meta), save_path)
    csv_path = _write_log(state.log, save_path, stage)
    write_run_header(save_path.parent, "train", cfg, {"stage": stage, "checkpoint": save_path.name,
                                                       "complete": complete}, name=f"train_stage{stage}")
    print(f"{'completed' if complete else 'paused'} stage {stage} after {state.epochs_done} epochs; "
          f"checkpoint {save_path}, log {csv_path}")
    return 0


def cmd_gradcheck(args) -> int:
    from hwsi.gradsuite import format_results, run_suite

    results = run_suite(args.suite)
    print(format_results(results))
    total = sum(r.seconds for r in results)
    ok = all(r.passed for r in results)
    print(f"{len(results)} components, {total:.1f} s: {'all passed' if ok else 'FAILED'}")
    return 0 if ok else 2


def cmd_eval(args) -> int:
    from hwsi.evaluation import evaluate, write_metrics
    from hwsi.plotting import figure_path, plot_confusion, plot_recall_curve, plot_similarity
    from hwsi.training import load_checkpoint

    corpus = _load_corpus(args.data)
    ckpt = load_checkpoint(args.ckpt)
    cfg = _ckpt_run_config(ckpt)
    samples = corpus.split(args.split)
    if len(samples) < 2:
        raise ContractError(f"split {args.split!r} has {len(samples)} samples; evaluation needs at least 2")
    enc_cfg = cfg.encoder_config(corpus)
    report, extra = evaluate(args.task, samples, corpus.bank, ckpt.params, enc_cfg, corpus.config.classes,
                             cfg.spf_config("inference"), seed=cfg.seed, return_embeddings=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics(report, out)
    fig = figure_path(out)
    if args.task == "zeroshot":
        plot_confusion(extra["labels"], extra["predictions"], corpus.config.classes, fig)
    elif args.task == "retrieval":
        plot_similarity(extra["z_wsi"], extra["labels"], fig)
    else:
        plot_recall_curve(report.metrics, fig)
    write_run_header(out.parent, "eval", cfg, {"task": args.task, "split": args.split, "checkpoint": str(args.ckpt),
                                               "counts": report.counts}, name=f"eval_{args.task}")
    for k, v in report.metrics.items():
        print(f"{k}\t{v:.6f}")
    return 0


def cmd_export(args) -> int:
    from hwsi.encoders import encode_text, hierarchical_forward
    from hwsi.projectors import assemble_multimodal_sequence, project, save_sequence
    from hwsi.spf import spf_sample
    from hwsi.training import load_checkpoint

    corpus = _load_corpus(args.data)
    ckpt = load_checkpoint(args.ckpt)
    cfg = _ckpt_run_config(ckpt)
    sample = _sample(corpus, args.sample)
    enc_cfg = cfg.encoder_config(corpus)
    spf = spf_sample(sample, corpus.bank, cfg.spf_config("inference"))
    proj = project(hierarchical_forward(sample, spf, ckpt.params, enc_cfg), ckpt.params, enc_cfg)
    seq = assemble_multimodal_sequence(proj, encode_text(ckpt.params, sample.tokens, enc_cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_sequence(seq, out)
    counts = {name: int(np.sum(np.array(seq.segment_names()) == name))
              for name in ("cell", "patch", "region", "wsi", "text")}
    write_run_header(out.parent, "export-sequence", cfg, {"sample": sample.sample_id, "segments": counts},
                     name="export_sequence")
    print(f"wrote sequence of length {len(seq)} to {out} ({counts})")
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hwsi", description="Hierarchical slide/report alignment at toy scale.")
    p.add_argument("--version", action="version", version=f"hwsi {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--config", help="flat JSON run config")
    g.add_argument("--out", required=True, help="output corpus directory")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("spf", help="show semantic patch filtering for one sample")
    s.add_argument("--data", required=True)
    s.add_argument("--sample", required=True, help="sample id, e.g. wsi_00003")
    s.add_argument("--mode", choices=("train", "infer"), default="train")
    s.add_argument("--tokens", help="comma-separated report token ids (train mode only)")
    s.add_argument("--top-k", type=int, dest="top_k")
    s.add_argument("--config")
    s.add_argument("--out", help="also write the selection as JSON")
    s.set_defaults(func=cmd_spf)

    t = sub.add_parser("train", help="run training stage 1 or 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--ckpt", required=True, help="stage 1: checkpoint to write; stage 2: stage-1 checkpoint")
    t.add_argument("--out", help="stage 2 output checkpoint (default: overwrite --ckpt)")
    t.add_argument("--resume", action="store_true", help="continue an interrupted run from its checkpoint")
    t.add_argument("--config")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--stop-after", type=int, dest="stop_after", help="pause after this many epochs")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("gradcheck", help="finite-difference check of losses and encoders")
    c.add_argument("--suite", choices=("losses", "encoders", "all"), default="all")
    c.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--task", choices=("zeroshot", "retrieval", "crossmodal"), required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True, help="metrics CSV; a figure is written next to it")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-sequence", help="write the multimodal token sequence of one sample")
    x.add_argument("--data", required=True)
    x.add_argument("--ckpt", required=True)
    x.add_argument("--sample", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=thread_count()):
            return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"hwsi {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (HwsiError, OSError) as exc:
        print(f"hwsi {args.command}: runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
