"""Command line entry point: preprocess, train, generate, evaluate, dump-attention, sweep."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import ModelConfig, RunConfig
from .corpus import (corpus_stats, decode, encode, find_corpus_files, load_corpus, preprocess_code,
                     preprocess_pseudo, read_pairs, split_pairs)
from .metrics import MetricReport, evaluate_corpus, read_lines
from .model import DeepPseudoModel, greedy, search
from .tensor import no_grad
from .training import train

log = logging.getLogger("deeppseudo")

THREADS_ENV = "DEEPPSEUDO_THREADS"
SWEEP_AXES = {
    "d_model": (256, 384, 512),
    "n_layers": (2, 3, 4),
    "kernel_size": (1, 3, 5),
}


class CliError(Exception):
    """A user-facing failure reported as a single line."""


def thread_cap() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def thread_limit():
    n = thread_cap()
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ------------------------------------------------------------------ config


def run_config(args) -> RunConfig:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    named = {
        "seed": getattr(args, "seed", None),
        "attention": getattr(args, "attention", None),
        "positional_encoding": getattr(args, "pe", None),
        "corpus": getattr(args, "corpus", None),
        "epochs": getattr(args, "epochs", None),
    }
    overrides.update({k: str(v) for k, v in named.items() if v is not None})
    return RunConfig.load(getattr(args, "config", None), overrides)


def out_dir(args, cfg: RunConfig | None = None, default: str = ".") -> Path:
    path = Path(args.out or (cfg.paths.get("out") if cfg else None) or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def checkpoint_path(args, cfg: RunConfig | None = None) -> Path:
    raw = getattr(args, "checkpoint", None) or (cfg.paths.get("checkpoint") if cfg else None)
    if not raw:
        raise CliError("no checkpoint given (use --checkpoint or checkpoint= in the config)")
    return Path(raw)


def corpus_dir(args, cfg: RunConfig) -> Path:
    raw = getattr(args, "corpus", None) or cfg.paths.get("corpus")
    if not raw:
        raise CliError("no corpus given (use --corpus or corpus= in the config)")
    return Path(raw)


def load_model(path: Path) -> DeepPseudoModel:
    try:
        return ckpt_io.load_model(path)
    except ckpt_io.CheckpointError as exc:
        raise CliError(str(exc)) from exc


def _corpus(args, cfg: RunConfig):
    return load_corpus(corpus_dir(args, cfg), seed=cfg.train.seed, min_frequency=cfg.train.min_frequency)


# ------------------------------------------------------------------ preprocess


def cmd_preprocess(args) -> int:
    cfg = run_config(args)
    src = corpus_dir(args, cfg)
    dest = out_dir(args, cfg)
    found = find_corpus_files(src)
    if "presplit" in found:
        splits = {s: read_pairs(*found["presplit"][s]) for s in ("train", "valid", "test")}
    else:
        splits = dict(zip(("train", "valid", "test"), split_pairs(read_pairs(*found["single"]), seed=cfg.train.seed)))
    corpus = _corpus(args, cfg)
    for name, pairs in splits.items():
        (dest / f"{name}.code.tok").write_text(
            "".join(" ".join(preprocess_code(p.code_line)) + "\n" for p in pairs), encoding="utf-8")
        (dest / f"{name}.anno.tok").write_text(
            "".join(" ".join(preprocess_pseudo(p.pseudo_line)) + "\n" for p in pairs), encoding="utf-8")
    corpus.src_vocab.save(dest / "src.vocab")
    corpus.tgt_vocab.save(dest / "tgt.vocab")
    everything = [p for pairs in splits.values() for p in pairs]
    rows = [("code", corpus_stats([preprocess_code(p.code_line) for p in everything])),
            ("pseudo", corpus_stats([preprocess_pseudo(p.pseudo_line) for p in everything]))]
    lines = ["side\tavg\tmode\tmedian\t<20\t<50\t<100"]
    for side, st in rows:
        r = st.as_row()
        lines.append(f"{side}\t{r['avg']:.2f}\t{r['mode']}\t{r['median']}\t{r['<20']}\t{r['<50']}\t{r['<100']}")
    lines.append("")
    lines.append("split\tpairs")
    lines.extend(f"{name}\t{len(pairs)}" for name, pairs in splits.items())
    lines.append(f"src_vocab\t{len(corpus.src_vocab)}")
    lines.append(f"tgt_vocab\t{len(corpus.tgt_vocab)}")
    report = "\n".join(lines) + "\n"
    (dest / "stats.tsv").write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return 0


# ------------------------------------------------------------------ train


def cmd_train(args) -> int:
    cfg = run_config(args)
    dest = out_dir(args, cfg)
    ckpt = Path(args.checkpoint or cfg.paths.get("checkpoint") or dest / "model.dpsc")
    log_path = Path(cfg.paths.get("log") or dest / "train_log.tsv")
    corpus = _corpus(args, cfg)
    resume = ckpt_io.load(args.resume) if args.resume else None
    result = train(corpus, cfg.model, cfg.train, checkpoint_path=ckpt, log_path=log_path, resume=resume)
    counts = result.model.count_parameters()
    print(f"checkpoint\t{ckpt}")
    print(f"best_epoch\t{result.best_epoch}")
    print(f"parameters\t{counts['total']}")
    return 0


# ------------------------------------------------------------------ generate


def translate(model: DeepPseudoModel, line: str, k: int, use_greedy: bool = False) -> str:
    tokens = preprocess_code(line)
    if not tokens:
        return ""
    ids = encode(tokens, model.src_vocab)
    hyp = greedy(model, ids) if use_greedy else search(model, ids, k=k)
    return " ".join(decode(hyp.ids, model.tgt_vocab))


def cmd_generate(args) -> int:
    if (args.line is None) == (args.input is None):
        raise CliError("give exactly one of --line or --input")
    model = load_model(checkpoint_path(args))
    if args.k < 1:
        raise CliError("beam size -k must be >= 1")
    lines = [args.line] if args.line is not None else read_lines(args.input)
    outputs = [translate(model, line, args.k, args.greedy) for line in lines]
    text = "".join(o + "\n" for o in outputs)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------ evaluate


def cmd_evaluate(args) -> int:
    if args.hyp or args.ref:
        if not (args.hyp and args.ref):
            raise CliError("--hyp and --ref must be given together")
        hyps, refs = read_lines(args.hyp), read_lines(args.ref)
        if len(hyps) != len(refs):
            raise CliError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
        report = evaluate_corpus(hyps, refs)
    else:
        cfg = run_config(args)
        model = load_model(checkpoint_path(args, cfg))
        corpus = _corpus(args, cfg)
        raw = corpus.raw[args.split]
        if not raw:
            raise CliError(f"split {args.split!r} is empty")
        hyps = [translate(model, p.code_line, args.k) for p in raw]
        refs = [" ".join(preprocess_pseudo(p.pseudo_line)) for p in raw]
        report = evaluate_corpus(hyps, refs)
        if args.out:
            dest = out_dir(args)
            (dest / f"{args.split}.hyp").write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    text = report.to_tsv()
    if args.out:
        report.write_tsv(out_dir(args) / "report.tsv")
    sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------ dump-attention


def attention_maps(model: DeepPseudoModel, code_line: str, layer: int = -1, kind: str = "encoder"):
    """(weights (heads, rows, cols), row labels, column labels) for one code line."""
    tokens = preprocess_code(code_line)[: model.config.max_src_len]
    if not tokens:
        raise CliError("cannot dump attention for an empty line")
    ids = np.asarray([encode(tokens, model.src_vocab)], dtype=np.int64)
    model.eval()
    with no_grad():
        memory = model.encode(ids)
        if kind == "encoder":
            weights = model.encoder.layers[layer].last_weights.data[0]
            rows = tokens
        else:
            hyp = search(model, ids[0])
            prefix = hyp.ids[:-1]
            model.decode(memory, None, np.asarray([prefix], dtype=np.int64))
            weights = model.decoder.layers[layer].last_cross_weights.data[0]
            rows = [model.tgt_vocab.token(i) for i in prefix]
    cols = tokens if weights.shape[-1] == len(tokens) else [f"proj_{j}" for j in range(weights.shape[-1])]
    return weights, rows, cols


def _label(token: str) -> str:
    return token.replace("\t", " ").replace("\n", " ")


def cmd_dump_attention(args) -> int:
    model = load_model(checkpoint_path(args))
    dest = out_dir(args, default="attention")
    weights, rows, cols = attention_maps(model, args.line, args.layer, args.kind)
    for h, mat in enumerate(weights):
        lines = ["\t".join([""] + [_label(c) for c in cols])]
        for label, row in zip(rows, mat):
            lines.append("\t".join([_label(label)] + [f"{v:.6g}" for v in row]))
        (dest / f"head_{h}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    combined = {
        "kind": args.kind,
        "layer": args.layer,
        "code": args.line,
        "row_tokens": list(rows),
        "column_tokens": list(cols),
        "heads": [[[float(f"{v:.6g}") for v in row] for row in mat] for mat in weights],
    }
    (dest / "attention.json").write_text(json.dumps(combined, indent=1), encoding="utf-8")
    print(f"wrote {len(weights)} heads to {dest}")
    return 0


# ------------------------------------------------------------------ sweep


def sweep_settings(base: ModelConfig, axis: str) -> list[tuple[int, ModelConfig]]:
    if axis not in SWEEP_AXES:
        raise CliError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    settings = []
    for value in SWEEP_AXES[axis]:
        changes = {axis: value}
        if axis == "d_model":
            changes["d_ff"] = 4 * value
        settings.append((value, replace(base, **changes)))
    return settings


def _run_setting(cfg: RunConfig, model_config: ModelConfig, setting_dir: Path, corpus_path: Path,
                 params_only: bool, k: int) -> dict:
    setting_dir.mkdir(parents=True, exist_ok=True)
    done = setting_dir / "result.json"
    if done.exists():
        return json.loads(done.read_text(encoding="utf-8"))
    with thread_limit():
        corpus = load_corpus(corpus_path, seed=cfg.train.seed, min_frequency=cfg.train.min_frequency)
        model_config = replace(model_config, src_vocab_size=len(corpus.src_vocab),
                               tgt_vocab_size=len(corpus.tgt_vocab))
        result = {"parameters": DeepPseudoModel(model_config).count_parameters()["total"]}
        if not params_only:
            ckpt = setting_dir / "model.dpsc"
            resume = ckpt_io.load(ckpt) if ckpt.exists() else None
            trained = train(corpus, model_config, cfg.train, checkpoint_path=ckpt,
                            log_path=setting_dir / "train_log.tsv", resume=resume)
            hyps = [translate(trained.model, p.code_line, k) for p in corpus.raw["test"]]
            refs = [" ".join(preprocess_pseudo(p.pseudo_line)) for p in corpus.raw["test"]]
            report = evaluate_corpus(hyps, refs)
            report.write_tsv(setting_dir / "report.tsv")
            result.update(zip(MetricReport.HEADERS, report.row()))
    done.write_text(json.dumps(result), encoding="utf-8")
    return result


def cmd_sweep(args) -> int:
    cfg = run_config(args)
    dest = out_dir(args, cfg, default="sweep")
    corpus_path = corpus_dir(args, cfg)
    settings = sweep_settings(cfg.model, args.axis)
    jobs = max(1, args.jobs)
    cap = thread_cap()
    if cap is not None:
        jobs = min(jobs, cap)
    tasks = [(cfg, mc, dest / f"{args.axis}={value}", corpus_path, args.params_only, cfg.beam_size)
             for value, mc in settings]
    if jobs == 1:
        results = [_run_setting(*t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_setting, *zip(*tasks)))
    header = [args.axis, "parameters"] + ([] if args.params_only else list(MetricReport.HEADERS))
    lines = ["\t".join(header)]
    for (value, _), res in zip(settings, results):
        cells = [str(value), str(res["parameters"])]
        if not args.params_only:
            cells += [f"{res[h]:.3f}" for h in MetricReport.HEADERS]
        lines.append("\t".join(cells))
    text = "\n".join(lines) + "\n"
    (dest / f"sweep_{args.axis}.tsv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="random seed for splits, init and batching")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deeppseudo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="tokenise a corpus and write vocabularies and stats")
    p.add_argument("--corpus", help="corpus directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--checkpoint", help="where to write the best checkpoint")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--attention", choices=("self", "linear", "synthesizer", "norm"))
    p.add_argument("--pe", choices=("sinusoidal", "learned"), help="positional encoding")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="translate code lines")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--line", help="a single code line")
    p.add_argument("--input", help="file with one code line per line")
    p.add_argument("--output", help="write results here instead of stdout")
    p.add_argument("-k", type=int, default=3, help="beam size")
    p.add_argument("--greedy", action="store_true", help="arg-max decoding")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint or hypothesis file")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--hyp", help="hypothesis file (one sentence per line)")
    p.add_argument("--ref", help="reference file aligned with --hyp")
    p.add_argument("-k", type=int, default=3, help="beam size")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dump-attention", parents=[common], help="write per-head attention weights")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--line", required=True, help="code line to analyse")
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--kind", choices=("encoder", "cross"), default="encoder")
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("sweep", parents=[common], help="train one model per model-size setting")
    p.add_argument("--axis", required=True, choices=tuple(SWEEP_AXES))
    p.add_argument("--corpus")
    p.add_argument("--jobs", type=int, default=1, help="settings run in parallel processes")
    p.add_argument("--params-only", action="store_true", help="only report parameter counts")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except Exception as exc:  # every failure becomes a one-line diagnostic
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"deeppseudo {args.command}: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
