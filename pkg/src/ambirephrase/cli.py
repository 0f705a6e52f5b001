"""Command-line entry point: ``ambirephrase [--config F] [--seed N] [--out DIR] <command>``.

Exit status: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import torch

from .config import load_config
from .exceptions import AmbiRephraseError
from .harness import (
    AXIS_MODES, LABEL_CONFIGS, Experiment, export_boxplot_csv, read_records, run_attention_ablation,
    run_lambda_sweep,
)
from .rephraser import load_rephraser
from .training import RephraseSample, STRATEGIES, question_entropy, rephrase_batch

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _global_flags(parser, suppress):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON config file overriding the preset")
    parser.add_argument("--preset", default=argparse.SUPPRESS if suppress else "desk",
                        choices=("desk", "full"))
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--out", default=argparse.SUPPRESS if suppress else "out",
                        help="experiment output directory")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = _Parser(prog="ambirephrase", description="Entropy-controlled visual question rephrasing")
    _global_flags(parser, suppress=False)
    common = _Parser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    add("gen-data", "generate the synthetic world")
    add("train-vqa", "train and freeze the VQA model")
    for name, regime in (("pretrain", "pretrain"), ("train", "scratch"), ("finetune", "finetune")):
        p = add(name, f"train rephrasers in the {regime} regime")
        p.add_argument("--strategy", choices=STRATEGIES + ("all",), default="all")
        p.add_argument("--no-attention", action="store_true", help="encoder without VQA attention")
        p.add_argument("--max-iter", type=int)
    p = add("rephrase", "rephrase one question toward a target entropy")
    p.add_argument("--image", type=int, required=True, help="scene id")
    p.add_argument("--question", required=True)
    p.add_argument("--target-entropy", type=float, required=True)
    p.add_argument("--model", default="Sampling-FT", choices=sorted(LABEL_CONFIGS))
    p = add("sweep-delta", "evaluate trained configurations over the Delta grid")
    p.add_argument("--labels", nargs="+", choices=sorted(LABEL_CONFIGS))
    add("sweep-lambda", "fine-tune and sweep over the lambda grid")
    add("ablate-attention", "train and compare encoders with and without VQA attention")
    p = add("export-plots", "write box-plot CSVs from a sweep's raw records")
    p.add_argument("--sweep", default="delta")
    p.add_argument("--axis-mode", choices=AXIS_MODES + ("both",), default="both")
    add("verify", "run the invariant suite")
    return parser


def _train(exp, args, regime):
    strategies = STRATEGIES if args.strategy == "all" else (args.strategy,)
    overrides = {"max_iter": args.max_iter} if args.max_iter else {}
    for strategy in strategies:
        result, path = exp.train_rephraser(strategy, regime, use_attention=not args.no_attention, **overrides)
        last = result.loss_log[-1]
        print(f"{strategy}-{regime}: {path}  final l_vqg={last['l_vqg']:.4f} l_ent={last['l_ent']:.4f}")


def _rephrase(exp, args):
    ds = exp.dataset
    try:
        ds.scene(args.image)
    except KeyError:
        raise AmbiRephraseError(f"no scene with id {args.image}") from None
    vqa, bank = exp.vqa, exp.bank
    if not 0 <= args.target_entropy <= vqa.max_entropy:
        raise AmbiRephraseError(f"target entropy must lie in [0, {vqa.max_entropy:.4f}]")
    path = exp.label_dirs([args.model])[args.model]
    if not (path / "manifest.json").exists():
        raise AmbiRephraseError(f"missing checkpoint for configuration {args.model!r}: {path}")
    model = load_rephraser(path)[0]
    model.eval()
    source = ds.vocab.encode(args.question)
    e_s = question_entropy(vqa, bank, args.image, source)
    sample = RephraseSample(args.image, source, e_s, target_entropy=args.target_entropy)
    out = rephrase_batch(model, vqa, bank, [sample])[0]
    print(f"Q_S: {args.question}")
    print(f"E_S: {e_s:.4f}")
    print(f"Q_G: {ds.vocab.decode(out.generated)}")
    print(f"E_G: {out.generated_entropy:.4f}")
    print(f"|E_T-E_G|: {abs(args.target_entropy - out.generated_entropy):.4f}")


def _print_rows(rows):
    print(f"{'delta':>8} {'configuration':<18} {'|E_T-E_G|':>16} {'BLEU4':>7} {'CIDEr':>7} "
          f"{'METEOR':>7} {'ROUGE-L':>7} {'div':>5} {'n':>5}")
    for r in rows:
        print(f"{r.delta:+8.3f} {r.label:<18} {r.abs_err_mean:7.4f}±{r.abs_err_std:<7.4f} {r.bleu4:7.4f} "
              f"{r.cider:7.4f} {r.meteor_lite:7.4f} {r.rouge_l:7.4f} {r.diversity:5d} {r.n_questions:5d}")


def _verify():
    from .invariants import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_RUNTIME


def run(args):
    if args.command == "verify":
        return _verify()
    cfg = load_config(args.config, args.preset, args.seed)
    exp = Experiment(cfg, Path(args.out))
    cmd = args.command
    if cmd == "gen-data":
        ds = exp.generate_data()
        print(f"{len(ds.scenes)} scenes, {len(ds.questions)} questions -> {exp.dataset_path}")
    elif cmd == "train-vqa":
        _, report = exp.train_vqa()
        print(f"held-out mean KL {report['heldout_mean_kl']:.4f} -> {exp.vqa_dir}")
    elif cmd in ("pretrain", "train", "finetune"):
        _train(exp, args, {"train": "scratch"}.get(cmd, cmd))
    elif cmd == "rephrase":
        _rephrase(exp, args)
    elif cmd == "sweep-delta":
        rows, _ = exp.sweep_delta(args.labels)
        _print_rows(rows)
    elif cmd == "sweep-lambda":
        rows, _ = run_lambda_sweep(exp)
        _print_rows(rows)
    elif cmd == "ablate-attention":
        rows, _, deltas = run_attention_ablation(exp)
        _print_rows(rows)
        for d in deltas:
            print(f"delta {d['delta']:+.3f} {d['regime']:<8} with-without {d['difference']:+.4f}")
    elif cmd == "export-plots":
        raw = exp.sweep_dir(args.sweep) / "raw.jsonl"
        if not raw.exists():
            raise AmbiRephraseError(f"no raw records at {raw}; run the sweep first")
        records = read_records(raw)
        modes = AXIS_MODES if args.axis_mode == "both" else (args.axis_mode,)
        for mode in modes:
            path, sidecar = export_boxplot_csv(records, mode, exp.sweep_dir(args.sweep) / f"boxplot_{mode}.csv")
            print(f"{path}\n{sidecar}")
    return EXIT_OK


def main(argv=None):
    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (AmbiRephraseError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
