"""Command-line entry point: ``kamamba <subcommand> ...``.

Exit codes: 0 success, 1 validation failure or training fault, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .config import ABLATIONS, RunConfig
from .errors import TrainingFault, ValidationError
from .losses import TransitionMatrix, build_transition
from .metrics import render_table

log = logging.getLogger("kamamba")

REPORT_TITLES = (("pre", "Pre-year land cover"), ("post", "Post-year land cover"), ("change", "Change detection"))


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _fresh_output(path: Path, force: bool):
    if path.exists() and any(path.iterdir() if path.is_dir() else [path]) and not force:
        raise ValidationError(f"{path} already exists; pass --force to overwrite")


def _need(value, flag: str):
    if value is None:
        raise ValidationError(f"{flag} is required")
    return value


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = Path(_need(args.out, "--out"))
    _fresh_output(out, args.force)
    d = cfg.data
    T_star = data_mod.designed_transition(d.primary, d.secondary, cfg.model.num_classes, d.design_seed)
    ds = data_mod.generate(cfg.seed, d.n_samples, d.change_rate, T_star, steps=cfg.model.steps,
                           height=cfg.model.height, width=cfg.model.width, noise=d.noise,
                           split_fractions=d.split_fractions, num_classes=cfg.model.num_classes)
    data_mod.save(ds, out)
    print(f"wrote {len(ds)} sample pairs to {out}")
    return 0


def cmd_build_transition(args) -> int:
    cfg = _config(args)
    ds = data_mod.load(_need(args.data, "--data"))
    out = Path(_need(args.out, "--out"))
    _fresh_output(out, args.force)
    tm = build_transition(ds.label_pairs(ds.split(args.split)), cfg.model.num_classes, cfg.eps,
                          cfg.include_diagonal)
    tm.save(out)
    if tm.flagged_rows:
        print(f"note: classes without outgoing changes (uniform rows): {tm.flagged_rows}")
    print(f"wrote transition matrix to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    cfg = _config(args)
    if args.parallel_heads:
        cfg.model.parallel_heads = True
    if args.ablation:
        cfg = cfg.with_ablation(args.ablation)
    ds = data_mod.load(_need(args.data, "--data"))
    out = Path(_need(args.out, "--out"))
    if args.resume is None:
        _fresh_output(out, args.force)
    transition = TransitionMatrix.load(args.transition) if args.transition else None
    result = train(cfg, ds, transition, out_dir=out, resume=args.resume)
    last = result.trace[-1] if result.trace else {}
    print(f"trained {len(result.trace)} epochs; final total loss {last.get('total', float('nan')):.5f}")
    print(f"checkpoint: {out}")
    return 0


def cmd_evaluate(args) -> int:
    from .train import evaluate_checkpoint

    ds = data_mod.load(_need(args.data, "--data"))
    report = evaluate_checkpoint(_need(args.checkpoint, "--checkpoint"), ds, args.split, force=args.force)
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote report to {args.out}")
    else:
        print(text)
    return 0


def render_report(report: dict) -> str:
    blocks = [f"split: {report.get('split', '?')}  samples: {report.get('n', '?')}"]
    for key, title in REPORT_TITLES:
        if key in report:
            blocks.append(render_table(report[key], title))
    return "\n\n".join(blocks) + "\n"


def cmd_report(args) -> int:
    path = Path(_need(args.input, "--input"))
    try:
        report = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"report not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    text = render_report(report)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kamamba", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run config JSON")
        if seed:
            sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--force", action="store_true", help="overwrite outputs / ignore dataset mismatch")

    sp = sub.add_parser("generate-data", help="render a synthetic dataset")
    common(sp)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("build-transition", help="estimate T from a split's changed pairs")
    common(sp, seed=False)
    sp.add_argument("--data")
    sp.add_argument("--split", default="train")
    sp.set_defaults(fn=cmd_build_transition)

    sp = sub.add_parser("train", help="train and write a checkpoint")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--transition", help="transition matrix file (default: estimate from train split)")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--parallel-heads", action="store_true")
    sp.add_argument("--ablation", choices=sorted(ABLATIONS))
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="metrics for a checkpoint on a split")
    common(sp, seed=False)
    sp.add_argument("--data")
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="test")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("report", help="render a stored evaluation as tables")
    sp.add_argument("--input", help="report JSON from evaluate")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_report)

    sp = sub.add_parser("selfcheck", help="run the built-in property suites")
    sp.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: --help exits 0, usage errors 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ValidationError, TrainingFault) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
