"""Command-line interface: ``xlmerge {merge,diverge,inspect,sweep,synth}``.

Exit codes: 0 success, 1 validation error, 2 I/O or format error,
3 numerical failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .checkpoint import dump_manifest, inspect, read_checkpoint, write_checkpoint
from .errors import FormatError, NumericError, SweepError, ValidationError, XLMergeError
from .merge import IA3_INTERPRETATIONS, LORA_MODES, RULES, MergeConfig, MergeWarning, diverge, merge
from .synthetic import SyntheticSpec, run_experiment
from .tuning import SweepPlan, make_grid, read_score_file, sweep_t

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 3, 64

log = logging.getLogger("xlmerge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_merge_flags(p: argparse.ArgumentParser, with_t: bool) -> None:
    p.add_argument("--task-src", required=True, type=Path, help="task adapter in the source language")
    p.add_argument("--ref-tgt", required=True, type=Path, help="reference-task adapter in the target language")
    p.add_argument("--ref-src", required=True, type=Path, help="reference-task adapter in the source language")
    if with_t:
        p.add_argument("--t", required=True, type=float, help="scale of the language divergence")
    p.add_argument("--rule", choices=RULES, help="expected rule; must match the adapter kind")
    p.add_argument("--filter", nargs="+", action="extend", metavar="GLOB", help="modules that receive the divergence")
    p.add_argument("--ia3-mode", choices=IA3_INTERPRETATIONS, default="affine")
    p.add_argument("--lora-mode", choices=LORA_MODES, default="factorwise")
    p.add_argument("--cross-rule", choices=RULES, help="force another rule's arithmetic (ablation)")
    p.add_argument("--eps", type=float, default=1e-8, help="divisor clamp for multiplicative merging")
    p.add_argument("--threads", type=int, default=1)


def _config(args, t: float) -> MergeConfig:
    return MergeConfig(
        t=t,
        rule=args.rule,
        ia3_interpretation=args.ia3_mode,
        lora_mode=args.lora_mode,
        merge_filter=tuple(args.filter) if args.filter else None,
        cross_rule_override=args.cross_rule,
        div_eps=args.eps,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xlmerge", description="Cross-lingual adapter merging.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="merge a task adapter with a reference-language divergence")
    _add_merge_flags(p, with_t=True)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--json", action="store_true", help="print the summary as JSON")

    p = sub.add_parser("diverge", help="write the divergence between two reference adapters")
    p.add_argument("--ref-tgt", required=True, type=Path)
    p.add_argument("--ref-src", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--filter", nargs="+", action="extend", metavar="GLOB")
    p.add_argument("--lora-mode", choices=LORA_MODES, default="factorwise")
    p.add_argument("--eps", type=float, default=1e-8)

    p = sub.add_parser("inspect", help="summarize a checkpoint")
    p.add_argument("--path", required=True, type=Path)
    p.add_argument("--json", action="store_true", help="print the summary as JSON")
    p.add_argument("--manifest", action="store_true", help="dump the raw JSON header")

    p = sub.add_parser("sweep", help="grid-search t against a scorer")
    _add_merge_flags(p, with_t=False)
    scorer = p.add_mutually_exclusive_group(required=True)
    scorer.add_argument("--scorer-cmd", help="command template; {checkpoint} and {t} are substituted")
    scorer.add_argument("--score-file", type=Path, help="two-column text file: t score")
    p.add_argument("--grid", help="comma-separated t values (overrides --t-min/--t-max/--t-step)")
    p.add_argument("--t-min", type=float, default=0.0)
    p.add_argument("--t-max", type=float, default=2.0)
    p.add_argument("--t-step", type=float, default=0.1)
    p.add_argument("--direction", choices=("maximize", "minimize"), default="maximize")
    p.add_argument("--reentrant", action="store_true", help="scorer command may run concurrently")
    p.add_argument("--workdir", type=Path, help="where merged checkpoints are written for the scorer")
    p.add_argument("--out", type=Path, help="also write the merge at the best t here")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("synth", help="run the synthetic merge experiment")
    p.add_argument("--spec", required=True, type=Path, help="JSON file with SyntheticSpec fields")
    p.add_argument("--seed", type=int, help="RNG seed (required unless the spec file sets one)")
    p.add_argument("--out", type=Path, help="write the JSON report here")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--json", action="store_true", help="print the JSON report instead of the table")
    return parser


def _cmd_merge(args) -> int:
    sets = [read_checkpoint(p) for p in (args.task_src, args.ref_tgt, args.ref_src)]
    with warnings.catch_warnings(record=True):
        warnings.simplefilter("always", MergeWarning)
        merged = merge(*sets, _config(args, args.t), threads=args.threads)
    write_checkpoint(merged, args.out)
    rec = merged.meta.notes["merge"]
    for msg in rec["warnings"]:
        print(f"warning: {msg}", file=sys.stderr)
    summary = {
        "out": str(args.out),
        "kind": merged.kind,
        "rule": rec["rule"],
        "cross_rule": rec["cross_rule"],
        "t": rec["t"],
        "merged": len(rec["merged_modules"]),
        "copied": len(rec["copied_modules"]),
        "warnings": len(rec["warnings"]),
        "clamp_count": rec["clamp_count"],
    }
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        tag = " [cross-rule]" if rec["cross_rule"] else ""
        print(
            f"{args.out}: {merged.kind} rule={rec['rule']}{tag} t={rec['t']:g} "
            f"merged={summary['merged']} copied={summary['copied']} warnings={summary['warnings']}"
        )
    return EXIT_OK


def _cmd_diverge(args) -> int:
    tgt, src = read_checkpoint(args.ref_tgt), read_checkpoint(args.ref_src)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MergeWarning)
        div = diverge(tgt, src, modules=args.filter, lora_mode=args.lora_mode, eps=args.eps)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_checkpoint(div, args.out)
    print(f"{args.out}: {div.kind} divergence over {len(div)} modules")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    if args.manifest:
        print(json.dumps(dump_manifest(args.path), indent=2))
    elif args.json:
        print(json.dumps(inspect(args.path).to_dict(), indent=2))
    else:
        print(inspect(args.path).to_text())
    return EXIT_OK


def _cmd_sweep(args) -> int:
    sets = [read_checkpoint(p) for p in (args.task_src, args.ref_tgt, args.ref_src)]
    if args.grid:
        try:
            grid = tuple(float(x) for x in args.grid.split(",") if x.strip())
        except ValueError:
            raise UsageError(f"--grid must be comma-separated numbers, got {args.grid!r}") from None
    else:
        grid = make_grid(args.t_min, args.t_max, args.t_step)
    scorer = args.scorer_cmd if args.scorer_cmd else read_score_file(args.score_file)
    plan = SweepPlan(scorer=scorer, t_grid=grid, direction=args.direction, reentrant=args.reentrant)
    base = _config(args, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MergeWarning)
        result = sweep_t(*sets, base, plan, workdir=args.workdir, threads=args.threads)
        if args.out:
            write_checkpoint(merge(*sets, _config(args, result.best_t), threads=args.threads), args.out)
    print(json.dumps(result.to_dict(), sort_keys=True) if args.json else result.to_text())
    return EXIT_OK


def _cmd_synth(args) -> int:
    try:
        raw = json.loads(args.spec.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.spec}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"{args.spec}: expected a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    if "seed" not in raw:
        raise UsageError("synth needs an explicit seed: pass --seed or set \"seed\" in the spec file")
    report = run_experiment(SyntheticSpec.from_dict(raw), threads=args.threads)
    if args.out:
        args.out.write_text(report.to_json() + "\n")
    print(report.to_json() if args.json else report.to_table())
    return EXIT_OK


_COMMANDS = {
    "merge": _cmd_merge,
    "diverge": _cmd_diverge,
    "inspect": _cmd_inspect,
    "sweep": _cmd_sweep,
    "synth": _cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be at least 1")
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"xlmerge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"xlmerge: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"xlmerge: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, SweepError) as exc:
        print(f"xlmerge: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except XLMergeError as exc:
        print(f"xlmerge: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
