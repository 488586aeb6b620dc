"""Command-line front end: ``vgaze simulate | run | evaluate | sweep``.

Exit codes: 0 success, 1 user error (bad input, config or files), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from dataclasses import fields
from pathlib import Path

from vgaze.config import ConfigError, RunConfig
from vgaze.corpus import TRUTH_JSON, Corpus, CorpusError
from vgaze.harness import (
    EvaluationError,
    ScreenGeometry,
    dump_report,
    evaluate,
    load_truth,
    parse_aspect,
    parse_grid,
    read_jsonl,
    run_pipeline,
    sweep,
    write_table,
)
from vgaze.sim import ScenarioConfig, ScenarioError, write_corpus

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2

USER_ERRORS = (ConfigError, CorpusError, EvaluationError, ScenarioError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2, which we reserve for internal errors
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline configuration (flags override --config)")
    g.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        ftype = str(f.type)
        if ftype == "bool":
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None,
                           help=f"(default {f.default})")
        elif ftype.startswith("int"):
            g.add_argument(flag, dest=f.name, type=int, default=None, metavar="N", help=f"(default {f.default})")
        elif ftype.startswith("float"):
            g.add_argument(flag, dest=f.name, type=float, default=None, metavar="X", help=f"(default {f.default})")
        else:
            g.add_argument(flag, dest=f.name, default=None, help=f"(default {f.default})")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.from_json(args.config) if args.config else RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        return base.with_overrides(**overrides)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _geometry(args: argparse.Namespace) -> ScreenGeometry:
    return ScreenGeometry(args.screen_diag_cm, parse_aspect(args.aspect), args.view_dist_cm)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vgaze", description="Implicit saliency-based gaze calibration toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic corpus from a scenario JSON")
    p.add_argument("scenario", type=Path)
    p.add_argument("out_dir", type=Path)

    p = sub.add_parser("run", help="run the calibration pipeline over a corpus")
    p.add_argument("corpus", type=Path)
    p.add_argument("-o", "--out", type=Path, default=None, help="JSONL output (default <corpus>/out.jsonl)")
    p.add_argument("--gaze", type=Path, default=None, help="external gaze CSV t_ms,frame_index,x,y")
    p.add_argument("--threads", type=int, default=1, help="frame loading and saliency workers")
    p.add_argument("--gaze-only", action="store_true", help="write only gaze and transform records")
    p.add_argument("--timing-json", type=Path, default=None, help="also write the per-module timing summary")
    _add_config_flags(p)

    p = sub.add_parser("evaluate", help="score a run against simulator truth")
    p.add_argument("run_output", type=Path)
    p.add_argument("truth", type=Path)
    p.add_argument("-o", "--out", type=Path, default=None, help="report JSON (default stdout)")
    p.add_argument("--series", type=Path, default=None, help="error-vs-time CSV")
    p.add_argument("--screen-diag-cm", type=float, default=None)
    p.add_argument("--aspect", default="16:9", help="screen aspect W:H (default 16:9)")
    p.add_argument("--view-dist-cm", type=float, default=30.0)
    p.add_argument("--settle-frames", type=int, default=20, help="frames after a pose jump before settling")

    p = sub.add_parser("sweep", help="frames cost (and accuracy, given truth) over a config grid")
    p.add_argument("corpus", type=Path)
    p.add_argument("--grid", action="append", default=[], metavar="FIELD=V1,V2",
                   help="repeatable; default bin_threshold=128,170 and scs_threshold=0.6,0.8")
    p.add_argument("--truth", type=Path, default=None, help="truth JSON (default <corpus>/truth.json if present)")
    p.add_argument("--no-truth", action="store_true", help="skip the accuracy runs")
    p.add_argument("-o", "--out", type=Path, default=None, help="CSV table (default stdout)")
    p.add_argument("--screen-diag-cm", type=float, default=None)
    p.add_argument("--aspect", default="16:9")
    p.add_argument("--view-dist-cm", type=float, default=30.0)
    _add_config_flags(p)
    return parser


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = ScenarioConfig.from_json(args.scenario)
    summary = write_corpus(cfg, args.out_dir)
    print(json.dumps(summary, indent=1))
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    corpus = Corpus(args.corpus, args.gaze)
    out = args.out or (args.corpus / "out.jsonl")
    result = run_pipeline(corpus, config, out, threads=args.threads, verbose_records=not args.gaze_only)
    counts: dict[str, int] = {}
    for t in result.transforms:
        counts[t["source"]] = counts.get(t["source"], 0) + 1
    print(f"wrote {result.records} records ({result.gazes} gazes, {len(result.transforms)} transforms "
          f"{counts}) to {out}")
    print(result.timing_table())
    if args.timing_json:
        args.timing_json.write_text(json.dumps(
            {"frames": result.frames, "wall_s": result.wall_s, "modules": result.timings}, indent=1) + "\n")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    records = read_jsonl(args.run_output)
    truth = load_truth(args.truth)
    ev = evaluate(records, truth, _geometry(args), args.settle_frames)
    text = dump_report(ev.report)
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    if args.series:
        ev.write_series(args.series)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    base = _config_from_args(args)
    grid = parse_grid(args.grid or ["bin_threshold=128,170", "scs_threshold=0.6,0.8"])
    truth = args.truth
    if args.no_truth:
        truth = None
    elif truth is None and (args.corpus / TRUTH_JSON).is_file():
        truth = args.corpus / TRUTH_JSON
    rows = sweep(args.corpus, base, grid, truth, _geometry(args))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            write_table(rows, fh)
    else:
        write_table(rows, sys.stdout)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        traceback.print_exc()
        print("internal error", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
