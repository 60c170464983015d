"""Command-line entry point: ``t3slab run`` and ``t3slab verify``."""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from pathlib import Path

import numpy as np

from .config import PRESETS, ConfigError, ExperimentConfig
from .trainer import NumericalFailure

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_NUMERIC = 0, 2, 3, 4


def _err(msg: str) -> None:
    print(f"t3slab: {msg}", file=sys.stderr)


def cmd_run(args) -> int:
    from .presets import InvariantViolation, PresetError, run_preset

    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        over = {}
        if args.seed is not None:
            over["seed"] = args.seed
        if args.tau is not None:
            over["tau"] = args.tau
        for item in args.set or []:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            over[k.strip()] = v.strip()
        cfg = cfg.with_overrides(**over) if over else cfg
        bundle = run_preset(args.preset, cfg, args.out)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except InvariantViolation as exc:
        _err(f"invariant violated: {exc}")
        return EXIT_INVARIANT
    except PresetError as exc:
        _err(f"preset failed: {exc}")
        return EXIT_INVARIANT
    except NumericalFailure as exc:
        _err(f"numerical failure: {exc}")
        return EXIT_NUMERIC
    print(f"wrote {len(bundle.artifacts)} artifacts to {bundle.root}")
    return EXIT_OK


def verify_bundle(root: str | Path) -> list[str]:
    """Integrity checks on a finished bundle; returns a list of problems (empty means OK)."""
    from . import trajectory as TJ
    from .data import read_traces
    from .interventions import load_groups, recompute_transfer
    from .report import verify_manifest

    root = Path(root)
    problems = verify_manifest(root)
    if problems and problems[0].startswith("cannot read manifest"):
        return problems
    metrics = root / "metrics.csv"
    if metrics.exists():
        with open(metrics, encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        widths = {len(r) for r in rows}
        if len(rows) < 2 or len(widths) != 1:
            problems.append("metrics.csv has ragged or missing rows")
        else:
            steps = [int(r[0]) for r in rows[1:]]
            if steps[0] != 0 or any(a >= b for a, b in zip(steps, steps[1:])):
                problems.append("metrics.csv steps must start at 0 and increase")
    traces = read_traces(root / "traces.tsv") if (root / "traces.tsv").exists() else None
    for sel in sorted(root.glob("selection*.txt")):
        try:
            sets = TJ.read_selection(sel)
        except ValueError as exc:
            problems.append(f"{sel.name}: {exc}")
            continue
        problems += [f"{sel.name}: {p}" for p in TJ.check_sets(sets)]
        if traces is None:
            continue
        # per-style selections index the matching style's slice of a mixed trace file
        style = re.fullmatch(r"selection_style(\d+)\.txt", sel.name)
        rows = [e for e in traces if e.style_id == int(style.group(1))] if style else traces
        if not TJ.compatible_with(sets, rows):
            problems.append(f"{sel.name}: lengths do not match traces.tsv")
    tdir = root / "transfer"
    if tdir.is_dir():
        if traces is None:
            problems.append("transfer/ present without traces.tsv")
        else:
            labels = list(load_groups(tdir / "groups.tsv"))
            with open(tdir / "transfer_matrix.csv", encoding="utf-8") as fh:
                cells = {(r["source"], r["target"]): float(r["value"]) for r in csv.DictReader(fh)}
            again = recompute_transfer(tdir, traces)
            if set(cells) != {(s, t) for s in labels for t in labels}:
                problems.append("transfer_matrix.csv does not cover every source/target pair")
            elif max(abs(cells[s, t] - again[i, j]) for i, s in enumerate(labels)
                     for j, t in enumerate(labels)) > 1e-9:
                problems.append("transfer matrix does not match recomputation from checkpoints")
    return problems


def cmd_verify(args) -> int:
    try:
        problems = verify_bundle(args.bundle)
    except (OSError, ValueError) as exc:
        problems = [f"{type(exc).__name__}: {exc}"]
    for p in problems:
        print(f"FAIL {p}")
    if problems:
        return EXIT_INVARIANT
    manifest = json.loads((Path(args.bundle) / "manifest.json").read_text(encoding="utf-8"))
    print(f"OK {manifest['preset']} bundle, {len(manifest['artifacts'])} artifacts verified")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="t3slab", description="Imitation-shock and token-selection experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a preset and write a report bundle")
    run.add_argument("preset", choices=PRESETS)
    run.add_argument("--config", help="key=value config file (defaults apply to missing keys)")
    run.add_argument("--out", required=True, help="output directory (empty or a previous bundle of this preset)")
    run.add_argument("--seed", type=int)
    run.add_argument("--tau", type=float)
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")
    run.set_defaults(func=cmd_run)
    ver = sub.add_parser("verify", help="check a bundle's manifest hashes and internal consistency")
    ver.add_argument("bundle")
    ver.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
