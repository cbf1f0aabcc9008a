"""Command-line entry point: dataset generation, training, evaluation,
ablation grids, and the finite-difference self-check.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime or numeric
failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import gradcheck as G
from . import weather as W
from .dataset import DatasetSpec, SyntheticDataset, Task, generate_dataset
from .errors import ConfigurationError, InputError, MuseNetError, UsageError
from .evaluate import evaluate, report_to_csv
from .model import (EmbedSource, ModelConfig, ModulationKind, format_placement,
                    load_checkpoint, parse_placement)
from .train import TrainConfig, train

CONDITION_TOKENS = list(W.STYLE_TOKENS) + [W.UNSEEN_COMPOSITE]


# ---------------------------------------------------------------------------
# sectioned key=value run configuration


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.split(","))
    if isinstance(like, frozenset):
        return parse_placement(value)
    if isinstance(like, EmbedSource):
        return EmbedSource(value)
    if isinstance(like, ModulationKind):
        return ModulationKind(value)
    return value


def _apply_items(config, items: dict[str, str], section: str):
    known = {f.name: getattr(config, f.name) for f in fields(config)}
    for key, value in items.items():
        if key not in known:
            raise UsageError(f"unknown key {key!r} in [{section}] "
                             f"(valid: {', '.join(sorted(known))})")
        try:
            config = replace(config, **{key: _coerce(value, known[key])})
        except (ValueError, KeyError) as exc:
            raise UsageError(f"bad value for {section}.{key}: {value!r} ({exc})") from exc
    return config


def load_run_config(path=None, overrides=()):
    """Parse the sectioned key=value config file plus key=value overrides
    of the form section.key=value; later settings win."""
    sections: dict[str, dict[str, str]] = {"dataset": {}, "model": {}, "train": {}}
    if path is not None:
        text = Path(path).read_text(encoding="ascii")
        current = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1]
                if current not in sections:
                    raise UsageError(f"unknown config section [{current}]")
                continue
            if current is None or "=" not in line:
                raise UsageError(f"malformed config line: {raw!r}")
            key, _, value = line.partition("=")
            sections[current][key.strip()] = value.strip()
    for item in overrides:
        dotted, _, value = item.partition("=")
        section, _, key = dotted.partition(".")
        if section not in sections or not key or not value:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        sections[section][key] = value
    dataset_spec = _apply_items(DatasetSpec(), sections["dataset"], "dataset")
    model_config = _apply_items(ModelConfig(), sections["model"], "model")
    train_config = _apply_items(TrainConfig(), sections["train"], "train")
    return dataset_spec, model_config, train_config


def _parse_conditions(text: str):
    text = text.strip().lower()
    if text == "all":
        return list(W.StyleKind) + [W.UNSEEN_COMPOSITE]
    if text == "seen":
        return list(W.StyleKind)
    if text == "unseen":
        return [W.UNSEEN_COMPOSITE]
    out = []
    for token in text.split(","):
        token = token.strip()
        if token == W.UNSEEN_COMPOSITE:
            out.append(W.UNSEEN_COMPOSITE)
        elif token in W.STYLE_TOKENS:
            out.append(W.STYLE_TOKENS[token])
        else:
            raise UsageError(f"unknown condition {token!r}; valid: "
                             f"all, seen, unseen, {', '.join(CONDITION_TOKENS)}")
    return out


def _parse_tasks(text: str):
    if text == "both":
        return [Task.DRONE_TO_SAT, Task.SAT_TO_DRONE]
    try:
        return [Task(text)]
    except ValueError as exc:
        raise UsageError(f"unknown task {text!r}; valid: d2s, s2d, both") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    spec, _, _ = load_run_config(args.config, args.set or [])
    spec = replace(spec, seed=args.seed if args.seed is not None else spec.seed)
    for name in ("train_ids", "test_ids", "distractor_ids", "views", "size"):
        value = getattr(args, name)
        if value is not None:
            field = {"views": "views_per_id", "size": "image_size"}.get(name, name)
            spec = replace(spec, **{field: value})
    generate_dataset(spec, args.out)
    print(f"dataset written to {args.out} "
          f"({spec.train_ids}/{spec.test_ids}/{spec.distractor_ids} ids, "
          f"{spec.views_per_id} views, {spec.image_size}px, seed {spec.seed})")
    return 0


def cmd_train(args) -> int:
    _, model_config, train_config = load_run_config(args.config, args.set or [])
    if args.spade is not None:
        model_config = replace(model_config, spade_placement=parse_placement(args.spade))
    if args.modulation is not None:
        model_config = replace(model_config, modulation=ModulationKind(args.modulation))
    if args.style_loss_weight is not None:
        train_config = replace(train_config, loss_weight_style=args.style_loss_weight)
    if args.seed is not None:
        train_config = replace(train_config, seed=args.seed)
    dataset = SyntheticDataset(args.data)
    ckpt, log, _ = train(dataset, train_config, model_config, args.out,
                         verbose=not args.quiet)
    print(f"checkpoint: {ckpt}\nlog: {log}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.model)
    dataset = SyntheticDataset(args.data)
    report = evaluate(model, dataset, _parse_conditions(args.conditions),
                      _parse_tasks(args.task), l2_normalize=args.l2_normalize)
    report_to_csv(report, args.report)
    for task, token, m in report.rows:
        print(f"{token:15s} {task}  r1={m.recall_at[1]:.4f} r5={m.recall_at[5]:.4f} "
              f"r10={m.recall_at[10]:.4f} ap={m.ap:.4f}")
    for task, m in report.means.items():
        print(f"{'mean':15s} {task}  r1={m.recall_at[1]:.4f} r5={m.recall_at[5]:.4f} "
              f"r10={m.recall_at[10]:.4f} ap={m.ap:.4f}")
    print(f"report: {args.report}")
    return 0


ABLATION_GRIDS = {
    "spade-placement": [("b1", {}), ("b2", {}), ("b3", {}), ("b1,b2", {}),
                        ("b1,b3", {}), ("b2,b3", {}), ("b1,b2,b3", {})],
    "spade-vs-residual": [("none", {}), ("spade", {}), ("residual-spade", {})],
    "loss-weight": [("0.5", {}), ("1", {}), ("2", {}), ("5", {})],
}


def _ablation_cell_configs(grid: str, cell: str, model_config, train_config):
    if grid == "spade-placement":
        return replace(model_config, spade_placement=parse_placement(cell)), train_config
    if grid == "spade-vs-residual":
        if cell == "none":
            return replace(model_config, spade_placement=frozenset()), train_config
        kind = ModulationKind.PLAIN if cell == "spade" else ModulationKind.RESIDUAL
        return replace(model_config, modulation=kind), train_config
    return model_config, replace(train_config, loss_weight_style=float(cell))


def cmd_ablate(args) -> int:
    if args.grid not in ABLATION_GRIDS:
        raise UsageError(f"unknown grid {args.grid!r}; valid: {', '.join(ABLATION_GRIDS)}")
    _, model_config, train_config = load_run_config(args.config, args.set or [])
    dataset = SyntheticDataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    conditions = list(W.StyleKind)
    summary_rows = []
    for cell, _ in ABLATION_GRIDS[args.grid]:
        mc, tc = _ablation_cell_configs(args.grid, cell, model_config, train_config)
        tag = cell.replace(",", "")
        t0 = time.perf_counter()
        _, _, model = train(dataset, tc, mc, out_dir / f"cell_{tag}", verbose=False)
        report = evaluate(model, dataset, conditions, [Task.DRONE_TO_SAT])
        report_to_csv(report, out_dir / f"cell_{tag}.csv")
        mean = report.means["d2s"]
        summary_rows.append((cell, mean))
        print(f"{args.grid} cell {cell}: mean r1={mean.recall_at[1]:.4f} "
              f"ap={mean.ap:.4f} ({time.perf_counter() - t0:.0f}s)")
    with open(out_dir / "summary.csv", "w", encoding="ascii") as fh:
        fh.write("cell,r1,r5,r10,ap\n")
        for cell, m in summary_rows:
            fh.write(f"{cell},{m.recall_at[1]:.4f},{m.recall_at[5]:.4f},"
                     f"{m.recall_at[10]:.4f},{m.ap:.4f}\n")
    print(f"summary: {out_dir / 'summary.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    names = list(G.OP_CHECKS) if args.ops == "all" else [s.strip() for s in args.ops.split(",")]
    for name in names:
        if name not in G.OP_CHECKS:
            raise UsageError(f"unknown op {name!r}; valid: all, {', '.join(G.OP_CHECKS)}")
    failed = False
    from .tensor import blas_single_thread
    with blas_single_thread():
        for name in names:
            t0 = time.perf_counter()
            worst = G.run_check(name, trials=args.trials, seed=args.seed)
            ok = worst < G.TOLERANCE
            failed |= not ok
            print(f"{name:24s} worst rel-err {worst:.3e}  "
                  f"[{'PASS' if ok else 'FAIL'}] ({time.perf_counter() - t0:.1f}s)")
    if failed:
        print(f"FAILED: at least one op at or above tolerance {G.TOLERANCE:g}")
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="musenet",
        description="Weather-robust cross-view retrieval on a synthetic dataset")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--train-ids", type=int, default=None)
    p.add_argument("--test-ids", type=int, default=None)
    p.add_argument("--distractor-ids", type=int, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--spade", default=None,
                   help="modulated stage1 bottlenecks: e.g. b2,b3 or none")
    p.add_argument("--modulation", choices=["residual", "plain"], default=None)
    p.add_argument("--style-loss-weight", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded, fully seeded run (the default mode)")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", default="both", help="d2s, s2d or both")
    p.add_argument("--conditions", default="all",
                   help="all, seen, unseen, or a comma list of condition names")
    p.add_argument("--report", required=True)
    p.add_argument("--l2-normalize", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--grid", required=True,
                   help="spade-placement, spade-vs-residual or loss-weight")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference verification")
    p.add_argument("--ops", default="all")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigurationError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MuseNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
