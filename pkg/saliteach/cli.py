"""Command line: ``gen-data``, ``run-experiment`` and ``report``.

    python -m saliteach gen-data --config configs/default.yaml
    python -m saliteach run-experiment --config configs/default.yaml --condition full
    python -m saliteach report runs/planted
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from .config import OUTPUT_ROOT_ENV, config_hash, dump_yaml, output_root, to_plain
from .data import generate_planted_dataset, write_bundle
from .errors import SaliteachError
from .evaluation import emit_report, load_summary
from .loss import LossConfig
from .pipeline import Condition, Experiment, ExperimentConfig, audit_hygiene, run_condition
from .saliency import SaliencyMethod

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass(frozen=True)
class RunManifest:
    config_hash: str
    command: tuple[str, ...]
    started: str
    finished: str
    output_dir: str
    status: str = "ok"

    def write(self, out_dir: Path, name: str) -> Path:
        path = Path(out_dir) / f"run-{name}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(f".{path.name}.tmp")
        tmp.write_text(json.dumps(to_plain(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _seed_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}"
        ) from None


def apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    """Command-line flags win over the config file."""
    changes: dict = {}
    if args.seed_list is not None:
        changes["seed_list"] = args.seed_list
    if args.num_seeds is not None:
        changes["num_seeds"] = args.num_seeds
        if args.seed_list is None:
            changes["seed_list"] = None
    if args.saliency is not None:
        changes["saliency_method"] = SaliencyMethod(args.saliency)
    if args.alpha is not None:
        changes["student_alpha"] = args.alpha
    if args.teacher_alpha is not None:
        changes["teacher_loss"] = LossConfig(cfg.teacher_loss.kind, args.teacher_alpha)
    if args.deterministic:
        changes["deterministic"] = True
    if args.workers is not None:
        changes["workers"] = args.workers
    return replace(cfg, **changes) if changes else cfg


def _default_dir(cfg: ExperimentConfig, kind: str) -> Path:
    return output_root() / kind / cfg.name


def cmd_gen_data(args: argparse.Namespace) -> int:
    started = _now()
    cfg = ExperimentConfig.load(args.config)
    spec = replace(cfg.data, seed=args.seed) if args.seed is not None else cfg.data
    spec.validate()
    out = Path(args.out) if args.out else _default_dir(cfg, "data")
    manifest = write_bundle(generate_planted_dataset(spec), out, force=args.force)
    (out / "task.yaml").write_text(dump_yaml({"data": spec}))
    run = RunManifest(config_hash({"data": spec}), tuple(sys.argv), started, _now(), str(out))
    run.write(out, "gen-data")
    log.info("dataset manifest at %s", manifest)
    return 0


def cmd_run_experiment(args: argparse.Namespace) -> int:
    started = _now()
    cfg = apply_overrides(ExperimentConfig.load(args.config), args)
    out = Path(args.out) if args.out else _default_dir(cfg, "experiments")
    exp = Experiment(cfg, out, resume=args.resume)
    run_condition(exp, Condition(args.condition))
    exp.report(json_only=args.format == "json-only")
    hygiene = audit_hygiene(out, exp.bundle)
    status = "ok" if hygiene.clean else "hygiene-violation"
    run = RunManifest(cfg.hash(), tuple(sys.argv), started, _now(), str(out), status)
    run.write(out, "run-experiment")
    if not hygiene.clean:
        log.error(
            "data hygiene violated: %d EAIS leaks, teacher EAIS evaluations in %s",
            len(hygiene.eais_leaks),
            list(hygiene.teacher_eais_evaluations),
        )
        return 1
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    started = _now()
    exp_dir = Path(args.experiment_dir)
    summary = load_summary(exp_dir)
    for path in emit_report(summary, exp_dir, json_only=args.format == "json-only"):
        print(path)
    run = RunManifest(summary.config_hash, tuple(sys.argv), started, _now(), str(exp_dir))
    run.write(exp_dir, "report")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saliteach", description="Saliency-guided teacher-student training."
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="debug logging (per-epoch metrics)"
    )
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="materialize a planted-salience dataset")
    gen.add_argument("--config", type=Path, required=True)
    gen.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/data/<name>)")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--force", action="store_true", help="overwrite an existing manifest")
    gen.set_defaults(func=cmd_gen_data)

    run = sub.add_parser("run-experiment", help="train cohorts for one condition")
    run.add_argument("--config", type=Path, required=True)
    run.add_argument(
        "--out", help=f"experiment directory (default ${OUTPUT_ROOT_ENV}/experiments/<name>)"
    )
    run.add_argument(
        "--condition", choices=[c.value for c in Condition], default=Condition.FULL.value
    )
    run.add_argument("--resume", action="store_true", help="reuse finished runs and saliency maps")
    run.add_argument("--seed-list", type=_seed_list)
    run.add_argument("--num-seeds", type=int)
    run.add_argument("--saliency", choices=[m.value for m in SaliencyMethod])
    run.add_argument("--alpha", type=float, help="student alpha")
    run.add_argument("--teacher-alpha", type=float)
    run.add_argument(
        "--deterministic", action="store_true", help="serial, bit-reproducible execution"
    )
    run.add_argument("--workers", type=int)
    run.add_argument("--format", choices=["csv+json", "json-only"], default="csv+json")
    run.set_defaults(func=cmd_run_experiment)

    rep = sub.add_parser("report", help="rewrite reports from a finished experiment")
    rep.add_argument("experiment_dir")
    rep.add_argument("--format", choices=["csv+json", "json-only"], default="csv+json")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    try:
        return args.func(args)
    except (SaliteachError, FileNotFoundError) as e:
        log.error("%s", e)
        return 1
