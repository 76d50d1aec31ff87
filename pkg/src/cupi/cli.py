"""Command-line front end: ``cupi {train,baseline,eval,verify,attack,authz}``.

Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

from . import __version__
from .bundle import ModelBundle, load_checkpoint, save_checkpoint
from .config import (
    ConfigValidationError,
    ExperimentConfig,
    ExperimentData,
    config_hash,
    load_experiment_data,
    parse_config,
    serialize_config,
)
from .data import apply_watermark
from .errors import ConfigError, FormatError
from .evaluation import (
    AccuracyTable,
    AuthzDatasets,
    DropReport,
    attack,
    compute_drops,
    evaluate_accuracy,
    run_authz_scheme,
    summary_json,
    verify_ownership,
)
from .training import TrainResult, train_baseline, train_target_free, train_target_specified

log = logging.getLogger("cupi")

METRIC_COLUMNS = ("epoch", "step", "alpha", "L_s", "L_i", "L_t", "L_cls", "L_Stl", "L_Dis", "total")
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage problems raise instead of exiting with argparse's status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


@dataclass
class RunManifest:
    command: str
    config_hash: str
    code_version: str
    started: str
    finished: Optional[str] = None
    artifacts: list[str] = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2))
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# ------------------------------------------------------------------ metrics


def write_metrics_csv(steps: Iterable[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in steps:
            writer.writerow({k: row.get(k, 0.0) for k in METRIC_COLUMNS})
    return path


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [
            {k: (int(v) if k in ("epoch", "step") else float(v)) for k, v in row.items()} for row in csv.DictReader(f)
        ]


def export_metrics(
    steps: Sequence[dict],
    out_dir,
    summary: Optional[dict] = None,
    drops: Optional[DropReport] = None,
) -> list[Path]:
    """Per-step CSV, summary record and, when given, the drop grid. Returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [write_metrics_csv(steps, out_dir / "metrics.csv")]
    record = dict(summary or {})
    if steps:
        record["final_step"] = {k: steps[-1].get(k) for k in METRIC_COLUMNS}
    if drops is not None:
        record["drops"] = drops.to_dict()
        paths.append(drops.write_csv(out_dir / "drop_report.csv"))
    paths.append(summary_json(record, out_dir / "summary.json"))
    return paths


# ------------------------------------------------------------------ commands


class Run:
    """Shared state of one CLI invocation: config, output directory and emitted files."""

    def __init__(self, command: str, cfg: ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[Path] = []
        self.manifest = RunManifest(command, config_hash(cfg), __version__, _now())
        config_path = self.out / "config.yaml"
        config_path.write_text(serialize_config(cfg))
        self.emit(config_path)
        self._data: Optional[ExperimentData] = None

    @property
    def data(self) -> ExperimentData:
        if self._data is None:
            self._data = load_experiment_data(self.cfg)
        return self._data

    def emit(self, *paths) -> None:
        for p in paths:
            p = Path(p)
            if p not in self.artifacts:
                self.artifacts.append(p)

    def targets(self, include_unauthorized: bool = True) -> dict:
        d = self.data
        out = {d.unauthorized_name: d.unauthorized_test} if include_unauthorized else {}
        out.update(d.heldout)
        return out

    def accuracy_table(self, bundle: ModelBundle, targets: dict) -> AccuracyTable:
        return AccuracyTable(
            evaluate_accuracy(bundle, self.data.test),
            {name: evaluate_accuracy(bundle, ds) for name, ds in targets.items()},
        )

    def finish(self) -> Path:
        self.manifest.finished = _now()
        self.manifest.artifacts = sorted(str(p.relative_to(self.out)) for p in self.artifacts)
        return self.manifest.write(self.out)


def _train(run: Run, mode: str, unauthorized=None, checkpoints: bool = True, cfg=None) -> TrainResult:
    d = run.data
    cfg = cfg or run.cfg.train_config(mode, d.train.image_shape)
    kwargs = {"eval_sets": {"authorized": d.test}, "checkpoint_dir": run.out if checkpoints else None}
    if mode == "baseline":
        return train_baseline(cfg, d.train, **kwargs)
    if mode == "target-free":
        return train_target_free(cfg, d.train, **kwargs)
    return train_target_specified(cfg, d.train, d.unauthorized_train if unauthorized is None else unauthorized, **kwargs)


def cmd_train(run: Run, args) -> None:
    result = _train(run, args.mode)
    run.emit(*result.checkpoints)
    targets = run.targets()
    method = run.accuracy_table(result.bundle, targets)
    summary = {"mode": args.mode, "method": asdict(method), "epochs": result.epochs}
    drops = None
    if not args.no_baseline:
        sl = _train(run, "baseline", checkpoints=False).bundle
        sl_table = run.accuracy_table(sl, targets)
        run.emit(save_checkpoint(sl, run.out / "baseline_final.npz"))
        summary["sl"] = asdict(sl_table)
        drops = compute_drops(sl_table, method)
    run.emit(*export_metrics(result.steps, run.out, summary, drops))


def cmd_baseline(run: Run, args) -> None:
    result = _train(run, "baseline")
    run.emit(*result.checkpoints)
    table = run.accuracy_table(result.bundle, run.targets())
    run.emit(*export_metrics(result.steps, run.out, {"mode": "baseline", "sl": asdict(table), "epochs": result.epochs}))


def _load(path) -> ModelBundle:
    if path is None:
        raise UsageError("this command needs --checkpoint PATH")
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(run: Run, args) -> None:
    bundle = _load(args.checkpoint)
    targets = run.targets()
    table = run.accuracy_table(bundle, targets)
    summary = {"checkpoint": str(args.checkpoint), "method": asdict(table)}
    drops = None
    if args.baseline_checkpoint:
        sl = run.accuracy_table(_load(args.baseline_checkpoint), targets)
        summary["sl"] = asdict(sl)
        drops = compute_drops(sl, table)
    run.emit(*export_metrics([], run.out, summary, drops))


def _owned_model(run: Run, args) -> ModelBundle:
    """Load ``--checkpoint`` or train a model with the watermarked set in the unauthorized role."""
    if args.checkpoint:
        return _load(args.checkpoint)
    patched = apply_watermark(run.data.train, run.cfg.watermark.patch.spec()).retag("unauthorized")
    cfg = run.cfg.watermark_train_config(run.data.train.image_shape)
    result = _train(run, "target-specified", unauthorized=patched, cfg=cfg)
    run.emit(*result.checkpoints)
    run.emit(write_metrics_csv(result.steps, run.out / "metrics.csv"))
    return result.bundle


def cmd_verify(run: Run, args) -> None:
    bundle = _owned_model(run, args)
    res = verify_ownership(bundle, run.data.test, run.cfg.watermark.patch.spec(), run.cfg.watermark.threshold)
    print(f"clean {res.acc_clean:.2f}  patched {res.acc_patched:.2f}  -> {res.verdict}")
    run.emit(summary_json({"ownership": res.to_dict()}, run.out / "summary.json"))


def cmd_attack(run: Run, args) -> None:
    bundle = _owned_model(run, args)
    patch, thr = run.cfg.watermark.patch.spec(), run.cfg.watermark.threshold
    before = verify_ownership(bundle, run.data.test, patch, thr)
    attacked = attack(bundle, run.cfg.attack_config(args.method), run.data.train)
    after = verify_ownership(attacked, run.data.test, patch, thr)
    print(f"{args.method}: gap {before.gap:.2f} -> {after.gap:.2f}  ({after.verdict})")
    run.emit(save_checkpoint(attacked, run.out / f"attacked_{args.method}.npz"))
    run.emit(summary_json({"method": args.method, "before": before.to_dict(), "after": after.to_dict()}, run.out / "summary.json"))


def cmd_authz(run: Run, args) -> None:
    d = run.data
    shifts = {run.cfg.data.unauthorized_shift.kind: run.cfg.data.unauthorized_shift.spec()}
    shifts.update({k: v.spec() for k, v in run.cfg.data.heldout_shifts.items()})
    datasets = AuthzDatasets(d.train, d.test, run.cfg.watermark.patch.spec(), run.cfg.synthesis_spec(), shifts)
    cfg = run.cfg.train_config("target-specified", d.train.image_shape)
    result, report = run_authz_scheme(args.scheme, cfg, datasets, checkpoint_dir=run.out)
    run.emit(*result.checkpoints)
    for cell, acc in report.cells.items():
        mark = "*" if cell in report.authorized_cells else " "
        print(f"{mark} {cell:<28} {acc:6.2f}")
    run.emit(*export_metrics(result.steps, run.out, {"authz": report.to_dict()}))


COMMANDS = {
    "train": cmd_train,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "attack": cmd_attack,
    "authz": cmd_authz,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (defaults apply when omitted)")
    common.add_argument("--out", type=Path, help="output directory (CUPI_OUT overrides)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--epochs", type=int, help="override train.epochs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cupi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="protected training")
    p.add_argument("--mode", choices=("target-specified", "target-free"), default="target-specified")
    p.add_argument("--no-baseline", action="store_true", help="skip the supervised reference run")
    sub.add_parser("baseline", parents=[common], help="supervised baseline training")
    p = sub.add_parser("eval", parents=[common], help="accuracy and drop report for a checkpoint")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--baseline-checkpoint", type=Path)
    p = sub.add_parser("verify", parents=[common], help="watermark ownership verification")
    p.add_argument("--checkpoint", type=Path)
    p = sub.add_parser("attack", parents=[common], help="watermark-removal attack, then re-verify")
    p.add_argument("--method", choices=("ftal", "rtal", "overwrite"), default="ftal")
    p.add_argument("--checkpoint", type=Path)
    p = sub.add_parser("authz", parents=[common], help="applicability-authorization scheme")
    p.add_argument("--scheme", type=int, choices=(1, 2, 3), default=1)
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.epochs is not None:
        if args.epochs < 1:
            raise ConfigValidationError([f"--epochs: must be >= 1, got {args.epochs}"])
        updates["train"] = cfg.train.model_copy(update={"epochs": args.epochs})
    return cfg.model_copy(update=updates) if updates else cfg


def _resolve_out(args, cfg: ExperimentConfig) -> Path:
    env = os.environ.get("CUPI_OUT")
    if env:
        return Path(env)
    if args.out is not None:
        return args.out
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path("runs") / args.command


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
        run = Run(args.command, cfg, _resolve_out(args, cfg))
        COMMANDS[args.command](run, args)
        manifest = run.finish()
    except (UsageError, ConfigError, FileNotFoundError, FormatError) as exc:
        print(f"cupi {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("runtime failure", exc_info=True)
        print(f"cupi {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {manifest}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
