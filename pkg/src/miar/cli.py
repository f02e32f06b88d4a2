"""Command-line surface: config parsing, subcommand dispatch, output layout.

Config files are JSON documents whose top-level keys mirror TrainConfig,
plus an optional ``data`` block (container path or synthetic recipes) and an
optional ``out`` directory.  Unknown keys are rejected by name.  Every run
writes ``resolved_config.json`` with all effective values filled in, so any
run can be reproduced exactly by pointing the same subcommand at that file.

Exit codes: 0 success, 1 runtime failure, 2 usage or config-schema error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .config import TrainConfig
from .datamodel import (
    DatasetSplit,
    SyntheticSpec,
    default_synthetic_specs,
    generate_synthetic,
    load_container,
    write_container,
)
from .errors import ConfigError, MiarError, SchemaError
from .objective_metrics import MetricsReport
from .trainer import (
    DEFAULT_OMEGA_GRID,
    evaluate_model,
    grad_check,
    load_checkpoint,
    run_ablation,
    save_checkpoint,
    sweep_omega,
    train_model,
    write_table,
)

logger = logging.getLogger(__name__)

OUT_ENV_VAR = "MIAR_OUT"
GRAD_CHECK_TOL = 1e-4

RESOLVED_CONFIG = "resolved_config.json"


@dataclass
class CliConfig:
    """Validated configuration document: training fields plus data and out."""

    train: TrainConfig
    data: dict
    out: Optional[str] = None

    def to_dict(self) -> dict:
        doc = self.train.to_dict()
        doc["data"] = self.data
        if self.out is not None:
            doc["out"] = self.out
        return doc


def _type_error(key: str, expected: str, value) -> SchemaError:
    return SchemaError(
        f"config key {key!r} expects {expected}, got {type(value).__name__} ({value!r})"
    )


def _check_field_type(key: str, value, annotation) -> None:
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return
        annotation = args[0]
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _type_error(key, "a number", value)
    elif annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise _type_error(key, "an integer", value)
    elif annotation is bool:
        if not isinstance(value, bool):
            raise _type_error(key, "a boolean", value)
    elif annotation is str:
        if not isinstance(value, str):
            raise _type_error(key, "a string", value)


def _parse_synthetic_spec(name: str, values: dict) -> SyntheticSpec:
    if not isinstance(values, dict):
        raise SchemaError(f"synthetic spec for {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(SyntheticSpec)}
    unknown = set(values) - known
    if unknown:
        raise SchemaError(
            f"unknown synthetic spec key(s) for {name!r}: {', '.join(sorted(unknown))}"
        )
    values = dict(values)
    strength = values.get("signal_strength")
    if isinstance(strength, (int, float)) and not isinstance(strength, bool):
        values["signal_strength"] = (float(strength),) * 4
    elif isinstance(strength, list):
        values["signal_strength"] = tuple(float(s) for s in strength)
    try:
        return SyntheticSpec(**values)
    except (TypeError, ValueError) as err:
        raise SchemaError(f"invalid synthetic spec for {name!r}: {err}") from None


def _normalize_data_block(data) -> dict:
    """Validate the data block and resolve synthetic specs to full dicts."""
    if data is None:
        specs = default_synthetic_specs()
        return {
            "synthetic": {name: dataclasses.asdict(spec) for name, spec in specs.items()}
        }
    if not isinstance(data, dict):
        raise SchemaError("config key 'data' must be an object")
    unknown = set(data) - {"container", "synthetic"}
    if unknown:
        raise SchemaError(f"unknown data key(s): {', '.join(sorted(unknown))}")
    if ("container" in data) == ("synthetic" in data):
        raise SchemaError("data block needs exactly one of 'container' or 'synthetic'")

    if "container" in data:
        if not isinstance(data["container"], str):
            raise SchemaError("data.container must be a path string")
        return {"container": data["container"]}

    block = data["synthetic"]
    if not isinstance(block, dict):
        raise SchemaError("data.synthetic must be an object of split specs")
    unknown = set(block) - {"train", "valid", "test"}
    if unknown:
        raise SchemaError(f"unknown synthetic split(s): {', '.join(sorted(unknown))}")
    if "train" not in block or "valid" not in block:
        raise SchemaError("data.synthetic needs both 'train' and 'valid' specs")
    resolved = {}
    for name, values in block.items():
        spec = _parse_synthetic_spec(name, values)
        resolved[name] = dataclasses.asdict(spec)
    return {"synthetic": resolved}


def parse_config(path: str | Path) -> CliConfig:
    """Load and validate a JSON config file, filling every default."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise SchemaError(f"config is not valid JSON: {err}") from None
    return parse_config_dict(document)


def parse_config_dict(document: dict) -> CliConfig:
    if not isinstance(document, dict):
        raise SchemaError("config document must be a JSON object")

    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    known = set(fields) | {"data", "out"}
    unknown = set(document) - known
    if unknown:
        raise SchemaError(f"unknown config key(s): {', '.join(sorted(unknown))}")

    hints = typing.get_type_hints(TrainConfig)
    train_values = {}
    for key, value in document.items():
        if key in ("data", "out"):
            continue
        _check_field_type(key, value, hints[key])
        train_values[key] = value

    out = document.get("out")
    if out is not None and not isinstance(out, str):
        raise _type_error("out", "a path string", out)

    try:
        train = TrainConfig.from_dict(train_values)
    except ConfigError:
        raise
    data = _normalize_data_block(document.get("data"))
    return CliConfig(train=train, data=data, out=out)


def load_splits(cfg: CliConfig) -> dict[str, DatasetSplit]:
    """Materialize the splits the config describes (generating or loading)."""
    if "container" in cfg.data:
        root = cfg.data["container"]
        splits = {}
        for name in ("train", "valid", "test"):
            try:
                splits[name] = load_container(root, name)
            except FileNotFoundError:
                if name == "test":
                    continue
                raise
        return splits
    specs = {
        name: _parse_synthetic_spec(name, values)
        for name, values in cfg.data["synthetic"].items()
    }
    return {name: generate_synthetic(spec, name=name) for name, spec in specs.items()}


def _resolve_out(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    root = os.environ.get(OUT_ENV_VAR)
    if root:
        return Path(root) / command
    raise SchemaError(f"no output directory: pass --out or set ${OUT_ENV_VAR}")


def _write_resolved(cfg: CliConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = cfg.to_dict()
    doc["out"] = str(out)
    (out / RESOLVED_CONFIG).write_text(json.dumps(doc, indent=2) + "\n")


# --------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    cfg = parse_config(args.config)
    out = _resolve_out(args, "gen-data")
    if "synthetic" not in cfg.data:
        raise SchemaError("gen-data needs a synthetic data block, not a container path")
    _write_resolved(cfg, out)
    for name, values in cfg.data["synthetic"].items():
        split = generate_synthetic(_parse_synthetic_spec(name, values), name=name)
        write_container(split, out)
        logger.info("wrote split %s (%d samples) to %s", name, split.batch.n_samples, out)
    print(f"container written to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = parse_config(args.config)
    out = _resolve_out(args, "train")
    _write_resolved(cfg, out)
    splits = load_splits(cfg)
    checkpoint, history = train_model(cfg.train, splits["train"], splits["valid"])
    save_checkpoint(checkpoint, out / "checkpoint")
    epoch_rows = [r.to_dict() for r in history.epochs]
    if epoch_rows:
        flat = [
            {"epoch": r["epoch"], **{f"train_{k}": v for k, v in r["train"].items()},
             **{f"valid_{k}": v for k, v in r["valid"].items() if k != "acc2_mode"}}
            for r in epoch_rows
        ]
        write_table(flat, out / "history")
    report = evaluate_model(checkpoint, splits["valid"])
    (out / "metrics.json").write_text(report.to_json() + "\n")
    print(
        f"trained {checkpoint.epoch} epochs (best {checkpoint.best_epoch}); "
        f"valid acc2={report.acc2:.4f} f1={report.f1:.4f} "
        f"acc7={report.acc7:.4f} mse={report.mse:.4f}"
    )
    return 0


def _cmd_eval(args) -> int:
    cfg = parse_config(args.config)
    out = _resolve_out(args, "eval")
    _write_resolved(cfg, out)
    checkpoint = load_checkpoint(args.checkpoint)
    splits = load_splits(cfg)
    if args.split not in splits:
        raise MiarError(f"split {args.split!r} not available in the configured data")
    report = evaluate_model(checkpoint, splits[args.split])
    (out / f"metrics_{args.split}.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


def _cmd_ablate(args) -> int:
    cfg = parse_config(args.config)
    out = _resolve_out(args, "ablate")
    _write_resolved(cfg, out)
    splits = load_splits(cfg)
    rows = run_ablation(cfg.train, splits["train"], splits["valid"])
    json_path, csv_path = write_table(rows, out / "ablation")
    for row in rows:
        print(
            f"contrastive={row['contrastive_alignment']!s:5}  "
            f"norm={row['norm_alignment']!s:5}  acc2={row['acc2']:.4f}  "
            f"f1={row['f1']:.4f}  acc7={row['acc7']:.4f}"
        )
    print(f"tables: {json_path} {csv_path}")
    return 0


def _cmd_sweep_omega(args) -> int:
    cfg = parse_config(args.config)
    out = _resolve_out(args, "sweep-omega")
    _write_resolved(cfg, out)
    splits = load_splits(cfg)
    rows = sweep_omega(cfg.train, splits["train"], splits["valid"], values=args.values)
    json_path, csv_path = write_table(rows, out / "sweep_omega")
    for row in rows:
        print(f"omega={row['omega']:<6g} acc2={row['acc2']:.4f} f1={row['f1']:.4f}")
    print(f"tables: {json_path} {csv_path}")
    return 0


def _cmd_grad_check(args) -> int:
    cfg = parse_config(args.config)
    max_rel_err = grad_check(
        cfg.train, sample_fraction=args.sample_fraction, eps=args.eps
    )
    print(f"max rel err {max_rel_err:.3e}")
    if getattr(args, "out", None) or os.environ.get(OUT_ENV_VAR):
        out = _resolve_out(args, "grad-check")
        _write_resolved(cfg, out)
        (out / "grad_check.json").write_text(
            json.dumps({"max_rel_err": max_rel_err, "tolerance": GRAD_CHECK_TOL}) + "\n"
        )
    return 0 if max_rel_err <= GRAD_CHECK_TOL else 1


def _omega_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated float list: {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("at least one omega value is required")
    if any(v < 0 for v in values):
        raise argparse.ArgumentTypeError("omega values must be >= 0")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="miar",
        description=(
            "Train and evaluate the cross-modality fusion + alignment model "
            "on containerized or synthetic multimodal data."
        ),
        epilog=(
            "Config defaults: learning_rate 1e-4, batch_size 16, epochs 100, "
            "seed 101, omega 0.1, alpha 1.0, tau 0.07, norm_p 1, d_model 50, "
            "d_align 32, cmt_layers 2, n_heads 5.  An empty JSON object is a "
            "valid config and selects all defaults plus default synthetic data."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV_VAR}/{name})")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", _cmd_gen_data, "generate synthetic splits and write a container")
    add("train", _cmd_train, "train a model; writes checkpoint, history, metrics")
    p_eval = add("eval", _cmd_eval, "evaluate a checkpoint on one split")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p_eval.add_argument("--split", default="valid", choices=("train", "valid", "test"))
    add("ablate", _cmd_ablate, "train the 4 alignment on/off variants and tabulate")
    p_sweep = add("sweep-omega", _cmd_sweep_omega, "train once per alignment weight")
    p_sweep.add_argument(
        "--values", type=_omega_list, default=list(DEFAULT_OMEGA_GRID),
        help="comma-separated omega grid (default 0,0.05,0.1,0.15,0.2)",
    )
    p_grad = add("grad-check", _cmd_grad_check, "verify gradients by finite differences")
    p_grad.add_argument("--sample-fraction", type=float, default=0.05)
    p_grad.add_argument("--eps", type=float, default=1e-5)
    return parser


_ERROR_CATEGORIES = {
    "SchemaError": "schema",
    "ConfigError": "config",
    "DataError": "data",
    "IntegrityError": "integrity",
    "CheckpointError": "checkpoint",
    "TrainingDivergedError": "training",
    "FileNotFoundError": "io",
    "ValueError": "argument",
}


def dispatch(argv: list[str]) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:  # argparse prints its own usage text
        return int(exit_.code or 0)
    try:
        return args.fn(args)
    except (SchemaError, ConfigError) as err:
        category = _ERROR_CATEGORIES[type(err).__name__]
        print(f"error[{category}]: {err}", file=sys.stderr)
        return 2
    except (MiarError, OSError, ValueError) as err:
        category = _ERROR_CATEGORIES.get(type(err).__name__, "runtime")
        print(f"error[{category}]: {err}", file=sys.stderr)
        return 1


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
