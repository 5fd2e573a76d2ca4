"""Command line front end.

Four subcommands: pretrain (build and denoise-train a backbone), tune
(two-stage or full tuning of one task), analyze (the empirical studies),
and report (pretty-print a run directory). Exit codes: 0 success, 2 usage
error, 3 invalid configuration/data/checkpoint, 4 numeric failure.

Every subcommand accepts --config pointing at a JSON file of defaults
(flat keys named like the long flags, with format_version 1); explicit
flags win over the file, the file wins over built-ins. Unknown keys are
rejected rather than ignored.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, DataError, HadaptError, NumericError, UsageError
from .jsonio import dump_json, load_json
from .model import ModelConfig
from .tasks import TASK_NAMES, task_spec
from .training import (
    HyperParams,
    TuneSettings,
    TuningRegime,
    execute_pretrain_run,
    execute_tune_run,
)

CONFIG_FORMAT_VERSION = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route usage problems to exit code 2
        raise UsageError(f"{self.prog}: {message}")


MODEL_KEYS = (
    "vocab_size",
    "hidden_size",
    "num_layers",
    "num_heads",
    "ff_size",
    "max_seq_len",
)


def _load_config_file(path, allowed: set[str]) -> dict:
    try:
        raw = load_json(path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    version = raw.pop("format_version", None)
    if version != CONFIG_FORMAT_VERSION:
        raise ConfigError(
            f"config file {path} needs format_version {CONFIG_FORMAT_VERSION}, "
            f"got {version!r}"
        )
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"config file {path} has unknown keys: {sorted(unknown)}")
    return raw


def _merge(args: argparse.Namespace, file_values: dict, defaults: dict) -> dict:
    """flag > config file > default, per key."""
    out = {}
    for key, default in defaults.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            out[key] = flag_val
        elif key in file_values:
            out[key] = file_values[key]
        else:
            out[key] = default
    return out


def _model_config(values: dict, **overrides) -> ModelConfig:
    fields = {k: values[k] for k in MODEL_KEYS}
    fields.update(overrides)
    return ModelConfig(**fields)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    for key in MODEL_KEYS:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)


def _add_common_tune_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=TASK_NAMES)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-size", dest="train_size", type=int)
    p.add_argument("--dev-size", dest="dev_size", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--stage1-lr", dest="stage1_lr", type=float)
    p.add_argument("--stage1-epochs", dest="stage1_epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)


_MODEL_DEFAULTS = {k: getattr(ModelConfig(), k) for k in MODEL_KEYS}

_PRETRAIN_DEFAULTS = {
    **_MODEL_DEFAULTS,
    "seed": 2024,
    "corpus_size": 8192,
    "epochs": 20,
    "batch_size": 32,
    "lr": 1e-3,
    "weight_decay": 0.01,
}

_TUNE_DEFAULTS = {
    "task": None,
    "seed": 0,
    "train_size": 384,
    "dev_size": 192,
    "batch_size": 32,
    "stage1_lr": 2e-3,
    "stage1_epochs": 8,
    "lr": None,
    "epochs": 16,
    "regime": "hadamard",
    "modules": "WBN",
    "max_layers": None,
    "adapter_order": 1,
}

_ANALYZE_DEFAULTS = {
    **_TUNE_DEFAULTS,
    "max_examples": 64,
    "ks": None,
    "module_sets": None,
}


def _build_settings(values: dict) -> TuneSettings:
    return TuneSettings(
        task=values["task"],
        seed=values["seed"],
        train_size=values["train_size"],
        dev_size=values["dev_size"],
        batch_size=values["batch_size"],
        stage1_lr=values["stage1_lr"],
        stage1_epochs=values["stage1_epochs"],
        lr=values["lr"],
        epochs=values["epochs"],
    )


def _build_regime(values: dict) -> TuningRegime:
    name = values["regime"]
    if name == "classifier_only":
        return TuningRegime.classifier_only()
    if name == "full":
        return TuningRegime.full()
    if name == "hadamard":
        return TuningRegime.hadamard(max_layers=values["max_layers"])
    if name == "custom":
        return TuningRegime.custom(
            values["modules"],
            max_layers=values["max_layers"],
            adapter_order=values["adapter_order"],
        )
    raise UsageError(f"unknown regime '{name}'")


def _require(values: dict, key: str, flag: str):
    if values.get(key) in (None, ""):
        raise UsageError(f"missing required option {flag}")
    return values[key]


def cmd_pretrain(args) -> int:
    file_values = (
        _load_config_file(args.config, set(_PRETRAIN_DEFAULTS)) if args.config else {}
    )
    values = _merge(args, file_values, _PRETRAIN_DEFAULTS)
    cfg = _model_config(values)
    hp = HyperParams(
        lr=values["lr"],
        epochs=values["epochs"],
        batch_size=values["batch_size"],
        weight_decay=values["weight_decay"],
    )
    report = execute_pretrain_run(cfg, values["seed"], values["corpus_size"], hp, args.out)
    print(f"pretrained backbone written to {args.out}")
    print(f"final denoising loss: {report['final_loss']:.4f}")
    return 0


def _reject_regime_conflicts(args, file_values: dict, values: dict) -> None:
    """Flags that only make sense for some regimes are errors elsewhere."""

    def explicit(key: str) -> bool:
        return getattr(args, key, None) is not None or key in file_values

    regime = values["regime"]
    if regime != "custom":
        if explicit("modules"):
            raise UsageError("--modules requires --regime custom")
        if explicit("adapter_order"):
            raise UsageError("--adapter-order requires --regime custom")
    if regime in ("full", "classifier_only") and explicit("max_layers"):
        raise UsageError(f"--layers does not apply to regime '{regime}'")


def cmd_tune(args) -> int:
    file_values = _load_config_file(args.config, set(_TUNE_DEFAULTS)) if args.config else {}
    values = _merge(args, file_values, _TUNE_DEFAULTS)
    _reject_regime_conflicts(args, file_values, values)
    task = _require(values, "task", "--task")
    spec = task_spec(task, values["train_size"], values["dev_size"])
    regime = _build_regime(values)
    settings = _build_settings(values)
    report = execute_tune_run(args.backbone, spec, regime, settings, args.out)
    final = report["final"]
    print(f"tuned {task} under regime '{regime.name}': "
          f"{final['metric_name']}={final['metric']:.4f}")
    print(f"trainable parameters: {report['stages'][-1]['trainable']}")
    print(f"run directory: {args.out}")
    return 0


def _analyze_norms(args, values) -> dict:
    from .analysis import norm_study
    from .checkpoint import load_checkpoint
    from .tasks import gen_task

    task = _require(values, "task", "--task")
    spec = task_spec(task, values["train_size"], values["dev_size"])
    _, dev = gen_task(spec, values["seed"])
    base_store, base_cfg = load_checkpoint(_require_arg(args.backbone, "--backbone"))
    tuned_store, tuned_cfg = load_checkpoint(_require_arg(args.run, "--run"))
    return norm_study(base_store, base_cfg, tuned_store, tuned_cfg, dev,
                      max_examples=values["max_examples"])


def _analyze_characteristic(args, values) -> dict:
    from .analysis import characteristic_values
    from .checkpoint import load_checkpoint
    from .tasks import gen_task

    task = _require(values, "task", "--task")
    spec = task_spec(task, values["train_size"], values["dev_size"])
    _, dev = gen_task(spec, values["seed"])
    store, cfg = load_checkpoint(_require_arg(args.run, "--run"))
    return characteristic_values(store, cfg, dev, max_examples=values["max_examples"])


def _analyze_gradients(args, values) -> dict:
    from .analysis import gradient_study
    from .tasks import gen_task

    task = _require(values, "task", "--task")
    spec = task_spec(task, values["train_size"], values["dev_size"])
    train, dev = gen_task(spec, values["seed"])
    settings = _build_settings(values)
    return gradient_study(_require_arg(args.backbone, "--backbone"), spec, settings,
                          train, dev)


def _analyze_fitting(args, values) -> dict:
    from .analysis import fitting_study

    task = _require(values, "task", "--task")
    spec = task_spec(task, values["train_size"], values["dev_size"])
    settings = _build_settings(values)
    return fitting_study(_require_arg(args.backbone, "--backbone"), spec, settings, args.out)


def _analyze_patterns(args, values) -> dict:
    from .analysis import pattern_study

    if not args.runs:
        raise UsageError("patterns needs --runs label=dir[,label=dir...]")
    pairs = []
    for part in args.runs.split(","):
        if "=" not in part:
            raise UsageError(f"--runs entry '{part}' is not label=dir")
        label, path = part.split("=", 1)
        pairs.append((label.strip(), path.strip()))
    return pattern_study(pairs)


def _analyze_layer_ablation(args, values) -> dict:
    from .analysis import layer_ablation

    task = _require(values, "task", "--task")
    spec = task_spec(task, values["train_size"], values["dev_size"])
    settings = _build_settings(values)
    ks = None
    if values["ks"]:
        ks = [int(x) for x in str(values["ks"]).split(",")]
    return layer_ablation(_require_arg(args.backbone, "--backbone"), spec, settings,
                          args.out, ks=ks)


def _analyze_module_ablation(args, values) -> dict:
    from .analysis import module_ablation

    task = _require(values, "task", "--task")
    spec = task_spec(task, values["train_size"], values["dev_size"])
    settings = _build_settings(values)
    sets = None
    if values["module_sets"]:
        sets = [s.strip() for s in str(values["module_sets"]).split(",")]
    return module_ablation(_require_arg(args.backbone, "--backbone"), spec, settings,
                           args.out, module_sets=sets)


def _require_arg(value, flag: str):
    if not value:
        raise UsageError(f"missing required option {flag}")
    return value


_ANALYZE_KINDS = {
    "norms": _analyze_norms,
    "characteristic": _analyze_characteristic,
    "gradients": _analyze_gradients,
    "fitting": _analyze_fitting,
    "patterns": _analyze_patterns,
    "layer-ablation": _analyze_layer_ablation,
    "module-ablation": _analyze_module_ablation,
}


def cmd_analyze(args) -> int:
    from .analysis import write_analysis_artifacts

    file_values = (
        _load_config_file(args.config, set(_ANALYZE_DEFAULTS)) if args.config else {}
    )
    values = _merge(args, file_values, _ANALYZE_DEFAULTS)
    report = _ANALYZE_KINDS[args.kind](args, values)
    write_analysis_artifacts(report, args.out)
    print(f"analysis '{report['kind']}' written to {args.out}")
    if "reported_findings" in report:
        for key, val in sorted(report["reported_findings"].items()):
            print(f"  {key}: {val}")
    return 0


def _print_table(headers: list[str], rows: list[list]) -> None:
    cells = [headers] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    for r_i, row in enumerate(cells):
        print("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if r_i == 0:
            print("  ".join("-" * w for w in widths))


def _consolidated_report(runs: list[str], csv_path: str | None) -> int:
    """One table row per tuning run: task, regime, metric, params, time."""
    rows = []
    for run in runs:
        report_path = os.path.join(run, "report.json")
        if not os.path.isfile(report_path):
            raise DataError(f"no report.json under '{run}'")
        report = load_json(report_path)
        if report.get("kind") == "pretrain" or "task" not in report:
            raise DataError(f"'{run}' is not a tuning run; the combined table "
                            "covers (task, regime) rows")
        acct = report["accounting"]
        timing_path = os.path.join(run, "timing.json")
        wall = ""
        if os.path.isfile(timing_path):
            wall = f"{load_json(timing_path)['wall_time_s']:.1f}"
        rows.append([report["task"], report["regime"]["name"],
                     f"{report['final']['metric']:.4f}", acct["trainable"],
                     acct["fraction_display"], wall])
    headers = ["task", "regime", "metric", "trainable", "fraction", "wall_time_s"]
    _print_table(headers, rows)
    if csv_path:
        from .jsonio import write_csv

        write_csv(csv_path, headers, rows)
        print(f"wrote {csv_path}")
    return 0


def cmd_report(args) -> int:
    if len(args.run) > 1:
        return _consolidated_report(args.run, args.csv)
    run = args.run[0]
    report_path = os.path.join(run, "report.json")
    if os.path.isfile(report_path):
        report = load_json(report_path)
        if report.get("kind") == "pretrain":
            print(f"pretrain run {run}")
            print(f"final denoising loss: {report['final_loss']:.4f}")
            rows = [[r["epoch"], f"{r['train_loss']:.4f}"]
                    for r in report["stages"][0]["epochs"]]
            _print_table(["epoch", "train_loss"], rows)
            return 0
        print(f"tuning run {run}")
        print(f"task: {report['task']}  regime: {report['regime']['name']}  "
              f"seed: {report['seed']}")
        acct = report["accounting"]
        print(f"parameters: {acct['trainable']} trainable of {acct['total']} "
              f"({acct['fraction_display']})")
        rows = []
        for stage in report["stages"]:
            for rec in stage.get("epochs", []):
                dev = rec.get("dev") or {}
                rows.append([stage.get("stage"), rec["epoch"],
                             f"{rec['train_loss']:.4f}",
                             f"{dev.get('metric', float('nan')):.4f}"])
        _print_table(["stage", "epoch", "train_loss", "dev_metric"], rows)
        final = report["final"]
        print(f"final {final['metric_name']}: {final['metric']:.4f}")
        if args.csv:
            from .jsonio import write_csv

            write_csv(args.csv, ["stage", "epoch", "train_loss", "dev_metric"], rows)
            print(f"wrote {args.csv}")
        return 0
    # fall back to analysis artifacts
    found = [f for f in sorted(os.listdir(run)) if f.endswith(".json")] if os.path.isdir(run) else []
    if not found:
        raise DataError(f"no report.json or analysis output under '{run}'")
    for fname in found:
        report = load_json(os.path.join(run, fname))
        kind = report.get("kind", fname)
        print(f"analysis: {kind}")
        if "cells" in report:
            rows = [[label, f"{c['metric']:.4f}", c["trainable"]]
                    for label, c in report["cells"].items()]
            _print_table(["cell", "metric", "trainable"], rows)
        if "per_layer" in report and kind == "norms":
            rows = [[l["layer"], f"{l['mean_delta']:+.4f}", f"{l['positive_fraction']:.2f}"]
                    for l in report["per_layer"]]
            _print_table(["layer", "mean_delta", "positive_fraction"], rows)
        if "reported_findings" in report:
            for key, val in sorted(report["reported_findings"].items()):
                print(f"  {key}: {val}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=False)

    p = sub.add_parser("pretrain", help="build and pretrain a backbone")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--corpus-size", dest="corpus_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    _add_model_flags(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("tune", help="two-stage or full tuning on one task")
    p.add_argument("--backbone", "--from", dest="backbone", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--regime", choices=("classifier_only", "hadamard", "full", "custom"))
    p.add_argument("--modules")
    p.add_argument("--max-layers", "--layers", dest="max_layers", type=int)
    p.add_argument("--adapter-order", dest="adapter_order", type=int)
    _add_common_tune_flags(p)
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("analyze", help="run an empirical study")
    p.add_argument("--kind", required=True, choices=sorted(_ANALYZE_KINDS))
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--backbone")
    p.add_argument("--run")
    p.add_argument("--runs", help="label=dir[,label=dir...] for patterns")
    p.add_argument("--max-examples", dest="max_examples", type=int)
    p.add_argument("--ks", help="comma-separated layer counts for layer-ablation")
    p.add_argument("--module-sets", dest="module_sets",
                   help="comma-separated module sets for module-ablation")
    p.add_argument("--modules")
    p.add_argument("--max-layers", dest="max_layers", type=int)
    p.add_argument("--adapter-order", dest="adapter_order", type=int)
    p.add_argument("--regime")
    _add_common_tune_flags(p)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("report", help="print one run, or a combined table for several")
    p.add_argument("--run", required=True, action="append",
                   help="run directory; repeat for a combined (task, regime) table")
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help()
            return 0
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except HadaptError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
