"""Empirical studies of what tuning does to the model.

Five instruments, all reading or producing run directories:

  norm_study            spectral norms of per-example attention outputs,
                        base model vs tuned model, relative change per layer
  characteristic_values scalar summaries of attention outputs (mean over
                        hidden units, then over non-pad positions)
  gradient_study        per-tensor gradient magnitudes recorded during
                        stage-two tuning, raw and per-parameter
  fitting_study         polynomial adapter orders 1..3 against full
                        fine-tuning on one task
  pattern_study         cross-task cosine similarity of learned adapter
                        scale and shift vectors

plus two sweep orchestrators (layer_ablation, module_ablation) that train
grids of tuning cells, sharing one stage-one head per sweep. Cell training
can fan out over processes via the HADAPT_THREADS environment variable.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import model as model_mod
from .adapter import adapter_vectors, parse_module_set
from .checkpoint import load_checkpoint
from .errors import ConfigError
from .jsonio import dump_json, write_csv
from .model import ModelConfig, ParameterStore
from .tasks import Dataset, TaskSpec, collate
from .tensor import spectral_norm
from .training import (
    HyperParams,
    TuneSettings,
    TuningRegime,
    execute_tune_run,
    head_names,
    train_stage1,
    train_stage2,
)

# Attention matrices can have tightly clustered singular values; give the
# iteration generous headroom beyond the checker default (cost is trivial
# at desk scale).
NORM_MAX_ITER = 20000


def run_threads() -> int:
    """Worker count for sweep cells, from HADAPT_THREADS (default 1)."""
    raw = os.environ.get("HADAPT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"HADAPT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"HADAPT_THREADS must be >= 1, got {n}")
    return n


def collect_attention_outputs(
    store: ParameterStore,
    cfg: ModelConfig,
    dataset: Dataset,
    batch_size: int = 32,
    max_examples: int | None = None,
) -> list[list[np.ndarray]]:
    """Per-example, per-layer attention output matrices.

    Returns outer list over examples, inner list over layers; each entry
    is the (true_len, hidden) slice of the layer's concatenated (and, if
    adapters are present, shaped) attention output. Padding rows are
    dropped so later statistics see only real positions.
    """
    examples = dataset.examples
    if max_examples is not None:
        examples = examples[:max_examples]
    out: list[list[np.ndarray]] = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = collate(chunk, cfg.max_seq_len)
        trace: list[np.ndarray] = []
        model_mod.forward_encoder(store, cfg, batch.ids, batch.segments, batch.mask, trace=trace)
        lengths = batch.mask.sum(axis=1).astype(int)
        for b in range(len(chunk)):
            out.append([layer_mat[b, : lengths[b], :] for layer_mat in trace])
    return out


def norm_study(
    base_store: ParameterStore,
    base_cfg: ModelConfig,
    tuned_store: ParameterStore,
    tuned_cfg: ModelConfig,
    dataset: Dataset,
    batch_size: int = 32,
    max_examples: int | None = 64,
) -> dict:
    """Relative spectral-norm change of attention outputs after tuning.

    For each example and layer computes sigma for both models by power
    iteration and the relative change (tuned - base) / base. Layers are
    matched positionally, so both models must share depth.
    """
    if base_cfg.num_layers != tuned_cfg.num_layers:
        raise ConfigError("models must have equal depth for a norm comparison")
    base_mats = collect_attention_outputs(base_store, base_cfg, dataset, batch_size, max_examples)
    tuned_mats = collect_attention_outputs(
        tuned_store, tuned_cfg, dataset, batch_size, max_examples
    )
    rows = []
    per_layer: list[list[float]] = [[] for _ in range(base_cfg.num_layers)]
    for ex_idx, (bm, tm) in enumerate(zip(base_mats, tuned_mats)):
        for layer, (mb, mt) in enumerate(zip(bm, tm)):
            sb = spectral_norm(mb, max_iter=NORM_MAX_ITER)
            st = spectral_norm(mt, max_iter=NORM_MAX_ITER)
            delta = (st - sb) / sb
            per_layer[layer].append(delta)
            rows.append(
                {
                    "example": ex_idx,
                    "layer": layer,
                    "sigma_base": sb,
                    "sigma_tuned": st,
                    "delta": delta,
                }
            )
    layers = []
    for layer, deltas in enumerate(per_layer):
        arr = np.asarray(deltas)
        q1, median, q3 = (float(q) for q in np.quantile(arr, [0.25, 0.5, 0.75]))
        layers.append(
            {
                "layer": layer,
                "mean_delta": float(arr.mean()),
                "std_delta": float(arr.std()),
                "min_delta": float(arr.min()),
                "q1_delta": q1,
                "median_delta": median,
                "q3_delta": q3,
                "max_delta": float(arr.max()),
                "positive_fraction": float((arr > 0).mean()),
            }
        )
    all_deltas = np.asarray([r["delta"] for r in rows])
    return {
        "kind": "norms",
        "examples": len(base_mats),
        "granularity": "per_example",
        "per_layer": layers,
        "rows": rows,
        "reported_findings": {
            "mean_delta_overall": float(all_deltas.mean()),
            "positive_fraction_overall": float((all_deltas > 0).mean()),
            "all_layer_means_positive": bool(all(l["mean_delta"] > 0 for l in layers)),
        },
    }


def token_sequence_average(mat: np.ndarray) -> tuple[np.ndarray, float]:
    """(per-position hidden means, their sequence mean) for one matrix."""
    per_position = mat.mean(axis=1)
    return per_position, float(per_position.mean())


def characteristic_values(
    store: ParameterStore,
    cfg: ModelConfig,
    dataset: Dataset,
    batch_size: int = 32,
    max_examples: int | None = 64,
) -> dict:
    """Scalar attention-output summaries per example and layer."""
    mats = collect_attention_outputs(store, cfg, dataset, batch_size, max_examples)
    per_layer: list[list[float]] = [[] for _ in range(cfg.num_layers)]
    rows = []
    for ex_idx, layers in enumerate(mats):
        for layer, mat in enumerate(layers):
            _, value = token_sequence_average(mat)
            per_layer[layer].append(value)
            rows.append({"example": ex_idx, "layer": layer, "value": value})
    summary = []
    for layer, vals in enumerate(per_layer):
        arr = np.asarray(vals)
        summary.append(
            {
                "layer": layer,
                "mean": float(arr.mean()),
                "std": float(arr.std()),
                "min": float(arr.min()),
                "max": float(arr.max()),
            }
        )
    return {
        "kind": "characteristic_values",
        "examples": len(mats),
        "per_layer": summary,
        "rows": rows,
    }


def gradient_study(
    backbone_dir,
    spec: TaskSpec,
    settings: TuneSettings,
    train: Dataset,
    dev: Dataset,
) -> dict:
    """Record gradient magnitudes for every tensor during stage-two tuning.

    Stage one runs normally (head training), then stage two runs the
    standard adapter regime while a hook captures, per optimization step,
    the L2 norm of each named tensor's gradient. Frozen tensors get
    gradients too (the tape does not know about freezing), so the study
    sees the whole model. Per epoch we keep the mean step norm; the unit
    value divides by parameter count to compare tensors of different
    sizes fairly. Top-5 rankings are reported for the first and the last
    epoch, which is why at least two epochs are required.
    """
    if settings.epochs < 2:
        raise ConfigError("gradient study needs at least 2 epochs (first vs last)")
    backbone_store, backbone_cfg = load_checkpoint(backbone_dir)
    from dataclasses import replace

    task_cfg = replace(
        backbone_cfg,
        num_labels=spec.num_labels,
        is_regression=spec.regression,
        adapter_order=1,
    )
    store = model_mod.build_task_model(backbone_store, backbone_cfg, task_cfg, settings.seed)
    hp1 = HyperParams(lr=settings.stage1_lr, epochs=settings.stage1_epochs,
                      batch_size=settings.batch_size)
    train_stage1(store, task_cfg, spec, train, dev, hp1, settings.seed)

    names = store.names()
    sums: dict[str, list[float]] = {n: [] for n in names}  # one slot per epoch
    counts: list[int] = []

    def hook(epoch: int, st: ParameterStore) -> None:
        while len(counts) <= epoch:
            counts.append(0)
            for n in names:
                sums[n].append(0.0)
        counts[epoch] += 1
        for n in names:
            g = st[n].tensor.grad
            sums[n][epoch] += 0.0 if g is None else float(np.linalg.norm(g))

    regime = TuningRegime.hadamard()
    hp2 = HyperParams(lr=settings.resolved_lr(regime), epochs=settings.epochs,
                      batch_size=settings.batch_size)
    stage2 = train_stage2(store, task_cfg, spec, regime, train, dev, hp2, settings.seed,
                          grad_hook=hook)

    tensors = {}
    for n in names:
        size = store[n].tensor.size
        l2 = [s / c for s, c in zip(sums[n], counts)]
        unit = [v / size for v in l2]
        tensors[n] = {
            "param_count": size,
            "module_tag": store[n].tag,
            "l2_per_epoch": l2,
            "unit_per_epoch": unit,
            "l2_mean": float(np.mean(l2)),
            "unit_mean": float(np.mean(unit)),
        }

    def top5(key: str, epoch: int) -> list[list]:
        ranked = sorted(tensors, key=lambda n: tensors[n][key][epoch], reverse=True)[:5]
        return [[n, tensors[n][key][epoch]] for n in ranked]

    def tag_unit_mean(tag: str) -> float:
        vals = [t["unit_mean"] for t in tensors.values() if t["module_tag"] == tag]
        return float(np.mean(vals)) if vals else 0.0

    return {
        "kind": "gradients",
        "task": spec.name,
        "epochs": settings.epochs,
        "tensors": tensors,
        "first_epoch": {"top_l2": top5("l2_per_epoch", 0),
                        "top_unit": top5("unit_per_epoch", 0)},
        "last_epoch": {"top_l2": top5("l2_per_epoch", -1),
                       "top_unit": top5("unit_per_epoch", -1)},
        "final_metric": stage2["final"]["metric"],
        "reported_findings": {
            "adapter_bias_unit_mean": tag_unit_mean(model_mod.TAG_ADAPTER_B),
            "adapter_weight_unit_mean": tag_unit_mean(model_mod.TAG_ADAPTER_W),
            "bias_unit_exceeds_weight": tag_unit_mean(model_mod.TAG_ADAPTER_B)
            > tag_unit_mean(model_mod.TAG_ADAPTER_W),
        },
    }


def _shared_stage1(backbone_dir, spec, settings, out_dir, train, dev):
    """Train the head once for a sweep; returns its checkpoint path."""
    from dataclasses import replace as dreplace

    backbone_store, backbone_cfg = load_checkpoint(backbone_dir)
    task_cfg = dreplace(
        backbone_cfg,
        num_labels=spec.num_labels,
        is_regression=spec.regression,
        adapter_order=1,
    )
    store = model_mod.build_task_model(backbone_store, backbone_cfg, task_cfg, settings.seed)
    hp1 = HyperParams(lr=settings.stage1_lr, epochs=settings.stage1_epochs,
                      batch_size=settings.batch_size)
    train_stage1(store, task_cfg, spec, train, dev, hp1, settings.seed)
    from .checkpoint import save_checkpoint

    path = os.path.join(out_dir, "stage1", "checkpoint")
    save_checkpoint(store, task_cfg, path)
    return path


def _run_cell(payload: dict) -> dict:
    """Executed possibly in a worker process; must stay top-level."""
    spec = TaskSpec(**payload["spec"])
    settings = TuneSettings(**payload["settings"])
    regime = TuningRegime(
        name=payload["regime"]["name"],
        modules=frozenset(payload["regime"]["modules"]),
        max_layers=payload["regime"]["max_layers"],
        adapter_order=payload["regime"]["adapter_order"],
    )
    report = execute_tune_run(
        payload["backbone_dir"],
        spec,
        regime,
        settings,
        payload["out_dir"],
        stage1_dir=payload["stage1_dir"],
    )
    return {
        "metric": report["final"]["metric"],
        "trainable": report["stages"][-1]["trainable"],
        "out_dir": payload["out_dir"],
    }


def _run_cells(payloads: list[dict]) -> list[dict]:
    threads = run_threads()
    if threads == 1 or len(payloads) <= 1:
        return [_run_cell(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=min(threads, len(payloads))) as pool:
        return list(pool.map(_run_cell, payloads))


def _regime_payload(regime: TuningRegime) -> dict:
    return {
        "name": regime.name,
        "modules": sorted(regime.modules),
        "max_layers": regime.max_layers,
        "adapter_order": regime.adapter_order,
    }


def _spec_payload(spec: TaskSpec) -> dict:
    return {
        "name": spec.name,
        "pair": spec.pair,
        "regression": spec.regression,
        "metric": spec.metric,
        "num_labels": spec.num_labels,
        "train_size": spec.train_size,
        "dev_size": spec.dev_size,
    }


def _settings_payload(settings: TuneSettings) -> dict:
    from dataclasses import asdict

    return asdict(settings)


def layer_ablation(
    backbone_dir,
    spec: TaskSpec,
    settings: TuneSettings,
    out_dir,
    ks: list[int] | None = None,
    train: Dataset | None = None,
    dev: Dataset | None = None,
) -> dict:
    """Adapter tuning restricted to the top k layers, for each k.

    All cells share one stage-one head and one seed, so cells differ only
    in which layers' modules the optimizer may move. k equal to the full
    depth reproduces the standard tuning run exactly.
    """
    from .tasks import gen_task

    os.makedirs(out_dir, exist_ok=True)
    if train is None or dev is None:
        train, dev = gen_task(spec, settings.seed)
    _, backbone_cfg = load_checkpoint(backbone_dir)
    depth = backbone_cfg.num_layers
    if ks is None:
        ks = list(range(1, depth + 1))
    for k in ks:
        if not 1 <= k <= depth:
            raise ConfigError(f"ablation depth k={k} outside [1, {depth}]")
    stage1_dir = _shared_stage1(backbone_dir, spec, settings, out_dir, train, dev)
    payloads = []
    for k in ks:
        payloads.append(
            {
                "backbone_dir": str(backbone_dir),
                "spec": _spec_payload(spec),
                "settings": _settings_payload(settings),
                "regime": _regime_payload(TuningRegime.hadamard(max_layers=k)),
                "out_dir": os.path.join(out_dir, f"cell_k{k}"),
                "stage1_dir": stage1_dir,
            }
        )
    results = _run_cells(payloads)
    cells = {}
    for k, res in zip(ks, results):
        cells[str(k)] = res
    report = {
        "kind": "layer_ablation",
        "task": spec.name,
        "depth": depth,
        "ks": ks,
        "cells": cells,
        "stage1_dir": stage1_dir,
    }
    return report


def module_ablation(
    backbone_dir,
    spec: TaskSpec,
    settings: TuneSettings,
    out_dir,
    module_sets: list[str] | None = None,
    train: Dataset | None = None,
    dev: Dataset | None = None,
) -> dict:
    """Tuning cells for chosen module subsets (e.g. W, B, N, A, B+N)."""
    from .tasks import gen_task

    os.makedirs(out_dir, exist_ok=True)
    if train is None or dev is None:
        train, dev = gen_task(spec, settings.seed)
    if module_sets is None:
        module_sets = ["W", "B", "N", "A", "B+N", "W+B+N"]
    parsed = [(label, parse_module_set(label)) for label in module_sets]
    stage1_dir = _shared_stage1(backbone_dir, spec, settings, out_dir, train, dev)
    payloads = []
    for label, codes in parsed:
        safe = label.replace("+", "")
        payloads.append(
            {
                "backbone_dir": str(backbone_dir),
                "spec": _spec_payload(spec),
                "settings": _settings_payload(settings),
                "regime": _regime_payload(TuningRegime.custom(codes)),
                "out_dir": os.path.join(out_dir, f"cell_{safe}"),
                "stage1_dir": stage1_dir,
            }
        )
    results = _run_cells(payloads)
    cells = {}
    for (label, _), res in zip(parsed, results):
        cells[label] = res
    return {
        "kind": "module_ablation",
        "task": spec.name,
        "module_sets": module_sets,
        "cells": cells,
        "stage1_dir": stage1_dir,
    }


def fitting_study(
    backbone_dir,
    spec: TaskSpec,
    settings: TuneSettings,
    out_dir,
    orders: tuple[int, ...] = (1, 2, 3),
    include_full: bool = True,
    train: Dataset | None = None,
    dev: Dataset | None = None,
) -> dict:
    """Polynomial adapter orders against full fine-tuning on one task."""
    from .tasks import gen_task

    os.makedirs(out_dir, exist_ok=True)
    if train is None or dev is None:
        train, dev = gen_task(spec, settings.seed)
    for o in orders:
        if o not in (1, 2, 3):
            raise ConfigError(f"adapter order {o} unsupported (use 1, 2, or 3)")
    stage1_dir = _shared_stage1(backbone_dir, spec, settings, out_dir, train, dev)
    payloads = []
    labels = []
    for o in orders:
        labels.append(f"order_{o}")
        payloads.append(
            {
                "backbone_dir": str(backbone_dir),
                "spec": _spec_payload(spec),
                "settings": _settings_payload(settings),
                "regime": _regime_payload(
                    TuningRegime.custom(frozenset({"W", "B", "N"}), adapter_order=o)
                ),
                "out_dir": os.path.join(out_dir, f"cell_order{o}"),
                "stage1_dir": stage1_dir,
            }
        )
    if include_full:
        labels.append("full_ft")
        payloads.append(
            {
                "backbone_dir": str(backbone_dir),
                "spec": _spec_payload(spec),
                "settings": _settings_payload(settings),
                "regime": _regime_payload(TuningRegime.full()),
                "out_dir": os.path.join(out_dir, "cell_full"),
                "stage1_dir": None,
            }
        )
    results = _run_cells(payloads)
    cells = dict(zip(labels, results))
    findings = {}
    if "order_1" in cells and "order_3" in cells:
        gap = abs(cells["order_1"]["metric"] - cells["order_3"]["metric"])
        findings["order1_vs_order3_gap"] = gap
    if include_full and "order_1" in cells:
        findings["order1_vs_full_gap"] = cells["full_ft"]["metric"] - cells["order_1"]["metric"]
    return {
        "kind": "fitting",
        "task": spec.name,
        "orders": list(orders),
        "cells": cells,
        "stage1_dir": stage1_dir,
        "reported_findings": findings,
    }


def _cosine(u: np.ndarray, v: np.ndarray) -> float | None:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return None
    return float(u @ v / (nu * nv))


def pattern_study(runs: list[tuple[str, str]]) -> dict:
    """Cross-task similarity of learned adapter vectors.

    runs: (task label, checkpoint directory) pairs; every checkpoint must
    contain order >= 1 adapters of equal width and depth. For each layer
    and each kind (scale vector w, shift vector b) reports the pairwise
    cosine-similarity matrix across tasks plus mean off-diagonal values.
    Zero vectors make cosine undefined; such entries are null and are
    skipped by the means.
    """
    if len(runs) < 2:
        raise ConfigError("pattern study needs at least two runs to compare")
    loaded = []
    for label, path in runs:
        store, cfg = load_checkpoint(path)
        if cfg.adapter_order is None:
            raise ConfigError(f"run '{label}' has no adapters")
        loaded.append((label, store, cfg))
    depth = loaded[0][2].num_layers
    width = loaded[0][2].hidden_size
    for label, _, cfg in loaded:
        if cfg.num_layers != depth or cfg.hidden_size != width:
            raise ConfigError(f"run '{label}' has mismatched shape for comparison")
    labels = [label for label, _, _ in loaded]
    out_layers = []
    kind_means = {"weight": [], "bias": []}
    for layer in range(depth):
        layer_entry = {"layer": layer}
        for kind in ("weight", "bias"):
            vecs = [
                adapter_vectors(store, cfg, kind)[layer] for _, store, cfg in loaded
            ]
            matrix = [[_cosine(vecs[i], vecs[j]) for j in range(len(vecs))]
                      for i in range(len(vecs))]
            off = [
                matrix[i][j]
                for i in range(len(vecs))
                for j in range(len(vecs))
                if i < j and matrix[i][j] is not None
            ]
            mean_off = float(np.mean(off)) if off else None
            layer_entry[kind] = {"matrix": matrix, "mean_offdiag": mean_off}
            if mean_off is not None:
                kind_means[kind].append(mean_off)
        out_layers.append(layer_entry)
    overall = {
        kind: (float(np.mean(vals)) if vals else None) for kind, vals in kind_means.items()
    }
    return {
        "kind": "patterns",
        "tasks": labels,
        "per_layer": out_layers,
        "overall_mean_offdiag": overall,
        "reported_findings": {
            "weight_vectors_aligned": overall["weight"] is not None
            and overall["weight"] > 0.99,
            "bias_alignment": overall["bias"],
        },
    }


def write_analysis_artifacts(report: dict, out_dir) -> None:
    """Write <kind>.json plus a flat <kind>.csv for a study report."""
    os.makedirs(out_dir, exist_ok=True)
    kind = report["kind"]
    dump_json(os.path.join(out_dir, f"{kind}.json"), report)
    rows: list[list] = []
    header: list[str] = []
    if kind == "norms":
        header = ["example", "layer", "sigma_base", "sigma_tuned", "delta"]
        rows = [[r["example"], r["layer"], r["sigma_base"], r["sigma_tuned"], r["delta"]]
                for r in report["rows"]]
    elif kind == "characteristic_values":
        header = ["example", "layer", "value"]
        rows = [[r["example"], r["layer"], r["value"]] for r in report["rows"]]
    elif kind == "gradients":
        header = ["tensor", "module_tag", "param_count", "l2_mean", "unit_mean"]
        rows = [
            [n, t["module_tag"], t["param_count"], t["l2_mean"], t["unit_mean"]]
            for n, t in report["tensors"].items()
        ]
    elif kind in ("layer_ablation", "module_ablation", "fitting"):
        header = ["cell", "metric", "trainable"]
        rows = [[label, c["metric"], c["trainable"]] for label, c in report["cells"].items()]
    elif kind == "patterns":
        header = ["layer", "kind", "mean_offdiag"]
        for entry in report["per_layer"]:
            for k in ("weight", "bias"):
                rows.append([entry["layer"], k, entry[k]["mean_offdiag"]])
    write_csv(os.path.join(out_dir, f"{kind}.csv"), header, rows)
