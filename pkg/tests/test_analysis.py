"""Studies and sweep orchestrators: oracles, structure, and env plumbing."""

import csv
import dataclasses
import json

import numpy as np
import pytest

from conftest import TINY_CFG
from hadapt import model as model_mod
from hadapt.analysis import (
    characteristic_values,
    collect_attention_outputs,
    fitting_study,
    gradient_study,
    layer_ablation,
    module_ablation,
    norm_study,
    pattern_study,
    run_threads,
    token_sequence_average,
    write_analysis_artifacts,
)
from hadapt.checkpoint import save_checkpoint
from hadapt.errors import ConfigError
from hadapt.model import build_model
from hadapt.tasks import gen_task, task_spec
from hadapt.training import TuneSettings


ADAPTED_CFG = dataclasses.replace(TINY_CFG, adapter_order=1)


def small_spec(name, train=32, dev=16):
    return dataclasses.replace(task_spec(name), train_size=train, dev_size=dev)


def small_settings(task, **kw):
    base = dict(task=task, seed=7, train_size=32, dev_size=16, batch_size=16,
                stage1_lr=2e-3, stage1_epochs=2, lr=3e-3, epochs=2)
    base.update(kw)
    return TuneSettings(**base)


# ---------------------------------------------------------------- env plumbing


def test_run_threads_default_is_one(monkeypatch):
    monkeypatch.delenv("HADAPT_THREADS", raising=False)
    assert run_threads() == 1


def test_run_threads_reads_env(monkeypatch):
    monkeypatch.setenv("HADAPT_THREADS", "3")
    assert run_threads() == 3


@pytest.mark.parametrize("bad", ["zero", "1.5", ""])
def test_run_threads_rejects_non_integers(monkeypatch, bad):
    monkeypatch.setenv("HADAPT_THREADS", bad)
    with pytest.raises(ConfigError):
        run_threads()


def test_run_threads_rejects_nonpositive(monkeypatch):
    monkeypatch.setenv("HADAPT_THREADS", "0")
    with pytest.raises(ConfigError):
        run_threads()


# ---------------------------------------------------------- scalar summaries


def test_token_sequence_average_hand_case():
    mat = np.array([[1.0, 2.0], [3.0, 5.0]])
    per_position, value = token_sequence_average(mat)
    assert np.allclose(per_position, [1.5, 4.0])
    assert value == 2.75


def test_collect_attention_outputs_drops_padding():
    store = build_model(ADAPTED_CFG, seed=3)
    _, dev = gen_task(small_spec("polarity"), seed=11)
    mats = collect_attention_outputs(store, ADAPTED_CFG, dev, batch_size=8)
    assert len(mats) == len(dev.examples)
    for ex, layers in zip(dev.examples, mats):
        assert len(layers) == ADAPTED_CFG.num_layers
        for mat in layers:
            assert mat.shape == (len(ex.tokens), ADAPTED_CFG.hidden_size)


def test_characteristic_values_match_naive_loop_oracle():
    store = build_model(ADAPTED_CFG, seed=3)
    _, dev = gen_task(small_spec("polarity"), seed=11)
    report = characteristic_values(store, ADAPTED_CFG, dev, batch_size=8, max_examples=10)

    mats = collect_attention_outputs(store, ADAPTED_CFG, dev, batch_size=8, max_examples=10)
    expected = {}
    for ex_idx, layers in enumerate(mats):
        for layer, mat in enumerate(layers):
            total = 0.0
            for pos in range(mat.shape[0]):
                row = 0.0
                for h in range(mat.shape[1]):
                    row += mat[pos, h]
                total += row / mat.shape[1]
            expected[(ex_idx, layer)] = total / mat.shape[0]

    assert len(report["rows"]) == len(expected)
    for row in report["rows"]:
        assert abs(row["value"] - expected[(row["example"], row["layer"])]) < 1e-12


def test_characteristic_values_summary_matches_rows():
    store = build_model(ADAPTED_CFG, seed=3)
    _, dev = gen_task(small_spec("polarity"), seed=11)
    report = characteristic_values(store, ADAPTED_CFG, dev, batch_size=8, max_examples=6)
    for entry in report["per_layer"]:
        vals = [r["value"] for r in report["rows"] if r["layer"] == entry["layer"]]
        assert abs(entry["mean"] - np.mean(vals)) < 1e-12
        assert entry["min"] == min(vals)
        assert entry["max"] == max(vals)


# ------------------------------------------------------------------ norm study


def test_norm_study_doubled_last_layer_adapter_gives_unit_delta():
    # Doubling the last layer's scale vector doubles exactly that layer's
    # shaped attention output and touches nothing upstream, so its sigma
    # ratio is exactly 2 and every earlier layer's delta is exactly zero.
    base = build_model(ADAPTED_CFG, seed=3)
    tuned = build_model(ADAPTED_CFG, seed=3)
    last = ADAPTED_CFG.num_layers - 1
    tuned.tensor(f"encoder.layer.{last}.adapter.weight").data[:] = 2.0
    _, dev = gen_task(small_spec("polarity"), seed=11)
    report = norm_study(base, ADAPTED_CFG, tuned, ADAPTED_CFG, dev, max_examples=6)
    for row in report["rows"]:
        if row["layer"] == last:
            assert abs(row["delta"] - 1.0) < 1e-12
        else:
            assert row["delta"] == 0.0
    assert abs(report["per_layer"][last]["mean_delta"] - 1.0) < 1e-12
    assert report["per_layer"][last]["positive_fraction"] == 1.0
    for stat in ("q1_delta", "median_delta", "q3_delta"):
        assert abs(report["per_layer"][last][stat] - 1.0) < 1e-12
        assert report["per_layer"][0][stat] == 0.0
    assert report["reported_findings"]["all_layer_means_positive"] is False


def test_norm_study_identical_models_zero_delta():
    base = build_model(ADAPTED_CFG, seed=3)
    tuned = build_model(ADAPTED_CFG, seed=3)
    _, dev = gen_task(small_spec("polarity"), seed=11)
    report = norm_study(base, ADAPTED_CFG, tuned, ADAPTED_CFG, dev, max_examples=4)
    assert all(r["delta"] == 0.0 for r in report["rows"])
    assert report["reported_findings"]["mean_delta_overall"] == 0.0


def test_norm_study_rejects_depth_mismatch():
    shallow = dataclasses.replace(ADAPTED_CFG, num_layers=1)
    base = build_model(ADAPTED_CFG, seed=3)
    tuned = build_model(shallow, seed=3)
    _, dev = gen_task(small_spec("polarity"), seed=11)
    with pytest.raises(ConfigError):
        norm_study(base, ADAPTED_CFG, tuned, shallow, dev, max_examples=2)


# -------------------------------------------------------------- gradient study


def test_gradient_study_structure_and_unit_scaling(tiny_backbone_dir):
    spec = small_spec("polarity", train=48, dev=16)
    train, dev = gen_task(spec, seed=7)
    report = gradient_study(tiny_backbone_dir, spec, small_settings("polarity"), train, dev)
    assert report["kind"] == "gradients"
    assert report["epochs"] == 2
    tensors = report["tensors"]
    for entry in tensors.values():
        assert len(entry["l2_per_epoch"]) == 2
        for l2, unit in zip(entry["l2_per_epoch"], entry["unit_per_epoch"]):
            assert abs(unit - l2 / entry["param_count"]) < 1e-15
    for side in ("first_epoch", "last_epoch"):
        for key in ("top_l2", "top_unit"):
            top = report[side][key]
            assert len(top) == 5
            values = [v for _, v in top]
            assert values == sorted(values, reverse=True)
    f = report["reported_findings"]
    assert set(f) >= {"adapter_bias_unit_mean", "adapter_weight_unit_mean",
                      "bias_unit_exceeds_weight"}


def test_gradient_study_rejects_single_epoch(tiny_backbone_dir):
    spec = small_spec("polarity")
    train, dev = gen_task(spec, seed=7)
    with pytest.raises(ConfigError):
        gradient_study(tiny_backbone_dir, spec, small_settings("polarity", epochs=1),
                       train, dev)


# ------------------------------------------------------------------ ablations


def test_layer_ablation_counts_scale_linearly(tiny_backbone_dir, tmp_path):
    spec = small_spec("polarity")
    report = layer_ablation(tiny_backbone_dir, spec, small_settings("polarity"),
                            tmp_path / "abl", ks=[1, 2])
    assert report["ks"] == [1, 2]
    h = TINY_CFG.hidden_size
    assert report["cells"]["1"]["trainable"] == 4 * h
    assert report["cells"]["2"]["trainable"] == 8 * h
    for cell in report["cells"].values():
        assert 0.0 <= cell["metric"] <= 1.0


def test_layer_ablation_rejects_bad_depth(tiny_backbone_dir, tmp_path):
    spec = small_spec("polarity")
    with pytest.raises(ConfigError):
        layer_ablation(tiny_backbone_dir, spec, small_settings("polarity"),
                       tmp_path / "abl", ks=[3])


def test_module_ablation_cell_counts(tiny_backbone_dir, tmp_path):
    spec = small_spec("polarity")
    report = module_ablation(tiny_backbone_dir, spec, small_settings("polarity"),
                             tmp_path / "mods", module_sets=["W", "B+N"])
    h, L = TINY_CFG.hidden_size, TINY_CFG.num_layers
    assert report["cells"]["W"]["trainable"] == L * h
    assert report["cells"]["B+N"]["trainable"] == L * 3 * h


def test_fitting_study_orders_and_findings(tiny_backbone_dir, tmp_path):
    spec = small_spec("polarity")
    report = fitting_study(tiny_backbone_dir, spec, small_settings("polarity"),
                           tmp_path / "fit", orders=(1, 3), include_full=False)
    assert set(report["cells"]) == {"order_1", "order_3"}
    assert report["cells"]["order_3"]["trainable"] > report["cells"]["order_1"]["trainable"]
    assert "order1_vs_order3_gap" in report["reported_findings"]
    assert "order1_vs_full_gap" not in report["reported_findings"]


def test_fitting_study_rejects_unknown_order(tiny_backbone_dir, tmp_path):
    spec = small_spec("polarity")
    with pytest.raises(ConfigError):
        fitting_study(tiny_backbone_dir, spec, small_settings("polarity"),
                      tmp_path / "fit", orders=(1, 5))


# -------------------------------------------------------------- pattern study


def checkpointed_store(tmp_path, tag, weights=None, biases=None):
    store = build_model(ADAPTED_CFG, seed=0)
    for layer, vec in (weights or {}).items():
        store.tensor(f"encoder.layer.{layer}.adapter.weight").data[:] = vec
    for layer, vec in (biases or {}).items():
        store.tensor(f"encoder.layer.{layer}.adapter.bias").data[:] = vec
    path = tmp_path / tag
    save_checkpoint(store, ADAPTED_CFG, path)
    return str(path)


def test_pattern_study_cosines_match_direct_formula(tmp_path):
    h = ADAPTED_CFG.hidden_size
    e0 = np.zeros(h)
    e0[0] = 1.0
    e1 = np.zeros(h)
    e1[1] = 1.0
    a = checkpointed_store(tmp_path, "a", weights={1: e0}, biases={0: np.ones(h)})
    b = checkpointed_store(tmp_path, "b", weights={1: e1}, biases={0: -np.ones(h)})
    report = pattern_study([("a", a), ("b", b)])

    # layer 0 weights untouched: both all-ones, cosine exactly 1
    assert report["per_layer"][0]["weight"]["mean_offdiag"] == 1.0
    # layer 1 weights orthogonal basis vectors
    assert abs(report["per_layer"][1]["weight"]["mean_offdiag"]) < 1e-15
    # layer 0 biases exactly opposed, layer 1 biases still zero -> undefined
    assert report["per_layer"][0]["bias"]["mean_offdiag"] == -1.0
    assert report["per_layer"][1]["bias"]["mean_offdiag"] is None
    assert report["overall_mean_offdiag"]["bias"] == -1.0
    assert abs(report["overall_mean_offdiag"]["weight"] - 0.5) < 1e-15
    assert report["reported_findings"]["weight_vectors_aligned"] is False


def test_pattern_study_identical_runs_align(tmp_path):
    a = checkpointed_store(tmp_path, "a")
    b = checkpointed_store(tmp_path, "b")
    report = pattern_study([("a", a), ("b", b)])
    assert report["overall_mean_offdiag"]["weight"] == 1.0
    assert report["reported_findings"]["weight_vectors_aligned"] is True
    # biases are all zero at init, cosine undefined everywhere
    assert report["overall_mean_offdiag"]["bias"] is None


def test_pattern_study_needs_two_runs(tmp_path):
    a = checkpointed_store(tmp_path, "a")
    with pytest.raises(ConfigError):
        pattern_study([("a", a)])


def test_pattern_study_rejects_adapterless_checkpoint(tmp_path, tiny_backbone_dir):
    a = checkpointed_store(tmp_path, "a")
    with pytest.raises(ConfigError):
        pattern_study([("a", a), ("plain", str(tiny_backbone_dir))])


def test_pattern_study_rejects_shape_mismatch(tmp_path):
    a = checkpointed_store(tmp_path, "a")
    shallow_cfg = dataclasses.replace(ADAPTED_CFG, num_layers=1)
    store = build_model(shallow_cfg, seed=0)
    path = tmp_path / "shallow"
    save_checkpoint(store, shallow_cfg, path)
    with pytest.raises(ConfigError):
        pattern_study([("a", a), ("shallow", str(path))])


# ------------------------------------------------------------------ artifacts


def test_write_analysis_artifacts_characteristic_values(tmp_path):
    store = build_model(ADAPTED_CFG, seed=3)
    _, dev = gen_task(small_spec("polarity"), seed=11)
    report = characteristic_values(store, ADAPTED_CFG, dev, max_examples=4)
    write_analysis_artifacts(report, tmp_path)
    data = json.loads((tmp_path / "characteristic_values.json").read_text())
    assert data["examples"] == report["examples"]
    with open(tmp_path / "characteristic_values.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["example", "layer", "value"]
    assert len(rows) == 1 + len(report["rows"])


def test_write_analysis_artifacts_patterns_handle_null(tmp_path):
    a = checkpointed_store(tmp_path, "a")
    b = checkpointed_store(tmp_path, "b")
    report = pattern_study([("a", a), ("b", b)])
    out = tmp_path / "art"
    write_analysis_artifacts(report, out)
    with open(out / "patterns.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    # one weight and one bias row per layer, bias means render empty
    assert len(rows) == 1 + 2 * ADAPTED_CFG.num_layers
    bias_rows = [r for r in rows[1:] if r[1] == "bias"]
    assert all(r[2] == "" for r in bias_rows)
