"""On-disk model snapshots.

A checkpoint is a directory holding

    manifest.json   format version, model config, ordered tensor index
    tensors.bin     8-byte magic, then raw little-endian float64 payloads

Each manifest entry records name, shape, dtype, absolute byte offset and
length, trainability, module tag, and layer. Offsets are contiguous and in
manifest order, which makes the format trivially auditable with a hex
dump. Values round-trip bit-exactly: save then load yields byte-identical
arrays and an identical manifest.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import ModelConfig, ParameterStore, build_model

MAGIC = b"HADAPT01"
FORMAT_VERSION = 1

MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "tensors.bin"


def save_checkpoint(store: ParameterStore, cfg: ModelConfig, dirpath) -> None:
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    blobs = []
    offset = len(MAGIC)
    for name, e in store.items():
        raw = np.ascontiguousarray(e.tensor.data, dtype="<f8").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(e.tensor.shape),
                "dtype": "f64",
                "byte_offset": offset,
                "byte_len": len(raw),
                "trainable": bool(e.trainable),
                "module_tag": e.tag,
                "layer": e.layer,
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "tensor_count": len(entries),
        "payload_bytes": offset,
        "tensors": entries,
    }
    with open(os.path.join(dirpath, PAYLOAD_NAME), "wb") as fh:
        fh.write(MAGIC)
        for raw in blobs:
            fh.write(raw)
    with open(os.path.join(dirpath, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_manifest(dirpath) -> dict:
    path = os.path.join(dirpath, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise CheckpointError(f"missing {MANIFEST_NAME} in '{dirpath}'")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(manifest, dict):
        raise CheckpointError(f"{path}: manifest must be a JSON object")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {manifest.get('format_version')!r}"
        )
    return manifest


def load_checkpoint(dirpath) -> tuple[ParameterStore, ModelConfig]:
    """Load and validate a checkpoint directory.

    Validation is structural, not just syntactic: the manifest must
    describe exactly the parameter set the recorded config builds, with
    matching shapes, tags, and layer assignments, and every byte of the
    payload must be accounted for.
    """
    manifest = _read_manifest(dirpath)
    try:
        cfg = ModelConfig.from_dict(manifest.get("config", {}))
    except ConfigError as e:
        raise CheckpointError(f"bad config in manifest: {e}") from e

    store = build_model(cfg, seed=None)
    expected = store.names()
    entries = manifest.get("tensors")
    if not isinstance(entries, list):
        raise CheckpointError("manifest has no tensor index")
    got = [e.get("name") for e in entries]
    if got != expected:
        missing = [n for n in expected if n not in set(got)]
        surplus = [n for n in got if n not in set(expected)]
        raise CheckpointError(
            "manifest tensor list does not match the structure its config builds "
            f"(missing {missing[:3]}, unexpected {surplus[:3]}, order-sensitive)"
        )

    payload_path = os.path.join(dirpath, PAYLOAD_NAME)
    if not os.path.isfile(payload_path):
        raise CheckpointError(f"missing {PAYLOAD_NAME} in '{dirpath}'")
    with open(payload_path, "rb") as fh:
        payload = fh.read()
    if payload[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{payload_path}: bad magic bytes")
    expect_off = len(MAGIC)
    for e in entries:
        name = e["name"]
        entry = store[name]
        shape = tuple(e.get("shape", ()))
        if shape != entry.tensor.shape:
            raise CheckpointError(
                f"tensor '{name}': manifest shape {shape} != structural shape "
                f"{entry.tensor.shape}"
            )
        if e.get("dtype") != "f64":
            raise CheckpointError(f"tensor '{name}': unsupported dtype {e.get('dtype')!r}")
        if e.get("module_tag") != entry.tag or e.get("layer") != entry.layer:
            raise CheckpointError(f"tensor '{name}': module tag or layer disagrees with config")
        off, ln = e.get("byte_offset"), e.get("byte_len")
        if off != expect_off:
            raise CheckpointError(f"tensor '{name}': offset {off} (expected {expect_off})")
        if ln != entry.tensor.size * 8:
            raise CheckpointError(f"tensor '{name}': byte length {ln} does not match shape")
        if off + ln > len(payload):
            raise CheckpointError(f"tensor '{name}': payload is truncated")
        arr = np.frombuffer(payload, dtype="<f8", count=entry.tensor.size, offset=off)
        entry.tensor.data = arr.reshape(entry.tensor.shape).astype(np.float64)
        entry.trainable = bool(e.get("trainable", False))
        expect_off = off + ln
    if expect_off != len(payload):
        raise CheckpointError(
            f"{payload_path}: {len(payload) - expect_off} trailing bytes beyond the manifest"
        )
    if manifest.get("payload_bytes") != expect_off:
        raise CheckpointError("manifest payload_bytes does not match the payload file")
    return store, cfg


def diff_checkpoints(dir_a, dir_b) -> dict:
    """Byte-level comparison of two checkpoints.

    Returns name lists: 'changed' (present in both, bytes differ),
    'unchanged', 'only_in_a', 'only_in_b'. Comparison reads raw payload
    slices, so it sees any difference a float comparison might round away.
    """
    out = {"changed": [], "unchanged": [], "only_in_a": [], "only_in_b": []}
    man_a, man_b = _read_manifest(dir_a), _read_manifest(dir_b)
    with open(os.path.join(dir_a, PAYLOAD_NAME), "rb") as fh:
        pay_a = fh.read()
    with open(os.path.join(dir_b, PAYLOAD_NAME), "rb") as fh:
        pay_b = fh.read()
    idx_a = {e["name"]: e for e in man_a["tensors"]}
    idx_b = {e["name"]: e for e in man_b["tensors"]}
    for name, ea in idx_a.items():
        eb = idx_b.get(name)
        if eb is None:
            out["only_in_a"].append(name)
            continue
        sa = pay_a[ea["byte_offset"] : ea["byte_offset"] + ea["byte_len"]]
        sb = pay_b[eb["byte_offset"] : eb["byte_offset"] + eb["byte_len"]]
        out["changed" if sa != sb else "unchanged"].append(name)
    out["only_in_b"] = [n for n in idx_b if n not in idx_a]
    return out
