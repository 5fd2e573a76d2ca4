"""Mini bidirectional transformer encoder built on the tape engine.

The architecture is the familiar post-norm encoder stack: summed token,
position, and segment embeddings with a layer norm; per layer, multi-head
self-attention with residual and norm, then a gelu feed-forward with
residual and norm; a tanh pooler over the first position; and either a
classification head or a tied-embedding token head. No dropout anywhere:
runs are deterministic by construction.

Between the concatenated attention heads and the output projection, each
layer can optionally host a small elementwise adapter (see adapter.py).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import adapter as adapter_mod
from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .rng import Rng, derive_seed
from .tensor import Tensor

TAG_EMBEDDING = "embedding"
TAG_ATTENTION = "attention"
TAG_ATT_NORM = "attention_norm"
TAG_FFN = "ffn"
TAG_FFN_NORM = "ffn_norm"
TAG_ADAPTER_W = "adapter_weight"
TAG_ADAPTER_B = "adapter_bias"
TAG_ADAPTER_POLY = "adapter_poly"
TAG_POOLER = "pooler"
TAG_CLASSIFIER = "classifier"

ALL_TAGS = (
    TAG_EMBEDDING,
    TAG_ATTENTION,
    TAG_ATT_NORM,
    TAG_FFN,
    TAG_FFN_NORM,
    TAG_ADAPTER_W,
    TAG_ADAPTER_B,
    TAG_ADAPTER_POLY,
    TAG_POOLER,
    TAG_CLASSIFIER,
)

INIT_STD = 0.02
ATTENTION_MASK_BIAS = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    hidden_size: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ff_size: int = 256
    max_seq_len: int = 32
    num_labels: int = 2
    is_regression: bool = False
    adapter_order: int | None = None

    def __post_init__(self):
        for name in (
            "vocab_size",
            "hidden_size",
            "num_layers",
            "num_heads",
            "ff_size",
            "max_seq_len",
            "num_labels",
        ):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}"
            )
        if self.adapter_order is not None and self.adapter_order not in (1, 2, 3):
            raise ConfigError(f"adapter_order must be 1, 2, or 3, got {self.adapter_order!r}")
        if self.is_regression and self.num_labels != 1:
            raise ConfigError("regression models must have num_labels == 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


DESK_SHAPE = ModelConfig()
BASE_SHAPE = ModelConfig(
    vocab_size=30522,
    hidden_size=768,
    num_layers=12,
    num_heads=12,
    ff_size=3072,
    max_seq_len=512,
)
LARGE_SHAPE = ModelConfig(
    vocab_size=30522,
    hidden_size=1024,
    num_layers=24,
    num_heads=16,
    ff_size=4096,
    max_seq_len=512,
)


@dataclass
class ParamEntry:
    tensor: Tensor
    trainable: bool
    tag: str
    layer: int | None = None


class ParameterStore:
    """Ordered, named parameter registry.

    Order is fixed at build time and defines both checkpoint layout and
    the iteration order of everything downstream, which keeps runs
    reproducible without any sorting tricks.
    """

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(
        self,
        name: str,
        data: np.ndarray,
        tag: str,
        layer: int | None = None,
        trainable: bool = True,
    ) -> None:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name '{name}'")
        if tag not in ALL_TAGS:
            raise ConfigError(f"unknown module tag '{tag}'")
        t = Tensor(data, name=name)
        self._entries[name] = ParamEntry(tensor=t, trainable=trainable, tag=tag, layer=layer)

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> ParamEntry:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"no parameter named '{name}'") from None

    def __len__(self) -> int:
        return len(self._entries)

    def tensor(self, name: str) -> Tensor:
        return self[name].tensor

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grads(self) -> None:
        for e in self._entries.values():
            e.tensor.zero_grad()

    def freeze_all(self) -> None:
        for e in self._entries.values():
            e.trainable = False

    def set_trainable(self, names, flag: bool = True) -> None:
        for n in names:
            self[n].trainable = flag

    def trainable_names(self) -> list[str]:
        return [n for n, e in self._entries.items() if e.trainable]


def _init_array(shape, kind: str, seed: int | None, name: str) -> np.ndarray:
    """kind: 'normal' (truncated), 'zeros', or 'ones'."""
    if kind == "zeros":
        return np.zeros(shape, dtype=np.float64)
    if kind == "ones":
        return np.ones(shape, dtype=np.float64)
    if seed is None:
        # shape-only build, used for parameter accounting
        return np.zeros(shape, dtype=np.float64)
    rng = Rng(derive_seed(seed, f"init/{name}"))
    n = int(np.prod(shape))
    return rng.truncated_normals(n, INIT_STD).reshape(shape)


def build_model(cfg: ModelConfig, seed: int | None = None) -> ParameterStore:
    """Create a freshly initialized parameter store for cfg.

    Each tensor draws from its own seed stream derived from (seed, name),
    so two builds share values exactly on every tensor they have in
    common, regardless of what else differs. seed=None skips random
    initialization (weights zero) for shape-only uses.
    """
    store = ParameterStore()
    h = cfg.hidden_size

    def add(name, shape, kind, tag, layer=None):
        store.add(name, _init_array(shape, kind, seed, name), tag, layer=layer)

    add("embeddings.word.weight", (cfg.vocab_size, h), "normal", TAG_EMBEDDING)
    add("embeddings.position.weight", (cfg.max_seq_len, h), "normal", TAG_EMBEDDING)
    add("embeddings.segment.weight", (2, h), "normal", TAG_EMBEDDING)
    add("embeddings.norm.weight", (h,), "ones", TAG_EMBEDDING)
    add("embeddings.norm.bias", (h,), "zeros", TAG_EMBEDDING)
    for i in range(cfg.num_layers):
        p = f"encoder.layer.{i}"
        for part in ("query", "key", "value"):
            add(f"{p}.attention.{part}.weight", (h, h), "normal", TAG_ATTENTION, i)
            add(f"{p}.attention.{part}.bias", (h,), "zeros", TAG_ATTENTION, i)
        if cfg.adapter_order is not None:
            add(f"{p}.adapter.bias", (h,), "zeros", TAG_ADAPTER_B, i)
            add(f"{p}.adapter.weight", (h,), "ones", TAG_ADAPTER_W, i)
            for k in range(2, cfg.adapter_order + 1):
                add(f"{p}.adapter.coeff{k}", (h,), "zeros", TAG_ADAPTER_POLY, i)
        add(f"{p}.attention.output.dense.weight", (h, h), "normal", TAG_ATTENTION, i)
        add(f"{p}.attention.output.dense.bias", (h,), "zeros", TAG_ATTENTION, i)
        add(f"{p}.attention.output.norm.weight", (h,), "ones", TAG_ATT_NORM, i)
        add(f"{p}.attention.output.norm.bias", (h,), "zeros", TAG_ATT_NORM, i)
        add(f"{p}.ffn.intermediate.dense.weight", (h, cfg.ff_size), "normal", TAG_FFN, i)
        add(f"{p}.ffn.intermediate.dense.bias", (cfg.ff_size,), "zeros", TAG_FFN, i)
        add(f"{p}.ffn.output.dense.weight", (cfg.ff_size, h), "normal", TAG_FFN, i)
        add(f"{p}.ffn.output.dense.bias", (h,), "zeros", TAG_FFN, i)
        add(f"{p}.ffn.output.norm.weight", (h,), "ones", TAG_FFN_NORM, i)
        add(f"{p}.ffn.output.norm.bias", (h,), "zeros", TAG_FFN_NORM, i)
    add("pooler.dense.weight", (h, h), "normal", TAG_POOLER)
    add("pooler.dense.bias", (h,), "zeros", TAG_POOLER)
    add("classifier.weight", (h, cfg.num_labels), "normal", TAG_CLASSIFIER)
    add("classifier.bias", (cfg.num_labels,), "zeros", TAG_CLASSIFIER)
    return store


def build_task_model(
    backbone: ParameterStore,
    backbone_cfg: ModelConfig,
    task_cfg: ModelConfig,
    seed: int,
) -> ParameterStore:
    """Task model = backbone weights + identity adapters + a fresh classifier.

    Encoder, embedding, and pooler tensors are copied by value from the
    backbone (the pooler carries the coherence-trained first-position
    view). The classifier is re-drawn from its (seed, name) stream since
    its label space is task specific. Adapters come up as the identity
    map, so the task model's forward pass starts out exactly equal to
    the backbone's.
    """
    for f in ("vocab_size", "hidden_size", "num_layers", "num_heads", "ff_size", "max_seq_len"):
        if getattr(backbone_cfg, f) != getattr(task_cfg, f):
            raise ConfigError(
                f"backbone and task configs disagree on {f}: "
                f"{getattr(backbone_cfg, f)} vs {getattr(task_cfg, f)}"
            )
    store = build_model(task_cfg, seed)
    for name, entry in store.items():
        if entry.tag == TAG_CLASSIFIER:
            continue  # fresh head stays
        if entry.tag in (TAG_ADAPTER_W, TAG_ADAPTER_B, TAG_ADAPTER_POLY):
            continue  # identity init stays
        entry.tensor.data = backbone.tensor(name).data.copy()
    return store


def _affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _attention_block(store, cfg, i, x, mask_bias, trace):
    p = f"encoder.layer.{i}"
    b, s, h = x.shape
    heads = cfg.num_heads
    dh = h // heads

    def proj(part):
        y = _affine(x, store.tensor(f"{p}.attention.{part}.weight"),
                    store.tensor(f"{p}.attention.{part}.bias"))
        return T.permute(T.reshape(y, (b, s, heads, dh)), (0, 2, 1, 3))

    q, k, v = proj("query"), proj("key"), proj("value")
    scores = T.scale(T.matmul(q, T.transpose_last2(k)), 1.0 / math.sqrt(dh))
    probs = T.softmax_lastdim(T.add(scores, mask_bias))
    ctx = T.matmul(probs, v)
    concat = T.reshape(T.permute(ctx, (0, 2, 1, 3)), (b, s, h))
    if cfg.adapter_order is not None:
        concat = adapter_mod.apply_adapter(store, cfg, i, concat)
    if trace is not None:
        trace.append(concat.data.copy())
    out = _affine(concat, store.tensor(f"{p}.attention.output.dense.weight"),
                  store.tensor(f"{p}.attention.output.dense.bias"))
    return T.layer_norm(
        T.add(x, out),
        store.tensor(f"{p}.attention.output.norm.weight"),
        store.tensor(f"{p}.attention.output.norm.bias"),
    )


def _ffn_block(store, cfg, i, x):
    p = f"encoder.layer.{i}"
    hmid = T.gelu(_affine(x, store.tensor(f"{p}.ffn.intermediate.dense.weight"),
                          store.tensor(f"{p}.ffn.intermediate.dense.bias")))
    out = _affine(hmid, store.tensor(f"{p}.ffn.output.dense.weight"),
                  store.tensor(f"{p}.ffn.output.dense.bias"))
    return T.layer_norm(
        T.add(x, out),
        store.tensor(f"{p}.ffn.output.norm.weight"),
        store.tensor(f"{p}.ffn.output.norm.bias"),
    )


def forward_encoder(
    store: ParameterStore,
    cfg: ModelConfig,
    ids: np.ndarray,
    segments: np.ndarray,
    mask: np.ndarray,
    trace: list | None = None,
) -> Tensor:
    """Hidden states (batch, seq, hidden) for a padded batch.

    mask is 1.0 at real tokens, 0.0 at padding; padded key positions are
    shut out of attention with a large negative score bias. If ``trace``
    is a list, each layer appends a copy of its concatenated (and, when
    present, adapter-shaped) attention output to it.
    """
    ids = np.asarray(ids)
    segments = np.asarray(segments)
    mask = np.asarray(mask, dtype=np.float64)
    if ids.ndim != 2 or ids.shape != segments.shape or ids.shape != mask.shape:
        raise ShapeError(
            f"ids/segments/mask must share a 2-d shape, got {ids.shape}, "
            f"{segments.shape}, {mask.shape}"
        )
    s = ids.shape[1]
    if s > cfg.max_seq_len:
        raise DataError(f"sequence length {s} exceeds max_seq_len {cfg.max_seq_len}")
    if segments.min() < 0 or segments.max() > 1:
        raise DataError("segment ids must be 0 or 1")

    x = T.add(
        T.add(
            T.embedding(store.tensor("embeddings.word.weight"), ids),
            T.embedding(store.tensor("embeddings.position.weight"), np.arange(s)),
        ),
        T.embedding(store.tensor("embeddings.segment.weight"), segments),
    )
    x = T.layer_norm(x, store.tensor("embeddings.norm.weight"),
                     store.tensor("embeddings.norm.bias"))
    mask_bias = Tensor(((1.0 - mask) * ATTENTION_MASK_BIAS)[:, None, None, :], name="mask_bias")
    for i in range(cfg.num_layers):
        x = _attention_block(store, cfg, i, x, mask_bias, trace)
        x = _ffn_block(store, cfg, i, x)
    return x


def pooled_output(store: ParameterStore, cfg: ModelConfig, hidden: Tensor) -> Tensor:
    """tanh-squashed affine view of the first-position hidden state."""
    first = T.gather_position(hidden, 0)
    return T.tanh(_affine(first, store.tensor("pooler.dense.weight"),
                          store.tensor("pooler.dense.bias")))


def forward_classifier(store, cfg, ids, segments, mask, trace=None) -> Tensor:
    """Logits (batch, num_labels); for regression a (batch, 1) estimate."""
    hidden = forward_encoder(store, cfg, ids, segments, mask, trace=trace)
    pooled = pooled_output(store, cfg, hidden)
    return _affine(pooled, store.tensor("classifier.weight"), store.tensor("classifier.bias"))


def forward_mlm(store, cfg, ids, segments, mask) -> Tensor:
    """Token logits (batch, seq, vocab) from the tied embedding table."""
    hidden = forward_encoder(store, cfg, ids, segments, mask)
    return T.matmul(hidden, T.transpose_last2(store.tensor("embeddings.word.weight")))


def count_parameters(store: ParameterStore, which: str = "all") -> int:
    if which not in ("all", "trainable"):
        raise ConfigError(f"count_parameters selector must be 'all' or 'trainable', got {which!r}")
    total = 0
    for _, e in store.items():
        if which == "trainable" and not e.trainable:
            continue
        total += e.tensor.size
    return total


def parameter_accounting(store: ParameterStore) -> dict:
    """Full size breakdown: totals, per-tag, per-layer trainable counts."""
    by_tag: dict[str, dict[str, int]] = {}
    per_layer: dict[str, int] = {}
    total = 0
    trainable = 0
    for _, e in store.items():
        n = e.tensor.size
        total += n
        slot = by_tag.setdefault(e.tag, {"total": 0, "trainable": 0})
        slot["total"] += n
        if e.trainable:
            trainable += n
            slot["trainable"] += n
            if e.layer is not None:
                key = str(e.layer)
                per_layer[key] = per_layer.get(key, 0) + n
    return {
        "total": total,
        "trainable": trainable,
        "fraction": trainable / total if total else 0.0,
        "fraction_display": format_fraction(trainable / total if total else 0.0),
        "by_tag": by_tag,
        "trainable_per_layer": per_layer,
    }


def format_fraction(fraction: float) -> str:
    """Render a parameter fraction the way reports quote it, e.g. '0.034%'."""
    return f"{fraction * 100.0:.3f}%"
