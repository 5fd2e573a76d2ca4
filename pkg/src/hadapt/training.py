"""Optimization loops: pretraining, head training, and module tuning.

The tuning pipeline runs in two stages. Stage one trains only the pooler
and classification head on top of the frozen backbone, establishing what
linear probing of pretrained features can do. Stage two reloads that head,
freezes it, and trains a small set of inner modules chosen by a
TuningRegime: by default the adapter scale and shift vectors plus the
feed-forward output layer norms. Full fine-tuning and head-only training
are degenerate regimes of the same machinery.

Gradients flow into every tensor on the tape regardless of regime; the
optimizer is the only component that consults the freeze mask. That makes
"what would have moved" observable (the gradient study relies on it) and
keeps freezing decisions in exactly one place.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as model_mod
from . import tensor as T
from .adapter import MODULE_CODE_TAGS, format_module_set, parse_module_set
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, TrainingError
from .jsonio import dump_json, write_csv
from .model import ModelConfig, ParameterStore
from .rng import Rng, derive_seed
from .tasks import Dataset, TaskSpec, collate, mcc, pearson

# Reference learning rates (the ranges the original recipes quote).
DEFAULT_STAGE1_LR = 2e-3
DEFAULT_ADAPTER_LR = 3e-3
DEFAULT_FULL_LR = 1e-3
DEFAULT_EPOCHS = 20
DEFAULT_STAGE1_EPOCHS = 8
DEFAULT_STAGE2_EPOCHS = 16
DEFAULT_BATCH_SIZE = 32


@dataclass(frozen=True)
class HyperParams:
    lr: float
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    decay_all: bool = False  # decay 1-d params (biases, norms, adapters) too
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr must be positive; epochs and batch_size at least 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must sit in [0, 1)")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight_decay must be >= 0 and eps > 0")


REGIME_NAMES = ("classifier_only", "hadamard", "full", "custom")


@dataclass(frozen=True)
class TuningRegime:
    """What stage two is allowed to move.

    modules uses single-letter codes: W adapter scale, B adapter shift,
    N feed-forward output norm, A attention output norm. max_layers
    restricts tuning to the top k encoder layers (None = all).
    adapter_order picks the elementwise map's polynomial order.
    """

    name: str
    modules: frozenset = frozenset({"W", "B", "N"})
    max_layers: int | None = None
    adapter_order: int = 1

    def __post_init__(self):
        if self.name not in REGIME_NAMES:
            raise ConfigError(f"unknown regime '{self.name}' (choose from {REGIME_NAMES})")
        bad = self.modules - set(MODULE_CODE_TAGS)
        if bad:
            raise ConfigError(f"unknown module codes {sorted(bad)}")
        if self.name == "hadamard" and self.modules != frozenset({"W", "B", "N"}):
            raise ConfigError("the hadamard regime always tunes exactly W, B, and N")
        if self.max_layers is not None and self.max_layers < 1:
            raise ConfigError("max_layers must be at least 1 when given")
        if self.adapter_order not in (1, 2, 3):
            raise ConfigError("adapter_order must be 1, 2, or 3")

    @classmethod
    def classifier_only(cls) -> "TuningRegime":
        return cls(name="classifier_only", modules=frozenset())

    @classmethod
    def hadamard(cls, max_layers: int | None = None) -> "TuningRegime":
        return cls(name="hadamard", max_layers=max_layers)

    @classmethod
    def full(cls) -> "TuningRegime":
        return cls(name="full", modules=frozenset())

    @classmethod
    def custom(
        cls, modules, max_layers: int | None = None, adapter_order: int = 1
    ) -> "TuningRegime":
        if isinstance(modules, str):
            modules = parse_module_set(modules)
        return cls(name="custom", modules=frozenset(modules),
                   max_layers=max_layers, adapter_order=adapter_order)

    @property
    def two_stage(self) -> bool:
        return self.name in ("hadamard", "custom")

    @property
    def needs_adapters(self) -> bool:
        return self.two_stage and bool(self.modules & {"W", "B"})

    def validate_against(self, cfg: ModelConfig) -> None:
        if self.max_layers is not None and self.max_layers > cfg.num_layers:
            raise ConfigError(
                f"max_layers {self.max_layers} exceeds model depth {cfg.num_layers}"
            )

    def describe(self) -> dict:
        return {
            "name": self.name,
            "modules": format_module_set(self.modules) if self.modules else "",
            "max_layers": self.max_layers,
            "adapter_order": self.adapter_order,
        }


def resolve_trainable(store: ParameterStore, cfg: ModelConfig, regime: TuningRegime) -> list[str]:
    """Names the regime's stage-two step may update, in store order."""
    regime.validate_against(cfg)
    if regime.name == "full":
        return store.names()
    if regime.name == "classifier_only":
        return [n for n, e in store.items()
                if e.tag in (model_mod.TAG_POOLER, model_mod.TAG_CLASSIFIER)]
    tags = {MODULE_CODE_TAGS[c] for c in regime.modules}
    if regime.adapter_order > 1 and regime.modules & {"W", "B"}:
        tags.add(model_mod.TAG_ADAPTER_POLY)
    min_layer = 0 if regime.max_layers is None else cfg.num_layers - regime.max_layers
    out = []
    for n, e in store.items():
        if e.tag not in tags:
            continue
        if e.layer is not None and e.layer < min_layer:
            continue
        out.append(n)
    if not out:
        raise ConfigError("regime resolves to an empty trainable set")
    return out


class AdamW:
    """Adam with decoupled weight decay.

    Decay multiplies the raw parameter into the update alongside (not
    inside) the adaptive term. Rank-0/1 parameters (biases, norms,
    adapter vectors) are excluded from decay unless hp.decay_all is set;
    this mirrors the usual no-decay list and avoids dragging identity
    initializations toward zero.
    """

    def __init__(self, store: ParameterStore, names: list[str], hp: HyperParams):
        self.hp = hp
        self.t = 0
        self._params = []
        for n in names:
            e = store[n]
            decays = hp.weight_decay > 0 and (hp.decay_all or e.tensor.ndim > 1)
            self._params.append((n, e.tensor, decays))
        self._m = {n: np.zeros_like(t.data) for n, t, _ in self._params}
        self._v = {n: np.zeros_like(t.data) for n, t, _ in self._params}

    def step(self) -> None:
        self.t += 1
        hp = self.hp
        bc1 = 1.0 - hp.beta1**self.t
        bc2 = 1.0 - hp.beta2**self.t
        for n, tens, decays in self._params:
            g = tens.grad
            if g is None:
                raise TrainingError(f"parameter '{n}' has no gradient; is it on the tape?")
            m = self._m[n]
            v = self._v[n]
            m *= hp.beta1
            m += (1.0 - hp.beta1) * g
            v *= hp.beta2
            v += (1.0 - hp.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + hp.eps)
            if decays:
                update = update + hp.weight_decay * tens.data
            tens.data -= hp.lr * update


def evaluate(
    store: ParameterStore,
    cfg: ModelConfig,
    spec: TaskSpec,
    dataset: Dataset,
    batch_size: int = 64,
) -> dict:
    """Loss plus task metrics over a dataset, in a fixed batch order.

    Regression reports Pearson correlation; a constant prediction vector
    makes that undefined, which is reported as 0.0 with a degenerate
    flag rather than an error (early epochs do this routinely).
    """
    examples = dataset.examples
    preds: list[float] = []
    labels: list[float] = []
    total_loss = 0.0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        batch = collate(chunk, cfg.max_seq_len, spec.regression)
        logits = model_mod.forward_classifier(store, cfg, batch.ids, batch.segments, batch.mask)
        if spec.regression:
            est = logits.data.reshape(-1)
            loss = float(((est - batch.labels) ** 2).mean())
            preds.extend(est.tolist())
        else:
            loss = T.softmax_cross_entropy(logits, batch.labels).item()
            preds.extend(logits.data.argmax(axis=1).tolist())
        labels.extend(batch.labels.tolist())
        total_loss += loss * len(chunk)
    out = {"loss": total_loss / len(examples), "metric_name": spec.metric}
    if spec.regression:
        parr = np.asarray(preds)
        degenerate = bool(np.all(parr == parr[0]))
        out["degenerate"] = degenerate
        out["pearson"] = 0.0 if degenerate else pearson(preds, labels)
    else:
        ipreds = [int(p) for p in preds]
        ilabels = [int(l) for l in labels]
        out["accuracy"] = sum(p == l for p, l in zip(ipreds, ilabels)) / len(ipreds)
        out["mcc"] = mcc(ipreds, ilabels)
    out["metric"] = out[spec.metric]
    return out


def run_training(
    store: ParameterStore,
    cfg: ModelConfig,
    spec: TaskSpec,
    train: Dataset,
    dev: Dataset,
    trainable: list[str],
    hp: HyperParams,
    seed: int,
    stream_label: str,
    grad_hook=None,
) -> list[dict]:
    """Shared epoch loop. Returns one record per epoch.

    Example order reshuffles every epoch from a stream derived as
    (seed, stream_label, epoch), so the whole schedule is a pure function
    of the seed and label and never depends on which regime ran before.
    grad_hook(epoch, store), when given, fires after each backward pass
    while all gradients (frozen parameters included) are still present.
    """
    if not trainable:
        raise TrainingError("refusing to train with an empty trainable set")
    missing = [n for n in trainable if n not in store]
    if missing:
        raise TrainingError(f"trainable names not in store: {missing[:3]}")
    opt = AdamW(store, trainable, hp)
    rng = Rng(derive_seed(seed, stream_label))
    examples = list(train.examples)
    history = []
    for epoch in range(hp.epochs):
        order = list(range(len(examples)))
        epoch_rng = rng.split(f"epoch/{epoch}")
        epoch_rng.shuffle(order)
        loss_sum = 0.0
        for start in range(0, len(order), hp.batch_size):
            chunk = [examples[i] for i in order[start : start + hp.batch_size]]
            batch = collate(chunk, cfg.max_seq_len, spec.regression)
            with T.Tape() as tape:
                logits = model_mod.forward_classifier(
                    store, cfg, batch.ids, batch.segments, batch.mask
                )
                if spec.regression:
                    loss = T.mse_loss(T.reshape(logits, (-1,)), batch.labels)
                else:
                    loss = T.softmax_cross_entropy(logits, batch.labels)
            tape.backward(loss, free=True)
            if grad_hook is not None:
                grad_hook(epoch, store)
            opt.step()
            store.zero_grads()
            loss_sum += loss.item() * len(chunk)
        record = {
            "epoch": epoch,
            "train_loss": loss_sum / len(examples),
            "dev": evaluate(store, cfg, spec, dev, hp.eval_batch_size),
        }
        history.append(record)
    return history


def head_names(store: ParameterStore) -> list[str]:
    return [n for n, e in store.items()
            if e.tag in (model_mod.TAG_POOLER, model_mod.TAG_CLASSIFIER)]


def train_stage1(
    store: ParameterStore,
    cfg: ModelConfig,
    spec: TaskSpec,
    train: Dataset,
    dev: Dataset,
    hp: HyperParams,
    seed: int,
    grad_hook=None,
) -> dict:
    """Stage one: fit pooler + classifier over a frozen backbone."""
    if (spec.num_labels, spec.regression) != (cfg.num_labels, cfg.is_regression):
        raise ConfigError(
            f"task '{spec.name}' wants num_labels={spec.num_labels} "
            f"regression={spec.regression}, model has num_labels={cfg.num_labels} "
            f"regression={cfg.is_regression}"
        )
    names = head_names(store)
    store.freeze_all()
    store.set_trainable(names)
    history = run_training(store, cfg, spec, train, dev, names, hp, seed, "stage1",
                           grad_hook=grad_hook)
    return {
        "stage": 1,
        "trainable": model_mod.count_parameters(store, "trainable"),
        "epochs": history,
        "final": history[-1]["dev"],
    }


def train_stage2(
    store: ParameterStore,
    cfg: ModelConfig,
    spec: TaskSpec,
    regime: TuningRegime,
    train: Dataset,
    dev: Dataset,
    hp: HyperParams,
    seed: int,
    grad_hook=None,
) -> dict:
    """Stage two: freeze everything, then open the regime's module set.

    The head trained in stage one stays frozen here; only inner modules
    move. The derived seed stream is labeled "stage2" regardless of the
    module set or layer cap, so runs that share (seed, data, order) and
    happen to update the same tensors produce identical arithmetic.
    """
    trainable = resolve_trainable(store, cfg, regime)
    store.freeze_all()
    store.set_trainable(trainable)
    history = run_training(store, cfg, spec, train, dev, trainable, hp, seed, "stage2",
                           grad_hook=grad_hook)
    return {
        "stage": 2,
        "regime": regime.describe(),
        "trainable": model_mod.count_parameters(store, "trainable"),
        "epochs": history,
        "final": history[-1]["dev"],
    }


def backbone_trainable_names(store: ParameterStore) -> list[str]:
    """Everything on the denoising loss path: encoder + embeddings."""
    skip = (model_mod.TAG_POOLER, model_mod.TAG_CLASSIFIER)
    return [n for n, e in store.items() if e.tag not in skip]


def run_pretraining(
    store: ParameterStore,
    cfg: ModelConfig,
    corpus: Dataset,
    hp: HyperParams,
    seed: int,
) -> dict:
    """Masked-token denoising plus a segment-coherence objective.

    The mask loss trains embeddings and encoder layers through the tied
    vocabulary head. The coherence loss (was segment B assembled from
    segment A's tokens?) trains the pooler and classifier on the
    first-position state, which gives that position a reason to
    aggregate pair-level structure; single-segment sequences carry label
    -1 and skip this term. Returns per-epoch mean loss records.
    """
    if cfg.num_labels != 2:
        raise ConfigError("pretraining needs a 2-way head for the coherence objective")
    names = backbone_trainable_names(store) + head_names(store)
    store.freeze_all()
    store.set_trainable(names)
    opt = AdamW(store, names, hp)
    rng = Rng(derive_seed(seed, "pretrain-loop"))
    examples = list(corpus.examples)
    history = []
    for epoch in range(hp.epochs):
        order = list(range(len(examples)))
        rng.split(f"epoch/{epoch}").shuffle(order)
        loss_sum = 0.0
        mask_sum = 0.0
        coh_sum = 0.0
        count = 0
        for start in range(0, len(order), hp.batch_size):
            chunk = [examples[i] for i in order[start : start + hp.batch_size]]
            batch = collate(chunk, cfg.max_seq_len)
            if batch.mlm_targets is None:
                raise DataError("pretraining corpus lacks mlm_targets")
            with T.Tape() as tape:
                hidden = model_mod.forward_encoder(
                    store, cfg, batch.ids, batch.segments, batch.mask
                )
                logits = T.matmul(
                    hidden, T.transpose_last2(store.tensor("embeddings.word.weight"))
                )
                flat = T.reshape(logits, (-1, cfg.vocab_size))
                loss = T.softmax_cross_entropy(flat, batch.mlm_targets.reshape(-1))
                mask_sum += loss.item() * len(chunk)
                if (batch.labels >= 0).any():
                    pooled = model_mod.pooled_output(store, cfg, hidden)
                    coh_logits = T.add(
                        T.matmul(pooled, store.tensor("classifier.weight")),
                        store.tensor("classifier.bias"),
                    )
                    coh = T.softmax_cross_entropy(coh_logits, batch.labels)
                    coh_sum += coh.item() * len(chunk)
                    loss = T.add(loss, coh)
            tape.backward(loss, free=True)
            opt.step()
            store.zero_grads()
            loss_sum += loss.item() * len(chunk)
            count += len(chunk)
        history.append(
            {
                "epoch": epoch,
                "train_loss": loss_sum / count,
                "mask_loss": mask_sum / count,
                "coherence_loss": coh_sum / count,
            }
        )
    return {"stage": "pretrain", "epochs": history, "final_loss": history[-1]["train_loss"]}


# Filesystem-level orchestration. Everything below writes run directories
# with a fixed layout:
#   config.json        resolved settings for the run
#   report.json        deterministic training record
#   metrics.csv        per-epoch rows for spreadsheets
#   timing.json        wall-clock sidecar (excluded from determinism)
#   stage1/checkpoint  head-only model from stage one (two-stage runs)
#   checkpoint_start   model state entering the final stage
#   checkpoint         final model


@dataclass(frozen=True)
class TuneSettings:
    """Resolved knobs for one tuning run."""

    task: str
    seed: int = 0
    train_size: int = 384
    dev_size: int = 192
    batch_size: int = DEFAULT_BATCH_SIZE
    stage1_lr: float = DEFAULT_STAGE1_LR
    stage1_epochs: int = DEFAULT_STAGE1_EPOCHS
    lr: float | None = None  # stage-2 / full / head lr, regime-dependent default
    epochs: int = DEFAULT_STAGE2_EPOCHS
    weight_decay: float = 0.01
    decay_all: bool = False

    def resolved_lr(self, regime: TuningRegime) -> float:
        if self.lr is not None:
            return self.lr
        if regime.name == "full":
            return DEFAULT_FULL_LR
        if regime.name == "classifier_only":
            return DEFAULT_STAGE1_LR
        return DEFAULT_ADAPTER_LR


def _metrics_rows(report: dict) -> tuple[list[str], list[list]]:
    header = ["stage", "epoch", "train_loss", "dev_loss", "dev_metric"]
    rows = []
    for stage in report["stages"]:
        for rec in stage.get("epochs", []):
            dev = rec.get("dev") or {}
            rows.append(
                [
                    stage.get("stage"),
                    rec["epoch"],
                    f"{rec['train_loss']:.10f}",
                    f"{dev.get('loss', float('nan')):.10f}" if dev else "",
                    f"{dev.get('metric', float('nan')):.10f}" if dev else "",
                ]
            )
    return header, rows


def execute_tune_run(
    backbone_dir,
    spec: TaskSpec,
    regime: TuningRegime,
    settings: TuneSettings,
    out_dir,
    train: Dataset | None = None,
    dev: Dataset | None = None,
    stage1_dir=None,
) -> dict:
    """Run one tuning job end to end and write its run directory.

    Data defaults to the generated task splits for (spec, seed). An
    existing stage-one checkpoint directory can be supplied to skip head
    training; sweep orchestrators use that to train the head once and
    share it across cells (bit-identical to retraining it, since stage
    one is deterministic and regime-independent).
    """
    from .tasks import gen_task  # local import to keep module load light

    t_start = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    backbone_store, backbone_cfg = load_checkpoint(backbone_dir)
    if train is None or dev is None:
        train, dev = gen_task(spec, settings.seed)

    order = regime.adapter_order if regime.needs_adapters else None
    task_cfg = replace(
        backbone_cfg,
        num_labels=spec.num_labels,
        is_regression=spec.regression,
        adapter_order=order,
    )
    regime.validate_against(task_cfg)
    store = model_mod.build_task_model(backbone_store, backbone_cfg, task_cfg, settings.seed)

    stages = []
    lr = settings.resolved_lr(regime)
    if regime.name == "classifier_only":
        hp = HyperParams(lr=lr, epochs=settings.stage1_epochs, batch_size=settings.batch_size,
                         weight_decay=settings.weight_decay, decay_all=settings.decay_all)
        save_checkpoint(store, task_cfg, os.path.join(out_dir, "checkpoint_start"))
        stages.append(train_stage1(store, task_cfg, spec, train, dev, hp, settings.seed))
    elif regime.name == "full":
        hp = HyperParams(lr=lr, epochs=settings.epochs, batch_size=settings.batch_size,
                         weight_decay=settings.weight_decay, decay_all=settings.decay_all)
        store.freeze_all()
        store.set_trainable(store.names())
        save_checkpoint(store, task_cfg, os.path.join(out_dir, "checkpoint_start"))
        history = run_training(store, task_cfg, spec, train, dev, store.names(), hp,
                               settings.seed, "full")
        stages.append(
            {
                "stage": "full",
                "trainable": model_mod.count_parameters(store, "trainable"),
                "epochs": history,
                "final": history[-1]["dev"],
            }
        )
    else:
        stage1_ckpt = os.path.join(out_dir, "stage1", "checkpoint")
        if stage1_dir is not None:
            s1_store, s1_cfg = load_checkpoint(stage1_dir)
            for name in head_names(store):
                store.tensor(name).data = s1_store.tensor(name).data.copy()
            store.freeze_all()
            store.set_trainable(head_names(store))
            stages.append({"stage": 1, "reused_from": str(stage1_dir)})
        else:
            hp1 = HyperParams(lr=settings.stage1_lr, epochs=settings.stage1_epochs,
                              batch_size=settings.batch_size,
                              weight_decay=settings.weight_decay,
                              decay_all=settings.decay_all)
            stages.append(train_stage1(store, task_cfg, spec, train, dev, hp1, settings.seed))
            save_checkpoint(store, task_cfg, stage1_ckpt)
        hp2 = HyperParams(lr=lr, epochs=settings.epochs, batch_size=settings.batch_size,
                          weight_decay=settings.weight_decay, decay_all=settings.decay_all)
        save_checkpoint(store, task_cfg, os.path.join(out_dir, "checkpoint_start"))
        stages.append(
            train_stage2(store, task_cfg, spec, regime, train, dev, hp2, settings.seed)
        )

    save_checkpoint(store, task_cfg, os.path.join(out_dir, "checkpoint"))
    report = {
        "task": spec.name,
        "regime": regime.describe(),
        "seed": settings.seed,
        "data": {"train": len(train), "dev": len(dev)},
        "settings": {
            "batch_size": settings.batch_size,
            "stage1_lr": settings.stage1_lr,
            "stage1_epochs": settings.stage1_epochs,
            "lr": lr,
            "epochs": settings.epochs,
            "weight_decay": settings.weight_decay,
            "decay_all": settings.decay_all,
        },
        "accounting": model_mod.parameter_accounting(store),
        "stages": stages,
        "final": stages[-1]["final"],
    }
    dump_json(os.path.join(out_dir, "config.json"),
              {"model": task_cfg.to_dict(), "regime": regime.describe(),
               "settings": report["settings"], "task": spec.name, "seed": settings.seed})
    dump_json(os.path.join(out_dir, "report.json"), report)
    header, rows = _metrics_rows(report)
    write_csv(os.path.join(out_dir, "metrics.csv"), header, rows)
    dump_json(os.path.join(out_dir, "timing.json"),
              {"wall_time_s": time.perf_counter() - t_start})
    return report


def execute_pretrain_run(
    cfg: ModelConfig,
    seed: int,
    corpus_size: int,
    hp: HyperParams,
    out_dir,
) -> dict:
    """Build, pretrain, and checkpoint a backbone under out_dir."""
    from .tasks import gen_pretrain_corpus

    t_start = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    if cfg.adapter_order is not None:
        raise ConfigError("backbones are pretrained without adapters")
    store = model_mod.build_model(cfg, seed)
    corpus = gen_pretrain_corpus(corpus_size, seed)
    result = run_pretraining(store, cfg, corpus, hp, seed)
    save_checkpoint(store, cfg, os.path.join(out_dir, "checkpoint"))
    report = {
        "kind": "pretrain",
        "seed": seed,
        "corpus_size": corpus_size,
        "settings": {
            "lr": hp.lr,
            "epochs": hp.epochs,
            "batch_size": hp.batch_size,
            "weight_decay": hp.weight_decay,
        },
        "accounting": model_mod.parameter_accounting(store),
        "stages": [result],
        "final_loss": result["final_loss"],
    }
    dump_json(os.path.join(out_dir, "config.json"),
              {"model": cfg.to_dict(), "seed": seed, "corpus_size": corpus_size,
               "settings": report["settings"]})
    dump_json(os.path.join(out_dir, "report.json"), report)
    rows = [["pretrain", r["epoch"], f"{r['train_loss']:.10f}", "", ""] for r in result["epochs"]]
    write_csv(os.path.join(out_dir, "metrics.csv"),
              ["stage", "epoch", "train_loss", "dev_loss", "dev_metric"], rows)
    dump_json(os.path.join(out_dir, "timing.json"),
              {"wall_time_s": time.perf_counter() - t_start})
    return report
