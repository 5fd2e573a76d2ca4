"""Synthetic sentence tasks with exact labeling rules.

Four task families cover the usual sentence-classification shapes: a
single-sentence polarity task, two sentence-pair decision tasks, and one
pair regression task. Labels are computed by small combinatorial oracles
over the token sequences, so any example's label can be re-derived and
checked at any time. A separate unlabeled corpus generator feeds masked
token pretraining.

Token id layout (vocab size 64):
    0 PAD, 1 CLS, 2 SEP, 3 MASK,
    4-23 positive words, 24-43 negative words, 44-63 neutral words.

Generation uses only integer draws and [0,1) uniforms from the package
generator, so datasets are byte-identical across platforms.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .rng import Rng, derive_seed

VOCAB_SIZE = 64
PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_ID = 3
FIRST_CONTENT_ID = 4
POSITIVE_TOKENS = tuple(range(4, 24))
NEGATIVE_TOKENS = tuple(range(24, 44))
NEUTRAL_TOKENS = tuple(range(44, 64))
CONTENT_TOKENS = tuple(range(FIRST_CONTENT_ID, VOCAB_SIZE))

MAX_SEQ_LEN = 32

TASK_NAMES = ("polarity", "paraphrase", "entail", "overlap")


@dataclass(frozen=True)
class TaskSpec:
    """Static description of one task: shape, sizes, and metric."""

    name: str
    pair: bool
    regression: bool
    metric: str
    num_labels: int
    train_size: int = 384
    dev_size: int = 192

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise DataError(f"unknown task '{self.name}' (choose from {TASK_NAMES})")
        if self.train_size < 2 or self.dev_size < 2:
            raise DataError("train/dev sizes must each be at least 2")


def task_spec(name: str, train_size: int = 384, dev_size: int = 192) -> TaskSpec:
    base = {
        "polarity": dict(pair=False, regression=False, metric="accuracy", num_labels=2),
        "paraphrase": dict(pair=True, regression=False, metric="accuracy", num_labels=2),
        "entail": dict(pair=True, regression=False, metric="accuracy", num_labels=2),
        "overlap": dict(pair=True, regression=True, metric="pearson", num_labels=1),
    }
    if name not in base:
        raise DataError(f"unknown task '{name}' (choose from {TASK_NAMES})")
    return TaskSpec(name=name, train_size=train_size, dev_size=dev_size, **base[name])


@dataclass
class Example:
    tokens: list[int]
    segments: list[int]
    label: float
    mlm_targets: list[int] | None = None


@dataclass
class Dataset:
    examples: list[Example] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i: int) -> Example:
        return self.examples[i]

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ex in self.examples:
                row = {"tokens": ex.tokens, "segments": ex.segments, "label": ex.label}
                if ex.mlm_targets is not None:
                    row["mlm_targets"] = ex.mlm_targets
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "Dataset":
        out = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from e
                try:
                    ex = Example(
                        tokens=[int(t) for t in row["tokens"]],
                        segments=[int(s) for s in row["segments"]],
                        label=row["label"],
                        mlm_targets=(
                            [int(t) for t in row["mlm_targets"]]
                            if "mlm_targets" in row
                            else None
                        ),
                    )
                except (KeyError, TypeError, ValueError) as e:
                    raise DataError(f"{path}:{lineno}: malformed example: {e}") from e
                _validate_example(ex, lineno=lineno, path=path)
                out.append(ex)
        return cls(out)


def _validate_example(ex: Example, lineno: int = 0, path: str = "") -> None:
    where = f"{path}:{lineno}: " if path else ""
    if len(ex.tokens) != len(ex.segments):
        raise DataError(f"{where}tokens and segments lengths differ")
    if not ex.tokens:
        raise DataError(f"{where}empty example")
    if len(ex.tokens) > MAX_SEQ_LEN:
        raise DataError(f"{where}sequence longer than {MAX_SEQ_LEN}")
    for t in ex.tokens:
        if not 0 <= t < VOCAB_SIZE:
            raise DataError(f"{where}token id {t} out of range")
    for s in ex.segments:
        if s not in (0, 1):
            raise DataError(f"{where}segment id {s} out of range")
    if ex.mlm_targets is not None and len(ex.mlm_targets) != len(ex.tokens):
        raise DataError(f"{where}mlm_targets length mismatch")


def example_key(ex: Example) -> str:
    """Content hash used for cross-split deduplication."""
    payload = json.dumps([ex.tokens, ex.segments], separators=(",", ":"))
    return hashlib.sha256(payload.encode("ascii")).hexdigest()


def segment_contents(tokens, segments) -> tuple[list[int], list[int]]:
    """Split out content tokens (structural ids stripped) per segment."""
    a = [t for t, s in zip(tokens, segments) if s == 0 and t >= FIRST_CONTENT_ID]
    b = [t for t, s in zip(tokens, segments) if s == 1 and t >= FIRST_CONTENT_ID]
    return a, b


def polarity_label(tokens, segments) -> int:
    """1 iff strictly more positive-range than negative-range tokens."""
    a, _ = segment_contents(tokens, segments)
    pos = sum(1 for t in a if t in range(4, 24))
    neg = sum(1 for t in a if t in range(24, 44))
    return 1 if pos > neg else 0


def paraphrase_label(tokens, segments) -> int:
    """1 iff the two segments are nonempty multiset-equal rearrangements."""
    a, b = segment_contents(tokens, segments)
    return 1 if a and Counter(a) == Counter(b) else 0


def entail_label(tokens, segments) -> int:
    """1 iff segment B's multiset is contained in segment A's."""
    a, b = segment_contents(tokens, segments)
    ca, cb = Counter(a), Counter(b)
    return 1 if all(ca[t] >= n for t, n in cb.items()) else 0


def overlap_target(tokens, segments) -> float:
    """Jaccard similarity of the two segments' token sets."""
    a, b = segment_contents(tokens, segments)
    sa, sb = set(a), set(b)
    union = len(sa | sb)
    if union == 0:
        return 0.0
    return len(sa & sb) / union


def oracle_label(spec: TaskSpec, tokens, segments) -> float:
    fn = {
        "polarity": polarity_label,
        "paraphrase": paraphrase_label,
        "entail": entail_label,
        "overlap": overlap_target,
    }[spec.name]
    return fn(tokens, segments)


def _assemble(a: list[int], b: list[int] | None) -> tuple[list[int], list[int]]:
    tokens = [CLS_ID] + a + [SEP_ID]
    segments = [0] * len(tokens)
    if b is not None:
        tokens += b + [SEP_ID]
        segments += [1] * (len(b) + 1)
    return tokens, segments


def _draw_polarity(rng: Rng) -> Example:
    # Resample until the count margin is at least 2, so labels never
    # hinge on a single token and the decision boundary stays crisp.
    while True:
        n = rng.randint(8, 30)
        wp, wn, wu = rng.randint(1, 4), rng.randint(1, 4), rng.randint(1, 4)
        total = wp + wn + wu
        content = []
        for _ in range(n):
            r = rng.randrange(total)
            if r < wp:
                content.append(rng.choice(POSITIVE_TOKENS))
            elif r < wp + wn:
                content.append(rng.choice(NEGATIVE_TOKENS))
            else:
                content.append(rng.choice(NEUTRAL_TOKENS))
        pos = sum(1 for t in content if t in POSITIVE_TOKENS)
        neg = sum(1 for t in content if t in NEGATIVE_TOKENS)
        if abs(pos - neg) >= 2:
            break
    tokens, segments = _assemble(content, None)
    return Example(tokens, segments, polarity_label(tokens, segments))


def _draw_paraphrase(rng: Rng) -> Example:
    a = [rng.choice(CONTENT_TOKENS) for _ in range(rng.randint(4, 14))]
    if rng.randrange(2) == 0:
        b = list(a)
        rng.shuffle(b)
    else:
        # near miss: a rearrangement with exactly two positions swapped
        # for tokens absent from segment A. Every negative looks like
        # this, so surface copy-similarity alone cannot separate the
        # classes; the swapped tokens have to be noticed individually.
        b = list(a)
        rng.shuffle(b)
        outside = [t for t in CONTENT_TOKENS if t not in set(a)]
        for i in rng.sample(list(range(len(b))), 2):
            b[i] = rng.choice(outside)
    tokens, segments = _assemble(a, b)
    return Example(tokens, segments, paraphrase_label(tokens, segments))


def _draw_entail(rng: Rng) -> Example:
    a = [rng.choice(CONTENT_TOKENS) for _ in range(rng.randint(6, 14))]
    k = rng.randint(3, min(8, len(a)))
    b = rng.sample(a, k)
    if rng.randrange(2) == 1:
        # two positions replaced by tokens outside A; detecting the
        # violation means spotting those two tokens, not a wholesale
        # topic change
        outside = [t for t in CONTENT_TOKENS if t not in set(a)]
        for i in rng.sample(list(range(len(b))), 2):
            b[i] = rng.choice(outside)
    tokens, segments = _assemble(a, b)
    return Example(tokens, segments, entail_label(tokens, segments))


def _draw_overlap(rng: Rng) -> Example:
    da = rng.randint(4, 12)
    a = rng.sample(CONTENT_TOKENS, da)
    k = rng.randint(0, da)
    # cap the outside tokens so CLS + a + SEP + b + SEP fits max_seq_len
    extra = rng.randint(1 if k == 0 else 0, min(6, MAX_SEQ_LEN - 3 - da - k))
    outside = [t for t in CONTENT_TOKENS if t not in set(a)]
    b = rng.sample(a, k) + rng.sample(outside, extra)
    rng.shuffle(b)
    tokens, segments = _assemble(a, b)
    return Example(tokens, segments, overlap_target(tokens, segments))


_DRAWERS = {
    "polarity": _draw_polarity,
    "paraphrase": _draw_paraphrase,
    "entail": _draw_entail,
    "overlap": _draw_overlap,
}


def gen_task(spec: TaskSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Generate (train, dev) for a task.

    Pure in (spec, seed). Splits are disjoint by content hash, and
    classification splits are label-balanced to within one example. A
    draw goes to whichever split still has room for its label, filling
    train before dev.
    """
    rng = Rng(derive_seed(seed, f"task/{spec.name}"))
    draw = _DRAWERS[spec.name]
    seen: set[str] = set()
    splits = [Dataset(), Dataset()]
    if spec.regression:
        quotas = [{None: spec.train_size}, {None: spec.dev_size}]
    else:
        quotas = [
            {0: spec.train_size // 2, 1: spec.train_size - spec.train_size // 2},
            {0: spec.dev_size // 2, 1: spec.dev_size - spec.dev_size // 2},
        ]
    want = spec.train_size + spec.dev_size
    attempts = 0
    limit = 2000 * want
    while sum(len(s) for s in splits) < want:
        attempts += 1
        if attempts > limit:
            raise DataError(f"could not fill {spec.name} quotas after {limit} draws")
        ex = draw(rng)
        key = example_key(ex)
        if key in seen:
            continue
        bucket = None if spec.regression else int(ex.label)
        placed = False
        for split, quota in zip(splits, quotas):
            if quota.get(bucket, 0) > 0:
                quota[bucket] -= 1
                split.examples.append(ex)
                seen.add(key)
                placed = True
                break
        if not placed:
            continue
    return splits[0], splits[1]


# Masked-token corpus. Content follows a noisy successor chain: with
# probability 0.7 the next token is a fixed permutation of the current one,
# otherwise it is uniform. That gives pretraining something real to learn
# (local structure) while staying trivially cheap to sample.


def _successor(t: int) -> int:
    return FIRST_CONTENT_ID + ((t - FIRST_CONTENT_ID) * 7 + 3) % 60


def _chain(rng: Rng, n: int) -> list[int]:
    out = [rng.choice(CONTENT_TOKENS)]
    while len(out) < n:
        if rng.randrange(100) < 70:
            out.append(_successor(out[-1]))
        else:
            out.append(rng.choice(CONTENT_TOKENS))
    return out


MASK_RATE = 0.15


def gen_pretrain_corpus(size: int, seed: int) -> Dataset:
    """Corpus with mask targets and pair-coherence labels for pretraining.

    40% of sequences are two-segment, the rest single-segment. Most pair
    sequences carry a shuffled copy of segment A as segment B, so masked
    tokens there are recoverable by looking across the segment boundary;
    that forces pretraining to learn cross-segment token matching, the
    raw capability the pair tasks build on. The example label records
    the pair relation for the coherence objective: 1 when B is a
    rearranged copy of A, 0 when the segments are independent chains, -1
    (ignored) for single-segment sequences.

    Each content position is masked independently at MASK_RATE; a
    sequence with no masked position gets one forced, so every example
    trains. mlm_targets holds the original token at masked positions and
    -1 elsewhere (-1 rows are ignored by the loss).
    """
    rng = Rng(derive_seed(seed, "pretrain"))
    examples = []
    for _ in range(size):
        if rng.randrange(100) < 40:
            a = _chain(rng, rng.randint(4, 14))
            if rng.randrange(100) < 60:
                b = list(a)
                rng.shuffle(b)
                label = 1
            else:
                b = _chain(rng, rng.randint(4, 14))
                label = 0
            tokens, segments = _assemble(a, b)
        else:
            tokens, segments = _assemble(_chain(rng, rng.randint(8, 28)), None)
            label = -1
        content_pos = [i for i, t in enumerate(tokens) if t >= FIRST_CONTENT_ID]
        targets = [-1] * len(tokens)
        masked = []
        for i in content_pos:
            if rng.randrange(100) < int(MASK_RATE * 100):
                masked.append(i)
        if not masked:
            masked.append(content_pos[rng.randrange(len(content_pos))])
        for i in masked:
            targets[i] = tokens[i]
            tokens[i] = MASK_ID
        examples.append(Example(tokens, segments, label, mlm_targets=targets))
    return Dataset(examples)


@dataclass
class Batch:
    """Padded arrays for one batch of examples."""

    ids: np.ndarray        # (B, S) int64
    segments: np.ndarray   # (B, S) int64
    mask: np.ndarray       # (B, S) float64, 1 = real token
    labels: np.ndarray     # (B,) int64 or float64
    mlm_targets: np.ndarray | None = None  # (B, S) int64, -1 = not a target


def collate(examples: list[Example], seq_len: int, regression: bool = False) -> Batch:
    if not examples:
        raise DataError("cannot collate an empty batch")
    n = len(examples)
    ids = np.full((n, seq_len), PAD_ID, dtype=np.int64)
    segments = np.zeros((n, seq_len), dtype=np.int64)
    mask = np.zeros((n, seq_len), dtype=np.float64)
    any_mlm = any(ex.mlm_targets is not None for ex in examples)
    mlm = np.full((n, seq_len), -1, dtype=np.int64) if any_mlm else None
    labels = np.zeros(n, dtype=np.float64 if regression else np.int64)
    for i, ex in enumerate(examples):
        L = len(ex.tokens)
        if L > seq_len:
            raise DataError(f"example length {L} exceeds sequence length {seq_len}")
        ids[i, :L] = ex.tokens
        segments[i, :L] = ex.segments
        mask[i, :L] = 1.0
        labels[i] = ex.label
        if mlm is not None and ex.mlm_targets is not None:
            mlm[i, :L] = ex.mlm_targets
    return Batch(ids=ids, segments=segments, mask=mask, labels=labels, mlm_targets=mlm)


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise DataError("accuracy needs equal-length nonempty predictions and labels")
    return float((preds == labels).mean())


def mcc(preds, labels) -> float:
    """Matthews correlation for binary labels. Degenerate tables give 0.0."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.size == 0:
        raise DataError("mcc needs equal-length nonempty predictions and labels")
    for arr in (preds, labels):
        bad = set(np.unique(arr)) - {0, 1}
        if bad:
            raise DataError(f"mcc expects 0/1 values, got {sorted(bad)}")
    tp = float(np.sum((preds == 1) & (labels == 1)))
    tn = float(np.sum((preds == 0) & (labels == 0)))
    fp = float(np.sum((preds == 1) & (labels == 0)))
    fn = float(np.sum((preds == 0) & (labels == 1)))
    denom = math.sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    if denom == 0.0:
        return 0.0
    return (tp * tn - fp * fn) / denom


def pearson(x, y) -> float:
    """Pearson correlation. Raises DataError on degenerate input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise DataError("pearson needs two equal-length 1-d arrays with >= 2 entries")
    xc = x - x.mean()
    yc = y - y.mean()
    vx = float(xc @ xc)
    vy = float(yc @ yc)
    if vx == 0.0 or vy == 0.0:
        raise DataError("pearson is undefined for zero-variance input")
    return float((xc @ yc) / math.sqrt(vx * vy))
