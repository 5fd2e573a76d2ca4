"""Session fixtures shared across the suite.

The expensive fixtures (the pretrained desk backbone in particular) are
session scoped and built lazily, so unit-test-only runs never pay for
them.
"""

import pytest

from hadapt.model import ModelConfig
from hadapt.tensor import set_debug_checks
from hadapt.training import HyperParams, execute_pretrain_run

# Desk-scale training suite knobs. These match the CLI defaults; the
# acceptance tests pin behaviour at exactly these settings.
BACKBONE_SEED = 2024
BACKBONE_CORPUS = 8192
BACKBONE_EPOCHS = 20
BACKBONE_LR = 1e-3
BACKBONE_BATCH = 32

# The tuning grid the regime-ordering criterion runs: every task at each
# seed under head-only, adapter, and full tuning, all sharing one budget.
SUITE_TASKS = ("polarity", "paraphrase", "entail", "overlap")
SUITE_SEEDS = (1, 2, 3)
SUITE_TRAIN = 384
SUITE_DEV = 256
SUITE_BATCH = 32
SUITE_S1_LR = 2e-3
SUITE_S1_EPOCHS = 8
SUITE_S2_LR = 3e-3
SUITE_S2_EPOCHS = 16
SUITE_FULL_LR = 1e-3
SUITE_FULL_EPOCHS = 10

# A small but real encoder shape for unit and integration tests.
TINY_CFG = ModelConfig(
    vocab_size=64,
    hidden_size=16,
    num_layers=2,
    num_heads=2,
    ff_size=32,
    max_seq_len=32,
)


@pytest.fixture
def debug_checks():
    """Per-op finiteness validation, switched off again afterwards."""
    set_debug_checks(True)
    yield
    set_debug_checks(False)


@pytest.fixture(scope="session")
def backbone_dir(tmp_path_factory):
    """Pretrained desk backbone used by analysis and acceptance tests."""
    out = tmp_path_factory.mktemp("desk_backbone")
    hp = HyperParams(lr=BACKBONE_LR, epochs=BACKBONE_EPOCHS, batch_size=BACKBONE_BATCH)
    execute_pretrain_run(ModelConfig(), BACKBONE_SEED, BACKBONE_CORPUS, hp, out)
    return out / "checkpoint"


@pytest.fixture(scope="session")
def tiny_backbone_dir(tmp_path_factory):
    """A cheap pretrained checkpoint for plumbing tests (seconds, not minutes)."""
    out = tmp_path_factory.mktemp("tiny_backbone")
    hp = HyperParams(lr=1e-3, epochs=2, batch_size=16)
    execute_pretrain_run(TINY_CFG, 5, 96, hp, out)
    return out / "checkpoint"
