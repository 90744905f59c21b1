import numpy as np
import pytest

from relaff.config import from_dict
from relaff.data import generate_corpus

TINY = {
    "encoder": {"T": 4, "H": 8, "W": 8, "D": 8, "D_f": 8, "frozen_width": 16,
                "transformer_layers": 1, "attention_heads": 2, "patch_grid": 2},
    "head": {"dropout_rate": 0.0, "penultimate_width": 8},
    "synth": {"subjects": 3, "videos_per_subject": 2, "L": 24, "noise": 0.0},
    "training": {"K": 1, "B": 4, "epochs": 2, "lr": 3e-3, "batches_per_epoch": 2, "augment": False,
                 "alignment_batches": 2, "contrastive_epochs": 1},
}


def tiny_raw(**sections):
    raw = {k: dict(v) for k, v in TINY.items()}
    for sec, upd in sections.items():
        raw.setdefault(sec, {}).update(upd)
    return raw


@pytest.fixture
def tiny_cfg():
    return from_dict(tiny_raw())


@pytest.fixture
def tiny_corpus(tiny_cfg):
    return generate_corpus(tiny_cfg.synth, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# verdict lines filled in by test_acceptance, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
