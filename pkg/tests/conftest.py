from contextlib import contextmanager

import numpy as np
import pytest

from mctfuse.data import SynthConfig, generate_dataset
from mctfuse.train import TrainConfig

TINY_VIDEO = {"num_blocks": 2, "base_dim": 8, "num_heads": 1, "expand_after": [0]}
TINY_SKELETON = {"num_blocks": 2, "dims": [8, 8]}


def tiny_config(**kw) -> TrainConfig:
    base = dict(epochs_stage1=1, epochs_stage2=1, video=TINY_VIDEO, skeleton=TINY_SKELETON)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_ds():
    return generate_dataset(SynthConfig(seed=3, n_known=6, n_new=4, samples_per_archetype=8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[str, str]] = {}


@contextmanager
def criterion(n: int, title: str):
    """Record one acceptance line; any exception inside marks the criterion failed."""
    notes: list[str] = []
    ACCEPTANCE[n] = ("FAIL", f"{title} (did not complete)")
    try:
        yield notes
    except BaseException as exc:
        msg = str(exc).strip().splitlines()
        ACCEPTANCE[n] = ("FAIL", f"{title}; " + "; ".join(notes + [msg[0] if msg else type(exc).__name__]))
        raise
    ACCEPTANCE[n] = ("PASS", "; ".join([title] + notes))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {status} {detail}")
