import os

import numpy as np
import pytest

from oslo_lab import models as M
from oslo_lab.data import SynthSpec, make_split, synth_dataset
from oslo_lab.oslo import Panel, ValidationEnsemble
from oslo_lab.transfer import SourceEnsemble


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: desk-scale acceptance criteria")


@pytest.fixture(scope="session")
def desk():
    """Default desk dataset and split plus an undefended cnn-a target (seed 0)."""
    data = synth_dataset(SynthSpec(), seed=11)
    split = make_split(len(data), seed=11)
    train = data.subset(split.target_train)
    test = data.subset(split.holdout)
    target = M.train(M.ArchSpec("cnn-a"), train, M.TrainConfig(seed=0))
    return {"data": data, "split": split, "train": train, "test": test, "target": target}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def default_jobs() -> int:
    env = os.environ.get("OSLO_LAB_JOBS")
    return int(env) if env else min(4, os.cpu_count() or 1)


@pytest.fixture(scope="session")
def surrogates(desk):
    """Two cnn-b source and two cnn-c validation models on the surrogate split, plus a small panel."""
    data, split = desk["data"], desk["split"]
    sur = data.subset(split.surrogate_train)
    g = SourceEnsemble([M.train(M.ArchSpec("cnn-b"), sur, M.TrainConfig(epochs=30, seed=1 + i)) for i in range(2)])
    h = ValidationEnsemble([M.train(M.ArchSpec("cnn-c"), sur, M.TrainConfig(epochs=30, seed=10 + i))
                            for i in range(2)])
    idx = np.r_[split.eval_members[:30], split.eval_nonmembers[:30]]
    panel = Panel(idx, data.images[idx], data.labels[idx], np.r_[np.ones(30, bool), np.zeros(30, bool)])
    return {"g": g, "h": h, "panel": panel}


ACCEPTANCE_RESULTS = {}


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
