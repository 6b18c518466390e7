import dataclasses

import numpy as np
import pytest
import torch

from mamp.config import DESK_ARCH
from mamp.data import SyntheticCorpusConfig, generate_synthetic_corpus
from mamp.model import ArchConfig

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []

TOY_ARCH = ArchConfig(V=3, C_s=3, segment_len=2, T_s=8, embed_dim=16, depth=2, decoder_depth=1,
                      decoder_dim=8, num_heads=2, mlp_dim=32, mask_ratio=0.5)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    def _report(number: int, name: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _report


@pytest.fixture
def toy_arch():
    return TOY_ARCH


@pytest.fixture(scope="session")
def small_corpus():
    cfg = SyntheticCorpusConfig(num_classes=3, sequences_per_class=8, test_per_class=4, seed=3)
    return generate_synthetic_corpus(cfg).split()


@pytest.fixture
def tiny_arch():
    return dataclasses.replace(DESK_ARCH, depth=1, decoder_depth=1, embed_dim=16, decoder_dim=16,
                               mlp_dim=32, num_heads=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
