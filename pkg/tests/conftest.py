from pathlib import Path

import numpy as np
import pytest
import torch

from voicetype.annotations import REFERENCE_CLASSES, Annotation, Segment
from voicetype.synthetic import make_corpus

torch.set_num_threads(1)


def random_annotation(rng, uri="f", max_segments=20, extent=60.0, classes=REFERENCE_CLASSES,
                      quantum=None, min_len=0.05, max_len=5.0):
    """Random multi-label annotation; same-class entries may overlap."""
    n = int(rng.integers(0, max_segments + 1))
    entries = []
    for _ in range(n):
        length = rng.uniform(min_len, max_len)
        on = rng.uniform(0, extent - length)
        off = on + length
        if quantum:
            on, off = round(on / quantum) * quantum, round(off / quantum) * quantum
            if off <= on:
                off = on + quantum
            on, off = round(on, 6), round(off, 6)
        entries.append((Segment(on, off), classes[int(rng.integers(len(classes)))]))
    return Annotation(uri, tuple(entries))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> Path:
    """Four 20 s synthetic recordings, all in the train split."""
    return make_corpus(tmp_path_factory.mktemp("small"), n_recordings=4, duration=20.0, seed=3)


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory) -> Path:
    """Ten one-minute synthetic recordings (about 10 minutes of audio)."""
    return make_corpus(tmp_path_factory.mktemp("desk"), n_recordings=10, duration=60.0, seed=0)


# acceptance criteria record one line each; printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
