import numpy as np
import pytest
import torch

from capgan.data import ImageBatch


def pytest_configure(config):
    torch.set_num_threads(max(1, min(4, torch.get_num_threads())))


def tiny_batch(counts, size=4, channels=1, seed=0):
    """Batch whose every image is distinct: pixel [0,0,0] encodes the sample index."""
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(c, k) for k, c in enumerate(counts)]).astype(np.int64)
    n = labels.size
    pixels = rng.uniform(0, 1, size=(n, size, size, channels)).astype(np.float32)
    pixels[:, 0, 0, 0] = np.arange(n) / max(n, 1)
    return ImageBatch(pixels, labels, len(counts))


@pytest.fixture
def make_batch():
    return tiny_batch


VERDICTS: list[str] = []


def verdict(criterion: str, ok: bool, detail: str) -> None:
    """Record one PASS/FAIL line for the acceptance summary."""
    line = f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
