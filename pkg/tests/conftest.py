import numpy as np
import pytest

from graphsde.graphs import generate_community_small
from graphsde.models import build_models
from graphsde.sde import SdeSpec

# filled by tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def noisy_batch(rng: np.random.Generator, B: int = 3, N: int = 7, F: int = 4):
    """Random masked node features and symmetric weighted adjacencies."""
    counts = rng.integers(3, N + 1, size=B)
    mask = (np.arange(N)[None, :] < counts[:, None]).astype(float)
    X = rng.standard_normal((B, N, F)) * mask[..., None]
    A = rng.standard_normal((B, N, N))
    A = np.triu(A, 1)
    A = (A + np.swapaxes(A, 1, 2)) * mask[:, :, None] * mask[:, None, :]
    return X, A, mask


def permute_batch(X, A, mask, perm):
    # contiguous copies keep BLAS on the same code path as the originals
    return tuple(np.ascontiguousarray(v) for v in (X[:, perm], A[:, perm][:, :, perm], mask[:, perm]))


@pytest.fixture(scope="session")
def small_dataset():
    return generate_community_small(12, np.random.default_rng(0))


@pytest.fixture
def small_models(small_dataset):
    return build_models(small_dataset.F, {"hidden": 8, "layers": 2},
                        {"hidden": 8, "blocks": 2, "heads": 2, "c_hidden": 4, "c_final": 2},
                        np.random.default_rng(1))


@pytest.fixture
def vp_specs():
    return (SdeSpec.vp(0.1, 1.0), SdeSpec.vp(0.1, 1.0))
