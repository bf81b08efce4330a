import numpy as np
import pytest

from flowmoe.tensor import RngState


@pytest.fixture
def rng():
    return RngState(1234)


def spaced_logits(rng: RngState, shape, min_gap: float = 1e-3) -> np.ndarray:
    """Random logit rows whose values are pairwise separated by min_gap,
    so finite-difference probes never flip a top-k or argmax selection."""
    while True:
        values = 3.0 * rng.normal(shape)
        flat = np.sort(values.reshape(values.shape[0], -1) if values.ndim > 1
                       else values.reshape(1, -1), axis=-1)
        if np.min(np.diff(flat, axis=-1)) > min_gap:
            return values


@pytest.fixture
def flow_rows():
    from csv_fixture import fixture_rows
    return fixture_rows()


@pytest.fixture
def flow_csv(tmp_path, flow_rows):
    from csv_fixture import write_flow_csv
    return write_flow_csv(tmp_path / "flows.csv", flow_rows)
