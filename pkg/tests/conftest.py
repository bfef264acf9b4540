import math

import numpy as np
import pytest

from trajlearn.config import GAMMA_D, OMEGA_R, LossWeights, TrainConfig
from trajlearn.dataset import DatasetMeta
from trajlearn.rnn import train_rnn
from trajlearn.sme import PhysicalModel, generate_dataset

ETA_TEST = 0.5
CALIBRATED = {"omega_r": 1.395, "gamma_d": 1.176, "eta": 0.1469}


@pytest.fixture(scope="session")
def true_model():
    return PhysicalModel.constrained(OMEGA_R, GAMMA_D, ETA_TEST)


@pytest.fixture(scope="session")
def small_meta(true_model):
    """Three durations, coarse step 0.04 us over a 0.004 us integration step."""
    return DatasetMeta(
        dt=0.04,
        dt_fine=0.004,
        t_grid=[0.0, 0.4, 0.8],
        shots_per_setting=4,
        seed=11,
        generator=true_model.to_spec(),
    )


@pytest.fixture(scope="session")
def small_dataset(small_meta):
    return generate_dataset(small_meta)


@pytest.fixture(scope="session")
def calibrated_model():
    return PhysicalModel.constrained(**CALIBRATED)


@pytest.fixture(scope="session")
def benchmark_dataset(calibrated_model):
    """About 20k shots up to 2 us at the calibrated parameters; slow tests only."""
    meta = DatasetMeta(
        dt=0.04,
        dt_fine=0.004,
        t_grid=[round(0.2 * k, 6) for k in range(11)],
        shots_per_setting=100,
        seed=101,
        generator=calibrated_model.to_spec(),
    )
    return generate_dataset(meta, workers=4)


@pytest.fixture(scope="session")
def benchmark_pinn(benchmark_dataset):
    """(model, report) of the physics-weighted network on ``benchmark_dataset``."""
    cfg = TrainConfig(lr=0.005, batch_size=256, epochs=20, patience=20, seed=3)
    return train_rnn(benchmark_dataset, LossWeights(), cfg, workers=4)


def _assert_same_shots(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert (x.index, x.prep, x.axis, x.outcome) == (y.index, y.prep, y.axis, y.outcome)
        assert math.isclose(x.record.dt, y.record.dt)
        np.testing.assert_array_equal(x.record.dm_i, y.record.dm_i)
        np.testing.assert_array_equal(x.record.dm_q, y.record.dm_q)
        if x.truth is None or y.truth is None:
            assert x.truth is None and y.truth is None
        else:
            np.testing.assert_array_equal(x.truth, y.truth)


@pytest.fixture
def same_shots():
    """Field-wise equality of two shot lists (records hold arrays)."""
    return _assert_same_shots

