import numpy as np
import pytest

from csi_forge.config import SimConfig


@pytest.fixture
def small_cfg():
    """4x2 setup with 8 groups of 12; cheap enough for per-test simulation."""
    return SimConfig(channel_type="UMi", f_carrier=2.6e9, f_sc=15e3,
                     snr_db=20.0, speed_kmh=30.0, n_tx=4, n_rx=2,
                     n_groups=8, group_size=12, pilot_symbols=(2, 5, 8, 11))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
