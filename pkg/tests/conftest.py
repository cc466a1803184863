import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from radiotwin.ingest import AntennaConfig, MeasurementRecord

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ORIGIN = (48.137, 11.575)


def make_antenna(**kw):
    base = dict(antenna_id="a0", latitude=ORIGIN[0], longitude=ORIGIN[1], height_m=25.0, frequency_hz=2.3e9,
                azimuth_rad=0.0, tilt_rad=math.radians(5.0), tx_power_dbm=18.0, hardware_loss_db=2.0,
                bandwidth_hz=20e6)
    base.update(kw)
    return AntennaConfig(**base)


def make_record(lat=ORIGIN[0], lon=ORIGIN[1], rsrp=-80.0, indoor=False, accuracy=5.0, antenna_id="a0", t=0.0):
    return MeasurementRecord(antenna_id, t, lat, lon, rsrp, 10.0, indoor, accuracy)


@pytest.fixture
def antenna():
    return make_antenna()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
