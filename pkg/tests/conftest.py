import math

import numpy as np
import pytest

from sounding.sounding import LevelRecord, SoundingProfile


def _standard_atmosphere(z: float) -> tuple[float, float]:
    """Pressure [hPa] and temperature [K] of a simple standard atmosphere."""
    temperature = max(288.15 - 0.0065 * z, 216.65)
    pressure = 1013.25 * math.exp(-z / 8000.0)
    return pressure, temperature


def _sounding_csv(top: float = 30_000.0, step: float = 50.0, celsius: bool = False) -> str:
    """A sounding CSV from the ground to ``top`` with a small deterministic wiggle."""
    header = "altitude_m,pressure_hPa,temperature_C" if celsius else "altitude_m,pressure_hPa,temperature_K"
    rows = [header]
    for z in np.arange(0.0, top + step / 2, step):
        p, t = _standard_atmosphere(float(z))
        t += 0.3 * math.sin(z / 170.0)
        if celsius:
            t -= 273.15
        rows.append(f"{z:.1f},{p:.4f},{t:.4f}")
    return "\n".join(rows) + "\n"


@pytest.fixture
def atmosphere():
    return _standard_atmosphere


@pytest.fixture
def make_sounding_csv():
    return _sounding_csv


@pytest.fixture
def sounding_file(tmp_path):
    path = tmp_path / "trappes_20200101.csv"
    path.write_text(_sounding_csv())
    return path


@pytest.fixture
def short_sounding_file(tmp_path):
    path = tmp_path / "burst_20200102.csv"
    path.write_text(_sounding_csv(top=25_000.0))
    return path


@pytest.fixture
def synthetic_sounding():
    levels = tuple(LevelRecord(float(z), *_standard_atmosphere(float(z))) for z in np.arange(0.0, 20_001.0, 100.0))
    return SoundingProfile(station_id="07145", launch_time=None, levels=levels)


@pytest.fixture(autouse=True)
def isolated_data_dir(tmp_path, monkeypatch):
    """Keep the repository config file out of CLI runs made by tests."""
    data_dir = tmp_path / "data"
    data_dir.mkdir(exist_ok=True)
    monkeypatch.setenv("CN2_PROFILER_DATA_DIR", str(data_dir))
    return data_dir
