import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vistaocta.phantom import build_phantom
from vistaocta.pipeline import RunConfig, process_volume
from vistaocta.presets import tube_grid_phantom
from vistaocta.volume import get_protocol


def small_protocol(ny=40, nx=60, nz=160, **kw):
    return get_protocol("table1-3x3", n_bscans=ny, ascans_per_bscan=nx,
                        n_depth=nz, **kw)


@pytest.fixture(scope="session")
def small_run():
    """One shared end-to-end run on a 3-tube scene (kept small on purpose)."""
    proto = small_protocol()
    spec = tube_grid_phantom(proto, (0.7, 1.2), (2.0,), seed=7)
    vol, truth = build_phantom(spec)
    result = process_volume(vol, RunConfig())
    return vol, truth, result


@pytest.fixture
def rng():
    return np.random.default_rng(42)
