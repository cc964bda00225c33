import numpy as np
import pytest

from helpers import room_dict
from occlabel.simulator import SceneSpec, generate_sequence

ROWS, COLS = 32, 512

MOVERS = [
    {"shape": "sphere", "size": [0.4],
     "path": {"waypoints": [[-3.0, 2.0, 1.5], [3.0, 2.0, 1.5]], "speed": 1.0, "mode": "pingpong"}},
    # stops for 0.3 s (scans 30-32) halfway along its track
    {"shape": "box", "size": [0.8, 0.8, 0.8],
     "path": {"waypoints": [[-3.0, -2.0, 1.6], [0.0, -2.0, 1.6], [3.0, -2.0, 1.6]], "speed": 1.0,
              "waits": [0.0, 0.3, 0.0]}},
]
SENSOR_PATH = {"mode": "pingpong", "speed": 0.3, "waypoints": [[-1.0, 0.0, 1.3, 0.0], [1.0, 0.0, 1.3, 40.0]]}


def small_scene(movers=True, duration=5.0, seed=3):
    return SceneSpec.from_dict(room_dict(rows=ROWS, cols=COLS, duration=duration, noise=0.02,
                                         movers=MOVERS if movers else [], sensor_path=SENSOR_PATH, seed=seed))


@pytest.fixture(scope="session")
def moving_seq(tmp_path_factory):
    """50 reduced-resolution scans with a sphere and a stop-and-go box."""
    out = tmp_path_factory.mktemp("moving")
    generate_sequence(small_scene(), out)
    return out


@pytest.fixture(scope="session")
def static_seq(tmp_path_factory):
    """50 reduced-resolution scans of the empty room."""
    out = tmp_path_factory.mktemp("static")
    generate_sequence(small_scene(movers=False), out)
    return out


def read_instances(seq_dir):
    return [(p.stem, np.fromfile(p, "<u4").reshape(ROWS, COLS))
            for p in sorted((seq_dir / "instances").glob("*.label"))]
