import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from droneacoustics import Room

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rect():
    return Room.rectangle(4.0, 3.0, [0.9, 0.8, 0.7, 0.6], max_reflection_order=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_convex_room(rng, n=None, order=2):
    """Convex polygon: jittered regular angles on a circle around (5, 5)."""
    n = n or int(rng.integers(3, 8))
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False) + rng.uniform(-0.2, 0.2, n) + rng.uniform(0, 2 * np.pi)
    r = rng.uniform(2.0, 3.0)
    v = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1) + 5.0
    return Room(v, rng.uniform(0.3, 0.9, n), max_reflection_order=order)


def star_room(rng, n=7):
    """Star-shaped (generally non-convex) polygon around (5, 5)."""
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    r = rng.uniform(1.5, 3.0, n)
    v = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1) + 5.0
    return Room(v, 0.7, max_reflection_order=2)


@pytest.fixture(scope="session")
def desk():
    """Default room and drone, the full grid dataset and a localizer trained with the default config."""
    from types import SimpleNamespace

    from droneacoustics import AttackProblem, LocalizerModel, default_drone, default_room, generate_dataset, train
    from droneacoustics.config import build_grid, build_train, default_config

    cfg = default_config()
    room, drone = default_room(), default_drone()
    ds = generate_dataset(room, drone, build_grid(cfg))
    arch, tcfg = build_train(cfg)
    model, losses = train(LocalizerModel.for_dataset(ds, seed=tcfg.seed, **arch), ds, tcfg)
    return SimpleNamespace(room=room, drone=drone, dataset=ds, model=model, losses=losses,
                           problem=AttackProblem.from_dataset(model, room, drone, ds))


@pytest.fixture(scope="session")
def toy():
    """Three drone states and a small untrained-but-normalized localizer."""
    from types import SimpleNamespace

    from droneacoustics import AttackProblem, Dataset, DroneState, LocalizerModel, SceneTransfer, default_drone
    from droneacoustics.harness import default_room

    room, drone = default_room(), default_drone()
    states = [DroneState((1.5, 1.2), 0.0), DroneState((2.6, 1.9), 1.0), DroneState((2.0, 2.4), 2.5)]
    clean = np.stack([SceneTransfer.build(room, drone, s).response() for s in states])
    ds = Dataset(clean, [s.center for s in states], [s.heading for s in states], room.bounds)
    model = LocalizerModel.for_dataset(ds, subsample=8, hidden=(16, 8), seed=2)
    return SimpleNamespace(room=room, drone=drone, states=states, dataset=ds, model=model,
                           problem=AttackProblem(model, room, drone, states, clean))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
