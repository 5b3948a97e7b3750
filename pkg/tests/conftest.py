import logging

import numpy as np
import pytest

from gaussnav.gaussians import GaussianMap

logging.getLogger("gaussnav").setLevel(logging.ERROR)


def random_map(rng: np.random.Generator, n: int, depth=(1.0, 6.0), spread: float = 2.0,
               scale=(0.02, 0.4), dtype=np.float64) -> GaussianMap:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    mu = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)]
    return GaussianMap(mu, rng.uniform(*scale, (n, 3)), q, rng.uniform(0.05, 0.99, n),
                       rng.uniform(0, 1, (n, 3)), rng.normal(size=n)).astype(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    from gaussnav.navigation.scene import SceneConfig, generate_scene
    return generate_scene(0, SceneConfig(rows=1, cols=2, gaussians_per_instance=40))


@pytest.fixture(scope="session")
def small_maps(small_scene):
    from gaussnav.navigation.mapping import MapBuildConfig, ObserveConfig, SceneMaps
    from gaussnav.optimizer.fit import FitConfig
    from gaussnav.rasterizer import RenderConfig
    from gaussnav.semantics import SyntheticProvider
    maps = SceneMaps(small_scene, SyntheticProvider(small_scene.cfg.instances), ObserveConfig(resolution=16),
                     MapBuildConfig(fit=FitConfig(iterations=3)), RenderConfig(tile_size=8))
    maps.build_all()
    return maps


@pytest.fixture(scope="session")
def small_episodes(small_scene):
    from gaussnav.navigation.episodes import EpisodeConfig, make_episodes
    return make_episodes(small_scene, 11, EpisodeConfig(count=6, min_geodesic=4.0), "scene.json")


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
