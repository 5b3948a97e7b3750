import json

import numpy as np
import pytest

from gaussnav import raster_io
from gaussnav.config import RunConfig
from gaussnav.gaussians import GaussianMap
from gaussnav.ply import SH_C0, PlyError, map_to_ply_bytes, read_ply, write_ply
from gaussnav.rasterizer import RenderConfig

from conftest import random_map


def test_depth_and_sem_round_trip(tmp_path, rng):
    d = rng.random((5, 7)).astype(np.float32)
    raster_io.write_depth(tmp_path / "a.depth", d)
    np.testing.assert_array_equal(raster_io.read_depth(tmp_path / "a.depth"), d)
    s = d.copy()
    s[0, 0] = np.nan
    raster_io.write_sem(tmp_path / "a.sem", s)
    back = raster_io.read_sem(tmp_path / "a.sem")
    assert np.isnan(back[0, 0])
    np.testing.assert_array_equal(back[1:], s[1:])


def test_raster_errors(tmp_path, rng):
    raster_io.write_depth(tmp_path / "a.depth", rng.random((3, 3)))
    with pytest.raises(raster_io.RasterFormatError, match="magic"):
        raster_io.read_sem(tmp_path / "a.depth")
    (tmp_path / "b.depth").write_bytes((tmp_path / "a.depth").read_bytes()[:-2])
    with pytest.raises(raster_io.RasterFormatError):
        raster_io.read_depth(tmp_path / "b.depth")
    with pytest.raises(raster_io.RasterFormatError):
        raster_io.write_depth(tmp_path / "c.depth", np.zeros(4))


def test_png_round_trip(tmp_path, rng):
    rgb = rng.random((6, 4, 3))
    raster_io.write_rgb(tmp_path / "a.png", rgb)
    np.testing.assert_allclose(raster_io.read_rgb(tmp_path / "a.png"), np.rint(rgb * 255) / 255)


def test_ply_fields(tmp_path, rng):
    m = random_map(rng, 12)
    write_ply(m, tmp_path / "m.ply")
    v = read_ply(tmp_path / "m.ply")
    assert len(v) == 12
    np.testing.assert_allclose(v["x"], m.mu[:, 0], rtol=1e-6)
    np.testing.assert_allclose(v["semantic"], m.semantic, rtol=1e-6)
    np.testing.assert_allclose(1 / (1 + np.exp(-v["opacity"])), m.opacity, rtol=1e-5)
    np.testing.assert_allclose(v["f_dc_1"] * SH_C0 + 0.5, m.color[:, 1], atol=1e-6)
    np.testing.assert_allclose(np.exp(v["scale_2"]), m.scale[:, 2], rtol=1e-5)
    assert v["red"].dtype == np.uint8


def test_ply_empty_and_errors(tmp_path):
    write_ply(GaussianMap.empty(), tmp_path / "e.ply")
    assert len(read_ply(tmp_path / "e.ply")) == 0
    (tmp_path / "x.ply").write_bytes(b"nope")
    with pytest.raises(PlyError):
        read_ply(tmp_path / "x.ply")
    assert map_to_ply_bytes(GaussianMap.empty()).startswith(b"ply\nformat binary_little_endian 1.0\n")


def test_run_config_round_trip():
    cfg = RunConfig()
    d = json.loads(json.dumps(cfg.to_dict()))
    assert RunConfig.from_dict(d) == cfg
    assert cfg.build.fit.iterations == 15 and cfg.observe.resolution == 224 and cfg.metrics.d_th == 3.0


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown"):
        RunConfig.from_dict({"render": {"tile": 3}})


def test_run_config_replace():
    cfg = RunConfig().replace(render=RenderConfig(workers=4))
    assert cfg.render.workers == 4 and RunConfig().render.workers == 1
