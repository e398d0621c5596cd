import dataclasses

import numpy as np
import pytest

from voxelgeo.checkpoint import dumps_checkpoint, loads_checkpoint, parameters_equal
from voxelgeo.errors import ConfigError, ShapeError
from voxelgeo.model import GeometryAwareNet
from voxelgeo.synthetic import generate_synthetic_scene
from voxelgeo.train import TrainConfig, default_net_config, epoch_of_step, train_toy

from scenes import small_scene


@pytest.fixture(scope="module")
def scene():
    return small_scene()


def test_lr_zero_bitwise(scene):
    cfg = default_net_config(scene)
    before = dumps_checkpoint(GeometryAwareNet(cfg, seed=2))
    res = train_toy([scene], cfg, TrainConfig(seed=2, steps=5, lr=0.0))
    assert dumps_checkpoint(res.net) == before


def test_same_seed_identical_checkpoints(scene):
    runs = [train_toy([scene], default_net_config(scene), TrainConfig(seed=4, steps=6, lr=3e-3))
            for _ in range(2)]
    assert dumps_checkpoint(runs[0].net) == dumps_checkpoint(runs[1].net)
    assert [s.total for s in runs[0].trace] == [s.total for s in runs[1].trace]


def test_different_seed_differs(scene):
    a = train_toy([scene], default_net_config(scene), TrainConfig(seed=0, steps=1, lr=3e-3))
    b = train_toy([scene], default_net_config(scene), TrainConfig(seed=1, steps=1, lr=3e-3))
    assert not parameters_equal(a.net, b.net)


def test_checkpoint_round_trip(scene):
    res = train_toy([scene], default_net_config(scene), TrainConfig(steps=2, lr=3e-3))
    blob = dumps_checkpoint(res.net)
    back = loads_checkpoint(blob)
    assert parameters_equal(res.net, back) and back.config == res.net.config
    assert dumps_checkpoint(back) == blob


def test_total_loss_composition(scene):
    res = train_toy([scene], default_net_config(scene, surface_weight=10.0),
                    TrainConfig(steps=1, lr=0.0))
    s = res.trace[0]
    assert s.total == pytest.approx(s.cls + s.centerness + s.box + 10.0 * s.surface, rel=1e-15)


def test_trailing_window_decreasing(scene):
    res = train_toy([scene], default_net_config(scene), TrainConfig(steps=300, lr=3e-3))
    windows = np.array(res.total_trace).reshape(-1, 50).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows
    assert np.all(np.isfinite(res.grad_norms))


def test_missing_depth_is_config_error(scene):
    views = [dataclasses.replace(v, depth=None) for v in scene.views]
    bare = dataclasses.replace(scene, views=views)
    with pytest.raises(ConfigError):
        train_toy([bare], default_net_config(bare), TrainConfig(steps=1))
    res = train_toy([bare], default_net_config(bare, surface_weight=0.0),
                    TrainConfig(steps=1, lr=3e-3))
    assert res.trace[0].surface == 0.0


def test_grid_must_divide(scene):
    cfg = default_net_config(scene, num_scales=5)
    with pytest.raises(ShapeError):
        train_toy([scene], cfg, TrainConfig(steps=1))


def test_epoch_mapping():
    assert [epoch_of_step(s, 12, 12) for s in (0, 7, 8, 11)] == [1, 8, 9, 12]
    assert epoch_of_step(0, 1000, 12) == 1 and epoch_of_step(999, 1000, 12) == 12


@pytest.mark.slow
def test_overfit_default_scene_500_steps():
    scene = generate_synthetic_scene(seed=0)
    res = train_toy([scene], default_net_config(scene), TrainConfig(steps=500, lr=3e-3))
    trace = res.total_trace
    assert trace[-1] < 0.1 * trace[0], (trace[0], trace[-1])
