import numpy as np
import pytest

from contrastmvs import numerics as nx
from contrastmvs.features import (CheckpointError, ModelConfig, config_from_params, extract,
                                  init_params, load_params, save_params, soft_normalize)
from contrastmvs.losses import make_targets, total_loss
from contrastmvs.matching import run_cascade
from contrastmvs.scenes import SceneSpec, render


@pytest.fixture(scope="module")
def params():
    return init_params(0)


def test_pyramid_shapes(params):
    img = np.random.default_rng(0).random((3, 32, 32))
    shapes = [f.shape for f in extract(img, params)]
    assert shapes == [(16, 8, 8), (16, 16, 16), (8, 32, 32)]


def test_custom_channels():
    cfg = ModelConfig(stage_channels=(4, 6, 2), backbone_channels=(3, 5, 7), reg_channels=2)
    feats = extract(np.zeros((3, 8, 12)), init_params(1, cfg))
    assert [f.shape for f in feats] == [(4, 2, 3), (6, 4, 6), (2, 8, 12)]


def test_shared_weights_identical_images(params):
    img = np.random.default_rng(1).random((3, 16, 20))
    a, b = extract(img, params), extract(img.copy(), params)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


@pytest.mark.parametrize("shape", [(3, 30, 32), (3, 32, 34)])
def test_indivisible_extent_has_padding_hint(params, shape):
    with pytest.raises(ValueError, match="pad by"):
        extract(np.zeros(shape), params)


def test_init_deterministic_and_seeded():
    a, b, c = init_params(3), init_params(3), init_params(4)
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith(".w"))


def test_init_bounds():
    p = init_params(5)
    for name, arr in p.items():
        if name.endswith(".w"):
            bound = np.sqrt(6.0 / np.prod(arr.shape[1:]))
            assert np.abs(arr).max() <= bound
            # uniform draws should come close to the bound
            assert np.abs(arr).max() > 0.5 * bound
        else:
            assert np.all(arr == 0.0)


def test_translation_covariance(params):
    big = np.random.default_rng(2).random((3, 32, 56))
    a = extract(big[:, :, 0:48], params)[2].data
    b = extract(big[:, :, 4:52], params)[2].data
    # b[x] sees the same content as a[x + 4]; compare away from both borders
    margin = 16
    np.testing.assert_allclose(b[:, :, margin:48 - margin - 4], a[:, :, margin + 4:48 - margin],
                               atol=1e-9)


def test_output_finite_for_extreme_input(params):
    feats = extract(np.full((3, 16, 16), 1e6), params)
    assert all(np.all(np.isfinite(f.data)) for f in feats)


def test_soft_normalize_bounds_energy():
    x = np.random.default_rng(0).normal(size=(5, 4, 4)) * 1e4
    y = soft_normalize(nx.Tensor(x)).data
    assert np.all((y ** 2).sum(axis=0) < 5.0)
    small = np.full((3, 2, 2), 1e-4)
    np.testing.assert_allclose(soft_normalize(nx.Tensor(small)).data, small, rtol=1e-8)


def test_checkpoint_round_trip_bit_identical(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_params(path, params)
    back = load_params(path)
    assert list(back) == list(params)
    assert all(np.array_equal(back[k], params[k]) and back[k].dtype == np.float64 for k in params)
    save_params(tmp_path / "again.ckpt", back)
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path, params):
    path = tmp_path / "m.ckpt"
    save_params(path, params)
    raw = path.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "truncated").write_bytes(raw[:-20])
    (tmp_path / "version").write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    for name in ("bad_magic", "truncated", "version"):
        with pytest.raises(CheckpointError):
            load_params(tmp_path / name)


def test_config_from_params_round_trip():
    cfg = ModelConfig(stage_channels=(4, 6, 2), backbone_channels=(3, 5, 7), reg_channels=2)
    assert config_from_params(init_params(0, cfg)) == cfg
    p = init_params(0, cfg)
    del p["reg2.proj.b"]
    with pytest.raises(CheckpointError):
        config_from_params(p)


def test_loss_gradient_nonzero_after_training_step():
    scene = render(SceneSpec("plane", texture_seed=2, num_views=2, height=16, width=20, focal=20.0,
                             tilt_deg=10.0))
    cfg = ModelConfig(stage_channels=(4, 4, 4), backbone_channels=(4, 4, 4), reg_channels=2)
    from contrastmvs.matching import CascadeConfig
    cascade = CascadeConfig(model=cfg)
    params = init_params(0, cfg)
    for _ in range(2):
        tensors = params.tensors()
        bundles = run_cascade(scene.images, scene.cameras, tensors, cascade)
        total_loss(bundles, make_targets(scene.depths[0], bundles)).total.backward()
        grads = {k: t.grad for k, t in tensors.items()}
        assert all(g is not None and np.all(np.isfinite(g)) for g in grads.values())
        assert any(np.abs(g).max() > 0 for k, g in grads.items() if k.startswith("fe."))
        for k in params:
            params[k] = params[k] - 1e-3 * grads[k]
