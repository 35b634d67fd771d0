import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrastmvs import numerics as nx
from contrastmvs.geometry import (Camera, CameraError, HypothesisConfig, make_hypotheses,
                                  read_camera, relative_pose, warp_coords, warp_feature_map,
                                  warp_pixel, write_camera)


def rot_y(th):
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_x(th):
    c, s = np.cos(th), np.sin(th)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def make_cam(f=50.0, cx=15.5, cy=11.5, R=None, t=(0.0, 0.0, 0.0), dmin=2.0, dmax=10.0):
    K = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
    return Camera(K, np.eye(3) if R is None else R, np.asarray(t, float), dmin, dmax)


@settings(max_examples=60, deadline=None)
@given(u=st.floats(-50, 80), v=st.floats(-50, 80), d=st.floats(0.1, 1e4),
       th=st.floats(-1.0, 1.0), tx=st.floats(-5, 5))
def test_identity_pose_is_identity(u, v, d, th, tx):
    cam = make_cam(R=rot_y(th) @ rot_x(0.3 * th), t=(tx, 0.5, 1.0))
    uv, valid = warp_pixel((u, v), d, cam, cam)
    assert valid
    assert np.abs(uv - [u, v]).max() <= 1e-12 * max(1.0, abs(u), abs(v))


def test_identity_pose_exact_on_grid():
    cam = make_cam()
    for u in np.linspace(0, 31, 7):
        for v in np.linspace(0, 23, 5):
            for d in (0.5, 3.0, 77.0):
                uv, valid = warp_pixel((u, v), d, cam, cam, image_size=(24, 32))
                assert valid and np.abs(uv - [u, v]).max() <= 1e-12


def test_baseline_translation_example():
    K = np.diag([100.0, 100.0, 1.0])
    ref = Camera(K, np.eye(3), np.zeros(3), 1.0, 5.0)
    src = Camera(K, np.eye(3), np.array([1.0, 0.0, 0.0]), 1.0, 5.0)
    uv, valid = warp_pixel((0.0, 0.0), 2.0, ref, src)
    # explicit matrix oracle: K^-1 p d = (0,0,2); + t = (1,0,2); project = (50, 0)
    x = np.linalg.inv(K) @ np.array([0.0, 0.0, 1.0]) * 2.0 + np.array([1.0, 0.0, 0.0])
    q = K @ x
    oracle = q[:2] / q[2]
    np.testing.assert_allclose(oracle, [50.0, 0.0], atol=1e-12)
    assert valid
    assert np.abs(uv - oracle).max() <= 1e-9


def test_point_behind_source_is_invalid():
    ref = make_cam()
    src = make_cam(t=(0.0, 0.0, -5.0))  # source 5 units in front of the reference
    uv, valid = warp_pixel((15.5, 11.5), 3.0, ref, src)
    assert not valid


def test_out_of_image_is_invalid():
    ref = make_cam()
    src = make_cam(t=(10.0, 0.0, 0.0))
    _, valid = warp_pixel((15.5, 11.5), 3.0, ref, src, image_size=(24, 32))
    assert not valid


def test_warp_pixel_rejects_non_positive_depth():
    with pytest.raises(ValueError):
        warp_pixel((0, 0), 0.0, make_cam(), make_cam())


def test_relative_pose_composes_world_to_camera():
    ref = make_cam(R=rot_y(0.2), t=(0.3, -0.1, 0.5))
    src = make_cam(R=rot_x(-0.1) @ rot_y(-0.3), t=(1.0, 0.2, 0.0))
    R, t = relative_pose(ref, src)
    X = np.array([0.4, -0.2, 6.0])
    np.testing.assert_allclose(R @ (ref.R @ X + ref.t) + t, src.R @ X + src.t, atol=1e-12)


def test_warp_matches_projection_of_unprojected_point():
    ref = make_cam(R=rot_y(0.05), t=(0.2, 0.0, 0.1))
    src = make_cam(R=rot_y(-0.1), t=(-0.5, 0.1, 0.0))
    p, d = (10.3, 7.9), 4.2
    X = ref.unproject(np.array(p[0]), np.array(p[1]), np.array(d))
    u, v, _ = src.project(X)
    uv, _ = warp_pixel(p, d, ref, src)
    np.testing.assert_allclose(uv, [u, v], atol=1e-10)


def test_translation_rig_converges_to_reference_pixel():
    ref = make_cam()
    src = make_cam(t=(0.5, 0.0, 0.0))
    p = np.array([7.0, 9.0])
    errs = [np.abs(warp_pixel(p, d, ref, src)[0] - p).max() for d in (1e1, 1e3, 1e5, 1e7)]
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-5


def test_warp_pixel_continuous_in_depth():
    ref = make_cam()
    src = make_cam(R=rot_y(0.1), t=(0.7, 0.0, 0.1))
    a, _ = warp_pixel((5.0, 5.0), 4.0, ref, src)
    b, _ = warp_pixel((5.0, 5.0), 4.0 + 1e-7, ref, src)
    assert np.abs(a - b).max() < 1e-4


def test_warp_feature_map_identity_pose():
    cam = make_cam(cx=3.5, cy=2.5)
    feats = np.random.default_rng(0).normal(size=(3, 6, 8))
    vol, mask = warp_feature_map(nx.Tensor(feats), np.linspace(2, 10, 5), cam, cam)
    assert vol.shape == (3, 5, 6, 8)
    assert mask.all()
    np.testing.assert_allclose(vol.data, np.broadcast_to(feats[:, None], vol.shape), atol=1e-12)


def test_warp_feature_map_constant_features():
    ref = make_cam(f=8.0, cx=3.5, cy=2.5)
    src = make_cam(f=8.0, cx=3.5, cy=2.5, R=rot_y(0.05), t=(0.4, 0.1, 0.0))
    vol, mask = warp_feature_map(nx.Tensor(np.full((2, 6, 8), 1.7)), np.linspace(2, 10, 6),
                                 ref, src)
    assert mask.any() and not mask.all()
    np.testing.assert_allclose(vol.data[:, mask], 1.7, atol=1e-12)
    assert np.all(vol.data[:, ~mask] == 0.0)


def test_warp_feature_map_mask_rule():
    ref = make_cam(f=8.0, cx=3.5, cy=2.5)
    src = make_cam(f=8.0, cx=3.5, cy=2.5, R=rot_y(0.2), t=(1.5, -0.3, 0.2))
    hyp = np.linspace(2, 10, 5)
    _, mask = warp_feature_map(nx.Tensor(np.ones((1, 6, 8))), hyp, ref, src)
    u, v, front = warp_coords(hyp, ref, src, 6, 8)
    with np.errstate(invalid="ignore"):
        tol = nx.BORDER_TOL
        expected = front & (u >= -tol) & (u <= 7 + tol) & (v >= -tol) & (v <= 5 + tol)
    np.testing.assert_array_equal(mask, expected)


def test_warp_feature_map_gradient():
    rng = np.random.default_rng(5)
    ref = make_cam(f=6.0, cx=2.5, cy=2.5)
    src = make_cam(f=6.0, cx=2.5, cy=2.5, R=rot_y(0.03), t=(0.3, 0.1, 0.0))
    w = rng.normal(size=(2, 4, 6, 6))
    rep = nx.gradcheck(lambda f: nx.tsum(warp_feature_map(f, np.linspace(2, 10, 4), ref, src)[0]
                                         * w), [rng.normal(size=(2, 6, 6))])
    assert rep.worst <= 1e-5


def test_stage1_uniform_hypotheses():
    cfg = HypothesisConfig(2.0, 4.0, num_depths=(5, 4, 4))
    np.testing.assert_allclose(make_hypotheses(1, None, cfg), [2.0, 2.5, 3.0, 3.5, 4.0])


def test_stage2_centered_window():
    cfg = HypothesisConfig(2.0, 4.0, num_depths=(5, 4, 4), intervals=(0.5, 0.1, 0.05))
    hyp = make_hypotheses(2, 3.0, cfg)
    expected = (3.0 - 1.5 * 0.1) + 0.1 * np.arange(4)
    np.testing.assert_allclose(hyp[:, 0, 0], expected, atol=1e-12)
    np.testing.assert_allclose(hyp[:, 0, 0], [2.85, 2.95, 3.05, 3.15], atol=1e-12)


@pytest.mark.parametrize("prev", [2.0, 1.0, 4.0, 9.0, 2.01, 3.99])
def test_boundary_windows_stay_in_range(prev):
    cfg = HypothesisConfig(2.0, 4.0, num_depths=(5, 8, 4), intervals=(0.5, 0.2, 0.1))
    hyp = make_hypotheses(2, np.full((3, 3), prev), cfg)
    assert hyp.min() >= 2.0 and hyp.max() <= 4.0
    assert np.all(np.diff(hyp, axis=0) > 0)


def test_missing_prev_depth_raises():
    with pytest.raises(ValueError):
        make_hypotheses(2, None, HypothesisConfig(2.0, 4.0))


def test_default_interval_ratios():
    cfg = HypothesisConfig(20.0, 50.0)
    assert cfg.base_interval == 2.0
    assert [cfg.interval(s) for s in (1, 2, 3)] == [2.0, 1.0, 0.5]


@settings(max_examples=60, deadline=None)
@given(prev=st.lists(st.floats(-10, 70), min_size=4, max_size=4),
       num=st.integers(2, 12), ratio=st.floats(0.05, 3.0))
def test_hypotheses_increasing_and_in_range(prev, num, ratio):
    cfg = HypothesisConfig(20.0, 50.0, num_depths=(16, num, 4), interval_ratios=(1.0, ratio, 0.25))
    hyp = make_hypotheses(2, np.array(prev).reshape(2, 2), cfg, out_shape=(4, 4))
    assert hyp.shape == (num, 4, 4)
    assert hyp.min() >= 20.0 - 1e-9 and hyp.max() <= 50.0 + 1e-9
    assert np.all(np.diff(hyp, axis=0) > 0)


def test_camera_invariants():
    K = np.diag([10.0, 10.0, 1.0])
    with pytest.raises(CameraError):
        Camera(K, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 1.0, 2.0)
    with pytest.raises(CameraError):
        Camera(K, 1.01 * np.eye(3), np.zeros(3), 1.0, 2.0)
    with pytest.raises(CameraError):
        Camera(np.diag([-10.0, 10.0, 1.0]), np.eye(3), np.zeros(3), 1.0, 2.0)
    bad = K.copy()
    bad[1, 0] = 1.0
    with pytest.raises(CameraError):
        Camera(bad, np.eye(3), np.zeros(3), 1.0, 2.0)
    with pytest.raises(CameraError):
        Camera(K, np.eye(3), np.zeros(3), 3.0, 2.0)


def test_camera_file_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    for k in range(5):
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        q *= np.sign(np.linalg.det(q))
        K = np.array([[rng.uniform(50, 500), 0.0, rng.uniform(10, 300)],
                      [0.0, rng.uniform(50, 500), rng.uniform(10, 300)], [0.0, 0.0, 1.0]])
        cam = Camera(K, q, rng.normal(size=3) * 10, 425.0 + k, 935.0, 192)
        write_camera(tmp_path / "c.txt", cam)
        back = read_camera(tmp_path / "c.txt")
        for a, b in ((cam.K, back.K), (cam.R, back.R), (cam.t, back.t)):
            np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(a.astype(np.float32), b.astype(np.float32))
        assert (back.depth_min, back.depth_max, back.depth_num, back.depth_interval) == \
            (cam.depth_min, cam.depth_max, cam.depth_num, cam.depth_interval)


def test_camera_file_layout(tmp_path):
    cam = make_cam()
    write_camera(tmp_path / "c.txt", cam)
    lines = (tmp_path / "c.txt").read_text().splitlines()
    assert lines[0] == "extrinsic" and lines[5] == "" and lines[6] == "intrinsic"
    assert lines[10] == "" and len(lines[11].split()) == 4
    assert all(len(lines[i].split()) == 4 for i in range(1, 5))


def test_camera_file_two_value_depth_line(tmp_path):
    text = ("extrinsic\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n\nintrinsic\n"
            "100 0 50\n0 100 40\n0 0 1\n\n425.0 2.5\n")
    (tmp_path / "c.txt").write_text(text)
    cam = read_camera(tmp_path / "c.txt")
    assert cam.depth_min == 425.0 and cam.depth_interval == 2.5
    assert cam.depth_max == pytest.approx(425.0 + 2.5 * 191)


def test_malformed_camera_file(tmp_path):
    (tmp_path / "c.txt").write_text("extrinsic\n1 0 0\n")
    with pytest.raises(CameraError):
        read_camera(tmp_path / "c.txt")
