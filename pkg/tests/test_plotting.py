import numpy as np
from PIL import Image

from contrastmvs.plotting import (colorize_depth, save_ablation_chart, save_depth_png,
                                  save_loss_curves)
from contrastmvs.scenes import read_png


def is_png(path):
    with Image.open(path) as im:
        return im.format == "PNG" and im.size[0] > 0


def test_loss_curves(tmp_path):
    rows = [[k, 1.0 / (k + 1), -k * 0.1, 0.5, 1.0] for k in range(40)]
    assert is_png(save_loss_curves(tmp_path / "a.png", rows))
    assert is_png(save_loss_curves(tmp_path / "b.png", rows[:1]))


def test_ablation_chart(tmp_path):
    table = [{"row": c, "losses": s, "epe": 1.0 + i, "e1": 10.0, "e3": 2.0}
             for i, (c, s) in enumerate(zip("abcd", ["l1", "cml", "wfl", "cml+wfl"]))]
    assert is_png(save_ablation_chart(tmp_path / "t.png", table))


def test_colorize_depth():
    d = np.array([[0.0, 20.0, 35.0, 50.0, 80.0]])
    rgb = colorize_depth(d, 20.0, 50.0)
    assert rgb.shape == (3, 1, 5)
    assert np.all(rgb[:, 0, 0] == 0.0)
    np.testing.assert_array_equal(rgb[:, 0, 3], rgb[:, 0, 4])  # clipped above the range
    assert not np.array_equal(rgb[:, 0, 1], rgb[:, 0, 3])


def test_depth_png_matches_colormap(tmp_path):
    d = np.linspace(20.0, 50.0, 12).reshape(3, 4)
    save_depth_png(tmp_path / "d.png", d, 20.0, 50.0)
    back = read_png(tmp_path / "d.png")
    np.testing.assert_allclose(back, colorize_depth(d, 20.0, 50.0), atol=0.5 / 255 + 1e-12)
