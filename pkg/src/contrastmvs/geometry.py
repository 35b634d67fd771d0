"""Pinhole cameras, depth hypotheses and plane-sweep warping.

Extrinsics are world-to-camera (``x_cam = R @ x_world + t``). Pixel
coordinates put integer values at pixel centres.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Tensor, bilinear_sample, bilinear_matrix

__all__ = [
    "Camera",
    "CameraError",
    "HypothesisConfig",
    "relative_pose",
    "warp_pixel",
    "warp_coords",
    "warp_feature_map",
    "make_hypotheses",
    "upsample_depth",
    "read_camera",
    "write_camera",
]


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    depth_min: float
    depth_max: float
    depth_num: int = 16
    depth_interval: float | None = None

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.depth_min = float(self.depth_min)
        self.depth_max = float(self.depth_max)
        self.depth_num = int(self.depth_num)
        if self.depth_interval is None:
            self.depth_interval = (self.depth_max - self.depth_min) / max(self.depth_num - 1, 1)
        self.depth_interval = float(self.depth_interval)
        self.validate()

    def validate(self) -> None:
        K, R = self.K, self.R
        if not (np.all(np.isfinite(K)) and np.all(np.isfinite(R)) and np.all(np.isfinite(self.t))):
            raise CameraError("camera contains non-finite values")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise CameraError("rotation is not orthonormal with det +1")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0:
            raise CameraError("intrinsic matrix is not upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] == 0:
            raise CameraError("intrinsic focal entries must be positive")
        if not self.depth_min < self.depth_max:
            raise CameraError(f"depth_min {self.depth_min} >= depth_max {self.depth_max}")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def scaled(self, factor: float) -> "Camera":
        """Camera for an image resampled by ``factor`` (0.5 = half resolution)."""
        K = self.K.copy()
        K[0, 0] *= factor
        K[1, 1] *= factor
        K[0, 1] *= factor
        K[0, 2] = (K[0, 2] + 0.5) * factor - 0.5
        K[1, 2] = (K[1, 2] + 0.5) * factor - 0.5
        return Camera(K, self.R, self.t, self.depth_min, self.depth_max,
                      self.depth_num, self.depth_interval)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points [...,3] -> (u, v, z)."""
        cam = points @ self.R.T + self.t
        q = cam @ self.K.T
        z = q[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            return q[..., 0] / z, q[..., 1] / z, cam[..., 2]

    def unproject(self, u: np.ndarray, v: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coordinates and camera depth -> world points [...,3]."""
        pix = np.stack([u, v, np.ones_like(u)], axis=-1) @ np.linalg.inv(self.K).T
        cam = pix * np.asarray(depth)[..., None]
        return (cam - self.t) @ self.R


def relative_pose(ref: Camera, src: Camera) -> tuple[np.ndarray, np.ndarray]:
    """(R, t) taking reference-camera coordinates to source-camera coordinates."""
    R = src.R @ ref.R.T
    return R, src.t - R @ ref.t


def warp_pixel(p, d: float, ref_cam: Camera, src_cam: Camera,
               image_size: tuple[int, int] | None = None) -> tuple[np.ndarray, bool]:
    """Map reference pixel ``p`` at depth ``d`` into the source image.

    Computes ``K_src (R (K_ref^-1 [p,1] d) + t)`` followed by the perspective
    divide. The flag is false when the source depth is not positive or, if
    ``image_size=(H, W)`` is given, when the point falls outside the image.
    """
    if not d > 0:
        raise ValueError(f"depth must be positive, got {d}")
    R, t = relative_pose(ref_cam, src_cam)
    ray = np.linalg.solve(ref_cam.K, np.array([p[0], p[1], 1.0]))
    x_src = R @ (ray * d) + t
    q = src_cam.K @ x_src
    if q[2] <= 0:
        return np.array([np.nan, np.nan]), False
    uv = q[:2] / q[2]
    valid = True
    if image_size is not None:
        h, w = image_size
        valid = bool(0 <= uv[0] <= w - 1 and 0 <= uv[1] <= h - 1)
    return uv, valid


def warp_coords(depths: np.ndarray, ref_cam: Camera, src_cam: Camera,
                height: int, width: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised ``warp_pixel`` over a sweep.

    ``depths`` is [D] (fronto-parallel planes) or [D,H,W] (per-pixel). Returns
    source ``(u, v)`` and the ``z > 0`` flag, each [D,H,W].
    """
    depths = np.asarray(depths, dtype=np.float64)
    if depths.ndim == 1:
        depths = depths[:, None, None]
    R, t = relative_pose(ref_cam, src_cam)
    vv, uu = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64),
                         indexing="ij")
    rays = np.linalg.solve(ref_cam.K, np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)]))
    # x_src = d * (R @ ray) + t, then project
    rot = (src_cam.K @ R @ rays).reshape(3, height, width)
    trans = src_cam.K @ t
    q = depths[None] * rot[:, None] + trans[:, None, None, None]
    z = np.broadcast_to(q[2], (depths.shape[0], height, width))
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, q[0] / z, np.nan)
        v = np.where(front, q[1] / z, np.nan)
    return u, v, front


def warp_feature_map(src_features, hypotheses: np.ndarray, ref_cam: Camera,
                     src_cam: Camera) -> tuple[Tensor, np.ndarray]:
    """Warp ``src_features[C,H,W]`` onto the reference sweep.

    Returns the feature volume [C,D,H,W] (zero where invalid) and the
    validity mask [D,H,W]. Differentiable with respect to the features only.
    """
    _, h, w = src_features.shape
    u, v, front = warp_coords(hypotheses, ref_cam, src_cam, h, w)
    return bilinear_sample(src_features, u, v, front)


@dataclass
class HypothesisConfig:
    depth_min: float
    depth_max: float
    num_depths: tuple[int, ...] = (16, 8, 4)
    interval_ratios: tuple[float, ...] = (1.0, 0.5, 0.25)
    intervals: tuple[float, ...] | None = field(default=None)

    @property
    def base_interval(self) -> float:
        return (self.depth_max - self.depth_min) / (self.num_depths[0] - 1)

    def interval(self, stage: int) -> float:
        if self.intervals is not None:
            return float(self.intervals[stage - 1])
        return self.base_interval * self.interval_ratios[stage - 1]


def upsample_depth(depth: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a plain depth map (no gradient)."""
    depth = np.asarray(depth, dtype=np.float64)
    ay = bilinear_matrix(depth.shape[0], shape[0])
    ax = bilinear_matrix(depth.shape[1], shape[1])
    return ay @ depth @ ax.T


def make_hypotheses(stage: int, prev_depth: np.ndarray | float | None, config: HypothesisConfig,
                    out_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Candidate depths for one cascade stage.

    Stage 1 returns the [D] uniform sweep over the depth range. Later stages
    return [D,H,W] windows centred on ``prev_depth`` (resized to
    ``out_shape`` when given), shifted to stay inside the depth range.
    """
    num = config.num_depths[stage - 1]
    lo, hi = config.depth_min, config.depth_max
    if stage == 1:
        return np.linspace(lo, hi, num)
    if prev_depth is None:
        raise ValueError(f"stage {stage} needs the previous stage's depth map")
    prev = np.asarray(prev_depth, dtype=np.float64)
    if prev.ndim == 0:
        prev = prev.reshape(1, 1)
    if out_shape is not None and prev.shape != tuple(out_shape):
        prev = upsample_depth(prev, out_shape)
    step = config.interval(stage)
    span = (num - 1) * step
    if span >= hi - lo:
        return np.broadcast_to(np.linspace(lo, hi, num)[:, None, None],
                               (num,) + prev.shape).copy()
    start = np.clip(prev - 0.5 * span, lo, hi - span)
    return start[None] + step * np.arange(num, dtype=np.float64)[:, None, None]


# ------------------------------------------------------------------- file IO


def _fmt(x: float) -> str:
    return repr(float(x))


def write_camera(path: str | Path, cam: Camera) -> None:
    ext = np.eye(4)
    ext[:3, :3] = cam.R
    ext[:3, 3] = cam.t
    lines = ["extrinsic"]
    lines += [" ".join(_fmt(x) for x in row) for row in ext]
    lines += ["", "intrinsic"]
    lines += [" ".join(_fmt(x) for x in row) for row in cam.K]
    lines += ["", " ".join([_fmt(cam.depth_min), _fmt(cam.depth_interval),
                            str(cam.depth_num), _fmt(cam.depth_max)])]
    Path(path).write_text("\n".join(lines) + "\n")


def read_camera(path: str | Path) -> Camera:
    """Parse an MVSNet-layout camera file."""
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    try:
        i = lines.index("extrinsic")
        ext = np.array([[float(x) for x in lines[i + k].split()] for k in range(1, 5)])
        j = lines.index("intrinsic")
        K = np.array([[float(x) for x in lines[j + k].split()] for k in range(1, 4)])
        rest = [ln for ln in lines[j + 4:] if ln]
        dvals = rest[0].split()
    except (ValueError, IndexError) as exc:
        raise CameraError(f"{path}: malformed camera file") from exc
    if ext.shape != (4, 4) or K.shape != (3, 3) or len(dvals) < 2:
        raise CameraError(f"{path}: malformed camera file")
    dmin, dint = float(dvals[0]), float(dvals[1])
    if len(dvals) >= 4:
        num, dmax = int(float(dvals[2])), float(dvals[3])
    else:
        num = int(float(dvals[2])) if len(dvals) == 3 else 192
        dmax = dmin + dint * (num - 1)
    try:
        return Camera(K, ext[:3, :3], ext[:3, 3], dmin, dmax, num, dint)
    except CameraError as exc:
        raise CameraError(f"{path}: {exc}") from exc
