"""Depth-map fusion into point clouds, point-cloud and depth-map metrics,
and the ASCII PLY / metrics CSV formats."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Camera

__all__ = [
    "PointCloud",
    "DepthMetrics",
    "FusionThresholds",
    "filter_and_fuse",
    "nearest_distances",
    "brute_force_distances",
    "pointcloud_metrics",
    "depth_metrics",
    "write_ply",
    "read_ply",
    "write_metrics_csv",
]


@dataclass
class PointCloud:
    points: np.ndarray                 # [N,3]
    colors: np.ndarray | None = None   # [N,3] uint8

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colour count does not match point count")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DepthMetrics:
    epe: float
    e1: float
    e3: float
    count: int = 0

    def as_dict(self) -> dict[str, float]:
        return {"epe": self.epe, "e1": self.e1, "e3": self.e3}


@dataclass
class FusionThresholds:
    conf: float = 0.3
    reproj_px: float = 1.0
    rel_depth: float = 0.01
    min_views: int = 2


def _sample_nearest_valid(depth: np.ndarray, u: np.ndarray, v: np.ndarray):
    """Bilinear depth lookup; invalid if any of the 4 neighbours is invalid."""
    h, w = depth.shape
    inside = np.isfinite(u) & np.isfinite(v) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uu = np.where(inside, u, 0.0)
    vv = np.where(inside, v, 0.0)
    x0 = np.minimum(np.floor(uu).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(vv).astype(np.int64), h - 2)
    fx, fy = uu - x0, vv - y0
    d00, d01 = depth[y0, x0], depth[y0, x0 + 1]
    d10, d11 = depth[y0 + 1, x0], depth[y0 + 1, x0 + 1]
    ok = inside & (d00 > 0) & (d01 > 0) & (d10 > 0) & (d11 > 0)
    val = (d00 * (1 - fx) * (1 - fy) + d01 * fx * (1 - fy)
           + d10 * (1 - fx) * fy + d11 * fx * fy)
    return np.where(ok, val, 0.0), ok


def filter_and_fuse(depths: Sequence[np.ndarray], confidences: Sequence[np.ndarray] | None,
                    cameras: Sequence[Camera], thresholds: FusionThresholds | None = None,
                    images: Sequence[np.ndarray] | None = None,
                    neighbors: Sequence[Sequence[int]] | None = None) -> PointCloud:
    """Keep pixels that are confident and geometrically consistent with at
    least ``min_views`` other views; each kept pixel becomes the mean of its
    own and the consistent views' unprojections."""
    th = thresholds or FusionThresholds()
    n = len(depths)
    if n < 2:
        raise ValueError("fusion needs at least two views")
    all_pts, all_cols = [], []
    for i in range(n):
        d_ref = np.asarray(depths[i], dtype=np.float64)
        h, w = d_ref.shape
        vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
        keep = d_ref > 0
        if confidences is not None:
            keep &= np.asarray(confidences[i]) >= th.conf
        pts_ref = cameras[i].unproject(uu, vv, d_ref)
        acc = np.where(keep[..., None], pts_ref, 0.0)
        votes = np.zeros((h, w), dtype=np.int64)
        others = neighbors[i] if neighbors is not None else [j for j in range(n) if j != i]
        for j in others:
            d_src = np.asarray(depths[j], dtype=np.float64)
            pu, pv, _ = cameras[j].project(pts_ref)
            d_at, ok = _sample_nearest_valid(d_src, pu, pv)
            ok &= keep
            pts_src = cameras[j].unproject(pu, pv, d_at)
            bu, bv, bz = cameras[i].project(pts_src)
            with np.errstate(invalid="ignore"):
                reproj = np.hypot(bu - uu, bv - vv)
                rel = np.abs(bz - d_ref) / np.where(d_ref > 0, d_ref, 1.0)
            consistent = ok & (reproj < th.reproj_px) & (rel < th.rel_depth)
            votes += consistent
            acc += np.where(consistent[..., None], pts_src, 0.0)
        final = keep & (votes >= th.min_views)
        fused = acc[final] / (1.0 + votes[final])[:, None]
        all_pts.append(fused)
        if images is not None:
            rgb = np.asarray(images[i]).transpose(1, 2, 0)[final]
            all_cols.append(np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8))
    pts = np.concatenate(all_pts) if all_pts else np.zeros((0, 3))
    cols = np.concatenate(all_cols) if images is not None else None
    return PointCloud(pts, cols)


def _pair_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a - b) ** 2).sum(axis=-1))


def nearest_distances(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Distance from each query point to its nearest ``ref`` point (k-d tree)."""
    _, idx = cKDTree(ref).query(query, k=1)
    return _pair_distances(query, ref[idx])


def brute_force_distances(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """O(n*m) reference implementation of ``nearest_distances``."""
    return np.array([_pair_distances(q[None], ref).min() for q in query])


def pointcloud_metrics(recon: PointCloud | np.ndarray, gt: PointCloud | np.ndarray,
                       max_dist: float | None = None, nn=nearest_distances
                       ) -> tuple[float, float, float]:
    """(accuracy, completeness, overall) with per-point distances capped at
    ``max_dist`` (default: a tenth of the ground-truth bounding-box diagonal)."""
    r = recon.points if isinstance(recon, PointCloud) else np.asarray(recon, dtype=np.float64)
    g = gt.points if isinstance(gt, PointCloud) else np.asarray(gt, dtype=np.float64)
    if len(r) == 0 or len(g) == 0:
        raise ValueError("point-cloud metrics need two non-empty clouds")
    if max_dist is None:
        max_dist = float(np.linalg.norm(g.max(axis=0) - g.min(axis=0))) / 10.0
    acc = float(np.minimum(nn(r, g), max_dist).mean())
    comp = float(np.minimum(nn(g, r), max_dist).mean())
    return acc, comp, (acc + comp) / 2.0


def depth_metrics(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None
                  ) -> DepthMetrics:
    """EPE and the percentage of pixels whose absolute error exceeds 1 and 3."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(gt) & (gt > 0)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("depth metrics need at least one valid pixel")
    err = np.abs(pred[valid] - gt[valid])
    return DepthMetrics(float(err.mean()), 100.0 * float((err > 1).mean()),
                        100.0 * float((err > 3).mean()), int(err.size))


def pooled_depth_metrics(parts: Sequence[DepthMetrics]) -> DepthMetrics:
    """Pixel-weighted combination of per-view metrics."""
    n = sum(p.count for p in parts)
    if n == 0:
        raise ValueError("no pixels to pool")
    return DepthMetrics(sum(p.epe * p.count for p in parts) / n,
                        sum(p.e1 * p.count for p in parts) / n,
                        sum(p.e3 * p.count for p in parts) / n, n)


# -------------------------------------------------------------------- files


def write_ply(path: str | Path, cloud: PointCloud) -> None:
    has_color = cloud.colors is not None
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        for k, p in enumerate(cloud.points):
            line = " ".join(repr(float(x)) for x in p)
            if has_color:
                c = cloud.colors[k]
                line += f" {c[0]} {c[1]} {c[2]}"
            fh.write(line + "\n")


def read_ply(path: str | Path) -> PointCloud:
    """Read an ASCII PLY with a vertex element (x, y, z and optional colour)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    count, props, end = None, [], None
    for k, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if tok[0] == "element" and tok[1] == "vertex":
            count = int(tok[2])
        elif tok[0] == "property" and count is not None:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            end = k
            break
    if count is None or end is None or props[:3] != ["x", "y", "z"]:
        raise ValueError(f"{path}: malformed PLY header")
    body = lines[end + 1:end + 1 + count]
    if len(body) != count:
        raise ValueError(f"{path}: expected {count} vertices, found {len(body)}")
    data = np.array([[float(x) for x in ln.split()] for ln in body]).reshape(count, len(props))
    colors = None
    if {"red", "green", "blue"} <= set(props):
        colors = data[:, [props.index(c) for c in ("red", "green", "blue")]].astype(np.uint8)
    return PointCloud(data[:, :3], colors)


def write_metrics_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in columns})
