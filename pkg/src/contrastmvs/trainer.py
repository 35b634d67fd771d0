"""Deterministic per-sample training loop, Adam, step-decay schedule and
depth/point-cloud evaluation."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .features import ModelParameters, init_params, save_params
from .fusion_eval import (DepthMetrics, FusionThresholds, PointCloud, depth_metrics,
                          filter_and_fuse, pointcloud_metrics, pooled_depth_metrics)
from .losses import ABLATION_ROWS, LossConfig, LossReport, make_targets, total_loss
from .matching import CascadeConfig, CostVolumeBundle, run_cascade
from .numerics import no_grad
from .scenes import Scene, surface_samples

__all__ = [
    "TrainConfig",
    "TrainingDiverged",
    "Adam",
    "lr_at",
    "samples",
    "train",
    "predict_view",
    "predict_scene",
    "evaluate",
    "ablation",
    "LOG_COLUMNS",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l1", "cml", "wfl", "total")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 16
    lr: float = 1e-3
    milestones: tuple[int, ...] = (8, 10, 12)
    decay: float = 0.5
    seed: int = 0
    num_views: int = 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.num_views < 2:
            raise ValueError("training needs at least two views per sample")


def lr_at(epoch: int, base: float, milestones: Sequence[int], factor: float) -> float:
    """Learning rate for a 0-based epoch index: one decay per milestone passed."""
    return base * factor ** sum(1 for m in milestones if epoch >= m)


class Adam:
    def __init__(self, params: ModelParameters, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: ModelParameters, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            params[k] = params[k] - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def samples(scenes: Sequence[Scene], num_views: int) -> list[tuple[int, list[int]]]:
    """Every view of every scene as a reference with its nearest neighbours."""
    out = []
    for si, scene in enumerate(scenes):
        for ref in range(len(scene)):
            out.append((si, scene.view_set(ref, num_views)))
    return out


def forward_sample(params, scene: Scene, views: list[int], config: CascadeConfig,
                   hypotheses=None) -> list[CostVolumeBundle]:
    return run_cascade([scene.images[v] for v in views], [scene.cameras[v] for v in views],
                       params, config, hypotheses=hypotheses)


def sample_loss(params, scene: Scene, views: list[int], cascade: CascadeConfig,
                loss: LossConfig, hypotheses=None) -> tuple[LossReport, list[CostVolumeBundle]]:
    bundles = forward_sample(params, scene, views, cascade, hypotheses)
    targets = make_targets(scene.depths[views[0]], bundles)
    return total_loss(bundles, targets, loss), bundles


def train(scenes: Sequence[Scene], config: TrainConfig, out_dir: str | Path | None = None,
          params: ModelParameters | None = None,
          on_step: Callable[[int, LossReport], None] | None = None
          ) -> tuple[ModelParameters, list[list]]:
    """Train from ``init_params(config.seed)`` (or ``params``).

    Returns the final parameters and the loss log rows (step, l1, cml, wfl,
    total). With ``out_dir`` a checkpoint is written after every epoch and
    the log to ``train_log.csv``.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    params = (params.copy() if params is not None
              else init_params(config.seed, config.cascade.model))
    opt = Adam(params, config.beta1, config.beta2, config.eps)
    pool = samples(scenes, config.num_views)
    rng = np.random.default_rng(config.seed)
    rows: list[list] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    step = 0
    try:
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config.lr, config.milestones, config.decay)
            t0 = time.perf_counter()
            for k in rng.permutation(len(pool)):
                si, views = pool[k]
                tensors = params.tensors(requires_grad=True)
                report, _ = sample_loss(tensors, scenes[si], views, config.cascade, config.loss)
                total = float(report.total.data)
                if not np.isfinite(total):
                    raise TrainingDiverged(step, f"non-finite loss {total}")
                report.total.backward()
                grads = {}
                for name, t in tensors.items():
                    g = t.grad if t.grad is not None else np.zeros_like(t.data)
                    if not np.all(np.isfinite(g)):
                        raise TrainingDiverged(step, f"non-finite gradient for {name}")
                    grads[name] = g
                opt.step(params, grads, lr)
                rows.append(report.row(step))
                if on_step is not None:
                    on_step(step, report)
                step += 1
            recent = [r[-1] for r in rows[-len(pool):]]
            log.info("epoch %d lr %.2e mean loss %.4f (%.1fs)", epoch, lr, float(np.mean(recent)),
                     time.perf_counter() - t0)
            if out is not None:
                save_params(out / f"model_{epoch:03d}.ckpt", params)
    finally:
        if out is not None:
            write_log(out / "train_log.csv", rows)
    if out is not None:
        save_params(out / "model.ckpt", params)
    return params, rows


def write_log(path: str | Path, rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


def predict_view(params, scene: Scene, ref: int, config: CascadeConfig, num_views: int
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Stage-3 depth and confidence for one reference view."""
    with no_grad():
        bundles = forward_sample(params, scene, scene.view_set(ref, num_views), config)
    return bundles[-1].depth.data.copy(), bundles[-1].confidence.data.copy()


def predict_scene(params, scene: Scene, config: CascadeConfig, num_views: int, threads: int = 1
                  ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    def one(i):
        return predict_view(params, scene, i, config, num_views)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, range(len(scene))))
    else:
        results = [one(i) for i in range(len(scene))]
    return [r[0] for r in results], [r[1] for r in results]


def gt_valid(scene: Scene, i: int) -> np.ndarray:
    cam = scene.cameras[i]
    d = scene.depths[i]
    return np.isfinite(d) & (d >= cam.depth_min) & (d <= cam.depth_max)


def evaluate(params, scenes: Sequence[Scene], config: TrainConfig, metric: str = "depth",
             threads: int = 1, thresholds: FusionThresholds | None = None):
    """Compare stage-3 predictions with ground truth.

    ``metric='depth'`` returns (pooled DepthMetrics, per-scene list);
    ``metric='cloud'`` returns (mean (acc, comp, overall), per-scene list),
    comparing fused predictions with fused ground-truth depth maps.
    """
    per_scene = []
    for scene in scenes:
        depths, confs = predict_scene(params, scene, config.cascade, config.num_views, threads)
        if metric == "depth":
            parts = [depth_metrics(depths[i], scene.depths[i], gt_valid(scene, i))
                     for i in range(len(scene))]
            per_scene.append(pooled_depth_metrics(parts))
        elif metric == "cloud":
            recon = filter_and_fuse(depths, confs, scene.cameras, thresholds)
            if scene.spec is not None:
                gt = PointCloud(surface_samples(scene.spec, scene.cameras))
            else:
                gt = filter_and_fuse(scene.depths, None, scene.cameras)
            if len(recon) == 0:
                raise ValueError("fusion produced an empty point cloud")
            per_scene.append(pointcloud_metrics(recon, gt))
        else:
            raise ValueError(f"unknown metric kind {metric!r}")
    if metric == "depth":
        return pooled_depth_metrics(per_scene), per_scene
    return tuple(float(x) for x in np.mean(np.array(per_scene), axis=0)), per_scene


def ablation(train_scenes: Sequence[Scene], eval_scenes: Sequence[Scene], config: TrainConfig,
             rows: Sequence[str] = tuple(ABLATION_ROWS), threads: int = 1,
             on_row: Callable[[dict, list], None] | None = None) -> list[dict]:
    """Train one model per loss selection and report stage-3 depth metrics.

    Every row shares ``config`` except for which loss terms are active.
    Returns dicts with keys row, losses, epe, e1, e3, seconds.
    """
    table = []
    for spec in rows:
        letter = ABLATION_ROWS[spec][0]
        loss = LossConfig.for_losses(spec, l1_weights=config.loss.l1_weights,
                                     cml_weights=config.loss.cml_weights,
                                     wfl_weights=config.loss.wfl_weights,
                                     stop_grad_weight=config.loss.stop_grad_weight)
        cfg = replace(config, loss=loss)
        t0 = time.perf_counter()
        params, log_rows = train(train_scenes, cfg)
        pooled, _ = evaluate(params, eval_scenes, cfg, "depth", threads)
        entry = {"row": letter, "losses": spec, "epe": pooled.epe, "e1": pooled.e1,
                 "e3": pooled.e3, "seconds": time.perf_counter() - t0}
        log.info("row (%s) %s: epe %.4f e1 %.2f e3 %.2f", letter, spec, pooled.epe, pooled.e1,
                 pooled.e3)
        table.append(entry)
        if on_row is not None:
            on_row(entry, log_rows)
    return table
