"""Training losses: L1 on expected depth, contrastive matching loss over the
depth sweep, and the confidence-weighted focal loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .matching import CostVolumeBundle
from .numerics import Tensor

__all__ = [
    "DegenerateBatchError",
    "LossConfig",
    "StageTarget",
    "LossReport",
    "ABLATION_ROWS",
    "downsample_depth",
    "make_targets",
    "similarity",
    "cml",
    "wfl",
    "wfl_weight",
    "l1_loss",
    "total_loss",
]

PROB_EPS = 1e-12


class DegenerateBatchError(ValueError):
    """No pixel is eligible for supervision."""


# Table-4 style rows: which terms are active.
ABLATION_ROWS = {
    "l1": ("a", (True, False, False)),
    "cml": ("b", (True, True, False)),
    "wfl": ("c", (False, False, True)),
    "cml+wfl": ("d", (False, True, True)),
}


@dataclass
class LossConfig:
    l1_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    cml_weights: tuple[float, ...] = (0.1, 0.1, 0.1)
    wfl_weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    use_l1: bool = True
    use_cml: bool = True
    use_wfl: bool = True
    focal_gamma: float = 2.0
    stop_grad_weight: bool = True

    def __post_init__(self):
        for name in ("l1_weights", "cml_weights", "wfl_weights"):
            vals = tuple(float(x) for x in getattr(self, name))
            if any(v < 0 for v in vals):
                raise ValueError(f"{name} must be non-negative")
            setattr(self, name, vals)
        if not (self.use_l1 or self.use_cml or self.use_wfl):
            raise ValueError("at least one loss term must be enabled")
        if self.focal_gamma != 2.0:
            raise ValueError("only the squared focal modulation (gamma=2) is supported")

    @classmethod
    def for_losses(cls, spec: str, **overrides) -> "LossConfig":
        """Config for one ablation row: 'l1', 'cml', 'wfl' or 'cml+wfl'."""
        if spec not in ABLATION_ROWS:
            raise ValueError(f"unknown loss selection {spec!r}; pick one of {sorted(ABLATION_ROWS)}")
        use_l1, use_cml, use_wfl = ABLATION_ROWS[spec][1]
        return cls(use_l1=use_l1, use_cml=use_cml, use_wfl=use_wfl, **overrides)


@dataclass
class StageTarget:
    gt_depth: np.ndarray     # [H,W]
    valid: np.ndarray        # [H,W] bool, finite and inside the depth range
    nearest: np.ndarray      # [H,W] index of the hypothesis closest to gt

    def onehot(self, depth_count: int) -> np.ndarray:
        return (np.arange(depth_count)[:, None, None] == self.nearest[None]).astype(np.float64)


@dataclass
class LossReport:
    total: Tensor
    l1: float = 0.0
    cml: float = 0.0
    wfl: float = 0.0
    per_stage: dict[str, list[float]] = field(default_factory=dict)

    def row(self, step: int) -> list:
        return [step, self.l1, self.cml, self.wfl, float(self.total.data)]


def downsample_depth(depth: np.ndarray, factor: int) -> np.ndarray:
    """2x2 mean pooling applied log2(factor) times; blocks touching an
    invalid (non-positive or non-finite) pixel become 0."""
    out = np.asarray(depth, dtype=np.float64)
    while factor > 1:
        h, w = out.shape
        blocks = out[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2)
        ok = np.all(np.isfinite(blocks) & (blocks > 0), axis=(1, 3))
        out = np.where(ok, np.nan_to_num(blocks).mean(axis=(1, 3)), 0.0)
        factor //= 2
    return out


def make_targets(gt_depth: np.ndarray, bundles: Sequence[CostVolumeBundle]) -> list[StageTarget]:
    """Per-stage ground truth, valid mask and nearest-hypothesis index."""
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    targets = []
    for b in bundles:
        h, w = b.shape
        factor = gt_depth.shape[0] // h
        if gt_depth.shape != (h * factor, w * factor):
            raise ValueError(f"ground truth {gt_depth.shape} does not tile stage shape {(h, w)}")
        gt = downsample_depth(gt_depth, factor)
        cam = b.camera
        valid = np.isfinite(gt) & (gt >= cam.depth_min) & (gt <= cam.depth_max)
        nearest = np.argmin(np.abs(b.hypotheses - np.where(valid, gt, 0.0)[None]), axis=0)
        targets.append(StageTarget(gt, valid, nearest))
    return targets


def _eligible(bundle: CostVolumeBundle, target: StageTarget) -> np.ndarray:
    """Valid ground truth with at least one source view valid at the target depth."""
    n_src = np.take_along_axis(bundle.source_count, target.nearest[None], 0)[0]
    return target.valid & (n_src > 0)


def similarity(a, b):
    """Inner product of two feature vectors."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"feature vectors differ in length: {a.shape} vs {b.shape}")
    return float(a @ b)


def cml(bundle: CostVolumeBundle, target: StageTarget, mask: np.ndarray | None = None) -> Tensor:
    """Contrastive matching loss, summed over source views, averaged over pixels.

    For each source view the positive is the warped feature at the
    ground-truth hypothesis, the negatives are the other D-1 warped features;
    the loss is ``-(sim(pos, f) - mean_k sim(neg_k, f))``. Views whose warp is
    invalid at the ground-truth hypothesis are skipped.
    """
    d = bundle.hypotheses.shape[0]
    if d < 2:
        raise ValueError("contrastive matching needs at least two hypotheses")
    onehot = target.onehot(d)
    pixel_ok = target.valid if mask is None else target.valid & mask
    f = bundle.ref_features
    c, h, w = f.shape
    f_vol = f.reshape(c, 1, h, w)
    per_pixel = None
    any_view = np.zeros((h, w), dtype=bool)
    for vol, vmask in zip(bundle.warped, bundle.masks):
        view_ok = pixel_ok & np.take_along_axis(vmask, target.nearest[None], 0)[0]
        if not view_ok.any():
            continue
        any_view |= view_ok
        sims = nx.tsum(vol * f_vol, axis=0)
        pos = nx.tsum(sims * onehot, axis=0)
        neg_mean = (nx.tsum(sims, axis=0) - pos) / float(d - 1)
        term = (neg_mean - pos) * view_ok.astype(np.float64)
        per_pixel = term if per_pixel is None else per_pixel + term
    count = int(any_view.sum())
    if count == 0:
        raise DegenerateBatchError("no valid pixel for the contrastive matching loss")
    return nx.tsum(per_pixel) / float(count)


def wfl_weight(bundles: Sequence[CostVolumeBundle], shape: tuple[int, int],
               stop_grad: bool = True, num_stages: int = 3) -> Tensor:
    """Product of every stage's confidence, bilinearly resized to ``shape``."""
    if len(bundles) < num_stages:
        raise ValueError(f"weighted focal loss needs confidences from {num_stages} stages, "
                         f"got {len(bundles)}")
    weight = None
    for b in bundles[:num_stages]:
        conf = b.confidence.detach() if stop_grad else b.confidence
        if conf.shape != tuple(shape):
            conf = nx.resize_bilinear(conf, shape)
        weight = conf if weight is None else weight * conf
    return weight


def focal_terms(prob: Tensor, target: StageTarget) -> Tensor:
    """Per-pixel ``(1 - P)^2 * -log P`` at the ground-truth hypothesis."""
    p_true = nx.tsum(prob * target.onehot(prob.shape[0]), axis=0)
    p_true = nx.clamp(p_true, PROB_EPS, 1.0)
    return nx.pow2(1.0 - p_true) * nx.neg(nx.log(p_true))


def wfl(bundles: Sequence[CostVolumeBundle], stage: int, target: StageTarget,
        config: LossConfig | None = None, weight: Tensor | None = None) -> Tensor:
    """Confidence-weighted focal loss at one stage (1-based), mean over valid pixels."""
    config = config or LossConfig()
    bundle = bundles[stage - 1]
    if weight is None:
        weight = wfl_weight(bundles, bundle.shape, config.stop_grad_weight)
    ok = _eligible(bundle, target)
    count = int(ok.sum())
    if count == 0:
        raise DegenerateBatchError("no valid pixel for the weighted focal loss")
    terms = focal_terms(bundle.prob, target) * weight
    return nx.tsum(terms * ok.astype(np.float64)) / float(count)


def l1_loss(depth, gt_depth: np.ndarray, valid: np.ndarray) -> Tensor:
    valid = np.asarray(valid, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        raise DegenerateBatchError("no valid pixel for the L1 loss")
    gt = np.where(valid, gt_depth, 0.0)
    err = nx.absolute(nx.as_tensor(depth) - gt)
    return nx.tsum(err * valid.astype(np.float64)) / float(count)


def total_loss(bundles: Sequence[CostVolumeBundle], targets: Sequence[StageTarget],
               config: LossConfig | None = None,
               focal_weights: Sequence[Tensor] | None = None) -> LossReport:
    """Weighted per-stage sum of the enabled terms.

    Disabled terms are still evaluated for logging but do not enter the
    objective. Logged term values are unweighted sums over stages.
    ``focal_weights`` optionally fixes the per-stage focal weight maps
    (gradient checks of the stop-gradient path freeze them this way).
    """
    config = config or LossConfig()
    parts: list[Tensor] = []
    per_stage = {"l1": [], "cml": [], "wfl": []}
    for s, (b, tgt) in enumerate(zip(bundles, targets), start=1):
        ok = _eligible(b, tgt)
        l1 = l1_loss(b.depth, tgt.gt_depth, ok)
        c = cml(b, tgt)
        f = wfl(bundles, s, tgt, config,
                None if focal_weights is None else nx.as_tensor(focal_weights[s - 1]))
        per_stage["l1"].append(float(l1.data))
        per_stage["cml"].append(float(c.data))
        per_stage["wfl"].append(float(f.data))
        for on, weights, term in ((config.use_l1, config.l1_weights, l1),
                                  (config.use_cml, config.cml_weights, c),
                                  (config.use_wfl, config.wfl_weights, f)):
            if on and weights[s - 1] != 0.0:
                parts.append(term * weights[s - 1])
    total = parts[0] if parts else nx.Tensor(0.0)
    for p in parts[1:]:
        total = total + p
    return LossReport(total, sum(per_stage["l1"]), sum(per_stage["cml"]),
                      sum(per_stage["wfl"]), per_stage)
