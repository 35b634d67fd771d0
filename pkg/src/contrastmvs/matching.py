"""Cost-volume construction and the three-stage cascade forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .features import ModelConfig, extract
from .geometry import Camera, HypothesisConfig, make_hypotheses, warp_feature_map
from .numerics import Tensor

__all__ = [
    "CascadeConfig",
    "CostVolumeBundle",
    "InvariantError",
    "aggregate_variance",
    "regularize",
    "expected_depth",
    "confidence_map",
    "run_cascade",
]


class InvariantError(AssertionError):
    pass


@dataclass(frozen=True)
class CascadeConfig:
    num_depths: tuple[int, ...] = (16, 8, 4)
    interval_ratios: tuple[float, ...] = (1.0, 0.5, 0.25)
    model: ModelConfig = field(default_factory=ModelConfig)

    def hypothesis_config(self, cam: Camera) -> HypothesisConfig:
        return HypothesisConfig(cam.depth_min, cam.depth_max, tuple(self.num_depths),
                                tuple(self.interval_ratios))


@dataclass
class CostVolumeBundle:
    stage: int
    camera: Camera
    hypotheses: np.ndarray          # [D,H,W]
    ref_features: Tensor            # [C,H,W]
    warped: list[Tensor]            # per source view, [C,D,H,W]
    masks: list[np.ndarray]         # per source view, [D,H,W] bool
    variance: Tensor                # [C,D,H,W]
    source_count: np.ndarray        # [D,H,W] number of valid source views
    score: Tensor                   # [D,H,W]
    prob: Tensor                    # [D,H,W]
    depth: Tensor                   # [H,W]
    confidence: Tensor              # [H,W]

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def check(self, tol: float = 1e-9) -> None:
        """Raise InvariantError unless prob/depth/confidence are well formed."""
        for name in ("prob", "depth", "confidence"):
            if not np.all(np.isfinite(getattr(self, name).data)):
                raise InvariantError(f"stage {self.stage}: non-finite {name}")
        total = self.prob.data.sum(axis=0)
        if np.abs(total - 1.0).max() > tol:
            raise InvariantError(f"stage {self.stage}: prob not normalised "
                                 f"(max deviation {np.abs(total - 1.0).max():.3e})")
        lo = self.hypotheses.min(axis=0)
        hi = self.hypotheses.max(axis=0)
        slack = tol * max(1.0, float(np.abs(hi).max()))
        d = self.depth.data
        if np.any(d < lo - slack) or np.any(d > hi + slack):
            raise InvariantError(f"stage {self.stage}: expected depth outside hypothesis range")
        c = self.confidence.data
        if np.any(c < -tol) or np.any(c > 1 + tol):
            raise InvariantError(f"stage {self.stage}: confidence outside [0,1]")


def aggregate_variance(ref_features, warped: Sequence[Tensor],
                       masks: Sequence[np.ndarray]) -> tuple[Tensor, np.ndarray]:
    """Masked population variance across reference + source feature volumes.

    The reference feature [C,H,W] is broadcast over depth. Returns the
    variance [C,D,H,W] and the per-sample count of valid source views.
    """
    if not warped:
        raise ValueError("need at least one source view")
    ref = nx.as_tensor(ref_features)
    c, h, w = ref.shape
    ref_vol = ref.reshape(c, 1, h, w)
    count = np.zeros(masks[0].shape, dtype=np.int64)
    total = ref_vol
    total_sq = nx.pow2(ref_vol)
    for vol, mask in zip(warped, masks):
        m = mask.astype(np.float64)
        total = total + vol * m
        total_sq = total_sq + nx.pow2(vol) * m
        count += mask
    n = (1.0 + count).astype(np.float64)
    avg = total / n
    var = total_sq / n - nx.pow2(avg)
    return var, count


def regularize(variance, params, stage: int) -> Tensor:
    """Two 3x3x3 convs with a relu between, a 1x1x1 projection, then negation."""
    p = {k: nx.as_tensor(v) for k, v in params.items()}
    pre = f"reg{stage}."
    x = nx.relu(nx.conv3d(variance, p[pre + "conv1.w"], p[pre + "conv1.b"]))
    x = nx.conv3d(x, p[pre + "conv2.w"], p[pre + "conv2.b"])
    cost = nx.conv3d(x, p[pre + "proj.w"], p[pre + "proj.b"])
    d, h, w = cost.shape[1:]
    return -cost.reshape(d, h, w)


def expected_depth(prob, hypotheses: np.ndarray) -> Tensor:
    hyp = np.asarray(hypotheses, dtype=np.float64)
    if hyp.ndim == 1:
        hyp = hyp[:, None, None]
    return nx.tsum(nx.as_tensor(prob) * hyp, axis=0)


def confidence_window(prob: np.ndarray, width: int = 4) -> np.ndarray:
    """Indicator [D,H,W] of the ``width`` hypotheses nearest each pixel's argmax."""
    d = prob.shape[0]
    idx = np.argmax(prob, axis=0)
    nx.record_branch(idx)
    if d <= width:
        return np.ones(prob.shape, dtype=bool)
    start = np.clip(idx - (width - 1) // 2, 0, d - width)
    k = np.arange(d).reshape((d,) + (1,) * (prob.ndim - 1))
    return (k >= start) & (k < start + width)


def confidence_map(prob) -> Tensor:
    """Probability mass in the 4-hypothesis window around the argmax."""
    prob = nx.as_tensor(prob)
    window = confidence_window(prob.data)
    return nx.tsum(prob * window.astype(np.float64), axis=0)


def run_cascade(images: Sequence, cameras: Sequence[Camera], params,
                config: CascadeConfig | None = None,
                hypotheses: Sequence[np.ndarray] | None = None,
                check: bool = True) -> list[CostVolumeBundle]:
    """Coarse-to-fine forward pass for one reference view (``images[0]``).

    ``hypotheses`` optionally pins the per-stage sweeps (used by gradient
    checks so the sweep does not move with the parameters).
    """
    config = config or CascadeConfig()
    if len(images) < 2 or len(images) != len(cameras):
        raise ValueError("need a reference and at least one source view, one camera each")
    nstage = config.model.num_stages
    pyramids = [extract(img, params) for img in images]
    hcfg = config.hypothesis_config(cameras[0])
    bundles: list[CostVolumeBundle] = []
    prev_depth = None
    for s in range(1, nstage + 1):
        factor = 0.5 ** (nstage - s)
        cams = [c.scaled(factor) for c in cameras]
        ref_feat = pyramids[0][s - 1]
        _, h, w = ref_feat.shape
        if hypotheses is not None:
            hyp = np.asarray(hypotheses[s - 1], dtype=np.float64)
        else:
            hyp = make_hypotheses(s, prev_depth, hcfg, out_shape=(h, w))
        if hyp.ndim == 1:
            hyp = np.broadcast_to(hyp[:, None, None], (hyp.size, h, w)).copy()
        warped, masks = [], []
        for pyr, cam in zip(pyramids[1:], cams[1:]):
            vol, mask = warp_feature_map(pyr[s - 1], hyp, cams[0], cam)
            warped.append(vol)
            masks.append(mask)
        variance, count = aggregate_variance(ref_feat, warped, masks)
        score = regularize(variance, params, s)
        prob = nx.softmax(score, axis=0)
        depth = expected_depth(prob, hyp)
        conf = confidence_map(prob)
        bundle = CostVolumeBundle(s, cams[0], hyp, ref_feat, warped, masks, variance, count,
                                  score, prob, depth, conf)
        if check:
            bundle.check()
        bundles.append(bundle)
        prev_depth = depth.data
    return bundles
