"""Registry of finite-difference gradient checks, one entry per
differentiable operation plus the full training objective."""

from __future__ import annotations

import time
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from . import numerics as nx
from .features import ModelConfig, extract, init_params, soft_normalize
from .geometry import Camera, warp_feature_map
from .losses import LossConfig, cml, l1_loss, make_targets, total_loss, wfl, wfl_weight
from .matching import (CascadeConfig, aggregate_variance, confidence_map, expected_depth,
                       regularize, run_cascade)
from .numerics import no_grad

__all__ = ["CASES", "CaseResult", "run_case", "run_all", "DEFAULT_SEEDS", "TOLERANCE"]

TOLERANCE = 1e-4
DEFAULT_SEEDS = 20

# A case builder takes an rng and returns (f, inputs, max_coords).
Builder = Callable[[np.random.Generator], tuple[Callable, dict, "int | None"]]


@dataclass
class CaseResult:
    name: str
    worst: float
    seeds: int
    checked: int
    skipped: int
    seconds: float

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.worst <= tol and self.checked > 0


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _unary(op, positive=False):
    def build(rng):
        x = rng.uniform(0.5, 2.0, size=(3, 4)) if positive else _away_from_zero(rng, (3, 4))
        w = rng.normal(size=(3, 4))
        return (lambda a: nx.tsum(op(a) * w)), {"a": x}, None
    return build


def _binary(op, positive_b=False):
    def build(rng):
        a = rng.normal(size=(3, 4))
        b = rng.uniform(0.5, 2.0, size=(4,)) if positive_b else rng.normal(size=(4,))
        w = rng.normal(size=(3, 4))
        if positive_b:
            b = b * rng.choice([-1.0, 1.0], size=b.shape)
        return (lambda a, b: nx.tsum(op(a, b) * w)), {"a": a, "b": b}, None
    return build


def _reduce(kind):
    def build(rng):
        x = rng.normal(size=(3, 4, 5))
        if kind == "max":
            w = rng.normal(size=(3, 5))
            return (lambda a: nx.tsum(nx.max_with_argmax(a, 1)[0] * w)), {"a": x}, None
        w = rng.normal(size=(3, 5))
        return (lambda a: nx.tsum(nx.reduce(kind, a, 1) * w)), {"a": x}, None
    return build


def _softmax(rng):
    x = rng.normal(size=(5, 3, 2))
    w = rng.normal(size=x.shape)
    return (lambda a: nx.tsum(nx.softmax(a, axis=0) * w)), {"a": x}, None


def _take(rng):
    x = rng.normal(size=(4, 6))
    idx = (slice(None), [0, 2, 2, 5])
    w = rng.normal(size=(4, 4))
    return (lambda a: nx.tsum(nx.reshape(nx.take(a, idx), (2, 8)) * w.reshape(2, 8))), \
        {"a": x}, None


def _conv2d(stride):
    def build(rng):
        x = rng.normal(size=(2, 6, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        ho = (6 - 1) // stride + 1
        wo = (5 - 1) // stride + 1
        w = rng.normal(size=(3, ho, wo))
        return (lambda x, k, b: nx.tsum(nx.conv2d(x, k, b, stride=stride) * w)), \
            {"x": x, "k": k, "b": b}, None
    return build


def _conv3d(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    k = rng.normal(size=(2, 2, 3, 3, 3))
    b = rng.normal(size=2)
    w = rng.normal(size=(2, 3, 4, 4))
    return (lambda x, k, b: nx.tsum(nx.conv3d(x, k, b) * w)), {"x": x, "k": k, "b": b}, None


def _upsample(rng):
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(2, 6, 8))
    return (lambda a: nx.tsum(nx.upsample_nearest2(a) * w)), {"a": x}, None


def _resize(rng):
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(2, 7, 5))
    return (lambda a: nx.tsum(nx.resize_bilinear(a, (7, 5)) * w)), {"a": x}, None


def _bilinear(rng):
    x = rng.normal(size=(2, 5, 6))
    u = rng.uniform(-0.5, 5.5, size=(3, 4))
    v = rng.uniform(-0.5, 4.5, size=(3, 4))
    w = rng.normal(size=(2, 3, 4))
    return (lambda a: nx.tsum(nx.bilinear_sample(a, u, v)[0] * w)), {"a": x}, None


def _small_cameras(rng, size=6):
    K = np.array([[6.0, 0.0, (size - 1) / 2], [0.0, 6.0, (size - 1) / 2], [0.0, 0.0, 1.0]])
    th = rng.uniform(-0.05, 0.05)
    R = np.array([[np.cos(th), 0.0, np.sin(th)], [0.0, 1.0, 0.0], [-np.sin(th), 0.0, np.cos(th)]])
    ref = Camera(K, np.eye(3), np.zeros(3), 4.0, 8.0)
    src = Camera(K, R, rng.uniform(-0.4, 0.4, size=3) * np.array([1.0, 1.0, 0.2]), 4.0, 8.0)
    return ref, src


def _warp(rng):
    ref, src = _small_cameras(rng)
    feats = rng.normal(size=(2, 6, 6))
    hyp = np.linspace(4.0, 8.0, 4)
    w = rng.normal(size=(2, 4, 6, 6))
    return (lambda f: nx.tsum(warp_feature_map(f, hyp, ref, src)[0] * w)), {"f": feats}, None


def _variance(rng):
    ref = rng.normal(size=(2, 3, 3))
    vols = [rng.normal(size=(2, 4, 3, 3)) for _ in range(2)]
    masks = [rng.random((4, 3, 3)) > 0.3 for _ in range(2)]
    w = rng.normal(size=(2, 4, 3, 3))

    def f(ref, v1, v2):
        return nx.tsum(aggregate_variance(ref, [v1, v2], masks)[0] * w)
    return f, {"ref": ref, "v1": vols[0], "v2": vols[1]}, None


def _regularize(rng):
    cfg = ModelConfig(stage_channels=(3, 3, 3), backbone_channels=(2, 2, 2), reg_channels=2)
    params = init_params(int(rng.integers(1 << 30)), cfg)
    keys = ["reg1.conv1.w", "reg1.conv1.b", "reg1.conv2.w", "reg1.conv2.b",
            "reg1.proj.w", "reg1.proj.b"]
    inputs = {k.replace(".", "_"): params[k] + 0.1 * rng.normal(size=params[k].shape)
              for k in keys}
    inputs["var"] = rng.uniform(0.0, 1.0, size=(3, 4, 3, 3))
    w = rng.normal(size=(4, 3, 3))

    def f(var, **kw):
        p = {k: kw[k.replace(".", "_")] for k in keys}
        return nx.tsum(regularize(var, p, 1) * w)
    return f, inputs, 12


def _expected_depth(rng):
    s = rng.normal(size=(5, 3, 3))
    hyp = np.sort(rng.uniform(1.0, 5.0, size=(5, 3, 3)), axis=0)
    w = rng.normal(size=(3, 3))
    return (lambda s: nx.tsum(expected_depth(nx.softmax(s, 0), hyp) * w)), {"s": s}, None


def _confidence(rng):
    s = rng.normal(size=(8, 3, 3)) * 2.0
    w = rng.normal(size=(3, 3))
    return (lambda s: nx.tsum(confidence_map(nx.softmax(s, 0)) * w)), {"s": s}, None


def _soft_normalize(rng):
    x = rng.normal(size=(3, 4, 5))
    w = rng.normal(size=x.shape)
    return (lambda a: nx.tsum(soft_normalize(a) * w)), {"a": x}, None


def _extract(rng):
    cfg = ModelConfig(stage_channels=(2, 2, 2), backbone_channels=(2, 2, 2), reg_channels=2)
    params = init_params(int(rng.integers(1 << 30)), cfg)
    fe = {k.replace(".", "_"): v + 0.05 * rng.normal(size=v.shape)
          for k, v in params.items() if k.startswith("fe.")}
    names = {k.replace(".", "_"): k for k in params if k.startswith("fe.")}
    image = rng.uniform(0.0, 1.0, size=(3, 8, 8))
    ws = [rng.normal(size=s) for s in ((2, 2, 2), (2, 4, 4), (2, 8, 8))]

    def f(image, **kw):
        feats = extract(image, {names[k]: v for k, v in kw.items()})
        out = nx.tsum(feats[0] * ws[0])
        for t, w in zip(feats[1:], ws[1:]):
            out = out + nx.tsum(t * w)
        return out
    return f, {"image": image, **fe}, 3


# ------------------------------------------------- losses on a tiny scene


TINY_MODEL = ModelConfig(stage_channels=(3, 3, 2), backbone_channels=(2, 3, 3), reg_channels=2)
TINY_CASCADE = CascadeConfig(num_depths=(6, 4, 4), model=TINY_MODEL)


@lru_cache(maxsize=1)
def tiny_scene():
    """Two-view 8x8 tilted plane used by the loss-level checks."""
    from .scenes import SceneSpec, render

    return render(SceneSpec("plane", texture_seed=3, num_views=2, rig="line", baseline=4.0,
                            height=8, width=8, focal=10.0, tilt_deg=25.0))


def _tiny_setup(rng):
    scene = tiny_scene()
    params = init_params(int(rng.integers(1 << 30)), TINY_MODEL)
    params = {k: v + 0.05 * rng.normal(size=v.shape) for k, v in params.items()}
    with no_grad():
        bundles = run_cascade(scene.images, scene.cameras, params, TINY_CASCADE)
    return scene, params, bundles


def _loss_case(kind, stop_grad=True, tensors=4):
    """Loss on the tiny scene w.r.t. ``tensors`` parameter arrays (2
    coordinates each); the remaining parameters are constants. Seeds walk
    the sorted names round-robin, so 20 seeds cover every array.

    With ``stop_grad`` the focal weight maps are frozen at the base point,
    which is the function whose derivative the detached weight yields.
    """
    def build(rng, seed=0):
        scene, params, base = _tiny_setup(rng)
        hyps = [b.hypotheses for b in base]
        cfg = LossConfig(stop_grad_weight=stop_grad)
        weights = None
        if stop_grad:
            weights = [wfl_weight(base, b.shape).data for b in base]
        # CML sees only the extractor; the regulariser cannot reach it
        names = sorted(k for k in params if kind != "cml" or k.startswith("fe."))
        chosen = [names[(seed * tensors + j) % len(names)] for j in range(tensors)]
        key = {k.replace(".", "_"): k for k in chosen}

        def f(**kw):
            p = dict(params)
            p.update({key[k]: v for k, v in kw.items()})
            bundles = run_cascade(scene.images, scene.cameras, p, TINY_CASCADE, hypotheses=hyps)
            targets = make_targets(scene.depths[0], bundles)
            if kind == "total":
                return total_loss(bundles, targets, cfg, weights).total
            out = None
            for s, (b, t) in enumerate(zip(bundles, targets), start=1):
                if kind == "cml":
                    term = cml(b, t)
                elif kind == "wfl":
                    term = wfl(bundles, s, t, cfg, None if weights is None else weights[s - 1])
                else:
                    term = l1_loss(b.depth, t.gt_depth, t.valid)
                out = term if out is None else out + term
            return out
        return f, {k: params[v] for k, v in key.items()}, 2
    build.takes_seed = True
    return build


CASES: dict[str, Builder] = {
    "add": _binary(nx.add),
    "sub": _binary(nx.sub),
    "mul": _binary(nx.mul),
    "div": _binary(nx.div, positive_b=True),
    "neg": _unary(nx.neg),
    "log": _unary(nx.log, positive=True),
    "sqrt": _unary(nx.sqrt, positive=True),
    "exp": _unary(nx.exp),
    "pow2": _unary(nx.pow2),
    "relu": _unary(nx.relu),
    "abs": _unary(nx.absolute),
    "clamp": _unary(lambda a: nx.clamp(a, -0.5, 0.7)),
    "sum": _reduce("sum"),
    "mean": _reduce("mean"),
    "max": _reduce("max"),
    "softmax": _softmax,
    "take": _take,
    "conv2d": _conv2d(1),
    "conv2d_stride2": _conv2d(2),
    "conv3d": _conv3d,
    "upsample_nearest2": _upsample,
    "resize_bilinear": _resize,
    "bilinear_sample": _bilinear,
    "warp_feature_map": _warp,
    "aggregate_variance": _variance,
    "regularize": _regularize,
    "expected_depth": _expected_depth,
    "confidence_map": _confidence,
    "soft_normalize": _soft_normalize,
    "extract": _extract,
    "l1_loss": _loss_case("l1"),
    "cml": _loss_case("cml"),
    "wfl": _loss_case("wfl"),
    "wfl_weight_grad": _loss_case("wfl", stop_grad=False),
    "total_loss": _loss_case("total", tensors=8),
    "total_loss_weight_grad": _loss_case("total", stop_grad=False, tensors=8),
}


def run_case(name: str, seeds: int = DEFAULT_SEEDS, h: float = 1e-5) -> CaseResult:
    if name not in CASES:
        raise KeyError(f"unknown gradcheck op {name!r}; known: {', '.join(CASES)}")
    t0 = time.perf_counter()
    worst, checked, skipped = 0.0, 0, 0
    for seed in range(seeds):
        rng = np.random.default_rng([seed, len(name)])
        builder = CASES[name]
        args = (rng, seed) if getattr(builder, "takes_seed", False) else (rng,)
        f, inputs, max_coords = builder(*args)
        rep = nx.gradcheck(f, inputs, h=h, max_coords=max_coords, seed=seed)
        worst = max(worst, rep.worst)
        checked += sum(rep.checked.values())
        skipped += rep.skipped
    return CaseResult(name, worst, seeds, checked, skipped, time.perf_counter() - t0)


def run_all(seeds: int = DEFAULT_SEEDS, names=None) -> list[CaseResult]:
    return [run_case(n, seeds) for n in (names or CASES)]
