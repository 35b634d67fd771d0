"""Three-level feature pyramid and model parameter storage.

The extractor is a small FPN: two 3x3 conv+relu per level with stride-2
downsampling between levels, then a top-down path that merges nearest-
upsampled coarse features with 1x1 lateral projections of finer ones.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

__all__ = [
    "ModelConfig",
    "ModelParameters",
    "CheckpointError",
    "init_params",
    "config_from_params",
    "extract",
    "soft_normalize",
    "save_params",
    "load_params",
]

MAGIC = b"CMVSPARM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (16, 16, 8)
    backbone_channels: tuple[int, int, int] = (8, 16, 16)
    reg_channels: int = 8

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)


class ModelParameters(OrderedDict):
    """Name -> float64 array, in a fixed serialisation order."""

    def tensors(self, requires_grad: bool = True) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, Tensor(v, requires_grad=requires_grad)) for k, v in self.items())

    def copy(self) -> "ModelParameters":
        return ModelParameters((k, v.copy()) for k, v in self.items())

    @property
    def count(self) -> int:
        return int(sum(v.size for v in self.values()))


def _shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    c0, c1, c2 = config.backbone_channels
    s1, s2, s3 = config.stage_channels
    shapes = [
        ("fe.conv0a", (c0, 3, 3, 3)),
        ("fe.conv0b", (c0, c0, 3, 3)),
        ("fe.conv1a", (c1, c0, 3, 3)),
        ("fe.conv1b", (c1, c1, 3, 3)),
        ("fe.conv2a", (c2, c1, 3, 3)),
        ("fe.conv2b", (c2, c2, 3, 3)),
        ("fe.out1", (s1, c2, 1, 1)),
        ("fe.lat1", (c2, c1, 1, 1)),
        ("fe.out2", (s2, c2, 3, 3)),
        ("fe.lat0", (c2, c0, 1, 1)),
        ("fe.out3", (s3, c2, 3, 3)),
    ]
    hid = config.reg_channels
    for s, cs in enumerate(config.stage_channels, start=1):
        shapes += [
            (f"reg{s}.conv1", (hid, cs, 3, 3, 3)),
            (f"reg{s}.conv2", (hid, hid, 3, 3, 3)),
            (f"reg{s}.proj", (1, hid, 1, 1, 1)),
        ]
    return shapes


def init_params(seed: int, config: ModelConfig | None = None) -> ModelParameters:
    """He-uniform kernels (bound sqrt(6 / fan_in)) and zero biases."""
    config = config or ModelConfig()
    if config.num_stages != 3:
        raise ValueError("the extractor is built for exactly three stages")
    rng = np.random.default_rng(seed)
    params = ModelParameters()
    for name, shape in _shapes(config):
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(6.0 / fan_in)
        params[name + ".w"] = rng.uniform(-bound, bound, size=shape)
        params[name + ".b"] = np.zeros(shape[0])
    return params


def config_from_params(params) -> ModelConfig:
    """Recover the channel layout from parameter shapes (e.g. a checkpoint)."""
    try:
        cfg = ModelConfig(
            stage_channels=tuple(int(params[f"fe.out{s}.w"].shape[0]) for s in (1, 2, 3)),
            backbone_channels=tuple(int(params[f"fe.conv{k}a.w"].shape[0]) for k in (0, 1, 2)),
            reg_channels=int(params["reg1.conv1.w"].shape[0]))
    except KeyError as exc:
        raise CheckpointError(f"parameter {exc.args[0]!r} missing") from None
    expected = dict(_shapes(cfg))
    for name, shape in expected.items():
        for suffix, shp in ((".w", shape), (".b", shape[:1])):
            got = params.get(name + suffix)
            if got is None or tuple(got.shape) != shp:
                raise CheckpointError(f"parameter {name + suffix} has unexpected shape")
    return cfg


def extract(image, params) -> list[Tensor]:
    """Feature maps for stages 1..3, coarse to fine.

    ``image`` is [3,H,W] in [0,1]; ``params`` maps names to Tensors or arrays.
    Stage s has spatial extent H/2^(3-s) x W/2^(3-s).
    """
    image = nx.as_tensor(image)
    _, h, w = image.shape
    if h % 4 or w % 4:
        raise ValueError(f"image extent {h}x{w} must be divisible by 4; "
                         f"pad by ({-h % 4}, {-w % 4}) pixels")
    p = {k: nx.as_tensor(v) for k, v in params.items()}

    def conv(x, name, stride=1):
        return nx.conv2d(x, p[name + ".w"], p[name + ".b"], stride=stride)

    x = (image - 0.5) * 4.0
    x0 = nx.relu(conv(nx.relu(conv(x, "fe.conv0a")), "fe.conv0b"))
    x1 = nx.relu(conv(nx.relu(conv(x0, "fe.conv1a", stride=2)), "fe.conv1b"))
    x2 = nx.relu(conv(nx.relu(conv(x1, "fe.conv2a", stride=2)), "fe.conv2b"))
    f1 = conv(x2, "fe.out1")
    m1 = nx.upsample_nearest2(x2) + conv(x1, "fe.lat1")
    f2 = conv(m1, "fe.out2")
    m0 = nx.upsample_nearest2(m1) + conv(x0, "fe.lat0")
    f3 = conv(m0, "fe.out3")
    return [soft_normalize(f) for f in (f1, f2, f3)]


def soft_normalize(f):
    """Per-pixel ``f / sqrt(1 + mean_c f^2)``.

    Near identity for small features, and keeps the squared norm below C so
    inner-product similarities stay bounded.
    """
    f = nx.as_tensor(f)
    energy = nx.mean(nx.pow2(f), axis=0, keepdims=True)
    return f / nx.sqrt(energy + 1.0)


def save_params(path: str | Path, params: ModelParameters) -> None:
    """Binary checkpoint: magic, version, then (name, shape, <f8 payload) records."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_params(path: str | Path) -> ModelParameters:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    pos = len(MAGIC)
    try:
        version, count = struct.unpack_from("<II", buf, pos)
        pos += 8
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        params = ModelParameters()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 8 * n > len(buf):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            params[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return params
