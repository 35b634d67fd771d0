"""Synthetic scenes: ray-cast rendering with exact depth, plus dataset IO.

A scene directory holds ``images/*.png`` (8-bit RGB), ``depths/*.pfm``,
``cams/*_cam.txt`` and a ``manifest.txt`` with one line per view::

    id img_path cam_path depth_path neighbor_id neighbor_id ...
"""

from __future__ import annotations

import configparser
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Camera, CameraError, read_camera, write_camera

__all__ = [
    "SceneSpec",
    "Scene",
    "DatasetError",
    "PFMError",
    "render",
    "raycast",
    "surface_samples",
    "texture",
    "arc_cameras",
    "save_scene",
    "load_scene",
    "load_dataset",
    "load_collection",
    "read_pfm",
    "write_pfm",
    "read_spec_file",
    "suite_specs",
    "neighbor_order",
]

log = logging.getLogger(__name__)

GEOMETRIES = ("plane", "heightfield", "two_plane")


class DatasetError(ValueError):
    pass


class PFMError(DatasetError):
    pass


@dataclass
class SceneSpec:
    """Parameters of one synthetic scene (look-at point at the world origin).

    Scene geometry sits near the z=0 plane facing cameras on the -z side.
    ``rig='arc'`` places cameras on a horizontal arc of ``radius`` aimed at
    the origin; ``rig='line'`` translates identical fronto-parallel cameras
    along x by ``baseline``.
    """

    geometry: str = "plane"
    texture_seed: int = 0
    num_views: int = 5
    rig: str = "arc"
    radius: float = 35.0
    arc_step_deg: float = 10.0
    baseline: float = 6.0
    elevation_deg: float = 0.0
    height: int = 64
    width: int = 80
    focal: float = 80.0
    depth_min: float = 20.0
    depth_max: float = 50.0
    depth_num: int = 16
    tilt_deg: float = 0.0
    texture_scale: float = 1.5
    contrast: float = 1.0
    textureless_band: tuple[float, float] | None = None
    bump_count: int = 5
    bump_amplitude: float = 5.0
    fg_offset: float = 8.0
    fg_half_extent: tuple[float, float] = (5.0, 4.0)

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"unknown geometry {self.geometry!r}; choose from {GEOMETRIES}")
        if self.rig not in ("arc", "line"):
            raise ValueError(f"unknown rig {self.rig!r}")
        if self.num_views < 2:
            raise ValueError("a scene needs at least two views")
        if self.height % 4 or self.width % 4:
            raise ValueError("image extents must be divisible by 4")
        if not self.depth_min < self.depth_max:
            raise ValueError("depth_min must be below depth_max")
        if self.textureless_band is not None:
            self.textureless_band = tuple(float(x) for x in self.textureless_band)
        self.fg_half_extent = tuple(float(x) for x in self.fg_half_extent)


@dataclass
class Scene:
    images: list[np.ndarray]          # [3,H,W] float64 in [0,1]
    depths: list[np.ndarray]          # [H,W] float64, 0 where invalid
    cameras: list[Camera]
    neighbors: list[list[int]]
    ids: list[int] = field(default_factory=list)
    spec: SceneSpec | None = None

    def __post_init__(self):
        if not self.ids:
            self.ids = list(range(len(self.images)))

    def __len__(self) -> int:
        return len(self.images)

    def view_set(self, ref: int, num_views: int) -> list[int]:
        """Reference index followed by its first ``num_views - 1`` neighbours."""
        nb = self.neighbors[ref][: num_views - 1]
        if len(nb) < num_views - 1:
            raise DatasetError(f"view {self.ids[ref]} has only {len(nb)} neighbours")
        return [ref] + list(nb)


# ------------------------------------------------------------------- cameras


def _look_at(center: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(np.array([0.0, 1.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ center


def arc_cameras(spec: SceneSpec) -> list[Camera]:
    K = np.array([[spec.focal, 0.0, (spec.width - 1) / 2.0],
                  [0.0, spec.focal, (spec.height - 1) / 2.0],
                  [0.0, 0.0, 1.0]])
    cams = []
    offsets = np.arange(spec.num_views) - (spec.num_views - 1) / 2.0
    for k in offsets:
        if spec.rig == "arc":
            th = np.deg2rad(k * spec.arc_step_deg)
            el = np.deg2rad(spec.elevation_deg)
            center = spec.radius * np.array([np.sin(th) * np.cos(el), -np.sin(el),
                                             -np.cos(th) * np.cos(el)])
            R, t = _look_at(center, np.zeros(3))
        else:
            center = np.array([k * spec.baseline, 0.0, -spec.radius])
            R, t = np.eye(3), -center
        cams.append(Camera(K, R, t, spec.depth_min, spec.depth_max, spec.depth_num))
    return cams


def neighbor_order(cameras: list[Camera]) -> list[list[int]]:
    """Other views sorted by camera-centre distance (ties by index)."""
    centers = np.stack([c.center for c in cameras])
    out = []
    for i, c in enumerate(centers):
        dist = np.linalg.norm(centers - c, axis=1)
        others = [j for j in range(len(cameras)) if j != i]
        out.append(sorted(others, key=lambda j: (round(float(dist[j]), 9), j)))
    return out


# -------------------------------------------------------------------- texture


def _lattice(seed: int, channel: int, octave: int, size: int = 64) -> np.ndarray:
    rng = np.random.default_rng([seed, channel, octave])
    return rng.random((size, size))


def _value_noise(grid: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    n = grid.shape[0]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    sx = fx * fx * (3 - 2 * fx)
    sy = fy * fy * (3 - 2 * fy)
    i0 = x0.astype(np.int64) % n
    j0 = y0.astype(np.int64) % n
    i1 = (i0 + 1) % n
    j1 = (j0 + 1) % n
    top = grid[j0, i0] * (1 - sx) + grid[j0, i1] * sx
    bot = grid[j1, i0] * (1 - sx) + grid[j1, i1] * sx
    return top * (1 - sy) + bot * sy


def texture(spec: SceneSpec, x: np.ndarray, y: np.ndarray, layer: int = 0) -> np.ndarray:
    """Multi-octave value noise colour [...,3] at surface coordinates (x, y)."""
    rgb = []
    for ch in range(3):
        acc = np.zeros_like(x, dtype=np.float64)
        amp, freq, norm = 1.0, 1.0 / spec.texture_scale, 0.0
        for octave in range(4):
            grid = _lattice(spec.texture_seed + 7919 * layer, ch, octave)
            acc += amp * _value_noise(grid, x * freq + 17.3 * octave, y * freq + 5.1 * octave)
            norm += amp
            amp *= 0.5
            freq *= 2.0
        rgb.append(acc / norm)
    color = np.stack(rgb, axis=-1)
    contrast = np.full(x.shape, float(spec.contrast))
    if spec.textureless_band is not None:
        lo, hi = spec.textureless_band
        contrast = np.where((x >= lo) & (x <= hi), 0.0, contrast)
    return np.clip(0.5 + 1.6 * contrast[..., None] * (color - 0.5), 0.0, 1.0)


# ------------------------------------------------------------------ geometry


def _bumps(spec: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.texture_seed, 101])
    n = spec.bump_count
    cx = rng.uniform(-10, 10, n)
    cy = rng.uniform(-8, 8, n)
    sig = rng.uniform(3.0, 6.0, n)
    amp = rng.uniform(-1.0, 1.0, n) * spec.bump_amplitude
    return np.stack([cx, cy, sig, amp], axis=1)


def _height(bumps: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = np.zeros_like(x)
    for cx, cy, sig, amp in bumps:
        z += amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sig * sig))
    return z


def _plane_normal(spec: SceneSpec) -> np.ndarray:
    a = np.deg2rad(spec.tilt_deg)
    return np.array([np.sin(a), 0.0, np.cos(a)])


def _plane_coords(spec: SceneSpec, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.deg2rad(spec.tilt_deg)
    u_axis = np.array([np.cos(a), 0.0, -np.sin(a)])
    return pts @ u_axis, pts[..., 1]


def raycast(spec: SceneSpec, cam: Camera, u: np.ndarray, v: np.ndarray
            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Intersect pixel rays with the scene.

    Returns ``(depth, points, layer)``: camera-frame depth (nan on a miss),
    world hit points [...,3] and the surface layer (0 background, 1 near
    plane, -1 miss).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    origin = cam.center
    rays = np.stack([u, v, np.ones_like(u)], axis=-1) @ np.linalg.inv(cam.K).T @ cam.R
    # rays have unit camera-frame z, so the ray parameter equals depth
    depth = np.full(u.shape, np.nan)
    layer = np.full(u.shape, -1, dtype=np.int64)
    if spec.geometry in ("plane", "two_plane"):
        n = _plane_normal(spec) if spec.geometry == "plane" else np.array([0.0, 0.0, 1.0])
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = -(origin @ n) / denom
        hit = np.isfinite(s) & (s > 0)
        depth = np.where(hit, s, np.nan)
        layer = np.where(hit, 0, -1)
        if spec.geometry == "two_plane":
            with np.errstate(divide="ignore", invalid="ignore"):
                s_fg = (-spec.fg_offset - origin[2]) / rays[..., 2]
            pts = origin + s_fg[..., None] * rays
            ex, ey = spec.fg_half_extent
            fg = (np.isfinite(s_fg) & (s_fg > 0) & (np.abs(pts[..., 0]) <= ex)
                  & (np.abs(pts[..., 1]) <= ey) & ~(hit & (depth < s_fg)))
            depth = np.where(fg, s_fg, depth)
            layer = np.where(fg, 1, layer)
    else:
        bumps = _bumps(spec)

        def g(s):
            p = origin + s[..., None] * rays
            return p[..., 2] - _height(bumps, p[..., 0], p[..., 1])

        s_lo = np.full(u.shape, 1e-3)
        found = np.zeros(u.shape, dtype=bool)
        s_hi = np.full(u.shape, np.nan)
        step = 0.25
        s = 1e-3
        prev = g(s_lo)
        limit = 4.0 * spec.depth_max
        while s < limit and not found.all():
            s_next = s + step
            cur = g(np.full(u.shape, s_next))
            crossing = ~found & (prev < 0) & (cur >= 0)
            s_lo = np.where(crossing, s, s_lo)
            s_hi = np.where(crossing, s_next, s_hi)
            found |= crossing
            prev = cur
            s = s_next
        lo = np.where(found, s_lo, 0.0)
        hi = np.where(found, s_hi, 1.0)
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            below = g(mid) < 0
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        depth = np.where(found, 0.5 * (lo + hi), np.nan)
        layer = np.where(found, 0, -1)
    points = origin + np.nan_to_num(depth)[..., None] * rays
    return depth, points, layer


def _surface_color(spec: SceneSpec, points: np.ndarray, layer: np.ndarray) -> np.ndarray:
    if spec.geometry == "plane":
        tx, ty = _plane_coords(spec, points)
    else:
        tx, ty = points[..., 0], points[..., 1]
    color = texture(spec, tx, ty, layer=0)
    if spec.geometry == "two_plane":
        fg = texture(spec, points[..., 0] + 31.0, points[..., 1] - 13.0, layer=1)
        color = np.where((layer == 1)[..., None], fg, color)
    return np.where((layer >= 0)[..., None], color, 0.0)


def render(spec: SceneSpec) -> Scene:
    """Ray-cast every view of ``spec``; deterministic in the spec."""
    cams = arc_cameras(spec)
    vv, uu = np.meshgrid(np.arange(spec.height, dtype=np.float64),
                         np.arange(spec.width, dtype=np.float64), indexing="ij")
    images, depths = [], []
    for i, cam in enumerate(cams):
        cu, cv, cz = cam.project(np.zeros(3))
        if not (cz > 0 and 0 <= cu <= spec.width - 1 and 0 <= cv <= spec.height - 1):
            raise DatasetError(f"view {i}: camera does not see the look-at point")
        depth, pts, layer = raycast(spec, cam, uu, vv)
        if not np.any(layer >= 0):
            raise DatasetError(f"view {i}: no pixel sees the scene geometry")
        color = _surface_color(spec, pts, layer)
        # store the image at 8-bit precision so in-memory and on-disk scenes agree
        color = np.round(color * 255.0) / 255.0
        images.append(color.transpose(2, 0, 1).copy())
        depths.append(np.where(np.isfinite(depth) & (depth > 0), depth, 0.0))
    return Scene(images, depths, cams, neighbor_order(cams), spec=spec)


def surface_samples(spec: SceneSpec, cameras: list[Camera], min_views: int = 2,
                    tol: float = 1e-6) -> np.ndarray:
    """Exact surface points seen by each view's pixels that are also visible
    (in frame, unoccluded) in at least ``min_views`` other views."""
    h, w = spec.height, spec.width
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                         indexing="ij")
    out = []
    for i, cam in enumerate(cameras):
        depth, pts, layer = raycast(spec, cam, uu, vv)
        hit = layer >= 0
        seen = np.zeros(hit.shape, dtype=np.int64)
        for j, other in enumerate(cameras):
            if j == i:
                continue
            pu, pv, pz = other.project(pts)
            inside = hit & (pz > 0) & (pu >= 0) & (pu <= w - 1) & (pv >= 0) & (pv <= h - 1)
            od, _, _ = raycast(spec, other, np.where(inside, pu, 0.0), np.where(inside, pv, 0.0))
            visible = inside & np.isfinite(od) & (np.abs(od - pz) <= tol * max(1.0, spec.radius))
            seen += visible
        out.append(pts[hit & (seen >= min_views)])
    return np.concatenate(out, axis=0)


# ------------------------------------------------------------------ PFM / PNG


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Grayscale little-endian PFM; rows stored bottom to top."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise PFMError(f"PFM writer expects a 2-D map, got shape {arr.shape}")
    h, w = arr.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    payload = np.flipud(arr).astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_pfm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    pos = 0
    tokens = []
    # three whitespace-terminated header tokens: magic, "W H", scale
    for expected in ("magic", "size", "scale"):
        end = buf.find(b"\n", pos)
        if end < 0:
            raise PFMError(f"{path}: truncated header at byte {pos}")
        tokens.append((pos, buf[pos:end].decode("ascii", "replace").strip()))
        pos = end + 1
    (o_magic, magic), (o_size, size), (o_scale, scale) = tokens
    if magic not in ("Pf", "PF"):
        raise PFMError(f"{path}: bad magic {magic!r} at byte {o_magic}")
    channels = 1 if magic == "Pf" else 3
    try:
        w, h = (int(x) for x in size.split())
    except ValueError:
        raise PFMError(f"{path}: bad size line {size!r} at byte {o_size}") from None
    try:
        s = float(scale)
    except ValueError:
        raise PFMError(f"{path}: bad scale {scale!r} at byte {o_scale}") from None
    if s == 0 or w <= 0 or h <= 0:
        raise PFMError(f"{path}: invalid header value at byte {o_size if s else o_scale}")
    dtype = "<f4" if s < 0 else ">f4"
    n = w * h * channels
    if len(buf) - pos < 4 * n:
        raise PFMError(f"{path}: payload truncated at byte {len(buf)}")
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(arr.reshape(shape)).copy()


def write_png(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


# ------------------------------------------------------------------ datasets


def save_scene(scene: Scene, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    for sub in ("images", "depths", "cams"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, vid in enumerate(scene.ids):
        img = f"images/{vid:08d}.png"
        cam = f"cams/{vid:08d}_cam.txt"
        dep = f"depths/{vid:08d}.pfm"
        write_png(out / img, scene.images[i])
        write_camera(out / cam, scene.cameras[i])
        write_pfm(out / dep, scene.depths[i])
        nbs = " ".join(str(scene.ids[j]) for j in scene.neighbors[i])
        lines.append(f"{vid} {img} {cam} {dep} {nbs}".rstrip())
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    if scene.spec is not None:
        write_spec_file(out / "scene.ini", {"scene": scene.spec})
    return out


def load_scene(path: str | Path) -> Scene:
    """Load one scene directory; images normalised to [0,1] float64."""
    root = Path(path)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise DatasetError(f"{root}: no manifest.txt")
    entries = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 4:
            raise DatasetError(f"{manifest}:{lineno}: expected 'id img cam depth neighbors...'")
        try:
            vid = int(parts[0])
            nbs = [int(x) for x in parts[4:]]
        except ValueError:
            raise DatasetError(f"{manifest}:{lineno}: view ids must be integers") from None
        entries.append((vid, parts[1], parts[2], parts[3], nbs))
    ids = [e[0] for e in entries]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{manifest}: duplicate view ids")
    index = {vid: i for i, vid in enumerate(ids)}
    images, depths, cams, neighbors = [], [], [], []
    for vid, img, cam, dep, nbs in entries:
        for rel in (img, cam, dep):
            if not (root / rel).is_file():
                raise DatasetError(f"view {vid}: missing file {rel}")
        unknown = [n for n in nbs if n not in index]
        if unknown:
            raise DatasetError(f"view {vid}: unknown neighbour view id(s) {unknown}")
        try:
            cams.append(read_camera(root / cam))
        except CameraError as exc:
            raise DatasetError(f"view {vid}: {exc}") from exc
        images.append(read_png(root / img))
        depths.append(read_pfm(root / dep).astype(np.float64))
        neighbors.append([index[n] for n in nbs])
    spec = None
    if (root / "scene.ini").is_file():
        spec = read_spec_file(root / "scene.ini").get("scene")
    return Scene(images, depths, cams, neighbors, ids, spec)


load_dataset = load_scene


def load_collection(path: str | Path) -> list[Scene]:
    """A scene directory, or a directory whose sub-directories are scenes."""
    root = Path(path)
    if (root / "manifest.txt").is_file():
        return [load_scene(root)]
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    dirs = sorted(p for p in root.rglob("manifest.txt"))
    if not dirs:
        raise DatasetError(f"{root}: no scene manifests found")
    return [load_scene(p.parent) for p in dirs]


# -------------------------------------------------------------- spec files


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple) or default is None:
        if raw.lower() in ("", "none"):
            return None
        return tuple(float(x) for x in raw.replace(",", " ").split())
    return raw


def read_spec_file(path: str | Path) -> dict[str, SceneSpec]:
    """INI file, one section per scene; the section name is its output sub-path."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise DatasetError(f"{path}: cannot read scene spec file")
    defaults = SceneSpec()
    known = {f.name for f in fields(SceneSpec)}
    specs = {}
    for section in cp.sections():
        kwargs = {}
        for key, raw in cp[section].items():
            if key not in known:
                raise DatasetError(f"{path}: [{section}] unknown key {key!r}")
            kwargs[key] = _parse_value(raw, getattr(defaults, key))
        try:
            specs[section] = SceneSpec(**kwargs)
        except (TypeError, ValueError) as exc:
            raise DatasetError(f"{path}: [{section}] {exc}") from exc
    return specs


def write_spec_file(path: str | Path, specs: dict[str, SceneSpec]) -> None:
    cp = configparser.ConfigParser()
    for name, spec in specs.items():
        cp[name] = {}
        for key, val in asdict(spec).items():
            if val is None:
                cp[name][key] = "none"
            elif isinstance(val, (tuple, list)):
                cp[name][key] = " ".join(repr(float(x)) for x in val)
            else:
                cp[name][key] = str(val)
    with open(path, "w") as fh:
        cp.write(fh)


def suite_specs() -> dict[str, SceneSpec]:
    """The bundled desk-scale suite: five training scenes and two held out."""
    return {
        "train/plane_tilted": SceneSpec("plane", texture_seed=11, tilt_deg=20.0),
        "train/heightfield_a": SceneSpec("heightfield", texture_seed=12),
        "train/two_plane": SceneSpec("two_plane", texture_seed=13),
        "train/heightfield_band": SceneSpec("heightfield", texture_seed=14,
                                            textureless_band=(-3.0, 1.0)),
        "train/plane_lowcontrast": SceneSpec("plane", texture_seed=15, tilt_deg=-15.0,
                                             contrast=0.5, elevation_deg=8.0),
        "eval/heightfield_b": SceneSpec("heightfield", texture_seed=21, bump_amplitude=6.0),
        "eval/two_plane_tilt": SceneSpec("two_plane", texture_seed=22, elevation_deg=-6.0,
                                         fg_offset=10.0),
    }
