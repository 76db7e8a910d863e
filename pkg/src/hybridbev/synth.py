"""Deterministic synthetic scenes: boxes, multi-sweep radar, pseudo camera features and depth labels."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .camera import Feature2D
from .geometry import BevGrid, CameraCalib, DepthBins, project_to_image
from .head import CLASSES, Box3D

CAM_CHANNELS = 8
# class one-hot (0-2), depth cue (3), sin/cos heading (4-5), objectness (6), length cue (7)

# per class: (length, width, height), jitter, radar points per sweep, mean RCS [dBsm], speed range [m/s]
CLASS_PROFILES = {
    "Car": dict(size=(3.9, 1.7, 1.55), jitter=0.15, pts=6, rcs=12.0, speed=(0.0, 8.0), aligned=True),
    "Pedestrian": dict(size=(0.7, 0.7, 1.75), jitter=0.05, pts=1, rcs=-6.0, speed=(0.0, 1.5), aligned=False),
    "Cyclist": dict(size=(1.8, 0.7, 1.7), jitter=0.08, pts=3, rcs=3.0, speed=(1.0, 5.0), aligned=True),
}


class ConfigError(ValueError):
    pass


def toy_grid() -> BevGrid:
    return BevGrid(-12.8, 12.8, 0.0, 25.6, 32, 32)


@dataclass(frozen=True)
class SceneConfig:
    grid: BevGrid = field(default_factory=toy_grid)
    n_cars: int = 2
    n_pedestrians: int = 2
    n_cyclists: int = 1
    margin: float = 1.5
    min_separation: float = 3.0
    radar_density: float = 1.0        # multiplies the per-class points per sweep
    rcs_std: float = 2.0
    point_noise: float = 0.05         # fraction of box extent
    clutter_fraction: float = 0.2
    min_clutter: int = 2              # clutter points per sweep even in empty scenes
    n_sweeps: int = 5
    dt: float = 0.1
    feat_h: int = 16
    feat_w: int = 32
    stride: int = 16
    cam_height: float = 1.5
    depth_bins: DepthBins = field(default_factory=lambda: DepthBins(1.0, 25.6, 32))
    depth_noise: float = 0.004        # relative depth-cue noise per meter of depth
    feature_noise: float = 0.05
    min_depth: float = 2.0

    def __post_init__(self):
        if self.grid.x_max - self.grid.x_min <= 2 * self.margin or self.grid.y_max - self.grid.y_min <= self.margin + self.min_depth:
            raise ConfigError("scene extent leaves no room for objects")
        if min(self.n_cars, self.n_pedestrians, self.n_cyclists) < 0:
            raise ConfigError("object counts must be nonnegative")
        if not 1 <= self.n_sweeps <= 5:
            raise ConfigError("between 1 and 5 radar sweeps are supported")
        if not 0.0 <= self.clutter_fraction < 1.0:
            raise ConfigError("clutter fraction must lie in [0, 1)")

    @property
    def class_counts(self) -> Tuple[int, int, int]:
        return (self.n_cars, self.n_pedestrians, self.n_cyclists)

    def calib(self) -> CameraCalib:
        w_img, h_img = self.feat_w * self.stride, self.feat_h * self.stride
        # focal = half the image width gives a 90 degree horizontal field of view
        return CameraCalib.forward_camera(w_img / 2.0, w_img / 2.0, h_img / 2.0, self.cam_height)


@dataclass
class Scene:
    boxes: List[Box3D]
    radar: np.ndarray          # N x 7, columns as radar.POINT_FIELDS
    cam_features: Feature2D
    gt_depth: np.ndarray       # D x H_f x W_f one-hot on valid pixels
    depth_mask: np.ndarray     # H_f x W_f
    calib: CameraCalib
    seed: int

    def __eq__(self, other):
        return (
            isinstance(other, Scene)
            and self.boxes == other.boxes
            and np.array_equal(self.radar, other.radar)
            and np.array_equal(self.cam_features.tensor, other.cam_features.tensor)
            and self.cam_features.stride == other.cam_features.stride
            and np.array_equal(self.gt_depth, other.gt_depth)
            and np.array_equal(self.depth_mask, other.depth_mask)
            and self.calib == other.calib
            and self.seed == other.seed
        )


# --------------------------------------------------------------------------
# boxes

def _sample_boxes(rng: np.random.Generator, cfg: SceneConfig) -> List[Box3D]:
    g = cfg.grid
    boxes: List[Box3D] = []
    for cls, count in enumerate(cfg.class_counts):
        prof = CLASS_PROFILES[CLASSES[cls]]
        for _ in range(count):
            for _attempt in range(100):
                cx = rng.uniform(g.x_min + cfg.margin, g.x_max - cfg.margin)
                cy = rng.uniform(max(g.y_min + cfg.margin, cfg.min_depth), g.y_max - cfg.margin)
                if all(math.hypot(cx - b.cx, cy - b.cy) >= cfg.min_separation for b in boxes):
                    break
            else:
                raise ConfigError("could not place objects with the requested separation")
            l, w, h = (s * (1.0 + prof["jitter"] * rng.uniform(-1, 1)) for s in prof["size"])
            if prof["aligned"]:
                yaw = math.pi / 2 * (1 if rng.random() < 0.5 else -1) + rng.normal(0.0, 0.15)
            else:
                yaw = rng.uniform(-math.pi, math.pi)
            speed = rng.uniform(*prof["speed"]) if rng.random() > 0.3 else 0.0
            boxes.append(Box3D(cx, cy, h / 2, l, w, h, yaw, speed * math.cos(yaw), speed * math.sin(yaw), cls))
    return boxes


# --------------------------------------------------------------------------
# radar

def _surface_points(rng: np.random.Generator, box: Box3D, n: int, noise: float) -> np.ndarray:
    """``n`` points on the vertical faces of ``box`` (ego frame), jitter bounded by ``noise`` x extent."""
    perim = 2 * (box.l + box.w)
    s = rng.uniform(0.0, perim, size=n)
    u = np.empty(n)
    v = np.empty(n)
    hl, hw = box.l / 2, box.w / 2
    for i, si in enumerate(s):
        if si < box.l:
            u[i], v[i] = si - hl, hw
        elif si < box.l + box.w:
            u[i], v[i] = hl, hw - (si - box.l)
        elif si < 2 * box.l + box.w:
            u[i], v[i] = hl - (si - box.l - box.w), -hw
        else:
            u[i], v[i] = -hl, -hw + (si - 2 * box.l - box.w)
    u = u + np.clip(rng.normal(0.0, noise, n), -noise, noise) * box.l
    v = v + np.clip(rng.normal(0.0, noise, n), -noise, noise) * box.w
    c, sn = math.cos(box.yaw), math.sin(box.yaw)
    x = box.cx + c * u - sn * v
    y = box.cy + sn * u + c * v
    z = box.cz + rng.uniform(-box.h / 2, box.h / 2, size=n)
    return np.stack([x, y, z], axis=1)


def accumulate_sweeps(
    boxes: Sequence[Box3D],
    cfg: SceneConfig,
    rng: np.random.Generator,
    n_sweeps: Optional[int] = None,
    dt: Optional[float] = None,
) -> np.ndarray:
    """Radar returns from ``n_sweeps`` consecutive sweeps, newest at t = 0.

    Sweep ``k`` sees every box moved back by ``k * dt`` seconds of its
    velocity and is stamped ``t = -k * dt``.  Stored velocities are the
    object velocities (already ego-motion compensated).
    """
    n_sweeps = cfg.n_sweeps if n_sweeps is None else n_sweeps
    dt = cfg.dt if dt is None else dt
    if n_sweeps < 1:
        raise ConfigError("need at least one sweep")
    g = cfg.grid
    rows = []
    obj_rcs = [
        CLASS_PROFILES[CLASSES[b.cls]]["rcs"] + rng.normal(0.0, cfg.rcs_std) for b in boxes
    ]
    for k in range(n_sweeps):
        t = -k * dt
        n_obj_pts = 0
        for b, rcs0 in zip(boxes, obj_rcs):
            n = max(1, int(round(CLASS_PROFILES[CLASSES[b.cls]]["pts"] * cfg.radar_density)))
            moved = replace(b, cx=b.cx + b.vx * t, cy=b.cy + b.vy * t)
            xyz = _surface_points(rng, moved, n, cfg.point_noise)
            vel = np.array([b.vx, b.vy]) + rng.normal(0.0, 0.1, size=(n, 2))
            rcs = rcs0 + rng.normal(0.0, 1.0, size=n)
            rows.append(np.column_stack([xyz, vel, rcs, np.full(n, t)]))
            n_obj_pts += n
        frac = cfg.clutter_fraction
        n_clutter = max(int(round(frac / (1.0 - frac) * n_obj_pts)), cfg.min_clutter)
        xyz = np.column_stack([
            rng.uniform(g.x_min, g.x_max, n_clutter),
            rng.uniform(g.y_min, g.y_max, n_clutter),
            rng.uniform(0.0, 2.0, n_clutter),
        ])
        vel = rng.normal(0.0, 0.3, size=(n_clutter, 2))
        rcs = rng.normal(-8.0, 4.0, size=n_clutter)
        rows.append(np.column_stack([xyz, vel, rcs, np.full(n_clutter, t)]))
    return np.concatenate(rows, axis=0) if rows else np.zeros((0, 7))


def radar_augment(points: np.ndarray, drop_prob: float, noise_sigma: float, seed: int) -> np.ndarray:
    """Bernoulli point dropout plus Gaussian position noise on x, y, z."""
    if not 0.0 <= drop_prob < 1.0:
        raise ConfigError("drop probability must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    keep = rng.random(points.shape[0]) >= drop_prob
    out = points[keep].copy()
    if noise_sigma > 0:
        out[:, :3] += rng.normal(0.0, noise_sigma, size=(out.shape[0], 3))
    return out


# --------------------------------------------------------------------------
# camera features and depth labels

def _camera_features(rng: np.random.Generator, boxes: Sequence[Box3D], cfg: SceneConfig, calib: CameraCalib):
    C, H, W = CAM_CHANNELS, cfg.feat_h, cfg.feat_w
    bins = cfg.depth_bins
    feats = np.zeros((C, H, W))
    gt = np.zeros((bins.n_bins, H, W))
    owner_depth = np.full((H, W), np.inf)
    mask = np.zeros((H, W))
    # feature-pixel centers in image coordinates
    ui = (np.arange(W) + 0.5) * cfg.stride - 0.5
    vi = (np.arange(H) + 0.5) * cfg.stride - 0.5
    focal = calib.K[0, 0]
    for b in boxes:
        u, v, d = project_to_image(np.array([b.cx, b.cy, b.cz]), calib)
        if d < bins.d_min or d >= bins.d_max:
            continue
        half_w = 0.5 * focal * math.sqrt(b.l * b.w) / d
        half_h = 0.5 * focal * b.h / d
        if u + half_w < 0 or u - half_w > W * cfg.stride:
            continue
        sx = max(half_w / 2, 0.6 * cfg.stride)
        sy = max(half_h / 2, 0.6 * cfg.stride)
        blob = np.exp(-((ui[None, :] - u) ** 2) / (2 * sx * sx) - ((vi[:, None] - v) ** 2) / (2 * sy * sy))
        support = blob > 0.3
        d_cue = d * (1.0 + rng.normal(0.0, cfg.depth_noise * d))
        cls_code = np.zeros(3)
        cls_code[b.cls] = 1.0
        values = np.concatenate([cls_code, [d_cue / bins.d_max, math.sin(b.yaw), math.cos(b.yaw), 1.0, b.l / 5.0]])
        # nearer objects occlude farther ones pixel by pixel
        nearer = support & (d < owner_depth)
        for ch in range(C):
            # the depth cue is flat over the support so a 1x1 depth head can decode it
            fill = values[ch] if ch == 3 else values[ch] * blob
            feats[ch] = np.where(nearer, fill, feats[ch])
        owner_depth = np.where(nearer, d, owner_depth)
        k = int(bins.index(d))
        gt[:, nearer] = 0.0
        gt[k, nearer] = 1.0
        mask[nearer] = 1.0
    feats += rng.normal(0.0, cfg.feature_noise, size=feats.shape)
    return Feature2D(feats, cfg.stride), gt, mask


def gen_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Deterministic scene for ``(seed, cfg)``."""
    rng = np.random.default_rng(seed)
    calib = cfg.calib()
    boxes = _sample_boxes(rng, cfg)
    radar = accumulate_sweeps(boxes, cfg, rng)
    cam, gt, mask = _camera_features(rng, boxes, cfg, calib)
    return Scene(boxes, radar, cam, gt, mask, calib, seed)


def gen_scenes(seeds: Sequence[int], cfg: SceneConfig = SceneConfig()) -> List[Scene]:
    return [gen_scene(int(s), cfg) for s in seeds]


def benchmark_scene(cfg: SceneConfig = SceneConfig(), seed: int = 0) -> Scene:
    """One large vehicle ahead and a pedestrian cluster to its side, for feature-map dumps."""
    rng = np.random.default_rng(seed)
    calib = cfg.calib()
    boxes = [
        Box3D(1.0, 14.0, 1.5, 8.0, 2.5, 3.0, math.pi / 2, 0.0, 4.0, 0),
        Box3D(-5.0, 9.0, 0.875, 0.7, 0.7, 1.75, 0.3, 0.5, 0.0, 1),
        Box3D(-6.0, 9.8, 0.875, 0.7, 0.7, 1.75, -1.0, 0.5, 0.2, 1),
        Box3D(-5.4, 10.9, 0.875, 0.7, 0.7, 1.75, 2.0, 0.0, 0.0, 1),
    ]
    radar = accumulate_sweeps(boxes, cfg, rng)
    cam, gt, mask = _camera_features(rng, boxes, cfg, calib)
    return Scene(boxes, radar, cam, gt, mask, calib, seed)


# --------------------------------------------------------------------------
# BEV-domain augmentation

def _rot90_xy(x: float, y: float, grid: BevGrid, k: int) -> Tuple[float, float]:
    x0, y0 = 0.5 * (grid.x_min + grid.x_max), 0.5 * (grid.y_min + grid.y_max)
    dx, dy = x - x0, y - y0
    for _ in range(k % 4):
        dx, dy = -dy, dx
    return x0 + dx, y0 + dy


def bev_augment(F: np.ndarray, boxes: Sequence[Box3D], grid: BevGrid, flip_x: bool = False, rot90_k: int = 0):
    """Jointly mirror (lateral axis) then rotate by ``rot90_k`` quarter turns about the grid center.

    Rows of ``F`` index forward cells and columns lateral cells, so a
    counter-clockwise ego rotation maps to ``np.rot90`` with ``axes=(1, 2)``.
    """
    k = rot90_k % 4
    if k and (grid.nx != grid.ny or not math.isclose(grid.cell_x, grid.cell_y)):
        raise ConfigError("quarter-turn rotation needs a square grid with square cells")
    x0 = 0.5 * (grid.x_min + grid.x_max)
    out = F
    new_boxes = list(boxes)
    if flip_x:
        out = out[:, :, ::-1]
        new_boxes = [
            replace(b, cx=2 * x0 - b.cx, yaw=math.pi - b.yaw, vx=-b.vx) for b in new_boxes
        ]
    if k:
        out = np.rot90(out, k=k, axes=(2, 1))
        rotated = []
        for b in new_boxes:
            cx, cy = _rot90_xy(b.cx, b.cy, grid, k)
            vx, vy = b.vx, b.vy
            for _ in range(k):
                vx, vy = -vy, vx
            rotated.append(replace(b, cx=cx, cy=cy, yaw=b.yaw + k * math.pi / 2, vx=vx, vy=vy))
        new_boxes = rotated
    return np.ascontiguousarray(out), new_boxes


def bev_augment_backward(dF: np.ndarray, flip_x: bool = False, rot90_k: int = 0) -> np.ndarray:
    """Gradient of :func:`bev_augment` w.r.t. its input map (the inverse permutation)."""
    out = dF
    k = rot90_k % 4
    if k:
        out = np.rot90(out, k=-k, axes=(2, 1))
    if flip_x:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


# --------------------------------------------------------------------------
# disk I/O shared with the CLI

def write_scene(scene: Scene, out_dir, name: Optional[str] = None) -> dict:
    """Write radar CSV, KITTI label and calibration text, and tensor binaries for one frame."""
    from .evaluation import format_kitti_calib, format_labels
    from .radar import write_radar_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = name or f"{scene.seed:06d}"
    paths = {
        "radar": out / f"{stem}_radar.csv",
        "label": out / f"{stem}_label.txt",
        "calib": out / f"{stem}_calib.txt",
        "features": out / f"{stem}_cam.bin",
        "depth": out / f"{stem}_depth.bin",
        "mask": out / f"{stem}_mask.bin",
        "velocity": out / f"{stem}_vel.csv",
    }
    with open(paths["radar"], "w", newline="") as fh:
        write_radar_csv(scene.radar, fh)
    paths["label"].write_text(format_labels(scene.boxes, scene.calib))
    # KITTI labels have no velocity field; one "vx,vy" row per label line
    paths["velocity"].write_text("".join(f"{b.vx!r},{b.vy!r}\n" for b in scene.boxes))
    paths["calib"].write_text(format_kitti_calib(scene.calib))
    T.save_tensor(paths["features"], scene.cam_features.tensor)
    T.save_tensor(paths["depth"], scene.gt_depth)
    T.save_tensor(paths["mask"], scene.depth_mask)
    return paths


def read_scene(frame_dir, stem: str, stride: int = 16) -> Scene:
    """Load a frame written by :func:`write_scene`; missing radar/camera files give empty inputs."""
    from .evaluation import parse_kitti_calib, parse_labels
    from .radar import read_radar_csv

    d = Path(frame_dir)
    calib = parse_kitti_calib((d / f"{stem}_calib.txt").read_text())
    label_path = d / f"{stem}_label.txt"
    boxes = [g.box for g in parse_labels(label_path.read_text(), calib)] if label_path.exists() else []
    vel_path = d / f"{stem}_vel.csv"
    if vel_path.exists():
        rows = [line.split(",") for line in vel_path.read_text().splitlines() if line.strip()]
        if len(rows) != len(boxes):
            raise ValueError(f"{vel_path.name} has {len(rows)} rows for {len(boxes)} labels")
        boxes = [replace(b, vx=float(r[0]), vy=float(r[1])) for b, r in zip(boxes, rows)]
    radar_path = d / f"{stem}_radar.csv"
    if radar_path.exists():
        with open(radar_path, newline="") as fh:
            radar = read_radar_csv(fh)
    else:
        radar = None
    feat_path = d / f"{stem}_cam.bin"
    cam = Feature2D(T.load_tensor(feat_path), stride) if feat_path.exists() else None
    depth_path, mask_path = d / f"{stem}_depth.bin", d / f"{stem}_mask.bin"
    gt = T.load_tensor(depth_path) if depth_path.exists() else None
    mask = T.load_tensor(mask_path) if mask_path.exists() else None
    try:
        seed = int(stem)
    except ValueError:
        seed = -1
    return Scene(boxes, radar, cam, gt, mask, calib, seed)


def list_frames(frame_dir) -> List[str]:
    return sorted(p.name[: -len("_calib.txt")] for p in Path(frame_dir).glob("*_calib.txt"))
