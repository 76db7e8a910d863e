"""Per-cell camera/radar contribution from BEV feature magnitudes, stratified by class and range."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .geometry import BevGrid
from .head import CLASSES, Detection, box_cell

DEFAULT_EDGES = (0.0, 15.0, 30.0, 51.2)


@dataclass
class ContributionMap:
    C: np.ndarray  # ny x nx camera weight
    R: np.ndarray  # ny x nx radar weight, 1 - C


def contribution_maps(F_c_hat: np.ndarray, F_r_hat: np.ndarray) -> ContributionMap:
    """Camera share of the summed per-cell feature L2 norms; 0.5 where both norms vanish."""
    if F_c_hat.shape != F_r_hat.shape:
        raise T.DimensionError(f"camera map {F_c_hat.shape} and radar map {F_r_hat.shape} differ")
    nc = np.sqrt((F_c_hat ** 2).sum(axis=0))
    nr = np.sqrt((F_r_hat ** 2).sum(axis=0))
    total = nc + nr
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(total > 0, nc / np.where(total > 0, total, 1.0), 0.5)
    return ContributionMap(c, 1.0 - c)


@dataclass
class StratRow:
    cls: str
    dist_lo: float
    dist_hi: float
    mean_c: Optional[float]
    mean_r: Optional[float]
    count: int


@dataclass
class StratifiedReport:
    rows: List[StratRow]
    skipped: int = 0

    def row(self, cls: str, bin_index: int) -> StratRow:
        hits = [r for r in self.rows if r.cls == cls]
        return hits[bin_index]

    def by_distance(self) -> List[Tuple[float, float, Optional[float], int]]:
        """Class-pooled (lo, hi, mean C, count) per distance bin."""
        out = []
        edges = sorted({(r.dist_lo, r.dist_hi) for r in self.rows})
        for lo, hi in edges:
            rows = [r for r in self.rows if (r.dist_lo, r.dist_hi) == (lo, hi) and r.count]
            n = sum(r.count for r in rows)
            mean = sum(r.mean_c * r.count for r in rows) / n if n else None
            out.append((lo, hi, mean, n))
        return out

    def by_class(self) -> dict:
        """Distance-pooled mean C per class (None when the class never occurs)."""
        out = {}
        for cls in CLASSES:
            rows = [r for r in self.rows if r.cls == cls and r.count]
            n = sum(r.count for r in rows)
            out[cls] = sum(r.mean_c * r.count for r in rows) / n if n else None
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "dist_lo", "dist_hi", "mean_c", "mean_r", "count"])
            for r in self.rows:
                w.writerow([
                    r.cls, f"{r.dist_lo:g}", f"{r.dist_hi:g}",
                    "" if r.mean_c is None else f"{r.mean_c:.6f}",
                    "" if r.mean_r is None else f"{r.mean_r:.6f}",
                    r.count,
                ])


def _footprint_mean(det: Detection, cmap: ContributionMap, grid: BevGrid) -> Optional[float]:
    b = det.box
    xs, ys = grid.cell_center(np.arange(grid.nx)[None, :], np.arange(grid.ny)[:, None])
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    dx, dy = xs - b.cx, ys - b.cy
    along = c * dx + s * dy
    across = -s * dx + c * dy
    inside = (np.abs(along) <= b.l / 2) & (np.abs(across) <= b.w / 2)
    if not inside.any():
        return None
    return float(cmap.C[inside].mean())


def stratify(
    dets: Sequence[Detection],
    cmap: ContributionMap,
    grid: BevGrid,
    dist_edges: Sequence[float] = DEFAULT_EDGES,
    origin: Tuple[float, float] = (0.0, 0.0),
    footprint: bool = False,
) -> StratifiedReport:
    """Mean camera/radar weight per (class, radial distance bin) over detections."""
    edges = np.asarray(dist_edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("distance edges must be strictly increasing")
    nb = edges.size - 1
    sums = np.zeros((len(CLASSES), nb))
    counts = np.zeros((len(CLASSES), nb), dtype=np.int64)
    skipped = 0
    for det in dets:
        cell = box_cell(det.box, grid)
        if cell is None:
            skipped += 1
            continue
        dist = math.hypot(det.box.cx - origin[0], det.box.cy - origin[1])
        k = int(np.searchsorted(edges, dist, side="right")) - 1
        if k == nb and dist == edges[-1]:
            k = nb - 1
        if not 0 <= k < nb:
            skipped += 1
            continue
        value = _footprint_mean(det, cmap, grid) if footprint else None
        if value is None:
            value = float(cmap.C[cell[1], cell[0]])
        sums[det.box.cls, k] += value
        counts[det.box.cls, k] += 1
    rows = []
    for ci, name in enumerate(CLASSES):
        for k in range(nb):
            n = int(counts[ci, k])
            mean = sums[ci, k] / n if n else None
            rows.append(StratRow(name, float(edges[k]), float(edges[k + 1]), mean, None if mean is None else 1.0 - mean, n))
    return StratifiedReport(rows, skipped)


def _to_gray(x: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, values: np.ndarray) -> None:
    img = _to_gray(values)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5 {w} {h} 255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    head, _, body = data.partition(b"\n")
    magic, w, h, maxval = head.split()
    if magic != b"P5" or maxval != b"255":
        raise ValueError("not an 8-bit binary PGM")
    return np.frombuffer(body, dtype=np.uint8).reshape(int(h), int(w))


def export_contribution(cmap: ContributionMap, path) -> dict:
    """Write ``<path>.csv`` (C values, 6 decimals) and ``<path>_C.pgm`` / ``<path>_R.pgm``."""
    base = os.fspath(path)
    if base.endswith(".csv"):
        base = base[:-4]
    out = {"csv": base + ".csv", "pgm_c": base + "_C.pgm", "pgm_r": base + "_R.pgm"}
    with open(out["csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in cmap.C:
            w.writerow([f"{v:.6f}" for v in row])
    write_pgm(out["pgm_c"], cmap.C)
    write_pgm(out["pgm_r"], cmap.R)
    return out


def read_contribution_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh) if row])


# --------------------------------------------------------------------------
# mechanism study: contribution trends without a trained network

@dataclass(frozen=True)
class StudyConfig:
    """Distance-coded scenes over a 51.2 m grid; camera depth spread grows linearly with range."""
    n_scenes: int = 40
    seed: int = 0
    per_class: int = 3
    depth_sigma0: float = 0.3      # meters
    depth_sigma_slope: float = 0.08
    dist_edges: Tuple[float, ...] = DEFAULT_EDGES


def study_grid() -> BevGrid:
    return BevGrid(-25.6, 25.6, 0.0, 51.2, 64, 64)


def _study_scene_config(cfg: StudyConfig):
    from .geometry import DepthBins
    from .synth import SceneConfig

    n = cfg.per_class
    return SceneConfig(grid=study_grid(), depth_bins=DepthBins(1.0, 51.2, 64), n_cars=n, n_pedestrians=n, n_cyclists=n)


def gaussian_depth(cue: np.ndarray, centers: np.ndarray, sigma0: float, slope: float) -> np.ndarray:
    """Per-pixel depth distribution (D, H, W) centered on ``cue`` meters with spread ``sigma0 + slope * cue``."""
    sigma = sigma0 + slope * np.maximum(cue, 0.0)
    logits = -((centers[:, None, None] - cue[None]) ** 2) / (2.0 * sigma[None] ** 2)
    return T.softmax(logits, axis=0)


def radar_amplitude_features(points: np.ndarray, channels: int) -> np.ndarray:
    """Every point carries its return amplitude ``10^(rcs/20)`` spread evenly over ``channels``."""
    amp = 10.0 ** (points[:, 5] / 20.0)
    return np.repeat(amp[:, None], channels, axis=1) / math.sqrt(channels)


def study_maps(scene, cfg: StudyConfig = StudyConfig()) -> Tuple[np.ndarray, np.ndarray]:
    """Camera BEV (lift + pool of the pseudo image features) and radar BEV (RCS scatter of amplitudes)."""
    from .camera import lift, voxel_pool_efficient
    from .radar import rcs_scatter

    sc = _study_scene_config(cfg)
    feats = scene.cam_features.tensor
    cue = feats[3] * sc.depth_bins.d_max
    depth = gaussian_depth(cue, sc.depth_bins.centers, cfg.depth_sigma0, cfg.depth_sigma_slope)
    Fc = voxel_pool_efficient(lift(feats, depth, scene.calib, sc.depth_bins, scene.cam_features.stride), sc.grid)
    Fr = rcs_scatter(scene.radar, radar_amplitude_features(scene.radar, feats.shape[0]), sc.grid)
    return _unit_scale(Fc), _unit_scale(Fr)


def _unit_scale(F: np.ndarray) -> np.ndarray:
    """Divide by the RMS of the nonzero per-cell norms so neither modality dominates by units alone."""
    norms = np.sqrt((F ** 2).sum(axis=0))
    occupied = norms[norms > 0]
    if occupied.size == 0:
        return F
    return F / math.sqrt(float((occupied ** 2).mean()))


def contribution_study(cfg: StudyConfig = StudyConfig()) -> StratifiedReport:
    """Mean camera weight per (class, distance bin) at ground-truth objects inside the camera view."""
    from .synth import gen_scene

    sc = _study_scene_config(cfg)
    maps = []
    for i in range(cfg.n_scenes):
        scene = gen_scene(cfg.seed + i, sc)
        cmap = contribution_maps(*study_maps(scene, cfg))
        visible = [b for b in scene.boxes if abs(b.cx) < b.cy]
        maps.append((cmap, [Detection(b, 1.0) for b in visible]))
    rows_per_scene = [stratify(d, cmap, sc.grid, cfg.dist_edges) for cmap, d in maps]
    return merge_reports(rows_per_scene)


def merge_reports(reports: Sequence[StratifiedReport]) -> StratifiedReport:
    """Count-weighted merge of reports sharing the same (class, bin) layout."""
    if not reports:
        raise ValueError("nothing to merge")
    merged = []
    for rows in zip(*(r.rows for r in reports)):
        n = sum(r.count for r in rows)
        mean = sum(r.mean_c * r.count for r in rows if r.count) / n if n else None
        first = rows[0]
        merged.append(StratRow(first.cls, first.dist_lo, first.dist_hi, mean, None if mean is None else 1.0 - mean, n))
    return StratifiedReport(merged, sum(r.skipped for r in reports))
