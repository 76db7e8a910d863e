"""KITTI-format label/calibration I/O, rotated-box IoU and per-class average precision."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import CameraCalib, calib_from_kitti, calib_to_kitti
from .head import CLASSES, Box3D, Detection, wrap_angle

IOU_THRESHOLDS = {"Car": 0.5, "Pedestrian": 0.25, "Cyclist": 0.25}


class LabelParseError(ValueError):
    def __init__(self, line: int, column: int, message: str):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


# --------------------------------------------------------------------------
# labels

@dataclass(frozen=True)
class GtLabel:
    box: Box3D
    name: str
    truncated: float = 0.0
    occluded: int = 0
    alpha: float = 0.0
    bbox: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    score: Optional[float] = None


_DEFAULT_AXES = CameraCalib.forward_camera(1.0, 0.0, 0.0, height=0.0)


def _cam_to_ego(calib: CameraCalib, p) -> np.ndarray:
    return (np.asarray(p, dtype=np.float64) - calib.t) @ calib.R


def _ego_dir_to_cam(calib: CameraCalib, v) -> np.ndarray:
    return calib.R @ np.asarray(v, dtype=np.float64)


def parse_labels(text: str, calib: Optional[CameraCalib] = None) -> List[GtLabel]:
    """Parse KITTI label lines into ego-frame boxes.

    ``location`` is the bottom center in camera coordinates and ``rotation_y``
    the heading about the camera's vertical axis.  ``calib`` supplies the
    camera-to-ego transform (default: camera axes at the ego origin).  Lines
    whose class is not one of Car/Pedestrian/Cyclist are skipped.
    """
    calib = calib or _DEFAULT_AXES
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        fields = raw.split()
        if not fields:
            continue
        if len(fields) not in (15, 16):
            raise LabelParseError(lineno, len(fields), f"expected 15 or 16 fields, found {len(fields)}")
        nums = []
        for col, tok in enumerate(fields[1:], start=2):
            try:
                nums.append(float(tok))
            except ValueError:
                raise LabelParseError(lineno, col, f"non-numeric field {tok!r}") from None
        name = fields[0]
        if name not in CLASSES:
            continue
        trunc, occ, alpha = nums[0], int(nums[1]), nums[2]
        bbox = tuple(nums[3:7])
        h, w, l = nums[7:10]
        loc = np.array(nums[10:13])
        ry = nums[13]
        score = nums[14] if len(nums) == 15 else None
        if not (h > 0 and w > 0 and l > 0):
            raise LabelParseError(lineno, 9, "box dimensions must be positive")
        bottom = _cam_to_ego(calib, loc)
        heading_cam = np.array([math.cos(ry), 0.0, -math.sin(ry)])
        heading = heading_cam @ calib.R
        box = Box3D(
            cx=float(bottom[0]), cy=float(bottom[1]), cz=float(bottom[2] + h / 2),
            l=l, w=w, h=h, yaw=math.atan2(heading[1], heading[0]), cls=CLASSES.index(name),
        )
        out.append(GtLabel(box, name, trunc, occ, alpha, bbox, score))
    return out


def format_label(box: Box3D, calib: Optional[CameraCalib] = None, score: Optional[float] = None) -> str:
    """One KITTI label line for ``box`` (inverse of :func:`parse_labels`)."""
    calib = calib or _DEFAULT_AXES
    bottom = np.array([box.cx, box.cy, box.cz - box.h / 2])
    loc = calib.R @ bottom + calib.t
    hv = _ego_dir_to_cam(calib, [math.cos(box.yaw), math.sin(box.yaw), 0.0])
    ry = wrap_angle(math.atan2(-hv[2], hv[0]))
    alpha = wrap_angle(ry - math.atan2(loc[0], loc[2]))
    bbox = _project_bbox(box, calib)
    vals = [0.0, 0, alpha, *bbox, box.h, box.w, box.l, *loc, ry]
    text = f"{box.class_name} {vals[0]:.2f} {vals[1]:d} " + " ".join(f"{v:.6f}" for v in vals[2:])
    if score is not None:
        text += f" {score:.6f}"
    return text


def _project_bbox(box: Box3D, calib: CameraCalib) -> List[float]:
    corners = box.corners_bev()
    z = [box.cz - box.h / 2, box.cz + box.h / 2]
    pts = np.array([[x, y, zz] for x, y in corners for zz in z])
    cam = pts @ calib.R.T + calib.t
    if np.any(cam[:, 2] <= 0.1):
        return [0.0, 0.0, 0.0, 0.0]
    uvw = cam @ calib.K.T
    u, v = uvw[:, 0] / uvw[:, 2], uvw[:, 1] / uvw[:, 2]
    return [float(u.min()), float(v.min()), float(u.max()), float(v.max())]


def format_labels(boxes: Iterable[Box3D], calib: Optional[CameraCalib] = None) -> str:
    return "".join(format_label(b, calib) + "\n" for b in boxes)


def format_detections(dets: Iterable[Detection], calib: Optional[CameraCalib] = None) -> str:
    return "".join(format_label(d.box, calib, d.score) + "\n" for d in dets)


def detections_from_labels(labels: Sequence[GtLabel]) -> List[Detection]:
    return [Detection(l.box, 1.0 if l.score is None else float(np.clip(l.score, 0.0, 1.0))) for l in labels]


def parse_kitti_calib(text: str) -> CameraCalib:
    rows: Dict[str, np.ndarray] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        key, sep, rest = raw.partition(":")
        if not sep:
            raise LabelParseError(lineno, 1, "calibration rows look like 'NAME: values'")
        try:
            rows[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError:
            raise LabelParseError(lineno, 2, "non-numeric calibration value") from None
    for key, n in (("P2", 12), ("R0_rect", 9), ("Tr_velo_to_cam", 12)):
        if key not in rows:
            raise LabelParseError(0, 0, f"missing calibration row {key}")
        if rows[key].size != n:
            raise LabelParseError(0, 0, f"{key} needs {n} values, found {rows[key].size}")
    return calib_from_kitti(rows["P2"], rows["R0_rect"], rows["Tr_velo_to_cam"])


def format_kitti_calib(calib: CameraCalib) -> str:
    mats = calib_to_kitti(calib)
    return "".join(f"{k}: " + " ".join(repr(float(v)) for v in mats[k].ravel()) + "\n" for k in ("P2", "R0_rect", "Tr_velo_to_cam"))


def write_detections_jsonl(dets: Iterable[Detection], fh) -> None:
    import json

    for d in dets:
        b = d.box
        rec = {
            "class": b.class_name, "score": d.score, "cx": b.cx, "cy": b.cy, "cz": b.cz,
            "l": b.l, "w": b.w, "h": b.h, "yaw": b.yaw, "vx": b.vx, "vy": b.vy,
        }
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# IoU

def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip(subject: List[np.ndarray], a: np.ndarray, b: np.ndarray) -> List[np.ndarray]:
    """Keep the part of ``subject`` left of the directed edge a->b."""
    def side(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    out = []
    n = len(subject)
    for i in range(n):
        cur, nxt = subject[i], subject[(i + 1) % n]
        sc, sn = side(cur), side(nxt)
        if sc >= 0:
            out.append(cur)
        if (sc >= 0) != (sn >= 0):
            t = sc / (sc - sn)
            out.append(cur + t * (nxt - cur))
    return out


def bev_intersection(a: Box3D, b: Box3D) -> float:
    pa, pb = a.corners_bev(), b.corners_bev()
    poly = list(pa)
    for i in range(4):
        if not poly:
            return 0.0
        poly = _clip(poly, pb[i], pb[(i + 1) % 4])
    return _polygon_area(np.array(poly)) if len(poly) >= 3 else 0.0


def bev_iou(a: Box3D, b: Box3D) -> float:
    """IoU of the two rotated footprints, via convex polygon clipping."""
    inter = bev_intersection(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou_3d(a: Box3D, b: Box3D) -> float:
    """IoU of upright boxes: footprint intersection times vertical overlap."""
    dz = min(a.cz + a.h / 2, b.cz + b.h / 2) - max(a.cz - a.h / 2, b.cz - b.h / 2)
    if dz <= 0:
        return 0.0
    inter = bev_intersection(a, b) * dz
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


# --------------------------------------------------------------------------
# regions and AP

@dataclass(frozen=True)
class EvalRegion:
    kind: str = "full"
    lateral: Tuple[float, float] = (-4.0, 4.0)
    forward_max: float = 25.0

    def __post_init__(self):
        if self.kind not in ("full", "corridor"):
            raise ValueError(f"unknown region {self.kind!r}")

    def contains(self, box: Box3D) -> bool:
        if self.kind == "full":
            return True
        return self.lateral[0] < box.cx < self.lateral[1] and box.cy < self.forward_max


FULL = EvalRegion("full")
CORRIDOR = EvalRegion("corridor")


def _as_frames(x):
    if not x:
        return [[]]
    first = x[0]
    if isinstance(first, (Detection, Box3D, GtLabel)):
        return [list(x)]
    return [list(f) for f in x]


def _gt_box(g) -> Box3D:
    return g.box if isinstance(g, GtLabel) else g


def match_frame(dets: Sequence[Detection], gts: Sequence[Box3D], iou_thresh: float, iou_fn=iou_3d) -> List[Tuple[float, bool]]:
    """Greedy matching in descending score (ties keep input order); (score, is_tp) per det."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = [False] * len(gts)
    out = []
    for i in order:
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(gts):
            if used[j]:
                continue
            v = iou_fn(dets[i].box, g)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[best] = True
        out.append((dets[i].score, best >= 0))
    return out


def recall_points(n_points: int | str) -> np.ndarray:
    if n_points == 40:
        return np.arange(1, 41) / 40.0
    if n_points == 11:
        return np.arange(0, 11) / 10.0
    raise ValueError(f"unsupported interpolation {n_points!r}")


def interpolated_ap(precision: np.ndarray, recall: np.ndarray, n_points: int | str = 40) -> float:
    """Area under the precision envelope, sampled at fixed recall points or exactly ('all')."""
    if n_points == "all":
        r = np.concatenate([[0.0], recall, [1.0]])
        p = np.concatenate([[0.0], precision, [0.0]])
        for i in range(len(p) - 2, -1, -1):
            p[i] = max(p[i], p[i + 1])
        idx = np.nonzero(r[1:] != r[:-1])[0]
        return float(np.sum((r[idx + 1] - r[idx]) * p[idx + 1]))
    total = 0.0
    pts = recall_points(n_points)
    for r in pts:
        ok = recall >= r
        total += float(precision[ok].max()) if ok.any() else 0.0
    return total / len(pts)


def average_precision(
    dets,
    gts,
    cls: str | int,
    iou_thresh: Optional[float] = None,
    region: EvalRegion = FULL,
    n_points: int | str = 40,
    iou_fn=iou_3d,
) -> float:
    """Per-class AP in percent.

    ``dets`` and ``gts`` are either one frame (a list of detections / boxes)
    or a list of frames.  Returns 0 when the class has no ground truth in the
    region.
    """
    cls_id = CLASSES.index(cls) if isinstance(cls, str) else int(cls)
    if iou_thresh is None:
        iou_thresh = IOU_THRESHOLDS[CLASSES[cls_id]]
    det_frames, gt_frames = _as_frames(dets), _as_frames(gts)
    if len(det_frames) != len(gt_frames):
        raise ValueError(f"{len(det_frames)} detection frames but {len(gt_frames)} ground-truth frames")
    records = []
    n_gt = 0
    for fi, (fd, fg) in enumerate(zip(det_frames, gt_frames)):
        fd = [d for d in fd if d.box.cls == cls_id and region.contains(d.box)]
        fg = [b for b in map(_gt_box, fg) if b.cls == cls_id and region.contains(b)]
        n_gt += len(fg)
        for k, (score, tp) in enumerate(match_frame(fd, fg, iou_thresh, iou_fn)):
            records.append((-score, fi, k, tp))
    if n_gt == 0:
        return 0.0
    records.sort(key=lambda r: r[:3])
    tp = np.cumsum([r[3] for r in records]) if records else np.zeros(0)
    fp = np.arange(1, len(records) + 1) - tp
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return 100.0 * interpolated_ap(precision, recall, n_points)


# --------------------------------------------------------------------------
# report

@dataclass
class EvalReport:
    rows: List[Tuple[str, str, float]] = field(default_factory=list)

    def ap(self, region: str, cls: str) -> float:
        for r, c, v in self.rows:
            if r == region and c == cls:
                return v
        raise KeyError((region, cls))

    def mean_ap(self, region: str) -> float:
        return self.ap(region, "mAP")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region", "class", "ap"])
        for r, c, v in self.rows:
            w.writerow([r, c, f"{v:.2f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        regions = []
        for r, _, _ in self.rows:
            if r not in regions:
                regions.append(r)
        cols = [*CLASSES, "mAP"]
        lines = [f"{'Region':<10}" + "".join(f"{c:>12}" for c in cols)]
        for reg in regions:
            lines.append(f"{reg:<10}" + "".join(f"{self.ap(reg, c):>12.2f}" for c in cols))
        return "\n".join(lines) + "\n"


def evaluate(
    dets_per_frame: Sequence[Sequence[Detection]],
    gts_per_frame: Sequence[Sequence[Box3D]],
    regions: Sequence[EvalRegion] = (FULL, CORRIDOR),
    n_points: int | str = 40,
    iou_fn=iou_3d,
) -> EvalReport:
    """Per-class AP and mAP for each region."""
    if len(dets_per_frame) != len(gts_per_frame):
        raise ValueError(f"{len(dets_per_frame)} detection frames but {len(gts_per_frame)} ground-truth frames")
    report = EvalReport()
    dets = [list(f) for f in dets_per_frame]
    gts = [list(f) for f in gts_per_frame]
    for region in regions:
        aps = []
        for name in CLASSES:
            ap = average_precision(dets, gts, name, IOU_THRESHOLDS[name], region, n_points, iou_fn) if dets else 0.0
            report.rows.append((region.kind, name, ap))
            aps.append(ap)
        report.rows.append((region.kind, "mAP", float(np.mean(aps))))
    return report
