"""Center-based detection head: heatmap/box/velocity branches, losses and peak decoding."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from . import tensor as T
from .geometry import BevGrid
from .params import Params

CLASSES = ("Car", "Pedestrian", "Cyclist")
N_REG = 8
HEAT_CLAMP = 1e-4


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    cls: int = 0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive: {self}")
        if not 0 <= self.cls < len(CLASSES):
            raise ValueError(f"unknown class id {self.cls}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def class_name(self) -> str:
        return CLASSES[self.cls]

    def corners_bev(self) -> np.ndarray:
        """Footprint corners (4, 2), counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = np.array([0.5, -0.5, -0.5, 0.5]) * self.l
        dy = np.array([0.5, 0.5, -0.5, -0.5]) * self.w
        return np.stack([self.cx + c * dx - s * dy, self.cy + s * dx + c * dy], axis=1)


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self.score}")


@dataclass
class HeadOutput:
    heatmap: np.ndarray  # 3 x ny x nx, after sigmoid
    reg: np.ndarray      # 8 x ny x nx: dx, dy, cz, log l, log w, log h, sin yaw, cos yaw
    vel: np.ndarray      # 2 x ny x nx


# --------------------------------------------------------------------------
# ground-truth heatmaps

def gaussian_radius(height: float, width: float, min_overlap: float = 0.3) -> float:
    a1, b1 = 1.0, height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2, b2 = 4.0, 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3, b3 = 4 * min_overlap, -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def _draw_gaussian(hm: np.ndarray, ix: int, iy: int, radius: int) -> None:
    sigma = (2 * radius + 1) / 6.0
    ys, xs = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    g[g < np.finfo(np.float64).eps * g.max()] = 0
    h, w = hm.shape
    l, r = min(ix, radius), min(w - ix, radius + 1)
    t, b = min(iy, radius), min(h - iy, radius + 1)
    window = hm[iy - t:iy + b, ix - l:ix + r]
    np.maximum(window, g[radius - t:radius + b, radius - l:radius + r], out=window)


def box_cell(box: Box3D, grid: BevGrid):
    fx, fy = grid.cell_coords(box.cx, box.cy)
    ix, iy = int(np.floor(fx)), int(np.floor(fy))
    if not (0 <= ix < grid.nx and 0 <= iy < grid.ny):
        return None
    return ix, iy, float(fx - ix), float(fy - iy)


def render_gt_heatmap(boxes: Sequence[Box3D], grid: BevGrid, min_radius: int = 2, min_overlap: float = 0.3) -> np.ndarray:
    """Per-class Gaussian bumps at box centers; overlapping bumps combine by max."""
    hm = np.zeros((len(CLASSES), grid.ny, grid.nx))
    for box in boxes:
        cell = box_cell(box, grid)
        if cell is None:
            continue
        r = gaussian_radius(box.l / grid.cell_x, box.w / grid.cell_y, min_overlap)
        _draw_gaussian(hm[box.cls], cell[0], cell[1], max(min_radius, int(r)))
    return hm


def encode_targets(boxes: Sequence[Box3D], grid: BevGrid):
    """Center cells plus regression/velocity targets of every in-grid box."""
    rows = []
    for box in boxes:
        cell = box_cell(box, grid)
        if cell is None:
            continue
        ix, iy, fx, fy = cell
        reg = [fx, fy, box.cz, math.log(box.l), math.log(box.w), math.log(box.h), math.sin(box.yaw), math.cos(box.yaw)]
        rows.append((ix, iy, reg, [box.vx, box.vy]))
    ix = np.array([r[0] for r in rows], dtype=np.int64)
    iy = np.array([r[1] for r in rows], dtype=np.int64)
    reg = np.array([r[2] for r in rows], dtype=np.float64).reshape(-1, N_REG)
    vel = np.array([r[3] for r in rows], dtype=np.float64).reshape(-1, 2)
    return ix, iy, reg, vel


# --------------------------------------------------------------------------
# head

def init_head(rng: np.random.Generator, c: int, trunk: bool = True, heat_prior: float = 0.1) -> Params:
    p: Params = {
        "heat.w": rng.normal(0.0, 0.01, size=(len(CLASSES), c)),
        "heat.b": np.full(len(CLASSES), -math.log((1 - heat_prior) / heat_prior)),
        "reg.w": rng.normal(0.0, 0.01, size=(N_REG, c)),
        "reg.b": np.zeros(N_REG),
        "vel.w": rng.normal(0.0, 0.01, size=(2, c)),
        "vel.b": np.zeros(2),
    }
    if trunk:
        p["trunk.w"] = rng.normal(0.0, np.sqrt(2.0 / (9 * c)), size=(c, c, 3, 3))
        p["trunk.b"] = np.zeros(c)
    return p


def head_forward_cached(F: np.ndarray, p: Params):
    x = F
    pre = None
    if "trunk.w" in p:
        pre = T.conv2d(F, p["trunk.w"], p["trunk.b"], 1, 1)
        x = T.relu(pre)
    heat = T.sigmoid(T.conv1x1(x, p["heat.w"], p["heat.b"]))
    reg = T.conv1x1(x, p["reg.w"], p["reg.b"])
    vel = T.conv1x1(x, p["vel.w"], p["vel.b"])
    return HeadOutput(heat, reg, vel), (F, pre, x, heat, p)


def head_backward(d: HeadOutput, cache):
    """Gradient of the head given gradients w.r.t. each output map; returns (dF, grads)."""
    F, pre, x, heat, p = cache
    grads: Params = {}
    dlogit = T.sigmoid_backward(d.heatmap, heat)
    dx = np.zeros_like(x)
    for name, dout in (("heat", dlogit), ("reg", d.reg), ("vel", d.vel)):
        dxi, dw, db = T.conv1x1_backward(dout, x, p[f"{name}.w"])
        dx += dxi
        grads[f"{name}.w"], grads[f"{name}.b"] = dw, db
    if pre is None:
        return dx, grads
    dpre = T.relu_backward(dx, pre)
    dF, dw, db = T.conv2d_backward(dpre, F, p["trunk.w"], 1, 1)
    grads["trunk.w"], grads["trunk.b"] = dw, db
    return dF, grads


def head_forward(F: np.ndarray, params: Params) -> HeadOutput:
    return head_forward_cached(F, params)[0]


# --------------------------------------------------------------------------
# losses

def focal_loss(heat: np.ndarray, gt: np.ndarray, norm: float, alpha: float = 2.0, beta: float = 4.0):
    """Penalty-reduced Gaussian focal loss; returns (loss, d loss / d heat)."""
    p = np.clip(heat, HEAT_CLAMP, 1.0 - HEAT_CLAMP)
    pos = gt == 1.0
    neg_w = (1.0 - gt) ** beta
    logp, log1p = np.log(p), np.log(1.0 - p)
    pos_term = -((1.0 - p) ** alpha) * logp
    neg_term = -neg_w * (p ** alpha) * log1p
    loss = float(np.where(pos, pos_term, neg_term).sum()) / norm
    dpos = alpha * (1.0 - p) ** (alpha - 1) * logp - (1.0 - p) ** alpha / p
    dneg = -neg_w * (alpha * p ** (alpha - 1) * log1p - p ** alpha / (1.0 - p))
    grad = np.where(pos, dpos, dneg) / norm
    inside = (heat > HEAT_CLAMP) & (heat < 1.0 - HEAT_CLAMP)
    return loss, grad * inside


def detection_loss_forward(pred: HeadOutput, boxes: Sequence[Box3D], grid: BevGrid, weights=(1.0, 1.0, 1.0)):
    """Returns ((L_cls, L_box, L_vel), HeadOutput of gradients of the weighted sum)."""
    w_cls, w_box, w_vel = weights
    gt_heat = render_gt_heatmap(boxes, grid)
    ix, iy, reg_t, vel_t = encode_targets(boxes, grid)
    norm = float(max(len(ix), 1))
    l_cls, dheat = focal_loss(pred.heatmap, gt_heat, norm)
    dreg = np.zeros_like(pred.reg)
    dvel = np.zeros_like(pred.vel)
    l_box = l_vel = 0.0
    if len(ix):
        diff_r = pred.reg[:, iy, ix].T - reg_t
        diff_v = pred.vel[:, iy, ix].T - vel_t
        l_box = float(np.abs(diff_r).sum()) / norm
        l_vel = float(np.abs(diff_v).sum()) / norm
        # boxes sharing a cell each contribute their own term
        np.add.at(dreg, (slice(None), iy, ix), (np.sign(diff_r) / norm).T)
        np.add.at(dvel, (slice(None), iy, ix), (np.sign(diff_v) / norm).T)
    grads = HeadOutput(w_cls * dheat, w_box * dreg, w_vel * dvel)
    return (l_cls, l_box, l_vel), grads


def detection_loss(pred: HeadOutput, boxes: Sequence[Box3D], grid: BevGrid) -> Tuple[float, float, float]:
    """Heatmap focal loss, L1 box regression and L1 velocity at ground-truth centers."""
    return detection_loss_forward(pred, boxes, grid)[0]


# --------------------------------------------------------------------------
# decoding

def _maxpool3(x: np.ndarray) -> np.ndarray:
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    out = np.full_like(x, -np.inf)
    h, w = x.shape[1:]
    for dy in range(3):
        for dx in range(3):
            np.maximum(out, padded[:, dy:dy + h, dx:dx + w], out=out)
    return out


def decode(pred: HeadOutput, grid: BevGrid, score_thresh: float = 0.1, max_dets: int = 100) -> List[Detection]:
    """Local maxima of the heatmaps above ``score_thresh``, best first."""
    if not 0.0 <= score_thresh <= 1.0:
        raise ValueError("score threshold must lie in [0, 1]")
    heat = pred.heatmap
    peaks = (heat == _maxpool3(heat)) & (heat > score_thresh)
    cls, iy, ix = np.nonzero(peaks)
    scores = heat[cls, iy, ix]
    order = np.lexsort((cls, ix, iy, -scores))[:max_dets]
    dets = []
    for j in order:
        c, y, x = int(cls[j]), int(iy[j]), int(ix[j])
        r = pred.reg[:, y, x]
        v = pred.vel[:, y, x]
        box = Box3D(
            cx=grid.x_min + (x + r[0]) * grid.cell_x,
            cy=grid.y_min + (y + r[1]) * grid.cell_y,
            cz=float(r[2]),
            l=float(np.exp(r[3])), w=float(np.exp(r[4])), h=float(np.exp(r[5])),
            yaw=math.atan2(r[6], r[7]),
            vx=float(v[0]), vy=float(v[1]),
            cls=c,
        )
        dets.append(Detection(box, float(np.clip(scores[j], 0.0, 1.0))))
    return dets


def exact_head_output(boxes: Sequence[Box3D], grid: BevGrid) -> HeadOutput:
    """Head output that reproduces ``boxes`` exactly: rendered heatmap plus exact targets."""
    heat = render_gt_heatmap(boxes, grid)
    reg = np.zeros((N_REG, grid.ny, grid.nx))
    vel = np.zeros((2, grid.ny, grid.nx))
    ix, iy, reg_t, vel_t = encode_targets(boxes, grid)
    reg[:, iy, ix] = reg_t.T
    vel[:, iy, ix] = vel_t.T
    return HeadOutput(heat, reg, vel)

