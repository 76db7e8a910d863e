"""Camera branch: calibration-conditioned gating, depth distribution, lift and voxel pooling."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import tensor as T
from .geometry import BevGrid, CameraCalib, DepthBins, frustum_to_ego
from .params import Params

logger = logging.getLogger(__name__)


@dataclass
class Feature2D:
    tensor: np.ndarray  # C x H_f x W_f
    stride: int = 16

    def __post_init__(self):
        if self.tensor.ndim != 3 or min(self.tensor.shape) < 1:
            raise T.DimensionError(f"feature map must be C x H x W, got {self.tensor.shape}")


@dataclass
class FrustumFeatures:
    features: np.ndarray    # C x D x H x W
    ego_coords: np.ndarray  # (D*H*W) x 3, same (d, h, w) order as features


# --------------------------------------------------------------------------
# calibration-conditioned channel gating

def init_se(rng: np.random.Generator, channels: int, hidden: int = 16, calib_dim: int = 21) -> Params:
    # raw calibration entries reach several hundred pixels, so the first layer starts tiny
    return {
        "w1": rng.normal(0.0, 1e-3, size=(calib_dim, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, 0.1, size=(hidden, channels)),
        "b2": np.full(channels, 2.0),
    }


def se_forward(f: np.ndarray, calib_vec: np.ndarray, p: Params):
    calib_vec = np.asarray(calib_vec, dtype=np.float64).reshape(1, -1)
    if calib_vec.shape[1] != p["w1"].shape[0]:
        raise T.DimensionError(
            f"calibration vector has {calib_vec.shape[1]} entries, MLP expects {p['w1'].shape[0]}"
        )
    if p["w2"].shape[1] != f.shape[0]:
        raise T.DimensionError("SE gate width does not match feature channels")
    h_pre = T.linear(calib_vec, p["w1"], p["b1"])
    h = T.relu(h_pre)
    logits = T.linear(h, p["w2"], p["b2"])
    gate = T.sigmoid(logits)[0]
    return f * gate[:, None, None], (f, calib_vec, h_pre, h, gate, p)


def se_backward(dout: np.ndarray, cache) -> Tuple[np.ndarray, Params]:
    f, calib_vec, h_pre, h, gate, p = cache
    df = dout * gate[:, None, None]
    dgate = (dout * f).sum(axis=(1, 2))
    dlogits = T.sigmoid_backward(dgate, gate)[None, :]
    dh, dw2, db2 = T.linear_backward(dlogits, h, p["w2"])
    dh_pre = T.relu_backward(dh, h_pre)
    _, dw1, db1 = T.linear_backward(dh_pre, calib_vec, p["w1"])
    return df, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def se_condition(f: np.ndarray, calib_vec: np.ndarray, params: Params) -> np.ndarray:
    """Scale each channel of ``f`` by ``sigmoid(MLP(calib_vec))``."""
    return se_forward(f, calib_vec, params)[0]


# --------------------------------------------------------------------------
# depth distribution

def init_depth_head(rng: np.random.Generator, channels: int, n_bins: int) -> Params:
    return {"w": rng.normal(0.0, 0.1, size=(n_bins, channels)), "b": np.zeros(n_bins)}


def depth_head_forward(f: np.ndarray, p: Params):
    logits = T.conv1x1(f, p["w"], p["b"])
    prob = T.softmax(logits, axis=0)
    return prob, (f, prob, p)


def depth_head_backward(dprob: np.ndarray, cache) -> Tuple[np.ndarray, Params]:
    f, prob, p = cache
    dlogits = T.softmax_backward(dprob, prob, axis=0)
    df, dw, db = T.conv1x1_backward(dlogits, f, p["w"])
    return df, {"w": dw, "b": db}


def depth_head(f: np.ndarray, bins: DepthBins, params: Params) -> np.ndarray:
    if params["w"].shape[0] != bins.n_bins:
        raise T.DimensionError("depth head output width does not match bin count")
    return depth_head_forward(f, params)[0]


# --------------------------------------------------------------------------
# lift

def frustum_points(shape_hw: Tuple[int, int], stride: int, calib: CameraCalib, bins: DepthBins) -> np.ndarray:
    """Ego coordinates of every (depth-bin center, feature pixel center), ordered (d, h, w)."""
    h, w = shape_hw
    u = (np.arange(w) + 0.5) * stride - 0.5
    v = (np.arange(h) + 0.5) * stride - 0.5
    d = bins.centers
    dd, vv, uu = np.meshgrid(d, v, u, indexing="ij")
    return frustum_to_ego(uu, vv, dd, calib).reshape(-1, 3)


def lift_features(f: np.ndarray, depth: np.ndarray) -> np.ndarray:
    if f.shape[1:] != depth.shape[1:]:
        raise T.DimensionError(f"feature map {f.shape} and depth {depth.shape} disagree spatially")
    return f[:, None, :, :] * depth[None, :, :, :]


def lift_backward(dout: np.ndarray, f: np.ndarray, depth: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    df = np.einsum("cdhw,dhw->chw", dout, depth)
    ddepth = np.einsum("cdhw,chw->dhw", dout, f)
    return df, ddepth


def lift(f: np.ndarray, depth: np.ndarray, calib: CameraCalib, bins: DepthBins, stride: int = 16) -> FrustumFeatures:
    """Outer product of features and depth probabilities, tagged with ego coordinates."""
    return FrustumFeatures(lift_features(f, depth), frustum_points(f.shape[1:], stride, calib, bins))


# --------------------------------------------------------------------------
# voxel pooling

def frustum_cell_ids(ego_coords: np.ndarray, grid: BevGrid) -> np.ndarray:
    """Flat BEV cell index (iy * nx + ix) per frustum point, -1 when outside the grid."""
    ix, iy, inside = grid.cells(ego_coords)
    return np.where(inside, iy * grid.nx + ix, -1)


def voxel_pool_reference(ff: FrustumFeatures, grid: BevGrid, ids: Optional[np.ndarray] = None) -> np.ndarray:
    """Sum frustum features per BEV cell with the sort / prefix-sum / segment-difference trick."""
    if ids is None:
        ids = frustum_cell_ids(ff.ego_coords, grid)
    c = ff.features.shape[0]
    feats = ff.features.reshape(c, -1)
    bev = np.zeros((c, grid.ny * grid.nx), dtype=feats.dtype)
    keep = np.nonzero(ids >= 0)[0]
    if keep.size == 0:
        return bev.reshape(c, grid.ny, grid.nx)
    order = keep[np.argsort(ids[keep], kind="stable")]
    ranks = ids[order]
    cs = np.cumsum(feats[:, order], axis=1)
    last = np.ones(ranks.size, dtype=bool)
    last[:-1] = ranks[1:] != ranks[:-1]
    seg_end = cs[:, last]
    seg = seg_end.copy()
    seg[:, 1:] -= seg_end[:, :-1]
    bev[:, ranks[last]] = seg
    return bev.reshape(c, grid.ny, grid.nx)


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get("HYBRIDBEV_THREADS", "1")))
    except ValueError:
        return 1


def voxel_pool_efficient(
    ff: FrustumFeatures,
    grid: BevGrid,
    ids: Optional[np.ndarray] = None,
    workers: Optional[int] = None,
) -> np.ndarray:
    """Direct scatter-add per point, split over disjoint cell ranges.

    Each cell accumulates its points in frustum order whatever the worker
    count, so the result does not depend on ``workers``.
    """
    if ids is None:
        ids = frustum_cell_ids(ff.ego_coords, grid)
    workers = workers or _default_workers()
    c = ff.features.shape[0]
    feats = ff.features.reshape(c, -1)
    n_cells = grid.ny * grid.nx
    bev = np.zeros((c, n_cells), dtype=feats.dtype)
    keep = ids >= 0
    kid = ids[keep]
    kf = feats[:, keep]
    bounds = np.linspace(0, n_cells, workers + 1).astype(np.int64)

    def run(lo: int, hi: int) -> None:
        sel = (kid >= lo) & (kid < hi)
        local = kid[sel] - lo
        for ch in range(c):
            bev[ch, lo:hi] = np.bincount(local, weights=kf[ch, sel], minlength=hi - lo)

    if workers == 1:
        run(0, n_cells)
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(lambda i: run(bounds[i], bounds[i + 1]), range(workers)))
    return bev.reshape(c, grid.ny, grid.nx)


def voxel_pool_backward(dbev: np.ndarray, ids: np.ndarray, feature_shape) -> np.ndarray:
    c = dbev.shape[0]
    flat = dbev.reshape(c, -1)
    out = np.where(ids >= 0, flat[:, np.maximum(ids, 0)], 0.0)
    return out.reshape(feature_shape)


# --------------------------------------------------------------------------
# explicit depth supervision

LOG_CLAMP = 1e-12


def depth_loss(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> Tuple[float, np.ndarray]:
    """Binary cross-entropy between predicted bin probabilities and one-hot ground truth.

    Averaged over every (valid pixel, bin) pair, so a uniform two-bin
    prediction scores ``ln 2``.  Pixels with ``mask == 0`` are ignored; with no
    valid pixel the loss is 0 and a warning is logged.  Returns the loss and
    its gradient with respect to ``pred``.
    """
    if pred.shape != gt.shape or pred.shape[1:] != mask.shape:
        raise T.DimensionError(f"depth shapes disagree: {pred.shape}, {gt.shape}, {mask.shape}")
    valid = mask.astype(bool)
    n = int(valid.sum()) * pred.shape[0]
    if n == 0:
        logger.warning("depth loss: no valid pixels")
        return 0.0, np.zeros_like(pred)
    p = np.clip(pred, LOG_CLAMP, 1.0 - LOG_CLAMP)
    w = valid[None].astype(pred.dtype)
    terms = gt * np.log(p) + (1.0 - gt) * np.log(1.0 - p)
    loss = -float((terms * w).sum()) / n
    dp = -(gt / p - (1.0 - gt) / (1.0 - p)) * w / n
    inside = (pred > LOG_CLAMP) & (pred < 1.0 - LOG_CLAMP)
    return loss, dp * inside
