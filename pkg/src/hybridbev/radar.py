"""Dual-stream radar encoder: point blocks, distance-modulated self-attention,
stream coupling, RCS-aware BEV scattering and a small convolutional BEV encoder.

Point arrays are (N, 7) with columns ``x, y, z, vx_comp, vy_comp, rcs, t``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .geometry import BevGrid
from .layers import cbr_backward, cbr_forward, init_cbr
from .params import Params, accumulate, glorot, prefixed, scoped

POINT_FIELDS = ("x", "y", "z", "vx_comp", "vy_comp", "rcs", "t")


class EmptyPointSetError(ValueError):
    pass


@dataclass(frozen=True)
class RadarPoint:
    x: float
    y: float
    z: float
    vx_comp: float
    vy_comp: float
    rcs: float
    t: float = 0.0


def points_array(points: Iterable[RadarPoint] | np.ndarray) -> np.ndarray:
    if isinstance(points, np.ndarray):
        return points.reshape(-1, 7).astype(np.float64)
    rows = [astuple(p) for p in points]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 7)


def write_radar_csv(points: np.ndarray | Sequence[RadarPoint], fh) -> None:
    arr = points_array(points)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(POINT_FIELDS)
    for row in arr:
        w.writerow([repr(float(v)) for v in row])


def read_radar_csv(fh) -> np.ndarray:
    if isinstance(fh, str):
        fh = io.StringIO(fh)
    reader = csv.reader(fh)
    header = next(reader, None)
    if header is None:
        return np.zeros((0, 7))
    if tuple(h.strip() for h in header) != POINT_FIELDS:
        raise ValueError(f"unexpected radar CSV header: {header}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 7:
            raise ValueError(f"radar CSV line {lineno}: expected 7 fields, got {len(row)}")
        rows.append([float(v) for v in row])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 7)


# --------------------------------------------------------------------------
# multi-head attention over point sets (shared by DMSA and stream coupling)

def init_mha(rng: np.random.Generator, channels: int, heads: int, zero_output: bool = True) -> Params:
    d = channels // heads
    wo = np.zeros((heads, d, channels)) if zero_output else glorot(rng, d, channels, (heads, d, channels))
    return {
        "wq": glorot(rng, channels, d, (heads, channels, d)),
        "wk": glorot(rng, channels, d, (heads, channels, d)),
        "wv": glorot(rng, channels, d, (heads, channels, d)),
        "wo": wo,
    }


def mha_forward(xq: np.ndarray, xkv: np.ndarray, p: Params, bias: np.ndarray | None = None):
    """Attention of ``xq`` (Nq, C) over ``xkv`` (Nk, C) without the residual."""
    h, c, d = p["wq"].shape
    if xq.shape[1] != c or xkv.shape[1] != c:
        raise T.DimensionError(f"attention width {c} does not match inputs {xq.shape}, {xkv.shape}")
    q = xq[None] @ p["wq"]
    k = xkv[None] @ p["wk"]
    v = xkv[None] @ p["wv"]
    s = (q @ k.transpose(0, 2, 1)) / np.sqrt(d)
    if bias is not None:
        s = s + bias[None]
    a = T.softmax(s, axis=-1)
    o = a @ v
    out = (o @ p["wo"]).sum(axis=0)
    T.add_macs(xq.shape[0] * c * c + 2 * xkv.shape[0] * c * c + 2 * h * xq.shape[0] * xkv.shape[0] * d + xq.shape[0] * c * c)
    return out, (xq, xkv, q, k, v, a, o, p)


def mha_backward(dout: np.ndarray, cache):
    """Returns (dxq, dxkv, dbias, grads)."""
    xq, xkv, q, k, v, a, o, p = cache
    d = q.shape[-1]
    dwo = o.transpose(0, 2, 1) @ dout[None]
    do = dout[None] @ p["wo"].transpose(0, 2, 1)
    da = do @ v.transpose(0, 2, 1)
    dv = a.transpose(0, 2, 1) @ do
    ds = T.softmax_backward(da, a, axis=-1)
    dbias = ds.sum(axis=0)
    ds = ds / np.sqrt(d)
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    grads = {
        "wq": xq.T[None] @ dq,
        "wk": xkv.T[None] @ dk,
        "wv": xkv.T[None] @ dv,
        "wo": dwo,
    }
    dxq = (dq @ p["wq"].transpose(0, 2, 1)).sum(axis=0)
    dxkv = (dk @ p["wk"].transpose(0, 2, 1)).sum(axis=0) + (dv @ p["wv"].transpose(0, 2, 1)).sum(axis=0)
    return dxq, dxkv, dbias, grads


# --------------------------------------------------------------------------
# point-based block

def init_point_block(rng: np.random.Generator, cin: int, cout: int) -> Params:
    hidden = cout // 2
    return {"w": rng.normal(0.0, np.sqrt(2.0 / cin), size=(cin, hidden)), "b": np.zeros(hidden)}


def point_block_forward(feats: np.ndarray, p: Params):
    if feats.shape[0] == 0:
        raise EmptyPointSetError("point block needs at least one point")
    pre = T.linear(feats, p["w"], p["b"])
    h = T.relu(pre)
    arg = h.argmax(axis=0)
    g = h[arg, np.arange(h.shape[1])]
    out = np.concatenate([h, np.broadcast_to(g, h.shape)], axis=1)
    return out, (feats, pre, arg, p)


def point_block_backward(dout: np.ndarray, cache):
    feats, pre, arg, p = cache
    hid = pre.shape[1]
    dh = dout[:, :hid].copy()
    dh[arg, np.arange(hid)] += dout[:, hid:].sum(axis=0)
    dpre = T.relu_backward(dh, pre)
    dx, dw, db = T.linear_backward(dpre, feats, p["w"])
    return dx, {"w": dw, "b": db}


def point_block(feats: np.ndarray, params: Params) -> np.ndarray:
    """Shared per-point MLP with the global max-pool appended to every point."""
    return point_block_forward(feats, params)[0]


# --------------------------------------------------------------------------
# distance-modulated self-attention

def init_dmsa(rng: np.random.Generator, channels: int, heads: int = 2, beta: float = 0.01, zero_output: bool = True) -> Params:
    p = init_mha(rng, channels, heads, zero_output)
    # inverse softplus so beta starts at the requested value
    p["beta_raw"] = np.array([np.log(np.expm1(beta))])
    return p


def pairwise_sq_dist(coords: np.ndarray) -> np.ndarray:
    diff = coords[:, None, :] - coords[None, :, :]
    return (diff ** 2).sum(axis=-1)


def dmsa_forward(feats: np.ndarray, coords: np.ndarray, p: Params):
    d2 = pairwise_sq_dist(coords)
    beta = T.softplus(p["beta_raw"])[0]
    att, mcache = mha_forward(feats, feats, p, -beta * d2)
    return feats + att, (mcache, d2, p)


def dmsa_backward(dout: np.ndarray, cache):
    mcache, d2, p = cache
    dxq, dxkv, dbias, grads = mha_backward(dout, mcache)
    dbeta = -(dbias * d2).sum()
    grads["beta_raw"] = np.array([dbeta * T.sigmoid(p["beta_raw"])[0]])
    return dout + dxq + dxkv, grads


def dmsa(feats: np.ndarray, coords: np.ndarray, params: Params) -> np.ndarray:
    """Self-attention with an additive ``-beta * dist^2`` bias, residual output.

    ``beta = softplus(beta_raw)``; ``beta_raw = -inf`` gives plain attention.
    """
    return dmsa_forward(feats, coords, params)[0]


# --------------------------------------------------------------------------
# injection / extraction coupling between the two streams

def init_inject_extract(rng: np.random.Generator, channels: int, zero_output: bool = True) -> Params:
    out = {}
    out.update(prefixed(init_mha(rng, channels, 1, zero_output), "to_point"))
    out.update(prefixed(init_mha(rng, channels, 1, zero_output), "to_trans"))
    return out


def inject_extract_forward(pf: np.ndarray, tf: np.ndarray, p: Params):
    if pf.shape[0] != tf.shape[0]:
        raise T.DimensionError("point and transformer streams hold different point counts")
    a, ca = mha_forward(pf, tf, scoped(p, "to_point"))
    b, cb = mha_forward(tf, pf, scoped(p, "to_trans"))
    return (pf + a, tf + b), (ca, cb)


def inject_extract_backward(dp: np.ndarray, dt: np.ndarray, cache):
    ca, cb = cache
    dq_a, dkv_a, _, ga = mha_backward(dp, ca)
    dq_b, dkv_b, _, gb = mha_backward(dt, cb)
    grads = {**prefixed(ga, "to_point"), **prefixed(gb, "to_trans")}
    return dp + dq_a + dkv_b, dt + dq_b + dkv_a, grads


def inject_extract(point_feats: np.ndarray, trans_feats: np.ndarray, params: Params):
    """Each stream cross-attends to the other; residual on both sides."""
    return inject_extract_forward(point_feats, trans_feats, params)[0]


# --------------------------------------------------------------------------
# RCS-aware scattering

def rcs_radius_scale(rcs: np.ndarray, lo: float = 0.5, hi: float = 3.0) -> np.ndarray:
    """Min-max normalized RCS mapped to [lo, hi] cell diagonals (``lo`` for a constant set)."""
    rcs = np.asarray(rcs, dtype=np.float64)
    if rcs.size == 0:
        return rcs
    span = rcs.max() - rcs.min()
    if span <= 0:
        return np.full(rcs.shape, lo)
    return lo + (hi - lo) * (rcs - rcs.min()) / span


def scatter_weights(points: np.ndarray, grid: BevGrid, radius_range=(0.5, 3.0)):
    """Sparse (cell, point, weight) triples of the Gaussian disc around each point's cell.

    The disc is measured between cell centers: a cell joins when its center
    lies within ``r = diag * v_rcs`` of the center of the point's own cell,
    and receives ``exp(-d^2 / (2 sigma^2))`` with ``sigma = r / 2``.
    """
    points = points_array(points)
    n = points.shape[0]
    if n == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    cx, cy = grid.cell_x, grid.cell_y
    r = np.hypot(cx, cy) * rcs_radius_scale(points[:, 5], *radius_range)
    sigma = r / 2.0
    ix, iy, inside = grid.cells(points[:, :2])
    reach_x = int(np.ceil(r.max() / cx))
    reach_y = int(np.ceil(r.max() / cy))
    cells, pts, wts = [], [], []
    pid = np.arange(n)
    for oy in range(-reach_y, reach_y + 1):
        for ox in range(-reach_x, reach_x + 1):
            d2 = (ox * cx) ** 2 + (oy * cy) ** 2
            jx, jy = ix + ox, iy + oy
            ok = inside & (d2 <= r ** 2) & (jx >= 0) & (jx < grid.nx) & (jy >= 0) & (jy < grid.ny)
            if not ok.any():
                continue
            cells.append((jy * grid.nx + jx)[ok])
            pts.append(pid[ok])
            wts.append(np.exp(-d2 / (2.0 * sigma[ok] ** 2)))
    if not cells:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    return np.concatenate(cells), np.concatenate(pts), np.concatenate(wts)


def scatter_apply(feats: np.ndarray, weights, grid: BevGrid) -> np.ndarray:
    cell, pt, w = weights
    c = feats.shape[1]
    out = np.zeros((c, grid.ny * grid.nx))
    for ch in range(c):
        out[ch] = np.bincount(cell, weights=w * feats[pt, ch], minlength=grid.ny * grid.nx)
    return out.reshape(c, grid.ny, grid.nx)


def scatter_backward(dout: np.ndarray, weights, n_points: int) -> np.ndarray:
    cell, pt, w = weights
    c = dout.shape[0]
    flat = dout.reshape(c, -1)
    df = np.zeros((n_points, c))
    for ch in range(c):
        df[:, ch] = np.bincount(pt, weights=w * flat[ch, cell], minlength=n_points)
    return df


def rcs_scatter(points, feats: np.ndarray, grid: BevGrid, radius_range=(0.5, 3.0)) -> np.ndarray:
    """Accumulate each point's feature over its RCS-sized Gaussian disc; (C, ny, nx)."""
    return scatter_apply(feats, scatter_weights(points, grid, radius_range), grid)


# --------------------------------------------------------------------------
# BEV encoder

def init_bev_encoder(rng: np.random.Generator, cin: int, cout: int) -> Params:
    return {**prefixed(init_cbr(rng, cin, cout), "cbr1"), **prefixed(init_cbr(rng, cout, cout), "cbr2")}


def bev_encode_forward(f: np.ndarray, p: Params):
    a, c1 = cbr_forward(f, scoped(p, "cbr1"))
    b, c2 = cbr_forward(a, scoped(p, "cbr2"))
    return b, (c1, c2)


def bev_encode_backward(dout: np.ndarray, cache):
    c1, c2 = cache
    da, g2 = cbr_backward(dout, c2)
    dx, g1 = cbr_backward(da, c1)
    return dx, {**prefixed(g1, "cbr1"), **prefixed(g2, "cbr2")}


def radar_bev_encode(f_rcs: np.ndarray, params: Params) -> np.ndarray:
    return bev_encode_forward(f_rcs, params)[0]


# --------------------------------------------------------------------------
# full branch up to the radar BEV map (before the branch DSA)

INPUT_DIM = 7


def normalize_points(points: np.ndarray, grid: BevGrid) -> np.ndarray:
    x0 = 0.5 * (grid.x_min + grid.x_max)
    sx = 0.5 * (grid.x_max - grid.x_min)
    sy = grid.y_max - grid.y_min
    out = np.empty_like(points)
    out[:, 0] = (points[:, 0] - x0) / sx
    out[:, 1] = (points[:, 1] - grid.y_min) / sy
    out[:, 2] = points[:, 2] / 2.0
    out[:, 3:5] = points[:, 3:5] / 5.0
    out[:, 5] = rcs_radius_scale(points[:, 5], 0.0, 1.0)
    out[:, 6] = points[:, 6] * 2.0
    return out


def init_radar_branch(rng: np.random.Generator, c_r: int, c_out: int, n_blocks: int = 3, dmsa_heads: int = 2) -> Params:
    p: Params = {
        "embed_p.w": rng.normal(0.0, np.sqrt(2.0 / INPUT_DIM), size=(INPUT_DIM, c_r)),
        "embed_p.b": np.zeros(c_r),
        "embed_t.w": glorot(rng, INPUT_DIM, c_r, (INPUT_DIM, c_r)),
        "embed_t.b": np.zeros(c_r),
    }
    for s in range(n_blocks):
        p.update(prefixed(init_point_block(rng, c_r, c_r), f"block{s}.point"))
        p.update(prefixed(init_dmsa(rng, c_r, dmsa_heads), f"block{s}.dmsa"))
        p.update(prefixed(init_inject_extract(rng, c_r), f"block{s}.couple"))
    p.update(prefixed(init_bev_encoder(rng, c_r, c_out), "encoder"))
    return p


def _n_blocks(p: Params) -> int:
    return len({k.split(".")[0] for k in p if k.startswith("block")})


def radar_branch_forward(points: np.ndarray, grid: BevGrid, p: Params, radius_range=(0.5, 3.0)):
    points = points_array(points)
    c_r = p["embed_p.w"].shape[1]
    n = points.shape[0]
    if n == 0:
        # empty frame: zero scattered map, the encoder still runs
        rcs_map = np.zeros((c_r, grid.ny, grid.nx))
        out, ecache = bev_encode_forward(rcs_map, scoped(p, "encoder"))
        return out, ("empty", ecache)
    x = normalize_points(points, grid)
    pre_p = T.linear(x, p["embed_p.w"], p["embed_p.b"])
    pf = T.relu(pre_p)
    tf = T.linear(x, p["embed_t.w"], p["embed_t.b"])
    blocks = []
    for s in range(_n_blocks(p)):
        pf, cp = point_block_forward(pf, scoped(p, f"block{s}.point"))
        tf, ct = dmsa_forward(tf, points[:, :2], scoped(p, f"block{s}.dmsa"))
        (pf, tf), cc = inject_extract_forward(pf, tf, scoped(p, f"block{s}.couple"))
        blocks.append((cp, ct, cc))
    feats = pf + tf
    weights = scatter_weights(points, grid, radius_range)
    rcs_map = scatter_apply(feats, weights, grid)
    out, ecache = bev_encode_forward(rcs_map, scoped(p, "encoder"))
    return out, (x, pre_p, blocks, weights, n, ecache)


def radar_branch_backward(dout: np.ndarray, cache, p: Params) -> Params:
    if isinstance(cache[0], str):
        _, ge = bev_encode_backward(dout, cache[1])
        return prefixed(ge, "encoder")
    x, pre_p, blocks, weights, n, ecache = cache
    drcs, ge = bev_encode_backward(dout, ecache)
    grads: Params = prefixed(ge, "encoder")
    dfeats = scatter_backward(drcs, weights, n)
    dpf, dtf = dfeats, dfeats.copy()
    for s in reversed(range(len(blocks))):
        cp, ct, cc = blocks[s]
        dpf, dtf, gc = inject_extract_backward(dpf, dtf, cc)
        dtf, gt = dmsa_backward(dtf, ct)
        dpf, gp = point_block_backward(dpf, cp)
        accumulate(grads, prefixed(gc, f"block{s}.couple"))
        accumulate(grads, prefixed(gt, f"block{s}.dmsa"))
        accumulate(grads, prefixed(gp, f"block{s}.point"))
    dpre = T.relu_backward(dpf, pre_p)
    _, dw, db = T.linear_backward(dpre, x, p["embed_p.w"])
    grads["embed_p.w"], grads["embed_p.b"] = dw, db
    _, dw, db = T.linear_backward(dtf, x, p["embed_t.w"])
    grads["embed_t.w"], grads["embed_t.b"] = dw, db
    return grads
