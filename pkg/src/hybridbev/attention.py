"""Deformable attention over a single BEV map, with self- and cross-attention wrappers.

Sampling locations are normalized to [0, 1]^2 with the feature lattice at cell
centers (pixel ``i`` sits at ``(i + 0.5) / W``).  Reads outside the map are
zero.  Attention weights are normalized jointly over all heads and points of
a query.
"""
from __future__ import annotations

from typing import Tuple

import numpy as np

from . import tensor as T
from .params import Params, glorot


def init_deform_attn(
    rng: np.random.Generator,
    channels: int,
    heads: int = 4,
    points: int = 4,
    head_dim: int | None = None,
    offset_range: float = 3.0,
    zero_output: bool = True,
) -> Params:
    """Parameters for one deformable attention block.

    With ``zero_output`` the output projection starts at zero, so the
    residual wrappers begin as exact identities.
    """
    if channels % heads:
        raise ValueError(f"channel width {channels} not divisible by {heads} heads")
    dh = head_dim or channels // heads
    theta = 2 * np.pi * np.arange(heads) / heads
    ring = np.stack([np.cos(theta), np.sin(theta)], axis=-1)  # M x 2
    scale = (np.arange(points) + 1.0) / points
    b_off = (ring[:, None, :] * scale[None, :, None]).reshape(-1)
    w_out = np.zeros((heads, dh, channels))
    if not zero_output:
        w_out = glorot(rng, dh, channels, (heads, dh, channels))
    return {
        "w_off": np.zeros((channels, heads * points * 2)),
        "b_off": b_off,
        "w_att": np.zeros((channels, heads * points)),
        "b_att": np.zeros(heads * points),
        "w_val": glorot(rng, channels, dh, (heads, channels, dh)),
        "w_out": w_out,
        "range": np.full(heads, float(offset_range)),
    }


# --------------------------------------------------------------------------
# bilinear sampling

def _corners(F: np.ndarray, loc: np.ndarray):
    c, h, w = F.shape
    x = loc[:, 0] * w - 0.5
    y = loc[:, 1] * h - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    flat = F.reshape(c, h * w).T
    vals, idxs = [], []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = np.where(ok, yi * w + xi, -1)
            v = np.where(ok[:, None], flat[np.maximum(idx, 0)], 0.0)
            vals.append(v)
            idxs.append(idx)
    return fx, fy, vals, idxs


def bilinear_gather(F: np.ndarray, loc: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """Sample ``F`` (C, H, W) at normalized locations ``loc`` (S, 2); returns (S, C)."""
    fx, fy, (v00, v01, v10, v11), idxs = _corners(F, loc)
    gx, gy = 1.0 - fx, 1.0 - fy
    out = (
        v00 * (gx * gy)[:, None]
        + v01 * (fx * gy)[:, None]
        + v10 * (gx * fy)[:, None]
        + v11 * (fx * fy)[:, None]
    )
    T.add_macs(4 * out.size)
    return out, (F.shape, fx, fy, (v00, v01, v10, v11), idxs)


def bilinear_gather_backward(dout: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray]:
    (c, h, w), fx, fy, (v00, v01, v10, v11), idxs = cache
    gx, gy = 1.0 - fx, 1.0 - fy
    weights = (gx * gy, fx * gy, gx * fy, fx * fy)
    all_idx = np.concatenate(idxs)
    ok = all_idx >= 0
    contrib = np.concatenate([dout * wt[:, None] for wt in weights])[ok]
    tgt = all_idx[ok]
    dflat = np.empty((c, h * w))
    for ch in range(c):
        dflat[ch] = np.bincount(tgt, weights=contrib[:, ch], minlength=h * w)
    dxs = ((v01 - v00) * gy[:, None] + (v11 - v10) * fy[:, None]) * dout
    dys = ((v10 - v00) * gx[:, None] + (v11 - v01) * fx[:, None]) * dout
    dloc = np.stack([dxs.sum(axis=1) * w, dys.sum(axis=1) * h], axis=-1)
    return dflat.reshape(c, h, w), dloc


def bilinear_sample(F: np.ndarray, p) -> np.ndarray:
    """Feature vector of ``F`` at one normalized location ``p`` in [0, 1]^2."""
    return bilinear_gather(F, np.asarray(p, dtype=np.float64).reshape(1, 2))[0][0]


# --------------------------------------------------------------------------
# deformable attention core

def _dims(p: Params):
    m, c, dh = p["w_val"].shape
    k = p["w_att"].shape[1] // m
    return m, k, c, dh


def deform_attn_forward(z: np.ndarray, ref: np.ndarray, F: np.ndarray, p: Params):
    """Queries ``z`` (Nq, C) at reference points ``ref`` (Nq, 2) sample ``F`` (C, H, W)."""
    m, k, c, dh = _dims(p)
    nq = z.shape[0]
    if z.shape[1] != c or F.shape[0] != c or p["w_off"].shape[0] != c:
        raise T.DimensionError(f"channel widths disagree: queries {z.shape}, values {F.shape}, params C={c}")
    if ref.shape != (nq, 2):
        raise T.DimensionError(f"reference points must be ({nq}, 2), got {ref.shape}")
    _, h, w = F.shape
    inv_wh = np.array([1.0 / w, 1.0 / h])
    raw = T.linear(z, p["w_off"], p["b_off"]).reshape(nq, m, k, 2)
    scale = p["range"][None, :, None, None] * inv_wh
    loc = ref[:, None, None, :] + raw * scale
    logits = T.linear(z, p["w_att"], p["b_att"])
    A = T.softmax(logits, axis=1).reshape(nq, m, k)
    samples, scache = bilinear_gather(F, loc.reshape(-1, 2))
    samples = samples.reshape(nq, m, k, c)
    hsum = (A[:, :, None, :] @ samples)[:, :, 0, :].transpose(1, 0, 2)  # (M, Nq, C)
    u = hsum @ p["w_val"]                                                 # (M, Nq, Dh)
    out = (u @ p["w_out"]).sum(axis=0)
    T.add_macs(nq * m * k * c + 2 * nq * m * c * dh)
    cache = (z, raw, scale, inv_wh, A, samples, scache, hsum, u, p)
    return out, cache


def deform_attn_backward(dout: np.ndarray, cache):
    """Returns (dz, dref, dF, param grads)."""
    z, raw, scale, inv_wh, A, samples, scache, hsum, u, p = cache
    nq, m, k, c = samples.shape
    dw_out = u.transpose(0, 2, 1) @ dout[None]
    du = dout[None] @ p["w_out"].transpose(0, 2, 1)
    dw_val = hsum.transpose(0, 2, 1) @ du
    dh = (du @ p["w_val"].transpose(0, 2, 1)).transpose(1, 0, 2)  # (Nq, M, C)
    dA = (samples @ dh[..., None])[..., 0]
    dsamples = A[..., None] * dh[:, :, None, :]
    dF, dloc = bilinear_gather_backward(dsamples.reshape(-1, c), scache)
    dloc = dloc.reshape(nq, m, k, 2)
    draw = dloc * scale
    drange = ((dloc * raw) @ inv_wh).sum(axis=(0, 2))
    dref = dloc.sum(axis=(1, 2))
    dlogits = T.softmax_backward(dA.reshape(nq, m * k), A.reshape(nq, m * k), axis=1)
    dz_off, dw_off, db_off = T.linear_backward(draw.reshape(nq, -1), z, p["w_off"])
    dz_att, dw_att, db_att = T.linear_backward(dlogits, z, p["w_att"])
    grads = {
        "w_off": dw_off, "b_off": db_off, "w_att": dw_att, "b_att": db_att,
        "w_val": dw_val, "w_out": dw_out, "range": drange,
    }
    return dz_off + dz_att, dref, dF, grads


def deform_attn(q_feats: np.ndarray, ref: np.ndarray, F: np.ndarray, params: Params) -> np.ndarray:
    return deform_attn_forward(q_feats, ref, F, params)[0]


def attention_weights(z: np.ndarray, params: Params) -> np.ndarray:
    """Normalized sampling weights, shape (Nq, M, K)."""
    m, k, _, _ = _dims(params)
    return T.softmax(T.linear(z, params["w_att"], params["b_att"]), axis=1).reshape(-1, m, k)


def cell_reference_points(h: int, w: int) -> np.ndarray:
    """Normalized centers of every cell, row-major (iy, ix)."""
    iy, ix = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([(ix.ravel() + 0.5) / w, (iy.ravel() + 0.5) / h], axis=-1)


# --------------------------------------------------------------------------
# self / cross wrappers (residual)

def dca_forward(Fq: np.ndarray, Fv: np.ndarray, p: Params):
    if Fq.shape != Fv.shape:
        raise T.DimensionError(f"query map {Fq.shape} and value map {Fv.shape} differ")
    c, h, w = Fq.shape
    z = Fq.reshape(c, h * w).T
    attn, cache = deform_attn_forward(z, cell_reference_points(h, w), Fv, p)
    return Fq + attn.T.reshape(c, h, w), cache


def dca_backward(dout: np.ndarray, cache):
    """Returns (dFq, dFv, param grads)."""
    c, h, w = dout.shape
    dz, _, dFv, grads = deform_attn_backward(dout.reshape(c, h * w).T, cache)
    return dout + dz.T.reshape(c, h, w), dFv, grads


def dsa_forward(F: np.ndarray, p: Params):
    return dca_forward(F, F, p)


def dsa_backward(dout: np.ndarray, cache):
    dFq, dFv, grads = dca_backward(dout, cache)
    return dFq + dFv, grads


def dsa(F: np.ndarray, params: Params) -> np.ndarray:
    """Deformable self-attention with a residual connection; one query per cell."""
    return dsa_forward(F, params)[0]


def dca(queries_from: np.ndarray, values_from: np.ndarray, params: Params) -> np.ndarray:
    """Queries from one map sample the other; residual on the query map."""
    return dca_forward(queries_from, values_from, params)[0]


# --------------------------------------------------------------------------
# dense baseline, used for complexity comparisons

def dense_self_attention(F: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray, wo: np.ndarray) -> np.ndarray:
    c, h, w = F.shape
    x = F.reshape(c, h * w).T
    q, k, v = T.matmul(x, wq), T.matmul(x, wk), T.matmul(x, wv)
    a = T.softmax(T.matmul(q, k.T) / np.sqrt(q.shape[1]), axis=1)
    out = T.matmul(T.matmul(a, v), wo)
    return F + out.T.reshape(c, h, w)
