"""Hybrid BEV fusion: positional encodings, per-modality self-attention,
bidirectional cross-attention, four-way concatenation and a CBR stack.

Parameter names inside the dict handed to :func:`hybrid_fuse`:
``pos_cam``, ``pos_rad``, ``dsa_cam.*``, ``dsa_rad.*``, ``dca_c2r.*``
(camera queries, radar values), ``dca_r2c.*`` and ``cbr0.*``..``cbr2.*``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from . import tensor as T
from .attention import dca_backward, dca_forward, dsa_backward, dsa_forward, init_deform_attn
from .layers import cbr_backward, cbr_block, cbr_forward, init_cbr
from .params import Params, prefixed, scoped

__all__ = [
    "FusionConfig", "add_pos", "cbr_block", "hybrid_fuse", "hybrid_fuse_forward",
    "hybrid_fuse_backward", "init_fusion", "sinusoidal_encoding",
]

ATTN_BLOCKS = ("dsa_cam", "dsa_rad", "dca_c2r", "dca_r2c")


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "hybrid"          # "hybrid" or "concat" (plain channel concatenation)
    use_self: bool = True         # keep the self-attended maps in the concatenation
    cbr_kernels: Tuple[int, int, int] = (3, 3, 1)
    num_layers: int = 1
    heads: int = 4
    points: int = 4

    def __post_init__(self):
        if self.mode not in ("hybrid", "concat"):
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.num_layers != 1:
            raise ValueError("only a single fusion layer is supported")
        if len(self.cbr_kernels) != 3:
            raise ValueError("fusion uses exactly three CBR blocks")

    def concat_channels(self, c: int) -> int:
        if self.mode == "concat":
            return 2 * c
        return 4 * c if self.use_self else 2 * c


def sinusoidal_encoding(c: int, ny: int, nx: int, amplitude: float = 0.1) -> np.ndarray:
    """Fixed 2-D sinusoidal pattern: half the channels encode x, half encode y."""
    enc = np.zeros((c, ny, nx))
    half = max(c // 2, 1)
    for ch in range(c):
        axis_len, coord = (nx, np.arange(nx)[None, :]) if ch < half else (ny, np.arange(ny)[:, None])
        j = ch % half
        freq = 1.0 / (axis_len ** (2 * (j // 2) / max(half, 1)))
        wave = np.sin(coord * freq) if j % 2 == 0 else np.cos(coord * freq)
        enc[ch] = np.broadcast_to(wave, (ny, nx))
    return amplitude * enc


def init_fusion(rng: np.random.Generator, c: int, ny: int, nx: int, cfg: FusionConfig = FusionConfig()) -> Params:
    p: Params = {}
    if cfg.mode == "hybrid":
        p["pos_cam"] = sinusoidal_encoding(c, ny, nx)
        p["pos_rad"] = sinusoidal_encoding(c, ny, nx)
        for name in ATTN_BLOCKS:
            p.update(prefixed(init_deform_attn(rng, c, cfg.heads, cfg.points), name))
    widths = [cfg.concat_channels(c), 2 * c, c, c]
    for i, k in enumerate(cfg.cbr_kernels):
        p.update(prefixed(init_cbr(rng, widths[i], widths[i + 1], k), f"cbr{i}"))
    return p


def add_pos(F: np.ndarray, which: str, params: Params) -> np.ndarray:
    """Add the camera (``which="cam"``) or radar positional encoding."""
    enc = params[f"pos_{which}"]
    if enc.shape != F.shape:
        raise T.DimensionError(f"positional encoding {enc.shape} does not match feature map {F.shape}")
    return F + enc


def hybrid_fuse_forward(Fc: np.ndarray, Fr: np.ndarray, p: Params, cfg: FusionConfig = FusionConfig()):
    if Fc.shape != Fr.shape:
        raise T.DimensionError(f"camera map {Fc.shape} and radar map {Fr.shape} differ")
    cache: Dict = {}
    if cfg.mode == "concat":
        x = np.concatenate([Fc, Fr], axis=0)
    else:
        Fc_p = add_pos(Fc, "cam", p)
        Fr_p = add_pos(Fr, "rad", p)
        Fc_x, cache["dca_c2r"] = dca_forward(Fc_p, Fr_p, scoped(p, "dca_c2r"))
        Fr_x, cache["dca_r2c"] = dca_forward(Fr_p, Fc_p, scoped(p, "dca_r2c"))
        parts = [Fc_x, Fr_x]
        if cfg.use_self:
            Fc_s, cache["dsa_cam"] = dsa_forward(Fc_p, scoped(p, "dsa_cam"))
            Fr_s, cache["dsa_rad"] = dsa_forward(Fr_p, scoped(p, "dsa_rad"))
            parts = [Fc_s, Fr_s, Fc_x, Fr_x]
        x = np.concatenate(parts, axis=0)
        cache["dca_cam"], cache["dca_rad"] = Fc_x, Fr_x
    cbrs = []
    for i in range(3):
        x, ci = cbr_forward(x, scoped(p, f"cbr{i}"))
        cbrs.append(ci)
    cache["cbr"] = cbrs
    return x, cache


def hybrid_fuse_backward(dout: np.ndarray, cache, cfg: FusionConfig = FusionConfig()):
    """Returns (dFc, dFr, grads)."""
    grads: Params = {}
    dx = dout
    for i in reversed(range(3)):
        dx, g = cbr_backward(dx, cache["cbr"][i])
        grads.update(prefixed(g, f"cbr{i}"))
    c = dout.shape[0]
    if cfg.mode == "concat":
        return dx[:c], dx[c:2 * c], grads
    if cfg.use_self:
        dFc_s, dFr_s, dFc_x, dFr_x = np.split(dx, 4, axis=0)
    else:
        dFc_x, dFr_x = np.split(dx, 2, axis=0)
    dFc_p, dFr_p, g = dca_backward(dFc_x, cache["dca_c2r"])
    grads.update(prefixed(g, "dca_c2r"))
    dFr_q, dFc_v, g = dca_backward(dFr_x, cache["dca_r2c"])
    grads.update(prefixed(g, "dca_r2c"))
    dFc_p = dFc_p + dFc_v
    dFr_p = dFr_p + dFr_q
    if cfg.use_self:
        d, g = dsa_backward(dFc_s, cache["dsa_cam"])
        dFc_p = dFc_p + d
        grads.update(prefixed(g, "dsa_cam"))
        d, g = dsa_backward(dFr_s, cache["dsa_rad"])
        dFr_p = dFr_p + d
        grads.update(prefixed(g, "dsa_rad"))
    grads["pos_cam"] = dFc_p
    grads["pos_rad"] = dFr_p
    return dFc_p, dFr_p, grads


def hybrid_fuse(F_c: np.ndarray, F_r: np.ndarray, params: Params, cfg: FusionConfig = FusionConfig()) -> np.ndarray:
    return hybrid_fuse_forward(F_c, F_r, params, cfg)[0]
