"""Voxel-pooling timing benchmark and multiply-accumulate scaling of deformable vs dense attention."""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from . import tensor as T
from .attention import cell_reference_points, deform_attn_forward, dense_self_attention, init_deform_attn
from .camera import FrustumFeatures, frustum_cell_ids, voxel_pool_efficient, voxel_pool_reference
from .geometry import BevGrid


class EquivalenceError(RuntimeError):
    """Two implementations that must agree did not."""


@dataclass
class PoolingRow:
    grid: int
    n_points: int
    channels: int
    dtype: str
    reference_s: float
    efficient_s: float
    max_abs_diff: float

    @property
    def speedup(self) -> float:
        return self.reference_s / self.efficient_s if self.efficient_s > 0 else float("inf")


def random_frustum(rng: np.random.Generator, n_points: int, channels: int, grid: BevGrid, dtype=np.float64) -> FrustumFeatures:
    """Points spread 10% beyond the grid on each side so some fall outside."""
    pad_x = 0.1 * (grid.x_max - grid.x_min)
    pad_y = 0.1 * (grid.y_max - grid.y_min)
    xyz = np.column_stack([
        rng.uniform(grid.x_min - pad_x, grid.x_max + pad_x, n_points),
        rng.uniform(grid.y_min - pad_y, grid.y_max + pad_y, n_points),
        rng.uniform(-1.0, 3.0, n_points),
    ])
    feats = rng.normal(size=(channels, n_points, 1, 1)).astype(dtype)
    return FrustumFeatures(feats, xyz)


def _median_time(fn, runs: int) -> float:
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_pooling(
    grids: Sequence[int] = (64, 128),
    point_counts: Sequence[int] = (10_000, 100_000),
    channels: int = 64,
    runs: int = 5,
    dtype: str = "float64",
    seed: int = 0,
    workers: int | None = None,
) -> List[PoolingRow]:
    """Median wall time of both pooling paths per (grid, point count); outputs must agree.

    Tolerance is 1e-9 absolute for 64-bit and 1e-5 relative for 32-bit.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for n_cells in grids:
        grid = BevGrid(nx=n_cells, ny=n_cells)
        for n in point_counts:
            ff = random_frustum(rng, n, channels, grid, np.dtype(dtype))
            ids = frustum_cell_ids(ff.ego_coords, grid)
            ref = voxel_pool_reference(ff, grid, ids)
            eff = voxel_pool_efficient(ff, grid, ids, workers)
            diff = float(np.max(np.abs(ref.astype(np.float64) - eff))) if ref.size else 0.0
            if dtype == "float64":
                ok = diff <= 1e-9
            else:
                ok = np.allclose(eff, ref, rtol=1e-5, atol=1e-5 * float(np.abs(ref).max() or 1.0))
            if not ok:
                raise EquivalenceError(f"pooling paths differ by {diff:g} on {n_cells}x{n_cells}, {n} points")
            t_ref = _median_time(lambda: voxel_pool_reference(ff, grid, ids), runs)
            t_eff = _median_time(lambda: voxel_pool_efficient(ff, grid, ids, workers), runs)
            rows.append(PoolingRow(n_cells, n, channels, dtype, t_ref, t_eff, diff))
    return rows


def pooling_csv(rows: Sequence[PoolingRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["grid", "n_points", "channels", "dtype", "reference_s", "efficient_s", "speedup", "max_abs_diff"])
    for r in rows:
        w.writerow([r.grid, r.n_points, r.channels, r.dtype, f"{r.reference_s:.6f}", f"{r.efficient_s:.6f}", f"{r.speedup:.3f}", f"{r.max_abs_diff:.3e}"])
    return buf.getvalue()


# --------------------------------------------------------------------------
# complexity

def attention_macs(sizes: Sequence[int] = (8, 16, 32), channels: int = 8, heads: int = 2, points: int = 4, seed: int = 0):
    """(H*W, deformable MACs, dense MACs) for square maps of each size."""
    rng = np.random.default_rng(seed)
    p = init_deform_attn(rng, channels, heads, points, zero_output=False)
    wq, wk, wv, wo = (rng.normal(size=(channels, channels)) for _ in range(4))
    out = []
    for s in sizes:
        F = rng.normal(size=(channels, s, s))
        z = F.reshape(channels, -1).T
        with T.count_macs() as c_def:
            deform_attn_forward(z, cell_reference_points(s, s), F, p)
        with T.count_macs() as c_dense:
            dense_self_attention(F, wq, wk, wv, wo)
        out.append((s * s, c_def.count, c_dense.count))
    return out


def r_squared(x: np.ndarray, y: np.ndarray, degree: int) -> float:
    """Coefficient of determination of a least-squares polynomial fit of ``degree``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.vander(x, degree + 1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot > 0 else 1.0


def growth_exponent(x, y) -> float:
    """Slope of log y against log x; about 1 for linear and 2 for quadratic growth."""
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def complexity_report(sizes: Sequence[int] = (8, 16, 32), **kw) -> dict:
    rows = attention_macs(sizes, **kw)
    hw = np.array([r[0] for r in rows], dtype=np.float64)
    deform = np.array([r[1] for r in rows], dtype=np.float64)
    dense = np.array([r[2] for r in rows], dtype=np.float64)
    return {
        "rows": rows,
        "deform_linear_r2": r_squared(hw, deform, 1),
        "deform_exponent": growth_exponent(hw, deform),
        "dense_quadratic_r2": r_squared(hw, dense, 2),
        "dense_exponent": growth_exponent(hw, dense),
    }
