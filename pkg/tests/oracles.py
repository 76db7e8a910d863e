"""Slow, independent reference implementations used as test oracles."""
import math
from fractions import Fraction

import numpy as np


def naive_pool(ff, grid):
    """Loop over every frustum point and add it to its cell."""
    c = ff.features.shape[0]
    feats = ff.features.reshape(c, -1)
    bev = np.zeros((c, grid.ny, grid.nx))
    for i, p in enumerate(ff.ego_coords):
        ix = math.floor((p[0] - grid.x_min) / grid.cell_x)
        iy = math.floor((p[1] - grid.y_min) / grid.cell_y)
        if 0 <= ix < grid.nx and 0 <= iy < grid.ny:
            bev[:, iy, ix] += feats[:, i]
    return bev


def scatter_oracle(points, feats, grid, radius_range=(0.5, 3.0)):
    """Visit every (point, cell) pair; Gaussian disc measured between cell centers."""
    lo, hi = radius_range
    rcs = points[:, 5]
    span = rcs.max() - rcs.min()
    diag = math.hypot(grid.cell_x, grid.cell_y)
    out = np.zeros((feats.shape[1], grid.ny, grid.nx))
    for n, p in enumerate(points):
        v = lo if span <= 0 else lo + (hi - lo) * (rcs[n] - rcs.min()) / span
        r = diag * v
        sigma = r / 2
        px = math.floor((p[0] - grid.x_min) / grid.cell_x)
        py = math.floor((p[1] - grid.y_min) / grid.cell_y)
        if not (0 <= px < grid.nx and 0 <= py < grid.ny):
            continue
        cx = grid.x_min + (px + 0.5) * grid.cell_x
        cy = grid.y_min + (py + 0.5) * grid.cell_y
        for iy in range(grid.ny):
            for ix in range(grid.nx):
                qx = grid.x_min + (ix + 0.5) * grid.cell_x
                qy = grid.y_min + (iy + 0.5) * grid.cell_y
                d2 = (qx - cx) ** 2 + (qy - cy) ** 2
                if d2 <= r * r * (1 + 1e-12):
                    out[:, iy, ix] += math.exp(-d2 / (2 * sigma * sigma)) * feats[n]
    return out


def dense_attention_oracle(x, p):
    """Residual multi-head self-attention written out row by row."""
    heads, c, d = p["wq"].shape
    n = x.shape[0]
    out = x.copy()
    for h in range(heads):
        q, k, v = x @ p["wq"][h], x @ p["wk"][h], x @ p["wv"][h]
        for i in range(n):
            s = [float(q[i] @ k[j]) / math.sqrt(d) for j in range(n)]
            top = max(s)
            e = [math.exp(t - top) for t in s]
            z = sum(e)
            row = sum((e[j] / z) * v[j] for j in range(n))
            out[i] += row @ p["wo"][h]
    return out


def _inside_box(box, x, y):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = x - box.cx, y - box.cy
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= box.l / 2) & (np.abs(v) <= box.w / 2)


def mc_bev_iou(a, b, rng, n=1_000_000):
    """Monte Carlo footprint IoU over the joint bounding square."""
    ra = math.hypot(a.l, a.w) / 2
    rb = math.hypot(b.l, b.w) / 2
    x0, x1 = min(a.cx - ra, b.cx - rb), max(a.cx + ra, b.cx + rb)
    y0, y1 = min(a.cy - ra, b.cy - rb), max(a.cy + ra, b.cy + rb)
    x = rng.uniform(x0, x1, n)
    y = rng.uniform(y0, y1, n)
    ia, ib = _inside_box(a, x, y), _inside_box(b, x, y)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def axis_aligned_iou_3d(a, b):
    """IoU of two yaw-free boxes from interval overlaps."""
    def overlap(c1, s1, c2, s2):
        return max(0.0, min(c1 + s1 / 2, c2 + s2 / 2) - max(c1 - s1 / 2, c2 - s2 / 2))

    inter = overlap(a.cx, a.l, b.cx, b.l) * overlap(a.cy, a.w, b.cy, b.w) * overlap(a.cz, a.h, b.cz, b.h)
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def brute_force_ap(det_frames, gt_frames, cls, thresh, n_points=40, contains=lambda box: True):
    """AP in percent from exact fractions over every ranked prefix."""
    flags = []
    n_gt = 0
    for fi, (dets, gts) in enumerate(zip(det_frames, gt_frames)):
        dets = [d for d in dets if d.box.cls == cls and contains(d.box)]
        gts = [g for g in gts if g.cls == cls and contains(g)]
        n_gt += len(gts)
        taken = set()
        ranked = sorted(enumerate(dets), key=lambda t: (-t[1].score, t[0]))
        for k, (_, d) in enumerate(ranked):
            ious = [(axis_aligned_iou_3d(d.box, g), j) for j, g in enumerate(gts) if j not in taken]
            ious = [t for t in ious if t[0] >= thresh]
            hit = bool(ious)
            if hit:
                best = max(ious, key=lambda t: (t[0], -t[1]))
                taken.add(best[1])
            flags.append((-d.score, fi, k, hit))
    if n_gt == 0:
        return 0.0
    flags.sort(key=lambda t: t[:3])
    prefixes = []
    tp = 0
    for k, f in enumerate(flags, start=1):
        tp += f[3]
        prefixes.append((Fraction(tp, n_gt), Fraction(tp, k)))
    levels = [Fraction(i, 40) for i in range(1, 41)] if n_points == 40 else [Fraction(i, 10) for i in range(11)]
    total = Fraction(0)
    for r in levels:
        total += max((p for rec, p in prefixes if rec >= r), default=Fraction(0))
    return float(100 * total / len(levels))


def averaging_cbr(params, c):
    """Overwrite a 1x1 fusion CBR stack so it averages the modality copies.

    cbr0 folds [Fc_s, Fr_s, Fc_x, Fr_x] to [mean(Fc_s, Fc_x), mean(Fr_s, Fr_x)],
    cbr1 averages the two modalities and cbr2 is the identity.  Every norm is
    the identity, so with positive inputs the ReLUs pass everything.
    """
    eye = np.eye(c)
    w0 = np.zeros((2 * c, 4 * c, 1, 1))
    w0[:c, :c, 0, 0] = w0[:c, 2 * c:3 * c, 0, 0] = eye / 2
    w0[c:, c:2 * c, 0, 0] = w0[c:, 3 * c:, 0, 0] = eye / 2
    w1 = np.zeros((c, 2 * c, 1, 1))
    w1[:, :c, 0, 0] = w1[:, c:, 0, 0] = eye / 2
    w2 = eye[:, :, None, None].copy()
    for i, w in enumerate((w0, w1, w2)):
        cout = w.shape[0]
        params[f"cbr{i}.w"] = w
        params[f"cbr{i}.b"] = np.zeros(cout)
        params[f"cbr{i}.gamma"] = np.full(cout, np.sqrt(1.0 + 1e-5))
        params[f"cbr{i}.beta"] = np.zeros(cout)
        params[f"cbr{i}.mean"] = np.zeros(cout)
        params[f"cbr{i}.var"] = np.ones(cout)
    return params


def enumerate_ap_cases(max_dets=3, max_gts=3, scores=(0.9, 0.6, 0.3)):
    """Every single-frame Car case with up to ``max_dets`` detections and ``max_gts`` ground truths.

    Ground truths sit 10 m apart.  Each detection targets one ground truth
    exactly, targets one shifted by 1 m (IoU 0.6, still a match at 0.5), or
    lands far from everything; scores range over ``scores`` with repeats so
    ties are covered.
    """
    import itertools

    from hybridbev.head import Box3D, Detection

    for n_gt in range(max_gts + 1):
        gts = [Box3D(-10.0 + 10.0 * j, 10.0, 0.0, 4.0, 2.0, 1.5) for j in range(n_gt)]
        targets = [b for g in gts for b in (g, Box3D(g.cx + 1.0, g.cy, g.cz, g.l, g.w, g.h))]
        targets.append(Box3D(0.0, 40.0, 0.0, 4.0, 2.0, 1.5))
        for n_det in range(max_dets + 1):
            for picks in itertools.product(targets, repeat=n_det):
                for sc in itertools.product(scores, repeat=n_det):
                    yield [Detection(b, s) for b, s in zip(picks, sc)], gts
