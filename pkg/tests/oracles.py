"""Brute-force oracles, written independently of the library internals.

Distance oracles compose squared terms in the same axis order as the
library (x, then y, then z) so that exact float comparison is meaningful;
everything else (search, labeling, percentiles) is derived from first
principles here.
"""

import itertools

import numpy as np

FACE_OFFSETS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]


def neighbor_offsets(connectivity):
    offs = []
    for off in itertools.product((-1, 0, 1), repeat=3):
        if off == (0, 0, 0):
            continue
        manhattan = sum(abs(o) for o in off)
        if connectivity == 6 and manhattan == 1:
            offs.append(off)
        elif connectivity == 18 and manhattan <= 2:
            offs.append(off)
        elif connectivity == 26:
            offs.append(off)
    return offs


def flood_fill_components(mask, connectivity):
    """Stack-based flood fill; ids follow the C-order scan of seeds."""
    mask = np.asarray(mask, dtype=bool)
    comp = np.zeros(mask.shape, dtype=np.int32)
    offs = neighbor_offsets(connectivity)
    next_id = 0
    for seed in np.argwhere(mask):
        seed = tuple(int(v) for v in seed)
        if comp[seed]:
            continue
        next_id += 1
        stack = [seed]
        comp[seed] = next_id
        while stack:
            vx, vy, vz = stack.pop()
            for ox, oy, oz in offs:
                w = (vx + ox, vy + oy, vz + oz)
                if (
                    0 <= w[0] < mask.shape[0]
                    and 0 <= w[1] < mask.shape[1]
                    and 0 <= w[2] < mask.shape[2]
                    and mask[w]
                    and not comp[w]
                ):
                    comp[w] = next_id
                    stack.append(w)
    return comp, next_id


def same_partition(a, b):
    """True iff two labelings induce the same partition of the foreground."""
    a = np.asarray(a)
    b = np.asarray(b)
    if ((a > 0) != (b > 0)).any():
        return False
    fg = a > 0
    pairs = set(zip(a[fg].tolist(), b[fg].tolist()))
    return len(pairs) == len({p for p, _ in pairs}) == len({q for _, q in pairs})


def nearest_distances(points, targets, spacing):
    """Min distance from each of ``points`` to ``targets`` (voxel coords),
    with squared terms composed x-then-y-then-z as the library does."""
    points = np.asarray(points, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    s2 = [float(s) * float(s) for s in spacing]
    out = np.empty(points.shape[0], dtype=np.float64)
    chunk = 512
    for start in range(0, points.shape[0], chunk):
        p = points[start : start + chunk]
        dx = p[:, None, 0] - targets[None, :, 0]
        dy = p[:, None, 1] - targets[None, :, 1]
        dz = p[:, None, 2] - targets[None, :, 2]
        d2 = s2[0] * (dx * dx) + s2[1] * (dy * dy) + s2[2] * (dz * dz)
        out[start : start + chunk] = np.sqrt(d2.min(axis=1))
    return out


def brute_force_edt(mask, spacing):
    """Per-voxel nearest-foreground distance by exhaustive search."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, np.inf)
    targets = np.argwhere(mask)
    grid = np.indices(mask.shape).reshape(3, -1).T
    return nearest_distances(grid, targets, spacing).reshape(mask.shape)


def surface_voxels(mask):
    """Voxels with a six-neighbour outside the mask (border = outside)."""
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros(mask.shape, dtype=bool)
    for v in np.argwhere(mask):
        vx, vy, vz = (int(c) for c in v)
        for ox, oy, oz in FACE_OFFSETS:
            w = (vx + ox, vy + oy, vz + oz)
            if not (
                0 <= w[0] < mask.shape[0]
                and 0 <= w[1] < mask.shape[1]
                and 0 <= w[2] < mask.shape[2]
            ) or not mask[w]:
                out[vx, vy, vz] = True
                break
    return out


def nearest_rank_p95(values):
    values = np.sort(np.asarray(values, dtype=np.float64))
    n = values.shape[0]
    rank = (95 * n + 99) // 100  # ceil(0.95 n) in integer arithmetic
    return float(values[rank - 1])


def brute_force_hd95(pred, gt, spacing, penalty):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if not pred.any() and not gt.any():
        return 0.0
    if not pred.any() or not gt.any():
        return float(penalty)
    sp = np.argwhere(surface_voxels(pred))
    sg = np.argwhere(surface_voxels(gt))
    pooled = np.concatenate(
        [nearest_distances(sp, sg, spacing), nearest_distances(sg, sp, spacing)]
    )
    return nearest_rank_p95(pooled)


def brute_force_dice(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    a = int(pred.sum())
    b = int(gt.sum())
    if a == 0 and b == 0:
        return 1.0
    inter = int((pred & gt).sum())
    return 2.0 * inter / (a + b)


def exhaustive_otsu_cut(values, bins=256):
    """Best histogram cut by explicit search over all cuts; first (lowest)
    cut wins ties. Returns (best_cut, bin_centers, per-cut variances)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = (edges[:-1] + edges[1:]) / 2.0
    variances = np.full(bins - 1, -np.inf)
    best_var, best_cut = -1.0, None
    for cut in range(bins - 1):
        w0 = hist[: cut + 1].sum()
        w1 = hist[cut + 1 :].sum()
        if w0 == 0 or w1 == 0:
            continue
        mu0 = float((hist[: cut + 1] * centers[: cut + 1]).sum()) / w0
        mu1 = float((hist[cut + 1 :] * centers[cut + 1 :]).sum()) / w1
        var = w0 * w1 * (mu0 - mu1) ** 2
        variances[cut] = var
        if var > best_var:
            best_var, best_cut = var, cut
    return best_cut, centers, variances


def argmax_scan(prob_data):
    """Per-voxel linear scan argmax with ties to the lowest channel."""
    nx, ny, nz, nc = prob_data.shape
    out = np.zeros((nx, ny, nz), dtype=np.uint8)
    for ix in range(nx):
        for iy in range(ny):
            for iz in range(nz):
                best, best_c = -np.inf, 0
                for c in range(nc):
                    v = prob_data[ix, iy, iz, c]
                    if v > best:
                        best, best_c = v, c
                out[ix, iy, iz] = best_c
    return out
