"""Saliency evaluation metrics: NSS, CC, SIM, AUC-Judd, AUC-Borji, shuffled AUC, EMD.

Maps are 2-D arrays indexed ``[row, col]``; fixations are ``(x, y)`` integer
pixel coordinates, i.e. ``(col, row)``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

METRIC_COLUMNS = ("AUC-Judd", "SIM", "EMD", "AUC-Borji", "sAUC", "CC", "NSS")


class DegenerateMapError(ValueError):
    """The map cannot be normalised (zero variance or zero mass)."""


class DegenerateMapWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FixationSet:
    points: np.ndarray  # (N, 2) int, columns x, y
    width: int
    height: int

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)
        bad = (pts[:, 0] < 0) | (pts[:, 0] >= self.width) | (pts[:, 1] < 0) | (pts[:, 1] >= self.height)
        if bad.any():
            k = int(np.argmax(bad))
            raise ValueError(
                f"fixation {k} at (x={pts[k, 0]}, y={pts[k, 1]}) outside {self.width}x{self.height} image")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @property
    def flat_indices(self):
        return self.points[:, 1] * self.width + self.points[:, 0]

    def mask(self):
        m = np.zeros((self.height, self.width), dtype=bool)
        m[self.points[:, 1], self.points[:, 0]] = True
        return m


def _as_map(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"saliency map must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("saliency map contains non-finite values")
    return m


def _check_fixations(s, fix: FixationSet):
    if (fix.height, fix.width) != s.shape:
        raise ValueError(f"fixations are for a {fix.height}x{fix.width} image, map is {s.shape}")
    if len(fix) == 0:
        raise ValueError("fixation set is empty")


def zscore(m):
    m = _as_map(m)
    sd = m.std()
    if sd == 0:
        raise DegenerateMapError("map has zero variance")
    return (m - m.mean()) / sd


def to_distribution(m):
    m = _as_map(m)
    if np.any(m < 0):
        raise ValueError("map must be non-negative to be treated as a distribution")
    total = m.sum()
    if total <= 0:
        raise DegenerateMapError("map has zero mass")
    return m / total


def nss(s, fix: FixationSet) -> float:
    """Mean z-scored saliency at the fixated pixels.

    A constant map yields 0.0 and a :class:`DegenerateMapWarning`.
    """
    s = _as_map(s)
    _check_fixations(s, fix)
    if s.std() == 0:
        warnings.warn("NSS of a constant map is defined as 0", DegenerateMapWarning, stacklevel=2)
        return 0.0
    z = zscore(s)
    return float(z[fix.points[:, 1], fix.points[:, 0]].mean())


def cc(s, g) -> float:
    """Pearson correlation (population moments) between two maps."""
    s, g = _as_map(s), _as_map(g)
    if s.shape != g.shape:
        raise ValueError(f"map shapes differ: {s.shape} vs {g.shape}")
    return float(np.mean(zscore(s) * zscore(g)))


def sim(s, g) -> float:
    """Histogram intersection of the two sum-to-one maps."""
    s, g = _as_map(s), _as_map(g)
    if s.shape != g.shape:
        raise ValueError(f"map shapes differ: {s.shape} vs {g.shape}")
    return float(np.minimum(to_distribution(s), to_distribution(g)).sum())


def roc_auc(pos, neg) -> float:
    """Trapezoidal area under the ROC traced by sweeping every distinct value."""
    pos = np.sort(np.asarray(pos, dtype=np.float64))
    neg = np.sort(np.asarray(neg, dtype=np.float64))
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("ROC needs non-empty positive and negative sets")
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    tp = (len(pos) - np.searchsorted(pos, thresholds, "left")) / len(pos)
    fp = (len(neg) - np.searchsorted(neg, thresholds, "left")) / len(neg)
    return float(np.trapezoid(np.r_[0.0, tp], np.r_[0.0, fp]))


def auc_judd(s, fix: FixationSet) -> float:
    """ROC area with thresholds at the saliency of every fixated pixel.

    Positives are the distinct fixated pixels; every other pixel is a
    negative. The curve runs from (0, 0) through one point per threshold to
    (1, 1).
    """
    s = _as_map(s)
    _check_fixations(s, fix)
    flat = s.ravel()
    fixated = np.unique(fix.flat_indices)
    n_pix, n_fix = flat.size, len(fixated)
    if n_fix == n_pix:
        raise ValueError("every pixel is fixated; no negatives remain")
    pos = np.sort(flat[fixated])
    allv = np.sort(flat)
    thresholds = pos[::-1]
    n_pos_above = n_fix - np.searchsorted(pos, thresholds, "left")
    n_all_above = n_pix - np.searchsorted(allv, thresholds, "left")
    tp = np.r_[0.0, n_pos_above / n_fix, 1.0]
    fp = np.r_[0.0, (n_all_above - n_pos_above) / (n_pix - n_fix), 1.0]
    return float(np.trapezoid(tp, fp))


def auc_borji_splits(s, fix: FixationSet, n_splits=100, seed=0, n_negatives=None):
    """Per-split ROC areas against uniformly sampled non-fixated pixels."""
    s = _as_map(s)
    _check_fixations(s, fix)
    flat = s.ravel()
    fixated = np.zeros(flat.size, dtype=bool)
    fixated[fix.flat_indices] = True
    candidates = np.flatnonzero(~fixated)
    if len(candidates) == 0:
        raise ValueError("no non-fixated pixels to sample negatives from")
    pos = flat[fix.flat_indices]
    k = len(fix) if n_negatives is None else n_negatives
    rng = np.random.default_rng(seed)
    return np.array([roc_auc(pos, flat[rng.choice(candidates, size=k)]) for _ in range(n_splits)])


def auc_borji(s, fix: FixationSet, n_splits=100, seed=0, n_negatives=None) -> float:
    return float(auc_borji_splits(s, fix, n_splits, seed, n_negatives).mean())


def auc_shuffled_splits(s, fix: FixationSet, other_points, n_splits=100, seed=0):
    """Per-split ROC areas using other images' fixations as negatives.

    ``other_points`` is an ``(M, 2)`` array of ``(x, y)`` fixations pooled
    from other images; points outside this map are ignored. Each split draws
    ``min(len(fix), M)`` of them without replacement.
    """
    s = _as_map(s)
    _check_fixations(s, fix)
    other = np.asarray(other_points, dtype=np.int64).reshape(-1, 2)
    inside = (other[:, 0] >= 0) & (other[:, 0] < s.shape[1]) & (other[:, 1] >= 0) & (other[:, 1] < s.shape[0])
    other = other[inside]
    if len(other) == 0:
        raise ValueError("shuffled AUC needs a non-empty pool of other-image fixations")
    pool = s[other[:, 1], other[:, 0]]
    pos = s[fix.points[:, 1], fix.points[:, 0]]
    k = min(len(fix), len(pool))
    rng = np.random.default_rng(seed)
    return np.array([roc_auc(pos, rng.choice(pool, size=k, replace=False)) for _ in range(n_splits)])


def auc_shuffled(s, fix: FixationSet, other_points, n_splits=100, seed=0) -> float:
    return float(auc_shuffled_splits(s, fix, other_points, n_splits, seed).mean())


# --- earth mover's distance --------------------------------------------------

def box_downsample(m, grid):
    """Sum-pool ``m`` by the smallest integer factor that fits ``grid`` cells per axis.

    Returns ``(pooled, factor)``; edges are zero-padded to a multiple of the factor.
    """
    h, w = m.shape
    f = max(1, math.ceil(h / grid), math.ceil(w / grid))
    if f == 1:
        return m, 1
    ph, pw = -h % f, -w % f
    m = np.pad(m, ((0, ph), (0, pw)))
    return m.reshape(m.shape[0] // f, f, m.shape[1] // f, f).sum(axis=(1, 3)), f


def cell_distances(src_cells, dst_cells):
    """Euclidean distances between ``(row, col)`` cell centres."""
    d = src_cells[:, None, :].astype(np.float64) - dst_cells[None, :, :]
    return np.sqrt((d * d).sum(axis=-1))


def emd(s, g, grid=32) -> float:
    """Earth mover's distance between the sum-to-one forms of two maps.

    Maps larger than ``grid`` cells along an axis are box-downsampled first;
    the cost is in cell widths of the (possibly downsampled) grid. Solved
    exactly as a transportation problem.
    """
    s, g = _as_map(s), _as_map(g)
    if s.shape != g.shape:
        raise ValueError(f"map shapes differ: {s.shape} vs {g.shape}")
    a = to_distribution(box_downsample(s, grid)[0])
    b = to_distribution(box_downsample(g, grid)[0])
    src = np.argwhere(a > 0)
    dst = np.argwhere(b > 0)
    cost = cell_distances(src, dst)
    return transport_cost(a[a > 0], b[b > 0], cost)


def transport_cost(supply, demand, cost) -> float:
    """Minimum cost of shipping ``supply`` to ``demand`` (equal totals).

    Network simplex specialised to the complete bipartite graph: a greedy
    least-cost start completed to a spanning tree, then pivots on the most
    negative reduced cost within rotating row blocks.
    """
    flows, _ = transport_plan(supply, demand, cost)
    return float(sum(x * cost[i, j] for (i, j), x in flows.items()))


def _initial_tree(supply, demand, cost):
    m, n = cost.shape
    ra, rb = supply.astype(np.float64).copy(), demand.astype(np.float64).copy()
    flows = {}
    parent = list(range(m + n))

    def find(u):
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    # least-cost greedy: every assignment exhausts a row or a column, so the
    # positive cells form a forest
    for flat in np.argsort(cost, axis=None, kind="stable"):
        i, j = divmod(int(flat), n)
        x = min(ra[i], rb[j])
        if x <= 0:
            continue
        flows[i, j] = x
        ra[i] -= x
        rb[j] -= x
        parent[find(i)] = find(m + j)
    # rounding leftovers can strand a node; join every component to the one
    # holding row 0 with zero-flow cells so the basis is a spanning tree
    col0 = next((j for (i, j) in flows if i == 0), 0)
    for i in range(m):
        if find(i) != find(0):
            flows[i, col0] = 0.0
            parent[find(i)] = find(0)
    for j in range(n):
        if find(m + j) != find(0):
            flows[0, j] = 0.0
            parent[find(m + j)] = find(0)
    return flows


def transport_plan(supply, demand, cost, max_pivots=None):
    """Optimal basic flow ``{(i, j): amount}`` and the number of pivots."""
    supply = np.asarray(supply, dtype=np.float64)
    demand = np.asarray(demand, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    m, n = cost.shape
    if supply.shape != (m,) or demand.shape != (n,):
        raise ValueError("supply/demand lengths must match the cost matrix")
    if np.any(supply < 0) or np.any(demand < 0):
        raise ValueError("supplies and demands must be non-negative")
    if not math.isclose(supply.sum(), demand.sum(), rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"unbalanced transport problem: {supply.sum()} vs {demand.sum()}")
    flows = _initial_tree(supply, demand, cost)
    if m == 1 or n == 1:
        return flows, 0
    tol = 1e-12 * max(1.0, float(cost.max()))
    max_pivots = max_pivots or 50 * (m + n) * max(m, n)
    block = max(1, min(m, 4096 // max(1, n) or 1, 64))
    row_adj = [[] for _ in range(m)]
    col_adj = [[] for _ in range(n)]
    for i, j in flows:
        row_adj[i].append(j)
        col_adj[j].append(i)
    u, v = np.zeros(m), np.zeros(n)
    _potentials(row_adj, col_adj, cost, u, v)
    start = 0
    for pivots in range(max_pivots):
        entering = None
        for k in range(0, m, block):
            r0 = (start + k) % m
            rows = np.arange(r0, min(r0 + block, m))
            red = cost[rows] - u[rows, None] - v[None, :]
            idx = int(np.argmin(red))
            if red.flat[idx] < -tol:
                entering = (int(rows[idx // n]), idx % n)
                delta = float(red.flat[idx])
                start = r0 + block
                break
        if entering is None:
            return flows, pivots
        i0, j0 = entering
        path = _tree_path(row_adj, col_adj, i0, j0, m)
        # path cells alternate -,+,-,... starting from the column end
        minus = path[0::2]
        plus = path[1::2]
        theta, leave = min((flows[c], k) for k, c in enumerate(minus))
        leaving = minus[leave]
        for c in minus:
            flows[c] -= theta
        for c in plus:
            flows[c] += theta
        flows[i0, j0] = theta
        del flows[leaving]
        li, lj = leaving
        row_adj[li].remove(lj)
        col_adj[lj].remove(li)
        # the side of the cut that lacks row 0 is re-anchored through the entering cell
        rows_moved, cols_moved = _cut_side(row_adj, col_adj, li, lj)
        if i0 in rows_moved:
            u[rows_moved] += delta
            v[cols_moved] -= delta
        else:
            u[rows_moved] -= delta
            v[cols_moved] += delta
        row_adj[i0].append(j0)
        col_adj[j0].append(i0)
    raise RuntimeError("transport simplex did not converge (pivot limit reached)")


def _potentials(row_adj, col_adj, cost, u, v):
    m = len(row_adj)
    seen_r = np.zeros(m, dtype=bool)
    seen_c = np.zeros(len(col_adj), dtype=bool)
    u[0] = 0.0
    seen_r[0] = True
    stack = [(0, True)]
    while stack:
        node, is_row = stack.pop()
        if is_row:
            for j in row_adj[node]:
                if not seen_c[j]:
                    seen_c[j] = True
                    v[j] = cost[node, j] - u[node]
                    stack.append((j, False))
        else:
            for i in col_adj[node]:
                if not seen_r[i]:
                    seen_r[i] = True
                    u[i] = cost[i, node] - v[node]
                    stack.append((i, True))


def _cut_side(row_adj, col_adj, li, lj):
    """Rows and columns of the component, after cutting ``(li, lj)``, without row 0.

    Both components are searched in lockstep; as soon as one of them turns
    out to hold row 0 only the other one is walked to completion.
    """
    stacks = [[(li, True)], [(lj, False)]]
    seen = [{(li, True)}, {(lj, False)}]
    rooted = [li == 0, False]
    while not (rooted[0] or rooted[1]):
        for k in (0, 1):
            if not stacks[k]:
                return _split(seen[k])
            _expand(row_adj, col_adj, stacks[k], seen[k])
            if (0, True) in seen[k]:
                rooted[k] = True
                break
    k = 1 if rooted[0] else 0
    while stacks[k]:
        _expand(row_adj, col_adj, stacks[k], seen[k])
    return _split(seen[k])


def _expand(row_adj, col_adj, stack, seen):
    node, is_row = stack.pop()
    for nb in (row_adj[node] if is_row else col_adj[node]):
        key = (nb, not is_row)
        if key not in seen:
            seen.add(key)
            stack.append(key)


def _split(nodes):
    return [a for a, r in nodes if r], [a for a, r in nodes if not r]


def _tree_path(row_adj, col_adj, i0, j0, m):
    """Cells on the tree path from column ``j0`` to row ``i0``, in order."""
    # BFS from row i0; parents recorded as (node, is_row)
    parent = {(i0, True): None}
    queue = [(i0, True)]
    target = (j0, False)
    head = 0
    while head < len(queue):
        node, is_row = queue[head]
        head += 1
        if (node, is_row) == target:
            break
        nbrs = row_adj[node] if is_row else col_adj[node]
        for nb in nbrs:
            key = (nb, not is_row)
            if key not in parent:
                parent[key] = (node, is_row)
                queue.append(key)
    cells = []
    cur = target
    while parent[cur] is not None:
        prev = parent[cur]
        (a, a_row), (b, _) = cur, prev
        cells.append((a, b) if a_row else (b, a))
        cur = prev
    return cells


# --- ground truth and reports ----------------------------------------------

def fixations_to_map(fix: FixationSet, sigma=2.0):
    """Gaussian-blurred fixation histogram, min-max normalised to [0, 1]."""
    counts = np.zeros((fix.height, fix.width))
    np.add.at(counts, (fix.points[:, 1], fix.points[:, 0]), 1.0)
    m = gaussian_filter(counts, sigma, mode="constant")
    lo, hi = m.min(), m.max()
    return (m - lo) / (hi - lo) if hi > lo else m


def evaluate_map(pred, gt, fix: FixationSet, other_points, *, emd_grid=32, auc_splits=100, seed=0):
    """All seven metrics for one image, keyed by :data:`METRIC_COLUMNS`."""
    row = {}

    def safe(fn, *args):
        try:
            return fn(*args)
        except DegenerateMapError:
            return float("nan")

    row["AUC-Judd"] = auc_judd(pred, fix)
    row["SIM"] = safe(sim, pred, gt)
    row["EMD"] = safe(emd, pred, gt, emd_grid)
    row["AUC-Borji"] = auc_borji(pred, fix, auc_splits, seed)
    row["sAUC"] = (auc_shuffled(pred, fix, other_points, auc_splits, seed)
                   if len(other_points) else float("nan"))
    row["CC"] = safe(cc, pred, gt)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateMapWarning)
        row["NSS"] = nss(pred, fix)
    return row


def evaluate_dataset(preds, gts, fixations, *, emd_grid=32, auc_splits=100, seed=0):
    """Per-image metric rows; shuffled-AUC negatives pool the other images' fixations."""
    rows = []
    for k, (pred, gt, fix) in enumerate(zip(preds, gts, fixations)):
        others = [f.points for i, f in enumerate(fixations) if i != k]
        other = np.concatenate(others) if others else np.empty((0, 2), dtype=np.int64)
        rows.append(evaluate_map(pred, gt, fix, other, emd_grid=emd_grid,
                                 auc_splits=auc_splits, seed=seed + k))
    return rows


def aggregate(rows):
    return {c: float(np.nanmean([r[c] for r in rows])) for c in METRIC_COLUMNS}


def format_report(rows, ids, header_note="", label="image"):
    """Tab-separated table: one row per image, then a ``mean`` row."""
    lines = []
    if header_note:
        lines.append(f"# {header_note}")
    lines.append("\t".join((label,) + METRIC_COLUMNS))
    for rid, row in zip(ids, rows):
        lines.append("\t".join([str(rid)] + [f"{row[c]:.6f}" for c in METRIC_COLUMNS]))
    if rows:
        agg = aggregate(rows)
        lines.append("\t".join(["mean"] + [f"{agg[c]:.6f}" for c in METRIC_COLUMNS]))
    return "\n".join(lines) + "\n"
