"""Exact MAP pose inference on the kinematic tree.

Leaf-to-root max-product in the log domain. Each edge's message is a
generalized distance transform per deformation cluster, followed by a
pointwise max over clusters. Three transform backends:

* ``axis``: exact separable lower-envelope passes, used whenever the
  covariance is diagonal (real-valued means are handled by evaluating the
  envelope at shifted query positions);
* ``brute``: exact O(n^2) maximization, used for small maps and for
  verification;
* ``rotated``: lower-envelope passes on a nearest-neighbor resampled grid in
  the covariance eigenbasis, used for large maps with full covariances. The
  grid quantization makes this one approximate; the returned total is always
  an honest re-scoring of the backtracked configuration.

Argmax ties break toward the smallest (cluster, y, x) index so replays are
bit-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import core
from .pairwise import DeformationCluster, PairwiseModel, log_eval_cluster
from .unary import ScoreMap

UNARY_FLOOR = 1e-12
BRUTE_SIZE_LIMIT = 64  # "auto" uses the exact path strictly below this size


@dataclass(frozen=True)
class Message:
    """Edge message: per-parent-pixel best score and backtracking pointers."""

    score: np.ndarray  # (H, W) float64, log domain
    child_x: np.ndarray  # (H, W) int32, argmax child location
    child_y: np.ndarray
    cluster: np.ndarray  # (H, W) int32, argmax cluster id


@dataclass(frozen=True)
class PoseEstimate:
    """MAP pose with its per-joint unary log scores and re-scored total."""

    pose: core.Pose
    unary_scores: dict[str, float]
    level: int
    total: float


@njit(cache=True)
def _envelope_rows(g, a, mu, out, arg):
    """Row-wise 1-D lower envelope of parabolas (minimization form).

    out[r, t] = min_p g[r, p] + a * (t + mu - p)^2, arg holds the minimizing
    p. Rows that are entirely +inf produce +inf and arg -1.
    """
    rows, n = g.shape
    v = np.empty(n, np.int64)
    z = np.empty(n + 1, np.float64)
    for r in range(rows):
        k = -1
        for p in range(n):
            gp = g[r, p]
            if gp == np.inf:
                continue
            if k < 0:
                k = 0
                v[0] = p
                z[0] = -np.inf
                z[1] = np.inf
                continue
            s = 0.0
            while k >= 0:
                q = v[k]
                s = ((gp + a * p * p) - (g[r, q] + a * q * q)) / (
                    2.0 * a * (p - q)
                )
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = p
            if k > 0:
                z[k] = s
            else:
                z[k] = -np.inf
            z[k + 1] = np.inf
        if k < 0:
            for t in range(n):
                out[r, t] = np.inf
                arg[r, t] = -1
            continue
        j = 0
        for t in range(n):
            q = t + mu
            while z[j + 1] < q:
                j += 1
            p = v[j]
            out[r, t] = g[r, p] + a * (q - p) * (q - p)
            arg[r, t] = p
    return out, arg


def _dt_separable(neg_scores, ax, ay, mux, muy):
    """Exact axis-aligned transform (minimization domain).

    Returns (D, child_x, child_y) with D[yp, xp] = min over (xj, yj) of
    neg_scores[yj, xj] + ax*(xj - xp - mux)^2 + ay*(yj - yp - muy)^2.
    """
    h, w = neg_scores.shape
    t1 = np.empty_like(neg_scores)
    argx1 = np.empty((h, w), np.int64)
    _envelope_rows(np.ascontiguousarray(neg_scores), ax, mux, t1, argx1)
    t2 = np.empty((w, h))
    argy = np.empty((w, h), np.int64)
    _envelope_rows(np.ascontiguousarray(t1.T), ay, muy, t2, argy)
    d = t2.T
    child_y = argy.T
    cols = np.arange(w)[None, :]
    safe_y = np.maximum(child_y, 0)
    child_x = argx1[safe_y, cols]
    child_x = np.where(child_y < 0, -1, child_x)
    return d, child_x, child_y


def _dt_axis(scores, cluster):
    cov = cluster.cov
    ax = 1.0 / (2.0 * cov[0, 0])
    ay = 1.0 / (2.0 * cov[1, 1])
    neg = np.where(np.isfinite(scores), -scores, np.inf)
    d, cx, cy = _dt_separable(neg, ax, ay, cluster.mean[0], cluster.mean[1])
    out = np.where(np.isfinite(d), -d + np.log(cluster.weight), -np.inf)
    return out, cx.astype(np.int32), cy.astype(np.int32)


def _dt_brute(scores, cluster):
    """Exact dense maximization; O(pixels^2) but unbeatable as an oracle."""
    h, w = scores.shape
    xs = np.tile(np.arange(w, dtype=np.float64), h)
    ys = np.repeat(np.arange(h, dtype=np.float64), w)
    flat = scores.ravel()
    inv = np.linalg.inv(cluster.cov)
    logw = np.log(cluster.weight)
    out = np.empty(h * w)
    arg = np.empty(h * w, np.int64)
    chunk = max(1, int(2**22 // (h * w) or 1))
    for start in range(0, h * w, chunk):
        end = min(start + chunk, h * w)
        dx = xs[None, :] - xs[start:end, None] - cluster.mean[0]
        dy = ys[None, :] - ys[start:end, None] - cluster.mean[1]
        q = inv[0, 0] * dx * dx + 2.0 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        vals = flat[None, :] - 0.5 * q
        arg[start:end] = np.argmax(vals, axis=1)
        out[start:end] = vals[np.arange(start, end) - start, arg[start:end]]
    out = out + logw
    finite = np.isfinite(out)
    cx = np.where(finite, arg % w, -1).astype(np.int32)
    cy = np.where(finite, arg // w, -1).astype(np.int32)
    return out.reshape(h, w), cx.reshape(h, w), cy.reshape(h, w)


def _dt_rotated(scores, cluster, guard=2, supersample=None):
    """Approximate transform in the covariance eigenbasis.

    Pixels are scattered to the nearest cell of a supersampled integer grid
    in rotated coordinates (collisions keep the best score), the separable
    transform runs there, and parents read back their own rotated cell.
    The supersampling adapts to the sharpest eigenvalue so the quadratic's
    quantization error stays small even for tight clusters.
    """
    h, w = scores.shape
    vals, vecs = np.linalg.eigh(cluster.cov)
    if supersample is None:
        supersample = int(np.clip(np.ceil(1.5 / np.sqrt(vals[0])), 2, 8))
    px = np.tile(np.arange(w, dtype=np.float64), h)
    py = np.repeat(np.arange(h, dtype=np.float64), w)
    ss = float(supersample)
    u = (vecs[0, 0] * px + vecs[1, 0] * py) * ss
    v = (vecs[0, 1] * px + vecs[1, 1] * py) * ss
    pad = guard * supersample
    u0 = np.floor(u.min()) - pad
    v0 = np.floor(v.min()) - pad
    gw = int(np.ceil(u.max()) - u0) + 1 + pad
    gh = int(np.ceil(v.max()) - v0) + 1 + pad
    iu = np.floor(u - u0 + 0.5).astype(np.intp)
    iv = np.floor(v - v0 + 0.5).astype(np.intp)
    cells = iv * gw + iu
    flat_scores = np.where(np.isfinite(scores.ravel()), scores.ravel(), -np.inf)

    grid = np.full(gh * gw, np.inf)
    src = np.full(gh * gw, -1, np.int64)
    idx = np.arange(h * w)
    order = np.lexsort((-idx, flat_scores, cells))
    grid[cells[order]] = -flat_scores[order]  # min domain; last write wins
    src[cells[order]] = idx[order]
    grid = grid.reshape(gh, gw)

    mu_u = float(vecs[0, 0] * cluster.mean[0] + vecs[1, 0] * cluster.mean[1]) * ss
    mu_v = float(vecs[0, 1] * cluster.mean[0] + vecs[1, 1] * cluster.mean[1]) * ss
    au = 1.0 / (2.0 * vals[0] * ss * ss)
    av = 1.0 / (2.0 * vals[1] * ss * ss)
    d, gcx, gcy = _dt_separable(grid, au, av, mu_u, mu_v)

    # Parents read the field at their true rotated coordinate via bilinear
    # interpolation (the nearest-cell value has a gradient-scaled bias);
    # backtracking pointers come from the nearest cell.
    fu = u - u0
    fv = v - v0
    u_lo = np.clip(np.floor(fu).astype(np.intp), 0, gw - 2)
    v_lo = np.clip(np.floor(fv).astype(np.intp), 0, gh - 2)
    tu = fu - u_lo
    tv = fv - v_lo
    d00 = d[v_lo, u_lo]
    d01 = d[v_lo, u_lo + 1]
    d10 = d[v_lo + 1, u_lo]
    d11 = d[v_lo + 1, u_lo + 1]
    top = d00 + tu * (d01 - d00)
    bot = d10 + tu * (d11 - d10)
    interp = top + tv * (bot - top)
    interp = np.where(np.isfinite(interp), interp, d[iv, iu])
    score = np.where(
        np.isfinite(interp), -interp + np.log(cluster.weight), -np.inf
    ).reshape(h, w)
    gcx_p = gcx[iv, iu].reshape(h, w)
    gcy_p = gcy[iv, iu].reshape(h, w)
    child_src = np.where(
        (gcx_p >= 0) & (gcy_p >= 0),
        src[np.maximum(gcy_p, 0) * gw + np.maximum(gcx_p, 0)],
        -1,
    )
    cx = np.where(child_src >= 0, child_src % w, -1).astype(np.int32)
    cy = np.where(child_src >= 0, child_src // w, -1).astype(np.int32)
    return score, cx, cy


def _is_diagonal(cov) -> bool:
    return abs(cov[0, 1]) <= 1e-12 * np.sqrt(cov[0, 0] * cov[1, 1])


def distance_transform(
    scores: np.ndarray, cluster: DeformationCluster, mode: str = "auto"
) -> Message:
    """Max over child locations of score + log cluster density, per parent.

    ``scores`` is a log-domain (H, W) array (may contain -inf). Modes:
    "auto" picks an exact backend below the brute-force size limit and the
    rotated approximation above it; "exact" never approximates; "fast" always
    uses the envelope backends.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if mode not in ("auto", "exact", "fast"):
        raise ValueError(f"unknown distance-transform mode {mode!r}")
    if _is_diagonal(cluster.cov):
        score, cx, cy = _dt_axis(scores, cluster)
    elif mode == "fast":
        score, cx, cy = _dt_rotated(scores, cluster)
    elif mode == "exact" or max(scores.shape) < BRUTE_SIZE_LIMIT:
        score, cx, cy = _dt_brute(scores, cluster)
    else:
        score, cx, cy = _dt_rotated(scores, cluster)
    cid = np.full(scores.shape, cluster.cluster_id, np.int32)
    return Message(score, cx, cy, cid)


def _merge_clusters(messages) -> Message:
    """Pointwise max over per-cluster messages; first (smallest id) wins ties."""
    best = messages[0]
    score = best.score.copy()
    cx, cy = best.child_x.copy(), best.child_y.copy()
    cid = best.cluster.copy()
    for m in messages[1:]:
        better = m.score > score
        score[better] = m.score[better]
        cx[better] = m.child_x[better]
        cy[better] = m.child_y[better]
        cid[better] = m.cluster[better]
    return Message(score, cx, cy, cid)


def max_product(
    tree: core.KinematicTree,
    unary_maps: dict[str, ScoreMap],
    model: PairwiseModel,
    dt_mode: str = "auto",
) -> PoseEstimate:
    """Exact MAP over the tree (up to the chosen transform backend).

    Unaries are floored at 1e-12 before the log so empty vote maps stay
    finite. The returned total is the re-scored log posterior of the
    backtracked configuration.
    """
    problems = core.validate_tree(tree)
    if problems:
        raise ValueError("invalid kinematic tree: " + "; ".join(problems))
    shapes = {unary_maps[j].values.shape for j in tree.joints}
    if len(shapes) != 1:
        raise ValueError(f"unary maps differ in shape: {sorted(shapes)}")
    h, w = shapes.pop()

    log_u = {
        j: np.log(np.maximum(unary_maps[j].values, UNARY_FLOOR))
        for j in tree.joints
    }
    children = tree.children_of()
    order = tree.topological_order()

    msgs: dict[str, Message] = {}
    for j in reversed(order):
        subtree = log_u[j].copy()
        for c in children[j]:
            subtree = subtree + msgs[c].score
        if j == tree.root:
            root_map = subtree
            continue
        clusters = model.edge(j, tree.parent_of()[j])
        if not clusters:
            raise ValueError(f"edge ({j}) has no deformation clusters")
        msgs[j] = _merge_clusters(
            [distance_transform(subtree, c, dt_mode) for c in clusters]
        )

    flat_root = int(np.argmax(root_map))
    locations = {tree.root: (flat_root % w, flat_root // w)}
    chosen_cluster: dict[str, int] = {}
    for j in order:
        for c in children[j]:
            px, py = locations[j]
            m = msgs[c]
            locations[c] = (int(m.child_x[py, px]), int(m.child_y[py, px]))
            chosen_cluster[c] = int(m.cluster[py, px])

    unary_scores = {}
    total = 0.0
    for j in tree.joints:
        x, y = locations[j]
        unary_scores[j] = float(log_u[j][y, x])
        total += unary_scores[j]
    for child, parent in tree.edges:
        d = np.array(locations[child], dtype=np.float64) - np.array(
            locations[parent], dtype=np.float64
        )
        by_id = {c.cluster_id: c for c in model.edge(child, parent)}
        total += log_eval_cluster(by_id[chosen_cluster[child]], d)

    loc_array = np.array([locations[j] for j in tree.joints], dtype=np.float64)
    scale = unary_maps[tree.root].scale
    pose = core.Pose(loc_array, scale=scale if scale > 0 else 1.0)
    return PoseEstimate(pose, unary_scores, level=0, total=total)


def infer_multiscale(
    tree: core.KinematicTree,
    per_level_maps,
    model: PairwiseModel,
    factor: float,
    dt_mode: str = "auto",
) -> PoseEstimate:
    """Run max_product per pyramid level, keep the highest total.

    The winning pose's coordinates are mapped back to the level-0 frame by
    dividing by factor**level. Ties keep the lowest level index.
    """
    if not per_level_maps:
        raise ValueError("need at least one pyramid level")
    best: PoseEstimate | None = None
    best_level = -1
    for level, maps in enumerate(per_level_maps):
        est = max_product(tree, maps, model, dt_mode)
        if best is None or est.total > best.total:
            best = est
            best_level = level
    level_scale = factor**best_level
    pose = core.Pose(
        best.pose.locations / level_scale,
        scale=level_scale,
        frame_index=best.pose.frame_index,
    )
    return PoseEstimate(pose, best.unary_scores, best_level, best.total)
