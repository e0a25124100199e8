"""Per-joint score maps from forest votes.

Every pixel of the feature stack is routed through every tree; the leaf it
lands in casts its stored offset votes, weighted by the leaf's per-action
foreground probability. The per-action maps are combined afterwards: with an
action prior (convex mixture), with learned sharing weights, or pooled into
the unconditional single-table map.

Maps are float64 throughout: the decomposed-then-mixed path and the
pooled-statistics path must agree to 1e-9, which single-precision storage
cannot guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

from . import core
from .forest import ConditionalForest, Tree


@dataclass(frozen=True)
class ScoreMap:
    """Nonnegative per-pixel score field for one joint."""

    values: np.ndarray  # (height, width) float64
    joint: str
    action: str  # an action name, or "mixed"
    scale: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise ValueError("score map must be 2-D")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _leaf_groups(leaf_map: np.ndarray):
    """Group pixel coordinates by the leaf they routed to."""
    h, w = leaf_map.shape
    flat = leaf_map.ravel()
    order = np.argsort(flat, kind="stable")
    srt = flat[order]
    starts = np.flatnonzero(np.r_[True, srt[1:] != srt[:-1]])
    groups = []
    for gi, s in enumerate(starts):
        e = starts[gi + 1] if gi + 1 < len(starts) else len(srt)
        pix = order[s:e]
        groups.append((int(srt[s]), pix // w, pix % w))
    return groups


def _scatter(acc, py, px, offs, wts, scale):
    """Add vote mass at pixel + rounded offset; out-of-image votes dropped.

    One bincount per (leaf, action): accumulation order is fixed by target
    index, so results are identical at any worker count.
    """
    h, w = acc.shape
    di = np.floor(np.asarray(offs) + 0.5).astype(np.intp)
    ty = (py[:, None] + di[None, :, 1]).ravel()
    tx = (px[:, None] + di[None, :, 0]).ravel()
    weights = np.broadcast_to(scale * np.asarray(wts), (len(py), len(wts)))
    ok = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
    if np.any(ok):
        flat = ty[ok] * w + tx[ok]
        acc += np.bincount(
            flat, weights=weights.reshape(-1)[ok], minlength=h * w
        ).reshape(h, w)


def vote_maps(forest: ConditionalForest, stack: core.FeatureStack):
    """Dense voting; returns one ScoreMap per action for the forest's joint.

    Each pixel contributes, per tree and action, vote weights scaled by
    1 / n_trees at pixel + offset; votes landing outside the image are
    dropped. Accumulation order is fixed (tree-major) so results are
    identical at any worker count.
    """
    n_actions = forest.n_actions
    acc = [
        np.zeros((stack.height, stack.width), dtype=np.float64)
        for _ in range(n_actions)
    ]
    inv_f = 1.0 / len(forest.trees)
    for tree in forest.trees:
        for leaf_idx, py, px in _leaf_groups(tree.route_all(stack)):
            leaf = tree.leaves[leaf_idx]
            for a in range(n_actions):
                offs, wts = leaf.votes[a]
                if len(offs):
                    _scatter(acc[a], py, px, offs, wts, inv_f)
    return [
        ScoreMap(acc[a], forest.joint, forest.action_names[a], stack.scale_factor)
        for a in range(n_actions)
    ]


def vote_map_pooled(forest: ConditionalForest, stack: core.FeatureStack) -> ScoreMap:
    """Unconditional map built from uniformly pooled leaf statistics.

    Single-table voting path; agrees with mixing the per-action maps under a
    uniform prior because pooled leaf statistics are defined as that uniform
    marginalization.
    """
    acc = np.zeros((stack.height, stack.width), dtype=np.float64)
    inv_f = 1.0 / len(forest.trees)
    for tree in forest.trees:
        for leaf_idx, py, px in _leaf_groups(tree.route_all(stack)):
            _, offs, wts = tree.leaves[leaf_idx].pooled()
            if len(offs):
                _scatter(acc, py, px, offs, wts, inv_f)
    return ScoreMap(acc, forest.joint, "mixed", stack.scale_factor)


def _check_same_shape(maps) -> None:
    shapes = {m.values.shape for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"score maps differ in shape: {sorted(shapes)}")


def mix_prior(maps, prior: core.ActionPrior) -> ScoreMap:
    """Pointwise convex combination of per-action maps with weights p_A(a)."""
    maps = list(maps)
    _check_same_shape(maps)
    if len(maps) != prior.probs.size:
        raise ValueError(
            f"{len(maps)} maps but prior covers {prior.probs.size} actions"
        )
    out = np.zeros_like(maps[0].values)
    for m, p in zip(maps, prior.probs):
        out += p * m.values
    return ScoreMap(out, maps[0].joint, "mixed", maps[0].scale)


def apply_sharing(maps, gamma: np.ndarray) -> ScoreMap:
    """Weighted combination of per-action maps with simplex weights gamma."""
    maps = list(maps)
    _check_same_shape(maps)
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.size != len(maps):
        raise ValueError(f"{len(maps)} maps but {gamma.size} sharing weights")
    if np.any(gamma < -1e-6) or abs(float(gamma.sum()) - 1.0) > 1e-6:
        raise ValueError("sharing weights must lie on the probability simplex")
    out = np.zeros_like(maps[0].values)
    for m, g in zip(maps, gamma):
        out += g * m.values
    return ScoreMap(out, maps[0].joint, "mixed", maps[0].scale)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Unnormalized 1-D kernel exp(-d^2 / sigma^2), truncated at ceil(3*sigma)."""
    radius = int(np.ceil(3.0 * sigma))
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-(d**2) / sigma**2)


def smooth(score_map: ScoreMap, sigma: float = 3.0) -> ScoreMap:
    """Convolve with the unnormalized separable Gaussian.

    No boundary renormalization: mass near the border simply leaks out
    (zero padding), since the sum runs over image pixels only.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = gaussian_kernel(sigma)
    tmp = convolve1d(score_map.values, k, axis=0, mode="constant", cval=0.0)
    out = convolve1d(tmp, k, axis=1, mode="constant", cval=0.0)
    return ScoreMap(out, score_map.joint, score_map.action, score_map.scale)
