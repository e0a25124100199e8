"""Per-edge Gaussian-mixture deformation models.

Child-parent offsets from the training poses are clustered with k-means; each
cluster becomes a weighted Gaussian whose weight is the cluster frequency
raised to a small exponent. An action prior enters as a per-pose sample
weight. For inference-time conditioning without re-clustering, per-action
sufficient statistics are kept per cluster and recombined under any prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core
from .kmeans import weighted_kmeans

PAIRWISE_MAGIC = "ACPW1"
COV_EIGENVALUE_FLOOR = 1e-4


@dataclass(frozen=True)
class DeformationCluster:
    """One weighted Gaussian over (dx, dy) child-parent offsets."""

    mean: np.ndarray  # (2,)
    cov: np.ndarray  # (2, 2) symmetric positive-definite
    weight: float
    cluster_id: int

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=np.float64))
        if self.mean.shape != (2,) or self.cov.shape != (2, 2):
            raise ValueError("cluster must be 2-dimensional")
        if self.weight <= 0:
            raise ValueError("cluster weight must be positive")
        if np.linalg.eigvalsh(self.cov).min() < COV_EIGENVALUE_FLOOR * (1 - 1e-9):
            raise ValueError("covariance below the positive-definite floor")

    def flipped(self) -> "DeformationCluster":
        """The same Gaussian seen from the other end of the edge (d -> -d)."""
        return DeformationCluster(-self.mean, self.cov, self.weight,
                                  self.cluster_id)


def eval_cluster(cluster: DeformationCluster, d) -> float:
    """w * exp(-0.5 (d - mu)^T Sigma^-1 (d - mu))."""
    r = np.asarray(d, dtype=np.float64) - cluster.mean
    q = float(r @ np.linalg.solve(cluster.cov, r))
    return cluster.weight * float(np.exp(-0.5 * q))


def log_eval_cluster(cluster: DeformationCluster, d) -> float:
    """log of eval_cluster, safe from exp underflow at large distances."""
    r = np.asarray(d, dtype=np.float64) - cluster.mean
    q = float(r @ np.linalg.solve(cluster.cov, r))
    return float(np.log(cluster.weight)) - 0.5 * q


def floor_covariance(cov: np.ndarray, floor: float = COV_EIGENVALUE_FLOOR):
    """Clamp eigenvalues from below so the inverse stays well defined."""
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


@dataclass(frozen=True)
class PairwiseModel:
    """K deformation clusters per kinematic edge."""

    clusters: dict[tuple[str, str], tuple[DeformationCluster, ...]]
    alpha: float
    prior_desc: str = "none"

    def edge(self, child: str, parent: str):
        return self.clusters[(child, parent)]


def _fit_clusters(offsets, weights, k, alpha, n_restarts, seed):
    """Weighted k-means then per-cluster weighted Gaussian moments."""
    centers, labels, _ = weighted_kmeans(
        offsets, k, weights, restarts=n_restarts, seed=seed
    )
    out = []
    freq = np.zeros(k)
    for c in range(k):
        freq[c] = weights[labels == c].sum()
    total = freq.sum()
    for c in range(k):
        mask = labels == c
        if freq[c] <= 0:
            continue
        mean = np.average(offsets[mask], axis=0, weights=weights[mask])
        centered = offsets[mask] - mean
        cov = (centered * weights[mask, None]).T @ centered / freq[c]
        out.append(
            DeformationCluster(
                mean, floor_covariance(cov), float((freq[c] / total) ** alpha), c
            )
        )
    return tuple(out)


def pose_offsets(poses, tree: core.KinematicTree):
    """Offsets d = x_child - x_parent for every edge, from a pose list."""
    out = {}
    for child, parent in tree.edges:
        ci, pi = tree.joint_index(child), tree.joint_index(parent)
        d = np.array([p.locations[ci] - p.locations[pi] for p in poses])
        out[(child, parent)] = d
    return out


def fit_pairwise(
    poses,
    labels,
    tree: core.KinematicTree,
    k: int,
    alpha: float = 0.1,
    prior: core.ActionPrior | None = None,
    seed: int = 0,
    restarts: int = 10,
) -> PairwiseModel:
    """Fit the mixture for every edge.

    With a prior, each pose carries sample weight p_A(label); a hard prior
    therefore discards every pose of the other actions. Without a prior all
    poses weigh 1. Raises when an edge has fewer than k distinct offsets.
    """
    labels = np.asarray(labels, dtype=np.intp)
    if prior is None:
        weights = np.ones(len(poses))
        desc = "none"
    else:
        weights = prior.probs[labels]
        desc = prior.mode
    offsets = pose_offsets(poses, tree)
    clusters = {}
    children = np.random.SeedSequence(seed).spawn(len(tree.edges))
    for (edge, d), child_seed in zip(offsets.items(), children):
        clusters[edge] = _fit_clusters(
            d, weights, k, alpha, restarts,
            int(child_seed.generate_state(1, dtype=np.uint64)[0]),
        )
    return PairwiseModel(clusters, alpha, desc)


@dataclass(frozen=True)
class _ClusterStats:
    """Per-action sufficient statistics of one cluster's member offsets."""

    count: np.ndarray  # (A,)
    first: np.ndarray  # (A, 2) sums of d
    second: np.ndarray  # (A, 2, 2) sums of d d^T


# A conditioned cluster needs at least this much effective sample mass;
# below it the covariance is a floored spike that derails inference.
MIN_EFFECTIVE_COUNT = 2.0


@dataclass(frozen=True)
class ConditionalPairwiseModel:
    """Pre-fit statistics for conditioning on any action prior.

    No clustering ever runs at inference time: a shared unweighted
    clustering carries per-action moments for soft reweighting, and each
    action additionally gets its own dedicated fit (what one-hot sample
    weights reduce to) for hard priors.
    """

    stats: dict[tuple[str, str], tuple[_ClusterStats, ...]]
    hard_models: tuple[PairwiseModel, ...]  # one per action
    action_names: tuple[str, ...]
    alpha: float
    k: int
    seed: int

    def condition(self, prior: core.ActionPrior | None) -> PairwiseModel:
        """Gaussians for a prior: pooled for uniform/None, the dedicated
        per-action fit for hard priors, prior-weighted moments on the shared
        clustering otherwise. Clusters whose effective sample mass falls
        below 2 are dropped (their covariance would be a floored spike)."""
        n_actions = len(self.action_names)
        if prior is not None and prior.probs.size != n_actions:
            raise ValueError("prior does not match the model's action set")
        if prior is None or prior.mode == "uniform":
            probs = np.ones(n_actions)
            desc = "none" if prior is None else "uniform"
        elif prior.mode == "hard":
            return self.hard_models[int(np.argmax(prior.probs))]
        else:
            probs = prior.probs * n_actions  # pooled counts under uniform
            desc = "soft"
        out = {}
        for edge, cluster_stats in self.stats.items():
            mass = np.array([s.count @ probs for s in cluster_stats])
            keep = mass >= MIN_EFFECTIVE_COUNT
            if not np.any(keep):
                keep = mass == mass.max()
            total = mass[keep].sum()
            if total <= 0:
                raise ValueError(
                    f"edge {edge} has no training mass under the prior"
                )
            fitted = []
            for cid, s in enumerate(cluster_stats):
                if not keep[cid]:
                    continue
                mean = (probs @ s.first) / mass[cid]
                second = np.einsum("a,aij->ij", probs, s.second) / mass[cid]
                cov = second - np.outer(mean, mean)
                fitted.append(
                    DeformationCluster(
                        mean, floor_covariance(cov),
                        float((mass[cid] / total) ** self.alpha), cid,
                    )
                )
            out[edge] = tuple(fitted)
        return PairwiseModel(out, self.alpha, desc)


def fit_conditional_pairwise(
    poses,
    labels,
    tree: core.KinematicTree,
    action_names,
    k: int,
    alpha: float = 0.1,
    seed: int = 0,
    restarts: int = 10,
) -> ConditionalPairwiseModel:
    """Shared clustering with per-action moments, plus per-action fits.

    The per-action dedicated fits shrink k to the number of distinct offsets
    an action provides, so small desk-scale sets still train.
    """
    labels = np.asarray(labels, dtype=np.intp)
    n_actions = len(action_names)
    offsets = pose_offsets(poses, tree)
    stats = {}
    root_seed = np.random.SeedSequence(seed)
    children = root_seed.spawn(len(tree.edges) * (1 + n_actions))
    for e, (edge, d) in enumerate(offsets.items()):
        _, assign, _ = weighted_kmeans(
            d, k, None, restarts=restarts,
            seed=int(children[e].generate_state(1, dtype=np.uint64)[0]),
        )
        per_cluster = []
        for c in range(k):
            count = np.zeros(n_actions)
            first = np.zeros((n_actions, 2))
            second = np.zeros((n_actions, 2, 2))
            mask = assign == c
            for a in range(n_actions):
                sel = d[mask & (labels == a)]
                count[a] = len(sel)
                if len(sel):
                    first[a] = sel.sum(axis=0)
                    second[a] = sel.T @ sel
            per_cluster.append(_ClusterStats(count, first, second))
        stats[edge] = tuple(per_cluster)
    hard_models = []
    for a in range(n_actions):
        sel = [p for p, lab in zip(poses, labels) if lab == a]
        if not sel:
            raise ValueError(f"no training poses for action {action_names[a]}")
        action_offsets = pose_offsets(sel, tree)
        clusters = {}
        for e, edge in enumerate(offsets):
            d = action_offsets[edge]
            k_eff = min(k, np.unique(d, axis=0).shape[0])
            child = children[len(offsets) * (1 + a) + e]
            clusters[edge] = _fit_clusters(
                d, np.ones(len(d)), k_eff, alpha, restarts,
                int(child.generate_state(1, dtype=np.uint64)[0]),
            )
        hard_models.append(PairwiseModel(clusters, alpha, "hard"))
    return ConditionalPairwiseModel(
        stats, tuple(hard_models), tuple(action_names), alpha, k, seed
    )


# ---------------------------------------------------------------------------
# Text serialization (17 significant digits; round-trips float64 exactly)

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _gaussian_line(c: DeformationCluster) -> str:
    vals = (
        c.mean[0], c.mean[1], c.cov[0, 0], c.cov[0, 1], c.cov[1, 1], c.weight,
    )
    return f"gaussian {c.cluster_id} " + " ".join(_fmt(v) for v in vals)


def _parse_gaussian(parts) -> DeformationCluster:
    cid = int(parts[1])
    vals = [float(v) for v in parts[2:]]
    cov = np.array([[vals[2], vals[3]], [vals[3], vals[4]]])
    return DeformationCluster(np.array(vals[:2]), cov, vals[5], cid)


def save_conditional_pairwise(model: ConditionalPairwiseModel, path) -> None:
    lines = [PAIRWISE_MAGIC]
    lines.append("actions " + " ".join(model.action_names))
    lines.append(f"k {model.k}")
    lines.append(f"alpha {_fmt(model.alpha)}")
    lines.append(f"seed {model.seed}")
    pooled = model.condition(None)
    for edge, cluster_stats in model.stats.items():
        lines.append(f"edge {edge[0]} {edge[1]}")
        for c in pooled.clusters[edge]:
            lines.append(_gaussian_line(c))
        for cid, s in enumerate(cluster_stats):
            lines.append(f"cluster {cid}")
            for a, name in enumerate(model.action_names):
                vals = (
                    s.count[a], s.first[a, 0], s.first[a, 1],
                    s.second[a, 0, 0], s.second[a, 0, 1], s.second[a, 1, 1],
                )
                lines.append(f"stats {name} " + " ".join(_fmt(v) for v in vals))
    for name, hard in zip(model.action_names, model.hard_models):
        lines.append(f"hard {name}")
        for edge, clusters in hard.clusters.items():
            lines.append(f"edge {edge[0]} {edge[1]}")
            for c in clusters:
                lines.append(_gaussian_line(c))
    Path(path).write_text("\n".join(lines) + "\n")


def load_conditional_pairwise(path) -> ConditionalPairwiseModel:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != PAIRWISE_MAGIC:
        raise core.BadMagicError(f"{path}: bad magic, not a pairwise model file")
    try:
        action_names = tuple(lines[1].split()[1:])
        k = int(lines[2].split()[1])
        alpha = float(lines[3].split()[1])
        seed = int(lines[4].split()[1])
        n_actions = len(action_names)
        stats: dict = {}
        hard_clusters: list[dict] = []
        edge = None
        cid = -1
        section = "shared"
        for line in lines[5:]:
            parts = line.split()
            if parts[0] == "hard":
                section = "hard"
                hard_clusters.append({})
                if action_names[len(hard_clusters) - 1] != parts[1]:
                    raise core.FormatError(
                        f"{path}: hard models out of order at {line!r}"
                    )
            elif parts[0] == "edge":
                edge = (parts[1], parts[2])
                if section == "shared":
                    stats[edge] = []
                else:
                    hard_clusters[-1][edge] = []
            elif parts[0] == "gaussian":
                if section == "hard":
                    hard_clusters[-1][edge].append(_parse_gaussian(parts))
                # shared-section gaussians are derived data; skipped on load
            elif parts[0] == "cluster":
                cid = int(parts[1])
                stats[edge].append(
                    _ClusterStats(
                        np.zeros(n_actions),
                        np.zeros((n_actions, 2)),
                        np.zeros((n_actions, 2, 2)),
                    )
                )
            elif parts[0] == "stats":
                a = action_names.index(parts[1])
                vals = [float(v) for v in parts[2:]]
                s = stats[edge][cid]
                s.count[a] = vals[0]
                s.first[a] = vals[1:3]
                s.second[a] = [[vals[3], vals[4]], [vals[4], vals[5]]]
            else:
                raise core.FormatError(
                    f"{path}: unexpected line {line!r} in pairwise model"
                )
        stats = {e: tuple(cl) for e, cl in stats.items()}
        hard_models = tuple(
            PairwiseModel({e: tuple(cl) for e, cl in h.items()}, alpha, "hard")
            for h in hard_clusters
        )
        if len(hard_models) != n_actions:
            raise core.FormatError(f"{path}: missing per-action models")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, core.FormatError):
            raise
        raise core.TruncatedError(f"{path}: malformed pairwise model") from exc
    return ConditionalPairwiseModel(
        stats, hard_models, action_names, alpha, k, seed
    )
