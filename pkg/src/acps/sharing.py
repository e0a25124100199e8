"""Learning how much appearance each action class borrows from the others.

For every action the learner maximizes, over simplex weights, the smoothed
unary response at the true joint locations of that action's validation
images, minus a soft maximum over mined hard-negative locations, minus a
quadratic regularizer that pulls toward uniform sharing. The objective is
concave (linear positives, -logsumexp negatives, -l2), so projected gradient
ascent from the uniform start finds the global optimum.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core

SHARING_MAGIC = "ACSH1"


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    rho = np.nonzero(u + (1.0 - css) / np.arange(1, v.size + 1) > 0)[0][-1]
    theta = (1.0 - css[rho]) / (rho + 1.0)
    out = np.maximum(v + theta, 0.0)
    return out / out.sum()


def mine_negatives(
    smoothed: np.ndarray,
    gt: np.ndarray,
    count: int = 10,
    exclusion_radius: float = 5.0,
    nms_radius: float = 5.0,
):
    """Strongest modes of a smoothed response map away from the ground truth.

    A mode is a pixel strictly greater than all its 8 neighbors (plateaus
    yield none). Modes inside the exclusion disc around ``gt`` are dropped,
    the rest are taken greedily by value with non-maximum suppression.
    Returns an (m, 2) array of (x, y) locations, m <= count.
    """
    m = np.asarray(smoothed, dtype=np.float64)
    h, w = m.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = m
    center = padded[1:-1, 1:-1]
    is_mode = np.ones((h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            is_mode &= center > padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
    ys, xs = np.nonzero(is_mode)
    if len(ys) == 0:
        return np.empty((0, 2), dtype=np.float64)
    vals = m[ys, xs]
    # Deterministic order: by value descending, then (y, x) ascending.
    order = np.lexsort((xs, ys, -vals))
    ys, xs = ys[order], xs[order]
    keep: list[tuple[int, int]] = []
    for y, x in zip(ys, xs):
        if (x - gt[0]) ** 2 + (y - gt[1]) ** 2 <= exclusion_radius**2:
            continue
        if any((x - kx) ** 2 + (y - ky) ** 2 <= nms_radius**2 for kx, ky in keep):
            continue
        keep.append((x, y))
        if len(keep) == count:
            break
    return np.array(keep, dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class SharingProblem:
    """Smoothed responses for one action's validation images.

    ``positives`` has one (n_actions,) response vector per (image, joint):
    the smoothed per-action unary values at the true joint location.
    ``negatives`` has, for the same (image, joint), an (m, n_actions) matrix
    of responses at the mined negative locations (m may be zero).
    """

    action: str
    action_names: tuple[str, ...]
    positives: tuple[np.ndarray, ...]
    negatives: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.positives) != len(self.negatives):
            raise ValueError("positives and negatives must align")
        a = len(self.action_names)
        for p, n in zip(self.positives, self.negatives):
            if p.shape != (a,) or (n.size and n.shape[1] != a):
                raise ValueError("response vectors must cover every action")


@dataclass(frozen=True)
class SharingWeights:
    """One simplex weight vector per action."""

    action_names: tuple[str, ...]
    gamma: np.ndarray  # (n_actions, n_actions), row a = weights for class a

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        object.__setattr__(self, "gamma", g)
        n = len(self.action_names)
        if g.shape != (n, n):
            raise ValueError("gamma must be square over the action set")
        if np.any(g < 0) or np.any(np.abs(g.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each gamma row must lie on the simplex")

    def for_action(self, a: int) -> np.ndarray:
        return self.gamma[a]

    @staticmethod
    def uniform(action_names) -> "SharingWeights":
        n = len(action_names)
        return SharingWeights(tuple(action_names), np.full((n, n), 1.0 / n))


def _soft_max(q: np.ndarray, tau: float) -> float:
    """Log-sum-exp soft maximum with temperature tau."""
    m = q.max()
    return float(m + tau * np.log(np.exp((q - m) / tau).sum()))


def objective(
    gamma: np.ndarray, problem: SharingProblem, lam: float, tau: float = 1.0
) -> float:
    """Sharing objective: positive responses minus soft-max negatives minus
    lam * ||gamma||^2. Terms with no negatives contribute only positives."""
    gamma = np.asarray(gamma, dtype=np.float64)
    total = 0.0
    for pos, neg in zip(problem.positives, problem.negatives):
        total += float(gamma @ pos)
        if neg.size:
            total -= _soft_max(neg @ gamma, tau)
    return total - lam * float(gamma @ gamma)


def _gradient(gamma, problem, lam, tau):
    g = np.zeros_like(gamma)
    for pos, neg in zip(problem.positives, problem.negatives):
        g += pos
        if neg.size:
            q = neg @ gamma
            q = (q - q.max()) / tau
            soft = np.exp(q)
            soft /= soft.sum()
            g -= soft @ neg
    return g - 2.0 * lam * gamma


def learn_sharing_single(
    problem: SharingProblem,
    lam: float = 0.4,
    tau: float = 1.0,
    max_iter: int = 2000,
    rel_tol: float = 1e-7,
    step0: float = 0.1,
) -> np.ndarray:
    """Projected gradient ascent from the uniform start for one action.

    Backtracking line search (halving from ``step0``) keeps the objective
    sequence nondecreasing; stops on relative objective change below
    ``rel_tol``. The result is re-projected, so the simplex constraints hold
    exactly.
    """
    n = len(problem.action_names)
    gamma = np.full(n, 1.0 / n)
    f = objective(gamma, problem, lam, tau)
    for _ in range(max_iter):
        grad = _gradient(gamma, problem, lam, tau)
        step = step0
        improved = False
        while step > 1e-14:
            cand = project_simplex(gamma + step * grad)
            fc = objective(cand, problem, lam, tau)
            if fc > f:
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        rel = abs(fc - f) / max(1.0, abs(f))
        gamma, f = cand, fc
        if rel < rel_tol:
            break
    return project_simplex(gamma)


def learn_sharing(
    problems: dict[str, SharingProblem],
    lam: float = 0.4,
    tau: float = 1.0,
    seed: int = 0,
) -> SharingWeights:
    """Learn one weight vector per action.

    ``problems`` maps every action name to its validation-image problem;
    actions without validation data are an error. The optimizer itself is
    deterministic; ``seed`` is accepted for interface symmetry with the other
    trainers.
    """
    del seed
    if not problems:
        raise ValueError("no sharing problems given")
    action_names = next(iter(problems.values())).action_names
    missing = [a for a in action_names if a not in problems
               or not problems[a].positives]
    if missing:
        raise ValueError(
            "no validation data for actions: " + ", ".join(missing)
        )
    gamma = np.zeros((len(action_names), len(action_names)))
    for a, name in enumerate(action_names):
        gamma[a] = learn_sharing_single(problems[name], lam, tau)
    return SharingWeights(action_names, gamma)


def save_sharing(weights: SharingWeights, path) -> None:
    lines = [SHARING_MAGIC, "actions " + " ".join(weights.action_names)]
    for name, row in zip(weights.action_names, weights.gamma):
        lines.append(
            f"gamma {name} " + " ".join(format(v, ".17g") for v in row)
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_sharing(path) -> SharingWeights:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != SHARING_MAGIC:
        raise core.BadMagicError(f"{path}: bad magic, not a sharing file")
    try:
        action_names = tuple(lines[1].split()[1:])
        gamma = np.zeros((len(action_names), len(action_names)))
        for line in lines[2:]:
            parts = line.split()
            if parts[0] != "gamma":
                raise core.FormatError(f"{path}: unexpected line {line!r}")
            a = action_names.index(parts[1])
            gamma[a] = [float(v) for v in parts[2:]]
    except (IndexError, ValueError) as exc:
        if isinstance(exc, core.FormatError):
            raise
        raise core.TruncatedError(f"{path}: malformed sharing file") from exc
    return SharingWeights(action_names, gamma)
