"""Per-joint conditional regression forests.

Trees are trained on image patches around (and away from) a single joint.
Split nodes compare one feature value inside the patch window against a
threshold; leaves store, for every action class, the foreground probability
and a weighted list of offset votes pointing at the joint center.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import core
from .kmeans import weighted_kmeans

FOREST_MAGIC = b"ACPF1\x00"
FOREST_VERSION = 1

MODE_CLASSIFICATION = 0
MODE_REGRESSION = 1


class ForestFormatError(core.FormatError):
    pass


class ForestVersionError(ForestFormatError):
    pass


class ForestCorruptError(ForestFormatError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for patch sampling and tree growing.

    Production-scale defaults; desk-scale runs shrink them via flags.
    """

    n_trees: int = 20
    max_depth: int = 20
    min_leaf: int = 20
    n_candidates: int = 40000
    n_pos: int = 50000
    n_neg: int = 50000
    n_images: int = 5000
    window_radius: int = 12
    pos_radius: float = 5.0
    neg_margin: float = 10.0
    neg_near_other_joints: float = 0.0  # fraction of negatives at confusers
    max_votes: int = 50
    goodness: str = "random"  # classification | regression | random per node
    threshold_subsample: int = 256


@dataclass(frozen=True)
class SplitTest:
    channel: int
    dx: int
    dy: int
    threshold: float


@dataclass(frozen=True)
class PatchSample:
    """One training patch: feature window, label, offset to the joint, action."""

    window: np.ndarray  # (channels, 2r+1, 2r+1)
    is_foreground: bool
    offset: np.ndarray  # (dx, dy), zeros for background
    action: int


class PatchSet:
    """Structure-of-arrays container for training patches of one joint."""

    def __init__(self, windows, is_foreground, offsets, actions, joint, action_names):
        self.windows = np.asarray(windows, dtype=np.float32)
        self.is_foreground = np.asarray(is_foreground, dtype=bool)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.actions = np.asarray(actions, dtype=np.intp)
        self.joint = joint
        self.action_names = tuple(action_names)
        if not (
            len(self.windows)
            == len(self.is_foreground)
            == len(self.offsets)
            == len(self.actions)
        ):
            raise ValueError("patch arrays must have equal length")

    def __len__(self) -> int:
        return len(self.windows)

    def __getitem__(self, i: int) -> PatchSample:
        return PatchSample(
            self.windows[i],
            bool(self.is_foreground[i]),
            self.offsets[i],
            int(self.actions[i]),
        )

    @property
    def window_radius(self) -> int:
        return (self.windows.shape[2] - 1) // 2

    @property
    def n_actions(self) -> int:
        return len(self.action_names)


def extract_windows(stack: core.FeatureStack, centers: np.ndarray, radius: int):
    """Gather (channels, 2r+1, 2r+1) windows at integer (x, y) centers.

    Coordinates outside the stack are clamped to the border, matching the
    routing rule used at prediction time.
    """
    centers = np.asarray(centers, dtype=np.intp)
    span = np.arange(-radius, radius + 1)
    ys = np.clip(centers[:, 1][:, None] + span[None, :], 0, stack.height - 1)
    xs = np.clip(centers[:, 0][:, None] + span[None, :], 0, stack.width - 1)
    wins = stack.data[:, ys[:, :, None], xs[:, None, :]]
    return np.ascontiguousarray(np.moveaxis(wins, 0, 1))


def sample_patches(images, joint_index, config: TrainConfig, seed: int) -> PatchSet:
    """Draw positive and negative patches for one joint.

    ``images`` is a sequence of (stack, pose, action_index) at the reference
    scale, with an accompanying action-name tuple attached by the caller via
    ``action_names``. Positives are centered within ``pos_radius`` of the
    ground-truth joint; negatives anywhere farther than ``neg_margin`` from
    it. Deterministic under the seed.
    """
    action_names = getattr(images, "action_names", None)
    images = list(images)
    if not images:
        raise ValueError("no images to sample from")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    if config.n_images < len(images):
        chosen = rng.choice(len(images), size=config.n_images, replace=False)
        images = [images[i] for i in sorted(chosen)]
    capacity = sum(s.height * s.width for s, _, _ in images)
    if config.n_pos + config.n_neg > capacity:
        raise ValueError(
            f"requested {config.n_pos + config.n_neg} patches but the selected "
            f"images only contain {capacity} pixels"
        )

    n = config.n_pos + config.n_neg
    centers = np.empty((n, 2), dtype=np.intp)
    offsets = np.zeros((n, 2), dtype=np.float64)
    actions = np.empty(n, dtype=np.intp)
    image_ids = np.empty(n, dtype=np.intp)
    is_fg = np.zeros(n, dtype=bool)

    for i in range(config.n_pos):
        img = int(rng.integers(len(images)))
        stack, pose, action = images[img]
        gt = pose.locations[joint_index]
        while True:  # uniform draw in the disc around the joint
            d = rng.uniform(-config.pos_radius, config.pos_radius, size=2)
            if d @ d <= config.pos_radius**2:
                break
        cx = int(np.clip(np.floor(gt[0] + d[0] + 0.5), 0, stack.width - 1))
        cy = int(np.clip(np.floor(gt[1] + d[1] + 0.5), 0, stack.height - 1))
        centers[i] = (cx, cy)
        offsets[i] = gt - (cx, cy)
        actions[i] = action
        image_ids[i] = img
        is_fg[i] = True

    n_joints = images[0][1].locations.shape[0]
    for i in range(config.n_pos, n):
        img = int(rng.integers(len(images)))
        stack, pose, action = images[img]
        gt = pose.locations[joint_index]
        near_confuser = (
            rng.random() < config.neg_near_other_joints and n_joints > 1
        )
        for _ in range(10000):
            if near_confuser:
                other = int(rng.integers(n_joints - 1))
                other = other if other < joint_index else other + 1
                anchor = pose.locations[other]
                d = rng.uniform(-config.pos_radius, config.pos_radius, size=2)
                cx = int(np.clip(np.floor(anchor[0] + d[0] + 0.5), 0,
                                 stack.width - 1))
                cy = int(np.clip(np.floor(anchor[1] + d[1] + 0.5), 0,
                                 stack.height - 1))
            else:
                cx = int(rng.integers(stack.width))
                cy = int(rng.integers(stack.height))
            if (cx - gt[0]) ** 2 + (cy - gt[1]) ** 2 > config.neg_margin**2:
                break
            near_confuser = False  # confuser overlapped the joint; go random
        else:
            raise ValueError(
                f"could not place a negative patch farther than "
                f"{config.neg_margin} px from the joint"
            )
        centers[i] = (cx, cy)
        actions[i] = action
        image_ids[i] = img

    windows = np.empty(
        (n, images[0][0].channels, 2 * config.window_radius + 1,
         2 * config.window_radius + 1),
        dtype=np.float32,
    )
    for img, (stack, _, _) in enumerate(images):
        mask = image_ids == img
        if np.any(mask):
            windows[mask] = extract_windows(stack, centers[mask], config.window_radius)
    if action_names is None:
        action_names = tuple(
            f"action_{a}" for a in range(int(actions.max(initial=0)) + 1)
        )
    return PatchSet(windows, is_fg, offsets, actions, joint_index, action_names)


@dataclass(frozen=True)
class LeafModel:
    """Per-action leaf statistics.

    ``probs[a]`` is p(foreground | action a, leaf); ``votes[a]`` is an
    (offsets (M, 2), weights (M,)) pair whose weights sum to ``probs[a]``,
    the remaining mass being background. ``counts[a]`` is the number of
    training samples of action a that reached the leaf.
    """

    probs: np.ndarray
    votes: tuple[tuple[np.ndarray, np.ndarray], ...]
    counts: np.ndarray

    def pooled(self):
        """Marginalize over actions with uniform weights.

        Returns (prob, offsets, weights): the statistics the unconditional
        single-table model uses. By construction the uniform mixture of the
        per-action tables, so the decomposed and pooled unary paths agree.
        """
        n_actions = self.probs.size
        prob = float(self.probs.mean())
        offs = [o for o, _ in self.votes if len(o)]
        wts = [w / n_actions for _, w in self.votes if len(w)]
        if offs:
            return prob, np.concatenate(offs), np.concatenate(wts)
        return prob, np.empty((0, 2)), np.empty(0)


class Tree:
    """One regression tree, stored as flat node arrays for fast routing."""

    def __init__(self, left, right, channel, dx, dy, threshold, mode, leaf_id, leaves):
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.channel = np.asarray(channel, dtype=np.int32)
        self.dx = np.asarray(dx, dtype=np.int32)
        self.dy = np.asarray(dy, dtype=np.int32)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.mode = np.asarray(mode, dtype=np.uint8)
        leaf_id = np.asarray(leaf_id, dtype=np.int32)
        # Canonicalize leaf numbering to node order so that serialization
        # round-trips and vote accumulation order are bit-reproducible.
        self.leaf_id = np.full_like(leaf_id, -1)
        self.leaves = []
        for i in np.flatnonzero(leaf_id >= 0):
            self.leaf_id[i] = len(self.leaves)
            self.leaves.append(leaves[leaf_id[i]])

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def depth(self) -> int:
        def walk(node, d):
            if self.leaf_id[node] >= 0:
                return d
            return max(walk(self.left[node], d + 1), walk(self.right[node], d + 1))

        return walk(0, 0)

    def route(self, stack: core.FeatureStack, center) -> int:
        """Route one patch center to its leaf index (deterministic).

        Ties at the threshold go right: left iff value < threshold.
        """
        cx, cy = int(center[0]), int(center[1])
        node = 0
        while self.leaf_id[node] < 0:
            y = min(max(cy + int(self.dy[node]), 0), stack.height - 1)
            x = min(max(cx + int(self.dx[node]), 0), stack.width - 1)
            value = float(stack.data[self.channel[node], y, x])
            node = int(self.left[node]) if value < self.threshold[node] else int(
                self.right[node]
            )
        return int(self.leaf_id[node])

    def route_all(self, stack: core.FeatureStack) -> np.ndarray:
        """Leaf index for every pixel, shape (height, width)."""
        h, w = stack.height, stack.width
        px = np.tile(np.arange(w, dtype=np.intp), h)
        py = np.repeat(np.arange(h, dtype=np.intp), w)
        node = np.zeros(h * w, dtype=np.intp)
        active = self.leaf_id[node] < 0
        while np.any(active):
            idx = np.flatnonzero(active)
            cur = node[idx]
            ys = np.clip(py[idx] + self.dy[cur], 0, h - 1)
            xs = np.clip(px[idx] + self.dx[cur], 0, w - 1)
            vals = stack.data[self.channel[cur], ys, xs]
            node[idx] = np.where(vals < self.threshold[cur], self.left[cur],
                                 self.right[cur])
            active[idx] = self.leaf_id[node[idx]] < 0
        return self.leaf_id[node].reshape(h, w)


def predict_leaf(tree: Tree, stack: core.FeatureStack, center) -> LeafModel:
    return tree.leaves[tree.route(stack, center)]


def _binary_entropy(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    mask = (p > 0) & (p < 1)
    pm = p[mask]
    out[mask] = -(pm * np.log2(pm) + (1 - pm) * np.log2(1 - pm))
    return out


def _classification_gain(values, thresholds, labels):
    """Information gain (bits) of each candidate over the fg/bg labels.

    ``values`` is (n_samples, n_candidates); candidates leaving a side empty
    score -inf.
    """
    n = values.shape[0]
    left = values < thresholds[None, :]
    n_l = left.sum(axis=0)
    fg_l = (left & labels[:, None]).sum(axis=0)
    n_fg = int(labels.sum())
    n_r = n - n_l
    fg_r = n_fg - fg_l
    gain = np.full(values.shape[1], -np.inf)
    ok = (n_l > 0) & (n_r > 0)
    if not np.any(ok):
        return gain
    h_parent = _binary_entropy(np.array([n_fg / n]))[0]
    p_l = fg_l[ok] / n_l[ok]
    p_r = fg_r[ok] / n_r[ok]
    child = (n_l[ok] * _binary_entropy(p_l) + n_r[ok] * _binary_entropy(p_r)) / n
    gain[ok] = h_parent - child
    return gain


def _regression_gain(values, thresholds, labels, offsets):
    """Reduction of the offset-covariance trace over foreground samples."""
    n = values.shape[0]
    left = values < thresholds[None, :]
    n_l = left.sum(axis=0)
    gain = np.full(values.shape[1], -np.inf)
    ok = (n_l > 0) & (n_l < n)
    if not np.any(ok):
        return gain
    fg = labels
    n_fg = int(fg.sum())
    if n_fg == 0:
        gain[ok] = 0.0
        return gain
    o = offsets[fg]
    o2 = np.einsum("nd,nd->n", o, o)
    fg_left = left[fg]
    nfl = fg_left.sum(axis=0).astype(np.float64)
    s_l = fg_left.T @ o  # (cand, 2)
    q_l = fg_left.T @ o2  # (cand,)
    s_p = o.sum(axis=0)
    q_p = o2.sum()
    nfr = n_fg - nfl
    s_r = s_p[None, :] - s_l
    q_r = q_p - q_l

    def side_sse(nf, s, q):
        # Sum of squared deviations = q - |s|^2 / nf; zero for empty sides.
        out = np.zeros_like(q)
        m = nf > 0
        out[m] = q[m] - np.einsum("cd,cd->c", s[m], s[m]) / nf[m]
        return out

    trace_parent = (q_p - s_p @ s_p / n_fg) / n_fg
    child = (side_sse(nfl, s_l, q_l) + side_sse(nfr, s_r, q_r)) / n_fg
    gain[ok] = trace_parent - child[ok]
    return gain


def split_goodness(split: SplitTest, samples: PatchSet, mode: str) -> float:
    """Score one candidate split on a patch set.

    ``mode`` is "classification" (information gain over labels) or
    "regression" (foreground offset variance reduction); higher is better;
    -inf when a side is empty.
    """
    r = samples.window_radius
    values = samples.windows[:, split.channel, r + split.dy, r + split.dx]
    values = values.astype(np.float64)[:, None]
    thr = np.array([split.threshold])
    if mode == "classification":
        return float(_classification_gain(values, thr, samples.is_foreground)[0])
    if mode == "regression":
        return float(
            _regression_gain(values, thr, samples.is_foreground, samples.offsets)[0]
        )
    raise ValueError(f"unknown goodness mode {mode!r}")


def _generate_candidates(samples: PatchSet, idx, config: TrainConfig, rng):
    """Random split candidates: uniform channel and in-window offset,
    threshold drawn from the empirical value range at that probe."""
    n_cand = config.n_candidates
    n_ch = samples.windows.shape[1]
    width = samples.windows.shape[2]
    channels = rng.integers(0, n_ch, size=n_cand)
    dys = rng.integers(0, width, size=n_cand)
    dxs = rng.integers(0, width, size=n_cand)
    sub = idx
    if len(idx) > config.threshold_subsample:
        sub = rng.choice(idx, size=config.threshold_subsample, replace=False)
    probe = samples.windows[sub][:, channels, dys, dxs]
    lo = probe.min(axis=0)
    hi = probe.max(axis=0)
    thresholds = rng.uniform(lo, hi)
    return channels, dys, dxs, thresholds


def _build_leaf(samples: PatchSet, idx, config: TrainConfig, rng) -> LeafModel:
    n_actions = samples.n_actions
    probs = np.zeros(n_actions)
    counts = np.zeros(n_actions, dtype=np.int64)
    votes = []
    for a in range(n_actions):
        in_leaf = idx[samples.actions[idx] == a]
        counts[a] = len(in_leaf)
        fg = in_leaf[samples.is_foreground[in_leaf]]
        if len(in_leaf) == 0 or len(fg) == 0:
            votes.append((np.empty((0, 2)), np.empty(0)))
            continue
        probs[a] = len(fg) / len(in_leaf)
        offs = samples.offsets[fg]
        wts = np.full(len(fg), probs[a] / len(fg))
        if len(fg) > config.max_votes:
            uniq, inverse = np.unique(offs, axis=0, return_inverse=True)
            if len(uniq) <= config.max_votes:
                merged = np.zeros(len(uniq))
                np.add.at(merged, inverse, wts)
                offs, wts = uniq, merged
            else:
                centers, labels, _ = weighted_kmeans(
                    offs, config.max_votes, wts, restarts=1, max_iter=30,
                    seed=int(rng.integers(2**63)),
                )
                merged = np.zeros(config.max_votes)
                np.add.at(merged, labels, wts)
                keep = merged > 0
                offs, wts = centers[keep], merged[keep]
        votes.append((offs, wts))
    return LeafModel(probs, tuple(votes), counts)


def train_tree(samples: PatchSet, config: TrainConfig, seed: int) -> Tree:
    """Grow one tree.

    Each split node keeps the candidate maximizing the goodness measure for
    the node's randomly drawn mode (or the configured fixed mode). Growth
    stops at the depth limit, when fewer than 2 * min_leaf samples remain,
    or when the node is label-pure; candidates that would leave a child
    below min_leaf are rejected.
    """
    if len(samples) == 0:
        raise ValueError("cannot train a tree on an empty sample set")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    r = samples.window_radius

    left, right = [], []
    channel, dx, dy, threshold, mode, leaf_id = [], [], [], [], [], []
    leaves: list[LeafModel] = []

    def add_node():
        for arr, val in (
            (left, -1), (right, -1), (channel, 0), (dx, 0), (dy, 0),
            (threshold, 0.0), (mode, 0), (leaf_id, -1),
        ):
            arr.append(val)
        return len(left) - 1

    def make_leaf(node, idx):
        leaf_id[node] = len(leaves)
        leaves.append(_build_leaf(samples, idx, config, rng))

    def grow(node, idx, depth):
        labels = samples.is_foreground[idx]
        pure = labels.all() or not labels.any()
        if depth >= config.max_depth or len(idx) < 2 * config.min_leaf or pure:
            make_leaf(node, idx)
            return
        if config.goodness == "random":
            node_mode = (
                MODE_CLASSIFICATION if rng.integers(2) == 0 else MODE_REGRESSION
            )
        else:
            node_mode = (
                MODE_CLASSIFICATION
                if config.goodness == "classification"
                else MODE_REGRESSION
            )
        channels, dys, dxs, thresholds = _generate_candidates(
            samples, idx, config, rng
        )
        best_score = -np.inf
        best = -1
        chunk = 1024
        wins = samples.windows[idx]
        for start in range(0, len(channels), chunk):
            sl = slice(start, start + chunk)
            values = wins[:, channels[sl], dys[sl], dxs[sl]].astype(np.float64)
            thr = thresholds[sl]
            if node_mode == MODE_CLASSIFICATION:
                scores = _classification_gain(values, thr, labels)
            else:
                scores = _regression_gain(values, thr, labels,
                                          samples.offsets[idx])
            n_l = (values < thr[None, :]).sum(axis=0)
            bad = (n_l < config.min_leaf) | (len(idx) - n_l < config.min_leaf)
            scores[bad] = -np.inf
            k = int(np.argmax(scores))
            if scores[k] > best_score:
                best_score = float(scores[k])
                best = start + k
        if not np.isfinite(best_score):
            make_leaf(node, idx)
            return
        channel[node] = int(channels[best])
        dy[node] = int(dys[best]) - r
        dx[node] = int(dxs[best]) - r
        threshold[node] = float(thresholds[best])
        mode[node] = node_mode
        values = wins[:, channels[best], dys[best], dxs[best]].astype(np.float64)
        go_left = values < thresholds[best]
        left[node] = add_node()
        right[node] = add_node()
        grow(left[node], idx[go_left], depth + 1)
        grow(right[node], idx[~go_left], depth + 1)

    root = add_node()
    grow(root, np.arange(len(samples), dtype=np.intp), 0)
    return Tree(left, right, channel, dx, dy, threshold, mode, leaf_id, leaves)


@dataclass(frozen=True)
class ConditionalForest:
    """All trees for one joint, plus the metadata needed to reuse them."""

    joint: str
    trees: tuple[Tree, ...]
    tree_half: tuple[int, ...]  # 0 = trained on the train split, 1 = validation
    action_names: tuple[str, ...]
    max_depth: int
    min_leaf: int
    window_radius: int
    seed: int

    @property
    def n_actions(self) -> int:
        return len(self.action_names)

    def half(self, which: int) -> "ConditionalForest":
        """Sub-forest containing only the trees of one training half."""
        kept = [t for t, h in zip(self.trees, self.tree_half) if h == which]
        if not kept:
            raise ValueError(f"forest has no trees in half {which}")
        return ConditionalForest(
            self.joint, tuple(kept), tuple(which for _ in kept),
            self.action_names, self.max_depth, self.min_leaf,
            self.window_radius, self.seed,
        )


def train_forest(
    train_images,
    val_images,
    joint_index: int,
    joint_name: str,
    action_names,
    config: TrainConfig,
    seed: int,
) -> ConditionalForest:
    """Train a forest for one joint, half the trees per image split.

    Tree t draws its patches and its growth randomness from child t of
    ``SeedSequence(seed)``, so any subset of trees is reproducible.
    """
    halves = []
    for t in range(config.n_trees):
        halves.append(0 if t < (config.n_trees + 1) // 2 else 1)
    if not val_images:
        halves = [0] * config.n_trees
    trees = []
    children = np.random.SeedSequence(seed).spawn(config.n_trees)
    for t in range(config.n_trees):
        images = train_images if halves[t] == 0 else val_images
        tagged = _TaggedImages(images, action_names)
        patch_seed, grow_seed = children[t].spawn(2)
        patches = sample_patches(
            tagged, joint_index, config, _seed_int(patch_seed)
        )
        trees.append(train_tree(patches, config, _seed_int(grow_seed)))
    return ConditionalForest(
        joint_name, tuple(trees), tuple(halves), tuple(action_names),
        config.max_depth, config.min_leaf, config.window_radius, seed,
    )


class _TaggedImages(list):
    """List of (stack, pose, action) carrying the action-name tuple."""

    def __init__(self, images, action_names):
        super().__init__(images)
        self.action_names = tuple(action_names)


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Serialization (versioned little-endian binary)

def _w_str(parts, s: str):
    raw = s.encode("utf-8")
    parts.append(struct.pack("<H", len(raw)))
    parts.append(raw)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise ForestCorruptError("forest file is truncated")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def take_str(self) -> str:
        (n,) = self.take("<H")
        if self.pos + n > len(self.buf):
            raise ForestCorruptError("forest file is truncated")
        s = self.buf[self.pos : self.pos + n].decode("utf-8")
        self.pos += n
        return s


def save_forest(forest: ConditionalForest, path) -> None:
    parts = [FOREST_MAGIC, struct.pack("<I", FOREST_VERSION)]
    _w_str(parts, forest.joint)
    parts.append(struct.pack("<I", forest.n_actions))
    for name in forest.action_names:
        _w_str(parts, name)
    parts.append(
        struct.pack(
            "<IIIq",
            forest.window_radius,
            forest.max_depth,
            forest.min_leaf,
            forest.seed,
        )
    )
    parts.append(struct.pack("<I", len(forest.trees)))
    for tree, half in zip(forest.trees, forest.tree_half):
        parts.append(struct.pack("<BI", half, tree.n_nodes))
        for i in range(tree.n_nodes):
            if tree.leaf_id[i] >= 0:
                parts.append(struct.pack("<B", 1))
                leaf = tree.leaves[tree.leaf_id[i]]
                for a in range(forest.n_actions):
                    offs, wts = leaf.votes[a]
                    parts.append(
                        struct.pack(
                            "<dQI", leaf.probs[a], int(leaf.counts[a]), len(offs)
                        )
                    )
                    parts.append(
                        np.ascontiguousarray(offs, dtype="<f8").tobytes()
                    )
                    parts.append(np.ascontiguousarray(wts, dtype="<f8").tobytes())
            else:
                parts.append(
                    struct.pack(
                        "<BIiidBII",
                        0,
                        int(tree.channel[i]),
                        int(tree.dx[i]),
                        int(tree.dy[i]),
                        float(tree.threshold[i]),
                        int(tree.mode[i]),
                        int(tree.left[i]),
                        int(tree.right[i]),
                    )
                )
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_forest(path) -> ConditionalForest:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[: len(FOREST_MAGIC)] != FOREST_MAGIC:
        raise ForestFormatError(f"{path}: bad magic, not a forest file")
    rd = _Reader(buf)
    rd.pos = len(FOREST_MAGIC)
    (version,) = rd.take("<I")
    if version != FOREST_VERSION:
        raise ForestVersionError(
            f"{path}: unsupported forest version {version}, expected "
            f"{FOREST_VERSION}"
        )
    joint = rd.take_str()
    (n_actions,) = rd.take("<I")
    action_names = tuple(rd.take_str() for _ in range(n_actions))
    window_radius, max_depth, min_leaf, seed = rd.take("<IIIq")
    (n_trees,) = rd.take("<I")
    trees, halves = [], []
    for _ in range(n_trees):
        half, n_nodes = rd.take("<BI")
        halves.append(int(half))
        left = np.full(n_nodes, -1, np.int32)
        right = np.full(n_nodes, -1, np.int32)
        channel = np.zeros(n_nodes, np.int32)
        dx = np.zeros(n_nodes, np.int32)
        dy = np.zeros(n_nodes, np.int32)
        threshold = np.zeros(n_nodes, np.float64)
        mode = np.zeros(n_nodes, np.uint8)
        leaf_id = np.full(n_nodes, -1, np.int32)
        leaves = []
        for i in range(n_nodes):
            (is_leaf,) = rd.take("<B")
            if is_leaf:
                probs = np.zeros(n_actions)
                counts = np.zeros(n_actions, dtype=np.int64)
                votes = []
                for a in range(n_actions):
                    probs[a], counts[a], n_votes = rd.take("<dQI")
                    nbytes = n_votes * 16
                    if rd.pos + nbytes + n_votes * 8 > len(buf):
                        raise ForestCorruptError(f"{path}: truncated leaf data")
                    offs = np.frombuffer(
                        buf, dtype="<f8", count=n_votes * 2, offset=rd.pos
                    ).reshape(n_votes, 2)
                    rd.pos += nbytes
                    wts = np.frombuffer(
                        buf, dtype="<f8", count=n_votes, offset=rd.pos
                    )
                    rd.pos += n_votes * 8
                    votes.append((offs.copy(), wts.copy()))
                leaf_id[i] = len(leaves)
                leaves.append(LeafModel(probs, tuple(votes), counts))
            else:
                (channel[i], dx[i], dy[i], threshold[i], mode[i],
                 left[i], right[i]) = rd.take("<IiidBII")
        trees.append(
            Tree(left, right, channel, dx, dy, threshold, mode, leaf_id, leaves)
        )
    if rd.pos != len(buf):
        raise ForestCorruptError(f"{path}: {len(buf) - rd.pos} trailing bytes")
    return ConditionalForest(
        joint, tuple(trees), tuple(halves), action_names,
        max_depth, min_leaf, window_radius, seed,
    )
