"""Domain types shared by every stage: kinematic tree, poses, action priors,
dense feature stacks, scale pyramids, and the on-disk formats for stacks and
video annotations.

Conventions used throughout the package:

* point coordinates are (x, y) pairs in image pixels, x rightward, y downward;
* dense arrays are indexed ``[channel, y, x]``;
* offsets between points are (dx, dy) = point_a - point_b.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Fixed 13-joint body model. Order matters: annotation files, pose arrays and
# forest model files all use this order.
JOINT_NAMES = (
    "head",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
    "l_hip",
    "r_hip",
    "l_knee",
    "r_knee",
    "l_ankle",
    "r_ankle",
)

# Default kinematic edges as (child, parent), rooted at the head. The MAP is
# invariant to the root choice (see inference tests), so the root is purely a
# bookkeeping convention.
DEFAULT_EDGES = (
    ("l_shoulder", "head"),
    ("r_shoulder", "head"),
    ("l_elbow", "l_shoulder"),
    ("r_elbow", "r_shoulder"),
    ("l_wrist", "l_elbow"),
    ("r_wrist", "r_elbow"),
    ("l_hip", "l_shoulder"),
    ("r_hip", "r_shoulder"),
    ("l_knee", "l_hip"),
    ("r_knee", "r_hip"),
    ("l_ankle", "l_knee"),
    ("r_ankle", "r_knee"),
)

FSTK_MAGIC = b"FSTK1\x00"
ANNOTATION_MAGIC = "ACPA1"


class FormatError(ValueError):
    """A file does not conform to one of the package's on-disk formats."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class NonFiniteValueError(FormatError):
    pass


@dataclass(frozen=True)
class KinematicTree:
    """Rooted tree over named joints; edges are (child, parent) pairs."""

    joints: tuple[str, ...] = JOINT_NAMES
    edges: tuple[tuple[str, str], ...] = DEFAULT_EDGES
    root: str = "head"

    def __post_init__(self):
        problems = validate_tree(self)
        if problems:
            raise ValueError("invalid kinematic tree: " + "; ".join(problems))

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def joint_index(self, name: str) -> int:
        return self.joints.index(name)

    def parent_of(self) -> dict[str, str]:
        return {c: p for c, p in self.edges}

    def children_of(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {j: [] for j in self.joints}
        for c, p in self.edges:
            out[p].append(c)
        return out

    def topological_order(self) -> list[str]:
        """Joints ordered root first, every parent before its children."""
        children = self.children_of()
        order = [self.root]
        stack = [self.root]
        while stack:
            j = stack.pop()
            for c in children[j]:
                order.append(c)
                stack.append(c)
        return order

    def rerooted(self, new_root: str) -> "KinematicTree":
        """Same undirected tree, edges reoriented away from ``new_root``."""
        if new_root not in self.joints:
            raise ValueError(f"unknown joint {new_root!r}")
        adjacency: dict[str, list[str]] = {j: [] for j in self.joints}
        for c, p in self.edges:
            adjacency[c].append(p)
            adjacency[p].append(c)
        edges = []
        seen = {new_root}
        stack = [new_root]
        while stack:
            p = stack.pop()
            for c in adjacency[p]:
                if c not in seen:
                    seen.add(c)
                    edges.append((c, p))
                    stack.append(c)
        return KinematicTree(self.joints, tuple(edges), new_root)


def validate_tree(tree) -> list[str]:
    """Check the rooted-tree invariants; returns [] when the tree is valid.

    Violations are reported as human-readable strings: multi-parent joints,
    cycles, disconnected joints, bad edge counts, unknown joint names.
    """
    problems = []
    joints = list(tree.joints)
    joint_set = set(joints)
    if len(joint_set) != len(joints):
        problems.append("duplicate joint names")
    if tree.root not in joint_set:
        problems.append(f"root {tree.root!r} is not a joint")
        return problems
    for c, p in tree.edges:
        if c not in joint_set or p not in joint_set:
            problems.append(f"edge ({c}, {p}) references unknown joint")
    if problems:
        return problems
    if len(tree.edges) != len(joints) - 1:
        problems.append(
            f"expected {len(joints) - 1} edges for {len(joints)} joints, "
            f"got {len(tree.edges)}"
        )
    parent: dict[str, str] = {}
    for c, p in tree.edges:
        if c in parent:
            problems.append(f"joint {c!r} has multiple parents")
        else:
            parent[c] = p
    if tree.root in parent:
        problems.append(f"root {tree.root!r} has a parent")
    # Walk from each joint toward the root: a repeat within the walk is a
    # cycle, a dead end that is not the root means disconnection.
    reaches_root = {tree.root}
    for j in joints:
        trail = []
        node = j
        while True:
            if node in reaches_root:
                reaches_root.update(trail)
                break
            if node in trail:
                problems.append(f"cycle through joint {node!r}")
                break
            trail.append(node)
            if node not in parent:
                problems.append(f"joint {node!r} is not connected to the root")
                break
            node = parent[node]
    # Deduplicate while keeping order stable.
    out = []
    for p in problems:
        if p not in out:
            out.append(p)
    return out


@dataclass(frozen=True)
class Pose:
    """Per-frame joint locations, (J, 2) float array of (x, y) pixels."""

    locations: np.ndarray
    scale: float = 1.0
    frame_index: int = 0

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=np.float64)
        object.__setattr__(self, "locations", loc)
        if loc.ndim != 2 or loc.shape[1] != 2:
            raise ValueError(f"locations must be (J, 2), got {loc.shape}")
        if not np.all(np.isfinite(loc)):
            raise ValueError("pose locations must be finite")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def __getitem__(self, joint_index: int) -> np.ndarray:
        return self.locations[joint_index]


@dataclass(frozen=True)
class ActionPrior:
    """Distribution over action classes; hard mode is a one-hot vector."""

    probs: np.ndarray
    mode: str = "soft"

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", p)
        if self.mode not in ("uniform", "soft", "hard"):
            raise ValueError(f"unknown prior mode {self.mode!r}")
        if p.ndim != 1 or p.size == 0:
            raise ValueError("probs must be a non-empty vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValueError("probs must be finite and nonnegative")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise ValueError("probs must sum to 1 within 1e-9")
        if self.mode == "hard" and np.count_nonzero(p == 1.0) != 1:
            raise ValueError("hard prior must have exactly one entry equal to 1")

    @staticmethod
    def uniform(n_actions: int) -> "ActionPrior":
        return ActionPrior(np.full(n_actions, 1.0 / n_actions), mode="uniform")

    @staticmethod
    def one_hot(index: int, n_actions: int) -> "ActionPrior":
        p = np.zeros(n_actions)
        p[index] = 1.0
        return ActionPrior(p, mode="hard")

    def hardened(self) -> "ActionPrior":
        """One-hot at the argmax; ties resolve to the lowest action index."""
        return ActionPrior.one_hot(int(np.argmax(self.probs)), self.probs.size)


@dataclass(frozen=True)
class FeatureStack:
    """Dense multi-channel feature map, data shaped (channels, height, width)."""

    data: np.ndarray
    scale_factor: float = 1.0

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", d)
        if d.ndim != 3:
            raise ValueError(f"data must be (channels, height, width), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise NonFiniteValueError("feature stack contains non-finite values")
        if self.scale_factor <= 0:
            raise ValueError("scale_factor must be positive")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ScalePyramid:
    """Geometric pyramid of feature stacks; level i carries factor**i."""

    levels: tuple[FeatureStack, ...]
    factor: float

    @property
    def count(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class VideoAnnotation:
    """Ground truth for one video: per-frame poses, one action label,
    per-frame person size (the reference length for keypoint accuracy)."""

    frames: tuple[Pose, ...]
    action_label: str
    person_size: tuple[float, ...]

    def __post_init__(self):
        if len(self.person_size) != len(self.frames):
            raise ValueError("person_size must have one entry per frame")
        if any(s <= 0 for s in self.person_size):
            raise ValueError("person_size entries must be positive")


def save_feature_stack(stack: FeatureStack, path) -> None:
    """Write a stack in the FSTK binary format.

    Layout: magic ``FSTK1\\0``, then width, height, channels as u32
    little-endian, then float32 little-endian values in channel-major,
    row-major order.
    """
    payload = np.ascontiguousarray(stack.data, dtype="<f4").tobytes()
    header = FSTK_MAGIC + struct.pack(
        "<III", stack.width, stack.height, stack.channels
    )
    Path(path).write_bytes(header + payload)


def load_feature_stack(path, scale_factor: float = 1.0) -> FeatureStack:
    """Read an FSTK file; inverse of :func:`save_feature_stack`."""
    raw = Path(path).read_bytes()
    if len(raw) < len(FSTK_MAGIC) or raw[: len(FSTK_MAGIC)] != FSTK_MAGIC:
        raise BadMagicError(f"{path}: bad magic, not an FSTK file")
    body = raw[len(FSTK_MAGIC):]
    if len(body) < 12:
        raise TruncatedError(f"{path}: truncated header")
    width, height, channels = struct.unpack("<III", body[:12])
    expected = width * height * channels * 4
    payload = body[12:]
    if len(payload) < expected:
        raise TruncatedError(
            f"{path}: truncated payload, expected {expected} bytes, "
            f"got {len(payload)}"
        )
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes")
    data = np.frombuffer(payload, dtype="<f4").reshape(channels, height, width)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValueError(f"{path}: payload contains non-finite values")
    return FeatureStack(data.copy(), scale_factor=scale_factor)


def _resample_bilinear(channel: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel-centered coordinates.

    Uses the lerp form a + t*(b - a) so constant inputs are preserved
    bit-exactly.
    """
    in_h, in_w = channel.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    c = channel.astype(np.float64)
    top = c[np.ix_(y0, x0)]
    top = top + fx * (c[np.ix_(y0, x1)] - top)
    bot = c[np.ix_(y1, x0)]
    bot = bot + fx * (c[np.ix_(y1, x1)] - bot)
    return top + fy * (bot - top)


def build_pyramid(stack: FeatureStack, count: int, factor: float) -> ScalePyramid:
    """Build a geometric scale pyramid; level 0 is the input stack.

    Level i has dimensions round(dim * factor**i) and scale_factor factor**i.
    Raises when any level would fall below 8 px in either dimension.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not (0.0 < factor < 1.0):
        raise ValueError("factor must be in (0, 1)")
    levels = [stack]
    for i in range(1, count):
        s = factor**i
        out_h = int(np.floor(stack.height * s + 0.5))
        out_w = int(np.floor(stack.width * s + 0.5))
        if out_h < 8 or out_w < 8:
            raise ValueError(
                f"pyramid level {i} would be {out_w}x{out_h} px, below the 8 px minimum"
            )
        resampled = np.empty((stack.channels, out_h, out_w), dtype=np.float32)
        for ch in range(stack.channels):
            resampled[ch] = _resample_bilinear(stack.data[ch], out_h, out_w)
        levels.append(FeatureStack(resampled, scale_factor=s))
    return ScalePyramid(tuple(levels), factor)


def _fmt17(v) -> str:
    """Float to text at 17 significant digits; round-trips float64 exactly."""
    return format(float(v), ".17g")


def save_annotation(annotation: VideoAnnotation, path) -> None:
    """Write a video annotation in the ACPA1 text format."""
    lines = [ANNOTATION_MAGIC, f"action {annotation.action_label}"]
    lines.append(f"frames {len(annotation.frames)}")
    for pose, size in zip(annotation.frames, annotation.person_size):
        lines.append(f"frame {pose.frame_index}")
        lines.append(f"person_size {_fmt17(size)}")
        for name, (x, y) in zip(JOINT_NAMES, pose.locations):
            lines.append(f"{name} {_fmt17(x)} {_fmt17(y)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_annotation(path) -> VideoAnnotation:
    """Read an ACPA1 annotation file; inverse of :func:`save_annotation`."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != ANNOTATION_MAGIC:
        raise BadMagicError(f"{path}: bad magic, not an annotation file")
    try:
        action = _expect_field(lines, 1, "action", path)
        n_frames = int(_expect_field(lines, 2, "frames", path))
        poses = []
        sizes = []
        pos = 3
        for _ in range(n_frames):
            frame_index = int(_expect_field(lines, pos, "frame", path))
            size = float(_expect_field(lines, pos + 1, "person_size", path))
            locs = np.empty((len(JOINT_NAMES), 2))
            for j, name in enumerate(JOINT_NAMES):
                parts = lines[pos + 2 + j].split()
                if len(parts) != 3 or parts[0] != name:
                    raise FormatError(
                        f"{path}: expected joint {name!r} at line {pos + 3 + j}"
                    )
                locs[j] = [float(parts[1]), float(parts[2])]
            poses.append(Pose(locs, frame_index=frame_index))
            sizes.append(size)
            pos += 2 + len(JOINT_NAMES)
    except (IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise TruncatedError(f"{path}: truncated or malformed annotation") from exc
    return VideoAnnotation(tuple(poses), action, tuple(sizes))


def _expect_field(lines: list[str], index: int, name: str, path) -> str:
    if index >= len(lines):
        raise TruncatedError(f"{path}: missing field {name!r}")
    parts = lines[index].split(None, 1)
    if len(parts) != 2 or parts[0] != name:
        raise FormatError(f"{path}: expected field {name!r} at line {index + 1}")
    return parts[1]
