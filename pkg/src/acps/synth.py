"""Synthetic articulated stick-figure videos with controllable appearance.

Each action class has characteristic limb angles (pose prior) and an
appearance signature channel. Joints render as Gaussian blobs into a shared
channel plus the action's signature channel; distractor blobs imitate joints
of *other* actions, so class-conditioned appearance models can reject clutter
that fools the pooled model. Everything is deterministic under the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core

DATASET_MAGIC = "ACPD1"


@dataclass(frozen=True)
class ActionSpec:
    """Pose prior and appearance signature of one synthetic action."""

    name: str
    arm_angle: float  # radians; +pi/2 points down (y grows downward)
    leg_angle: float
    wobble: float = 0.25  # temporal angle oscillation amplitude
    signature_channel: int = 0  # index among the signature channels


@dataclass(frozen=True)
class SyntheticSpec:
    actions: tuple[ActionSpec, ...]
    videos_per_action: int = 4
    frames_per_video: int = 10
    width: int = 48
    height: int = 48
    noise: float = 0.02
    blob_sigma: float = 1.5
    n_distractors: int = 3
    angle_jitter: float = 0.06
    center_jitter: float = 1.0

    @property
    def n_channels(self) -> int:
        return 1 + max(a.signature_channel for a in self.actions) + 1

    @property
    def action_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.actions)


def default_action_specs(
    n_actions: int, distinct_appearance: bool = True,
    distinct_pose: bool = True,
) -> tuple[ActionSpec, ...]:
    """Evenly spread arm/leg angle priors; identical specs when not distinct."""
    specs = []
    for i in range(n_actions):
        if distinct_pose:
            arm = np.pi / 2 - i * (np.pi / max(n_actions - 1, 1)) * 0.9
            # outward-only leg splay: legs never cross, stance width varies
            leg = np.pi / 2 - (0.1 + 0.45 * i / max(n_actions - 1, 1))
        else:
            arm, leg = np.pi / 2, np.pi / 2
        specs.append(
            ActionSpec(
                name=f"act{i}",
                arm_angle=float(arm),
                leg_angle=float(leg),
                signature_channel=i if distinct_appearance else 0,
            )
        )
    return tuple(specs)


@dataclass(frozen=True)
class VideoSample:
    video_id: str
    stacks: tuple[core.FeatureStack, ...]
    annotation: core.VideoAnnotation


def _direction(angle: float) -> np.ndarray:
    return np.array([np.cos(angle), np.sin(angle)])


def sample_pose(
    action: ActionSpec, center, phase: float, t: int, frames: int, rng
) -> np.ndarray:
    """One stick-figure pose, (13, 2) in image coordinates."""
    c = np.asarray(center, dtype=np.float64)

    def jitter():
        return rng.normal(0.0, 0.35, size=2)

    locs = np.zeros((13, 2))
    locs[0] = c + (0.0, -11.0) + jitter()  # head
    locs[1] = c + (-5.0, -6.0) + jitter()  # l_shoulder
    locs[2] = c + (5.0, -6.0) + jitter()  # r_shoulder
    locs[7] = c + (-3.5, 5.0) + jitter()  # l_hip
    locs[8] = c + (3.5, 5.0) + jitter()  # r_hip
    swing = action.wobble * np.sin(2.0 * np.pi * t / max(frames, 1) + phase)
    arm_r = action.arm_angle + swing + rng.normal(0.0, 0.06)
    arm_l = np.pi - (action.arm_angle + swing + rng.normal(0.0, 0.06))
    leg_r = action.leg_angle + 0.5 * swing + rng.normal(0.0, 0.05)
    leg_l = np.pi - (action.leg_angle + 0.5 * swing + rng.normal(0.0, 0.05))
    # Forearms splay outward so hanging wrists clear the hips.
    locs[3] = locs[1] + 5.0 * _direction(arm_l)  # l_elbow
    locs[4] = locs[2] + 5.0 * _direction(arm_r)  # r_elbow
    locs[5] = locs[3] + 5.0 * _direction(arm_l + 0.5)  # l_wrist
    locs[6] = locs[4] + 5.0 * _direction(arm_r - 0.5)  # r_wrist
    locs[9] = locs[7] + 6.0 * _direction(leg_l)  # l_knee
    locs[10] = locs[8] + 6.0 * _direction(leg_r)  # r_knee
    locs[11] = locs[9] + 6.0 * _direction(leg_l)  # l_ankle
    locs[12] = locs[10] + 6.0 * _direction(leg_r)  # r_ankle
    return locs


def _render_blob(channel: np.ndarray, x: float, y: float, sigma: float,
                 amplitude: float = 1.0):
    h, w = channel.shape
    r = int(np.ceil(3 * sigma))
    x0, x1 = int(np.floor(x)) - r, int(np.floor(x)) + r + 1
    y0, y1 = int(np.floor(y)) - r, int(np.floor(y)) + r + 1
    xs = np.arange(max(x0, 0), min(x1, w))
    ys = np.arange(max(y0, 0), min(y1, h))
    if len(xs) == 0 or len(ys) == 0:
        return
    g = np.exp(
        -(
            (xs[None, :] - x) ** 2 + (ys[:, None] - y) ** 2
        )
        / (2.0 * sigma**2)
    )
    channel[np.ix_(ys, xs)] += amplitude * g


def _joint_amplitude(joint_index: int) -> float:
    """Per-joint signature amplitude; distinguishes mirror-symmetric limbs."""
    return 0.25 + 0.75 * joint_index / 12.0


def _render_disc(channel, x, y, radius, amplitude):
    """Flat-top disc with a steep logistic edge, composed by maximum.

    The plateau keeps the amplitude code readable at patch centers drawn a
    couple of pixels off the joint; max-composition keeps it intact where
    neighboring joints' discs overlap (wrists hanging beside hips).
    """
    h, w = channel.shape
    r_ext = int(np.ceil(radius + 3.0))
    xs = np.arange(max(int(x) - r_ext, 0), min(int(x) + r_ext + 1, w))
    ys = np.arange(max(int(y) - r_ext, 0), min(int(y) + r_ext + 1, h))
    if len(xs) == 0 or len(ys) == 0:
        return
    r = np.sqrt((xs[None, :] - x) ** 2 + (ys[:, None] - y) ** 2)
    disc = amplitude / (1.0 + np.exp((r - radius) / 0.15))
    region = np.ix_(ys, xs)
    channel[region] = np.maximum(channel[region], disc)


def _render_frame(spec: SyntheticSpec, action: ActionSpec, locs, rng):
    data = np.zeros((spec.n_channels, spec.height, spec.width), dtype=np.float64)
    sig = 1 + action.signature_channel
    disc_radius = 2.0 * spec.blob_sigma
    for j, (x, y) in enumerate(locs):
        _render_blob(data[0], x, y, spec.blob_sigma)
        _render_disc(data[sig], x, y, disc_radius, _joint_amplitude(j))
    other_channels = [
        1 + a.signature_channel
        for a in spec.actions
        if 1 + a.signature_channel != sig
    ]
    for _ in range(spec.n_distractors):
        dx = rng.uniform(0, spec.width)
        dy = rng.uniform(0, spec.height)
        amp = float(rng.uniform(0.25, 1.0))
        _render_blob(data[0], dx, dy, spec.blob_sigma)
        if other_channels:
            ch = other_channels[int(rng.integers(len(other_channels)))]
            _render_disc(data[ch], dx, dy, disc_radius, amp)
    if spec.noise > 0:
        data += rng.normal(0.0, spec.noise, size=data.shape)
    return core.FeatureStack(data.astype(np.float32))


def _person_size(locs: np.ndarray) -> float:
    span = locs.max(axis=0) - locs.min(axis=0)
    return 0.5 * float(np.hypot(span[0], span[1]))


def generate_video(
    spec: SyntheticSpec, action_index: int, video_id: str, seed_seq
) -> VideoSample:
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    action = spec.actions[action_index]
    margin = 14.0
    center0 = np.array(
        [
            rng.uniform(margin, spec.width - margin),
            rng.uniform(margin + 2, spec.height - margin),
        ]
    )
    phase = rng.uniform(0, 2 * np.pi)
    stacks, poses, sizes = [], [], []
    for t in range(spec.frames_per_video):
        center = center0 + rng.normal(0.0, spec.center_jitter, size=2)
        locs = sample_pose(action, center, phase, t, spec.frames_per_video, rng)
        # Shift the whole figure into bounds; per-joint clipping would
        # corrupt both appearance and the offset statistics.
        bounds = np.array([spec.width - 2.0, spec.height - 2.0])
        shift = np.maximum(1.0 - locs.min(axis=0), 0.0)
        shift -= np.maximum(locs.max(axis=0) + shift - bounds, 0.0)
        locs = locs + shift
        stacks.append(_render_frame(spec, action, locs, rng))
        poses.append(core.Pose(locs, frame_index=t))
        sizes.append(_person_size(locs))
    annotation = core.VideoAnnotation(
        tuple(poses), action.name, tuple(sizes)
    )
    return VideoSample(video_id, tuple(stacks), annotation)


def generate_synthetic(spec: SyntheticSpec, seed: int) -> list[VideoSample]:
    """All videos for the spec: video i has action i mod n_actions."""
    n_videos = spec.videos_per_action * len(spec.actions)
    children = np.random.SeedSequence(seed).spawn(n_videos)
    return [
        generate_video(
            spec, i % len(spec.actions), f"video_{i:04d}", children[i]
        )
        for i in range(n_videos)
    ]


def generate_pose_sequences(spec: SyntheticSpec, seed: int):
    """Pose sequences only (no rendering); returns (sequences, label indices).

    Fast path for classifier experiments that never touch feature stacks.
    """
    videos = []
    labels = []
    n_videos = spec.videos_per_action * len(spec.actions)
    children = np.random.SeedSequence(seed).spawn(n_videos)
    for i in range(n_videos):
        rng = np.random.Generator(np.random.PCG64(children[i]))
        a = i % len(spec.actions)
        action = spec.actions[a]
        center0 = np.array([spec.width / 2.0, spec.height / 2.0])
        phase = rng.uniform(0, 2 * np.pi)
        seq = []
        for t in range(spec.frames_per_video):
            center = center0 + rng.normal(0.0, spec.center_jitter, size=2)
            locs = sample_pose(action, center, phase, t,
                               spec.frames_per_video, rng)
            seq.append(core.Pose(locs, frame_index=t))
        videos.append(seq)
        labels.append(a)
    return videos, labels


def write_dataset(videos: list[VideoSample], action_names, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [DATASET_MAGIC, "actions " + " ".join(action_names)]
    lines.append(f"videos {len(videos)}")
    for video in videos:
        lines.append(f"video {video.video_id} {len(video.stacks)}")
        vdir = directory / video.video_id
        vdir.mkdir(exist_ok=True)
        core.save_annotation(video.annotation, vdir / "annotation.txt")
        for t, stack in enumerate(video.stacks):
            core.save_feature_stack(stack, vdir / f"frame_{t:04d}.fstk")
    (directory / "dataset.txt").write_text("\n".join(lines) + "\n")


def load_dataset(directory):
    """Read a dataset directory; returns (videos, action_names)."""
    directory = Path(directory)
    manifest = directory / "dataset.txt"
    if not manifest.exists():
        raise core.FormatError(f"{manifest}: dataset manifest not found")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != DATASET_MAGIC:
        raise core.BadMagicError(f"{manifest}: bad magic, not a dataset file")
    try:
        action_names = tuple(lines[1].split()[1:])
        n_videos = int(lines[2].split()[1])
        videos = []
        for row in range(n_videos):
            _, vid, n_frames = lines[3 + row].split()
            vdir = directory / vid
            annotation = core.load_annotation(vdir / "annotation.txt")
            stacks = tuple(
                core.load_feature_stack(vdir / f"frame_{t:04d}.fstk")
                for t in range(int(n_frames))
            )
            videos.append(VideoSample(vid, stacks, annotation))
    except (IndexError, ValueError) as exc:
        if isinstance(exc, core.FormatError):
            raise
        raise core.TruncatedError(f"{manifest}: malformed dataset manifest") from exc
    return videos, action_names
