"""Pose-sequence action classification.

13-joint poses are completed with neck and belly, normalized (hip midpoint at
the origin, torso length as the unit), and expanded into a family of
descriptor streams: joint positions, pairwise distances, limb orientations,
and their frame-to-frame differences. Each stream gets a bag-of-words
codebook; videos become per-stream histograms compared with the chi-square
distance; the per-stream distances combine into one exponential multi-channel
kernel for one-vs-all SVMs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core
from .kmeans import weighted_kmeans

CODEBOOK_MAGIC = "ACCB1"
SVM_MAGIC = "ACSV1"

COMPLETED_JOINTS = core.JOINT_NAMES + ("neck", "belly")
COMPLETED_EDGES = core.DEFAULT_EDGES + (("neck", "head"), ("belly", "neck"))

TORSO_FLOOR = 1e-6


def complete_joints(locations: np.ndarray) -> np.ndarray:
    """Extend a (13, 2) pose with neck and belly, returning (15, 2).

    Neck is the mean of the head and the shoulder midpoint; belly is the mean
    of the two shoulders and two hips. Original joints are untouched.
    """
    locations = np.asarray(locations, dtype=np.float64)
    if locations.shape != (len(core.JOINT_NAMES), 2):
        raise ValueError(f"expected (13, 2) locations, got {locations.shape}")
    j = {name: locations[i] for i, name in enumerate(core.JOINT_NAMES)}
    shoulder_mid = 0.5 * (j["l_shoulder"] + j["r_shoulder"])
    neck = 0.5 * (j["head"] + shoulder_mid)
    belly = 0.25 * (
        j["l_shoulder"] + j["r_shoulder"] + j["l_hip"] + j["r_hip"]
    )
    return np.vstack([locations, neck, belly])


def _normalize(completed: np.ndarray) -> np.ndarray:
    idx = {n: i for i, n in enumerate(COMPLETED_JOINTS)}
    hip_mid = 0.5 * (completed[idx["l_hip"]] + completed[idx["r_hip"]])
    torso = np.linalg.norm(completed[idx["neck"]] - completed[idx["belly"]])
    return (completed - hip_mid) / max(torso, TORSO_FLOOR)


@dataclass(frozen=True)
class DescriptorSet:
    """Named descriptor streams; each is a (samples, dim) array."""

    streams: dict[str, np.ndarray]
    registry: tuple[tuple[str, int], ...]  # (name, dim) in canonical order


def descriptor_registry() -> tuple[tuple[str, int], ...]:
    """The canonical (name, dim) list for the descriptor family."""
    reg: list[tuple[str, int]] = []
    for name in COMPLETED_JOINTS:
        reg.append((f"pos:{name}", 2))
    for i, a in enumerate(COMPLETED_JOINTS):
        for b in COMPLETED_JOINTS[i + 1 :]:
            reg.append((f"dist:{a}:{b}", 1))
    for child, parent in COMPLETED_EDGES:
        reg.append((f"orient:{child}:{parent}", 2))
    for name in COMPLETED_JOINTS:
        reg.append((f"dpos:{name}", 2))
    for child, parent in COMPLETED_EDGES:
        reg.append((f"dorient:{child}:{parent}", 2))
    return tuple(reg)


def compute_descriptors(poses) -> DescriptorSet:
    """Descriptor streams for one pose sequence (13-joint poses, >= 2 frames).

    Per frame: normalized joint coordinates, pairwise joint distances, and
    the (sin, cos) orientation of every skeleton edge. Per consecutive frame
    pair: differences of the position and orientation streams.
    """
    poses = list(poses)
    if len(poses) < 2:
        raise ValueError("need at least 2 frames to compute descriptors")
    idx = {n: i for i, n in enumerate(COMPLETED_JOINTS)}
    frames = np.stack(
        [_normalize(complete_joints(p.locations)) for p in poses]
    )  # (T, 15, 2)
    t = frames.shape[0]

    streams: dict[str, np.ndarray] = {}
    for name in COMPLETED_JOINTS:
        streams[f"pos:{name}"] = frames[:, idx[name], :]
    for i, a in enumerate(COMPLETED_JOINTS):
        for b in COMPLETED_JOINTS[i + 1 :]:
            d = np.linalg.norm(frames[:, idx[a]] - frames[:, idx[b]], axis=1)
            streams[f"dist:{a}:{b}"] = d[:, None]
    orients = {}
    for child, parent in COMPLETED_EDGES:
        v = frames[:, idx[parent]] - frames[:, idx[child]]
        ang = np.arctan2(v[:, 1], v[:, 0])
        orients[(child, parent)] = np.stack([np.sin(ang), np.cos(ang)], axis=1)
        streams[f"orient:{child}:{parent}"] = orients[(child, parent)]
    for name in COMPLETED_JOINTS:
        pos = streams[f"pos:{name}"]
        streams[f"dpos:{name}"] = pos[1:] - pos[:-1]
    for child, parent in COMPLETED_EDGES:
        o = orients[(child, parent)]
        streams[f"dorient:{child}:{parent}"] = o[1:] - o[:-1]
    del t
    return DescriptorSet(streams, descriptor_registry())


@dataclass(frozen=True)
class Codebook:
    type_name: str
    centers: np.ndarray  # (k, dim)
    compactness: float


def build_codebook(
    samples: np.ndarray, k: int, restarts: int = 8, seed: int = 0,
    type_name: str = "",
) -> Codebook:
    """Best codebook out of ``restarts`` k-means runs (minimum compactness)."""
    samples = np.asarray(samples, dtype=np.float64)
    centers, _, compactness = weighted_kmeans(
        samples, k, None, restarts=restarts, seed=seed
    )
    return Codebook(type_name, centers, float(compactness))


def video_histogram(stream: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Hard-assignment bag-of-words histogram, L1-normalized.

    An empty stream yields the uniform histogram so the chi-square distance
    stays defined.
    """
    k = codebook.centers.shape[0]
    stream = np.asarray(stream, dtype=np.float64)
    if stream.size == 0:
        return np.full(k, 1.0 / k)
    diff = stream[:, None, :] - codebook.centers[None, :, :]
    assign = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return np.bincount(assign, minlength=k) / len(stream)


def chi2_distance(h: np.ndarray, h2: np.ndarray) -> float:
    """0.5 * sum (h - h')^2 / (h + h'), empty bins contributing zero."""
    h = np.asarray(h, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h.shape != h2.shape:
        raise ValueError("histograms must have equal length")
    s = h + h2
    d = h - h2
    mask = s > 0
    return 0.5 * float(np.sum(d[mask] ** 2 / s[mask]))


def _distance_matrix(hists: np.ndarray) -> np.ndarray:
    """All-pairs chi-square distances for one channel, (V, k) -> (V, V)."""
    s = hists[:, None, :] + hists[None, :, :]
    d = hists[:, None, :] - hists[None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(s > 0, d * d / s, 0.0)
    return 0.5 * terms.sum(axis=2)


@dataclass(frozen=True)
class KernelMatrix:
    values: np.ndarray  # (V, V)
    channel_names: tuple[str, ...]  # channels kept (nonzero distances)
    channel_means: np.ndarray  # mu_t per kept channel

    def __post_init__(self):
        k = self.values
        if k.shape[0] != k.shape[1]:
            raise ValueError("kernel must be square")
        if np.abs(k - k.T).max() > 1e-9:
            raise ValueError("kernel must be symmetric")


def build_kernel(histogram_table: dict[str, np.ndarray]) -> KernelMatrix:
    """Multi-channel exponential chi-square kernel over training videos.

    Per channel t the distance matrix D_t is normalized by its off-diagonal
    mean mu_t; channels whose distances are identically zero carry no
    information and are dropped. K = exp(-(1/L) sum_t D_t / mu_t).
    """
    n_videos = {h.shape[0] for h in histogram_table.values()}
    if len(n_videos) != 1:
        raise ValueError("histogram table is ragged")
    v = n_videos.pop()
    if v < 2:
        raise ValueError("need at least 2 videos to build a kernel")
    kept, means, normalized = [], [], []
    off_diag = ~np.eye(v, dtype=bool)
    for name, hists in histogram_table.items():
        d = _distance_matrix(hists)
        mu = float(d[off_diag].mean())
        if mu <= 0.0:
            continue
        kept.append(name)
        means.append(mu)
        normalized.append(d / mu)
    if not kept:
        return KernelMatrix(np.ones((v, v)), (), np.empty(0))
    total = np.zeros((v, v))
    for d in normalized:
        total += d
    k = np.exp(-total / len(kept))
    return KernelMatrix(k, tuple(kept), np.array(means))


def _smo_binary(kernel: np.ndarray, y: np.ndarray, c: float, tol: float = 1e-3,
                max_iter: int = 100000):
    """Dual soft-margin SVM on a precomputed kernel via maximal-violating-pair
    coordinate optimization. Returns (alpha, bias)."""
    n = len(y)
    alpha = np.zeros(n)
    f = np.zeros(n)  # sum_j alpha_j y_j K_ij
    for _ in range(max_iter):
        ferr = f - y
        up_mask = ((y > 0) & (alpha < c)) | ((y < 0) & (alpha > 0))
        low_mask = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < c))
        up_idx = np.flatnonzero(up_mask)
        low_idx = np.flatnonzero(low_mask)
        if len(up_idx) == 0 or len(low_idx) == 0:
            break
        i = up_idx[int(np.argmin(ferr[up_idx]))]
        j = low_idx[int(np.argmax(ferr[low_idx]))]
        b_up, b_low = ferr[i], ferr[j]
        if b_low - b_up < tol:
            break
        eta = kernel[i, i] + kernel[j, j] - 2.0 * kernel[i, j]
        if eta <= 1e-12:
            eta = 1e-12
        # Platt-style pair update on (i, j), alpha_j moving first.
        if y[i] != y[j]:
            lo = max(0.0, alpha[j] - alpha[i])
            hi = min(c, c + alpha[j] - alpha[i])
        else:
            lo = max(0.0, alpha[i] + alpha[j] - c)
            hi = min(c, alpha[i] + alpha[j])
        new_j = alpha[j] + y[j] * (b_up - b_low) / eta
        new_j = min(max(new_j, lo), hi)
        delta_j = new_j - alpha[j]
        if abs(delta_j) < 1e-15:
            break
        new_i = alpha[i] + y[i] * y[j] * (alpha[j] - new_j)
        delta_i = new_i - alpha[i]
        alpha[i], alpha[j] = new_i, new_j
        f = f + y[i] * delta_i * kernel[:, i] + y[j] * delta_j * kernel[:, j]
    ferr = f - y
    up_mask = ((y > 0) & (alpha < c)) | ((y < 0) & (alpha > 0))
    low_mask = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < c))
    b_up = ferr[up_mask].min() if np.any(up_mask) else 0.0
    b_low = ferr[low_mask].max() if np.any(low_mask) else 0.0
    bias = -0.5 * (b_up + b_low)
    return alpha, float(bias)


@dataclass(frozen=True)
class ActionModel:
    """One-vs-all SVMs over the precomputed kernel plus everything needed to
    evaluate new videos: codebooks, per-channel distance means, and the
    training histograms."""

    action_names: tuple[str, ...]
    codebooks: dict[str, Codebook]
    channel_names: tuple[str, ...]
    channel_means: np.ndarray
    train_histograms: dict[str, np.ndarray]  # type -> (V, k)
    labels: np.ndarray  # (V,) action indices
    dual: np.ndarray  # (A, V), alpha_i * y_i per one-vs-all problem
    bias: np.ndarray  # (A,)
    c: float
    tau: float = 1.0


def train_svm(
    kernel: KernelMatrix, labels, action_names, c: float = 100.0,
    tol: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray]:
    """One-vs-all duals on the kernel; returns (dual (A, V), bias (A,))."""
    labels = np.asarray(labels, dtype=np.intp)
    n_actions = len(action_names)
    counts = np.bincount(labels, minlength=n_actions)
    absent = [action_names[a] for a in range(n_actions) if counts[a] == 0]
    if absent:
        raise ValueError("actions absent from training: " + ", ".join(absent))
    if np.all(counts == len(labels)):
        raise ValueError("one-vs-all needs at least one negative per class")
    dual = np.zeros((n_actions, len(labels)))
    bias = np.zeros(n_actions)
    for a in range(n_actions):
        y = np.where(labels == a, 1.0, -1.0)
        alpha, b = _smo_binary(kernel.values, y, c, tol)
        dual[a] = alpha * y
        bias[a] = b
    return dual, bias


def decision_values(model: ActionModel, kernel_row: np.ndarray) -> np.ndarray:
    """Per-action one-vs-all scores for one video's kernel row."""
    return model.dual @ kernel_row + model.bias


def kernel_row(model: ActionModel, descriptors: DescriptorSet) -> np.ndarray:
    """Kernel values between a new video and every training video."""
    n_videos = len(model.labels)
    total = np.zeros(n_videos)
    for name, mu in zip(model.channel_names, model.channel_means):
        hist = video_histogram(descriptors.streams[name], model.codebooks[name])
        train = model.train_histograms[name]
        d = np.array([chi2_distance(hist, train[i]) for i in range(n_videos)])
        total += d / mu
    if not model.channel_names:
        return np.ones(n_videos)
    return np.exp(-total / len(model.channel_names))


def predict_prior(
    poses, model: ActionModel, mode: str = "soft"
) -> core.ActionPrior:
    """Action distribution for a pose sequence.

    Soft mode maps decision values through a temperature softmax; hard mode
    returns the one-hot prior at the argmax (ties to the lowest index).
    """
    descriptors = compute_descriptors(poses)
    scores = decision_values(model, kernel_row(model, descriptors))
    if mode == "hard":
        return core.ActionPrior.one_hot(int(np.argmax(scores)),
                                        len(model.action_names))
    z = scores / model.tau
    z = z - z.max()
    p = np.exp(z)
    return core.ActionPrior(p / p.sum(), mode="soft")


def train_action_model(
    video_pose_sequences,
    labels,
    action_names,
    codebook_size: int = 20,
    restarts: int = 8,
    c: float = 100.0,
    tau: float = 1.0,
    seed: int = 0,
) -> ActionModel:
    """Full classifier training from pose sequences.

    Builds one codebook per descriptor type over all training samples, turns
    every video into per-type histograms, forms the multi-channel kernel and
    fits the one-vs-all SVMs.
    """
    labels = np.asarray(labels, dtype=np.intp)
    descs = [compute_descriptors(seq) for seq in video_pose_sequences]
    registry = descriptor_registry()
    codebooks: dict[str, Codebook] = {}
    hist_table: dict[str, np.ndarray] = {}
    children = np.random.SeedSequence(seed).spawn(len(registry))
    for (name, _dim), child in zip(registry, children):
        samples = np.concatenate([d.streams[name] for d in descs], axis=0)
        k = min(codebook_size, np.unique(samples, axis=0).shape[0])
        if k < 2:
            continue  # constant stream: zero distances, dropped later anyway
        cb = build_codebook(
            samples, k, restarts=restarts,
            seed=int(child.generate_state(1, dtype=np.uint64)[0]),
            type_name=name,
        )
        codebooks[name] = cb
        hist_table[name] = np.stack(
            [video_histogram(d.streams[name], cb) for d in descs]
        )
    kernel = build_kernel(hist_table)
    dual, bias = train_svm(kernel, labels, action_names, c)
    kept_hists = {name: hist_table[name] for name in kernel.channel_names}
    kept_books = {name: codebooks[name] for name in kernel.channel_names}
    return ActionModel(
        tuple(action_names), kept_books, kernel.channel_names,
        kernel.channel_means, kept_hists, labels, dual, bias, c, tau,
    )


# ---------------------------------------------------------------------------
# Serialization (two text files inside a model directory)

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_action_model(model: ActionModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [CODEBOOK_MAGIC, f"types {len(model.codebooks)}"]
    for name in model.channel_names:
        cb = model.codebooks[name]
        k, dim = cb.centers.shape
        lines.append(f"type {name} {dim} {k} {_fmt(cb.compactness)}")
        for row in cb.centers:
            lines.append("center " + " ".join(_fmt(v) for v in row))
    (directory / "codebooks.txt").write_text("\n".join(lines) + "\n")

    lines = [SVM_MAGIC]
    lines.append("actions " + " ".join(model.action_names))
    lines.append(f"c {_fmt(model.c)}")
    lines.append(f"tau {_fmt(model.tau)}")
    lines.append("labels " + " ".join(str(int(v)) for v in model.labels))
    lines.append(f"channels {len(model.channel_names)}")
    for name, mu in zip(model.channel_names, model.channel_means):
        lines.append(f"channel {name} {_fmt(mu)}")
    for name in model.channel_names:
        for vid, row in enumerate(model.train_histograms[name]):
            lines.append(
                f"hist {vid} {name} " + " ".join(_fmt(v) for v in row)
            )
    for a, name in enumerate(model.action_names):
        lines.append(
            f"dual {name} " + " ".join(_fmt(v) for v in model.dual[a])
        )
        lines.append(f"bias {name} {_fmt(model.bias[a])}")
    (directory / "svm.txt").write_text("\n".join(lines) + "\n")


def load_action_model(directory) -> ActionModel:
    directory = Path(directory)
    cb_lines = (directory / "codebooks.txt").read_text().splitlines()
    if not cb_lines or cb_lines[0] != CODEBOOK_MAGIC:
        raise core.BadMagicError(f"{directory}: bad codebooks magic")
    try:
        codebooks: dict[str, Codebook] = {}
        pos = 2
        n_types = int(cb_lines[1].split()[1])
        for _ in range(n_types):
            _, name, dim, k, compactness = cb_lines[pos].split()
            dim, k = int(dim), int(k)
            centers = np.array(
                [
                    [float(v) for v in cb_lines[pos + 1 + r].split()[1:]]
                    for r in range(k)
                ]
            ).reshape(k, dim)
            codebooks[name] = Codebook(name, centers, float(compactness))
            pos += 1 + k

        svm_lines = (directory / "svm.txt").read_text().splitlines()
        if not svm_lines or svm_lines[0] != SVM_MAGIC:
            raise core.BadMagicError(f"{directory}: bad svm magic")
        action_names = tuple(svm_lines[1].split()[1:])
        c = float(svm_lines[2].split()[1])
        tau = float(svm_lines[3].split()[1])
        labels = np.array([int(v) for v in svm_lines[4].split()[1:]],
                          dtype=np.intp)
        n_channels = int(svm_lines[5].split()[1])
        channel_names, means = [], []
        pos = 6
        for _ in range(n_channels):
            _, name, mu = svm_lines[pos].split()
            channel_names.append(name)
            means.append(float(mu))
            pos += 1
        hists: dict[str, list] = {name: [None] * len(labels)
                                  for name in channel_names}
        while pos < len(svm_lines) and svm_lines[pos].startswith("hist "):
            parts = svm_lines[pos].split()
            hists[parts[2]][int(parts[1])] = [float(v) for v in parts[3:]]
            pos += 1
        train_histograms = {
            name: np.array(rows) for name, rows in hists.items()
        }
        dual = np.zeros((len(action_names), len(labels)))
        bias = np.zeros(len(action_names))
        for _ in range(len(action_names)):
            parts = svm_lines[pos].split()
            a = action_names.index(parts[1])
            dual[a] = [float(v) for v in parts[2:]]
            parts = svm_lines[pos + 1].split()
            bias[action_names.index(parts[1])] = float(parts[2])
            pos += 2
    except (IndexError, ValueError) as exc:
        if isinstance(exc, core.FormatError):
            raise
        raise core.TruncatedError(f"{directory}: malformed action model") from exc
    return ActionModel(
        action_names, codebooks, tuple(channel_names), np.array(means),
        train_histograms, labels, dual, bias, c, tau,
    )
