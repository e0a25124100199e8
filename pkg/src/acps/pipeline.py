"""End-to-end orchestration: train every model component, run the two-pass
inference loop (uniform prior, then prior re-estimated from the first-pass
poses), evaluate keypoint accuracy, and sweep the conditioning ablation grid.

Worker threads only distribute independent per-video or per-joint tasks and
results merge in index order, so numeric output never depends on the thread
count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import action as action_mod
from . import core, forest, inference, pairwise, sharing, unary
from .synth import VideoSample

UNARY_MODES = ("independent", "cond_hard", "cond_soft")
BINARY_MODES = ("independent", "cond_hard", "cond_soft")

# (unary mode, sharing) rows and binary-mode columns of the ablation grid.
GRID_ROWS = (
    ("independent", False),
    ("cond_hard", False),
    ("cond_hard", True),
    ("cond_soft", False),
    ("cond_soft", True),
)
GRID_COLS = BINARY_MODES


class MissingComponentError(RuntimeError):
    """A requested configuration needs a model component that is not loaded."""


@dataclass(frozen=True)
class AcpsConfig:
    """Which conditioning enters the second pass, and inference settings."""

    unary_mode: str = "independent"
    binary_mode: str = "independent"
    sharing: bool = False
    iterations: int = 2
    scales: int = 4
    factor: float = 0.8
    dt_mode: str = "fast"

    def __post_init__(self):
        if self.unary_mode not in UNARY_MODES:
            raise ValueError(f"unknown unary mode {self.unary_mode!r}")
        if self.binary_mode not in BINARY_MODES:
            raise ValueError(f"unknown binary mode {self.binary_mode!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def is_independent(self) -> bool:
        return (
            self.unary_mode == "independent"
            and self.binary_mode == "independent"
            and not self.sharing
        )


@dataclass(frozen=True)
class ModelBundle:
    """Everything the conditioned model needs at inference time."""

    tree: core.KinematicTree
    forests: dict[str, forest.ConditionalForest]
    pairwise_model: pairwise.ConditionalPairwiseModel
    sharing_weights: sharing.SharingWeights | None
    action_model: action_mod.ActionModel | None
    action_names: tuple[str, ...]


@dataclass(frozen=True)
class VideoResult:
    estimates: tuple[inference.PoseEstimate, ...]
    prior: core.ActionPrior
    first_pass: tuple[inference.PoseEstimate, ...]


def _frame_unary_cache(stack, bundle, config):
    """Per-level, per-joint, per-action vote maps for one frame."""
    pyramid = core.build_pyramid(stack, config.scales, config.factor)
    levels = []
    for level in pyramid.levels:
        levels.append(
            {
                j: unary.vote_maps(bundle.forests[j], level)
                for j in bundle.tree.joints
            }
        )
    return levels


def _combined_maps(level_maps, bundle, config, prior):
    """Apply sharing and the prior to one level's per-action maps."""
    n_actions = len(bundle.action_names)
    out = {}
    for j, maps in level_maps.items():
        if config.unary_mode == "independent" or prior is None:
            out[j] = unary.mix_prior(maps, core.ActionPrior.uniform(n_actions))
            continue
        if config.sharing:
            maps = [
                unary.apply_sharing(maps, bundle.sharing_weights.for_action(a))
                for a in range(n_actions)
            ]
        mix = prior.hardened() if config.unary_mode == "cond_hard" else prior
        out[j] = unary.mix_prior(maps, mix)
    return out


def _binary_model(bundle, config, prior):
    if config.binary_mode == "independent" or prior is None:
        return bundle.pairwise_model.condition(None)
    if config.binary_mode == "cond_hard":
        return bundle.pairwise_model.condition(prior.hardened())
    return bundle.pairwise_model.condition(prior)


def _infer_pass(cache, bundle, config, prior):
    """One inference pass over every frame of a video."""
    pair_model = _binary_model(bundle, config, prior)
    estimates = []
    for frame_index, levels in enumerate(cache):
        per_level = [
            _combined_maps(level_maps, bundle, config, prior)
            for level_maps in levels
        ]
        est = inference.infer_multiscale(
            bundle.tree, per_level, pair_model, config.factor, config.dt_mode
        )
        pose = core.Pose(
            est.pose.locations, est.pose.scale, frame_index=frame_index
        )
        estimates.append(
            inference.PoseEstimate(pose, est.unary_scores, est.level, est.total)
        )
    return estimates


def _check_components(bundle, config, have_oracle):
    if config.sharing and bundle.sharing_weights is None:
        raise MissingComponentError(
            "configuration uses appearance sharing but no sharing weights "
            "are loaded"
        )
    needs_prior = (
        config.unary_mode != "independent"
        or config.binary_mode != "independent"
    )
    if needs_prior and bundle.action_model is None and not have_oracle:
        raise MissingComponentError(
            "configuration conditions on the action prior but no action "
            "model is loaded"
        )


def run_acps(
    video_stacks,
    bundle: ModelBundle,
    config: AcpsConfig,
    oracle_action: int | None = None,
    _cache=None,
    _first_pass=None,
) -> VideoResult:
    """The full loop for one video.

    Pass 1 always runs the unconditional model under a uniform prior. The
    prior is then re-estimated from the pass-1 pose sequence (or injected
    from ``oracle_action``) and the remaining passes run with the configured
    conditioning. ``iterations=1`` returns the first pass unchanged.
    """
    _check_components(bundle, config, oracle_action is not None)
    n_actions = len(bundle.action_names)
    cache = _cache
    if cache is None:
        cache = [
            _frame_unary_cache(s, bundle, config) for s in video_stacks
        ]
    pass1 = _first_pass
    if pass1 is None:
        base = replace(
            config, unary_mode="independent", binary_mode="independent",
            sharing=False,
        )
        pass1 = _infer_pass(cache, bundle, base, None)
    estimates = pass1
    prior_used = core.ActionPrior.uniform(n_actions)
    for _ in range(1, config.iterations):
        if oracle_action is not None:
            prior = core.ActionPrior.one_hot(oracle_action, n_actions)
        elif bundle.action_model is not None:
            prior = action_mod.predict_prior(
                [e.pose for e in estimates], bundle.action_model, mode="soft"
            )
        else:
            prior = core.ActionPrior.uniform(n_actions)
        prior_used = prior
        if config.is_independent:
            continue  # conditioning is a no-op; poses cannot change
        estimates = _infer_pass(cache, bundle, config, prior)
    return VideoResult(tuple(estimates), prior_used, tuple(pass1))


# ---------------------------------------------------------------------------
# Evaluation

def apk(predictions, annotations, threshold: float):
    """Keypoint accuracy: correct iff ||pred - gt|| <= threshold * person size.

    ``predictions`` holds one pose list per video, aligned with
    ``annotations``. With a single hypothesis per frame the average precision
    reduces to the fraction of correct keypoints. Returns (per-joint array,
    mean over joints).
    """
    n_joints = len(core.JOINT_NAMES)
    correct = np.zeros(n_joints)
    total = 0
    for poses, annotation in zip(predictions, annotations):
        if len(poses) != len(annotation.frames):
            raise ValueError(
                f"{len(poses)} predictions for {len(annotation.frames)} frames"
            )
        for pose, gt_pose, size in zip(
            poses, annotation.frames, annotation.person_size
        ):
            locs = pose.locations if isinstance(pose, core.Pose) else pose
            dist = np.linalg.norm(locs - gt_pose.locations, axis=1)
            correct += dist <= threshold * size
            total += 1
    if total == 0:
        raise ValueError("no frames to evaluate")
    per_joint = correct / total
    return per_joint, float(per_joint.mean())


# ---------------------------------------------------------------------------
# Ablation grid

@dataclass(frozen=True)
class AblationResult:
    rows: tuple[tuple[str, bool], ...]
    cols: tuple[str, ...]
    mean_apk: np.ndarray  # (rows, cols)
    threshold: float

    @staticmethod
    def row_label(row) -> str:
        mode, shared = row
        label = {
            "independent": "indep",
            "cond_hard": "cond-hard",
            "cond_soft": "cond-soft",
        }[mode]
        return label + "+AS" if shared else label

    def as_text(self) -> str:
        width = 12
        header = "unary\\binary".ljust(width + 3) + "".join(
            c.rjust(width) for c in self.cols
        )
        lines = [header]
        for r, row in enumerate(self.rows):
            cells = "".join(
                f"{self.mean_apk[r, c]:.4f}".rjust(width)
                for c in range(len(self.cols))
            )
            lines.append(self.row_label(row).ljust(width + 3) + cells)
        return "\n".join(lines) + "\n"

    def as_csv(self) -> str:
        lines = ["unary,binary,mean_apk"]
        for r, row in enumerate(self.rows):
            for c, col in enumerate(self.cols):
                lines.append(
                    f"{self.row_label(row)},{col},{self.mean_apk[r, c]:.6f}"
                )
        return "\n".join(lines) + "\n"


def run_videos(
    videos: list[VideoSample],
    bundle: ModelBundle,
    configs: list[AcpsConfig],
    oracle: bool = False,
    threads: int = 1,
):
    """Run several configurations over a video set, sharing the unary cache.

    Returns one list of per-video pose lists per configuration, plus the
    per-video priors of the last configuration processed.
    """
    for config in configs:
        _check_components(bundle, config, oracle)
    base = configs[0]

    def one_video(video: VideoSample):
        label = bundle.action_names.index(video.annotation.action_label)
        cache = [_frame_unary_cache(s, bundle, base) for s in video.stacks]
        base_cfg = replace(
            base, unary_mode="independent", binary_mode="independent",
            sharing=False,
        )
        pass1 = _infer_pass(cache, bundle, base_cfg, None)
        per_config = []
        prior = None
        for config in configs:
            result = run_acps(
                video.stacks, bundle, config,
                oracle_action=label if oracle else None,
                _cache=cache, _first_pass=pass1,
            )
            per_config.append([e.pose for e in result.estimates])
            prior = result.prior
        return per_config, prior

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_video, videos))
    else:
        results = [one_video(v) for v in videos]
    per_config = [
        [results[v][0][c] for v in range(len(videos))]
        for c in range(len(configs))
    ]
    priors = [results[v][1] for v in range(len(videos))]
    return per_config, priors


def grid_configs(base: AcpsConfig):
    """The 5x3 conditioning grid, row-major."""
    configs = []
    for mode, shared in GRID_ROWS:
        for col in GRID_COLS:
            configs.append(
                replace(base, unary_mode=mode, sharing=shared, binary_mode=col)
            )
    return configs


def run_ablation(
    videos: list[VideoSample],
    bundle: ModelBundle,
    base: AcpsConfig,
    threshold: float = 0.1,
    oracle: bool = False,
    threads: int = 1,
) -> AblationResult:
    """Evaluate the full conditioning grid with a shared unary cache."""
    configs = grid_configs(base)
    per_config, _ = run_videos(videos, bundle, configs, oracle, threads)
    annotations = [v.annotation for v in videos]
    table = np.zeros((len(GRID_ROWS), len(GRID_COLS)))
    for i, poses in enumerate(per_config):
        _, mean = apk(poses, annotations, threshold)
        table[i // len(GRID_COLS), i % len(GRID_COLS)] = mean
    return AblationResult(GRID_ROWS, tuple(GRID_COLS), table, threshold)


# ---------------------------------------------------------------------------
# Training orchestration

@dataclass(frozen=True)
class TrainingConfig:
    """Every knob of the model-building stage in one place."""

    forest: forest.TrainConfig = field(default_factory=forest.TrainConfig)
    k_clusters: int = 24
    alpha: float = 0.1
    lam: float = 0.4
    tau: float = 1.0
    sigma: float = 3.0
    n_negatives: int = 10
    neg_exclusion: float = 5.0
    nms_radius: float = 5.0
    codebook_size: int = 20
    codebook_restarts: int = 8
    svm_c: float = 100.0
    tau_scores: float = 1.0
    pose_source: str = "estimated"  # estimated | gt
    dt_mode: str = "fast"


def split_videos(videos: list[VideoSample]):
    """Deterministic half split, balanced per action: within each action's
    videos (in dataset order), even positions train the first forest half,
    odd positions form the validation half."""
    by_action: dict[str, list[int]] = {}
    for i, video in enumerate(videos):
        by_action.setdefault(video.annotation.action_label, []).append(i)
    train_ids, val_ids = [], []
    for label in sorted(by_action):
        for pos, vid in enumerate(by_action[label]):
            (train_ids if pos % 2 == 0 else val_ids).append(vid)
    return sorted(train_ids), sorted(val_ids)


def _frame_images(videos, ids, action_names):
    images = []
    for i in ids:
        video = videos[i]
        a = action_names.index(video.annotation.action_label)
        for stack, pose in zip(video.stacks, video.annotation.frames):
            images.append((stack, pose, a))
    return images


def _seed_of(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def train_models(
    videos: list[VideoSample],
    action_names,
    config: TrainingConfig,
    seed: int = 0,
    threads: int = 1,
    tree: core.KinematicTree | None = None,
) -> ModelBundle:
    """Train forests, deformation statistics, sharing weights and the action
    classifier from an annotated video set.

    Videos split into two halves; half the trees per forest train on each.
    Sharing weights and the action classifier are learned on the validation
    half using only the trees trained on the other half.
    """
    tree = tree or core.KinematicTree()
    action_names = tuple(action_names)
    train_ids, val_ids = split_videos(videos)
    images_a = _frame_images(videos, train_ids, action_names)
    images_b = _frame_images(videos, val_ids, action_names)
    root = np.random.SeedSequence(seed)
    forest_seeds, pairwise_seed, action_seed = root.spawn(3)
    joint_seeds = forest_seeds.spawn(len(tree.joints))

    def train_one(args):
        j, name = args
        return forest.train_forest(
            images_a, images_b, j, name, action_names, config.forest,
            _seed_of(joint_seeds[j]),
        )

    jobs = list(enumerate(tree.joints))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trained = list(pool.map(train_one, jobs))
    else:
        trained = [train_one(job) for job in jobs]
    forests = {name: f for (_, name), f in zip(jobs, trained)}

    all_poses, all_labels = [], []
    for i in train_ids + val_ids:
        video = videos[i]
        a = action_names.index(video.annotation.action_label)
        for pose in video.annotation.frames:
            all_poses.append(pose)
            all_labels.append(a)
    pair_model = pairwise.fit_conditional_pairwise(
        all_poses, all_labels, tree, action_names, config.k_clusters,
        config.alpha, _seed_of(pairwise_seed),
    )

    half_a = {name: f.half(0) for name, f in forests.items()}
    problems, val_sequences = _validation_pass(
        videos, val_ids, half_a, pair_model, tree, action_names, config,
        threads,
    )
    sharing_weights = sharing.learn_sharing(problems, config.lam, config.tau)

    sequences, labels = [], []
    for pos, i in enumerate(val_ids):
        video = videos[i]
        labels.append(action_names.index(video.annotation.action_label))
        if config.pose_source == "gt":
            sequences.append(list(video.annotation.frames))
        else:
            sequences.append(val_sequences[pos])
    model = action_mod.train_action_model(
        sequences, labels, action_names, config.codebook_size,
        config.codebook_restarts, config.svm_c, config.tau_scores,
        _seed_of(action_seed),
    )
    return ModelBundle(tree, forests, pair_model, sharing_weights, model,
                       action_names)


def _validation_pass(
    videos, val_ids, half_a, pair_model, tree, action_names, config, threads
):
    """Vote maps on every validation frame with the train-half forest.

    Produces both the smoothed-response sharing problems and the
    uniform-prior pose estimates used to train the action classifier.
    """
    n_actions = len(action_names)
    pooled_pairwise = pair_model.condition(None)
    uniform = core.ActionPrior.uniform(n_actions)

    def one_video(i):
        video = videos[i]
        a = action_names.index(video.annotation.action_label)
        pos_list, neg_list, estimates = [], [], []
        for stack, gt_pose in zip(video.stacks, video.annotation.frames):
            mixed = {}
            frame_pos, frame_neg = [], []
            for j_name in tree.joints:
                maps = unary.vote_maps(half_a[j_name], stack)
                smoothed = np.stack(
                    [unary.smooth(m, config.sigma).values for m in maps]
                )
                gt = gt_pose.locations[tree.joint_index(j_name)]
                gx = int(np.clip(np.floor(gt[0] + 0.5), 0, stack.width - 1))
                gy = int(np.clip(np.floor(gt[1] + 0.5), 0, stack.height - 1))
                frame_pos.append(smoothed[:, gy, gx].copy())
                negs = sharing.mine_negatives(
                    smoothed[a], gt, config.n_negatives,
                    config.neg_exclusion, config.nms_radius,
                )
                if len(negs):
                    xs = negs[:, 0].astype(int)
                    ys = negs[:, 1].astype(int)
                    frame_neg.append(smoothed[:, ys, xs].T.copy())
                else:
                    frame_neg.append(np.empty((0, n_actions)))
                mixed[j_name] = unary.mix_prior(maps, uniform)
            pos_list.extend(frame_pos)
            neg_list.extend(frame_neg)
            est = inference.max_product(
                tree, mixed, pooled_pairwise, config.dt_mode
            )
            estimates.append(est.pose)
        return a, pos_list, neg_list, estimates

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_video, val_ids))
    else:
        results = [one_video(i) for i in val_ids]

    problems: dict[str, sharing.SharingProblem] = {}
    acc: dict[int, tuple[list, list]] = {}
    for a, pos_list, neg_list, _ in results:
        pa, na = acc.setdefault(a, ([], []))
        pa.extend(pos_list)
        na.extend(neg_list)
    for a, (pa, na) in acc.items():
        problems[action_names[a]] = sharing.SharingProblem(
            action_names[a], action_names, tuple(pa), tuple(na)
        )
    for name in action_names:
        if name not in problems:
            problems[name] = sharing.SharingProblem(
                name, action_names, (), ()
            )
    sequences = [estimates for _, _, _, estimates in results]
    return problems, sequences
