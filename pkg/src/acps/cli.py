"""Command-line surface.

Subcommands cover the whole workflow: synthesize a dataset, train every
model component, run conditioned inference, evaluate keypoint accuracy, and
sweep the conditioning ablation grid. Every command accepts --seed and
--threads; numeric output never depends on the thread count.

Exit codes: 0 success, 1 usage, 2 file-format error, 3 missing or corrupt
model component, 4 numeric/configuration failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import action as action_mod
from . import core, forest, modeldir, pairwise, pipeline, sharing, synth, unary

EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_MODEL = 3
EXIT_NUMERIC = 4

PREDICTION_MAGIC = "ACPP1"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"error code={EXIT_USAGE} kind=usage "
                              f"msg={message!r}\n")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="acps",
        description="Action-conditioned pictorial-structure pose estimation.",
        epilog=(
            "exit codes: 0 ok, 1 usage, 2 format error, "
            "3 missing/corrupt model, 4 numeric failure"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--actions", type=int, default=2)
    p.add_argument("--videos", type=int, default=8,
                   help="total number of videos")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--size", type=int, default=48)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--distractors", type=int, default=3)
    p.add_argument("--same-appearance", action="store_true",
                   help="identical appearance signatures for all actions")

    p = sub.add_parser("train-forests",
                       help="train per-joint conditional forests")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--trees", type=int, default=20)
    p.add_argument("--depth", type=int, default=20)
    p.add_argument("--min-leaf", type=int, default=20)
    p.add_argument("--candidates", type=int, default=40000)
    p.add_argument("--pos", type=int, default=50000)
    p.add_argument("--neg", type=int, default=50000)
    p.add_argument("--images", type=int, default=5000)
    p.add_argument("--window", type=int, default=12)
    p.add_argument("--pos-radius", type=float, default=5.0)

    p = sub.add_parser("fit-pairwise",
                       help="fit deformation statistics (needs forests)")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--k", type=int, default=24)
    p.add_argument("--alpha", type=float, default=0.1)

    p = sub.add_parser("learn-sharing",
                       help="learn appearance-sharing weights")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--lam", type=float, default=0.4)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=3.0)
    p.add_argument("--negatives", type=int, default=10)

    p = sub.add_parser("train-action", help="train the action classifier")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--codebook-size", type=int, default=20)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--svm-c", type=float, default=100.0)
    p.add_argument("--pose-source", choices=("estimated", "gt"),
                   default="estimated")

    p = sub.add_parser("train", help="train every component in one pass")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--trees", type=int, default=20)
    p.add_argument("--depth", type=int, default=20)
    p.add_argument("--min-leaf", type=int, default=20)
    p.add_argument("--candidates", type=int, default=40000)
    p.add_argument("--pos", type=int, default=50000)
    p.add_argument("--neg", type=int, default=50000)
    p.add_argument("--images", type=int, default=5000)
    p.add_argument("--window", type=int, default=12)
    p.add_argument("--pos-radius", type=float, default=5.0)
    p.add_argument("--k", type=int, default=24)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--lam", type=float, default=0.4)
    p.add_argument("--codebook-size", type=int, default=20)
    p.add_argument("--svm-c", type=float, default=100.0)
    p.add_argument("--pose-source", choices=("estimated", "gt"),
                   default="estimated")

    p = sub.add_parser("infer", help="run the two-pass conditioned inference")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--unary", choices=pipeline.UNARY_MODES,
                   default="independent")
    p.add_argument("--binary", choices=pipeline.BINARY_MODES,
                   default="independent")
    p.add_argument("--sharing", action="store_true")
    p.add_argument("--iterations", type=int, default=2)
    p.add_argument("--scales", type=int, default=4)
    p.add_argument("--factor", type=float, default=0.8)
    p.add_argument("--dt-mode", choices=("auto", "exact", "fast"),
                   default="fast")
    p.add_argument("--oracle-prior", action="store_true",
                   help="condition on the annotated action label")

    p = sub.add_parser("eval", help="keypoint accuracy of saved predictions")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--thr", type=float, action="append", default=None,
                   help="APK threshold; repeatable (default 0.1 and 0.2)")

    p = sub.add_parser("ablate", help="evaluate the conditioning grid")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thr", type=float, default=0.1)
    p.add_argument("--scales", type=int, default=4)
    p.add_argument("--factor", type=float, default=0.8)
    p.add_argument("--dt-mode", choices=("auto", "exact", "fast"),
                   default="fast")
    p.add_argument("--oracle-prior", action="store_true")

    p = sub.add_parser("dump-map",
                       help="write one joint's unary map as an FSTK file")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--joint", required=True)
    p.add_argument("--out", required=True)
    return parser


def _forest_config(args) -> forest.TrainConfig:
    return forest.TrainConfig(
        n_trees=args.trees, max_depth=args.depth, min_leaf=args.min_leaf,
        n_candidates=args.candidates, n_pos=args.pos, n_neg=args.neg,
        n_images=args.images, window_radius=args.window,
        pos_radius=args.pos_radius, neg_margin=2.0 * args.pos_radius,
    )


def _cmd_synth(args) -> int:
    spec = synth.SyntheticSpec(
        actions=synth.default_action_specs(
            args.actions, distinct_appearance=not args.same_appearance
        ),
        videos_per_action=max(1, args.videos // args.actions),
        frames_per_video=args.frames,
        width=args.size, height=args.size,
        noise=args.noise, n_distractors=args.distractors,
    )
    videos = synth.generate_synthetic(spec, args.seed)
    synth.write_dataset(videos, spec.action_names, args.out)
    print(f"wrote {len(videos)} videos to {args.out}")
    return 0


def _load_data(args):
    return synth.load_dataset(args.data)


def _cmd_train(args) -> int:
    videos, action_names = _load_data(args)
    config = pipeline.TrainingConfig(
        forest=_forest_config(args),
        k_clusters=args.k, alpha=args.alpha, lam=args.lam,
        codebook_size=args.codebook_size, svm_c=args.svm_c,
        pose_source=args.pose_source,
    )
    bundle = pipeline.train_models(
        videos, action_names, config, seed=args.seed, threads=args.threads
    )
    modeldir.save_bundle(bundle, args.model_dir, seed=args.seed)
    print(f"wrote model to {args.model_dir}")
    return 0


def _cmd_train_forests(args) -> int:
    videos, action_names = _load_data(args)
    tree = core.KinematicTree()
    train_ids, val_ids = pipeline.split_videos(videos)
    images_a = pipeline._frame_images(videos, train_ids, action_names)
    images_b = pipeline._frame_images(videos, val_ids, action_names)
    config = _forest_config(args)
    joint_seeds = np.random.SeedSequence(args.seed).spawn(len(tree.joints))
    directory = Path(args.model_dir) / "forests"
    directory.mkdir(parents=True, exist_ok=True)
    for j, name in enumerate(tree.joints):
        fr = forest.train_forest(
            images_a, images_b, j, name, action_names, config,
            pipeline._seed_of(joint_seeds[j]),
        )
        forest.save_forest(fr, directory / f"{name}.acpf")
    print(f"wrote {len(tree.joints)} forests to {directory}")
    return 0


def _cmd_fit_pairwise(args) -> int:
    videos, action_names = _load_data(args)
    tree = core.KinematicTree()
    poses, labels = [], []
    for video in videos:
        a = action_names.index(video.annotation.action_label)
        for pose in video.annotation.frames:
            poses.append(pose)
            labels.append(a)
    model = pairwise.fit_conditional_pairwise(
        poses, labels, tree, action_names, args.k, args.alpha, args.seed
    )
    out = Path(args.model_dir) / "pairwise.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    pairwise.save_conditional_pairwise(model, out)
    print(f"wrote {out}")
    return 0


def _require(path: Path, what: str):
    if not path.exists():
        raise modeldir.ModelError(f"missing model component: {what} ({path})")


def _cmd_learn_sharing(args) -> int:
    videos, action_names = _load_data(args)
    tree = core.KinematicTree()
    directory = Path(args.model_dir)
    _require(directory / "pairwise.txt", "pairwise.txt")
    pair_model = pairwise.load_conditional_pairwise(directory / "pairwise.txt")
    forests = {}
    for name in tree.joints:
        _require(directory / "forests" / f"{name}.acpf", f"forest {name}")
        forests[name] = forest.load_forest(directory / "forests" / f"{name}.acpf")
    half_a = {n: f.half(0) for n, f in forests.items()}
    config = pipeline.TrainingConfig(
        lam=args.lam, tau=args.tau, sigma=args.sigma,
        n_negatives=args.negatives,
    )
    _, val_ids = pipeline.split_videos(videos)
    problems, _ = pipeline._validation_pass(
        videos, val_ids, half_a, pair_model, tree, action_names, config,
        args.threads,
    )
    weights = sharing.learn_sharing(problems, args.lam, args.tau)
    sharing.save_sharing(weights, directory / "sharing.txt")
    print(f"wrote {directory / 'sharing.txt'}")
    return 0


def _cmd_train_action(args) -> int:
    videos, action_names = _load_data(args)
    tree = core.KinematicTree()
    directory = Path(args.model_dir)
    _require(directory / "pairwise.txt", "pairwise.txt")
    pair_model = pairwise.load_conditional_pairwise(directory / "pairwise.txt")
    forests = {}
    for name in tree.joints:
        _require(directory / "forests" / f"{name}.acpf", f"forest {name}")
        forests[name] = forest.load_forest(directory / "forests" / f"{name}.acpf")
    half_a = {n: f.half(0) for n, f in forests.items()}
    config = pipeline.TrainingConfig(
        codebook_size=args.codebook_size, codebook_restarts=args.restarts,
        svm_c=args.svm_c, pose_source=args.pose_source,
    )
    _, val_ids = pipeline.split_videos(videos)
    labels = [
        action_names.index(videos[i].annotation.action_label) for i in val_ids
    ]
    if args.pose_source == "gt":
        sequences = [list(videos[i].annotation.frames) for i in val_ids]
    else:
        _, sequences = pipeline._validation_pass(
            videos, val_ids, half_a, pair_model, tree, action_names, config,
            args.threads,
        )
    model = action_mod.train_action_model(
        sequences, labels, action_names, args.codebook_size, args.restarts,
        args.svm_c, seed=args.seed,
    )
    action_mod.save_action_model(model, directory / "action")
    print(f"wrote {directory / 'action'}")
    return 0


def _write_predictions(results, videos, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    for video, result in zip(videos, results):
        lines = [PREDICTION_MAGIC, f"video {video.video_id}"]
        lines.append(
            "prior " + " ".join(_fmt(p) for p in result.prior.probs)
        )
        for est in result.estimates:
            lines.append(
                f"frame {est.pose.frame_index} level {est.level} "
                f"total {_fmt(est.total)}"
            )
            for name, (x, y) in zip(core.JOINT_NAMES, est.pose.locations):
                lines.append(f"{name} {_fmt(x)} {_fmt(y)}")
        (out_dir / f"{video.video_id}.pose.txt").write_text(
            "\n".join(lines) + "\n"
        )


def _read_predictions(pred_dir: Path, videos):
    predictions = []
    for video in videos:
        path = pred_dir / f"{video.video_id}.pose.txt"
        if not path.exists():
            raise core.FormatError(f"{path}: prediction file not found")
        lines = path.read_text().splitlines()
        if not lines or lines[0] != PREDICTION_MAGIC:
            raise core.BadMagicError(f"{path}: bad magic")
        poses = []
        pos = 3
        while pos < len(lines):
            locs = np.zeros((len(core.JOINT_NAMES), 2))
            for j, name in enumerate(core.JOINT_NAMES):
                parts = lines[pos + 1 + j].split()
                if parts[0] != name:
                    raise core.FormatError(
                        f"{path}: expected joint {name} at line {pos + 2 + j}"
                    )
                locs[j] = [float(parts[1]), float(parts[2])]
            poses.append(core.Pose(locs, frame_index=len(poses)))
            pos += 1 + len(core.JOINT_NAMES)
        predictions.append(poses)
    return predictions


def _cmd_infer(args) -> int:
    videos, action_names = _load_data(args)
    bundle = modeldir.load_bundle(args.model_dir)
    config = pipeline.AcpsConfig(
        unary_mode=args.unary, binary_mode=args.binary, sharing=args.sharing,
        iterations=args.iterations, scales=args.scales, factor=args.factor,
        dt_mode=args.dt_mode,
    )
    results = []
    for video in videos:
        oracle = None
        if args.oracle_prior:
            oracle = bundle.action_names.index(video.annotation.action_label)
        results.append(
            pipeline.run_acps(video.stacks, bundle, config, oracle)
        )
    _write_predictions(results, videos, Path(args.out))
    print(f"wrote {len(videos)} prediction files to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    videos, _ = _load_data(args)
    predictions = _read_predictions(Path(args.pred), videos)
    annotations = [v.annotation for v in videos]
    thresholds = args.thr or [0.1, 0.2]
    width = 10
    text = ["joint".ljust(12) + "".join(
        f"thr={t:g}".rjust(width) for t in thresholds
    )]
    csv = ["joint," + ",".join(f"thr_{t:g}" for t in thresholds)]
    per_thr = [
        pipeline.apk(predictions, annotations, t) for t in thresholds
    ]
    for j, name in enumerate(core.JOINT_NAMES):
        row = [per_joint[j] for per_joint, _ in per_thr]
        text.append(
            name.ljust(12) + "".join(f"{v:.4f}".rjust(width) for v in row)
        )
        csv.append(name + "," + ",".join(f"{v:.6f}" for v in row))
    means = [mean for _, mean in per_thr]
    text.append(
        "mean".ljust(12) + "".join(f"{v:.4f}".rjust(width) for v in means)
    )
    csv.append("mean," + ",".join(f"{v:.6f}" for v in means))
    report = "\n".join(text) + "\n"
    sys.stdout.write(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "apk.txt").write_text(report)
        (out / "apk.csv").write_text("\n".join(csv) + "\n")
    return 0


def _cmd_ablate(args) -> int:
    videos, _ = _load_data(args)
    bundle = modeldir.load_bundle(args.model_dir)
    base = pipeline.AcpsConfig(
        scales=args.scales, factor=args.factor, dt_mode=args.dt_mode
    )
    result = pipeline.run_ablation(
        videos, bundle, base, threshold=args.thr,
        oracle=args.oracle_prior, threads=args.threads,
    )
    sys.stdout.write(result.as_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.txt").write_text(result.as_text())
    (out / "ablation.csv").write_text(result.as_csv())
    return 0


def _cmd_dump_map(args) -> int:
    videos, _ = _load_data(args)
    bundle = modeldir.load_bundle(args.model_dir)
    matches = [v for v in videos if v.video_id == args.video]
    if not matches:
        raise core.FormatError(f"video {args.video!r} not in dataset")
    stack = matches[0].stacks[args.frame]
    if args.joint not in bundle.tree.joints:
        raise ValueError(f"unknown joint {args.joint!r}")
    maps = unary.vote_maps(bundle.forests[args.joint], stack)
    mixed = unary.mix_prior(
        maps, core.ActionPrior.uniform(len(bundle.action_names))
    )
    out_stack = core.FeatureStack(
        mixed.values[None, :, :].astype(np.float32)
    )
    core.save_feature_stack(out_stack, args.out)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "train-forests": _cmd_train_forests,
    "fit-pairwise": _cmd_fit_pairwise,
    "learn-sharing": _cmd_learn_sharing,
    "train-action": _cmd_train_action,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "dump-map": _cmd_dump_map,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except core.FormatError as exc:
        sys.stderr.write(
            f"error code={EXIT_FORMAT} kind=format msg={str(exc)!r}\n"
        )
        return EXIT_FORMAT
    except (modeldir.ModelError, pipeline.MissingComponentError) as exc:
        sys.stderr.write(
            f"error code={EXIT_MODEL} kind=model msg={str(exc)!r}\n"
        )
        return EXIT_MODEL
    except (ValueError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(
            f"error code={EXIT_NUMERIC} kind=numeric msg={str(exc)!r}\n"
        )
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
