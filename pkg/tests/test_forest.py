import numpy as np
import pytest

from acps import forest
from acps.core import FeatureStack, Pose
from acps.forest import (
    ForestCorruptError,
    ForestVersionError,
    PatchSet,
    SplitTest,
    Tree,
    TrainConfig,
    predict_leaf,
    sample_patches,
    split_goodness,
    train_tree,
)
from conftest import DESK_CONFIG, two_action_images
from oracles import information_gain_oracle, variance_reduction_oracle


def make_patchset(windows, labels, offsets, actions, n_actions=2):
    return PatchSet(
        np.asarray(windows, dtype=np.float32),
        np.asarray(labels, dtype=bool),
        np.asarray(offsets, dtype=np.float64),
        np.asarray(actions),
        joint=0,
        action_names=tuple(f"a{i}" for i in range(n_actions)),
    )


def constant_windows(values, channels=1, radius=1):
    """One window per value, constant across the window."""
    w = 2 * radius + 1
    return np.stack(
        [np.full((channels, w, w), v, dtype=np.float32) for v in values]
    )


class TestSampling:
    def test_desk_config_counts_and_balance(self, rng):
        images = two_action_images(rng)
        config = TrainConfig(
            n_pos=500, n_neg=500, n_images=50, window_radius=4,
            pos_radius=2.0, neg_margin=6.0,
        )
        patches = sample_patches(images, 0, config, seed=3)
        assert len(patches) == 1000
        assert patches.is_foreground.sum() == 500

    def test_determinism(self, rng):
        images = two_action_images(rng)
        config = TrainConfig(n_pos=60, n_neg=60, n_images=10, window_radius=3,
                             pos_radius=2.0, neg_margin=6.0)
        a = sample_patches(images, 0, config, seed=7)
        b = sample_patches(images, 0, config, seed=7)
        assert np.array_equal(a.windows, b.windows)
        assert np.array_equal(a.offsets, b.offsets)
        assert np.array_equal(a.actions, b.actions)

    def test_positive_offsets_within_radius(self, rng):
        images = two_action_images(rng)
        config = TrainConfig(n_pos=200, n_neg=0, n_images=10, window_radius=3,
                             pos_radius=2.0, neg_margin=6.0)
        patches = sample_patches(images, 0, config, seed=1)
        # offset = joint - center; center within pos_radius of the joint,
        # plus at most half a pixel of rounding
        norms = np.linalg.norm(patches.offsets, axis=1)
        assert norms.max() <= config.pos_radius + 0.71

    def test_negatives_respect_margin(self, rng):
        images = two_action_images(rng)
        config = TrainConfig(n_pos=0, n_neg=300, n_images=10, window_radius=3,
                             pos_radius=2.0, neg_margin=6.0)
        patches = sample_patches(images, 0, config, seed=1)
        assert not patches.is_foreground.any()

    def test_too_many_patches_rejected(self, rng):
        images = two_action_images(rng, size=16)
        config = TrainConfig(n_pos=10**6, n_neg=10**6, n_images=4,
                             window_radius=3)
        with pytest.raises(ValueError, match="pixels"):
            sample_patches(images, 0, config, seed=1)


class TestSplitGoodness:
    def test_pure_split_gains_one_bit(self):
        windows = constant_windows([0.0] * 4 + [1.0] * 4)
        patches = make_patchset(
            windows, [True] * 4 + [False] * 4, np.zeros((8, 2)), [0] * 8
        )
        split = SplitTest(channel=0, dx=0, dy=0, threshold=0.5)
        gain = split_goodness(split, patches, "classification")
        assert gain == pytest.approx(1.0)

    def test_uninformative_split_gains_zero(self):
        # Both children keep the parent's 50/50 label ratio.
        windows = constant_windows([0.0, 0.0, 1.0, 1.0])
        patches = make_patchset(
            windows, [True, False, True, False], np.zeros((4, 2)), [0] * 4
        )
        split = SplitTest(channel=0, dx=0, dy=0, threshold=0.5)
        assert split_goodness(split, patches, "classification") == pytest.approx(0.0)

    def test_empty_side_scores_minus_inf(self):
        windows = constant_windows([1.0, 1.0])
        patches = make_patchset(windows, [True, False], np.zeros((2, 2)), [0, 0])
        split = SplitTest(channel=0, dx=0, dy=0, threshold=0.0)
        assert split_goodness(split, patches, "classification") == -np.inf

    def test_regression_variance_reduction(self):
        n = 6
        windows = constant_windows([0.0] * n + [1.0] * n)
        offsets = [[5.0, 0.0]] * n + [[-5.0, 0.0]] * n
        patches = make_patchset(
            windows, [True] * (2 * n), offsets, [0] * (2 * n)
        )
        split = SplitTest(channel=0, dx=0, dy=0, threshold=0.5)
        gain = split_goodness(split, patches, "regression")
        assert gain == pytest.approx(25.0)

    def test_matches_oracles_on_random_fixtures(self, rng):
        for _ in range(25):
            n = int(rng.integers(4, 30))
            values = rng.normal(size=n)
            labels = rng.random(n) < 0.5
            offsets = rng.normal(size=(n, 2)) * 3
            thr = float(rng.normal())
            windows = constant_windows(values)
            patches = make_patchset(windows, labels, offsets,
                                    rng.integers(0, 2, size=n))
            split = SplitTest(channel=0, dx=0, dy=0, threshold=thr)
            got_c = split_goodness(split, patches, "classification")
            want_c = information_gain_oracle(values, thr, labels)
            got_r = split_goodness(split, patches, "regression")
            want_r = variance_reduction_oracle(values, thr, labels, offsets)
            assert got_c == pytest.approx(want_c, abs=1e-9)
            assert got_r == pytest.approx(want_r, abs=1e-9)


class TestTreeTraining:
    def test_pure_node_becomes_indicator_leaf(self):
        windows = constant_windows([0.3] * 10)
        patches = make_patchset(
            windows, [True] * 10, np.ones((10, 2)), [0] * 10
        )
        config = TrainConfig(max_depth=5, min_leaf=2, n_candidates=30)
        tree = train_tree(patches, config, seed=0)
        assert len(tree.leaves) == 1
        leaf = tree.leaves[0]
        assert leaf.probs[0] == 1.0
        assert leaf.probs[1] == 0.0  # no samples of the other action

    def test_separable_clusters_split_purely_at_depth_one(self, rng):
        values = np.concatenate([rng.uniform(0, 0.2, 20),
                                 rng.uniform(0.8, 1.0, 20)])
        labels = [True] * 20 + [False] * 20
        windows = constant_windows(values)
        patches = make_patchset(windows, labels, np.zeros((40, 2)),
                                [0] * 40)
        config = TrainConfig(
            max_depth=1, min_leaf=5, n_candidates=400,
            goodness="classification",
        )
        tree = train_tree(patches, config, seed=1)
        assert tree.n_nodes == 3
        # Chosen split must achieve what exhaustive threshold search achieves:
        # zero entropy in both children.
        thr = tree.threshold[0]
        best = max(
            information_gain_oracle(values, t, labels)
            for t in np.linspace(0.01, 0.99, 199)
        )
        assert information_gain_oracle(values, thr, labels) == pytest.approx(
            best
        )
        for leaf in tree.leaves:
            assert leaf.probs[0] in (0.0, 1.0)

    def test_depth_zero_aggregates_everything(self, rng):
        values = rng.normal(size=12)
        patches = make_patchset(
            constant_windows(values),
            rng.random(12) < 0.5,
            rng.normal(size=(12, 2)),
            [0] * 12,
        )
        config = TrainConfig(max_depth=0, min_leaf=1, n_candidates=16)
        tree = train_tree(patches, config, seed=2)
        assert tree.n_nodes == 1
        assert int(tree.leaves[0].counts.sum()) == 12

    def test_depth_and_min_leaf_respected(self, desk_forest):
        for tree in desk_forest.trees:
            assert tree.depth() <= DESK_CONFIG.max_depth
            if len(tree.leaves) > 1:
                for leaf in tree.leaves:
                    assert leaf.counts.sum() >= DESK_CONFIG.min_leaf

    def test_leaf_vote_weights_sum_to_probability(self, desk_forest):
        for tree in desk_forest.trees:
            for leaf in tree.leaves:
                for a in range(len(leaf.probs)):
                    assert 0.0 <= leaf.probs[a] <= 1.0
                    _, weights = leaf.votes[a]
                    assert weights.sum() == pytest.approx(leaf.probs[a],
                                                          abs=1e-9)

    def test_selected_split_gains_are_nonnegative(self, desk_forest, rng):
        # Recompute the chosen split's goodness on the routed samples.
        images = two_action_images(np.random.default_rng(11))
        patches = sample_patches(
            forest._TaggedImages(images, ("a0", "a1")), 0, DESK_CONFIG, seed=9
        )
        tree = train_tree(patches, DESK_CONFIG, seed=10)
        idx_by_node = {0: np.arange(len(patches))}
        for node in range(tree.n_nodes):
            if tree.leaf_id[node] >= 0:
                continue
            idx = idx_by_node[node]
            r = patches.window_radius
            values = patches.windows[
                idx, tree.channel[node], r + tree.dy[node], r + tree.dx[node]
            ]
            go_left = values < tree.threshold[node]
            idx_by_node[tree.left[node]] = idx[go_left]
            idx_by_node[tree.right[node]] = idx[~go_left]
            if tree.mode[node] == forest.MODE_CLASSIFICATION:
                gain = information_gain_oracle(
                    values, tree.threshold[node], patches.is_foreground[idx]
                )
                assert gain >= 0.0


class TestRouting:
    def depth_one_tree(self, threshold=0.5):
        left_leaf = forest.LeafModel(
            np.array([1.0]), ((np.zeros((1, 2)), np.ones(1)),),
            np.array([1]),
        )
        right_leaf = forest.LeafModel(
            np.array([0.0]), ((np.empty((0, 2)), np.empty(0)),),
            np.array([1]),
        )
        return Tree(
            left=[1, -1, -1], right=[2, -1, -1], channel=[0, 0, 0],
            dx=[0, 0, 0], dy=[0, 0, 0], threshold=[threshold, 0, 0],
            mode=[0, 0, 0], leaf_id=[-1, 0, 1],
            leaves=[left_leaf, right_leaf],
        )

    def test_below_threshold_goes_left(self):
        tree = self.depth_one_tree()
        stack = FeatureStack(np.full((1, 3, 3), 0.4, dtype=np.float32))
        leaf = predict_leaf(tree, stack, (1, 1))
        assert leaf.probs[0] == 1.0

    def test_tie_goes_right(self):
        tree = self.depth_one_tree(threshold=0.5)
        stack = FeatureStack(np.full((1, 3, 3), 0.5, dtype=np.float32))
        leaf = predict_leaf(tree, stack, (1, 1))
        assert leaf.probs[0] == 0.0

    def test_routing_is_deterministic(self, rng):
        tree = self.depth_one_tree()
        stack = FeatureStack(
            rng.normal(size=(1, 5, 5)).astype(np.float32)
        )
        results = {tree.route(stack, (2, 2)) for _ in range(1000)}
        assert len(results) == 1

    def test_route_all_matches_scalar_route(self, desk_forest, rng):
        stack = FeatureStack(rng.normal(size=(3, 12, 12)).astype(np.float32))
        for tree in desk_forest.trees[:2]:
            leaf_map = tree.route_all(stack)
            for y in range(0, 12, 3):
                for x in range(0, 12, 3):
                    assert leaf_map[y, x] == tree.route(stack, (x, y))


class TestSerialization:
    def test_round_trip_bit_exact_predictions(self, desk_forest, tmp_path, rng):
        path = tmp_path / "f.acpf"
        forest.save_forest(desk_forest, path)
        loaded = forest.load_forest(path)
        stack = FeatureStack(rng.normal(size=(3, 16, 16)).astype(np.float32))
        from acps import unary

        maps_a = unary.vote_maps(desk_forest, stack)
        maps_b = unary.vote_maps(loaded, stack)
        for a, b in zip(maps_a, maps_b):
            assert np.array_equal(a.values, b.values)

    def test_save_is_idempotent(self, desk_forest, tmp_path):
        forest.save_forest(desk_forest, tmp_path / "a.acpf")
        forest.save_forest(
            forest.load_forest(tmp_path / "a.acpf"), tmp_path / "b.acpf"
        )
        assert (tmp_path / "a.acpf").read_bytes() == (
            tmp_path / "b.acpf"
        ).read_bytes()

    def test_version_mismatch(self, desk_forest, tmp_path):
        path = tmp_path / "f.acpf"
        forest.save_forest(desk_forest, path)
        raw = bytearray(path.read_bytes())
        raw[6] = 99  # version field follows the 6-byte magic
        (tmp_path / "v.acpf").write_bytes(bytes(raw))
        with pytest.raises(ForestVersionError):
            forest.load_forest(tmp_path / "v.acpf")

    def test_truncated_file(self, desk_forest, tmp_path):
        path = tmp_path / "f.acpf"
        forest.save_forest(desk_forest, path)
        raw = path.read_bytes()
        (tmp_path / "cut.acpf").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(ForestCorruptError):
            forest.load_forest(tmp_path / "cut.acpf")

    def test_half_split_preserved(self, desk_forest, tmp_path):
        path = tmp_path / "f.acpf"
        forest.save_forest(desk_forest, path)
        loaded = forest.load_forest(path)
        assert loaded.tree_half == desk_forest.tree_half
        assert len(loaded.half(0).trees) == 2
        assert len(loaded.half(1).trees) == 2
