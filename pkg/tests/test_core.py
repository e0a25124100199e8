import numpy as np
import pytest

from acps import core
from acps.core import (
    ActionPrior,
    BadMagicError,
    FeatureStack,
    FormatError,
    KinematicTree,
    NonFiniteValueError,
    Pose,
    TruncatedError,
    VideoAnnotation,
    build_pyramid,
    load_annotation,
    load_feature_stack,
    save_annotation,
    save_feature_stack,
    validate_tree,
)


class TestFstkFormat:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        stack = FeatureStack(rng.normal(size=(2, 4, 4)).astype(np.float32))
        save_feature_stack(stack, tmp_path / "s.fstk")
        loaded = load_feature_stack(tmp_path / "s.fstk")
        assert loaded.data.tobytes() == stack.data.tobytes()
        assert (loaded.width, loaded.height, loaded.channels) == (4, 4, 2)

    def test_round_trip_property(self, tmp_path, rng):
        for _ in range(50):
            c, h, w = rng.integers(1, 6, size=3)
            stack = FeatureStack(
                rng.normal(size=(c, h, w)).astype(np.float32)
            )
            save_feature_stack(stack, tmp_path / "p.fstk")
            loaded = load_feature_stack(tmp_path / "p.fstk")
            assert loaded.data.tobytes() == stack.data.tobytes()

    def test_bad_magic(self, tmp_path, rng):
        stack = FeatureStack(rng.normal(size=(1, 3, 3)).astype(np.float32))
        save_feature_stack(stack, tmp_path / "s.fstk")
        raw = bytearray((tmp_path / "s.fstk").read_bytes())
        raw[0] ^= 0xFF
        (tmp_path / "bad.fstk").write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_feature_stack(tmp_path / "bad.fstk")

    def test_truncated_payload(self, tmp_path, rng):
        stack = FeatureStack(rng.normal(size=(2, 4, 4)).astype(np.float32))
        save_feature_stack(stack, tmp_path / "s.fstk")
        raw = (tmp_path / "s.fstk").read_bytes()
        (tmp_path / "cut.fstk").write_bytes(raw[:-5])
        with pytest.raises(TruncatedError):
            load_feature_stack(tmp_path / "cut.fstk")

    def test_trailing_bytes(self, tmp_path, rng):
        stack = FeatureStack(rng.normal(size=(1, 2, 2)).astype(np.float32))
        save_feature_stack(stack, tmp_path / "s.fstk")
        raw = (tmp_path / "s.fstk").read_bytes()
        (tmp_path / "long.fstk").write_bytes(raw + b"xx")
        with pytest.raises(FormatError):
            load_feature_stack(tmp_path / "long.fstk")

    def test_non_finite_payload(self, tmp_path):
        data = np.zeros((1, 2, 2), dtype=np.float32)
        stack = FeatureStack(data)
        save_feature_stack(stack, tmp_path / "s.fstk")
        raw = bytearray((tmp_path / "s.fstk").read_bytes())
        raw[-4:] = np.float32(np.nan).tobytes()
        (tmp_path / "nan.fstk").write_bytes(bytes(raw))
        with pytest.raises(NonFiniteValueError):
            load_feature_stack(tmp_path / "nan.fstk")


class TestPyramid:
    def test_paper_scale_sequence(self, rng):
        stack = FeatureStack(rng.normal(size=(1, 100, 100)).astype(np.float32))
        pyramid = build_pyramid(stack, 4, 0.8)
        assert [lvl.width for lvl in pyramid.levels] == [100, 80, 64, 51]
        assert [lvl.height for lvl in pyramid.levels] == [100, 80, 64, 51]
        factors = [lvl.scale_factor for lvl in pyramid.levels]
        assert np.allclose(factors, [0.8**i for i in range(4)])

    def test_single_level_is_identity(self, rng):
        stack = FeatureStack(rng.normal(size=(2, 10, 10)).astype(np.float32))
        pyramid = build_pyramid(stack, 1, 0.8)
        assert pyramid.count == 1
        assert pyramid.levels[0] is stack

    def test_constant_channel_stays_constant(self):
        stack = FeatureStack(np.full((1, 40, 40), 2.75, dtype=np.float32))
        pyramid = build_pyramid(stack, 3, 0.8)
        for lvl in pyramid.levels:
            assert np.all(lvl.data == 2.75)

    def test_small_level_rejected_with_level_name(self, rng):
        stack = FeatureStack(rng.normal(size=(1, 12, 12)).astype(np.float32))
        with pytest.raises(ValueError, match="level 1"):
            build_pyramid(stack, 3, 0.5)

    def test_factor_bounds(self, rng):
        stack = FeatureStack(rng.normal(size=(1, 12, 12)).astype(np.float32))
        with pytest.raises(ValueError):
            build_pyramid(stack, 2, 1.0)
        with pytest.raises(ValueError):
            build_pyramid(stack, 0, 0.8)


class TestKinematicTree:
    def test_default_tree_is_valid(self):
        assert validate_tree(KinematicTree()) == []

    def test_two_cycle_detected(self):
        tree = KinematicTree.__new__(KinematicTree)
        object.__setattr__(tree, "joints", ("a", "b", "c"))
        object.__setattr__(tree, "edges", (("b", "c"), ("c", "b")))
        object.__setattr__(tree, "root", "a")
        problems = validate_tree(tree)
        assert any("cycle" in p for p in problems)

    def test_multi_parent_detected(self):
        tree = KinematicTree.__new__(KinematicTree)
        object.__setattr__(tree, "joints", ("a", "b", "c"))
        object.__setattr__(tree, "edges", (("b", "a"), ("b", "c")))
        object.__setattr__(tree, "root", "a")
        problems = validate_tree(tree)
        assert any("multiple parents" in p for p in problems)

    def test_disconnection_detected(self):
        tree = KinematicTree.__new__(KinematicTree)
        object.__setattr__(tree, "joints", ("a", "b", "c"))
        object.__setattr__(tree, "edges", (("b", "a"),))
        object.__setattr__(tree, "root", "a")
        problems = validate_tree(tree)
        assert any("not connected" in p or "edges" in p for p in problems)

    def test_constructor_rejects_invalid(self):
        with pytest.raises(ValueError):
            KinematicTree(("a", "b"), (), "a")

    def test_topological_order_parents_first(self):
        tree = KinematicTree()
        order = tree.topological_order()
        seen = set()
        parent = tree.parent_of()
        for joint in order:
            if joint != tree.root:
                assert parent[joint] in seen
            seen.add(joint)

    def test_rerooted_same_undirected_edges(self):
        tree = KinematicTree()
        rerooted = tree.rerooted("l_wrist")
        assert rerooted.root == "l_wrist"
        orig = {frozenset(e) for e in tree.edges}
        new = {frozenset(e) for e in rerooted.edges}
        assert orig == new
        assert validate_tree(rerooted) == []


class TestActionPrior:
    def test_sum_enforced(self):
        with pytest.raises(ValueError):
            ActionPrior(np.array([0.5, 0.6]))

    def test_hard_requires_one_hot(self):
        with pytest.raises(ValueError):
            ActionPrior(np.array([0.5, 0.5]), mode="hard")
        prior = ActionPrior.one_hot(1, 3)
        assert prior.mode == "hard"
        assert prior.probs.tolist() == [0.0, 1.0, 0.0]

    def test_hardened_tie_to_lowest_index(self):
        prior = ActionPrior(np.array([0.4, 0.4, 0.2]))
        assert prior.hardened().probs.tolist() == [1.0, 0.0, 0.0]

    def test_uniform(self):
        assert np.allclose(ActionPrior.uniform(4).probs, 0.25)


class TestAnnotationFormat:
    def _annotation(self, rng):
        frames = tuple(
            Pose(rng.uniform(0, 30, size=(13, 2)), frame_index=t)
            for t in range(3)
        )
        return VideoAnnotation(frames, "wave", (10.0, 11.5, 9.25))

    def test_round_trip(self, tmp_path, rng):
        ann = self._annotation(rng)
        save_annotation(ann, tmp_path / "a.txt")
        loaded = load_annotation(tmp_path / "a.txt")
        assert loaded.action_label == "wave"
        assert loaded.person_size == ann.person_size
        for a, b in zip(loaded.frames, ann.frames):
            assert np.array_equal(a.locations, b.locations)

    def test_round_trip_twice_is_identical(self, tmp_path, rng):
        ann = self._annotation(rng)
        save_annotation(ann, tmp_path / "a.txt")
        save_annotation(load_annotation(tmp_path / "a.txt"), tmp_path / "b.txt")
        assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.txt").write_text("NOPE\n")
        with pytest.raises(BadMagicError):
            load_annotation(tmp_path / "x.txt")

    def test_truncated(self, tmp_path, rng):
        ann = self._annotation(rng)
        save_annotation(ann, tmp_path / "a.txt")
        lines = (tmp_path / "a.txt").read_text().splitlines()
        (tmp_path / "cut.txt").write_text("\n".join(lines[:-3]))
        with pytest.raises(FormatError):
            load_annotation(tmp_path / "cut.txt")

    def test_person_size_must_be_positive(self, rng):
        frames = (Pose(rng.uniform(0, 30, size=(13, 2))),)
        with pytest.raises(ValueError):
            VideoAnnotation(frames, "x", (0.0,))


def test_feature_stack_rejects_non_finite():
    data = np.zeros((1, 2, 2), dtype=np.float32)
    data[0, 0, 0] = np.inf
    with pytest.raises(NonFiniteValueError):
        FeatureStack(data)


def test_pose_shape_checked():
    with pytest.raises(ValueError):
        Pose(np.zeros((13, 3)))
