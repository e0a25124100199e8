import numpy as np
import pytest

from acps import pairwise
from acps.core import ActionPrior, KinematicTree, Pose
from acps.pairwise import (
    COV_EIGENVALUE_FLOOR,
    DeformationCluster,
    eval_cluster,
    fit_conditional_pairwise,
    fit_pairwise,
    load_conditional_pairwise,
    log_eval_cluster,
    save_conditional_pairwise,
)


def two_joint_tree():
    return KinematicTree(("a", "b"), (("b", "a"),), "a")


def poses_from_offsets(offsets):
    """Parent at origin, child at the offset."""
    return [
        Pose(np.array([[0.0, 0.0], [dx, dy]]), frame_index=i)
        for i, (dx, dy) in enumerate(offsets)
    ]


class TestEvalCluster:
    def cluster(self, mean=(0.0, 0.0), cov=None, w=1.0):
        cov = np.eye(2) if cov is None else np.asarray(cov, dtype=float)
        return DeformationCluster(np.asarray(mean, dtype=float), cov, w, 0)

    def test_at_mean_returns_weight(self):
        c = self.cluster(mean=(3.0, -1.0), w=0.37)
        assert eval_cluster(c, (3.0, -1.0)) == pytest.approx(0.37)

    def test_mahalanobis_sqrt2(self):
        c = self.cluster()
        assert eval_cluster(c, (1.0, 1.0)) == pytest.approx(np.exp(-1.0))

    def test_reflection_symmetry(self, rng):
        for _ in range(20):
            mean = rng.normal(size=2)
            a = rng.normal(size=(2, 2))
            c = self.cluster(mean, a @ a.T + 0.5 * np.eye(2),
                             float(rng.uniform(0.1, 2.0)))
            d = rng.normal(size=2) * 3
            assert eval_cluster(c, d) == pytest.approx(
                eval_cluster(c, 2 * mean - d), rel=1e-12
            )

    def test_bounded_by_weight(self, rng):
        c = self.cluster(w=0.8)
        for _ in range(50):
            d = rng.normal(size=2) * 5
            assert eval_cluster(c, d) <= 0.8 + 1e-15
        assert eval_cluster(c, (0.0, 0.0)) == pytest.approx(0.8)

    def test_log_eval_matches_log_of_eval(self, rng):
        c = self.cluster(mean=(1.0, 2.0), cov=[[2.0, 0.3], [0.3, 1.0]], w=0.5)
        for _ in range(20):
            d = rng.normal(size=2) * 4
            assert log_eval_cluster(c, d) == pytest.approx(
                np.log(eval_cluster(c, d))
            )

    def test_log_eval_safe_far_from_mean(self):
        c = self.cluster(cov=1e-4 * np.eye(2))
        assert np.isfinite(log_eval_cluster(c, (100.0, 100.0)))


class TestFitting:
    def test_single_gaussian_recovery(self):
        rng = np.random.default_rng(0)
        true_mean = np.array([0.0, 30.0])
        true_cov = np.diag([4.0, 9.0])
        offsets = rng.multivariate_normal(true_mean, true_cov, size=10_000)
        model = fit_pairwise(
            poses_from_offsets(offsets), [0] * len(offsets),
            two_joint_tree(), k=1, seed=0,
        )
        (cluster,) = model.edge("b", "a")
        assert np.abs(cluster.mean - true_mean).max() < 0.2
        assert cluster.cov[0, 0] == pytest.approx(4.0, rel=0.15)
        assert cluster.cov[1, 1] == pytest.approx(9.0, rel=0.15)
        assert abs(cluster.cov[0, 1]) < 0.15 * np.sqrt(4.0 * 9.0)
        assert cluster.weight == pytest.approx(1.0)

    def test_alpha_weights_are_frequency_powers(self):
        offsets = [(0.0, 0.0)] * 75 + [(20.0, 20.0)] * 25
        offsets = [
            (x + 0.01 * i, y + 0.013 * i) for i, (x, y) in enumerate(offsets)
        ]
        model = fit_pairwise(
            poses_from_offsets(offsets), [0] * 100, two_joint_tree(),
            k=2, alpha=0.1, seed=0,
        )
        weights = sorted(c.weight for c in model.edge("b", "a"))
        assert weights[0] == pytest.approx(0.25**0.1, abs=1e-9)
        assert weights[1] == pytest.approx(0.75**0.1, abs=1e-9)

    def test_hard_prior_degenerate_cluster(self):
        offsets = [(5.0, 5.0)] * 10 + [(1.0, 2.0), (3.0, 4.0), (-1.0, 0.0)]
        labels = [0] * 10 + [1] * 3
        prior = ActionPrior.one_hot(0, 2)
        model = fit_pairwise(
            poses_from_offsets(offsets), labels, two_joint_tree(), k=1,
            prior=prior, seed=0,
        )
        (cluster,) = model.edge("b", "a")
        assert np.allclose(cluster.mean, [5.0, 5.0])
        assert np.linalg.eigvalsh(cluster.cov).min() == pytest.approx(
            COV_EIGENVALUE_FLOOR
        )

    def test_uniform_prior_equals_unweighted_fit(self, rng):
        offsets = rng.normal(size=(60, 2)) * np.array([3.0, 6.0]) + [0, 20]
        labels = rng.integers(0, 2, size=60)
        poses = poses_from_offsets(offsets)
        plain = fit_pairwise(poses, labels, two_joint_tree(), k=3, seed=4)
        uniform = fit_pairwise(
            poses, labels, two_joint_tree(), k=3,
            prior=ActionPrior.uniform(2), seed=4,
        )
        for c_plain, c_uni in zip(plain.edge("b", "a"), uniform.edge("b", "a")):
            np.testing.assert_allclose(c_plain.mean, c_uni.mean, atol=1e-9)
            np.testing.assert_allclose(c_plain.cov, c_uni.cov, atol=1e-9)
            assert c_plain.weight == pytest.approx(c_uni.weight, abs=1e-9)

    def test_covariances_pass_floor(self, rng):
        offsets = rng.normal(size=(40, 2))
        model = fit_pairwise(
            poses_from_offsets(offsets), [0] * 40, two_joint_tree(), k=4,
            seed=1,
        )
        for cluster in model.edge("b", "a"):
            assert np.linalg.eigvalsh(cluster.cov).min() >= (
                COV_EIGENVALUE_FLOOR * (1 - 1e-12)
            )

    def test_too_few_distinct_offsets(self):
        offsets = [(1.0, 1.0)] * 10 + [(2.0, 2.0)] * 10
        with pytest.raises(ValueError, match="smaller k"):
            fit_pairwise(
                poses_from_offsets(offsets), [0] * 20, two_joint_tree(), k=5,
            )

    def test_restart_monotonicity(self, rng):
        from acps.kmeans import weighted_kmeans

        points = rng.normal(size=(50, 2))
        _, _, obj1 = weighted_kmeans(points, 4, restarts=1, seed=13)
        _, _, obj8 = weighted_kmeans(points, 4, restarts=8, seed=13)
        assert obj8 <= obj1 + 1e-12


class TestConditionalModel:
    def sample_problem(self, rng):
        n = 120
        labels = rng.integers(0, 2, size=n)
        offsets = np.where(
            labels[:, None] == 0,
            rng.normal(size=(n, 2)) * 2 + [0, 15],
            rng.normal(size=(n, 2)) * 2 + [0, -15],
        )
        return poses_from_offsets(offsets), labels

    def test_condition_none_matches_plain_fit(self, rng):
        poses, labels = self.sample_problem(rng)
        cond = fit_conditional_pairwise(
            poses, labels, two_joint_tree(), ("a0", "a1"), k=2, seed=3
        )
        pooled = cond.condition(None)
        uniform = cond.condition(ActionPrior.uniform(2))
        for c_a, c_b in zip(pooled.edge("b", "a"), uniform.edge("b", "a")):
            np.testing.assert_allclose(c_a.mean, c_b.mean, atol=1e-9)
            np.testing.assert_allclose(c_a.cov, c_b.cov, atol=1e-9)
            assert c_a.weight == pytest.approx(c_b.weight, abs=1e-9)

    def test_hard_condition_is_per_action_fit(self, rng):
        poses, labels = self.sample_problem(rng)
        cond = fit_conditional_pairwise(
            poses, labels, two_joint_tree(), ("a0", "a1"), k=2, seed=3
        )
        hard = cond.condition(ActionPrior.one_hot(0, 2))
        assert hard is cond.hard_models[0]
        # Dedicated fit concentrates near the action's own offset mode.
        means = np.array([c.mean for c in hard.edge("b", "a")])
        assert np.all(np.abs(means[:, 1] - 15) < 6)

    def test_soft_condition_interpolates(self, rng):
        poses, labels = self.sample_problem(rng)
        cond = fit_conditional_pairwise(
            poses, labels, two_joint_tree(), ("a0", "a1"), k=2, seed=3
        )
        soft = cond.condition(ActionPrior(np.array([0.9, 0.1])))
        total_mass = sum(c.weight for c in soft.edge("b", "a"))
        assert total_mass > 0
        assert soft.prior_desc == "soft"

    def test_round_trip_bit_exact(self, rng, tmp_path):
        poses, labels = self.sample_problem(rng)
        cond = fit_conditional_pairwise(
            poses, labels, two_joint_tree(), ("a0", "a1"), k=2, seed=3
        )
        save_conditional_pairwise(cond, tmp_path / "p.txt")
        loaded = load_conditional_pairwise(tmp_path / "p.txt")
        save_conditional_pairwise(loaded, tmp_path / "q.txt")
        assert (tmp_path / "p.txt").read_bytes() == (
            tmp_path / "q.txt"
        ).read_bytes()
        for edge in cond.stats:
            for s1, s2 in zip(cond.stats[edge], loaded.stats[edge]):
                assert np.array_equal(s1.count, s2.count)
                assert np.array_equal(s1.first, s2.first)
                assert np.array_equal(s1.second, s2.second)

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "x.txt").write_text("WRONG\n")
        with pytest.raises(pairwise.core.BadMagicError):
            load_conditional_pairwise(tmp_path / "x.txt")
