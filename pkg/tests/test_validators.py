import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustaug.data import synth_generate
from robustaug.models import ModelSpec, build_model
from robustaug.transforms import IDENTITY, Transform, TransformFamily, make_family
from robustaug.validators import (
    a2_fraction,
    a2_holds,
    a6_fraction,
    a6_holds,
    exact_w1,
    format_table,
    greedy_w1,
    paired_distance,
    validate,
    w1_estimates,
)


def colocated_pairs(rng, n, d=10, spread=100.0, jitter=0.01):
    centres = rng.uniform(0, spread, size=(n, d))
    return centres, centres + rng.uniform(-jitter, jitter, size=(n, d))


def l1(a, b):
    return float(np.abs(a - b).sum())


class TestA2:
    def test_colocated_pairs_all_hold(self):
        orig, moved = colocated_pairs(np.random.default_rng(0), 20)
        assert a2_holds(orig, moved).all()

    def test_swapped_pairs_fail(self):
        orig = np.array([[0.0], [10.0]])
        assert not a2_holds(orig, orig[::-1]).any()

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            a2_holds(np.zeros((1, 3)), np.zeros((1, 3)))


class TestW1:
    def test_identical_embeddings_zero(self):
        x = np.random.default_rng(0).uniform(size=(5, 4))
        assert paired_distance(x, x) == greedy_w1(x, x) == exact_w1(x, x) == 0.0

    def test_three_points_against_all_six_permutations(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
            costs = [l1(a[0], b[p[0]]) + l1(a[1], b[p[1]]) + l1(a[2], b[p[2]])
                     for p in itertools.permutations(range(3))]
            assert exact_w1(a, b) == pytest.approx(min(costs), abs=1e-12)

    def test_greedy_order_and_ties(self):
        orig = np.array([[0.0], [1.0]])
        moved = np.array([[0.9], [5.0]])
        # sample 0 claims 0.9 first, leaving 5.0 for sample 1
        assert greedy_w1(orig, moved) == pytest.approx(0.9 + 4.0)
        assert exact_w1(orig, moved) == pytest.approx(0.9 + 4.0)

    def test_greedy_can_exceed_paired(self):
        # greedy is a heuristic: here it is worse than the identity matching
        orig = np.array([[0.0], [5.0]])
        moved = np.array([[-1.0], [0.9]])
        assert paired_distance(orig, moved) == pytest.approx(5.1)
        assert greedy_w1(orig, moved) == pytest.approx(6.9)
        assert exact_w1(orig, moved) == pytest.approx(5.1)

    def test_exact_limit(self):
        with pytest.raises(ValueError, match="n <= 8"):
            exact_w1(np.zeros((9, 2)), np.zeros((9, 2)))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**31 - 1))
    def test_exact_lower_bounds_both_estimates(self, n, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(n, 5)), rng.normal(size=(n, 5))
        exact = exact_w1(a, b)
        assert exact <= greedy_w1(a, b) + 1e-12
        assert exact <= paired_distance(a, b) + 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**31 - 1))
    def test_colocated_pairs_all_estimates_agree(self, n, seed):
        orig, moved = colocated_pairs(np.random.default_rng(seed), n)
        p = paired_distance(orig, moved)
        assert abs(p - exact_w1(orig, moved)) <= 1e-9
        assert abs(p - greedy_w1(orig, moved)) <= 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 7), st.integers(0, 2**31 - 1))
    def test_a2_alone_makes_paired_optimal(self, n, seed):
        # each moved point nearest its own source is enough for identity to be optimal
        rng = np.random.default_rng(seed)
        orig = rng.normal(size=(n, 3))
        moved = orig + rng.normal(scale=0.3, size=(n, 3))
        if a2_holds(orig, moved).all():
            assert abs(paired_distance(orig, moved) - exact_w1(orig, moved)) <= 1e-9


class TestA6:
    def test_no_flip_always_holds(self):
        p_family = np.array([[0.9, 0.6], [0.5, 0.6]])
        assert a6_holds(p_family[0], p_family, np.array([1, 2]), np.array([1, 2])).all()

    def test_flip_needs_factor_e(self):
        p_family = np.array([[0.9, 0.9], [0.3, 0.35]])
        ok = a6_holds(p_family[0], p_family, np.array([0, 0]), np.array([1, 1]))
        assert ok.tolist() == [True, False]

    def test_identity_family_is_one(self):
        ds = synth_generate(0, 5, k=4, size=16)
        model = build_model(ModelSpec("mlp", (16, 16, 1), 4))
        fam = TransformFamily("id", (IDENTITY, Transform("identity", (), "identity-dup")), 1)
        assert a6_fraction(model, ds.images, ds.labels, fam) == 1.0


class TestModelLevel:
    ds = synth_generate(1, 4, k=4, size=16)
    model = build_model(ModelSpec("mlp", (16, 16, 1), 4, seed=2))

    def test_identity_transform(self):
        assert a2_fraction(self.model, self.ds.images, IDENTITY) == 1.0
        paired, greedy, exact = w1_estimates(self.model, self.ds.images[:6], IDENTITY)
        assert paired == greedy == exact == 0.0

    def test_exact_omitted_for_large_sets(self):
        assert w1_estimates(self.model, self.ds.images, Transform("rotate", (60,)))[2] is None

    def test_report_and_table(self):
        fam = make_family("rotation")
        rep = validate(self.model, self.ds.images, self.ds.labels, fam[fam.vertex_plus], fam, name="base")
        assert 0 <= rep.a2_frequency <= 1 and 0 <= rep.a6_frequency <= 1
        assert rep.ratio == pytest.approx(rep.paired_distance / rep.greedy_w1)
        table = format_table([rep])
        assert table.splitlines()[0].split() == ["base"]
        assert "Paired/Wasserstein" in table
