import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustaug.data import LabeledDataset, synth_generate
from robustaug.evaluation import (
    CSV_COLUMNS,
    MetricsReport,
    accuracy_under,
    full_report,
    invariance_score,
    overlap_scores,
    robust_accuracy,
    write_csv,
)
from robustaug.models import ModelSpec, build_model
from robustaug.transforms import IDENTITY, Transform, TransformFamily, make_family

DUP_FAMILY = TransformFamily("dup", (IDENTITY, Transform("identity", (), "identity-dup")), vertex_plus=1)


def brute_force_overlap(emb):
    """Direct loops over the member-major pool; no vectorisation."""
    t, m, _ = emb.shape
    pool = [(a, s) for a in range(t) for s in range(m)]
    scores = []
    for qa, qs in pool:
        dists = []
        for idx, (a, s) in enumerate(pool):
            dists.append((float(np.abs(emb[qa, qs] - emb[a, s]).sum()), idx))
        top = [pool[idx] for _, idx in sorted(dists)[:t]]
        scores.append(sum(1 for _, s in top if s == qs) / t)
    return np.array(scores)


class TestOverlap:
    def test_transformed_copies_nearer_other_source(self):
        # source 0 at 0 moves to 9, source 1 at 10 moves to 1
        emb = np.array([[[0.0], [10.0]], [[9.0], [1.0]]])
        np.testing.assert_array_equal(brute_force_overlap(emb), [0.5] * 4)
        assert overlap_scores(emb, 2).mean() == 0.5

    def test_fully_invariant_embedding(self):
        src = np.random.default_rng(0).normal(size=(6, 4))
        emb = np.stack([src] * 3)
        assert overlap_scores(emb, 3).mean() == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 4), st.integers(1, 5), st.integers(0, 2**31 - 1))
    def test_matches_brute_force(self, t, m, seed):
        rng = np.random.default_rng(seed)
        # coarse integer grid so that ties actually occur
        emb = rng.integers(0, 3, size=(t, m, 2)).astype(float)
        np.testing.assert_array_equal(overlap_scores(emb, t), brute_force_overlap(emb))

    def test_family_size_mismatch(self):
        with pytest.raises(ValueError):
            overlap_scores(np.zeros((2, 3, 1)), 3)


def _random_setup(seed):
    rng = np.random.default_rng(seed)
    size = 16
    ds = synth_generate(seed, 6, k=4, size=size)
    model = build_model(ModelSpec("mlp", (size, size, 1), 4, seed=int(rng.integers(1 << 30))))
    fam = make_family(str(rng.choice(["rotation", "contrast", "texture"])))
    return model, ds, fam


@pytest.mark.parametrize("seed", range(50))
def test_invariance_within_bounds_for_random_models(seed):
    model, ds, fam = _random_setup(seed)
    score = invariance_score(model, ds, fam, per_class_count=5, seed=seed)
    assert 1 / len(fam) - 1e-12 <= score <= 1.0


def test_robust_is_below_every_member_accuracy():
    for seed in range(5):
        model, ds, fam = _random_setup(seed)
        per: list = []
        robust = robust_accuracy(model, ds, fam, per)
        assert len(per) == len(fam)
        assert all(robust <= p for p in per)


def _constant_model(shape, k):
    """Predicts class 0 for every input."""
    model = build_model(ModelSpec("mlp", shape, k))
    for name in ("fc2.w", "fc2.b"):
        model.params.params[name][:] = 0
    model.params.params["fc2.b"][0] = 5.0
    return model


class TestAccuracy:
    def test_constant_prediction_gives_base_rate(self):
        ds = synth_generate(0, 10, k=5, size=16)
        model = _constant_model((16, 16, 1), 5)
        assert accuracy_under(model, ds, IDENTITY) == pytest.approx(0.2)

    def test_single_member_family_robust_is_clean(self):
        model, ds, _ = _random_setup(1)
        fam = TransformFamily("solo", (IDENTITY, Transform("pixel_affine", (1, 0), "copy")), vertex_plus=1)
        assert robust_accuracy(model, ds, fam) == accuracy_under(model, ds, IDENTITY)

    def test_one_flip_counts_as_wrong(self):
        ds = LabeledDataset(np.zeros((1, 4, 4, 1)), np.array([0]), 2)
        model = build_model(ModelSpec("mlp", (4, 4, 1), 2))
        p = model.params.params
        p["fc1.w"][:] = 0
        p["fc1.b"][:] = 0
        p["fc1.w"][:, 0] = 1.0  # hidden unit 0 = pixel sum
        p["fc2.w"][:] = 0
        p["fc2.w"][0, 1] = 1.0
        p["fc2.b"][:] = [0.5, 0.0]
        # zeros -> class 0; 1-x makes the pixel sum 16 -> class 1
        fam = TransformFamily("t", (IDENTITY, Transform("pixel_affine", (0.5, 0)), Transform("pixel_affine", (-1, 1))), 2)
        per: list = []
        assert robust_accuracy(model, ds, fam, per) == 0.0
        assert per == [1.0, 1.0, 0.0]


class TestFullReport:
    def test_duplicate_identity_family_collapses(self):
        model, ds, _ = _random_setup(2)
        rep = full_report(model, ds, DUP_FAMILY, per_class_count=4)
        assert rep.clean == rep.vertex == rep.all == rep.robust
        assert rep.beyond is None

    def test_duplicating_samples_leaves_metrics_unchanged(self):
        model, ds, fam = _random_setup(3)
        twice = LabeledDataset(np.concatenate([ds.images, ds.images]), np.concatenate([ds.labels, ds.labels]), ds.num_classes)
        a = full_report(model, ds, fam, per_class_count=5, seed=7)
        b = full_report(model, twice, fam, per_class_count=5, seed=7)
        assert a.to_json() == b.to_json()

    def test_deterministic(self):
        model, ds, fam = _random_setup(4)
        assert full_report(model, ds, fam, per_class_count=5).to_json() == full_report(model, ds, fam, per_class_count=5).to_json()

    def test_vertex_and_beyond_are_means(self):
        model, ds, _ = _random_setup(5)
        fam = make_family("rotation")
        rep = full_report(model, ds, fam, per_class_count=None)
        names = fam.names
        assert rep.vertex == pytest.approx((rep.per_transform[names[fam.vertex_plus]] + rep.clean) / 2)
        assert rep.all == pytest.approx(np.mean(list(rep.per_transform.values())))
        assert rep.beyond == pytest.approx(np.mean(list(rep.per_beyond.values())))
        assert rep.invariance is None

    def test_too_few_samples_names_class(self):
        model, ds, fam = _random_setup(6)
        with pytest.raises(ValueError, match="class 0"):
            invariance_score(model, ds, fam, per_class_count=7)


def test_csv_column_order(tmp_path):
    rep = MetricsReport(0.9, 0.5, 0.7, 0.8, None, 0.4, strategy="RWA", family="rotation", lam=1.0, seed=0)
    text = write_csv([rep], tmp_path / "m.csv")
    header, row = text.strip().split("\n")
    assert tuple(header.split(",")) == CSV_COLUMNS
    assert row == "RWA,rotation,1.0,0,0.9,0.5,0.7,0.8,,0.4"
    assert json.loads(rep.to_json())["robust"] == 0.5
