import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from vislocuq.core import Traversal
from vislocuq.errormodel import (
    CONFIDENCE_GRID,
    BinnedErrorModel,
    ErrorModelSet,
    ModelFileError,
    bin_index,
    cross_validate,
    empirical_sigma,
    fit_model,
    snap_confidence,
)
from vislocuq.matcher import SyntheticMatcher, SyntheticMatcherConfig
from vislocuq.retrieval import Prediction

from conftest import straight_traversal
from oracles import brute_sigma

quiet = SyntheticMatcher(SyntheticMatcherConfig(noise_sigma=0.0))


class TestBinIndex:
    @pytest.mark.parametrize("n, expected", [(0, 0), (150, 0), (199, 0), (200, 1), (1234, 6)])
    def test_examples(self, n, expected):
        assert bin_index(n, 200) == expected

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            bin_index(-1, 200)
        with pytest.raises(ValueError):
            bin_index(5, 0)

    @given(st.integers(0, 10**6), st.integers(1, 1000))
    def test_half_open(self, n, w):
        i = bin_index(n, w)
        assert w * i <= n < w * (i + 1)


class TestEmpiricalSigma:
    def test_examples(self):
        assert empirical_sigma(list(range(1, 11)), 0.9) == 9
        assert empirical_sigma([3.0, 1.0, 7.0], 1.0) == 7.0
        assert empirical_sigma([2.5] * 9, 0.35) == 2.5

    def test_empty(self):
        with pytest.raises(ValueError):
            empirical_sigma([], 0.5)
        with pytest.raises(ValueError):
            empirical_sigma([1.0], 0.0)

    @given(
        st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=60),
        st.sampled_from(CONFIDENCE_GRID),
    )
    def test_matches_oracle(self, errors, c):
        assert empirical_sigma(errors, c) == brute_sigma(errors, c)

    @given(st.lists(st.floats(0, 100), min_size=1, max_size=60))
    def test_monotone_in_c(self, errors):
        vals = [empirical_sigma(errors, c) for c in CONFIDENCE_GRID]
        assert vals == sorted(vals)


def test_snap_confidence():
    assert snap_confidence(0.93) == 0.95
    assert snap_confidence(0.95) == 0.95
    assert snap_confidence(0.68) == 0.7
    with pytest.raises(ValueError, match="exceeds"):
        snap_confidence(0.995)


def _model_from(n, err, **kw):
    err = np.asarray(err, dtype=np.float64)
    y = np.column_stack([err, np.zeros_like(err)])
    return BinnedErrorModel(**kw).fit(np.asarray(n), y)


class TestFit:
    def test_single_bin(self):
        m = _model_from(np.full(30, 50), np.linspace(0, 1, 30))
        assert len(m.bins_) == 1 and m.bins_[0].hi is None and m.bins_[0].lo == 0

    def test_sparse_bins_merge_downward_and_lowest_upward(self):
        # bin 0: 5 samples, bin 1: 25, bin 2: 3, bin 3: 30
        n = np.concatenate([np.full(5, 10), np.full(25, 250), np.full(3, 450), np.full(30, 650)])
        m = _model_from(n, np.arange(len(n), dtype=float))
        spans = [(b.lo, b.hi, b.samples) for b in m.bins_]
        assert spans == [(0, 600, 33), (600, None, 30)]
        assert sum(b.samples for b in m.bins_) == len(n)

    def test_lookup_paths(self):
        n = np.concatenate([np.full(40, 100), np.full(40, 300)])
        err = np.concatenate([np.full(40, 5.0), np.full(40, 1.0)])
        m = _model_from(n, err)
        assert m.predict([150], 0.9)[0] == 5.0
        assert m.predict([5000], 0.9)[0] == 1.0
        assert m.predict([150], 0.93)[0] == m.predict([150], 0.95)[0]

    def test_insufficient_samples_named(self):
        with pytest.raises(ValueError, match="short by 5"):
            _model_from(np.full(15, 10), np.ones(15))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        n = rng.integers(0, 2000, 500)
        y = rng.normal(size=(500, 2))
        perm = rng.permutation(500)
        a = BinnedErrorModel().fit(n, y)
        b = BinnedErrorModel().fit(n[perm], y[perm])
        # quantiles are order statistics; covariances agree up to summation order
        assert [(x.lo, x.hi, x.samples) for x in a.bins_] == [(z.lo, z.hi, z.samples) for z in b.bins_]
        for x, z in zip(a.bins_, b.bins_):
            assert x.sigma_curve == z.sigma_curve
            assert_allclose(x.R_ego, z.R_ego, rtol=1e-12, atol=1e-15)

    def test_covariance_recovery(self):
        rng = np.random.default_rng(2)
        truth = [np.array([[4.0, 1.0], [1.0, 2.0]]), np.array([[0.5, -0.2], [-0.2, 0.3]])]
        n = np.concatenate([np.full(1000, 100), np.full(1000, 300)])
        y = np.concatenate([rng.multivariate_normal([0, 0], c, 1000) for c in truth])
        m = BinnedErrorModel().fit(n, y)
        for b, c in zip(m.bins_, truth):
            assert np.linalg.norm(b.R_ego - c) / np.linalg.norm(c) < 0.15

    @given(
        st.lists(st.tuples(st.integers(0, 2500), st.floats(0, 50)), min_size=20, max_size=200)
    )
    def test_invariants(self, data):
        n, err = map(np.array, zip(*data))
        m = _model_from(n, err)
        assert m.bins_[0].lo == 0 and m.bins_[-1].hi is None
        for a, b in zip(m.bins_, m.bins_[1:]):
            assert a.hi == b.lo
        assert sum(b.samples for b in m.bins_) == len(n)
        for b in m.bins_:
            assert b.samples >= 20
            curve = [b.sigma_curve[c] for c in sorted(b.sigma_curve)]
            assert curve == sorted(curve)
            assert np.linalg.eigvalsh(b.R_ego)[0] > 0


class TestCrossValidate:
    def test_sample_counts(self):
        dbs = [straight_traversal(1, 100), straight_traversal(2, 100, offset=0.3)]
        out = cross_validate(dbs, matcher=quiet)
        assert sorted(out) == [1, 2]
        assert len(out[1]) == len(out[2]) == 100
        assert set(out[1].query_traversal_id) == {2}

    def test_needs_two(self):
        with pytest.raises(ValueError, match="multiple traversals"):
            cross_validate([straight_traversal(1, 10)])

    def test_duplicates_give_zero_error(self):
        a = straight_traversal(1, 60)
        b = Traversal(2, [replace(f, frame_id=f.frame_id + 500, traversal_id=2) for f in a])
        out = cross_validate([a, b], matcher=quiet)
        assert all(np.all(s.error_norm == 0) for s in out.values())
        models = ErrorModelSet.from_samples(out)
        for m in models.values():
            assert all(v == 0 for b in m.bins_ for v in b.sigma_curve.values())

    def test_error_norm_matches_ego(self, small_scenario):
        dbs, _ = small_scenario
        s = cross_validate(dbs[:3])[dbs[0].traversal_id]
        for sample in list(s)[:50]:
            assert sample.error_norm == pytest.approx(math.hypot(*sample.error_ego), abs=1e-9)


@pytest.fixture(scope="module")
def models(small_scenario):
    return ErrorModelSet.calibrate(small_scenario.databases)


class TestModelSet:
    def test_nine_models(self, models):
        assert sorted(models) == list(range(1, 10))

    def test_round_trip_is_exact(self, models, tmp_path):
        path = tmp_path / "m.json"
        models.save(path)
        back = ErrorModelSet.load(path)
        assert back == models
        assert back.dumps() == models.dumps()

    def test_empty_set(self):
        doc = json.loads(ErrorModelSet().dumps())
        assert doc == {"bin_width": 200, "models": []}
        assert ErrorModelSet.loads(ErrorModelSet().dumps()) == ErrorModelSet()

    def test_overlapping_bins_rejected(self, models):
        doc = models.to_dict()
        bins = doc["models"][0]["bins"]
        if len(bins) < 2:
            pytest.skip("needs two bins")
        bins[1]["lo"] = bins[0]["lo"]
        with pytest.raises(ModelFileError, match=r"\$\.models\[0\]\.bins"):
            ErrorModelSet.from_dict(doc)

    def test_malformed_json_location(self):
        with pytest.raises(ModelFileError, match="line 1 column"):
            ErrorModelSet.loads("{bad")

    def test_lookup(self, models):
        pred = Prediction(0, (0.0, 0.0), 3, 0, 150, 0.0)
        sigma, r = models.lookup(pred, 0.93)
        b = models[3].bin_for(150)
        assert sigma == b.sigma_curve[0.95]
        assert np.array_equal(r, b.R_ego)
        with pytest.raises(KeyError, match="no sensor error model"):
            models.lookup(Prediction(0, (0.0, 0.0), 42, 0, 150, 0.0), 0.5)

    def test_lookup_arrays_match_scalar(self, models):
        tids = np.array([1, 5, 9, 5])
        n = np.array([0, 799, 1999, 2000])
        sig, cov, grid = models.lookup_arrays(tids, n)
        for i in range(4):
            b = models[tids[i]].bin_for(n[i])
            assert_allclose(sig[i], [b.sigma_curve[c] for c in grid])
            assert np.array_equal(cov[i], b.R_ego)
