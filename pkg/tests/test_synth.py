import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from vislocuq.errormodel import cross_validate
from vislocuq.matcher import SyntheticMatcher, SyntheticMatcherConfig
from vislocuq.synth import (
    DESCRIPTOR_DIM,
    CorruptionSpec,
    DescriptorConfig,
    RouteSpec,
    TraversalSpec,
    arclength_fraction,
    corrupt,
    default_route,
    generate_traversal,
    make_paper_scenario,
)

LINE = RouteSpec(np.array([[0.0, 0.0], [100.0, 0.0]]))


def test_frame_count_inclusive():
    trav = generate_traversal(LINE, TraversalSpec("sunny"))
    assert len(trav) == 101


def test_zero_noise_lies_on_route():
    trav = generate_traversal(
        default_route(200.0), TraversalSpec("night", gps_jitter_sigma=0.0, lateral_offset_sigma=0.0)
    )
    pts, heading = default_route(200.0).at(np.arange(len(trav), dtype=float))
    assert_allclose(trav.positions, pts, atol=1e-9)
    assert_allclose(trav.headings, heading, atol=1e-12)


def test_same_seed_same_frames():
    spec = TraversalSpec("snowy", traversal_id=4, rng_seed=11, along_track_jitter=0.3)
    assert generate_traversal(LINE, spec) == generate_traversal(LINE, spec)


def test_frame_layout():
    trav = generate_traversal(LINE, TraversalSpec("sunny", traversal_id=3, speed=5.0))
    assert trav.descriptors.shape == (101, DESCRIPTOR_DIM)
    assert_allclose(np.diff(trav.times), 0.2)
    assert trav.frame_ids[0] == 3_000_000


def test_spec_validation():
    with pytest.raises(ValueError):
        RouteSpec(np.array([[0.0, 0.0]]))
    with pytest.raises(ValueError):
        RouteSpec(np.array([[0.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        TraversalSpec("sunny", sample_spacing=0.0)
    with pytest.raises(ValueError):
        TraversalSpec("sunny", gps_jitter_sigma=-1.0)
    with pytest.raises(ValueError):
        CorruptionSpec((0.5, 0.5))
    with pytest.raises(ValueError):
        CorruptionSpec(mode="fog")
    with pytest.raises(ValueError):
        DescriptorConfig(outlier_rate=1.0)


def test_scenario_layout(small_scenario):
    dbs, queries = small_scenario
    assert len(dbs) == 9 and len(queries) == 3
    conds = [d.condition for d in dbs]
    for c in ("sunny", "night", "snowy"):
        assert conds.count(c) == 3
    assert sorted(q.condition for q in queries) == ["night", "snowy", "sunny"]
    assert all(abs(len(q) - 300) <= 2 for q in queries)


def test_scenario_is_deterministic():
    a = make_paper_scenario(3, route_length=100.0)
    b = make_paper_scenario(3, route_length=100.0)
    assert all(x == y for x, y in zip(a.databases + a.queries, b.databases + b.queries))
    c = make_paper_scenario(4, route_length=100.0)
    assert a.databases[0] != c.databases[0]


@pytest.fixture(scope="module")
def query():
    return generate_traversal(default_route(1000.0), TraversalSpec("sunny", traversal_id=10))


class TestCorruption:
    def test_fraction(self, query):
        out = corrupt(query, CorruptionSpec((0.0, 0.05)))
        frac = np.count_nonzero(out.corruption) / len(out)
        assert frac == pytest.approx(0.05, abs=0.003)
        assert_allclose(out.corruption[out.corruption > 0], 0.95)

    def test_contiguous_segment(self, query):
        out = corrupt(query, CorruptionSpec((0.45, 0.5), "saltpepper_like"))
        idx = np.flatnonzero(out.corruption)
        assert_array_equal(idx, np.arange(idx[0], idx[-1] + 1))
        f = arclength_fraction(query)[idx]
        assert f.min() >= 0.45 and f.max() < 0.5

    def test_severity_zero(self, query):
        assert corrupt(query, CorruptionSpec(severity=0.0)) is query

    def test_fewer_matches_than_twin(self, query):
        quiet = SyntheticMatcher(SyntheticMatcherConfig(noise_sigma=0.0))
        out = corrupt(query, CorruptionSpec((0.0, 0.1)))
        db = generate_traversal(default_route(1000.0), TraversalSpec("sunny", traversal_id=1, rng_seed=5))
        idx = np.flatnonzero(out.corruption)[:30]
        clean = np.array([quiet.match(query[i], db[i]).n_kpm for i in idx])
        dirty = np.array([quiet.match(out[i], db[i]).n_kpm for i in idx])
        assert np.all(clean > 0)
        assert np.all(dirty < clean)

    @given(st.floats(0.0, 0.9), st.floats(0.01, 0.1))
    def test_fraction_tracks_segment(self, start, width):
        q = generate_traversal(LINE, TraversalSpec("sunny", traversal_id=10, gps_jitter_sigma=0.0))
        out = corrupt(q, CorruptionSpec((start, start + width)))
        frac = np.count_nonzero(out.corruption) / len(out)
        assert abs(frac - width) <= 2.0 / len(out)


def test_cross_condition_structure(small_scenario):
    dbs, _ = small_scenario
    samples = cross_validate(dbs)
    cond = {d.traversal_id: d.condition for d in dbs}
    sunny_db = [t for t, c in cond.items() if c == "sunny"]
    night_q, same_q = [], []
    for t in sunny_db:
        s = samples[t]
        qc = np.array([cond[int(q)] for q in s.query_traversal_id])
        night_q.append((s.n_kpm[qc == "night"], s.error_norm[qc == "night"]))
        same_q.append((s.n_kpm[qc == "sunny"], s.error_norm[qc == "sunny"]))
    n_night, e_night = map(np.concatenate, zip(*night_q))
    n_same, e_same = map(np.concatenate, zip(*same_q))
    assert len(n_night) >= 1000 and len(n_same) >= 1000
    assert np.median(n_night) < np.median(n_same)
    assert np.median(e_night) > np.median(e_same)
