import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from vislocuq.core import (
    PSD_FLOOR,
    Pose2,
    Traversal,
    as_batch,
    check_unique_frame_ids,
    psd_repair,
    rotate_cov,
    rotation,
    wrap_angle,
)

from conftest import make_frame

finite = st.floats(-1e6, 1e6, allow_nan=False)
angles = st.floats(-50.0, 50.0, allow_nan=False)


@st.composite
def psd2(draw):
    a = draw(st.lists(st.floats(-10, 10), min_size=4, max_size=4))
    m = np.array(a).reshape(2, 2)
    return m @ m.T + PSD_FLOOR * np.eye(2)


class TestWrapAngle:
    @pytest.mark.parametrize(
        "a, expected",
        [(0.0, 0.0), (3 * math.pi, math.pi), (-3.5 * math.pi, 0.5 * math.pi), (-math.pi, math.pi)],
    )
    def test_examples(self, a, expected):
        assert wrap_angle(a) == pytest.approx(expected, abs=1e-12)

    def test_in_range_values_pass_through(self):
        for a in (1e-300, -1e-300, 1.0, -3.0, math.pi):
            assert wrap_angle(a) == a

    def test_non_finite_rejected(self):
        for bad in (math.nan, math.inf):
            with pytest.raises(ValueError):
                wrap_angle(bad)
        with pytest.raises(ValueError):
            wrap_angle(np.array([0.0, math.nan]))

    @given(finite)
    def test_range_and_congruence(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        k = (a - w) / (2 * math.pi)
        assert abs(k - round(k)) < 1e-6

    @given(finite)
    def test_idempotent(self, a):
        assert wrap_angle(wrap_angle(a)) == wrap_angle(a)

    @given(st.lists(finite, min_size=1, max_size=20))
    def test_array_matches_scalar(self, xs):
        out = wrap_angle(np.array(xs))
        assert_array_equal(out, [wrap_angle(x) for x in xs])


class TestRotateCov:
    def test_examples(self):
        assert_allclose(rotate_cov(np.eye(2), 0.7), np.eye(2), atol=1e-15)
        assert_allclose(rotate_cov(np.diag([4.0, 1.0]), math.pi / 2), np.diag([1.0, 4.0]), atol=1e-12)
        assert_array_equal(rotate_cov(np.diag([4.0, 1.0]), 0.0), np.diag([4.0, 1.0]))

    @given(psd2(), angles)
    def test_trace_det_and_inverse(self, c, th):
        r = rotate_cov(c, th)
        assert np.trace(r) == pytest.approx(np.trace(c), abs=1e-9 * max(1.0, np.trace(c)))
        assert np.linalg.det(r) == pytest.approx(np.linalg.det(c), rel=1e-9, abs=1e-9)
        assert_allclose(rotate_cov(r, -th), c, atol=1e-9 * max(1.0, np.abs(c).max()))
        assert np.linalg.eigvalsh(r)[0] >= -1e-9

    def test_rotation_is_orthonormal(self):
        r = rotation(1.1)
        assert_allclose(r @ r.T, np.eye(2), atol=1e-15)


class TestPsdRepair:
    def test_examples(self):
        assert_array_equal(psd_repair(np.eye(2)), np.eye(2))
        assert_allclose(psd_repair(np.diag([1.0, -1e-12])), np.diag([1.0, 1e-9]), atol=1e-15)

    def test_slightly_asymmetric(self):
        m = np.array([[2.0, 0.5 + 1e-10], [0.5 - 1e-10, 1.0]])
        out = psd_repair(m)
        assert_array_equal(out, 0.5 * (m + m.T))
        # eigenvalues from the characteristic polynomial of the symmetric part
        tr, det = 3.0, 2.0 - 0.25
        lo = 0.5 * (tr - math.sqrt(tr * tr - 4 * det))
        assert np.linalg.eigvalsh(out)[0] == pytest.approx(lo, rel=1e-12)

    @given(st.lists(st.floats(-100, 100), min_size=25, max_size=25))
    def test_output_admits_cholesky(self, xs):
        m = np.array(xs).reshape(5, 5)
        out = psd_repair(m)
        assert_array_equal(out, out.T)
        assert np.linalg.eigvalsh(out)[0] >= PSD_FLOOR * (1 - 1e-6) - 1e-12 * np.abs(out).max()
        np.linalg.cholesky(out)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            psd_repair(np.array([[1.0, math.nan], [0.0, 1.0]]))


class TestTypes:
    def test_pose_heading_normalized(self):
        assert Pose2(0.0, 0.0, 3 * math.pi).heading == pytest.approx(math.pi)

    def test_traversal_requires_increasing_time(self):
        a = make_frame(1, traversal_id=5, t=1.0)
        b = make_frame(2, traversal_id=5, t=1.0)
        with pytest.raises(ValueError, match="strictly increasing"):
            Traversal(5, [a, b])

    def test_traversal_rejects_foreign_frames(self):
        with pytest.raises(ValueError, match="belongs to traversal"):
            Traversal(5, [make_frame(1, traversal_id=6)])

    def test_duplicate_frame_ids(self):
        t1 = Traversal(1, [make_frame(3, traversal_id=1)])
        t2 = Traversal(2, [make_frame(3, traversal_id=2)])
        with pytest.raises(ValueError, match="duplicate"):
            check_unique_frame_ids([t1, t2])

    def test_frame_validation(self):
        with pytest.raises(ValueError):
            make_frame(1, condition="")
        with pytest.raises(ValueError):
            make_frame(1, corruption=1.5)

    def test_batch_columns(self):
        fr = [make_frame(i, x=float(i), y=2.0 * i) for i in range(3)]
        b = as_batch(fr)
        assert_array_equal(b.positions, [[0, 0], [1, 2], [2, 4]])
        assert_array_equal(b.frame_ids, [0, 1, 2])
        assert as_batch(b) is b
