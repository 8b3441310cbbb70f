import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mragattack.numerics import (SeededRng, clip_box, cosine_sim, dot, finite_diff_grad,
                                 linf_norm, sign_vec, similarity)

finite_vectors = st.lists(
    st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False),
    min_size=1, max_size=16).map(np.asarray)


def test_dot_examples():
    assert dot([1, 0], [0, 1]) == 0.0
    assert dot([1, 2], [3, 4]) == 11.0
    assert dot([3.5, -2.0, 7.0], [0, 0, 0]) == 0.0


def test_dot_dimension_mismatch():
    with pytest.raises(ValueError):
        dot([1, 2], [1, 2, 3])


def test_dot_rejects_nan():
    with pytest.raises(ValueError):
        dot([np.nan, 1.0], [1.0, 1.0])


def test_cosine_examples():
    v = np.array([0.3, -1.2, 4.0])
    assert cosine_sim(v, v) == pytest.approx(1.0)
    assert cosine_sim(v, -v) == pytest.approx(-1.0)
    assert cosine_sim([1, 0], [1, 1]) == pytest.approx(0.7071, abs=1e-4)


def test_cosine_zero_norm_is_error():
    with pytest.raises(ValueError):
        cosine_sim([0, 0], [1, 2])


@given(finite_vectors, finite_vectors, st.floats(min_value=1e-3, max_value=1e3))
@settings(max_examples=80)
def test_cosine_symmetry_and_scale_invariance(a, b, k):
    if a.shape != b.shape or not a.any() or not b.any():
        return
    s = cosine_sim(a, b)
    assert cosine_sim(b, a) == pytest.approx(s, abs=1e-12)
    assert cosine_sim(k * a, b) == pytest.approx(s, abs=1e-12)
    assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12


def test_similarity_kernels():
    assert similarity([1, 2], [3, 4], "dot") == 11.0
    assert similarity([1, 0], [1, 0], "cosine") == pytest.approx(1.0)
    with pytest.raises(ValueError):
        similarity([1], [1], "euclid")


def test_sign_vec():
    np.testing.assert_array_equal(sign_vec([0.3, -2.0, 0.0]), [1.0, -1.0, 0.0])
    np.testing.assert_array_equal(sign_vec([0.0, 0.0]), [0.0, 0.0])
    # strict sign: no dead zone around zero
    assert sign_vec([-1e-12])[0] == -1.0


def test_clip_box_examples():
    eps = 8 / 255
    out = clip_box([-0.1, 0.05], -eps, eps)
    np.testing.assert_allclose(out, [-eps, eps])
    v = np.array([0.01, -0.02])
    np.testing.assert_array_equal(clip_box(v, -0.5, 0.5), v)
    np.testing.assert_array_equal(clip_box([3.0, -4.0], 0.0, 0.0), [0.0, 0.0])


def test_clip_box_inverted_bounds():
    with pytest.raises(ValueError):
        clip_box([1.0], 1.0, -1.0)


@given(finite_vectors,
       st.floats(min_value=-10, max_value=10, allow_nan=False),
       st.floats(min_value=0, max_value=10, allow_nan=False))
@settings(max_examples=80)
def test_clip_box_bounds_and_idempotence(v, lo, width):
    hi = lo + width
    out = clip_box(v, lo, hi)
    assert np.all(out >= lo) and np.all(out <= hi)
    np.testing.assert_array_equal(clip_box(out, lo, hi), out)


def test_finite_diff_quadratic():
    f = lambda x: float(x @ x)
    grad = finite_diff_grad(f, [1.0, 2.0], h=1e-5)
    np.testing.assert_allclose(grad, [2.0, 4.0], atol=1e-6)


def test_finite_diff_constant_and_linear():
    np.testing.assert_allclose(finite_diff_grad(lambda x: 3.0, [1.0, -1.0], 1e-5),
                               [0.0, 0.0], atol=1e-9)
    c = np.array([2.0, -0.5, 1.25])
    grad = finite_diff_grad(lambda x: float(c @ x), np.zeros(3), 1e-5)
    np.testing.assert_allclose(grad, c, atol=1e-8)


def test_finite_diff_rejects_nonfinite():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: float("nan"), [1.0], 1e-5)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: 1.0, [1.0], h=0.0)


def test_linf_norm():
    assert linf_norm([0.1, -0.4, 0.2]) == pytest.approx(0.4)
    assert linf_norm([]) == 0.0


class TestSeededRng:
    def test_same_seed_identical_sequences(self):
        a = SeededRng(1234).uniform(-1, 1, 1_000_000)
        b = SeededRng(1234).uniform(-1, 1, 1_000_000)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        assert not np.array_equal(SeededRng(1).uniform(0, 1, 100),
                                  SeededRng(2).uniform(0, 1, 100))

    def test_derive_is_order_independent(self):
        root = SeededRng(9)
        x = root.derive("attack", 3).uniform(0, 1, 10)
        root.uniform(0, 1, 1000)  # consuming the parent must not matter
        y = SeededRng(9).derive("attack", 3).uniform(0, 1, 10)
        np.testing.assert_array_equal(x, y)

    def test_derive_distinct_streams(self):
        root = SeededRng(9)
        assert not np.array_equal(root.derive(0).uniform(0, 1, 10),
                                  root.derive(1).uniform(0, 1, 10))

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            SeededRng(-1)
