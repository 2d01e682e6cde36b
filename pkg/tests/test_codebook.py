import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from iterlearn import autodiff as ad
from iterlearn.codebook import (
    Codebook,
    code_usage,
    init_codebook,
    pool,
    readout,
    relevance,
    sparsemax,
    sparsemax_jacobian,
    top_examples,
)
from iterlearn.errors import ConfigError

from .helpers import central_differences, max_relative_error, simplex_projection_bruteforce

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


class TestSparsemax:
    def test_examples(self):
        np.testing.assert_allclose(sparsemax([1.0, 0.0]), [1.0, 0.0])
        np.testing.assert_allclose(sparsemax([0.5, 0.5]), [0.5, 0.5])
        np.testing.assert_allclose(sparsemax([2.0, 1.5, -1.0]), [0.75, 0.25, 0.0])

    def test_single_entry(self):
        np.testing.assert_allclose(sparsemax([-3.0]), [1.0])

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            z = rng.standard_normal(int(rng.integers(1, 9))) * rng.uniform(0.1, 3)
            np.testing.assert_allclose(sparsemax(z), simplex_projection_bruteforce(z), atol=1e-6)

    def test_batched_rows(self):
        z = np.random.default_rng(1).standard_normal((6, 5))
        out = sparsemax(z)
        for row, o in zip(z, out):
            np.testing.assert_allclose(o, sparsemax(row))

    @given(arrays(np.float64, st.integers(1, 10), elements=finite))
    @settings(max_examples=200)
    def test_on_simplex(self, z):
        p = sparsemax(z)
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-6

    @given(arrays(np.float64, st.integers(1, 10), elements=finite), finite)
    def test_shift_invariant(self, z, c):
        np.testing.assert_allclose(sparsemax(z + c), sparsemax(z), atol=1e-6)

    @given(arrays(np.float64, st.integers(2, 10), elements=finite), st.randoms())
    def test_permutation_equivariant(self, z, rnd):
        perm = list(range(len(z)))
        rnd.shuffle(perm)
        np.testing.assert_allclose(sparsemax(z[perm]), sparsemax(z)[perm], atol=1e-9)

    @given(arrays(np.float64, st.integers(1, 8), elements=finite))
    def test_idempotent_on_simplex(self, z):
        p = sparsemax(z)
        np.testing.assert_allclose(sparsemax(p), p, atol=1e-6)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            z = rng.standard_normal(6) * 2
            p = sparsemax(z)
            tau = z[p > 0][0] - p[p > 0][0]
            if np.min(np.abs(z - tau)) < 1e-3:
                continue  # too close to a support change
            h = 1e-5
            J = np.stack([(sparsemax(z + h * e) - sparsemax(z - h * e)) / (2 * h) for e in np.eye(6)], axis=1)
            np.testing.assert_allclose(sparsemax_jacobian(z), J, atol=1e-4)

    def test_jacobian_rows_sum_to_zero(self):
        J = sparsemax_jacobian(np.random.default_rng(3).standard_normal(7))
        np.testing.assert_allclose(J.sum(axis=0), 0, atol=1e-12)
        np.testing.assert_allclose(J, J.T)


class TestRelevance:
    def test_example(self):
        codes = np.array([[1.0, 0.0], [0.0, 1.0]])
        patches = np.array([[2.0, 0.0], [1.0, 1.0]])
        np.testing.assert_allclose(relevance(patches, codes), [1.0, np.sqrt(0.5)])

    def test_zero_rows_are_cosine_zero(self):
        codes = np.array([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(relevance(np.zeros((2, 2)), codes), [0.0, 0.0])
        np.testing.assert_allclose(relevance(np.eye(2), np.array([[0.0, 0.0], [1.0, 0.0]])), [0.0, 1.0])

    def test_dim_mismatch(self):
        with pytest.raises(ConfigError):
            relevance(np.ones((2, 3)), np.ones((4, 2)))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=50)
    def test_bounded_and_scale_invariant(self, seed):
        rng = np.random.default_rng(seed)
        p, c = rng.standard_normal((4, 6)), rng.standard_normal((5, 6))
        r = relevance(p, c)
        assert np.all(np.abs(r) <= 1 + 1e-9)
        np.testing.assert_allclose(relevance(3.0 * p, 0.5 * c), r, atol=1e-12)

    def test_patch_order_invariant(self):
        rng = np.random.default_rng(4)
        p, c = rng.standard_normal((4, 6)), rng.standard_normal((5, 6))
        np.testing.assert_allclose(relevance(p[::-1], c), relevance(p, c))


class TestPoolAndReadout:
    def test_pool_is_convex_combination(self):
        codes = np.array([[1.0, 0.0], [0.0, 2.0]])
        np.testing.assert_allclose(pool([0.25, 0.75], codes), [0.25, 1.5])
        with pytest.raises(ConfigError):
            pool([1.0], codes)

    def test_readout_matches_reference(self):
        rng = np.random.default_rng(5)
        cb = init_codebook(16, 8, seed=0)
        feats = rng.standard_normal((3, 4, 8)).astype(np.float32)
        reps, w = readout(ad.const(feats), ad.const(cb.codes))
        for n in range(3):
            w_ref = sparsemax(relevance(feats[n], cb.codes))
            np.testing.assert_allclose(w.value[n], w_ref, atol=1e-5)
            np.testing.assert_allclose(reps.value[n], pool(w_ref, cb.codes), atol=1e-5)

    def test_readout_gradients(self):
        for trial in range(20):
            rng = np.random.default_rng(trial)
            params = {"feats": rng.standard_normal((2, 3, 4)), "codes": rng.standard_normal((6, 4)),
                      "c": rng.standard_normal((2, 4))}
            fn = lambda v: ad.sum_axis(ad.mul(readout(v["feats"], v["codes"])[0], v["c"]))
            p32 = {k: v.astype(np.float32) for k, v in params.items()}
            _, analytic = ad.compute_gradients(p32, fn)
            numeric = central_differences(lambda p: float(fn({k: ad.const(a) for k, a in p.items()}).value), p32,
                                          h=1e-3)
            assert max_relative_error(analytic, numeric) < 1e-3, trial


def test_codebook_validation_and_init():
    with pytest.raises(ConfigError):
        Codebook(np.ones((1, 4)))
    cb = init_codebook(128, 32, seed=3)
    assert cb.codes.shape == (128, 32) and cb.codes.dtype == np.float32
    assert abs(cb.codes.std() - 1 / np.sqrt(32)) < 0.01
    assert init_codebook(128, 32, seed=3).codes.tobytes() == cb.codes.tobytes()


class TestUsage:
    def test_example(self):
        u = code_usage(np.array([[1.0, 0.0, 0.0], [0.5, 0.5, 0.0]]))
        np.testing.assert_allclose(u.frequency, [1.0, 0.5, 0.0])
        np.testing.assert_allclose(u.mean_weight, [0.75, 0.25, 0.0])
        assert u.never_active == 1

    def test_accepts_stream(self):
        u = code_usage(iter([np.array([0.0, 1.0]), np.array([0.0, 1.0])]))
        assert u.never_active == 1

    def test_top_examples_stable_ties(self):
        scores = np.array([[0.1, 0.0], [0.9, 0.0], [0.9, 0.0], [0.5, 0.0]])
        assert top_examples(0, scores, 3) == [1, 2, 3]
        assert top_examples(1, scores, 2) == [0, 1]
        with pytest.raises(ConfigError):
            top_examples(2, scores, 1)
        with pytest.raises(ConfigError):
            top_examples(0, scores, 5)
