import math

import numpy as np
import pytest

from mvcorr.attention import AttentionWeights, cca, reference_attention, self_attention, softmax
from mvcorr.correspondence import MASKED, SELF, AttentionMask, CorrespondenceSet
from mvcorr.errors import ShapeError


def naive_attention(f_q, f_kv, w):
    """Per-token loops over explicit dot products."""
    h, wd, d = f_q.shape
    keys = [w.w_k @ f_kv[y, x] for y in range(f_kv.shape[0]) for x in range(f_kv.shape[1])]
    vals = [w.w_v @ f_kv[y, x] for y in range(f_kv.shape[0]) for x in range(f_kv.shape[1])]
    out = np.zeros_like(f_q)
    for y in range(h):
        for x in range(wd):
            q = w.w_q @ f_q[y, x]
            logits = [float(q @ k) / math.sqrt(d) for k in keys]
            m = max(logits)
            ex = [math.exp(l - m) for l in logits]
            tot = sum(ex)
            out[y, x] = sum(e / tot * v for e, v in zip(ex, vals))
    return out


def naive_cca(z, cs, bias, w):
    n, h, wd, d = z.shape
    out = np.zeros_like(z)
    for s in range(n):
        for y in range(h):
            for x in range(wd):
                q = z[s, y, x] if w is None else w.w_q @ z[s, y, x]
                logits, vals = [], []
                for a in range(n):
                    f = z[a, cs.ty[s, y, x, a], cs.tx[s, y, x, a]]
                    k, v = (f, f) if w is None else (w.w_k @ f, w.w_v @ f)
                    logits.append(float(q @ k) / math.sqrt(d) + bias[s, y, x, a])
                    vals.append(v)
                m = max(logits)
                ex = [math.exp(l - m) for l in logits]
                out[s, y, x] = sum(e / sum(ex) * v for e, v in zip(ex, vals))
    return out


def random_corr(rng, n, h, w, p_invalid=0.3):
    shape = (n, h, w, n)
    tx = rng.integers(0, w, size=shape)
    ty = rng.integers(0, h, size=shape)
    valid = rng.random(shape) > p_invalid
    kind = rng.integers(0, 2, size=shape)
    for s in range(n):
        tx[s, :, :, s] = np.arange(w)[None, :]
        ty[s, :, :, s] = np.arange(h)[:, None]
        valid[s, :, :, s] = True
        kind[s, :, :, s] = SELF
    cs = CorrespondenceSet(tx, ty, valid, kind, np.ones(shape))
    return cs, AttentionMask.from_correspondences(cs)


class TestSelfAttention:
    def test_matches_naive(self, rng):
        f = rng.normal(size=(4, 5, 6))
        w = AttentionWeights.random(6, rng, scale=0.5)
        np.testing.assert_allclose(self_attention(f, w), naive_attention(f, f, w), atol=1e-10)

    def test_single_token_returns_value(self, rng):
        f = rng.normal(size=(1, 1, 4))
        w = AttentionWeights.random(4, rng)
        np.testing.assert_allclose(self_attention(f, w)[0, 0], w.w_v @ f[0, 0])

    def test_constant_grid_is_fixed_point_with_identity(self):
        f = np.ones((3, 3, 4))
        np.testing.assert_allclose(self_attention(f, AttentionWeights.identity(4)), f)

    def test_output_in_convex_hull(self, rng):
        f = rng.normal(size=(3, 3, 2))
        out = self_attention(f, AttentionWeights.identity(2)).reshape(-1, 2)
        pts = f.reshape(-1, 2)
        assert np.all(out.min(0) >= pts.min(0) - 1e-12) and np.all(out.max(0) <= pts.max(0) + 1e-12)

    def test_permutation_equivariant(self, rng):
        f = rng.normal(size=(2, 6, 5))
        w = AttentionWeights.random(5, rng, scale=0.4)
        perm = rng.permutation(12)
        pf = f.reshape(12, 5)[perm].reshape(2, 6, 5)
        np.testing.assert_allclose(self_attention(pf, w).reshape(12, 5),
                                   self_attention(f, w).reshape(12, 5)[perm], atol=1e-12)

    def test_softmax_rows_sum_to_one(self, rng):
        p = softmax(rng.normal(size=(7, 9)) * 100)
        np.testing.assert_allclose(p.sum(-1), 1.0)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            self_attention(np.ones((2, 2, 3)), AttentionWeights.identity(4))


class TestReferenceAttention:
    def test_matches_naive(self, rng):
        f, r = rng.normal(size=(2, 3, 4, 6))
        w = AttentionWeights.random(6, rng, scale=0.5)
        expect = 0.3 * naive_attention(f, r, w) + 0.7 * naive_attention(f, f, w)
        np.testing.assert_allclose(reference_attention(f, r, w, 0.3), expect, atol=1e-10)

    def test_lambda_zero_is_self_attention(self, rng):
        f, r = rng.normal(size=(2, 3, 3, 4))
        w = AttentionWeights.random(4, rng)
        np.testing.assert_array_equal(reference_attention(f, r, w, 0.0), self_attention(f, w))

    def test_lambda_one_ignores_own_keys(self, rng):
        f, r = rng.normal(size=(2, 3, 3, 4))
        w = AttentionWeights.random(4, rng)
        np.testing.assert_allclose(reference_attention(f, r, w, 1.0), naive_attention(f, r, w), atol=1e-10)

    def test_reference_grid_size_may_differ(self, rng):
        f = rng.normal(size=(2, 2, 4))
        r = rng.normal(size=(5, 3, 4))
        w = AttentionWeights.random(4, rng)
        assert reference_attention(f, r, w, 0.5).shape == f.shape

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_lambda_range(self, lam, rng):
        f = rng.normal(size=(2, 2, 4))
        with pytest.raises(ValueError):
            reference_attention(f, f, AttentionWeights.identity(4), lam)


class TestCCA:
    @pytest.mark.parametrize("reuse", [True, False])
    def test_matches_naive(self, rng, reuse, backend):
        z = rng.normal(size=(3, 4, 4, 8))
        cs, mask = random_corr(rng, 3, 4, 4)
        w = AttentionWeights.random(8, rng, scale=0.5)
        expect = naive_cca(z, cs, mask.bias, w if reuse else None)
        np.testing.assert_allclose(cca(z, cs, mask, w, reuse), expect, atol=1e-10)

    def test_self_only_is_identity_without_projections(self, rng):
        z = rng.normal(size=(2, 3, 3, 4))
        cs, mask = random_corr(rng, 2, 3, 3, p_invalid=1.0)
        np.testing.assert_allclose(cca(z, cs, mask, reuse_projections=False), z, atol=1e-12)

    def test_masked_entries_have_no_weight(self, rng):
        z = rng.normal(size=(2, 2, 2, 3))
        cs, mask = random_corr(rng, 2, 2, 2, p_invalid=1.0)
        z2 = z.copy()
        z2[1] += 100.0  # only reachable through masked entries from view 0
        a = cca(z, cs, mask, reuse_projections=False)[0]
        b = cca(z2, cs, mask, reuse_projections=False)[0]
        np.testing.assert_allclose(a, b, atol=1e-12)
        assert MASKED == -1e9

    def test_shape_mismatch(self, rng):
        cs, mask = random_corr(rng, 2, 3, 3)
        with pytest.raises(ShapeError):
            cca(np.zeros((2, 3, 4, 4)), cs, mask, AttentionWeights.identity(4))


def test_weights_save_load(tmp_path, rng):
    w = AttentionWeights.random(5, rng)
    w.save(tmp_path / "layer")
    back = AttentionWeights.load(tmp_path / "layer")
    np.testing.assert_allclose(back.w_q, w.w_q, rtol=1e-6)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["layer_k.mvdt", "layer_q.mvdt", "layer_v.mvdt"]
