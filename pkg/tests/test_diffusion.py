import numpy as np
import pytest

from mvcorr.diffusion import (
    ConstantPredictor, FeatureRecord, LinearPredictor, MixerPredictor, StepContext, ZeroPredictor, ddim_invert,
    ddim_sample, make_schedule, toy_predictor,
)
from mvcorr.errors import ShapeError


def reference_abar(n_steps):
    """alpha_bar levels computed directly from the linear beta ramp."""
    out = [1.0]
    for k in range(1, n_steps + 1):
        t = round(k * 1000 / n_steps) - 1
        prod = 1.0
        for i in range(t + 1):
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i / 999)
        out.append(prod)
    return np.array(out)


class TestSchedule:
    @pytest.mark.parametrize("n", [1, 7, 20, 50])
    def test_levels(self, n):
        s = make_schedule(n)
        assert s.n_steps == n
        np.testing.assert_allclose(s.alphas_cumprod, reference_abar(n), rtol=1e-10)
        assert s.timesteps[-1] == 999
        assert np.all(np.diff(s.alphas_cumprod) < 0)

    def test_invalid(self):
        with pytest.raises(ValueError):
            make_schedule(0)


class TestClosedForms:
    def test_zero_predictor_scales(self, rng):
        s = make_schedule(10)
        x = rng.normal(size=(3, 3, 4))
        z, _ = ddim_invert(x, s, ZeroPredictor())
        np.testing.assert_allclose(z, np.sqrt(s.alphas_cumprod[-1]) * x)
        np.testing.assert_allclose(ddim_sample(z, s, ZeroPredictor()), x)

    def test_constant_predictor_scalar_recurrence(self):
        s = make_schedule(5)
        ac = reference_abar(5)
        c, x = 0.1, 0.7
        for k in range(5, 0, -1):
            x0 = (x - np.sqrt(1 - ac[k]) * c) / np.sqrt(ac[k])
            x = np.sqrt(ac[k - 1]) * x0 + np.sqrt(1 - ac[k - 1]) * c
        out = ddim_sample(np.full((1, 1, 1), 0.7), s, ConstantPredictor(c))
        assert out.item() == pytest.approx(x, rel=1e-12)

    def test_single_step_by_hand(self):
        s = make_schedule(1)
        a = s.alphas_cumprod[1]
        out = ddim_sample(np.full((1, 1, 1), 2.0), s, ConstantPredictor(0.5))
        assert out.item() == pytest.approx((2.0 - np.sqrt(1 - a) * 0.5) / np.sqrt(a))

    def test_constant_roundtrip_exact(self, rng):
        s = make_schedule(20)
        x = rng.normal(size=(2, 2, 3))
        z, _ = ddim_invert(x, s, ConstantPredictor(0.3), fixed_point_iters=0)
        np.testing.assert_allclose(ddim_sample(z, s, ConstantPredictor(0.3)), x, atol=1e-12)


class TestRoundTrip:
    def test_linear(self, rng):
        s = make_schedule(20)
        x = rng.normal(size=(8, 8, 16))
        z, _ = ddim_invert(x, s, LinearPredictor(seed=1))
        assert np.mean((ddim_sample(z, s, LinearPredictor(seed=1)) - x) ** 2) < 1e-8

    def test_mixer(self, rng):
        s = make_schedule(20)
        pred = MixerPredictor(dim=16, seed=4, schedule=s)
        x = rng.normal(size=(16, 16, 16))
        cond = rng.normal(size=16)
        z, _ = ddim_invert(x, s, pred, cond)
        assert np.mean((ddim_sample(z, s, pred, cond) - x) ** 2) < 1e-4

    def test_refinement_improves_inversion(self, rng):
        s = make_schedule(20)
        pred = MixerPredictor(dim=8, seed=0, schedule=s)
        x = rng.normal(size=(6, 6, 8))
        errs = []
        for iters in (0, 5):
            z, _ = ddim_invert(x, s, pred, fixed_point_iters=iters)
            errs.append(np.mean((ddim_sample(z, s, pred) - x) ** 2))
        assert errs[1] < errs[0]


class TestRecording:
    def test_record_counts(self, rng):
        s = make_schedule(6)
        pred = MixerPredictor(dim=4, seed=0, schedule=s)
        x = rng.normal(size=(3, 3, 4))
        z, inv = ddim_invert(x, s, pred)
        rec = FeatureRecord()
        ddim_sample(z, s, pred, record=rec)
        assert len(inv) == 6 * pred.n_layers and inv.steps() == list(range(6))
        assert len(rec) == 6 * pred.n_layers and rec.steps() == list(range(1, 7))
        assert rec.layers() == [0, 1, 2]

    def test_hook_replaces_attention(self, rng):
        s = make_schedule(3)
        pred = MixerPredictor(dim=4, seed=0, schedule=s)
        calls = []

        def hook(step, layer, f, w):
            calls.append((step, layer))
            return np.zeros_like(f)

        x = rng.normal(size=(2, 2, 4))
        ddim_sample(x, s, pred, hook=hook)
        assert calls == [(k, l) for k in (3, 2, 1) for l in (0, 1)]

    def test_context_without_hook_is_self_attention(self, rng):
        from mvcorr.attention import AttentionWeights, self_attention

        f = rng.normal(size=(2, 2, 3))
        w = AttentionWeights.random(3, rng)
        np.testing.assert_array_equal(StepContext(0).attend(0, f, w), self_attention(f, w))


class TestPredictors:
    @pytest.mark.parametrize("kind", ["zero", "constant", "linear", "mixer"])
    def test_shape_and_no_mutation(self, kind, rng):
        pred = toy_predictor(kind, dim=4, seed=2)
        x = rng.normal(size=(3, 3, 4))
        keep = x.copy()
        eps = pred(x, 5, np.ones(4))
        assert eps.shape == x.shape
        np.testing.assert_array_equal(x, keep)

    def test_mixer_deterministic(self, rng):
        x = rng.normal(size=(3, 3, 4))
        a = MixerPredictor(dim=4, seed=9)(x, 3)
        b = MixerPredictor(dim=4, seed=9)(x, 3)
        c = MixerPredictor(dim=4, seed=10)(x, 3)
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)

    def test_mixer_dim_check(self):
        with pytest.raises(ShapeError):
            MixerPredictor(dim=4)(np.zeros((2, 2, 5)), 1)

    def test_bad_prediction_shape(self):
        with pytest.raises(ShapeError):
            ddim_sample(np.zeros((2, 2, 2)), make_schedule(2), lambda x, k, c, ctx: np.zeros(3))

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            toy_predictor("unet")
