import numpy as np
import pytest

from oracles import reference_render
from sonofield import diffcore as dc
from sonofield import renderer as rd
from sonofield.renderer import ParamMaps, RenderConfig


def random_maps(rng, shape=(8, 12), alpha_max=0.5, dtype=np.float64):
    return ParamMaps(
        rng.uniform(0, alpha_max, shape).astype(dtype),
        rng.uniform(0, 1, shape).astype(dtype),
        rng.uniform(0, 1, shape).astype(dtype),
        rng.uniform(0, 1, shape).astype(dtype),
        rng.uniform(0, 1, shape).astype(dtype),
    )


class TestPsf:
    def test_default_normalized(self):
        psf = rd.gaussian_psf()
        assert psf.shape == (5, 5)
        assert abs(psf.sum() - 1) < 1e-12
        assert np.all(psf >= 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RenderConfig(psf=np.ones((3, 3)))
        with pytest.raises(ValueError):
            RenderConfig(psf=np.full((2, 2), 0.25))
        with pytest.raises(ValueError):
            RenderConfig(mode="soft")
        with pytest.raises(ValueError):
            RenderConfig(temperature=0.0)


class TestSampleIndicator:
    @pytest.mark.parametrize("mode", ["hard", "relaxed", "expected"])
    def test_zero_probability(self, mode):
        out = rd.sample_indicator(np.zeros((4, 6), dtype=np.float32), mode, rd.stream(0, 0, 0))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_hard_all_ones(self):
        out = rd.sample_indicator(np.ones((4, 6)), "hard", rd.stream(0, 0, 0))
        np.testing.assert_array_equal(out.data, 1.0)

    def test_hard_mean(self):
        out = rd.sample_indicator(np.full((1, 100_000), 0.5), "hard", rd.stream(3, 0, 0))
        assert set(np.unique(out.data)) == {0.0, 1.0}
        # 3 sigma = 3 * 0.5 / sqrt(1e5) ~ 0.0047
        assert abs(out.data.mean() - 0.5) < 0.01

    def test_hard_straight_through_gradient(self):
        p = dc.Tensor(np.full((3, 4), 0.3), requires_grad=True)
        g = rd.sample_indicator(p, "hard", rd.stream(0, 0, 0))
        w = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(dc.backward(dc.tsum(g * w))[p], w)

    def test_relaxed_low_temperature_near_binary(self):
        out = rd.sample_indicator(np.full((50, 50), 0.4), "relaxed", rd.stream(1, 0, 0), temperature=0.01)
        frac_binary = np.mean((out.data < 0.01) | (out.data > 0.99))
        assert frac_binary > 0.95
        assert abs(np.mean(out.data > 0.5) - 0.4) < 0.05

    def test_expected_is_identity(self):
        p = np.random.default_rng(0).random((3, 5))
        np.testing.assert_array_equal(rd.sample_indicator(p, "expected").data, p)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            rd.sample_indicator(np.array([[1.1]]), "expected")
        rd.sample_indicator(np.array([[1 + 5e-7]]), "expected")


class TestScatterTemplate:
    def test_zero_indicator(self):
        T = rd.scatter_template(np.zeros((3, 3)), np.ones((3, 3)))
        np.testing.assert_array_equal(T.data, 0.0)

    def test_full_indicator_no_noise(self):
        phi = np.random.default_rng(0).random((3, 4))
        np.testing.assert_array_equal(rd.scatter_template(np.ones((3, 4)), phi).data, phi)

    def test_noise_mean(self):
        T = rd.scatter_template(np.ones((1, 100_000)), np.full((1, 100_000), 0.5), rd.stream(0, 0, 2), noise=True)
        assert abs(T.data.mean() - 0.5) < 0.02
        assert abs(T.data.std() - 1.0) < 0.02


class TestTransmission:
    cfg = RenderConfig(axial_spacing=0.5)

    def test_no_boundaries_no_attenuation(self):
        I = rd.transmission(np.random.default_rng(0).random((3, 7)), np.zeros((3, 7)), np.zeros((3, 7)), self.cfg)
        np.testing.assert_array_equal(I.data, 1.0)

    def test_total_reflection_shadow(self):
        G = np.zeros((2, 10))
        G[:, 4] = 1
        I = rd.transmission(np.ones((2, 10)), G, np.zeros((2, 10)), self.cfg)
        np.testing.assert_array_equal(I.data[:, :5], 1.0)
        np.testing.assert_array_equal(I.data[:, 5:], 0.0)

    def test_constant_attenuation_closed_form(self):
        a, depth = 0.07, 96
        I = rd.transmission(np.zeros((2, depth)), np.zeros((2, depth)), np.full((2, depth), a), self.cfg)
        t = np.arange(depth)
        expected = np.exp(-a * self.cfg.frequency * self.cfg.axial_spacing * t)
        np.testing.assert_allclose(I.data, np.broadcast_to(expected, (2, depth)), rtol=1e-6)


class TestTerms:
    def test_reflection_no_border(self):
        R = rd.reflection_term(np.ones((3, 3)), np.full((3, 3), 0.5), np.zeros((3, 3)), rd.gaussian_psf())
        np.testing.assert_array_equal(R.data, 0.0)

    def test_reflection_impulse(self):
        G = np.zeros((4, 5))
        G[2, 3] = 1
        R = rd.reflection_term(np.ones((4, 5)), np.full((4, 5), 0.5), G, rd.identity_psf())
        expected = np.zeros((4, 5))
        expected[2, 3] = 0.5
        np.testing.assert_array_equal(R.data, expected)

    def test_reflection_bound(self):
        rng = np.random.default_rng(5)
        psf = rd.gaussian_psf()
        for _ in range(20):
            I, beta, G = rng.random((8, 12)), rng.random((8, 12)), (rng.random((8, 12)) < 0.3).astype(float)
            R = rd.reflection_term(I, beta, G, psf).data
            blurred = dc.conv2d_same(dc.Tensor(G), psf).data
            assert np.all(R <= blurred.max() * beta.max() + 1e-12)

    def test_backscatter_zero_cases(self):
        rng = np.random.default_rng(0)
        B = rd.backscatter_term(rng.random((3, 4)), np.zeros((3, 4)), rd.gaussian_psf())
        np.testing.assert_array_equal(B.data, 0.0)
        B = rd.backscatter_term(np.zeros((3, 4)), rng.random((3, 4)), rd.gaussian_psf())
        np.testing.assert_array_equal(B.data, 0.0)

    def test_backscatter_identity_psf(self):
        rng = np.random.default_rng(1)
        I, T = rng.random((3, 4)), rng.random((3, 4))
        np.testing.assert_array_equal(rd.backscatter_term(I, T, rd.identity_psf()).data, I * T)


class TestRenderFrame:
    def test_all_zero_parameters(self):
        maps = ParamMaps(*[np.zeros((6, 9))] * 5)
        for mode in rd.MODES:
            E, _ = rd.render_frame(maps, RenderConfig(mode=mode))
            np.testing.assert_array_equal(E.data, 0.0)

    def test_decomposition_identity(self):
        rng = np.random.default_rng(2)
        for mode in rd.MODES:
            E, inter = rd.render_frame(random_maps(rng), RenderConfig(mode=mode, seed=4))
            np.testing.assert_array_equal(E.data, inter.R.data + inter.B.data)

    def test_intermediate_map_invariants(self):
        rng = np.random.default_rng(3)
        maps = random_maps(rng)
        _, hard = rd.render_frame(maps, RenderConfig(mode="hard"))
        assert set(np.unique(hard.G.data)) <= {0.0, 1.0}
        assert set(np.unique(hard.H.data)) <= {0.0, 1.0}
        _, exp = rd.render_frame(maps, RenderConfig(mode="expected"))
        np.testing.assert_array_equal(exp.G.data, maps.rho_b)
        np.testing.assert_array_equal(exp.H.data, maps.rho_s)

    def test_strong_reflector_casts_shadow(self):
        W, D, k = 16, 40, 15
        maps = ParamMaps(
            np.full((W, D), 0.01),
            np.where(np.arange(D) == k, 0.95, 0.05)[None].repeat(W, 0),
            np.where(np.arange(D) == k, 1.0, 0.0)[None].repeat(W, 0),
            np.full((W, D), 0.6),
            np.full((W, D), 0.5),
        )
        E, _ = rd.render_frame(maps, RenderConfig(mode="expected"))
        above, below = E.data[:, : k - 3].mean(), E.data[:, k + 3 :].mean()
        assert below < 0.05 * above

    def test_shape_mismatch(self):
        maps = ParamMaps(np.zeros((3, 4)), np.zeros((3, 4)), np.zeros((3, 5)), np.zeros((3, 4)), np.zeros((3, 4)))
        with pytest.raises(dc.ShapeError):
            rd.render_frame(maps, RenderConfig(mode="expected"))

    def test_seeded_determinism(self):
        maps = random_maps(np.random.default_rng(4))
        cfg = RenderConfig(mode="hard", seed=11, scatter_noise=True)
        a, _ = rd.render_frame(maps, cfg, frame_id=3)
        b, _ = rd.render_frame(maps, cfg, frame_id=3)
        c, _ = rd.render_frame(maps, cfg, frame_id=4)
        assert a.data.tobytes() == b.data.tobytes()
        assert a.data.tobytes() != c.data.tobytes()

    @pytest.mark.parametrize("mode", ["expected", "hard"])
    def test_matches_scalar_reference(self, mode):
        rng = np.random.default_rng(6)
        cfg = RenderConfig(mode=mode, seed=2, axial_spacing=0.4, frequency=1.3)
        for frame_id in range(5):
            maps = random_maps(rng, (6, 10))
            E, inter = rd.render_frame(maps, cfg, frame_id)
            if mode == "expected":
                G, H = maps.rho_b, maps.rho_s
            else:
                G = (rd.stream(2, frame_id, rd.BORDER).random(maps.rho_b.shape) < maps.rho_b).astype(float)
                H = (rd.stream(2, frame_id, rd.SCATTER).random(maps.rho_s.shape) < maps.rho_s).astype(float)
            ref, ref_I = reference_render(maps.alpha, maps.beta, G, H, maps.phi, cfg.psf, 0.4, 1.3)
            np.testing.assert_allclose(E.data, ref, atol=1e-12)
            np.testing.assert_allclose(inter.I.data, ref_I, atol=1e-12)


@pytest.mark.parametrize("mode", ["expected", "relaxed"])
def test_render_gradcheck(mode):
    rng = np.random.default_rng(7)
    maps = random_maps(rng, (5, 7))
    # keep probabilities away from 0/1 where the relaxed logit saturates
    maps = ParamMaps(maps.alpha, *(0.1 + 0.8 * m for m in maps[1:]))
    cfg = RenderConfig(mode=mode, temperature=2.0)
    w = rng.normal(size=(5, 7))

    def f(ts):
        E, _ = rd.render_frame(ParamMaps(*ts), cfg)
        return dc.tsum(E * w)

    assert dc.gradcheck(f, list(maps), 1e-6, dtype=np.float64) < 1e-5
    assert dc.gradcheck(f, list(maps), 1e-4, dtype=np.float32) < 1e-3


def test_energy_monotone_random_maps():
    rng = np.random.default_rng(8)
    cfg = RenderConfig(mode="expected")
    # 10^4 random frames of 4 x 16 in one batch of scan-lines
    maps = random_maps(rng, (40_000, 16), alpha_max=2.0)
    _, inter = rd.render_frame(maps, cfg)
    I = inter.I.data
    assert np.all(np.diff(I, axis=1) <= 0)
    assert np.all((I >= 0) & (I <= 1))
