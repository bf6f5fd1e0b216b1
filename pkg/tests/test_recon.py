"""Inference energies and latent optimization: reductions, freezes, traces."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sdflab import diffcore as dc
from sdflab.nets import Decoder, DecoderSpec, Discriminator, DiscriminatorSpec, Encoder, EncoderSpec
from sdflab.recon import (
    FusionConfig,
    Observation,
    OptimConfig,
    e_data,
    e_dis,
    e_reg,
    extract_mesh,
    fuse_multicode,
    optimize_baseline,
    optimize_latent,
    optimize_regularized,
)

DEC = DecoderSpec(code_dim=12, hidden=24)
DISC = DiscriminatorSpec(per_point=(8, 8, 16))
ENC = EncoderSpec(block1=(8, 12), block2=(24, 32), code_dim=12, max_points=256)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def decoder(rng):
    return Decoder.init(DEC, rng)


@pytest.fixture
def obs(rng):
    pts = rng.uniform(-0.5, 0.5, (12, 3))
    return Observation.from_scan(pts)


def micro_cfg(**kw):
    base = dict(iterations=6, disc_points=16, dis_resample_every=3, seed=5)
    base.update(kw)
    return OptimConfig(**base)


class TestObservation:
    def test_from_scan_offsets_and_targets(self, rng):
        pts = rng.uniform(0.2, 0.6, (7, 3))
        obs = Observation.from_scan(pts, offset=0.02)
        assert len(obs.off_points) == 14
        assert set(np.round(obs.off_targets, 9)) == {0.02, -0.02}
        # off points sit at +-offset along the center ray
        d = np.linalg.norm(obs.off_points[:7] - pts, axis=1)
        assert np.allclose(d, 0.02, atol=1e-12)
        # targets live inside the clamp range
        assert np.all(np.abs(obs.off_targets) <= 0.1)

    def test_requires_surface_points(self):
        with pytest.raises(ValueError):
            Observation(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))


class TestEnergies:
    def test_e_data_zero_on_exact_match(self, rng):
        # a decoder can't be forced to arbitrary targets, so check the term
        # directly through an observation the zero field satisfies: impossible
        # in general; instead verify the clamp arithmetic cases
        dec = Decoder.init(DEC, rng)
        obs = Observation(np.array([[0.2, 0.0, 0.0]]), np.zeros((0, 3)), np.zeros(0))
        z = dc.Tensor(np.zeros(12))
        with dc.no_tape():
            pred = float(dec.forward(z, obs.surf).value[0])
            val = float(e_data(obs, dec, z).value)
        clamped = np.clip(pred, -0.1, 0.1)
        assert np.isclose(val, abs(clamped - 0.0), atol=1e-12)

    def test_e_data_clamp_arithmetic(self):
        # prediction 0.5 vs target 0 at delta 0.1 clamps to |0.1 - 0| = 0.1
        from sdflab.train import clamped_l1

        v = clamped_l1(dc.Tensor(np.array([0.5])), np.array([0.0]), 0.1)
        assert float(v.value) == 0.1

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-2, 2), st.floats(-2, 2))
    def test_rho_symmetry(self, a, b):
        from sdflab.train import clamped_l1

        ab = float(clamped_l1(dc.Tensor(np.array([a])), np.array([b]), 0.1).value)
        ba = float(clamped_l1(dc.Tensor(np.array([b])), np.array([a]), 0.1).value)
        assert ab == ba

    def test_e_reg_cases(self, rng):
        assert float(e_reg(np.zeros(8)).value) == 0.0
        basis = np.zeros(8)
        basis[3] = 1.0
        assert float(e_reg(basis).value) == 1.0
        z = rng.normal(size=8)
        brute = sum(float(v) * float(v) for v in z)
        assert np.isclose(float(e_reg(z).value), brute, rtol=0, atol=1e-12)

    def test_e_dis_arithmetic(self, rng):
        dec = Decoder.init(DEC, rng)
        disc = Discriminator.init(DISC, rng)
        x = rng.uniform(-1, 1, (10, 3))
        z = np.zeros(12)
        # D = 0.5 via zero head
        disc.params.assign("disc.head.W", np.zeros((1, DISC.per_point[-1])))
        disc.params.assign("disc.head.b", np.zeros(1))
        assert np.isclose(float(e_dis(dec, disc, z, x).value), np.log(2), atol=1e-12)
        # D -> 1 via a huge positive bias drives the energy to 0
        disc.params.assign("disc.head.b", np.array([50.0]))
        assert float(e_dis(dec, disc, z, x).value) == 0.0

    def test_e_dis_decreasing_in_d(self, rng):
        dec = Decoder.init(DEC, rng)
        disc = Discriminator.init(DISC, rng)
        x = rng.uniform(-1, 1, (10, 3))
        disc.params.assign("disc.head.W", np.zeros((1, DISC.per_point[-1])))
        vals = []
        for bias in (-2.0, 0.0, 2.0):  # increasing D
            disc.params.assign("disc.head.b", np.array([bias]))
            vals.append(float(e_dis(dec, disc, np.zeros(12), x).value))
        assert vals[0] > vals[1] > vals[2]


class TestOptimize:
    def test_zero_iterations_returns_init(self, decoder, obs):
        cfg = micro_cfg(iterations=0)
        r = optimize_baseline(decoder, obs, cfg)
        want = np.random.default_rng(cfg.seed).normal(0.0, cfg.init_sigma, 12)
        assert np.array_equal(r.code, want)

    def test_best_total_non_increasing(self, decoder, obs):
        r = optimize_baseline(decoder, obs, micro_cfg(iterations=20))
        best = [row["best_total"] for row in r.trace]
        assert all(b <= a for a, b in zip(best, best[1:]))

    def test_returned_energy_not_above_initial(self, decoder, obs):
        r = optimize_baseline(decoder, obs, micro_cfg(iterations=15))
        assert r.trace[-1]["best_total"] <= r.trace[0]["total"]

    def test_reduction_bitwise_vs_baseline(self, decoder, obs, rng):
        cfg = micro_cfg(iterations=10, lambda_dis=0.0)
        a = optimize_baseline(decoder, obs, cfg)
        b = optimize_regularized(decoder, None, None, obs, cfg)
        assert a.trace == b.trace
        assert np.array_equal(a.code, b.code)

    def test_all_paramsets_bitwise_unchanged(self, decoder, obs, rng):
        disc = Discriminator.init(DISC, rng)
        enc = Encoder.init(ENC, rng)
        snap = [decoder.params.copy(), disc.params.copy(), enc.params.copy()]
        optimize_regularized(decoder, disc, enc, obs, micro_cfg(iterations=8))
        assert decoder.params.equals_bitwise(snap[0])
        assert disc.params.equals_bitwise(snap[1])
        assert enc.params.equals_bitwise(snap[2])

    def test_trace_columns(self, decoder, obs):
        r = optimize_baseline(decoder, obs, micro_cfg(iterations=3))
        assert len(r.trace) == 3
        assert set(r.trace[0]) == {"iter", "e_data", "e_reg", "e_dis", "total", "best_total"}


class TestMulticode:
    def test_single_unjittered_code_bitwise_single_path(self, decoder, obs, rng):
        disc = Discriminator.init(DISC, rng)
        enc = Encoder.init(ENC, rng)
        cfg = micro_cfg(iterations=8)
        with dc.no_tape():
            z0 = enc.forward(obs.surf).value.copy()
        single = optimize_regularized(decoder, disc, enc, obs, cfg)
        fused = fuse_multicode(
            decoder, disc, obs, FusionConfig(n_codes=1, jitter_sigma=0.0), cfg, z0
        )
        assert single.trace == fused.trace
        assert np.array_equal(single.code, fused.code)
        fa = decoder.field_on_grid([fused.code], 12, split=4)
        fb = decoder.field_on_grid([single.code], 12)
        assert np.array_equal(fa, fb)

    def test_jittered_codes_differ_and_optimize(self, decoder, obs, rng):
        disc = Discriminator.init(DISC, rng)
        cfg = micro_cfg(iterations=4)
        z0 = rng.normal(0, 0.05, 12)
        r = fuse_multicode(
            decoder, disc, obs, FusionConfig(n_codes=3, jitter_sigma=0.01), cfg, z0
        )
        assert len(r.codes) == 3
        assert not np.array_equal(r.codes[0], r.codes[1])

    def test_fusion_config_validation(self):
        with pytest.raises(ValueError):
            FusionConfig(n_codes=0)


class TestExtractMesh:
    def test_positive_field_yields_empty_mesh_not_error(self, rng):
        dec = Decoder.init(DEC, rng)
        # bias the head high so tanh output is strictly positive everywhere
        dec.params.assign("dec.l8.b", np.array([5.0]))
        mesh = extract_mesh(dec, np.zeros(12), resolution=12)
        assert mesh.is_empty()

    def test_resolution_floor(self, rng):
        dec = Decoder.init(DEC, rng)
        with pytest.raises(ValueError):
            extract_mesh(dec, np.zeros(12), resolution=1)


class TestConfigValidation:
    def test_iterations_nonnegative(self):
        with pytest.raises(ValueError):
            OptimConfig(iterations=-1)

    def test_weights_nonnegative(self):
        with pytest.raises(ValueError):
            OptimConfig(lambda_reg=-0.1)
