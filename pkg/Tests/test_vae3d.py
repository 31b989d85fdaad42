#!/usr/bin/env python3
"""
Unit tests for the 3-D encoder-decoder and its checkpoint format.
"""

import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from Source.errors import ValidationError
from Source.tensor_engine import Tensor
from Source.vae3d import (
    CHECKPOINT_MAGIC,
    GaussianPosterior,
    ModelConfig,
    Vae3D,
    load_checkpoint,
    parameter_count,
    parameter_shapes,
    preset,
    preset_names,
    reparameterize,
    save_checkpoint,
)


def small_config(**overrides) -> ModelConfig:
    values = dict(latent_dim=4, input_extent=8, channels=(2, 3), seed=3)
    values.update(overrides)
    return ModelConfig(**values)


class TestModelConfig(unittest.TestCase):
    """Configuration invariants."""

    def test_extent_must_divide_by_stages(self):
        with self.assertRaises(ValidationError):
            ModelConfig(input_extent=12, channels=(8, 16, 32))

    def test_latent_dim_lower_bound(self):
        with self.assertRaises(ValidationError):
            ModelConfig(latent_dim=1)

    def test_seed_extent_and_flat_features(self):
        cfg = ModelConfig(input_extent=32)
        self.assertEqual(cfg.seed_extent, 2)
        self.assertEqual(cfg.flat_features, 64 * 8)


class TestPresets(unittest.TestCase):
    """Named (alpha, beta) parametrisations."""

    def test_core_presets(self):
        self.assertEqual((preset("InfoVAE-best").alpha, preset("InfoVAE-best").beta), (0.0, 1.0))
        ae = preset("AE")
        self.assertEqual((ae.alpha, ae.beta, ae.deterministic_encoder), (0.0, 0.0, True))
        vae = preset("VAE")
        self.assertEqual((vae.alpha, vae.beta, vae.deterministic_encoder), (1.0, 1.0, False))
        beta_vae = preset("BetaVAE")
        self.assertEqual((beta_vae.alpha, beta_vae.beta), (0.0025, 0.0))

    def test_sweep_presets_listed(self):
        names = preset_names()
        for name in ("AE", "VAE", "BetaVAE", "InfoVAE-best", "InfoVAE-a0-b10", "InfoVAE-a0.001-b1"):
            self.assertIn(name, names)
        self.assertEqual(preset("InfoVAE-a0-b10").beta, 10.0)

    def test_unknown_preset_rejected(self):
        with self.assertRaises(ValidationError):
            preset("WAE")

    def test_overrides_apply(self):
        cfg = preset("VAE", latent_dim=8, input_extent=16)
        self.assertEqual((cfg.latent_dim, cfg.input_extent), (8, 16))


class TestNetwork(unittest.TestCase):
    """Shapes, ranges and determinism of the forward pass."""

    def setUp(self):
        self.cfg = small_config()
        self.model = Vae3D(self.cfg)
        self.x = np.random.default_rng(0).uniform(0.0, 1.0, (2, 8, 8, 8))

    def test_parameter_count_closed_form(self):
        counted = sum(int(np.prod(shape)) for _, shape in parameter_shapes(self.cfg))
        self.assertEqual(parameter_count(self.cfg), counted)
        self.assertEqual(self.model.parameter_vector().size, counted)
        default = ModelConfig()
        self.assertEqual(parameter_count(default), sum(int(np.prod(s)) for _, s in parameter_shapes(default)))

    def test_parameter_count_with_asymmetric_widths(self):
        cfg = small_config(channels=(2, 5))
        # encoder 1->2->5, decoder 5->2->1, heads and fc over flat = 5 * 2**3
        encoder = (1 * 2 * 27 + 2) + (2 * 5 * 27 + 5)
        decoder = (5 * 2 * 27 + 2) + (2 * 1 * 27 + 1)
        flat = 5 * 8
        expected = encoder + decoder + 2 * (flat * 4 + 4) + (4 * flat + flat)
        self.assertEqual(parameter_count(cfg), expected)
        self.assertEqual(Vae3D(cfg).parameter_vector().size, expected)

    def test_encode_shapes(self):
        post = self.model.encode(self.x)
        self.assertEqual(post.mu.shape, (2, 4))
        self.assertEqual(post.logvar.shape, (2, 4))

    def test_encode_rejects_wrong_extent(self):
        with self.assertRaises(ValidationError):
            self.model.encode(np.zeros((1, 16, 16, 16)))

    def test_zero_volume_zero_heads(self):
        values = {n: t.data for n, t in self.model.parameters.items()}
        for head in ("mu.weight", "mu.bias", "logvar.weight", "logvar.bias"):
            values[head] = np.zeros_like(values[head])
        model = Vae3D(self.cfg, values)
        post = model.encode(np.zeros((8, 8, 8)))
        self.assertTrue(np.array_equal(post.mu.data, np.zeros((1, 4))))
        self.assertTrue(np.array_equal(post.logvar.data, np.zeros((1, 4))))

    def test_decode_shape_and_range(self):
        z = np.random.default_rng(1).standard_normal((3, 4))
        out = self.model.decode(z).data
        self.assertEqual(out.shape, (3, 1, 8, 8, 8))
        self.assertTrue(np.all(out > 0.0) and np.all(out < 1.0))

    def test_round_trip_shape(self):
        noise = np.random.default_rng(2).standard_normal((2, 4))
        _, _, xhat = self.model.forward(self.x, noise=noise, deterministic=False)
        self.assertEqual(xhat.shape, (2, 1, 8, 8, 8))

    def test_posterior_is_deterministic(self):
        again = Vae3D(self.cfg)
        a, b = self.model.encode(self.x), again.encode(self.x)
        self.assertTrue(np.array_equal(a.mu.data, b.mu.data))
        self.assertTrue(np.array_equal(a.logvar.data, b.logvar.data))

    def test_logvar_is_clamped(self):
        values = {n: t.data for n, t in self.model.parameters.items()}
        values["logvar.bias"] = np.full(4, 1e3)
        post = Vae3D(self.cfg, values).encode(self.x)
        self.assertTrue(np.all(post.logvar.data <= 20.0))

    def test_embed_matches_mean(self):
        z = self.model.embed(self.x)
        expected = np.vstack([self.model.encode(v[None]).mu.data for v in self.x])
        self.assertTrue(np.array_equal(z, expected))
        self.assertTrue(np.allclose(z, self.model.encode(self.x).mu.data, atol=1e-12))

    def test_embed_row_ignores_other_volumes(self):
        others = np.random.default_rng(9).uniform(0.0, 1.0, (5, 8, 8, 8))
        alone = self.model.embed(self.x[:1])
        crowded = self.model.embed(np.concatenate([others[:3], self.x[:1], others[3:]]))
        self.assertTrue(np.array_equal(crowded[3], alone[0]))
        recon_alone = self.model.reconstruct(self.x[:1])
        recon_crowded = self.model.reconstruct(np.concatenate([others, self.x[:1]]))
        self.assertTrue(np.array_equal(recon_crowded[-1], recon_alone[0]))

    def test_set_parameters_rejects_bad_shape(self):
        with self.assertRaises(ValidationError):
            self.model.set_parameters({"mu.bias": np.zeros(5)})


class TestReparameterize(unittest.TestCase):
    """Sampling from the diagonal Gaussian posterior."""

    def setUp(self):
        self.mu = Tensor(np.array([[0.5, -1.0, 2.0]]))

    def test_zero_noise_returns_mean(self):
        post = GaussianPosterior(self.mu, Tensor(np.array([[0.3, -0.2, 1.0]])))
        z = reparameterize(post, np.zeros((1, 3)))
        self.assertTrue(np.array_equal(z.data, self.mu.data))

    def test_unit_sigma_adds_noise(self):
        post = GaussianPosterior(self.mu, Tensor(np.zeros((1, 3))))
        n = np.array([[0.1, 0.2, -0.3]])
        self.assertTrue(np.allclose(reparameterize(post, n).data, self.mu.data + n, atol=1e-15))

    def test_deterministic_ignores_noise(self):
        post = GaussianPosterior(self.mu, Tensor(np.zeros((1, 3))))
        self.assertIs(reparameterize(post, None, deterministic=True), self.mu)

    def test_stochastic_requires_noise(self):
        post = GaussianPosterior(self.mu, Tensor(np.zeros((1, 3))))
        with self.assertRaises(ValidationError):
            reparameterize(post, None)

    def test_monte_carlo_variance(self):
        n = 10_000
        post = GaussianPosterior(Tensor(np.zeros((n, 2))), Tensor(np.full((n, 2), np.log(4.0))))
        noise = np.random.default_rng(9).standard_normal((n, 2))
        variance = reparameterize(post, noise).data.var(axis=0)
        self.assertTrue(np.all(np.abs(variance - 4.0) < 0.4))


class TestCheckpoint(unittest.TestCase):
    """LVW1 save/load."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "model.lvw"

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_is_bit_exact(self):
        cfg = small_config(alpha=0.0025, beta=0.0, deterministic_encoder=True, seed=2**63 + 5)
        model = Vae3D(cfg)
        save_checkpoint(model, self.path)
        loaded = load_checkpoint(self.path)
        self.assertEqual(loaded.config, cfg)
        self.assertTrue(np.array_equal(loaded.parameter_vector(), model.parameter_vector()))
        copy = Path(self.tmp.name) / "again.lvw"
        save_checkpoint(loaded, copy)
        self.assertEqual(self.path.read_bytes(), copy.read_bytes())

    def test_layout(self):
        cfg = small_config()
        save_checkpoint(Vae3D(cfg), self.path)
        blob = self.path.read_bytes()
        self.assertEqual(blob[:4], CHECKPOINT_MAGIC)
        header = 4 + 16 + 12 + 4 * cfg.stages + 12 + 8
        self.assertEqual(len(blob), header + 8 * parameter_count(cfg))

    def test_bad_magic_rejected(self):
        save_checkpoint(Vae3D(small_config()), self.path)
        blob = bytearray(self.path.read_bytes())
        blob[0:4] = b"XXXX"
        self.path.write_bytes(bytes(blob))
        with self.assertRaises(ValidationError):
            load_checkpoint(self.path)

    def test_wide_last_stage_loads_back(self):
        model = Vae3D(small_config(channels=(2, 6)))
        save_checkpoint(model, self.path)
        loaded = load_checkpoint(self.path)
        self.assertTrue(np.array_equal(loaded.parameter_vector(), model.parameter_vector()))

    def test_truncated_payload_rejected(self):
        save_checkpoint(Vae3D(small_config()), self.path)
        self.path.write_bytes(self.path.read_bytes()[:-8])
        with self.assertRaises(ValidationError):
            load_checkpoint(self.path)


if __name__ == "__main__":
    unittest.main()
