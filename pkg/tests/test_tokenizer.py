"""Tokenization algebra, conv autoencoder probes, linear bypass path."""

from __future__ import annotations

import numpy as np
import pytest

from colflow import numerics as N
from colflow.numerics import ContractViolation, Tape, Tensor, backward
from colflow.tokenizer import (
    ConvTokenizer,
    LinearTokenizer,
    LinearTokenizerConfig,
    Posterior,
    TokenizerConfig,
    columnize,
    rasterize,
    tokenizer_loss,
)
from colflow.training import TokTrainConfig, train_tokenizer

from _oracles import check_gradient


def _ident(n):
    return Tensor(np.eye(n, dtype=np.float32))


class TestColumnizeRasterize:
    def test_degenerate_reshape_h1_c1(self):
        rng = np.random.default_rng(0)
        fmap = Tensor(rng.standard_normal((1, 5, 1)).astype(np.float32))
        tokens = columnize(fmap, _ident(1))
        np.testing.assert_array_equal(tokens.data[:, 0], fmap.data[0, :, 0])

    def test_flatten_convention_explicit(self):
        # fmap rows [[a, b], [c, d]]: column 0 holds (a, c), column 1 (b, d).
        fmap = Tensor(np.array([[[1.0], [2.0]], [[3.0], [4.0]]], dtype=np.float32))
        tokens = columnize(fmap, _ident(2))
        np.testing.assert_array_equal(tokens.data, [[1.0, 3.0], [2.0, 4.0]])

    def test_roundtrip_identity_bit_exact(self):
        rng = np.random.default_rng(1)
        for h, w, c in [(2, 4, 3), (4, 8, 1), (1, 6, 5)]:
            fmap = Tensor(rng.standard_normal((h, w, c)).astype(np.float32))
            eye = _ident(h * c)
            back = rasterize(columnize(fmap, eye), eye, feat_h=h)
            assert back.data.tobytes() == fmap.data.tobytes()

    def test_roundtrip_batched(self):
        rng = np.random.default_rng(2)
        fmap = Tensor(rng.standard_normal((3, 2, 4, 3)).astype(np.float32))
        eye = _ident(6)
        back = rasterize(columnize(fmap, eye), eye, feat_h=2)
        assert back.data.tobytes() == fmap.data.tobytes()

    def test_column_locality(self):
        rng = np.random.default_rng(3)
        fmap = rng.standard_normal((4, 6, 3)).astype(np.float32)
        proj = Tensor(rng.standard_normal((12, 5)).astype(np.float32))
        base = columnize(Tensor(fmap), proj).data
        j = 2
        pert = fmap.copy()
        pert[:, [0, 1, 3, 4, 5], :] += 1.0  # every column except j
        out = columnize(Tensor(pert), proj).data
        np.testing.assert_array_equal(out[j], base[j])
        assert np.abs(out[j + 1] - base[j + 1]).max() > 1e-6

    def test_pseudo_inverse_roundtrip_error_is_nullspace_energy(self):
        rng = np.random.default_rng(4)
        hc, cp = 12, 5
        p = rng.standard_normal((hc, cp))
        p_inv = np.linalg.pinv(p)
        fmap = Tensor(rng.standard_normal((4, 6, 3)))
        tokens = columnize(fmap, Tensor(p))
        back = rasterize(tokens, Tensor(p_inv), feat_h=4)
        err = float(((back.data - fmap.data) ** 2).sum())
        # Independent oracle: energy outside the column space of P, via SVD.
        u, s, _ = np.linalg.svd(p, full_matrices=True)
        basis = u[:, : np.sum(s > 1e-12)]
        cols = fmap.data.transpose(1, 0, 2).reshape(6, hc)
        para = cols @ basis @ basis.T
        null_energy = float(((cols - para) ** 2).sum())
        assert abs(err - null_energy) < 1e-8 * max(1.0, null_energy)

    def test_zero_tokens_zero_feature_map(self):
        tokens = Tensor(np.zeros((4, 3), dtype=np.float32))
        proj = Tensor(np.random.default_rng(5).standard_normal((3, 8)).astype(np.float32))
        fmap = rasterize(tokens, proj, feat_h=2)
        np.testing.assert_array_equal(fmap.data, np.zeros((2, 4, 4), dtype=np.float32))

    def test_dimension_mismatch_errors(self):
        fmap = Tensor(np.zeros((2, 3, 2), dtype=np.float32))
        with pytest.raises(ContractViolation):
            columnize(fmap, _ident(5))
        with pytest.raises(ContractViolation):
            rasterize(Tensor(np.zeros((3, 4), dtype=np.float32)), _ident(5))


def small_cfg(**kw) -> TokenizerConfig:
    base = dict(image_h=32, image_w=32, downsample_f=4, token_channels=8,
                latent_channels=16, base_channels=8, seed=0)
    base.update(kw)
    return TokenizerConfig(**base)


class TestConvTokenizer:
    def test_posterior_shapes(self):
        tok = ConvTokenizer(small_cfg())
        img = Tensor(np.zeros((32, 32, 3), dtype=np.float32))
        post = tok.encode_image(img)
        assert post.mu.shape == (8, 8)
        assert post.log_var.shape == (8, 8)

    def test_wrong_image_size_rejected(self):
        tok = ConvTokenizer(small_cfg())
        with pytest.raises(ContractViolation):
            tok.encode_image(Tensor(np.zeros((16, 32, 3), dtype=np.float32)))

    def test_horizontally_constant_image_gives_equal_columns(self):
        tok = ConvTokenizer(small_cfg())
        rng = np.random.default_rng(6)
        col = rng.uniform(-1, 1, size=(32, 1, 3)).astype(np.float32)
        img = Tensor(np.repeat(col, 32, axis=1))
        mu = tok.encode_image(img).mu.data
        spread = np.abs(mu - mu[0]).max()
        assert spread <= 1e-5

    def test_receptive_field_locality(self):
        tok = ConvTokenizer(small_cfg())
        rng = np.random.default_rng(7)
        img = rng.uniform(-1, 1, size=(32, 32, 3)).astype(np.float32)
        base = tok.encode_image(Tensor(img)).mu.data
        j = 4
        pert = img.copy()
        pert[:, 4 * j:4 * j + 4, :] += 0.5
        out = tok.encode_image(Tensor(pert)).mu.data
        # Two stride-2 3x3 stages reach +-3 pixels: tokens beyond +-1 band
        # cannot see the perturbed band.
        for m in range(8):
            if abs(m - j) >= 2:
                np.testing.assert_array_equal(out[m], base[m])
        assert np.abs(out[j] - base[j]).max() > 1e-6

    def test_decode_shape_and_range(self):
        tok = ConvTokenizer(small_cfg())
        rng = np.random.default_rng(8)
        tokens = Tensor(rng.standard_normal((8, 8)).astype(np.float32) * 5)
        img = tok.decode_tokens(tokens)
        assert img.shape == (32, 32, 3)
        assert img.data.min() >= -1.0 and img.data.max() <= 1.0


class TestTokenizerLoss:
    def test_perfect_reconstruction_standard_posterior_zero(self):
        cfg = small_cfg()
        img = Tensor(np.random.default_rng(9).uniform(-1, 1, (4, 4, 3)).astype(np.float32))
        post = Posterior(mu=Tensor(np.zeros((2, 2), dtype=np.float32)),
                         log_var=Tensor(np.zeros((2, 2), dtype=np.float32)))
        total, parts = tokenizer_loss(img, img, post, cfg)
        assert total.item() == 0.0
        assert parts["rec"] == 0.0 and parts["kl"] == 0.0

    def test_kl_closed_form_unit_mean(self):
        # KL(N(1,1) || N(0,1)) = 0.5 * (mu^2 + sigma^2 - 1 - log sigma^2) = 0.5
        post = Posterior(mu=Tensor(np.ones((1, 1))), log_var=Tensor(np.zeros((1, 1))))
        assert abs(post.kl().item() - 0.5) < 1e-12

    def test_loss_gradcheck(self):
        cfg = small_cfg()
        rng = np.random.default_rng(10)
        img = rng.uniform(-1, 1, (2, 2, 3))
        recon = rng.uniform(-1, 1, (2, 2, 3))
        mu = rng.standard_normal((2, 2)) * 0.5
        lv = rng.standard_normal((2, 2)) * 0.3

        def op_fn(r, m, v):
            total, _ = tokenizer_loss(Tensor(img, dtype="f64"), r, Posterior(m, v), cfg)
            return total

        def np_fn(r, m, v):
            rec = ((r - img) ** 2).mean()
            kl = 0.5 * (m ** 2 + np.exp(v) - 1 - v).mean()
            return float(cfg.lambda_rec * rec + cfg.lambda_reg * kl)

        for wrt in range(3):
            check_gradient(op_fn, np_fn, [recon, mu, lv], wrt=wrt)


class TestLinearTokenizer:
    def test_exact_mode_roundtrip_bit_identical(self):
        cfg = LinearTokenizerConfig(image_h=4, image_w=8, n_tokens=4,
                                    token_channels=4 * 2 * 3, exact=True)
        tok = LinearTokenizer(cfg)
        rng = np.random.default_rng(11)
        img = rng.uniform(-1, 1, (4, 8, 3)).astype(np.float32)
        back = tok.decode(tok.encode(img))
        assert back.tobytes() == img.tobytes()

    def test_exact_mode_insufficient_channels_rejected(self):
        with pytest.raises(ContractViolation):
            LinearTokenizer(LinearTokenizerConfig(image_h=4, image_w=8, n_tokens=4,
                                                  token_channels=5, exact=True))

    def test_shift_equivariance_exact(self):
        cfg = LinearTokenizerConfig(image_h=8, image_w=16, n_tokens=4, token_channels=6)
        tok = LinearTokenizer(cfg)
        rng = np.random.default_rng(12)
        img = rng.uniform(-1, 1, (8, 16, 3)).astype(np.float32)
        shifted = np.roll(img, cfg.band_width, axis=1)
        np.testing.assert_array_equal(tok.encode(shifted), np.roll(tok.encode(img), 1, axis=0))

    def test_band_locality(self):
        cfg = LinearTokenizerConfig(image_h=8, image_w=16, n_tokens=4, token_channels=6)
        tok = LinearTokenizer(cfg)
        rng = np.random.default_rng(13)
        img = rng.uniform(-1, 1, (8, 16, 3)).astype(np.float32)
        base = tok.encode(img)
        j = 1
        pert = img.copy()
        pert[:, : cfg.band_width, :] = 0.0  # band 0
        pert[:, 2 * cfg.band_width:, :] = 0.0  # bands 2, 3
        out = tok.encode(pert)
        np.testing.assert_array_equal(out[j], base[j])

    def test_batched_encode_matches_single(self):
        cfg = LinearTokenizerConfig(image_h=8, image_w=16, n_tokens=4, token_channels=6)
        tok = LinearTokenizer(cfg)
        rng = np.random.default_rng(14)
        imgs = rng.uniform(-1, 1, (3, 8, 16, 3)).astype(np.float32)
        batch = tok.encode(imgs)
        for i in range(3):
            np.testing.assert_array_equal(batch[i], tok.encode(imgs[i]))


def _texture_images(rng, n, size=32):
    """Smooth random sinusoid mixtures in [-1, 1], (n, size, size, 3)."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    out = np.zeros((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        img = np.zeros((size, size))
        for _ in range(3):
            fx, fy = rng.integers(1, 4, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            img += rng.uniform(0.2, 0.5) * np.sin(2 * np.pi * (fx * xx + fy * yy) / size + phase)
        out[i] = np.clip(img, -1, 1)[..., None]
    return out


@pytest.fixture(scope="module")
def trained_tokenizer():
    cfg = small_cfg()
    tok = ConvTokenizer(cfg)
    rng = np.random.default_rng(20)
    images = _texture_images(rng, 96)
    history = train_tokenizer(tok, images, TokTrainConfig(epochs=8, batch_size=16, lr=3e-3, seed=1))
    threshold = 1.5 * history["rec"][-1]
    return tok, images, history, threshold


class TestTrainedTokenizer:
    def test_training_reduces_reconstruction(self, trained_tokenizer):
        _, _, history, _ = trained_tokenizer
        assert history["rec"][-1] < history["rec"][0]

    def test_reconstruction_below_recorded_threshold(self, trained_tokenizer):
        tok, images, _, threshold = trained_tokenizer
        rng = np.random.default_rng(21)
        batch = Tensor(images[:8])
        post = tok.encode_image(batch)
        recon = tok.decode_raw(post.sample(rng)).data
        mse = float(((recon - images[:8]) ** 2).mean())
        assert mse <= threshold

    def test_progressive_substitution_decreases_error(self, trained_tokenizer):
        # Column-by-column replacement of random tokens with encoded tokens
        # must (non-strictly) reduce reconstruction MSE on >= 90% of steps.
        tok, images, _, _ = trained_tokenizer
        rng = np.random.default_rng(22)
        improved = 0
        total = 0
        for i in range(4):
            img = images[i]
            encoded = tok.encode_image(Tensor(img)).mu.data
            current = rng.standard_normal(encoded.shape).astype(np.float32)
            prev_err = float(((tok.decode_tokens(Tensor(current)).data - img) ** 2).mean())
            for j in range(encoded.shape[0]):
                current[j] = encoded[j]
                err = float(((tok.decode_tokens(Tensor(current)).data - img) ** 2).mean())
                improved += int(err <= prev_err + 1e-9)
                total += 1
                prev_err = err
        assert improved / total >= 0.9
