"""Column-wise 1D tokenization.

An image becomes a sequence of W tokens, one per vertical column band, via
two routes:

* `ConvTokenizer` — a small convolutional autoencoder (reflect-padded,
  stride-2 stages) around the columnize/rasterize reshapes, trained with a
  reconstruction + KL objective over a diagonal-Gaussian token posterior.
* `LinearTokenizer` — a deterministic per-band linear projection of raw
  pixels, used to isolate the generator from autoencoder quality.

Flatten convention: a feature-map column (H, C) flattens height-major,
then channel — element index h*C + c. Both directions of every reshape in
this module commit to that order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from colflow import numerics as N
from colflow.numerics import ContractViolation, Tensor

LOG_VAR_LO = -30.0
LOG_VAR_HI = 20.0


@dataclass
class TokenizerConfig:
    image_h: int = 64
    image_w: int = 64
    downsample_f: int = 4
    token_channels: int = 16
    latent_channels: int = 64
    base_channels: int = 32
    lambda_rec: float = 1.0
    lambda_reg: float = 0.01
    # Cited but out-of-scope loss weights, kept as named constants so configs
    # stay expressible: perceptual / adversarial / semantic alignment.
    lambda_p: float = 1.0
    lambda_gan: float = 0.5
    lambda_align: float = 5.0
    seed: int = 0

    @property
    def n_tokens(self) -> int:
        if self.image_w % self.downsample_f != 0:
            raise ContractViolation(
                f"image_w={self.image_w} not divisible by downsample_f={self.downsample_f}"
            )
        return self.image_w // self.downsample_f

    @property
    def feat_h(self) -> int:
        return self.image_h // self.downsample_f


@dataclass
class Posterior:
    """Diagonal Gaussian over a token sequence; mu/log_var both (..., W, C')."""

    mu: Tensor
    log_var: Tensor

    def sample(self, rng: np.random.Generator) -> Tensor:
        eta = Tensor(rng.standard_normal(self.mu.shape).astype(self.mu.data.dtype))
        std = N.exp(N.scale(self.log_var, 0.5))
        return N.add(self.mu, N.mul(std, eta))

    def kl(self) -> Tensor:
        """Mean per-element KL against N(0, I): 0.5*(mu^2 + sigma^2 - 1 - log sigma^2)."""
        var = N.exp(self.log_var)
        term = N.sub(N.add(N.mul(self.mu, self.mu), var), N.add(self.log_var, 1.0))
        return N.scale(N.mean(term), 0.5)


def columnize(fmap: Tensor, proj_w: Tensor, proj_b: Tensor | None = None) -> Tensor:
    """(H, W, C) or (B, H, W, C) -> (W, C') or (B, W, C') token sequence.

    Token j is the projection of column j's height-major flatten, so it is a
    function of fmap[:, j, :] only.
    """
    single = fmap.ndim == 3
    x = N.reshape(fmap, (1, *fmap.shape)) if single else fmap
    if x.ndim != 4:
        raise ContractViolation(f"columnize: feature map rank {fmap.ndim}, want 3 or 4")
    b, h, w, c = x.shape
    if proj_w.shape[0] != h * c:
        raise ContractViolation(
            f"columnize: projection input dim {proj_w.shape[0]} != H*C = {h * c}"
        )
    cols = N.reshape(N.permute(x, (0, 2, 1, 3)), (b, w, h * c))
    tokens = N.matmul(cols, proj_w)
    if proj_b is not None:
        tokens = N.add(tokens, proj_b)
    return N.reshape(tokens, tokens.shape[1:]) if single else tokens


def rasterize(tokens: Tensor, proj_w: Tensor, proj_b: Tensor | None = None,
              feat_h: int | None = None) -> Tensor:
    """(W, C') or (B, W, C') -> (H, W, C) or (B, H, W, C); exact inverse reshape.

    `feat_h` fixes H when it cannot be inferred; H*C must equal the
    projection output dim.
    """
    single = tokens.ndim == 2
    t = N.reshape(tokens, (1, *tokens.shape)) if single else tokens
    if t.ndim != 3:
        raise ContractViolation(f"rasterize: token rank {tokens.ndim}, want 2 or 3")
    b, w, cp = t.shape
    if proj_w.shape[0] != cp:
        raise ContractViolation(
            f"rasterize: projection input dim {proj_w.shape[0]} != C' = {cp}"
        )
    hc = proj_w.shape[1]
    h = feat_h if feat_h is not None else int(np.sqrt(hc))
    if hc % h != 0:
        raise ContractViolation(f"rasterize: H*C = {hc} not divisible by H = {h}")
    c = hc // h
    cols = N.matmul(t, proj_w)
    if proj_b is not None:
        cols = N.add(cols, proj_b)
    fmap = N.permute(N.reshape(cols, (b, w, h, c)), (0, 2, 1, 3))
    return N.reshape(fmap, fmap.shape[1:]) if single else fmap


def tokenizer_loss(img: Tensor, recon: Tensor, posterior: Posterior,
                   cfg: TokenizerConfig) -> tuple[Tensor, dict[str, float]]:
    """lambda_rec * MSE(img, recon) + lambda_reg * KL(posterior || N(0,1))."""
    if img.shape != recon.shape:
        raise ContractViolation(f"tokenizer_loss: img {img.shape} vs recon {recon.shape}")
    diff = N.sub(recon, img)
    rec = N.mean(N.mul(diff, diff))
    kl = posterior.kl()
    total = N.add(N.scale(rec, cfg.lambda_rec), N.scale(kl, cfg.lambda_reg))
    return total, {"rec": rec.item(), "kl": kl.item(), "total": total.item()}


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape) * std
    return np.clip(x, -2 * std, 2 * std).astype(np.float32)


class ConvTokenizer:
    """Two stride-2 reflect-padded conv stages around columnize/rasterize.

    64x64x3 pixels -> 16x16x64 features -> 16 tokens of C' channels, and back.
    Channelwise layer norm keeps every stage column-local, so token j depends
    only on pixels within the encoder's receptive field of band j.
    """

    def __init__(self, cfg: TokenizerConfig, dtype: str = "f32"):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c0, c1 = cfg.base_channels, cfg.latent_channels
        hc = cfg.feat_h * c1
        cp = cfg.token_channels

        def t(shape, std=0.02):
            return Tensor(_trunc_normal(rng, shape, std), dtype=dtype, requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=np.float32), dtype=dtype, requires_grad=True)

        self.params: dict[str, Tensor] = {
            "enc.conv1.w": t((3, 3, 3, c0), 0.1),
            "enc.conv1.b": zeros(c0),
            "enc.conv2.w": t((3, 3, c0, c1), 0.05),
            "enc.conv2.b": zeros(c1),
            "enc.proj.w": t((hc, 2 * cp), 0.02),
            "enc.proj.b": zeros(2 * cp),
            "dec.proj.w": t((cp, hc), 0.02),
            "dec.proj.b": zeros(hc),
            "dec.conv1.w": t((3, 3, c1, c0), 0.05),
            "dec.conv1.b": zeros(c0),
            "dec.conv2.w": t((3, 3, c0, 3), 0.1),
            "dec.conv2.b": zeros(3),
        }

    def _astype(self, dtype: str) -> None:
        for k, p in self.params.items():
            p.data = p.data.astype(np.float32 if dtype == "f32" else np.float64)

    def encode_image(self, img: Tensor) -> Posterior:
        """Pixels (image_h, image_w, 3) or batched -> Posterior over (W, C') tokens."""
        cfg = self.cfg
        single = img.ndim == 3
        x = N.reshape(img, (1, *img.shape)) if single else img
        if x.shape[1] != cfg.image_h or x.shape[2] != cfg.image_w or x.shape[3] != 3:
            raise ContractViolation(
                f"encode_image: got {tuple(img.shape)}, config wants "
                f"{(cfg.image_h, cfg.image_w, 3)}"
            )
        p = self.params
        h = N.gelu(N.layer_norm(N.conv2d(x, p["enc.conv1.w"], p["enc.conv1.b"], stride=2)))
        h = N.gelu(N.layer_norm(N.conv2d(h, p["enc.conv2.w"], p["enc.conv2.b"], stride=2)))
        stats = columnize(h, p["enc.proj.w"], p["enc.proj.b"])
        cp = cfg.token_channels
        mu = N.slice_(stats, (slice(None), slice(None), slice(0, cp)))
        log_var = N.clip(
            N.slice_(stats, (slice(None), slice(None), slice(cp, 2 * cp))),
            LOG_VAR_LO, LOG_VAR_HI,
        )
        if single:
            mu = N.reshape(mu, mu.shape[1:])
            log_var = N.reshape(log_var, log_var.shape[1:])
        return Posterior(mu=mu, log_var=log_var)

    def decode_raw(self, tokens: Tensor) -> Tensor:
        """Decode without the final clamp (training path; gradients intact)."""
        cfg = self.cfg
        single = tokens.ndim == 2
        t = N.reshape(tokens, (1, *tokens.shape)) if single else tokens
        if t.shape[-1] != cfg.token_channels:
            raise ContractViolation(
                f"decode_tokens: token channels {t.shape[-1]} != {cfg.token_channels}"
            )
        p = self.params
        fmap = rasterize(t, p["dec.proj.w"], p["dec.proj.b"], feat_h=cfg.feat_h)
        h = N.gelu(N.layer_norm(fmap))
        h = N.upsample_nearest2d(h, 2)
        h = N.gelu(N.layer_norm(N.conv2d(h, p["dec.conv1.w"], p["dec.conv1.b"], stride=1)))
        h = N.upsample_nearest2d(h, 2)
        out = N.conv2d(h, p["dec.conv2.w"], p["dec.conv2.b"], stride=1)
        return N.reshape(out, out.shape[1:]) if single else out

    def decode_tokens(self, tokens: Tensor) -> Tensor:
        """Tokens -> pixels in [-1, 1] (tanh-free clamp)."""
        out = self.decode_raw(tokens)
        return Tensor(np.clip(out.data, -1.0, 1.0))

    def encode_tokens(self, img: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        """Convenience: posterior mean (or a sample when rng is given)."""
        post = self.encode_image(img)
        return post.sample(rng) if rng is not None else post.mu


@dataclass
class LinearTokenizerConfig:
    image_h: int = 64
    image_w: int = 64
    n_tokens: int = 16
    token_channels: int = 16
    seed: int = 0
    exact: bool = False

    @property
    def band_width(self) -> int:
        if self.image_w % self.n_tokens != 0:
            raise ContractViolation(
                f"image_w={self.image_w} not divisible by n_tokens={self.n_tokens}"
            )
        return self.image_w // self.n_tokens

    @property
    def band_dim(self) -> int:
        return self.image_h * self.band_width * 3


class LinearTokenizer:
    """Deterministic per-band linear projection of raw pixel columns.

    Every band uses the same projection, so the map is exactly
    shift-equivariant across column bands. In exact mode (C' >= band dim)
    the projection is a zero-padded identity and the round trip is
    bit-identical; otherwise a fixed seeded orthonormal projection is used
    and decode reconstructs the band's best approximation in its span.
    """

    def __init__(self, cfg: LinearTokenizerConfig):
        self.cfg = cfg
        d = cfg.band_dim
        cp = cfg.token_channels
        if cfg.exact and cp < d:
            raise ContractViolation(
                f"linear tokenizer exact mode needs C' >= {d}, got {cp}"
            )
        if cp >= d:
            proj = np.zeros((d, cp), dtype=np.float32)
            proj[np.arange(d), np.arange(d)] = 1.0
            self._exact = True
        else:
            rng = np.random.default_rng(cfg.seed)
            raw = rng.standard_normal((d, cp))
            q, _ = np.linalg.qr(raw)
            proj = q.astype(np.float32)
            self._exact = False
        self.proj = proj  # (band_dim, C'); decode uses the transpose

    def encode(self, img: np.ndarray | Tensor) -> np.ndarray:
        """(H, W, 3) or (B, H, W, 3) pixels -> (W_tok, C') or (B, W_tok, C')."""
        x = img.data if isinstance(img, Tensor) else np.asarray(img)
        single = x.ndim == 3
        if single:
            x = x[None]
        cfg = self.cfg
        b = x.shape[0]
        if x.shape[1:] != (cfg.image_h, cfg.image_w, 3):
            raise ContractViolation(
                f"linear encode: got {x.shape[1:]}, want {(cfg.image_h, cfg.image_w, 3)}"
            )
        s = cfg.band_width
        bands = x.reshape(b, cfg.image_h, cfg.n_tokens, s, 3)
        flat = bands.transpose(0, 2, 1, 3, 4).reshape(b, cfg.n_tokens, cfg.band_dim)
        tokens = flat @ self.proj
        return tokens[0] if single else tokens

    def decode(self, tokens: np.ndarray | Tensor) -> np.ndarray:
        """(W_tok, C') or batched -> pixels; exact inverse in exact mode."""
        t = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
        single = t.ndim == 2
        if single:
            t = t[None]
        cfg = self.cfg
        b, w_tok, _ = t.shape
        s = cfg.band_width
        if self._exact:
            flat = t[:, :, :cfg.band_dim]
        else:
            flat = t @ self.proj.T
        bands = flat.reshape(b, w_tok, cfg.image_h, s, 3).transpose(0, 2, 1, 3, 4)
        img = bands.reshape(b, cfg.image_h, w_tok * s, 3)
        return img[0] if single else img
