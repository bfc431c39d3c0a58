"""ETB format, synthetic corpora statistics, checkpoint integrity."""

from __future__ import annotations

import numpy as np
import pytest

from colflow.dataio import (
    EtbBadMagic,
    EtbTruncated,
    EtbUnknownDtype,
    IntegrityError,
    SyntheticSpec,
    augment_images,
    build_corpus,
    load_checkpoint,
    read_etb,
    save_checkpoint,
    synth_center_biased,
    synth_shift_invariant,
    write_etb,
)
from colflow.generator import FlowHeadConfig, Generator, GeneratorConfig
from colflow.numerics import Tensor
from colflow.tokenizer import ConvTokenizer, LinearTokenizer, LinearTokenizerConfig, TokenizerConfig


class TestEtb:
    @pytest.mark.parametrize("dtype", ["f32", "f64"])
    @pytest.mark.parametrize("shape", [(), (4,), (3, 5), (2, 3, 4), (2, 2, 2, 2)])
    def test_roundtrip_bit_exact(self, tmp_path, dtype, shape):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal(shape).astype(np.float32 if dtype == "f32" else np.float64)
        path = tmp_path / "t.etb"
        write_etb(path, arr)
        back = read_etb(path)
        assert back.data.dtype == arr.dtype
        assert back.data.shape == arr.shape
        assert back.data.tobytes() == arr.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.etb"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(EtbBadMagic):
            read_etb(path)

    def test_unknown_dtype(self, tmp_path):
        path = tmp_path / "odd.etb"
        path.write_bytes(b"ETB1" + bytes([9, 0]))
        with pytest.raises(EtbUnknownDtype):
            read_etb(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "cut.etb"
        write_etb(path, np.arange(8.0, dtype=np.float32))
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(EtbTruncated):
            read_etb(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "hdr.etb"
        path.write_bytes(b"ETB1\x00")
        with pytest.raises(EtbTruncated):
            read_etb(path)


class TestSyntheticCorpora:
    def test_determinism_bit_identical(self):
        spec = SyntheticSpec(seed=5)
        a, la = synth_shift_invariant(spec, 17)
        b, lb = synth_shift_invariant(spec, 17)
        assert a.tobytes() == b.tobytes() and la == lb
        c, _ = synth_center_biased(SyntheticSpec(kind="center_biased_blobs", seed=5), 3)
        d, _ = synth_center_biased(SyntheticSpec(kind="center_biased_blobs", seed=5), 3)
        assert c.tobytes() == d.tobytes()

    def test_shift_invariant_column_marginal_flat(self):
        # Column-mean over many samples is constant across columns up to
        # Monte-Carlo error (law invariant to cyclic shifts).
        spec = SyntheticSpec(image_h=16, image_w=32, seed=1)
        images, _ = build_corpus(spec, 800)
        col_mean = images[..., 0].mean(axis=(0, 1))
        spread = np.abs(col_mean - col_mean.mean()).max()
        assert spread < 4.0 / np.sqrt(800 * 16)

    def test_center_biased_energy_profile(self):
        spec = SyntheticSpec(kind="center_biased_blobs", image_h=32, image_w=48, seed=2)
        images, _ = build_corpus(spec, 300)
        col_var = images[..., 0].var(axis=(0, 1))
        w = spec.image_w
        center = col_var[w // 3: w - w // 3]
        edges = np.concatenate([col_var[: w // 3], col_var[w - w // 3:]])
        assert np.argmax(col_var) >= w // 3 and np.argmax(col_var) < w - w // 3
        assert center.mean() > 2.0 * edges.mean()

    def test_classes_linearly_separable(self):
        spec = SyntheticSpec(n_classes=2, image_h=16, image_w=16, seed=3)
        images, labels = build_corpus(spec, 200)
        x = images.reshape(len(images), -1)
        y = labels
        # Least-squares linear probe fit on the first half (labels alternate
        # with index, so both halves are balanced), scored on the second.
        x_tr, y_tr, x_te, y_te = x[:100], y[:100], x[100:], y[100:]
        w, *_ = np.linalg.lstsq(
            np.hstack([x_tr, np.ones((len(x_tr), 1))]), 2.0 * y_tr - 1.0, rcond=None
        )
        pred = (np.hstack([x_te, np.ones((len(x_te), 1))]) @ w) > 0
        assert (pred == y_te).mean() > 0.9

    def test_corpus_stationarity_contrast(self):
        # Column statistics of the shift-invariant corpus sit inside the
        # edge-band scatter; the center-biased corpus breaks out of it.
        from colflow.analysis import column_stationarity

        scores = {}
        for kind in ("shift_invariant_texture", "center_biased_blobs"):
            spec = SyntheticSpec(kind=kind, image_h=32, image_w=48, n_classes=4, seed=0)
            images, _ = build_corpus(spec, 128)
            cols = images.transpose(0, 2, 1, 3).reshape(128, 48, -1)
            edges = list(range(0, 16)) + list(range(32, 48))
            out = column_stationarity(cols, train_len=48, w=3, reference=edges)
            scores[kind] = max(np.abs(out["z_mean"][16:32]).max(),
                               np.abs(out["z_std"][16:32]).max())
        assert scores["shift_invariant_texture"] <= 3.0
        assert scores["center_biased_blobs"] > 3.0

    def test_augmentation_preserves_shapes_and_determinism(self):
        spec = SyntheticSpec(seed=4, image_h=8, image_w=16)
        images, _ = build_corpus(spec, 10)
        a = augment_images(images, spec.kind, np.random.default_rng(7))
        b = augment_images(images, spec.kind, np.random.default_rng(7))
        assert a.shape == images.shape
        assert a.tobytes() == b.tobytes()


def tiny_model():
    return Generator(GeneratorConfig(
        n_layers=1, hidden_dim=8, n_heads=2, window_w=2, cond_seq_len=2,
        token_channels=4, n_classes=2, max_seq_len=6,
        flow_head=FlowHeadConfig(mlp_layers=1, mlp_hidden=8, t_embed_dim=4), seed=6))


class TestCheckpoints:
    def test_save_load_forward_probe_bit_exact(self, tmp_path):
        model = tiny_model()
        tok = LinearTokenizer(LinearTokenizerConfig(image_h=8, image_w=8, n_tokens=2,
                                                    token_channels=4))
        ckpt = tmp_path / "ckpt"
        save_checkpoint(str(ckpt), model, tok, cfg_end=1.25, provenance={"seed": 1})
        loaded, tok2, manifest = load_checkpoint(str(ckpt))
        rng = np.random.default_rng(8)
        x = Tensor(rng.standard_normal((1, 3, 4)).astype(np.float32))
        a = model.forward(x, np.array([1])).data
        b = loaded.forward(x, np.array([1])).data
        assert a.tobytes() == b.tobytes()
        assert manifest["cfg_end"] == 1.25
        assert isinstance(tok2, LinearTokenizer)

    def test_ema_and_raw_both_loadable(self, tmp_path):
        model = tiny_model()
        tok = LinearTokenizer(LinearTokenizerConfig(image_h=8, image_w=8, n_tokens=2,
                                                    token_channels=4))
        ema = {k: v.data * 0.5 for k, v in model.params.items()}
        ckpt = tmp_path / "ckpt"
        save_checkpoint(str(ckpt), model, tok, ema_arrays=ema)
        raw, _, _ = load_checkpoint(str(ckpt), ema=False)
        shadow, _, _ = load_checkpoint(str(ckpt), ema=True)
        np.testing.assert_array_equal(shadow.params["in.w"].data * 2.0,
                                      raw.params["in.w"].data)

    def test_corruption_detected_by_hash(self, tmp_path):
        model = tiny_model()
        tok = LinearTokenizer(LinearTokenizerConfig(image_h=8, image_w=8, n_tokens=2,
                                                    token_channels=4))
        ckpt = tmp_path / "ckpt"
        save_checkpoint(str(ckpt), model, tok)
        victim = ckpt / "params" / "in.w.etb"
        raw = bytearray(victim.read_bytes())
        raw[-1] ^= 0xFF
        victim.write_bytes(bytes(raw))
        with pytest.raises(IntegrityError):
            load_checkpoint(str(ckpt))

    def test_conv_tokenizer_roundtrip(self, tmp_path):
        model = tiny_model()
        tok = ConvTokenizer(TokenizerConfig(image_h=8, image_w=8, downsample_f=4,
                                            token_channels=4, latent_channels=8,
                                            base_channels=4))
        ckpt = tmp_path / "ckpt"
        save_checkpoint(str(ckpt), model, tok)
        _, tok2, _ = load_checkpoint(str(ckpt))
        img = Tensor(np.random.default_rng(9).uniform(-1, 1, (8, 8, 3)).astype(np.float32))
        a = tok.encode_image(img).mu.data
        b = tok2.encode_image(img).mu.data
        assert a.tobytes() == b.tobytes()
