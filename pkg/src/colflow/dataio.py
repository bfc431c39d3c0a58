"""Synthetic corpora, the ETB bit-exact tensor format, checkpoint persistence.

Two desk-scale corpora mirror the dataset contrast the analysis module
studies: `shift_invariant_texture` (random-phase sinusoid mixtures whose
law is invariant to horizontal cyclic shifts) and `center_biased_blobs`
(energy concentrated at the horizontal center). Both are pure functions of
(spec, index).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from colflow.generator import FlowHeadConfig, Generator, GeneratorConfig
from colflow.numerics import ContractViolation, Tensor
from colflow.tokenizer import ConvTokenizer, LinearTokenizer, LinearTokenizerConfig, TokenizerConfig

# ---------------------------------------------------------------------------
# ETB: magic "ETB1" | dtype u8 (0=f32, 1=f64) | rank u8 | dims rank*u64 LE |
# row-major little-endian payload.
# ---------------------------------------------------------------------------

ETB_MAGIC = b"ETB1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class EtbError(ValueError):
    """Malformed ETB input."""


class EtbBadMagic(EtbError):
    pass


class EtbUnknownDtype(EtbError):
    pass


class EtbTruncated(EtbError):
    pass


def write_etb(path, tensor) -> None:
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if arr.dtype not in _CODE_FOR:
        raise EtbUnknownDtype(f"unsupported dtype {arr.dtype}")
    code = _CODE_FOR[arr.dtype]
    header = ETB_MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr).astype(_DTYPE_CODES[code], copy=False).tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header + payload)
    os.replace(tmp, path)


def read_etb(path) -> Tensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 6:
        raise EtbTruncated(f"{path}: {len(raw)} bytes is shorter than any header")
    if raw[:4] != ETB_MAGIC:
        raise EtbBadMagic(f"{path}: magic {raw[:4]!r}")
    code, rank = struct.unpack("<BB", raw[4:6])
    if code not in _DTYPE_CODES:
        raise EtbUnknownDtype(f"{path}: dtype code {code}")
    dims_end = 6 + 8 * rank
    if len(raw) < dims_end:
        raise EtbTruncated(f"{path}: header cut off inside dims")
    dims = struct.unpack(f"<{rank}Q", raw[6:dims_end])
    dtype = _DTYPE_CODES[code]
    expect = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
    payload = raw[dims_end:]
    if len(payload) != expect:
        raise EtbTruncated(f"{path}: payload {len(payload)} bytes, expected {expect}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return Tensor(arr.astype(dtype.newbyteorder("="), copy=True))


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    kind: str = "shift_invariant_texture"
    image_h: int = 64
    image_w: int = 64
    n_classes: int = 4
    n_components: int = 4
    freq_max: int = 6
    amp_lo: float = 0.4
    amp_hi: float = 1.0
    n_blobs: int = 3
    blob_sigma_lo: float = 4.0
    blob_sigma_hi: float = 9.0
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("shift_invariant_texture", "center_biased_blobs"):
            raise ContractViolation(f"unknown corpus kind {self.kind!r}")


def _sample_rng(spec: SyntheticSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, int(index)]))


def _class_recipe(spec: SyntheticSpec, label: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([spec.seed, 10_000 + label]))


def _class_offset(spec: SyntheticSpec, label: int) -> float:
    """Small per-class brightness offset: keeps each class's law invariant to
    horizontal shifts while making classes linearly identifiable."""
    if spec.n_classes <= 1:
        return 0.0
    return float(np.linspace(-0.25, 0.25, spec.n_classes)[label])


def synth_shift_invariant(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, int]:
    """Random-phase sinusoid mixture; the class fixes frequencies/amplitudes,
    the sample draws phases, so the law is invariant to horizontal cyclic
    shifts. Returns (image (H, W, 3) f32 in [-1, 1], class label)."""
    label = index % spec.n_classes
    crng = _class_recipe(spec, label)
    fx = crng.integers(1, spec.freq_max + 1, size=spec.n_components)
    fy = crng.integers(0, spec.freq_max // 2 + 1, size=spec.n_components)
    amp = crng.uniform(spec.amp_lo, spec.amp_hi, size=spec.n_components)
    rng = _sample_rng(spec, index)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=spec.n_components)
    yy, xx = np.meshgrid(np.arange(spec.image_h), np.arange(spec.image_w), indexing="ij")
    img = np.zeros((spec.image_h, spec.image_w))
    for k in range(spec.n_components):
        img += amp[k] * np.sin(
            2.0 * np.pi * (fx[k] * xx / spec.image_w + fy[k] * yy / spec.image_h)
            + phases[k]
        )
    img = 0.7 * img / amp.sum() + _class_offset(spec, label)
    img = img + spec.noise * rng.standard_normal(img.shape)
    img = np.clip(img, -1.0, 1.0).astype(np.float32)
    return np.repeat(img[:, :, None], 3, axis=2), label


def synth_center_biased(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, int]:
    """Gaussian blobs whose horizontal centers concentrate at the middle, so
    column statistics are strongly position-dependent."""
    label = index % spec.n_classes
    crng = _class_recipe(spec, label)
    sigmas = crng.uniform(spec.blob_sigma_lo, spec.blob_sigma_hi, size=spec.n_blobs)
    signs = crng.choice([-1.0, 1.0], size=spec.n_blobs)
    rng = _sample_rng(spec, index)
    yy, xx = np.meshgrid(np.arange(spec.image_h), np.arange(spec.image_w), indexing="ij")
    img = np.zeros((spec.image_h, spec.image_w))
    w = spec.image_w
    for k in range(spec.n_blobs):
        xc = np.clip(rng.normal(w / 2.0, w / 8.0), w / 4.0, 3.0 * w / 4.0)
        yc = rng.uniform(spec.image_h * 0.2, spec.image_h * 0.8)
        img += signs[k] * np.exp(-(((xx - xc) ** 2) + (yy - yc) ** 2) / (2.0 * sigmas[k] ** 2))
    img = img + _class_offset(spec, label)
    img = img + spec.noise * rng.standard_normal(img.shape)
    img = np.clip(img, -1.0, 1.0).astype(np.float32)
    return np.repeat(img[:, :, None], 3, axis=2), label


def synth_sample(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, int]:
    if spec.kind == "shift_invariant_texture":
        return synth_shift_invariant(spec, index)
    return synth_center_biased(spec, index)


def build_corpus(spec: SyntheticSpec, n: int) -> tuple[np.ndarray, np.ndarray]:
    images = np.empty((n, spec.image_h, spec.image_w, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        images[i], labels[i] = synth_sample(spec, i)
    return images, labels


def augment_images(images: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Horizontal flip (p=0.5); plus a random horizontal cyclic shift for the
    shift-invariant corpus only (a shift would destroy the center bias)."""
    out = images.copy()
    flips = rng.random(len(out)) < 0.5
    out[flips] = out[flips, :, ::-1, :]
    if kind == "shift_invariant_texture":
        shifts = rng.integers(0, out.shape[2], size=len(out))
        for i, s in enumerate(shifts):
            if s:
                out[i] = np.roll(out[i], int(s), axis=1)
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class IntegrityError(RuntimeError):
    """A checkpoint file does not match its manifest hash."""


def _sha256(path) -> str:
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def _write_params(ckpt_dir: str, sub: str, arrays: dict[str, np.ndarray]) -> list[dict]:
    os.makedirs(os.path.join(ckpt_dir, sub), exist_ok=True)
    entries = []
    for name in sorted(arrays):
        rel = os.path.join(sub, name + ".etb")
        full = os.path.join(ckpt_dir, rel)
        write_etb(full, arrays[name])
        entries.append({"name": name, "path": rel, "sha256": _sha256(full)})
    return entries


def _read_params(ckpt_dir: str, entries: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for ent in entries:
        full = os.path.join(ckpt_dir, ent["path"])
        if not os.path.exists(full):
            raise IntegrityError(f"missing parameter file {ent['path']}")
        if _sha256(full) != ent["sha256"]:
            raise IntegrityError(f"hash mismatch for {ent['path']}")
        out[ent["name"]] = read_etb(full).data
    return out


def tokenizer_manifest(tokenizer) -> dict:
    if isinstance(tokenizer, LinearTokenizer):
        return {"kind": "linear", "config": dataclasses.asdict(tokenizer.cfg)}
    if isinstance(tokenizer, ConvTokenizer):
        return {"kind": "conv", "config": dataclasses.asdict(tokenizer.cfg)}
    raise ContractViolation(f"unknown tokenizer type {type(tokenizer)!r}")


def save_checkpoint(ckpt_dir: str, model: Generator, tokenizer,
                    ema_arrays: dict[str, np.ndarray] | None = None,
                    cfg_end: float = 1.0, provenance: dict | None = None) -> None:
    """Write a generator checkpoint: manifest.json plus one ETB per tensor.

    Files land first, the manifest (the validity marker) last, each via
    temp-file rename, so readers never observe a half-written checkpoint.
    """
    os.makedirs(ckpt_dir, exist_ok=True)
    manifest = {
        "version": 1,
        "generator_config": dataclasses.asdict(model.cfg),
        "tokenizer": tokenizer_manifest(tokenizer),
        "cfg_end": cfg_end,
        "provenance": provenance or {},
        "files": _write_params(ckpt_dir, "params", {k: v.data for k, v in model.params.items()}),
        "ema": ema_arrays is not None,
    }
    if isinstance(tokenizer, ConvTokenizer):
        manifest["tokenizer_files"] = _write_params(
            ckpt_dir, "tok", {k: v.data for k, v in tokenizer.params.items()}
        )
    if ema_arrays is not None:
        manifest["ema_files"] = _write_params(ckpt_dir, "ema", ema_arrays)
    blob = json.dumps(manifest, sort_keys=True, indent=2).encode("utf-8")
    tmp = os.path.join(ckpt_dir, f"manifest.json.tmp.{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, os.path.join(ckpt_dir, "manifest.json"))


def save_tokenizer_checkpoint(ckpt_dir: str, tokenizer: ConvTokenizer,
                              provenance: dict | None = None) -> None:
    """Standalone tokenizer checkpoint (tok-train output)."""
    os.makedirs(ckpt_dir, exist_ok=True)
    manifest = {
        "version": 1,
        "tokenizer": tokenizer_manifest(tokenizer),
        "tokenizer_files": _write_params(
            ckpt_dir, "tok", {k: v.data for k, v in tokenizer.params.items()}
        ),
        "provenance": provenance or {},
    }
    blob = json.dumps(manifest, sort_keys=True, indent=2).encode("utf-8")
    tmp = os.path.join(ckpt_dir, f"manifest.json.tmp.{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, os.path.join(ckpt_dir, "manifest.json"))


def load_tokenizer_checkpoint(ckpt_dir: str) -> tuple[ConvTokenizer, dict]:
    mpath = os.path.join(ckpt_dir, "manifest.json")
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no manifest.json under {ckpt_dir}")
    manifest = json.loads(open(mpath, "rb").read().decode("utf-8"))
    tokenizer = ConvTokenizer(TokenizerConfig(**manifest["tokenizer"]["config"]))
    arrays = _read_params(ckpt_dir, manifest["tokenizer_files"])
    for name, param in tokenizer.params.items():
        param.data = arrays[name]
    return tokenizer, manifest


def _generator_from_config(d: dict) -> GeneratorConfig:
    d = dict(d)
    d["flow_head"] = FlowHeadConfig(**d["flow_head"])
    return GeneratorConfig(**d)


def load_checkpoint(ckpt_dir: str, ema: bool = False) -> tuple[Generator, object, dict]:
    """Rebuild (generator, tokenizer, manifest); `ema` selects shadow weights."""
    mpath = os.path.join(ckpt_dir, "manifest.json")
    if not os.path.exists(mpath):
        raise FileNotFoundError(f"no manifest.json under {ckpt_dir}")
    manifest = json.loads(open(mpath, "rb").read().decode("utf-8"))
    if manifest.get("version") != 1:
        raise ContractViolation(f"unsupported checkpoint version {manifest.get('version')}")
    model = Generator(_generator_from_config(manifest["generator_config"]))
    entries = manifest["ema_files"] if ema else manifest["files"]
    if ema and "ema_files" not in manifest:
        raise ContractViolation("checkpoint has no EMA weights")
    arrays = _read_params(ckpt_dir, entries)
    for name, param in model.params.items():
        param.data = arrays[name]
    tok_info = manifest["tokenizer"]
    if tok_info["kind"] == "linear":
        tokenizer = LinearTokenizer(LinearTokenizerConfig(**tok_info["config"]))
    else:
        tokenizer = ConvTokenizer(TokenizerConfig(**tok_info["config"]))
        tok_arrays = _read_params(ckpt_dir, manifest["tokenizer_files"])
        for name, param in tokenizer.params.items():
            param.data = tok_arrays[name]
    return model, tokenizer, manifest
