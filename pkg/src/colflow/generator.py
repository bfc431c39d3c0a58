"""Causal transformer over column tokens with a flow-matching next-token head.

Three variants share one parameterization:

* ``equivariant`` — windowed causal self-attention (each query sees itself
  plus its `w` predecessors), rotary position embedding, cross-attention
  conditioning whose absolute sinusoidal query PE can be shift-augmented.
* ``baseline_2d`` — the non-equivariant control: full causal attention,
  learned absolute position embeddings, no rotary. Its learned PEs do not
  extrapolate, so sequences beyond the configured maximum are refused.
* ``real_equivariant`` — same network as ``equivariant``; the difference is
  the training protocol (random crops of length w+1), handled by the
  training harness.

Block layout per layer: self-attention, then cross-attention over the
condition sequence, then the feed-forward network, each pre-normalized and
residual. The denoising head is an MLP over (noised token, t embedding,
backbone state) predicting the straight-path velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from colflow import numerics as N
from colflow.numerics import ContractViolation, Tensor

VARIANTS = ("equivariant", "baseline_2d", "real_equivariant")


@dataclass
class FlowHeadConfig:
    mlp_layers: int = 3
    mlp_hidden: int = 128
    t_embed_dim: int = 64


@dataclass
class GeneratorConfig:
    n_layers: int = 4
    hidden_dim: int = 64
    n_heads: int = 4
    window_w: int = 3
    rotary_base: float = 10000.0
    cond_seq_len: int = 16
    mlp_ratio: int = 4
    attn_dropout: float = 0.0
    proj_dropout: float = 0.0
    cond_dropout: float = 0.1
    variant: str = "equivariant"
    token_channels: int = 16
    n_classes: int = 4
    max_seq_len: int = 17
    cross_pe: bool = True
    shift_max: int = 112
    flow_head: FlowHeadConfig = field(default_factory=FlowHeadConfig)
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}")
        if self.hidden_dim % self.n_heads != 0:
            raise ContractViolation(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        if (self.hidden_dim // self.n_heads) % 2 != 0:
            raise ContractViolation("per-head dim must be even for rotary pairs")
        if self.window_w < 0:
            raise ContractViolation(f"window_w {self.window_w} must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    @property
    def null_class(self) -> int:
        return self.n_classes


def sinusoid_embedding(positions: np.ndarray, dim: int, base: float = 10000.0) -> np.ndarray:
    """Absolute sinusoidal embedding table for the given positions, (len, dim)."""
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    out = np.empty((len(positions), dim), dtype=np.float64)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def t_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Noise-level embedding: sin/cos at log-spaced frequencies 1..1000."""
    half = dim // 2
    freqs = 1000.0 ** (np.arange(half, dtype=np.float64) / max(half - 1, 1))
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def window_mask(n: int, w: int | None, dtype=np.float32) -> np.ndarray:
    """Additive attention mask: 0 where query i may see key j, -inf elsewhere.

    Allowed pairs are 0 <= i-j <= w (self plus w predecessors); w=None means
    full causal. Positions i < w simply see all available predecessors.
    """
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    allowed = j <= i
    if w is not None:
        allowed &= (i - j) <= w
    mask = np.where(allowed, 0.0, -np.inf).astype(dtype)
    return mask


def windowed_causal_attention(q: Tensor, k: Tensor, v: Tensor, w: int | None) -> Tensor:
    """Scaled dot-product attention over the causal window, (B, H, T, D) maps.

    Rotary must already be applied to q and k. Each output i is the softmax
    mixture over keys max(0, i-w)..i scaled by 1/sqrt(per-head dim).
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ContractViolation(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    t_len, d = q.shape[-2], q.shape[-1]
    mask = Tensor(window_mask(t_len, w, q.data.dtype))
    scores = N.add(N.scale(N.matmul(q, N.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d)), mask)
    return N.matmul(N.softmax_lastdim(scores), v)


class KvWindowCache:
    """Ring buffer of the last `maxlen` key/value pairs for one layer.

    Entries stay ordered and contiguous by position; `maxlen=None` keeps
    everything (full causal decoding for the baseline variant).
    """

    def __init__(self, maxlen: int | None):
        self.maxlen = maxlen
        self.positions: list[int] = []
        self._k: list[np.ndarray] = []
        self._v: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.positions)

    def push(self, pos: int, k: np.ndarray, v: np.ndarray) -> None:
        if self.positions and pos != self.positions[-1] + 1:
            raise ContractViolation(
                f"KvWindowCache: non-contiguous push {pos} after {self.positions[-1]}"
            )
        self.positions.append(pos)
        self._k.append(k)
        self._v.append(v)
        if self.maxlen is not None and len(self.positions) > self.maxlen:
            self.positions.pop(0)
            self._k.pop(0)
            self._v.pop(0)

    def window(self) -> tuple[np.ndarray, np.ndarray] | None:
        """Stacked (B, H, n, D) keys and values, oldest first."""
        if not self.positions:
            return None
        return np.concatenate(self._k, axis=2), np.concatenate(self._v, axis=2)


def _ln_np(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / np.sqrt(var + eps)) * g + b


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _rotary_np(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    dim = x.shape[-1]
    freqs = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    out = np.empty_like(x)
    out[..., 0::2] = x[..., 0::2] * cos - x[..., 1::2] * sin
    out[..., 1::2] = x[..., 0::2] * sin + x[..., 1::2] * cos
    return out


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    x = rng.standard_normal(shape) * std
    return np.clip(x, -2 * std, 2 * std).astype(np.float32)


class Generator:
    """Windowed causal transformer plus flow-matching denoising head."""

    def __init__(self, cfg: GeneratorConfig, dtype: str = "f32"):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        h = cfg.hidden_dim
        cp = cfg.token_channels
        fh = cfg.flow_head

        def t(shape, std=0.02):
            return Tensor(_trunc_normal(rng, shape, std), dtype=dtype, requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=np.float32), dtype=dtype, requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape, dtype=np.float32), dtype=dtype, requires_grad=True)

        p: dict[str, Tensor] = {
            "in.w": t((cp, h)),
            "in.b": zeros(h),
            "bos": t((h,)),
            "cond.class": t((cfg.n_classes + 1, h)),
            "cond.pos": t((cfg.cond_seq_len, h)),
            "lnf.g": ones(h),
            "lnf.b": zeros(h),
        }
        if cfg.variant == "baseline_2d":
            p["abs_pe"] = t((cfg.max_seq_len, h))
        for i in range(cfg.n_layers):
            pre = f"l{i}."
            p[pre + "ln1.g"] = ones(h)
            p[pre + "ln1.b"] = zeros(h)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + "attn." + name] = t((h, h))
                p[pre + "attn." + name + "_b"] = zeros(h)
            p[pre + "ln2.g"] = ones(h)
            p[pre + "ln2.b"] = zeros(h)
            for name in ("wq", "wp", "wk", "wv", "wo"):
                p[pre + "cross." + name] = t((h, h))
                p[pre + "cross." + name + "_b"] = zeros(h)
            p[pre + "ln3.g"] = ones(h)
            p[pre + "ln3.b"] = zeros(h)
            p[pre + "mlp.w1"] = t((h, cfg.mlp_ratio * h))
            p[pre + "mlp.b1"] = zeros(cfg.mlp_ratio * h)
            p[pre + "mlp.w2"] = t((cfg.mlp_ratio * h, h))
            p[pre + "mlp.b2"] = zeros(h)
        in_dim = cp + fh.t_embed_dim + h
        dims = [in_dim] + [fh.mlp_hidden] * fh.mlp_layers
        for j in range(fh.mlp_layers):
            p[f"head.w{j}"] = t((dims[j], dims[j + 1]))
            p[f"head.b{j}"] = zeros(dims[j + 1])
        p["head.out.w"] = t((fh.mlp_hidden, cp))
        p["head.out.b"] = zeros(cp)
        self.params = p

    # -- shared helpers ----------------------------------------------------

    def _dtype(self) -> np.dtype:
        return self.params["in.w"].data.dtype

    def astype(self, dtype: str) -> "Generator":
        target = np.float64 if dtype == "f64" else np.float32
        for p in self.params.values():
            p.data = p.data.astype(target)
        return self

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return N.add(N.mul(N.layer_norm(x), self.params[name + ".g"]),
                     self.params[name + ".b"])

    def _check_class_ids(self, class_ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(class_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() > self.cfg.null_class):
            raise ContractViolation(
                f"class id out of range [0, {self.cfg.n_classes}] (null={self.cfg.null_class})"
            )
        return ids

    def condition_embedding(self, class_ids: np.ndarray, train: bool = False,
                            rng: np.random.Generator | None = None) -> Tensor:
        """(B,) class ids -> (B, cond_seq_len, hidden) condition sequence.

        During training each row is replaced by the null row with probability
        cond_dropout (classifier-free guidance).
        """
        ids = self._check_class_ids(class_ids)
        if train and self.cfg.cond_dropout > 0.0:
            if rng is None:
                raise ContractViolation("condition dropout needs an rng")
            drop = rng.random(ids.shape) < self.cfg.cond_dropout
            ids = np.where(drop, self.cfg.null_class, ids)
        rows = N.gather_rows(self.params["cond.class"], ids)  # (B, h)
        b = rows.shape[0]
        s = self.cfg.cond_seq_len
        base = N.expand(N.reshape(rows, (b, 1, self.cfg.hidden_dim)),
                        (b, s, self.cfg.hidden_dim))
        return N.add(base, self.params["cond.pos"])

    # -- batched forward (training path, tape-recorded) ---------------------

    def forward(self, tokens: Tensor | None, class_ids: np.ndarray, shift: int = 0,
                train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Token prefix (B, P, C') -> hidden states (B, P+1, hidden).

        Output index i conditions token i: it depends only on tokens < i, the
        condition, and the shift. A learned begin-of-sequence vector feeds
        position 0, so the empty prefix is allowed.
        """
        cfg = self.cfg
        ids = self._check_class_ids(class_ids)
        b = ids.shape[0]
        h = cfg.hidden_dim
        if tokens is not None and tokens.ndim != 3:
            raise ContractViolation(f"forward: tokens rank {tokens.ndim}, want (B, P, C')")
        p_len = 0 if tokens is None else tokens.shape[1]
        t_len = p_len + 1
        if cfg.variant == "baseline_2d" and t_len > cfg.max_seq_len:
            raise ContractViolation(
                f"baseline_2d: sequence {t_len} exceeds trained maximum {cfg.max_seq_len}"
            )
        p = self.params
        bos = N.expand(N.reshape(p["bos"], (1, 1, h)), (b, 1, h))
        if p_len > 0:
            emb = N.add(N.matmul(tokens, p["in.w"]), p["in.b"])
            x = N.concat([bos, emb], axis=1)
        else:
            x = bos
        positions = np.arange(t_len)
        if cfg.variant == "baseline_2d":
            x = N.add(x, N.gather_rows(p["abs_pe"], positions))
        cond = self.condition_embedding(ids, train=train, rng=rng)
        w = None if cfg.variant == "baseline_2d" else cfg.window_w
        use_rotary = cfg.variant != "baseline_2d"
        pe_q = None
        if cfg.cross_pe:
            pe_q = Tensor(sinusoid_embedding(positions + shift, h).astype(self._dtype()))

        for i in range(cfg.n_layers):
            pre = f"l{i}."
            x = N.add(x, self._self_attention(x, pre, w, positions, use_rotary, train, rng))
            x = N.add(x, self._cross_attention(x, cond, pre, pe_q, train, rng))
            x = N.add(x, self._mlp(x, pre, train, rng))
        return self._ln(x, "lnf")

    def _heads(self, x: Tensor) -> Tensor:
        b, t_len, _ = x.shape
        return N.permute(
            N.reshape(x, (b, t_len, self.cfg.n_heads, self.cfg.head_dim)), (0, 2, 1, 3)
        )

    def _merge(self, x: Tensor) -> Tensor:
        b, _, t_len, _ = x.shape
        return N.reshape(N.permute(x, (0, 2, 1, 3)), (b, t_len, self.cfg.hidden_dim))

    def _proj(self, x: Tensor, w_name: str) -> Tensor:
        return N.add(N.matmul(x, self.params[w_name]), self.params[w_name + "_b"])

    def _self_attention(self, x: Tensor, pre: str, w: int | None, positions: np.ndarray,
                        use_rotary: bool, train: bool, rng) -> Tensor:
        cfg = self.cfg
        a = self._ln(x, pre + "ln1")
        q = self._heads(self._proj(a, pre + "attn.wq"))
        k = self._heads(self._proj(a, pre + "attn.wk"))
        v = self._heads(self._proj(a, pre + "attn.wv"))
        if use_rotary:
            q = N.rotary_apply(q, positions, cfg.rotary_base)
            k = N.rotary_apply(k, positions, cfg.rotary_base)
        mask = Tensor(window_mask(x.shape[1], w, self._dtype()))
        scores = N.add(
            N.scale(N.matmul(q, N.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.head_dim)),
            mask,
        )
        att = N.softmax_lastdim(scores)
        if train and cfg.attn_dropout > 0:
            att = N.dropout(att, cfg.attn_dropout, rng)
        out = self._proj(self._merge(N.matmul(att, v)), pre + "attn.wo")
        if train and cfg.proj_dropout > 0:
            out = N.dropout(out, cfg.proj_dropout, rng)
        return out

    def _cross_attention(self, x: Tensor, cond: Tensor, pre: str, pe_q: Tensor | None,
                         train: bool, rng) -> Tensor:
        cfg = self.cfg
        a = self._ln(x, pre + "ln2")
        q_in = self._proj(a, pre + "cross.wq")
        if pe_q is not None:
            q_in = N.add(q_in, N.add(N.matmul(pe_q, self.params[pre + "cross.wp"]),
                                     self.params[pre + "cross.wp_b"]))
        q = self._heads(q_in)
        k = self._heads(self._proj(cond, pre + "cross.wk"))
        v = self._heads(self._proj(cond, pre + "cross.wv"))
        scores = N.scale(N.matmul(q, N.permute(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.head_dim))
        att = N.softmax_lastdim(scores)
        if train and cfg.attn_dropout > 0:
            att = N.dropout(att, cfg.attn_dropout, rng)
        out = self._proj(self._merge(N.matmul(att, v)), pre + "cross.wo")
        if train and cfg.proj_dropout > 0:
            out = N.dropout(out, cfg.proj_dropout, rng)
        return out

    def _mlp(self, x: Tensor, pre: str, train: bool, rng) -> Tensor:
        a = self._ln(x, pre + "ln3")
        hline = N.gelu(N.add(N.matmul(a, self.params[pre + "mlp.w1"]), self.params[pre + "mlp.b1"]))
        out = N.add(N.matmul(hline, self.params[pre + "mlp.w2"]), self.params[pre + "mlp.b2"])
        if train and self.cfg.proj_dropout > 0:
            out = N.dropout(out, self.cfg.proj_dropout, rng)
        return out

    # -- flow-matching head --------------------------------------------------

    def flow_head_denoise(self, y: Tensor, t: np.ndarray, z: Tensor) -> Tensor:
        """Velocity at noise level t: MLP over (y, t-embedding, z).

        y: (..., C'); t: broadcastable noise levels in [0, 1]; z: (..., hidden).
        """
        t = np.asarray(t, dtype=np.float64)
        if t.min() < 0.0 or t.max() > 1.0:
            raise ContractViolation(f"noise level t outside [0, 1]: [{t.min()}, {t.max()}]")
        fh = self.cfg.flow_head
        temb = np.broadcast_to(
            t_embedding(t, fh.t_embed_dim).astype(self._dtype()),
            y.shape[:-1] + (fh.t_embed_dim,),
        )
        feats = N.concat([y, Tensor(temb.copy()), z], axis=y.ndim - 1)
        out = feats
        for j in range(fh.mlp_layers):
            out = N.gelu(N.add(N.matmul(out, self.params[f"head.w{j}"]),
                               self.params[f"head.b{j}"]))
        return N.add(N.matmul(out, self.params["head.out.w"]), self.params["head.out.b"])

    def flow_velocity_np(self, y: np.ndarray, t: float, z: np.ndarray) -> np.ndarray:
        """Inference-path head: same math as flow_head_denoise on raw arrays."""
        if not 0.0 <= t <= 1.0:
            raise ContractViolation(f"noise level t={t} outside [0, 1]")
        fh = self.cfg.flow_head
        temb = np.broadcast_to(
            t_embedding(np.full(y.shape[:-1], t), fh.t_embed_dim).astype(y.dtype),
            y.shape[:-1] + (fh.t_embed_dim,),
        )
        out = np.concatenate([y, temb, z], axis=-1)
        for j in range(fh.mlp_layers):
            out = _gelu_np(out @ self.params[f"head.w{j}"].data + self.params[f"head.b{j}"].data)
        return out @ self.params["head.out.w"].data + self.params["head.out.b"].data

    # -- incremental decoding (inference path, plain numpy) -------------------

    def make_caches(self) -> list[KvWindowCache]:
        maxlen = None if self.cfg.variant == "baseline_2d" else self.cfg.window_w
        return [KvWindowCache(maxlen) for _ in range(self.cfg.n_layers)]

    def cond_arrays(self, class_ids: np.ndarray) -> np.ndarray:
        ids = self._check_class_ids(class_ids)
        rows = self.params["cond.class"].data[ids]
        return rows[:, None, :] + self.params["cond.pos"].data[None, :, :]

    def forward_step(self, token: np.ndarray | None, pos: int,
                     caches: list[KvWindowCache], cond: np.ndarray,
                     shift: int = 0) -> np.ndarray:
        """One incremental decode step; returns the (B, hidden) state at `pos`.

        `token` is the input element entering position `pos` (None means the
        begin-of-sequence vector, only valid at pos 0). `cond` comes from
        `cond_arrays`. Caches are updated in place.
        """
        cfg = self.cfg
        p = {k: v.data for k, v in self.params.items()}
        if cfg.variant == "baseline_2d" and pos >= cfg.max_seq_len:
            raise ContractViolation(
                f"baseline_2d: position {pos} exceeds trained maximum {cfg.max_seq_len - 1}"
            )
        if token is None:
            if pos != 0:
                raise ContractViolation("BOS input is only valid at position 0")
            b = cond.shape[0]
            x = np.broadcast_to(p["bos"], (b, 1, cfg.hidden_dim)).copy()
        else:
            token = np.asarray(token, dtype=self._dtype())
            b = token.shape[0]
            x = (token @ p["in.w"] + p["in.b"])[:, None, :]
        if cfg.variant == "baseline_2d":
            x = x + p["abs_pe"][pos]
        use_rotary = cfg.variant != "baseline_2d"
        pe_row = None
        if cfg.cross_pe:
            pe_row = sinusoid_embedding(np.array([pos + shift]), cfg.hidden_dim).astype(
                self._dtype()
            )
        nh, hd = cfg.n_heads, cfg.head_dim
        scale = 1.0 / math.sqrt(hd)

        for i, cache in enumerate(caches):
            pre = f"l{i}."
            a = _ln_np(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = (a @ p[pre + "attn.wq"] + p[pre + "attn.wq_b"]).reshape(b, 1, nh, hd).transpose(0, 2, 1, 3)
            k = (a @ p[pre + "attn.wk"] + p[pre + "attn.wk_b"]).reshape(b, 1, nh, hd).transpose(0, 2, 1, 3)
            v = (a @ p[pre + "attn.wv"] + p[pre + "attn.wv_b"]).reshape(b, 1, nh, hd).transpose(0, 2, 1, 3)
            if use_rotary:
                q = _rotary_np(q, np.array([pos]), cfg.rotary_base)
                k = _rotary_np(k, np.array([pos]), cfg.rotary_base)
            win = cache.window()
            if win is None:
                keys, vals = k, v
            else:
                keys = np.concatenate([win[0], k], axis=2)
                vals = np.concatenate([win[1], v], axis=2)
            att = _softmax_np((q * scale) @ keys.transpose(0, 1, 3, 2))
            out = (att @ vals).transpose(0, 2, 1, 3).reshape(b, 1, cfg.hidden_dim)
            x = x + out @ p[pre + "attn.wo"] + p[pre + "attn.wo_b"]
            cache.push(pos, k, v)

            a = _ln_np(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            q_in = a @ p[pre + "cross.wq"] + p[pre + "cross.wq_b"]
            if pe_row is not None:
                q_in = q_in + pe_row @ p[pre + "cross.wp"] + p[pre + "cross.wp_b"]
            q = q_in.reshape(b, 1, nh, hd).transpose(0, 2, 1, 3)
            ck = (cond @ p[pre + "cross.wk"] + p[pre + "cross.wk_b"]).reshape(
                b, -1, nh, hd).transpose(0, 2, 1, 3)
            cv = (cond @ p[pre + "cross.wv"] + p[pre + "cross.wv_b"]).reshape(
                b, -1, nh, hd).transpose(0, 2, 1, 3)
            att = _softmax_np((q * scale) @ ck.transpose(0, 1, 3, 2))
            out = (att @ cv).transpose(0, 2, 1, 3).reshape(b, 1, cfg.hidden_dim)
            x = x + out @ p[pre + "cross.wo"] + p[pre + "cross.wo_b"]

            a = _ln_np(x, p[pre + "ln3.g"], p[pre + "ln3.b"])
            x = x + _gelu_np(a @ p[pre + "mlp.w1"] + p[pre + "mlp.b1"]) @ p[pre + "mlp.w2"] + p[pre + "mlp.b2"]

        return _ln_np(x, p["lnf.g"], p["lnf.b"])[:, 0, :]


def flow_matching_loss(model: Generator, tokens: np.ndarray, z: Tensor,
                       rng: np.random.Generator, mask: list[int] | None = None,
                       shared_draws: bool = False,
                       draws: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[Tensor, np.ndarray]:
    """Straight-path velocity regression at uniform noise levels.

    tokens: (B, W, C') ground-truth tokens; z: (B, W, hidden) backbone states
    aligned so z[:, i] saw only tokens < i. Per position the loss is the
    squared channel-sum error between the predicted velocity at
    t*x + (1-t)*eps and the target x - eps, averaged over the batch; the
    returned scalar averages the positions in `mask` (all by default).

    `shared_draws` reuses a single (t, eps) draw per sample across positions
    for cross-position variance reduction; explicit `draws=(t, eps)` override
    both.

    Returns (scalar loss Tensor, per-position loss array of length W).
    """
    x = np.asarray(tokens)
    b, w_len, cp = x.shape
    if z.shape[0] != b or z.shape[1] != w_len:
        raise ContractViolation(f"flow loss: tokens {x.shape} vs states {z.shape}")
    dtype = z.data.dtype
    if draws is not None:
        t, eps = draws
    elif shared_draws:
        t = np.broadcast_to(rng.uniform(size=(b, 1)), (b, w_len)).copy()
        eps = np.broadcast_to(rng.standard_normal((b, 1, cp)), (b, w_len, cp)).copy()
    else:
        t = rng.uniform(size=(b, w_len))
        eps = rng.standard_normal((b, w_len, cp))
    t = t.astype(dtype)
    eps = eps.astype(dtype)
    xt = x.astype(dtype)
    y = Tensor(t[..., None] * xt + (1.0 - t[..., None]) * eps)
    target = Tensor(xt - eps)
    vel = model.flow_head_denoise(y, t, z)
    diff = N.sub(vel, target)
    per_pos = N.mean(N.sum_(N.mul(diff, diff), axis=2), axis=0)  # (W,)
    if mask is None:
        mask = list(range(w_len))
    sel = np.zeros(w_len, dtype=dtype)
    sel[list(mask)] = 1.0
    scalar = N.scale(N.sum_(N.mul(per_pos, Tensor(sel))), 1.0 / len(mask))
    return scalar, per_pos.data.copy()
