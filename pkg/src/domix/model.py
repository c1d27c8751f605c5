"""Transformer encoder-decoder with optional per-domain projection mixing.

The vanilla path (mixing scope "none") is the single-domain reference
model; scopes "encoder" and "enc_dec" replace each point-wise projection
of the chosen stacks with a MixedLinear. Layer norm placement is
configurable: "pre" normalizes sublayer inputs (with a final norm per
stack), "post" normalizes after each residual addition.

Domain proportion layers read the residual-stream value entering their
sublayer (before any pre-norm), so layer-0 proportions are a function of
embedding + position exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import Batch
from .mixing import (ConfigError, DomainProportionLayer, ForwardContext,
                     MixedLinear, MIXING_SCOPES, DETACH_MODES)

MASKED_LOGIT = -1e9
BASELINE_MODES = ("none", "mtl", "advl", "padvl")


@dataclass
class ModelConfig:
    d: int = 48
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 96
    vocab_size: int = 0
    max_len: int = 24
    layer_norm_position: str = "pre"
    dropout: float = 0.0
    use_positional_encoding: bool = True

    def validate(self):
        if min(self.d, self.heads, self.enc_layers, self.dec_layers, self.ffn_dim, self.max_len) < 1:
            raise ConfigError("all model dimensions must be >= 1")
        if self.vocab_size < 5:
            raise ConfigError(f"vocab_size must cover the reserved ids, got {self.vocab_size}")
        if self.d % self.heads != 0:
            raise ConfigError(f"model dim {self.d} not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.layer_norm_position not in ("pre", "post"):
            raise ConfigError(f"layer_norm_position must be 'pre' or 'post', got {self.layer_norm_position!r}")


@dataclass
class MixConfig:
    scope: str = "none"
    domains: int = 1
    epsilon: float = 0.05
    detach_mode: str = "detached"
    mix_loss_reduction: str = "mean"

    def validate(self):
        if self.scope not in MIXING_SCOPES:
            raise ConfigError(f"mixing scope must be one of {MIXING_SCOPES}, got {self.scope!r}")
        if self.domains < 1:
            raise ConfigError(f"domains must be >= 1, got {self.domains}")
        if self.scope != "none" and not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.detach_mode not in DETACH_MODES:
            raise ConfigError(f"detach_mode must be one of {DETACH_MODES}, got {self.detach_mode!r}")
        if self.mix_loss_reduction not in ("mean", "sum"):
            raise ConfigError(f"mix_loss_reduction must be 'mean' or 'sum', got {self.mix_loss_reduction!r}")


def positional_encoding(pos: int, d: int) -> np.ndarray:
    """Sinusoidal position vector: sin at even indices, cos at odd."""
    pe = np.zeros(d, dtype=np.float64)
    for i in range(0, d, 2):
        angle = pos / (10000.0 ** (i / d))
        pe[i] = math.sin(angle)
        if i + 1 < d:
            pe[i + 1] = math.cos(angle)
    return pe


def positional_table(max_len: int, d: int) -> np.ndarray:
    return np.stack([positional_encoding(pos, d) for pos in range(max_len)])


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention; mask entries that are True are excluded.

    A row with every key masked is a malformed batch and raises.
    """
    dk = q.data.shape[-1]
    if k.data.shape[-1] != dk:
        raise ad.ShapeError(f"query dim {q.data.shape} does not match key dim {k.data.shape}")
    axes = tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, axes)), 1.0 / math.sqrt(dk))
    if mask is not None:
        if np.any(np.all(mask, axis=-1)):
            raise ValueError("attention row with every key masked (malformed batch)")
        scores = ad.masked_fill(scores, mask, MASKED_LOGIT)
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def _dropout(x: Tensor, rate: float, ctx: ForwardContext) -> Tensor:
    if rate <= 0.0 or not ctx.training:
        return x
    rng = ctx.dropout_rng
    if rng is None:
        raise ConfigError("training with dropout requires a dropout rng")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return ad.mul(x, Tensor(keep))


class LayerNorm:
    def __init__(self, gamma: Tensor, beta: Tensor):
        self.gamma = gamma
        self.beta = beta

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Linear:
    """Plain projection with the same call surface as MixedLinear."""

    def __init__(self, w: Tensor, b: Tensor):
        self.w = w
        self.b = b

    def project(self, x_proj, x_prop, ctx, mask, embedding_level=False, tag=None):
        return ad.add(ad.matmul(x_proj, self.w), self.b)


class AttentionBlock:
    """Multi-head attention over (possibly mixed) Q/K/V/O projections."""

    def __init__(self, proj_q, proj_k, proj_v, proj_o, heads: int, dropout: float,
                 stack: str, layer: int, kind: str):
        self.q, self.k, self.v, self.o = proj_q, proj_k, proj_v, proj_o
        self.heads = heads
        self.dropout = dropout
        prefix = {"encoder": "enc", "decoder": "dec"}[stack]
        q_side = "tgt" if stack == "decoder" else "src"
        kv_side = "src" if kind == "cross" or stack == "encoder" else "tgt"
        self.tags = {
            "Q": (stack, layer, f"{prefix}_{kind}_Q", q_side),
            "K": (stack, layer, f"{prefix}_{kind}_K", kv_side),
            "V": (stack, layer, f"{prefix}_{kind}_V", kv_side),
            "O": (stack, layer, f"{prefix}_{kind}_O", q_side),
        }

    def __call__(self, query_in, kv_in, q_prop, kv_prop, attn_mask, ctx,
                 q_mask, kv_mask, embedding_level=False):
        d = query_in.data.shape[-1]
        m = self.heads
        dk = d // m
        Q = self.q.project(query_in, q_prop, ctx, q_mask, embedding_level, self.tags["Q"])
        K = self.k.project(kv_in, kv_prop, ctx, kv_mask, embedding_level, self.tags["K"])
        V = self.v.project(kv_in, kv_prop, ctx, kv_mask, embedding_level, self.tags["V"])

        def split(t):
            b, n, _ = t.data.shape
            return ad.transpose(ad.reshape(t, (b, n, m, dk)), (0, 2, 1, 3))

        qh, kh, vh = split(Q), split(K), split(V)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        if attn_mask is not None:
            if np.any(np.all(attn_mask, axis=-1)):
                raise ValueError("attention row with every key masked (malformed batch)")
            scores = ad.masked_fill(scores, attn_mask, MASKED_LOGIT)
        weights = _dropout(ad.softmax(scores, axis=-1), self.dropout, ctx)
        ctxv = ad.matmul(weights, vh)                         # (B, m, Tq, dk)
        b, _, tq, _ = ctxv.data.shape
        merged = ad.reshape(ad.transpose(ctxv, (0, 2, 1, 3)), (b, tq, d))
        return self.o.project(merged, merged, ctx, q_mask, False, self.tags["O"])


class FeedForward:
    """Point-wise two-layer network, relu inside, optionally mixed."""

    def __init__(self, lin1, lin2, dropout: float, stack: str, layer: int):
        self.lin1 = lin1
        self.lin2 = lin2
        self.dropout = dropout
        prefix = {"encoder": "enc", "decoder": "dec"}[stack]
        side = "tgt" if stack == "decoder" else "src"
        self.tag = (stack, layer, f"{prefix}_ffn", side)

    def __call__(self, x_in, x_prop, ctx, mask):
        h = ad.relu(self.lin1.project(x_in, x_prop, ctx, mask, False, self.tag))
        h = _dropout(h, self.dropout, ctx)
        return self.lin2.project(h, h, ctx, mask, False, None)


class EncoderLayer:
    def __init__(self, attn, ffn, ln1, ln2, pre_norm: bool):
        self.attn, self.ffn, self.ln1, self.ln2 = attn, ffn, ln1, ln2
        self.pre_norm = pre_norm

    def __call__(self, stream, attn_mask, ctx, token_mask, embedding_level):
        a_in = self.ln1(stream) if self.pre_norm else stream
        att = self.attn(a_in, a_in, stream, stream, attn_mask, ctx,
                        token_mask, token_mask, embedding_level)
        stream = ad.add(stream, att)
        if not self.pre_norm:
            stream = self.ln1(stream)
        f_in = self.ln2(stream) if self.pre_norm else stream
        ff = self.ffn(f_in, stream, ctx, token_mask)
        stream = ad.add(stream, ff)
        if not self.pre_norm:
            stream = self.ln2(stream)
        return stream


class DecoderLayer:
    def __init__(self, self_attn, cross_attn, ffn, ln1, ln2, ln3, pre_norm: bool):
        self.self_attn, self.cross_attn, self.ffn = self_attn, cross_attn, ffn
        self.ln1, self.ln2, self.ln3 = ln1, ln2, ln3
        self.pre_norm = pre_norm

    def __call__(self, stream, enc_out, self_mask, cross_mask, ctx,
                 tgt_mask, src_mask, embedding_level):
        a_in = self.ln1(stream) if self.pre_norm else stream
        att = self.self_attn(a_in, a_in, stream, stream, self_mask, ctx,
                             tgt_mask, tgt_mask, embedding_level)
        stream = ad.add(stream, att)
        if not self.pre_norm:
            stream = self.ln1(stream)

        c_in = self.ln2(stream) if self.pre_norm else stream
        att = self.cross_attn(c_in, enc_out, stream, enc_out, cross_mask, ctx,
                              tgt_mask, src_mask, False)
        stream = ad.add(stream, att)
        if not self.pre_norm:
            stream = self.ln2(stream)

        f_in = self.ln3(stream) if self.pre_norm else stream
        ff = self.ffn(f_in, stream, ctx, tgt_mask)
        stream = ad.add(stream, ff)
        if not self.pre_norm:
            stream = self.ln3(stream)
        return stream


class Seq2SeqModel:
    """Encoder-decoder over a shared vocabulary table.

    Weight init is uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per matrix,
    drawn in registration order from one seeded generator, so a seed
    pins every parameter.
    """

    def __init__(self, cfg: ModelConfig, mix: MixConfig | None = None, seed: int = 0,
                 dtype: str = "f32", baseline: str = "none", wl_head: bool = False):
        cfg.validate()
        mix = mix or MixConfig()
        mix.validate()
        if baseline not in BASELINE_MODES:
            raise ConfigError(f"baseline must be one of {BASELINE_MODES}, got {baseline!r}")
        self.cfg = cfg
        self.mix = mix
        self.baseline = baseline
        self.dtype = ad.DTYPES[dtype]
        self.precision = dtype
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)

        d, V = cfg.d, cfg.vocab_size
        self.embed = self._uniform("embed", (V, d), d)
        pe = positional_table(cfg.max_len, d) if cfg.use_positional_encoding else np.zeros((cfg.max_len, d))
        self.pe = pe.astype(self.dtype)

        enc_mixed = mix.scope in ("encoder", "enc_dec")
        dec_mixed = mix.scope == "enc_dec"
        self.enc_layers = [self._make_encoder_layer(i, enc_mixed) for i in range(cfg.enc_layers)]
        self.dec_layers = [self._make_decoder_layer(i, dec_mixed) for i in range(cfg.dec_layers)]
        self.pre_norm = cfg.layer_norm_position == "pre"
        if self.pre_norm:
            self.enc_norm = self._make_norm("enc.norm", d)
            self.dec_norm = self._make_norm("dec.norm", d)
        self.out = Linear(self._uniform("out.w", (d, V), d), self._zeros("out.b", (V,)))

        k = mix.domains
        if baseline != "none":
            self.cls_head = Linear(self._uniform("cls.w", (d, k), d), self._zeros("cls.b", (k,)))
        if wl_head:
            eps = mix.epsilon if 0.0 < mix.epsilon < 1.0 else 0.05
            self.wl_head = DomainProportionLayer(self._uniform("wl.R", (k, d), d), eps)
        else:
            self.wl_head = None
        del self._rng

    # -- parameter registration ------------------------------------------

    def _uniform(self, name, shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        data = self._rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        return t

    def _zeros(self, name, shape):
        t = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _ones(self, name, shape):
        t = Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _make_norm(self, name, d):
        return LayerNorm(self._ones(f"{name}.g", (d,)), self._zeros(f"{name}.b", (d,)))

    def _make_projection(self, name, d_in, d_out, mixed: bool):
        if not mixed:
            return Linear(self._uniform(f"{name}.w", (d_in, d_out), d_in),
                          self._zeros(f"{name}.b", (d_out,)))
        k = self.mix.domains
        weights = [self._uniform(f"{name}.w{j}", (d_in, d_out), d_in) for j in range(k)]
        biases = [self._zeros(f"{name}.b{j}", (d_out,)) for j in range(k)]
        prop = DomainProportionLayer(self._uniform(f"{name}.R", (k, d_in), d_in), self.mix.epsilon)
        return MixedLinear(weights, biases, prop)

    def _make_attention(self, name, mixed, stack, layer, kind):
        d = self.cfg.d
        projs = [self._make_projection(f"{name}.{p}", d, d, mixed) for p in ("q", "k", "v", "o")]
        return AttentionBlock(*projs, self.cfg.heads, self.cfg.dropout, stack, layer, kind)

    def _make_ffn(self, name, mixed, stack, layer):
        d, h = self.cfg.d, self.cfg.ffn_dim
        lin1 = self._make_projection(f"{name}.w1", d, h, mixed)
        lin2 = self._make_projection(f"{name}.w2", h, d, mixed)
        return FeedForward(lin1, lin2, self.cfg.dropout, stack, layer)

    def _make_encoder_layer(self, i, mixed):
        base = f"enc.{i}"
        return EncoderLayer(
            self._make_attention(f"{base}.attn", mixed, "encoder", i, "self"),
            self._make_ffn(f"{base}.ffn", mixed, "encoder", i),
            self._make_norm(f"{base}.ln1", self.cfg.d),
            self._make_norm(f"{base}.ln2", self.cfg.d),
            self.cfg.layer_norm_position == "pre",
        )

    def _make_decoder_layer(self, i, mixed):
        base = f"dec.{i}"
        return DecoderLayer(
            self._make_attention(f"{base}.self", mixed, "decoder", i, "self"),
            self._make_attention(f"{base}.cross", mixed, "decoder", i, "cross"),
            self._make_ffn(f"{base}.ffn", mixed, "decoder", i),
            self._make_norm(f"{base}.ln1", self.cfg.d),
            self._make_norm(f"{base}.ln2", self.cfg.d),
            self._make_norm(f"{base}.ln3", self.cfg.d),
            self.cfg.layer_norm_position == "pre",
        )

    # -- forward -----------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        t = ids.shape[1]
        if t > self.cfg.max_len:
            raise ConfigError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        e = ad.scale(ad.embedding_lookup(self.embed, ids), math.sqrt(self.cfg.d))
        return ad.add(e, Tensor(self.pe[:t]))

    def encode(self, src: np.ndarray, src_mask: np.ndarray, ctx: ForwardContext,
               embed_gate=None) -> Tensor:
        stream = self.embed_tokens(src)
        if embed_gate is not None:
            stream = embed_gate(stream)
        attn_mask = ~src_mask[:, None, None, :]
        for i, layer in enumerate(self.enc_layers):
            stream = layer(stream, attn_mask, ctx, src_mask, embedding_level=(i == 0))
        if self.pre_norm:
            stream = self.enc_norm(stream)
        return stream

    def decode(self, tgt_in: np.ndarray, tgt_in_mask: np.ndarray, enc_out: Tensor,
               src_mask: np.ndarray, ctx: ForwardContext):
        """Returns (logits over vocab, final decoder stream)."""
        stream = self.embed_tokens(tgt_in)
        t = tgt_in.shape[1]
        causal = np.triu(np.ones((t, t), dtype=bool), k=1)[None, None]
        self_mask = causal | (~tgt_in_mask[:, None, None, :])
        cross_mask = ~src_mask[:, None, None, :]
        for i, layer in enumerate(self.dec_layers):
            stream = layer(stream, enc_out, self_mask, cross_mask, ctx,
                           tgt_in_mask, src_mask, embedding_level=(i == 0))
        if self.pre_norm:
            stream = self.dec_norm(stream)
        logits = self.out.project(stream, stream, ctx, tgt_in_mask)
        return logits, stream

    def forward(self, batch: Batch, ctx: ForwardContext):
        """Teacher-forced pass; returns (logits, decoder stream, encoder output)."""
        enc_out = self.encode(batch.src, batch.src_mask, ctx)
        tgt_in = batch.tgt[:, :-1]
        tgt_in_mask = batch.tgt_mask[:, :-1]
        logits, stream = self.decode(tgt_in, tgt_in_mask, enc_out, batch.src_mask, ctx)
        return logits, stream, enc_out

    @property
    def is_mixed(self) -> bool:
        return self.mix.scope != "none"
