"""Word-level domain mixing: proportion layers and per-domain linear blends.

Every token gets a k-simplex domain proportion from a smoothed softmax of
its current representation; each point-wise projection is then the
proportion-weighted average of k per-domain linear maps. Proportions are
recomputed from each sublayer's own input, so they evolve with depth.

Two gradient paths leave each proportion layer:
  * the proportions used for mixing are always fully detached, so the
    translation loss never trains the proportion parameters;
  * the proportions used for the domain hard-label loss flow into the
    proportion matrix, and — depending on the detach mode — also into the
    word embedding (identity, sign-flipped, or half/half), but never into
    transformer weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DETACH_MODES = ("detached", "mtl", "advl", "padvl")
MIXING_SCOPES = ("none", "encoder", "enc_dec")


class ConfigError(ValueError):
    """Raised for invalid model or training configuration."""


@dataclass
class TraceRecord:
    """Forward-value proportions of one sublayer for one batch."""

    stack: str              # "encoder" | "decoder"
    layer: int
    sublayer: str           # e.g. "enc_self_Q", "dec_cross_V", "enc_ffn"
    side: str               # "src" | "tgt": which token stream rows align to
    proportions: np.ndarray  # (B, T, k)


@dataclass
class ForwardContext:
    """Per-forward-pass bookkeeping shared by all mixed sublayers."""

    detach_mode: str = "detached"
    training: bool = False
    collect_trace: bool = False
    dropout_rng: np.random.Generator | None = None
    mix_records: list = field(default_factory=list)   # (p_loss Tensor, token mask)
    trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.detach_mode not in DETACH_MODES:
            raise ConfigError(f"unknown detach mode {self.detach_mode!r}; expected one of {DETACH_MODES}")


def detach_gate(x: Tensor, mode: str, embedding_level: bool) -> Tensor:
    """Route the domain-loss gradient according to the training mode.

    Proportion inputs above the embedding are always cut off. At the
    embedding level the loss gradient may pass through unchanged (mtl),
    sign-flipped (advl), or half unchanged / half flipped (padvl).
    """
    if mode not in DETACH_MODES:
        raise ConfigError(f"unknown detach mode {mode!r}; expected one of {DETACH_MODES}")
    if mode == "detached" or not embedding_level:
        return ad.stop_gradient(x)
    if mode == "mtl":
        return x
    if mode == "advl":
        return ad.grad_reverse(x)
    return ad.grad_half_reverse(x)


class DomainProportionLayer:
    """Smoothed softmax over domains: (1-eps) * softmax(R x) + eps/k."""

    def __init__(self, R: Tensor, eps: float):
        if not 0.0 < eps < 1.0:
            raise ConfigError(f"smoothing epsilon must be in (0, 1), got {eps}")
        self.R = R
        self.eps = eps

    @property
    def k(self) -> int:
        return self.R.data.shape[0]

    def proportions(self, x: Tensor) -> Tensor:
        logits = ad.matmul(x, ad.transpose(self.R, (1, 0)))
        p = ad.softmax(logits, axis=-1)
        return ad.add(ad.scale(p, 1.0 - self.eps), Tensor(self.eps / self.k))


def domain_proportion(x, layer: DomainProportionLayer) -> Tensor:
    """Proportions for a single d-vector or any (..., d) stack of vectors."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim == 1:
        return ad.reshape(layer.proportions(ad.reshape(x, (1, -1))), (layer.k,))
    return layer.proportions(x)


def _validate_simplex(p: np.ndarray, tol: float = 1e-6):
    if p.size == 0:
        return
    if np.max(np.abs(p.sum(axis=-1) - 1.0)) > tol or p.min() < -tol:
        raise ValueError("proportions are not simplex vectors (sum or sign off by more than 1e-6)")


class MixedLinear:
    """k per-domain (d_in, d_out) maps blended per token by domain proportions."""

    def __init__(self, weights: list[Tensor], biases: list[Tensor], prop: DomainProportionLayer):
        if len(weights) < 1 or len(weights) != len(biases):
            raise ConfigError("need one weight and one bias per domain")
        shapes = {w.data.shape for w in weights}
        if len(shapes) != 1:
            raise ConfigError(f"per-domain weights disagree in shape: {sorted(shapes)}")
        self.weights = weights
        self.biases = biases
        self.prop = prop

    @property
    def k(self) -> int:
        return len(self.weights)

    def blend(self, x: Tensor, p: Tensor) -> Tensor:
        """Output-order mixing: sum_j p_j * (x W_j + b_j)."""
        out = None
        for j in range(self.k):
            term = ad.add(ad.matmul(x, self.weights[j]), self.biases[j])
            p_j = ad.reshape(ad.narrow(p, p.data.ndim - 1, j, 1), p.data.shape[:-1])
            term = ad.row_scale(term, p_j)
            out = term if out is None else ad.add(out, term)
        return out

    def project(self, x_proj: Tensor, x_prop: Tensor, ctx: ForwardContext,
                mask: np.ndarray, embedding_level: bool = False, tag=None) -> Tensor:
        """Mix per-domain projections of x_proj by proportions of x_prop.

        x_prop is the representation the proportion layer reads (the
        residual-stream value entering the sublayer); tag, when given, is
        (stack, layer, sublayer, side) for trace export.
        """
        gated = detach_gate(x_prop, ctx.detach_mode, embedding_level)
        p_loss = self.prop.proportions(gated)
        p_mix = ad.stop_gradient(p_loss)
        out = self.blend(x_proj, p_mix)
        ctx.mix_records.append((p_loss, mask))
        if ctx.collect_trace and tag is not None:
            stack, layer, sublayer, side = tag
            ctx.trace.append(TraceRecord(stack, layer, sublayer, side, p_mix.data.copy()))
        return out


def mixed_apply(x, ml: MixedLinear, p) -> Tensor:
    """Apply a mixed linear map under explicitly given simplex proportions."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    p = p if isinstance(p, Tensor) else Tensor(p)
    if p.data.shape[-1] != ml.k:
        raise ValueError(f"proportions have {p.data.shape[-1]} entries for {ml.k} domains")
    _validate_simplex(p.data)
    if x.data.ndim == 1:
        x2 = ad.reshape(x, (1, -1))
        p2 = ad.reshape(p, (1, -1))
        return ad.reshape(ml.blend(x2, p2), (ml.weights[0].data.shape[1],))
    return ml.blend(x, p)


def mixed_apply_weight_order(ml: MixedLinear, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Equivalence oracle: first average the weights per token, then apply."""
    W = np.stack([w.data for w in ml.weights])   # (k, d_in, d_out)
    b = np.stack([bb.data for bb in ml.biases])  # (k, d_out)
    w_bar = np.einsum("...k,kio->...io", p, W)
    b_bar = np.einsum("...k,ko->...o", p, b)
    return np.einsum("...i,...io->...o", x, w_bar) + b_bar
