"""Losses, baseline heads, Adam with inverse-square-root schedule, train loop.

The composite objective is generation cross-entropy (optionally
label-smoothed and word-weighted) plus the domain hard-label loss over
every proportion record, plus — when a sentence-level baseline head is
enabled — its classifier loss. The breakdown is logged per step and the
decomposition is exact.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import encode_batch
from .mixing import ConfigError, ForwardContext
from .model import BASELINE_MODES, Seq2SeqModel


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    lr_peak: float = 5e-4
    warmup_steps: int = 4000
    warmup_init_lr: float = 1e-7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    label_smoothing: float = 0.1
    max_steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    use_mix_loss: bool = True
    wl_enabled: bool = False
    baseline: str = "none"
    checkpoint_every: int = 0

    def validate(self):
        if self.lr_peak <= 0:
            raise ConfigError(f"lr_peak must be > 0, got {self.lr_peak}")
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        if self.baseline not in BASELINE_MODES:
            raise ConfigError(f"baseline must be one of {BASELINE_MODES}, got {self.baseline!r}")
        if self.max_steps < 1 or self.batch_size < 1:
            raise ConfigError("max_steps and batch_size must be >= 1")


# ---------------------------------------------------------------------------
# losses


def _masked_weighted_sum(per_pos: Tensor, weights: np.ndarray) -> Tensor:
    return ad.tsum(ad.mul(per_pos, Tensor(weights.astype(per_pos.data.dtype))))


def per_position_ce(logits: Tensor, targets: np.ndarray, smoothing: float) -> Tensor:
    """Cross entropy per position against (1-s)*one_hot + s/V uniform."""
    vocab = logits.data.shape[-1]
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.take_along_last(logp, targets)
    out = ad.scale(picked, -(1.0 - smoothing))
    if smoothing > 0.0:
        out = ad.add(out, ad.scale(ad.tsum(logp, axis=logp.data.ndim - 1), -smoothing / vocab))
    return out


def label_smoothed_ce(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
                      smoothing: float) -> Tensor:
    """Mean smoothed CE over non-pad positions."""
    count = int(mask.sum())
    if count == 0:
        raise ValueError("label_smoothed_ce over a fully padded batch")
    if targets.max() >= logits.data.shape[-1]:
        raise ValueError(f"target id {targets.max()} out of vocabulary {logits.data.shape[-1]}")
    ce = per_position_ce(logits, targets, smoothing)
    return ad.scale(_masked_weighted_sum(ce, mask), 1.0 / count)


def wl_weighted_gen_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray,
                         beta: np.ndarray, smoothing: float = 0.0) -> Tensor:
    """Generation loss with per-position (1 + beta_j) weights, pad-masked."""
    if beta.shape != mask.shape:
        raise ValueError(f"beta shaped {beta.shape}, expected {mask.shape}")
    if beta.min(initial=0.0) < 0.0 or beta.max(initial=0.0) > 1.0:
        raise ValueError("beta weights must lie in [0, 1]")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("weighted loss over a fully padded batch")
    ce = per_position_ce(logits, targets, smoothing)
    return ad.scale(_masked_weighted_sum(ce, (1.0 + beta) * mask), 1.0 / count)


def mix_loss(mix_records, domains: np.ndarray, reduction: str = "mean") -> Tensor:
    """Domain hard-label CE summed over every proportion record.

    Each record contributes -log p_J per non-pad token; "mean" divides by
    the record-token count so depth does not change the scale.
    """
    if not mix_records:
        raise ValueError("no proportion records to score")
    total = None
    count = 0
    for p, mask in mix_records:
        k = p.data.shape[-1]
        if domains.max(initial=0) >= k:
            raise ValueError(f"domain label {domains.max()} out of range for k={k}")
        idx = np.broadcast_to(domains[:, None], p.data.shape[:-1])
        logp = ad.log(ad.take_along_last(p, idx))
        term = ad.scale(_masked_weighted_sum(logp, mask), -1.0)
        total = term if total is None else ad.add(total, term)
        count += int(mask.sum())
    if reduction == "mean" and count > 0:
        total = ad.scale(total, 1.0 / count)
    return total


def per_domain_mix_values(mix_records, domains: np.ndarray) -> dict[int, float]:
    """Reporting helper: mean -log p_J per sentence domain (forward values)."""
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for p, mask in mix_records:
        picked = np.take_along_axis(p.data, np.broadcast_to(domains[:, None], p.data.shape[:-1])[..., None], -1)[..., 0]
        nll = -np.log(picked)
        for j in np.unique(domains):
            m = mask & (domains == j)[:, None]
            sums[int(j)] = sums.get(int(j), 0.0) + float(nll[m].sum())
            counts[int(j)] = counts.get(int(j), 0) + int(m.sum())
    return {j: sums[j] / counts[j] for j in sums if counts[j]}


def baseline_head_loss(model: Seq2SeqModel, batch, ctx: ForwardContext) -> Tensor:
    """Sentence-level domain classifier on mean-pooled encoder outputs.

    Runs its own encoder pass whose embedding is gated per the baseline
    mode, so only this loss reaches the embedding through the gate: mtl
    flows straight, advl flips the sign at the embedding boundary, padvl
    flips one half.
    """
    mode = model.baseline
    if mode == "none":
        raise ConfigError("baseline_head_loss called with baseline='none'")
    gates = {"mtl": lambda t: t, "advl": ad.grad_reverse, "padvl": ad.grad_half_reverse}
    # scratch context: this pass must not add proportion records twice
    scratch = ForwardContext(detach_mode=ctx.detach_mode, training=ctx.training,
                             dropout_rng=ctx.dropout_rng)
    enc = model.encode(batch.src, batch.src_mask, scratch, embed_gate=gates[mode])
    maskf = batch.src_mask.astype(enc.data.dtype)
    pooled = ad.tsum(ad.row_scale(enc, Tensor(maskf)), axis=1)
    pooled = ad.row_scale(pooled, Tensor(1.0 / maskf.sum(axis=1)))
    logits = ad.add(ad.matmul(pooled, model.cls_head.w), model.cls_head.b)
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.take_along_last(logp, batch.domains)
    return ad.scale(ad.tmean(picked), -1.0)


# ---------------------------------------------------------------------------
# composite objective


@dataclass
class LossBreakdown:
    l_gen: float
    l_mix: float
    l_baseline: float
    l_total: float
    per_domain_mix: dict[int, float] = field(default_factory=dict)
    beta_mean: float | None = None


def compute_losses(model: Seq2SeqModel, batch, cfg: TrainConfig, ctx: ForwardContext):
    """Forward pass plus every enabled loss; returns (total Tensor, breakdown)."""
    logits, stream, _ = model.forward(batch, ctx)
    targets = batch.tgt[:, 1:]
    label_mask = batch.tgt_mask[:, 1:]

    beta_mean = None
    if cfg.wl_enabled:
        if model.wl_head is None:
            raise ConfigError("wl_enabled requires a model built with wl_head=True")
        p_wl = model.wl_head.proportions(ad.stop_gradient(stream))
        ctx.mix_records.append((p_wl, label_mask))
        beta = np.take_along_axis(
            p_wl.data, np.broadcast_to(batch.domains[:, None], label_mask.shape)[..., None], -1
        )[..., 0]
        beta_mean = float(beta[label_mask].mean()) if label_mask.any() else 0.0
        l_gen = wl_weighted_gen_loss(logits, targets, label_mask, beta, cfg.label_smoothing)
    else:
        l_gen = label_smoothed_ce(logits, targets, label_mask, cfg.label_smoothing)

    total = l_gen
    l_mix_val = 0.0
    per_domain = {}
    if ctx.mix_records:
        l_mix = mix_loss(ctx.mix_records, batch.domains, model.mix.mix_loss_reduction)
        l_mix_val = l_mix.item()
        per_domain = per_domain_mix_values(ctx.mix_records, batch.domains)
        if cfg.use_mix_loss:
            total = ad.add(total, l_mix)

    l_base_val = 0.0
    if cfg.baseline != "none":
        l_base = baseline_head_loss(model, batch, ctx)
        l_base_val = l_base.item()
        total = ad.add(total, l_base)

    return total, LossBreakdown(l_gen.item(), l_mix_val, l_base_val, total.item(),
                                per_domain, beta_mean)


# ---------------------------------------------------------------------------
# optimizer and schedule


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then inverse square root decay."""
    if step < 1:
        raise ValueError(f"schedule is defined for steps >= 1, got {step}")
    if step >= cfg.warmup_steps:
        return cfg.lr_peak * math.sqrt(cfg.warmup_steps / step)
    return cfg.warmup_init_lr + (cfg.lr_peak - cfg.warmup_init_lr) * step / cfg.warmup_steps


class Adam:
    """Bias-corrected Adam with coupled L2 weight decay (added to the gradient)."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.beta1, self.beta2 = cfg.adam_beta1, cfg.adam_beta2
        self.eps = cfg.adam_eps
        self.weight_decay = cfg.weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.steps = 0

    def step(self, lr: float):
        self.steps += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.steps
        bc2 = 1.0 - b2 ** self.steps
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"optim.m.{name}"] = self.m[name]
            out[f"optim.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], steps: int):
        for name in self.params:
            self.m[name] = arrays[f"optim.m.{name}"].copy()
            self.v[name] = arrays[f"optim.v.{name}"].copy()
        self.steps = steps


# ---------------------------------------------------------------------------
# loop


def batch_for_step(examples, vocab, cfg: TrainConfig, max_len: int, step: int):
    """Deterministic batch for a 0-based step: per-epoch seeded shuffles."""
    n = len(examples)
    per_epoch = max(1, math.ceil(n / cfg.batch_size))
    epoch, slot = divmod(step, per_epoch)
    perm = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch])).permutation(n)
    idx = perm[slot * cfg.batch_size: (slot + 1) * cfg.batch_size]
    return encode_batch([examples[i] for i in idx], vocab, max_len)


def dropout_rng_for_step(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, 7]))


def train_loop(model: Seq2SeqModel, examples, vocab, cfg: TrainConfig, max_len: int,
               log_handle=None, checkpoint_fn=None, optimizer: Adam | None = None,
               start_step: int = 0):
    """Run steps [start_step, max_steps); returns (optimizer, metrics list).

    Metrics are one dict per step; the same seed and config reproduce the
    same loss trajectory exactly (elapsed_ms is wall time).
    """
    cfg.validate()
    if not examples:
        raise ValueError("empty training set")
    optimizer = optimizer or Adam(model.parameters(), cfg)
    metrics = []
    for step in range(start_step, cfg.max_steps):
        t0 = time.perf_counter()
        batch = batch_for_step(examples, vocab, cfg, max_len, step)
        ctx = ForwardContext(detach_mode=model.mix.detach_mode, training=True,
                             dropout_rng=dropout_rng_for_step(cfg.seed, step))
        model.zero_grad()
        with ad.Tape() as tape:
            total, breakdown = compute_losses(model, batch, cfg, ctx)
            if not np.isfinite(breakdown.l_total):
                raise TrainingDiverged(
                    f"non-finite loss at step {step + 1}: gen={breakdown.l_gen} "
                    f"mix={breakdown.l_mix} baseline={breakdown.l_baseline}"
                )
            tape.backward(total)
        lr = lr_schedule(step + 1, cfg)
        optimizer.step(lr)
        entry = {
            "step": step + 1,
            "lr": lr,
            "L_gen": breakdown.l_gen,
            "L_mix": breakdown.l_mix,
            "L_total": breakdown.l_total,
            "elapsed_ms": int(round((time.perf_counter() - t0) * 1000.0)),
        }
        if cfg.baseline != "none":
            entry["L_baseline"] = breakdown.l_baseline
        if log_handle is not None:
            log_handle.write(json.dumps(entry) + "\n")
        metrics.append(entry)
        if checkpoint_fn is not None and cfg.checkpoint_every > 0 and (step + 1) % cfg.checkpoint_every == 0:
            checkpoint_fn(step + 1, optimizer)
    if checkpoint_fn is not None:
        checkpoint_fn(cfg.max_steps, optimizer)
    return optimizer, metrics
