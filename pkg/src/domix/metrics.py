"""Corpus BLEU and perplexity."""

from __future__ import annotations

import math
from collections import Counter

import numpy as np

from .corpus import encode_batch
from .mixing import ForwardContext

BLEU_ORDER = 4


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses, references) -> float:
    """Corpus-level BLEU in [0, 100]: clipped 1..4-gram precision, no smoothing.

    Any order with zero corpus-wide overlap sends the geometric mean, and
    the score, to zero.
    """
    hypotheses = [list(h) for h in hypotheses]
    references = [list(r) for r in references]
    if not hypotheses or len(hypotheses) != len(references):
        raise ValueError(f"need equal non-zero counts, got {len(hypotheses)} hypotheses "
                         f"and {len(references)} references")
    matched = [0] * BLEU_ORDER
    total = [0] * BLEU_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, BLEU_ORDER + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            total[n - 1] += max(len(hyp) - n + 1, 0)
            matched[n - 1] += sum(min(c, r[g]) for g, c in h.items())
    if any(m == 0 or t == 0 for m, t in zip(matched, total)):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matched, total)) / BLEU_ORDER
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / max(hyp_len, 1))
    return 100.0 * bp * math.exp(log_precision)


def sentence_bleu_smoothed(hypothesis, reference) -> float:
    """Diagnostic sentence BLEU with add-one smoothing on orders >= 2."""
    hyp, ref = list(hypothesis), list(reference)
    logs = []
    for n in range(1, BLEU_ORDER + 1):
        h = _ngrams(hyp, n)
        r = _ngrams(ref, n)
        t = max(len(hyp) - n + 1, 0)
        m = sum(min(c, r[g]) for g, c in h.items())
        if n == 1:
            if m == 0 or t == 0:
                return 0.0
            logs.append(math.log(m / t))
        else:
            logs.append(math.log((m + 1) / (t + 1)))
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1.0 - len(ref) / max(len(hyp), 1))
    return 100.0 * bp * math.exp(sum(logs) / BLEU_ORDER)


def corpus_nll(model, examples, vocab, batch_size: int = 32):
    """Total natural-log NLL and token count over non-pad target positions."""
    total = 0.0
    count = 0
    for lo in range(0, len(examples), batch_size):
        batch = encode_batch(examples[lo:lo + batch_size], vocab, model.cfg.max_len)
        ctx = ForwardContext()
        logits, _, _ = model.forward(batch, ctx)
        targets = batch.tgt[:, 1:]
        mask = batch.tgt_mask[:, 1:]
        x = logits.data.astype(np.float64)
        shifted = x - x.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp, targets[..., None], -1)[..., 0]
        total += float(-picked[mask].sum())
        count += int(mask.sum())
    return total, count


def perplexity(model, examples, vocab, batch_size: int = 32) -> float:
    """exp(mean per-token NLL), natural log, unsmoothed."""
    if not examples:
        raise ValueError("perplexity over an empty dataset")
    total, count = corpus_nll(model, examples, vocab, batch_size)
    return math.exp(total / count)
