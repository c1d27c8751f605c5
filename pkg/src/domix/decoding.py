"""Greedy and beam-search decoding.

The beam keeps the b best candidates per step across live hypotheses;
a candidate that emits EOS finalizes and keeps its beam slot. With b=1
this reduces exactly to greedy decoding, and with b >= V^max_len nothing
is ever pruned, so the search is exhaustive.

PAD and BOS are never emitted; generation stops at EOS or when max_len
tokens (including EOS) have been produced. Argmax ties break toward the
lowest token id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS, EOS, PAD
from .mixing import ForwardContext


@dataclass
class Hypothesis:
    tokens: list[int] = field(default_factory=list)  # generated ids, BOS excluded
    logprob: float = 0.0
    finished: bool = False

    def score(self, alpha: float) -> float:
        n = max(len(self.tokens), 1)
        return self.logprob / (n ** alpha)


def _next_log_probs(model, enc_out, src_mask, prefixes):
    """Log-probabilities for the next token of each prefix (no grad)."""
    rows = np.asarray([[BOS] + p for p in prefixes], dtype=np.int64)
    mask = np.ones_like(rows, dtype=bool)
    ctx = ForwardContext()
    logits, _ = model.decode(rows, mask, enc_out, src_mask, ctx)
    last = logits.data[:, -1, :].astype(np.float64)
    shifted = last - last.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp[:, PAD] = -np.inf
    logp[:, BOS] = -np.inf
    return logp


def _encode_source(model, src_ids):
    src = np.asarray([src_ids], dtype=np.int64)
    if src.shape[1] == 0:
        raise ValueError("cannot decode from an empty source")
    src_mask = np.ones_like(src, dtype=bool)
    ctx = ForwardContext()
    return model.encode(src, src_mask, ctx), src_mask


def greedy_decode(model, src_ids, max_len: int) -> list[int]:
    """Argmax decoding from BOS until EOS or the token budget runs out."""
    enc_out, src_mask = _encode_source(model, src_ids)
    tokens: list[int] = []
    for _ in range(max_len):
        logp = _next_log_probs(model, enc_out, src_mask, [tokens])[0]
        nxt = int(np.argmax(logp))
        tokens.append(nxt)
        if nxt == EOS:
            break
    return tokens


def beam_search(model, src_ids, beam: int, max_len: int, alpha: float = 1.0) -> list[int]:
    """Best sequence under summed log-probs with length penalty alpha."""
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    enc_out, src_mask = _encode_source(model, src_ids)
    live = [Hypothesis()]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        logp = _next_log_probs(model, enc_out, src_mask, [h.tokens for h in live])
        candidates = []
        for i, h in enumerate(live):
            for v in range(logp.shape[1]):
                lp = logp[i, v]
                if lp == -np.inf:
                    continue
                candidates.append((h.logprob + lp, i, v))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        live_next = []
        for score, i, v in candidates[:beam]:
            h = Hypothesis(live[i].tokens + [v], score, v == EOS)
            if h.finished:
                finished.append(h)
            else:
                live_next.append(h)
        live = live_next
    pool = finished if finished else live
    return max(pool, key=lambda h: (h.score(alpha), -len(h.tokens))).tokens


def decode_corpus(model, vocab, sentences, beam: int = 5, max_len: int | None = None,
                  alpha: float = 1.0) -> list[list[str]]:
    """Decode token sequences in input order; empty sources stay empty."""
    max_len = max_len or model.cfg.max_len
    out = []
    for tokens in sentences:
        if not tokens:
            out.append([])
            continue
        ids = vocab.encode(tokens)[: model.cfg.max_len]
        if beam == 1:
            hyp = greedy_decode(model, ids, max_len)
        else:
            hyp = beam_search(model, ids, beam, max_len, alpha)
        out.append(vocab.decode(hyp, skip_reserved=True))
    return out
