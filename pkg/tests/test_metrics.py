import math

import numpy as np
import pytest

from domix import autodiff as ad
from domix.autodiff import Tape, Tensor
from domix.corpus import BitextExample, build_vocab, encode_batch
from domix.metrics import corpus_bleu, perplexity, sentence_bleu_smoothed
from domix.mixing import ForwardContext
from domix.model import MixConfig, ModelConfig, Seq2SeqModel
from domix.training import label_smoothed_ce


def test_bleu_identity_is_100():
    refs = [["a", "b", "c", "d"], ["x", "y", "z", "w", "v"]]
    assert corpus_bleu(refs, refs) == 100.0


def test_bleu_zero_without_4gram_overlap():
    hyp = [["a", "b", "c", "d", "e"]]
    ref = [["a", "b", "x", "d", "e"]]  # breaks every 4-gram
    assert corpus_bleu(hyp, ref) == 0.0


def test_bleu_hand_computed():
    hyp = [["a", "b", "c", "d", "e"]]
    ref = [["a", "b", "c", "d", "f"]]
    expected = 100.0 * (4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    got = corpus_bleu(hyp, ref)
    assert abs(got - expected) < 1e-9
    assert abs(got - 66.87) < 1e-2


def test_bleu_brevity_penalty():
    hyp = [["a", "b", "c", "d"]]
    ref = [["a", "b", "c", "d", "e", "f", "g", "h"]]
    got = corpus_bleu(hyp, ref)
    assert 0.0 < got < 100.0
    # matched n-grams are perfect, so the whole score is the penalty
    assert abs(got - 100.0 * math.exp(1 - 8 / 4)) < 1e-9


def test_bleu_monotone_when_adding_perfect_pair():
    hyp = [["a", "b", "c", "d", "e"]]
    ref = [["a", "b", "c", "d", "f"]]
    base = corpus_bleu(hyp, ref)
    assert base < 100.0
    extended = corpus_bleu(hyp + [["p", "q", "r", "s"]], ref + [["p", "q", "r", "s"]])
    assert extended >= base


def test_bleu_bad_inputs():
    with pytest.raises(ValueError):
        corpus_bleu([], [])
    with pytest.raises(ValueError):
        corpus_bleu([["a"]], [["a"], ["b"]])


def test_sentence_bleu_smoothed_in_range():
    s = sentence_bleu_smoothed(["a", "b"], ["a", "c"])
    assert 0.0 <= s <= 100.0
    assert sentence_bleu_smoothed(["q"], ["x"]) == 0.0


class StubModel:
    """Fixed-logits stand-in so perplexity oracles are hand-checkable."""

    class cfg:
        max_len = 8

    def __init__(self, make_logits):
        self.make_logits = make_logits

    def forward(self, batch, ctx):
        return Tensor(self.make_logits(batch)), None, None


def test_perplexity_uniform_model_equals_vocab_size():
    examples = [BitextExample(("a",), ("a", "b"), 0), BitextExample(("b",), ("b",), 0)]
    vocab = build_vocab(examples)
    V = vocab.size
    model = StubModel(lambda batch: np.zeros((*batch.tgt[:, 1:].shape, V)))
    assert abs(perplexity(model, examples, vocab) - V) < 1e-9


def test_perplexity_one_hot_model_is_one():
    examples = [BitextExample(("a",), ("a", "b"), 0)]
    vocab = build_vocab(examples)

    def perfect(batch):
        targets = batch.tgt[:, 1:]
        logits = np.zeros((*targets.shape, vocab.size))
        np.put_along_axis(logits, targets[..., None], 1000.0, -1)
        return logits

    assert perplexity(examples=examples, vocab=vocab, model=StubModel(perfect)) == 1.0


def test_perplexity_matches_hand_summed_nll():
    examples = [BitextExample(("a",), ("a", "b"), 0), BitextExample(("b",), ("a",), 0)]
    vocab = build_vocab(examples)
    rng = np.random.default_rng(0)
    fixed = rng.normal(size=(2, 3, vocab.size))

    def logits_fn(batch):
        return fixed[:, : batch.tgt.shape[1] - 1]

    batch = encode_batch(examples, vocab, 8)
    targets = batch.tgt[:, 1:]
    mask = batch.tgt_mask[:, 1:]
    x = fixed[:, : targets.shape[1]]
    logp = x - x.max(-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(-1, keepdims=True))
    nll = -np.take_along_axis(logp, targets[..., None], -1)[..., 0]
    expected = math.exp(nll[mask].sum() / mask.sum())
    assert abs(perplexity(StubModel(logits_fn), examples, vocab) - expected) < 1e-12


def test_perplexity_agrees_with_training_loss_path():
    examples = [BitextExample(("a", "b"), ("b", "a"), 0),
                BitextExample(("b",), ("a", "a", "b"), 0)]
    vocab = build_vocab(examples)
    model = Seq2SeqModel(ModelConfig(d=4, heads=2, enc_layers=1, dec_layers=1,
                                     ffn_dim=4, vocab_size=vocab.size, max_len=8),
                         MixConfig(), seed=1, dtype="f64")
    batch = encode_batch(examples, vocab, 8)
    with Tape():
        logits, _, _ = model.forward(batch, ForwardContext())
        ce = label_smoothed_ce(logits, batch.tgt[:, 1:], batch.tgt_mask[:, 1:], 0.0).item()
    assert abs(math.log(perplexity(model, examples, vocab)) - ce) < 1e-10


def test_perplexity_empty_dataset_rejected():
    examples = [BitextExample(("a",), ("a",), 0)]
    vocab = build_vocab(examples)
    with pytest.raises(ValueError):
        perplexity(StubModel(lambda b: None), [], vocab)
