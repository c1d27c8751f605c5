"""Corpus ingestion, vocabulary, batching and the synthetic multi-domain task.

File formats:
  corpus TSV: one example per line, ``domain<TAB>source<TAB>target``
  vocab:      one token per line; line number = id - 4 (reserved ids implicit)
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


def tokenize(text: str) -> list[str]:
    """Whitespace-split and lowercase; empty input gives an empty list."""
    return text.lower().split()


@dataclass(frozen=True)
class BitextExample:
    """A tokenized sentence pair with its sentence-level domain label."""

    src: tuple[str, ...]
    tgt: tuple[str, ...]
    domain: int


class Vocab:
    """Token/id bijection with fixed reserved ids PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens):
        self.id_to_token = list(RESERVED) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids, skip_reserved: bool = False) -> list[str]:
        out = []
        for i in ids:
            if skip_reserved and i < len(RESERVED):
                continue
            out.append(self.id_to_token[i])
        return out

    def content_hash(self) -> str:
        payload = "\n".join(self.id_to_token[len(RESERVED):]).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def save(self, path):
        Path(path).write_text(
            "".join(t + "\n" for t in self.id_to_token[len(RESERVED):]), encoding="utf-8"
        )

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def build_vocab(examples, min_freq: int = 1) -> Vocab:
    """Count source and target tokens into one shared table.

    Tokens at or above min_freq get ids in descending-frequency order,
    ties broken lexicographically; everything else encodes to UNK.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    counts = Counter()
    n = 0
    for ex in examples:
        n += 1
        counts.update(ex.src)
        counts.update(ex.tgt)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_freq),
                  key=lambda t: (-counts[t], t))
    return Vocab(kept)


@dataclass
class Batch:
    """Padded id matrices with masks; targets are wrapped as BOS ... EOS."""

    src: np.ndarray          # (B, Ls) int
    tgt: np.ndarray          # (B, Lt) int
    src_mask: np.ndarray     # (B, Ls) bool, False at pads
    tgt_mask: np.ndarray     # (B, Lt) bool
    domains: np.ndarray      # (B,) int

    @property
    def size(self) -> int:
        return self.src.shape[0]


def encode_batch(examples, vocab: Vocab, max_len: int) -> Batch:
    """Encode, truncate to max_len, and pad a group of examples together.

    Targets are wrapped as BOS ... EOS before truncation; a truncated
    target keeps EOS as its final token.
    """
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    src_rows, tgt_rows, domains = [], [], []
    for ex in examples:
        src_rows.append(vocab.encode(ex.src)[:max_len])
        tgt = [BOS] + vocab.encode(ex.tgt) + [EOS]
        if len(tgt) > max_len:
            tgt = tgt[: max_len - 1] + [EOS]
        tgt_rows.append(tgt)
        domains.append(ex.domain)

    def pad_to(rows, width):
        out = np.full((len(rows), width), PAD, dtype=np.int64)
        mask = np.zeros((len(rows), width), dtype=bool)
        for i, row in enumerate(rows):
            out[i, : len(row)] = row
            mask[i, : len(row)] = True
        return out, mask

    src, src_mask = pad_to(src_rows, max(len(r) for r in src_rows))
    tgt, tgt_mask = pad_to(tgt_rows, max(len(r) for r in tgt_rows))
    return Batch(src, tgt, src_mask, tgt_mask, np.asarray(domains, dtype=np.int64))


# ---------------------------------------------------------------------------
# corpus files


def read_tsv(path) -> list[BitextExample]:
    examples = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'domain<TAB>src<TAB>tgt', got {len(parts)} fields")
        domain, src, tgt = parts
        examples.append(BitextExample(tuple(tokenize(src)), tuple(tokenize(tgt)), int(domain)))
    return examples


def write_tsv(path, examples):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(f"{ex.domain}\t{' '.join(ex.src)}\t{' '.join(ex.tgt)}\n")


# ---------------------------------------------------------------------------
# synthetic multi-domain task


@dataclass
class SyntheticTaskSpec:
    """Recipe for a corpus that manufactures cross-domain word ambiguity.

    Each domain owns exclusive source words with fixed translations,
    shared words translate identically everywhere, and each ambiguous
    word has one distinct target per domain. A sentence from domain J
    is a uniform draw over the words available to J; with probability
    p_marker it is forced to contain at least one exclusive word, which
    is the only evidence of its domain.
    """

    domains: int = 2
    shared_words: int = 16
    exclusive_per_domain: int = 16
    ambiguous_words: int = 8
    p_marker: float = 1.0
    len_range: tuple[int, int] = (3, 12)
    train_sentences: int = 2000
    valid_sentences: int = 200
    test_sentences: int = 200
    seed: int = 0

    def validate(self):
        if self.domains < 1:
            raise ValueError("domains must be >= 1")
        if min(self.shared_words, self.exclusive_per_domain, self.ambiguous_words) < 0:
            raise ValueError("word counts must be >= 0")
        if self.shared_words + self.exclusive_per_domain * self.domains + self.ambiguous_words == 0:
            raise ValueError("synthetic spec defines zero words")
        if not 0.0 <= self.p_marker <= 1.0:
            raise ValueError(f"p_marker must be in [0, 1], got {self.p_marker}")
        if self.p_marker > 0.0 and self.exclusive_per_domain == 0:
            raise ValueError("p_marker > 0 requires at least one exclusive word per domain")
        lo, hi = self.len_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad sentence length range {self.len_range}")


@dataclass
class SyntheticCorpus:
    train: list[BitextExample]
    valid: list[BitextExample]
    test: list[BitextExample]
    shared_map: dict[str, str] = field(default_factory=dict)
    exclusive_maps: list[dict[str, str]] = field(default_factory=list)
    ambiguous_maps: list[dict[str, str]] = field(default_factory=list)  # per-domain t_J(a)

    def splits(self):
        return {"train": self.train, "valid": self.valid, "test": self.test}

    def translate(self, word: str, domain: int) -> str:
        if word in self.shared_map:
            return self.shared_map[word]
        if word in self.ambiguous_maps[domain]:
            return self.ambiguous_maps[domain][word]
        for j, m in enumerate(self.exclusive_maps):
            if word in m:
                return m[word]
        raise KeyError(word)


def generate_synthetic(spec: SyntheticTaskSpec) -> SyntheticCorpus:
    """Deterministically generate disjoint train/valid/test splits."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k = spec.domains

    shared_map = {f"sh{i}": f"ts{i}" for i in range(spec.shared_words)}
    exclusive_maps = [
        {f"ex{j}w{i}": f"te{j}w{i}" for i in range(spec.exclusive_per_domain)}
        for j in range(k)
    ]
    ambiguous_maps = [
        {f"am{i}": f"ta{i}d{j}" for i in range(spec.ambiguous_words)}
        for j in range(k)
    ]

    shared = sorted(shared_map)
    ambiguous = sorted(ambiguous_maps[0]) if spec.ambiguous_words else []
    exclusive = [sorted(m) for m in exclusive_maps]
    available = [shared + exclusive[j] + ambiguous for j in range(k)]

    corpus = SyntheticCorpus([], [], [], shared_map, exclusive_maps, ambiguous_maps)

    def translate(word, j):
        return corpus.translate(word, j)

    lo, hi = spec.len_range
    seen: set[tuple[str, ...]] = set()
    targets = [("train", spec.train_sentences), ("valid", spec.valid_sentences),
               ("test", spec.test_sentences)]
    for split_name, count in targets:
        out = getattr(corpus, split_name)
        attempts = 0
        limit = 100 * max(count, 1) + 1000
        while len(out) < count:
            attempts += 1
            if attempts > limit:
                raise ValueError(
                    f"could not draw {count} distinct sentences for '{split_name}'; "
                    "sentence space too small for disjoint splits"
                )
            j = len(out) % k
            length = int(rng.integers(lo, hi + 1))
            words = [available[j][int(rng.integers(len(available[j])))] for _ in range(length)]
            if spec.p_marker > 0 and rng.random() < spec.p_marker:
                if not any(w in exclusive_maps[j] for w in words):
                    pos = int(rng.integers(length))
                    words[pos] = exclusive[j][int(rng.integers(len(exclusive[j])))]
            key = tuple(words)
            if key in seen:
                continue
            seen.add(key)
            out.append(BitextExample(key, tuple(translate(w, j) for w in words), j))
    return corpus
