"""Character corpora, vocabulary, splits and epoch batching."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

UNK = "<unk>"
TEXT8_SIZES = (90_000_000, 5_000_000, 5_000_000)
_TEXT8_CHARS = re.compile(r"[^a-z ]")


class Vocabulary:
    """Characters sorted by codepoint get ids ``0..n-1``; ``<unk>`` gets ``n``."""

    def __init__(self, chars):
        self.chars = sorted(set(chars) - {UNK})
        self.id_to_char = self.chars + [UNK]
        self.char_to_id = {ch: i for i, ch in enumerate(self.id_to_char)}
        self.unk_id = len(self.chars)

    @classmethod
    def from_text(cls, text):
        return cls(set(text))

    def __len__(self):
        return len(self.id_to_char)

    @property
    def size(self):
        return len(self)

    def encode(self, text):
        get = self.char_to_id.get
        return np.fromiter((get(ch, self.unk_id) for ch in text), dtype=np.int64, count=len(text))

    def decode(self, ids):
        return "".join(self.id_to_char[i] for i in ids)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.chars == other.chars

    def to_list(self):
        return list(self.chars)


@dataclass
class CorpusSplits:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    vocab: Vocabulary


def _read(path):
    text = Path(path).read_text(encoding="utf-8")
    if not text:
        raise ValueError(f"{path}: empty corpus file")
    return text


def _untokenize_ptb(text):
    # Mikolov char files spell "a b c _ d e": characters separated by spaces,
    # '_' marking the word boundary.
    lines = text.split("\n")
    return "\n".join(" ".join(w.replace(" ", "") for w in ln.strip().split(" _ ")) for ln in lines)


def proportional_split(text, fractions=(0.9, 0.05, 0.05)):
    n = len(text)
    a = int(round(n * fractions[0]))
    b = a + int(round(n * fractions[1]))
    return text[:a], text[a:b], text[b:]


def load_corpus(paths, mode="raw", fractions=(0.9, 0.05, 0.05)):
    """Read a corpus into id splits plus a train-only vocabulary.

    ``paths`` is either one file (split 90/5/5, or by the exact 90M/5M/5M
    character counts for a full-size text8 file) or three files
    ``(train, valid, test)``.  ``mode`` is ``raw``, ``ptb_char`` or ``text8``.
    """
    if mode not in ("raw", "ptb_char", "text8"):
        raise ValueError(f"unknown corpus mode {mode!r}")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    texts = [_read(p) for p in paths]
    if mode == "ptb_char":
        texts = [_untokenize_ptb(t) if " _ " in t else t for t in texts]
    if mode == "text8":
        joined = "".join(texts)
        if _TEXT8_CHARS.search(joined):
            logger.warning("text8 corpus contains characters outside [a-z ]; falling back to raw mode")
            mode = "raw"
    if len(texts) == 3:
        train, valid, test = texts
    elif len(texts) == 1:
        text = texts[0]
        if mode == "text8" and len(text) >= sum(TEXT8_SIZES):
            a, b, c = TEXT8_SIZES
            train, valid, test = text[:a], text[a:a + b], text[a + b:a + b + c]
        else:
            train, valid, test = proportional_split(text, fractions)
    else:
        raise ValueError("expected one corpus file or three (train, valid, test)")
    vocab = Vocabulary.from_text(train)
    return CorpusSplits(vocab.encode(train), vocab.encode(valid), vocab.encode(test), vocab)


def corpus_from_text(text, fractions=(0.9, 0.05, 0.05)):
    train, valid, test = proportional_split(text, fractions)
    vocab = Vocabulary.from_text(train)
    return CorpusSplits(vocab.encode(train), vocab.encode(valid), vocab.encode(test), vocab)


# --- batching -------------------------------------------------------------------

def usable_length(n, batch, seq_len):
    """Largest multiple of ``batch * seq_len`` that leaves room for the shifted targets."""
    block = batch * seq_len
    if n < block + 1:
        raise ValueError(f"split of {n} characters is too short: need at least {block + 1} "
                         f"for batch {batch} x seq_len {seq_len}")
    return (n - 1) // block * block


def epoch_offset(n, batch, seq_len, rng):
    """Random start of this epoch's crop."""
    slack = n - 1 - usable_length(n, batch, seq_len)
    return int(rng.integers(0, slack + 1))


def epoch_batches(split, batch, seq_len, offset=0):
    """Yield ``(inputs, targets)`` of shape (batch, seq_len) in lane order.

    The crop ``[offset, offset + usable]`` is cut into ``batch`` contiguous
    lanes, so row ``b`` of chunk ``k + 1`` continues row ``b`` of chunk ``k``.
    """
    split = np.asarray(split)
    usable = usable_length(len(split), batch, seq_len)
    if offset < 0 or offset + usable + 1 > len(split):
        raise ValueError(f"offset {offset} leaves too few characters")
    x = split[offset:offset + usable].reshape(batch, -1)
    y = split[offset + 1:offset + usable + 1].reshape(batch, -1)
    for k in range(x.shape[1] // seq_len):
        cols = slice(k * seq_len, (k + 1) * seq_len)
        yield x[:, cols], y[:, cols]


def chunks_per_epoch(n, batch, seq_len):
    return usable_length(n, batch, seq_len) // (batch * seq_len)


def make_epoch(split, batch, seq_len, rng):
    """One epoch of lane-continuous chunks from a random crop of ``split``."""
    return epoch_batches(split, batch, seq_len, epoch_offset(len(split), batch, seq_len, rng))


# --- synthetic text ------------------------------------------------------------

_SYLLABLES = ["ka", "to", "ri", "sen", "ma", "lu", "de", "on", "pi", "sa", "ne", "mo", "ru",
              "ti", "va", "el", "qu", "bo", "ha", "in", "st", "ar", "ge", "ly"]


def synthetic_text(n_chars, seed=0, n_words=400):
    """English-like filler: Zipf-distributed words of 1-4 syllables, sentences, punctuation.

    Deterministic for a given seed; used by the demos and desk-scale tests in
    place of corpora that cannot be downloaded here.
    """
    rng = np.random.default_rng(seed)
    words = []
    seen = set()
    while len(words) < n_words:
        w = "".join(rng.choice(_SYLLABLES, size=rng.choice([1, 2, 2, 3, 3, 4])))
        if w not in seen:
            seen.add(w)
            words.append(w)
    ranks = np.arange(1, n_words + 1)
    p = 1.0 / ranks
    p /= p.sum()
    out, size = [], 0
    while size < n_chars:
        n = int(rng.integers(4, 14))
        sent = [words[i] for i in rng.choice(n_words, size=n, p=p)]
        sent[0] = sent[0].capitalize()
        if n > 6 and rng.random() < 0.4:
            sent[n // 2] += ","
        s = " ".join(sent) + rng.choice([".", ".", ".", "?", "!"]) + ("\n" if rng.random() < 0.1 else " ")
        out.append(s)
        size += len(s)
    return "".join(out)[:n_chars]
