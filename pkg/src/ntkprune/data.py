"""Corpus ingestion, byte-level tokenization and deterministic batch sampling.

The vocabulary is the 256 byte values plus BOS (256) and EOS (257).
A corpus file is raw text whose documents are separated by NUL bytes; each
document is tokenized as BOS + bytes + EOS and the streams concatenated.
Splits (train / calibration pool / eval) are disjoint index ranges over the
token stream, so the calibration pool and the held-out KL set never overlap.

Batch sampling uses a SplitMix64 generator (pinned here so batches are
reproducible from (corpus, seed, n, seq_len) alone):

    state <- (state + 0x9E3779B97F4A7C15) mod 2^64
    z <- state; z <- (z xor (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2^64
    z <- (z xor (z >> 27)) * 0x94D049BB133111EB mod 2^64
    output z xor (z >> 31)

Window starts are drawn uniformly via rejection sampling (no modulo bias)
and are distinct within a call.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import BOS_ID, EOS_ID, DEFAULT_VOCAB

DOC_SEPARATOR = b"\x00"
DEFAULT_SPLIT_RATIOS = (0.90, 0.05, 0.05)
SPLIT_NAMES = ("train", "calib", "eval")

_MASK64 = (1 << 64) - 1


class DataError(Exception):
    pass


class SplitMix64:
    """64-bit SplitMix generator; the sequence is part of the batch format."""

    GAMMA = 0x9E3779B97F4A7C15

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + self.GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform draw in [0, n) by rejection, so every value is equally likely."""
        if n <= 0:
            raise ValueError("below() needs a positive bound")
        limit = ((1 << 64) // n) * n
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n


def tokenize(text: bytes) -> np.ndarray:
    """Bytes to ids: byte b maps to id b, wrapped in BOS/EOS markers."""
    ids = np.empty(len(text) + 2, dtype=np.int32)
    ids[0] = BOS_ID
    if len(text):
        ids[1:-1] = np.frombuffer(text, dtype=np.uint8)
    ids[-1] = EOS_ID
    return ids


def detokenize(ids) -> bytes:
    """Inverse of tokenize: drops marker ids, returns the raw bytes."""
    arr = np.asarray(ids)
    return bytes(arr[arr < 256].astype(np.uint8).tobytes())


@dataclass
class Corpus:
    name: str
    ids: np.ndarray  # int32 token stream
    splits: dict     # split name -> (start, end) index range

    def split_range(self, split: str):
        if split not in self.splits:
            raise DataError(f"unknown split '{split}' (have {list(self.splits)})")
        return self.splits[split]

    def split_len(self, split: str) -> int:
        lo, hi = self.split_range(split)
        return hi - lo


@dataclass
class Batch:
    samples: np.ndarray        # int32 [n, seq_len]
    seed: int
    source_offsets: np.ndarray  # absolute start index of each window

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def seq_len(self) -> int:
        return self.samples.shape[1]


def load_corpus(path, ratios=DEFAULT_SPLIT_RATIOS, name=None) -> Corpus:
    """Read a NUL-separated corpus file and cut the token stream into splits."""
    path = Path(path)
    raw = path.read_bytes()
    docs = raw.split(DOC_SEPARATOR)
    streams = [tokenize(doc) for doc in docs if len(doc) > 0]
    if not streams:
        raise DataError(f"corpus file {path} holds no documents")
    ids = np.concatenate(streams)
    return Corpus(name=name or path.name, ids=ids,
                  splits=make_splits(len(ids), ratios))


def make_splits(n_tokens: int, ratios=DEFAULT_SPLIT_RATIOS) -> dict:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError("split ratios must be three values summing to 1")
    a = int(n_tokens * ratios[0])
    b = a + int(n_tokens * ratios[1])
    return {"train": (0, a), "calib": (a, b), "eval": (b, n_tokens)}


def sample_batch(corpus: Corpus, split: str, seed: int, n: int,
                 seq_len: int) -> Batch:
    """Draw n windows of seq_len tokens with distinct, uniform start offsets.

    Pure function of (corpus, split, seed, n, seq_len); raises if the split
    cannot hold n non-overlapping windows.
    """
    lo, hi = corpus.split_range(split)
    span = hi - lo
    if n <= 0 or seq_len <= 0:
        raise DataError("n and seq_len must be positive")
    if n * seq_len > span:
        raise DataError(
            f"split '{split}' has {span} tokens, too small for "
            f"{n} windows of {seq_len}")
    usable = span - seq_len + 1
    rng = SplitMix64(seed)
    offsets = []
    chosen = set()
    while len(offsets) < n:
        off = rng.below(usable)
        if off in chosen:
            continue
        chosen.add(off)
        offsets.append(off)
    starts = np.array(offsets, dtype=np.int64) + lo
    samples = np.stack([corpus.ids[s:s + seq_len] for s in starts])
    return Batch(samples=samples.astype(np.int32), seed=seed,
                 source_offsets=starts)


def eval_windows(corpus: Corpus, split: str, seq_len: int,
                 limit: int | None = None) -> np.ndarray:
    """Consecutive non-overlapping windows covering a split (partial tail
    dropped); the deterministic basis for perplexity evaluation."""
    lo, hi = corpus.split_range(split)
    count = (hi - lo) // seq_len
    if count == 0:
        raise DataError(f"split '{split}' shorter than one window")
    if limit is not None:
        count = min(count, limit)
    idx = lo + np.arange(count)[:, None] * seq_len + np.arange(seq_len)[None, :]
    return corpus.ids[idx].astype(np.int32)


# --------------------------------------------------------------------------
# synthetic corpus for demos and tests
# --------------------------------------------------------------------------

_SUBJECTS = ["the river", "a merchant", "the old clock", "our garden",
             "the ship", "a quiet fox", "the archive", "her telescope",
             "the market", "a glass bead", "the lighthouse", "his ledger"]
_VERBS = ["carries", "remembers", "follows", "measures", "hides",
          "repairs", "collects", "signals", "crosses", "records"]
_OBJECTS = ["the morning tide", "a forgotten name", "three copper coins",
            "the northern road", "a pattern of stars", "the winter grain",
            "an open door", "the printed page", "a line of salt",
            "the distant bell"]
_TAILS = ["before dawn", "without a sound", "every seventh day",
          "against the wind", "in plain sight", "for no clear reason",
          "as the story goes", "beyond the wall"]


def synthetic_text(n_sentences: int, seed: int) -> bytes:
    """Template-grammar prose with enough byte-level structure to learn."""
    rng = SplitMix64(seed)
    parts = []
    for _ in range(n_sentences):
        s = _SUBJECTS[rng.below(len(_SUBJECTS))]
        v = _VERBS[rng.below(len(_VERBS))]
        o = _OBJECTS[rng.below(len(_OBJECTS))]
        sentence = f"{s} {v} {o}"
        if rng.below(3) == 0:
            sentence += " " + _TAILS[rng.below(len(_TAILS))]
        parts.append(sentence.capitalize() + ".")
    return " ".join(parts).encode("utf-8")


def write_synthetic_corpus(path, n_docs: int = 200, sentences_per_doc: int = 40,
                           seed: int = 0) -> Path:
    """Write a deterministic synthetic corpus file (NUL-separated docs)."""
    path = Path(path)
    docs = [synthetic_text(sentences_per_doc, seed * 100003 + i)
            for i in range(n_docs)]
    path.write_bytes(DOC_SEPARATOR.join(docs))
    return path
