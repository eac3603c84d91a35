"""Byte-level BPE subword tokenizer with special tokens.

Training is greedy pair-frequency merging over whitespace pretokens.
Symbols are byte strings, so any UTF-8 input round-trips exactly:
bytes not covered by a merge fall back to the 256-entry base alphabet
and ``decode(encode(s)) == s`` holds for every string ``s``.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import IdOutOfRange, VocabTooSmall

SPECIAL_TOKENS = ("PAD", "UNK", "MASK", "BOS", "EOS")
PAD_ID, UNK_ID, MASK_ID, BOS_ID, EOS_ID = range(len(SPECIAL_TOKENS))
N_SPECIALS = len(SPECIAL_TOKENS)
N_BYTES = 256

# Runs of whitespace and non-whitespace alternate; merges never cross a run.
_PRETOKEN_RE = re.compile(r"\s+|\S+")

_FORMAT_VERSION = 1


def _pretokenize(text: str) -> list[bytes]:
    return [run.encode("utf-8") for run in _PRETOKEN_RE.findall(text)]


def _merge_word(word: tuple[bytes, ...], pair: tuple[bytes, bytes]) -> tuple[bytes, ...]:
    """Replace non-overlapping occurrences of pair, scanning left to right."""
    merged = pair[0] + pair[1]
    out: list[bytes] = []
    i = 0
    while i < len(word):
        if i + 1 < len(word) and word[i] == pair[0] and word[i + 1] == pair[1]:
            out.append(merged)
            i += 2
        else:
            out.append(word[i])
            i += 1
    return tuple(out)


class BpeTokenizer(BaseEstimator):
    """Trainable byte-pair tokenizer.

    Parameters
    ----------
    vocab_size:
        Upper bound on the vocabulary (specials + 256 byte symbols +
        learned merges). Training stops earlier if no pair occurs twice.
    seed:
        Accepted for interface symmetry with the other estimators;
        greedy training is fully deterministic and does not consume it.
    """

    def __init__(self, vocab_size: int = 1024, seed: int = 0):
        self.vocab_size = vocab_size
        self.seed = seed

    # -- training ------------------------------------------------------

    def fit(self, texts: Iterable[str], y=None) -> "BpeTokenizer":
        if self.vocab_size < N_BYTES + N_SPECIALS + 1:
            raise VocabTooSmall(
                f"vocab_size={self.vocab_size} cannot hold {N_BYTES} byte symbols, "
                f"{N_SPECIALS} specials, and at least one merge"
            )
        words: Counter[tuple[bytes, ...]] = Counter()
        for text in texts:
            for pretoken in _pretokenize(text):
                words[tuple(bytes([b]) for b in pretoken)] += 1

        max_merges = self.vocab_size - N_BYTES - N_SPECIALS
        merges: list[tuple[bytes, bytes]] = []
        while len(merges) < max_merges:
            pair_counts: Counter[tuple[bytes, bytes]] = Counter()
            for word, count in words.items():
                for a, b in zip(word, word[1:]):
                    pair_counts[(a, b)] += count
            if not pair_counts:
                break
            # Highest frequency wins; ties go to the lexicographically
            # smallest pair so training is order-independent.
            best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
            if best[1] < 2:
                break
            pair = best[0]
            merges.append(pair)
            words = Counter(
                {_merge_word(word, pair): count for word, count in words.items()}
            )

        self._install(merges)
        return self

    def _install(self, merges: list[tuple[bytes, bytes]]) -> None:
        self.merges_ = merges
        self.specials_ = {name: i for i, name in enumerate(SPECIAL_TOKENS)}
        vocab: dict[bytes, int] = {}
        for b in range(N_BYTES):
            vocab[bytes([b])] = N_SPECIALS + b
        for rank, (left, right) in enumerate(merges):
            vocab[left + right] = N_SPECIALS + N_BYTES + rank
        self.vocab_ = vocab
        self.ranks_ = {pair: rank for rank, pair in enumerate(merges)}
        self.symbols_: dict[int, bytes] = {i: sym for sym, i in vocab.items()}
        self.vocab_size_ = N_SPECIALS + N_BYTES + len(merges)

    def _check_fitted(self) -> None:
        if not hasattr(self, "vocab_"):
            raise NotFittedError("BpeTokenizer must be fit or loaded before use")

    # -- special token ids ---------------------------------------------

    @property
    def pad_id(self) -> int:
        return self.specials_["PAD"]

    @property
    def unk_id(self) -> int:
        return self.specials_["UNK"]

    @property
    def mask_id(self) -> int:
        return self.specials_["MASK"]

    @property
    def bos_id(self) -> int:
        return self.specials_["BOS"]

    @property
    def eos_id(self) -> int:
        return self.specials_["EOS"]

    # -- encode / decode -------------------------------------------------

    def encode(self, text: str, add_bos_eos: bool = False) -> list[int]:
        """Apply merges in rank order within each whitespace pretoken."""
        self._check_fitted()
        ids: list[int] = []
        if add_bos_eos:
            ids.append(self.bos_id)
        for pretoken in _pretokenize(text):
            word = tuple(bytes([b]) for b in pretoken)
            while len(word) > 1:
                ranked = [
                    (self.ranks_[p], p)
                    for p in set(zip(word, word[1:]))
                    if p in self.ranks_
                ]
                if not ranked:
                    break
                word = _merge_word(word, min(ranked)[1])
            ids.extend(self.vocab_[sym] for sym in word)
        if add_bos_eos:
            ids.append(self.eos_id)
        return ids

    def decode(self, ids: Sequence[int]) -> str:
        """Concatenate symbol bytes; special ids render as empty text."""
        self._check_fitted()
        chunks: list[bytes] = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= self.vocab_size_:
                raise IdOutOfRange(f"token id {i} outside [0, {self.vocab_size_})")
            if i < N_SPECIALS:
                continue
            chunks.append(self.symbols_[i])
        return b"".join(chunks).decode("utf-8", errors="replace")

    def transform(self, texts: Iterable[str]) -> list[list[int]]:
        return [self.encode(t) for t in texts]

    def inverse_transform(self, sequences: Iterable[Sequence[int]]) -> list[str]:
        return [self.decode(s) for s in sequences]

    # -- persistence -----------------------------------------------------

    def to_json(self, meta: dict | None = None) -> str:
        """Canonical JSON (sorted keys, no whitespace variance)."""
        self._check_fitted()
        doc = {
            "version": _FORMAT_VERSION,
            "specials": self.specials_,
            "merges": [
                [left.decode("latin-1"), right.decode("latin-1")]
                for left, right in self.merges_
            ],
            "meta": meta or {},
        }
        return json.dumps(doc, sort_keys=True, ensure_ascii=True, separators=(",", ":")) + "\n"

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        Path(path).write_text(self.to_json(meta), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "BpeTokenizer":
        doc = json.loads(text)
        if doc.get("version") != _FORMAT_VERSION:
            raise ValueError(f"unsupported tokenizer file version: {doc.get('version')}")
        merges = [
            (left.encode("latin-1"), right.encode("latin-1"))
            for left, right in doc["merges"]
        ]
        tok = cls(vocab_size=N_SPECIALS + N_BYTES + len(merges))
        tok._install(merges)
        tok.meta_ = doc.get("meta", {})
        return tok

    @classmethod
    def load(cls, path: str | Path) -> "BpeTokenizer":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))
