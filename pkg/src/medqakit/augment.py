"""Corpus expansion and class balancing.

Three text-level augmenters (synonym replacement, back translation,
duplication-based balancing) plus a vector-level SMOTE oversampler.
Everything is a pure function of (input, seed), so a fixed seed always
reproduces the same augmented corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .corpus import Corpus, CorpusStats, Provenance, QAPair, _qtype_counts
from .errors import MissingLabel, TooFewPoints


@dataclass
class SynonymLexicon:
    """Case-folded word -> deduplicated synonym lists (self-mappings removed)."""

    entries: dict[str, list[str]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw: dict[str, list[str]]) -> "SynonymLexicon":
        entries: dict[str, list[str]] = {}
        for word, synonyms in raw.items():
            key = word.casefold()
            seen: list[str] = []
            for s in synonyms:
                if s.casefold() == key or s in seen:
                    continue
                seen.append(s)
            if seen:
                entries[key] = seen
        return cls(entries=entries)

    @classmethod
    def load(cls, path: str | Path) -> "SynonymLexicon":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def __contains__(self, word: str) -> bool:
        return word.casefold() in self.entries

    def synonyms(self, word: str) -> list[str]:
        return self.entries.get(word.casefold(), [])


class Translator(Protocol):
    """Translation backend; ``direction`` is "forward" or "backward"."""

    def translate(self, text: str, direction: str) -> str: ...


class DictionaryTranslator:
    """Deterministic word-for-word pivot translator for offline tests.

    The pivot mapping is closed bidirectionally at load: forward replaces
    source words by pivot words, backward inverts that. Words absent from
    the dictionary pass through unchanged, so the function is total.
    """

    def __init__(self, mapping: dict[str, str] | None = None):
        mapping = mapping or {}
        self._forward = {k.casefold(): v for k, v in mapping.items()}
        self._backward = {v.casefold(): k for k, v in mapping.items()}

    @classmethod
    def load(cls, path: str | Path) -> "DictionaryTranslator":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def translate(self, text: str, direction: str) -> str:
        if direction not in ("forward", "backward"):
            raise ValueError(f"unknown direction: {direction!r}")
        table = self._forward if direction == "forward" else self._backward
        return " ".join(table.get(w.casefold(), w) for w in text.split())


def _replace_words(question: str, lexicon: SynonymLexicon, rate: float, rng: np.random.Generator) -> str:
    words = question.split()
    out = []
    for w in words:
        choices = lexicon.synonyms(w)
        if choices and rng.random() < rate:
            out.append(choices[int(rng.integers(len(choices)))])
        else:
            out.append(w)
    return " ".join(out)


def synonym_replace(pair: QAPair, lexicon: SynonymLexicon, rate: float, seed: int) -> QAPair:
    """Independently replace each lexicon word of the question with
    probability ``rate``; the answer is untouched."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    return QAPair(
        id=f"{pair.id}-syn{seed}",
        question=_replace_words(pair.question, lexicon, rate, rng),
        answer=pair.answer,
        qtype=pair.qtype,
        provenance=Provenance.SYNONYM_AUG,
    )


def back_translate(pair: QAPair, translator: Translator) -> QAPair:
    """Round-trip the question through the translator's pivot language."""
    pivoted = translator.translate(pair.question, "forward")
    question = translator.translate(pivoted, "backward")
    return QAPair(
        id=f"{pair.id}-bt",
        question=question,
        answer=pair.answer,
        qtype=pair.qtype,
        provenance=Provenance.BACK_TRANS_AUG,
    )


def balance_by_duplication(
    corpus: Corpus, lexicon: SynonymLexicon, seed: int, rate: float = 0.15
) -> Corpus:
    """Pad every minority class with synonym-augmented copies until all
    class counts equal the pre-existing maximum. Originals are kept
    untouched; synthetic copies are appended in deterministic order."""
    for pair in corpus.pairs:
        if pair.qtype is None:
            raise MissingLabel(f"pair {pair.id!r} has no qtype; balancing needs labels")
    counts = _qtype_counts(corpus.pairs)
    if not counts:
        return Corpus(pairs=list(corpus.pairs), stats=corpus.stats)
    majority = max(counts.values())
    rng = np.random.default_rng(seed)
    synthetic: list[QAPair] = []
    members_by_class: dict[str, list[QAPair]] = {}
    for pair in corpus.pairs:
        members_by_class.setdefault(pair.qtype, []).append(pair)
    for qtype in sorted(counts):
        members = members_by_class[qtype]
        deficit = majority - counts[qtype]
        for i in range(deficit):
            parent = members[int(rng.integers(len(members)))]
            synthetic.append(
                QAPair(
                    id=f"{parent.id}-bal{i}",
                    question=_replace_words(parent.question, lexicon, rate, rng),
                    answer=parent.answer,
                    qtype=parent.qtype,
                    provenance=Provenance.SYNTHETIC_BALANCE,
                )
            )
    pairs = list(corpus.pairs) + synthetic
    stats = CorpusStats(
        total=corpus.stats.total + len(synthetic),
        dropped_incomplete=corpus.stats.dropped_incomplete,
        dropped_duplicate=corpus.stats.dropped_duplicate,
        per_qtype=_qtype_counts(pairs),
    )
    return Corpus(pairs=pairs, stats=stats)


SYNTHETIC_SOURCE = "synthetic"


@dataclass
class EmbeddingPoint:
    vector: np.ndarray
    class_label: str
    source_id: str


def smote(
    points: Sequence[EmbeddingPoint], k: int, target_count: int, seed: int
) -> list[EmbeddingPoint]:
    """Oversample minority classes with nearest-neighbor interpolation.

    Each synthetic vector is ``x + lam * (nn - x)`` for a uniform
    ``lam`` in [0, 1] and ``nn`` one of x's k nearest same-class
    neighbors (Euclidean). Members are visited round-robin until the
    class reaches ``target_count``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    vectors = [np.asarray(p.vector, dtype=np.float64) for p in points]
    dims = {v.shape for v in vectors}
    if len(dims) > 1:
        raise ValueError(f"embedding dimensions differ: {sorted(dims)}")
    for p, v in zip(points, vectors):
        if not np.all(np.isfinite(v)):
            raise ValueError(f"point {p.source_id!r} has non-finite entries")

    by_class: dict[str, list[int]] = {}
    for i, p in enumerate(points):
        by_class.setdefault(p.class_label, []).append(i)

    rng = np.random.default_rng(seed)
    result = list(points)
    for label in sorted(by_class):
        idx = by_class[label]
        deficit = target_count - len(idx)
        if deficit <= 0:
            continue
        if len(idx) < k + 1:
            raise TooFewPoints(label, f"class {label!r} has {len(idx)} points, needs k+1={k + 1}")
        member_vecs = np.stack([vectors[i] for i in idx])
        # k nearest same-class neighbors per member, self excluded;
        # distance ties resolved by smaller index.
        dists = np.linalg.norm(member_vecs[:, None, :] - member_vecs[None, :, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        neighbor_ids = np.argsort(dists, axis=1, kind="stable")[:, :k]
        made = 0
        while made < deficit:
            m = made % len(idx)
            nn = int(neighbor_ids[m, int(rng.integers(k))])
            lam = rng.uniform(0.0, 1.0)
            vec = member_vecs[m] + lam * (member_vecs[nn] - member_vecs[m])
            result.append(EmbeddingPoint(vector=vec, class_label=label, source_id=SYNTHETIC_SOURCE))
            made += 1
    return result


class SmoteOversampler(BaseEstimator):
    """Array-facing wrapper around :func:`smote` (fit_resample idiom).

    ``fit_resample(X, y)`` brings every class up to ``target_count``
    (default: the majority class size) and returns the stacked arrays.
    """

    def __init__(self, k_neighbors: int = 5, target_count: int | None = None, seed: int = 0):
        self.k_neighbors = k_neighbors
        self.target_count = target_count
        self.seed = seed

    def fit_resample(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 2 or len(X) != len(y):
            raise ValueError(f"expected 2d X aligned with y, got {X.shape} and {y.shape}")
        points = [
            EmbeddingPoint(vector=X[i], class_label=str(y[i]), source_id=str(i))
            for i in range(len(X))
        ]
        target = self.target_count
        if target is None:
            _, counts = np.unique(y, return_counts=True)
            target = int(counts.max())
        resampled = smote(points, k=self.k_neighbors, target_count=target, seed=self.seed)
        X_out = np.stack([p.vector for p in resampled])
        y_out = np.array([p.class_label for p in resampled])
        return X_out, y_out
