"""Question-answer corpus ingestion, cleaning, and template rendering.

A corpus is an ordered list of :class:`QAPair` records plus bookkeeping
counts. Parsing accepts JSON-lines (keys ``id``/``q``/``a``/``type``) or
CSV (header ``q,a,type``). Cleaning removes duplicates and incomplete
records and normalizes whitespace; both operations are deterministic, so
identical input bytes always produce an identical corpus.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .errors import InvalidPair, MalformedRecord

TEMPLATE_PREFIX = "Question: "
TEMPLATE_SEPARATOR = " ; Answer:"


class Provenance(str, Enum):
    ORIGINAL = "original"
    SYNONYM_AUG = "synonym_aug"
    BACK_TRANS_AUG = "back_trans_aug"
    SYNTHETIC_BALANCE = "synthetic_balance"


@dataclass(frozen=True)
class QAPair:
    """One question-answer record with an optional category label."""

    id: str
    question: str
    answer: str
    qtype: str | None = None
    provenance: Provenance = Provenance.ORIGINAL


@dataclass
class CorpusStats:
    """Counts kept alongside a corpus: total == kept + dropped."""

    total: int = 0
    dropped_incomplete: int = 0
    dropped_duplicate: int = 0
    per_qtype: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "dropped_incomplete": self.dropped_incomplete,
            "dropped_duplicate": self.dropped_duplicate,
            "per_qtype": dict(sorted(self.per_qtype.items())),
        }


@dataclass
class Corpus:
    pairs: list[QAPair] = field(default_factory=list)
    stats: CorpusStats = field(default_factory=CorpusStats)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def by_id(self) -> dict[str, QAPair]:
        return {p.id: p for p in self.pairs}


def normalize_whitespace(text: str) -> str:
    """Collapse whitespace runs to single spaces and trim the ends."""
    return " ".join(text.split())


def _dedup_key(question: str, answer: str) -> str:
    # Case-folded, whitespace-collapsed comparison of the concatenation.
    return normalize_whitespace(question).casefold() + "\x1f" + normalize_whitespace(answer).casefold()


def _content_id(question: str, answer: str) -> str:
    digest = hashlib.sha256((question + "\x1f" + answer).encode("utf-8")).hexdigest()
    return digest[:12]


def _qtype_counts(pairs: Sequence[QAPair]) -> dict[str, int]:
    return dict(Counter(p.qtype for p in pairs if p.qtype is not None))


def _unique_id(candidate: str, seen: set[str]) -> str:
    uid = candidate
    n = 1
    while uid in seen:
        n += 1
        uid = f"{candidate}-{n}"
    seen.add(uid)
    return uid


def parse_corpus(source: bytes | BinaryIO, format: str = "jsonl", strict: bool = False) -> Corpus:
    """Parse a UTF-8 byte stream into a corpus, one pair per record.

    Records missing a nonempty ``q`` or ``a`` raise :class:`MalformedRecord`
    in strict mode; otherwise they are dropped and counted. Ids come from
    the ``id`` field when present, else from a hash of the record content,
    deduplicated with a numeric suffix to keep ids unique.
    """
    if hasattr(source, "read"):
        data = source.read()
    else:
        data = source
    text = data.decode("utf-8")

    if format == "jsonl":
        records = _iter_jsonl(text, strict)
    elif format == "csv":
        records = _iter_csv(text, strict)
    else:
        raise ValueError(f"unknown corpus format: {format!r}")

    pairs: list[QAPair] = []
    stats = CorpusStats()
    seen_ids: set[str] = set()
    for line_no, record in records:
        stats.total += 1
        if record is None:
            stats.dropped_incomplete += 1
            continue
        question, answer, qtype, rec_id = record
        if rec_id is None:
            rec_id = _content_id(question, answer)
        pairs.append(
            QAPair(
                id=_unique_id(rec_id, seen_ids),
                question=question,
                answer=answer,
                qtype=qtype,
            )
        )
    stats.per_qtype = _qtype_counts(pairs)
    return Corpus(pairs=pairs, stats=stats)


def _iter_jsonl(text: str, strict: bool):
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            if strict:
                raise MalformedRecord(line_no, f"line {line_no}: invalid JSON")
            yield line_no, None
            continue
        yield line_no, _extract_fields(obj, line_no, strict)


def _iter_csv(text: str, strict: bool):
    reader = csv.DictReader(io.StringIO(text))
    for line_no, row in enumerate(reader, start=2):  # line 1 is the header
        obj = {
            "q": row.get("q"),
            "a": row.get("a"),
            "type": row.get("type"),
            "id": row.get("id"),
        }
        yield line_no, _extract_fields(obj, line_no, strict)


def _extract_fields(obj, line_no: int, strict: bool):
    if not isinstance(obj, dict):
        if strict:
            raise MalformedRecord(line_no, f"line {line_no}: record is not an object")
        return None
    question = obj.get("q")
    answer = obj.get("a")
    if not isinstance(question, str) or not question.strip():
        if strict:
            raise MalformedRecord(line_no, f"line {line_no}: missing or empty 'q'")
        return None
    if not isinstance(answer, str) or not answer.strip():
        if strict:
            raise MalformedRecord(line_no, f"line {line_no}: missing or empty 'a'")
        return None
    qtype = obj.get("type")
    qtype = qtype if isinstance(qtype, str) and qtype.strip() else None
    rec_id = obj.get("id")
    rec_id = rec_id if isinstance(rec_id, str) and rec_id.strip() else None
    return question, answer, qtype, rec_id


def clean(corpus: Corpus) -> Corpus:
    """Normalize whitespace, drop incomplete records, drop duplicates.

    First occurrence wins on duplicates and input order is preserved, so
    cleaning is idempotent: ``clean(clean(c)) == clean(c)``.
    """
    kept: list[QAPair] = []
    seen: set[str] = set()
    dropped_incomplete = 0
    dropped_duplicate = 0
    for pair in corpus.pairs:
        question = normalize_whitespace(pair.question)
        answer = normalize_whitespace(pair.answer)
        if not question or not answer:
            dropped_incomplete += 1
            continue
        key = _dedup_key(question, answer)
        if key in seen:
            dropped_duplicate += 1
            continue
        seen.add(key)
        kept.append(replace(pair, question=question, answer=answer))
    stats = CorpusStats(
        total=corpus.stats.total,
        dropped_incomplete=corpus.stats.dropped_incomplete + dropped_incomplete,
        dropped_duplicate=corpus.stats.dropped_duplicate + dropped_duplicate,
        per_qtype=_qtype_counts(kept),
    )
    return Corpus(pairs=kept, stats=stats)


def format_template(pair: QAPair) -> str:
    """Render a pair as ``Question: <q> ; Answer: <a>``.

    The template is write-only: nothing in the pipeline parses it back,
    so a literal `` ; `` inside either field passes through verbatim.
    """
    if not pair.question.strip() or not pair.answer.strip():
        raise InvalidPair(f"pair {pair.id!r} has an empty question or answer")
    return f"{TEMPLATE_PREFIX}{pair.question}{TEMPLATE_SEPARATOR} {pair.answer}"


def split_corpus(
    corpus: Corpus, ratios: Sequence[float], seed: int
) -> list[Corpus]:
    """Shuffle deterministically and split into len(ratios) parts.

    Cut points are cumulative floors of the ratios over the corpus size,
    with the final part absorbing any remainder.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(corpus.pairs))
    shuffled = [corpus.pairs[i] for i in order]
    n = len(shuffled)
    cuts = []
    acc = 0.0
    for r in ratios[:-1]:
        acc += r
        cuts.append(int(acc * n))
    cuts.append(n)
    parts: list[Corpus] = []
    start = 0
    for cut in cuts:
        part = shuffled[start:cut]
        parts.append(
            Corpus(pairs=part, stats=CorpusStats(total=len(part), per_qtype=_qtype_counts(part)))
        )
        start = cut
    return parts


def extend_corpus(corpus: Corpus, new_pairs: Sequence[QAPair]) -> Corpus:
    """Append pairs (e.g. augmented copies), keeping drop counts."""
    pairs = list(corpus.pairs) + list(new_pairs)
    stats = CorpusStats(
        total=corpus.stats.total + len(new_pairs),
        dropped_incomplete=corpus.stats.dropped_incomplete,
        dropped_duplicate=corpus.stats.dropped_duplicate,
        per_qtype=_qtype_counts(pairs),
    )
    return Corpus(pairs=pairs, stats=stats)


def corpus_to_jsonl(corpus: Corpus) -> str:
    """Serialize pairs one JSON object per line (keys id, q, a, type, provenance)."""
    lines = []
    for p in corpus.pairs:
        obj = {"id": p.id, "q": p.question, "a": p.answer}
        if p.qtype is not None:
            obj["type"] = p.qtype
        obj["provenance"] = p.provenance.value
        lines.append(json.dumps(obj, ensure_ascii=False))
    return "\n".join(lines) + ("\n" if lines else "")


def corpus_from_jsonl(text: str) -> Corpus:
    """Read back a corpus written by :func:`corpus_to_jsonl`."""
    pairs: list[QAPair] = []
    seen_ids: set[str] = set()
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        provenance = Provenance(obj.get("provenance", Provenance.ORIGINAL.value))
        rec_id = obj.get("id") or _content_id(obj["q"], obj["a"])
        pairs.append(
            QAPair(
                id=_unique_id(rec_id, seen_ids),
                question=obj["q"],
                answer=obj["a"],
                qtype=obj.get("type"),
                provenance=provenance,
            )
        )
    stats = CorpusStats(total=len(pairs), per_qtype=_qtype_counts(pairs))
    return Corpus(pairs=pairs, stats=stats)


def templated_lines(corpus: Corpus | Iterable[QAPair]) -> list[str]:
    """Template rendering for every pair, in corpus order."""
    pairs = corpus.pairs if isinstance(corpus, Corpus) else list(corpus)
    return [format_template(p) for p in pairs]
