"""Shared test helpers: finite-difference gradient oracle, a stub
encoder with preset embeddings, and the bundled toy corpus."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from medqakit.corpus import Corpus, corpus_from_jsonl
from medqakit.model import Batch, forward, masked_lm_loss, next_token_loss


def scalar_loss(params, batch: Batch, objective: str, dropout=None) -> float:
    logits, _ = forward(params, batch, dropout)
    fn = masked_lm_loss if objective == "mlm" else next_token_loss
    loss, _ = fn(logits, batch)
    return loss


def finite_difference_grads(params, batch: Batch, objective: str, h: float = 1e-4, dropout=None):
    """Central finite differences of the scalar loss, probing every entry
    of every parameter array. Independent of the analytic backward path.
    A fixed dropout seed keeps the loss a smooth function of the params."""
    grads = {}
    for name, arr in params.arrays.items():
        num = np.zeros_like(arr)
        flat, nflat = arr.ravel(), num.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = scalar_loss(params, batch, objective, dropout)
            flat[i] = orig - h
            down = scalar_loss(params, batch, objective, dropout)
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)
        grads[name] = num
    return grads


def rel_norm_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


class StubEncoder:
    """Duck-typed encoder returning preset vectors per question text."""

    def __init__(self, mapping: dict[str, np.ndarray]):
        self.mapping = {k: np.asarray(v, dtype=np.float64) for k, v in mapping.items()}

    def transform(self, texts):
        if not texts:
            dim = len(next(iter(self.mapping.values()))) if self.mapping else 0
            return np.zeros((0, dim))
        return np.stack([self.mapping[t] for t in texts])

    def embed(self, text):
        return self.mapping[text]


@pytest.fixture(scope="session")
def toy_corpus() -> Corpus:
    path = Path(str(resources.files("medqakit") / "data" / "toy_corpus.jsonl"))
    return corpus_from_jsonl(path.read_text(encoding="utf-8"))


def make_retrieval_setup(n: int, dim: int, seed: int, perturb: float = 0.0):
    """n QA pairs whose query embeddings sit near their index entries."""
    from medqakit.corpus import QAPair
    from medqakit.pipeline import EmbeddingIndex

    rng = np.random.default_rng(seed)
    pairs = [QAPair(f"id{i:03d}", f"question {i}", f"answer {i}") for i in range(n)]
    raw = rng.normal(size=(n, dim))
    index_vecs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    queries = {
        p.question: index_vecs[i] + perturb * rng.normal(size=dim)
        for i, p in enumerate(pairs)
    }
    index = EmbeddingIndex(ids=[p.id for p in pairs], vectors=index_vecs)
    return pairs, index, StubEncoder(queries)


def retrieval_oracle_counts(pairs, index, encoder, cfg, answers_by_id=None):
    """Independent exhaustive rescoring of the retrieval protocol."""
    from medqakit.evaluation import token_f1

    tp = fp = abstained = 0
    for pair in pairs:
        vec = np.asarray(encoder.embed(pair.question), dtype=np.float64)
        vec = vec / np.linalg.norm(vec)
        best_id, best_score = None, None
        for i, pid in enumerate(index.ids):
            score = float(index.vectors[i] @ vec)
            if best_score is None or score > best_score or (
                score == best_score and pid < best_id
            ):
                best_id, best_score = pid, score
        if best_score is None or best_score < cfg.threshold:
            abstained += 1
            continue
        if cfg.match_rule == "exact_id":
            hit = best_id == pair.id
        else:
            hit = token_f1(answers_by_id[best_id], pair.answer) >= cfg.token_f1_threshold
        tp += int(hit)
        fp += int(not hit)
    return tp, fp, abstained
