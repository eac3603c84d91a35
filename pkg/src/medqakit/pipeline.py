"""Staged pipeline: encoder pretraining, retrieval index, prompt
generation, decoder pretraining, answer-masked fine-tuning, answering.

Two sklearn-style estimators carry the trainable state. The
:class:`SentenceEncoder` is pretrained with the masked-token objective
and embeds questions by mean-pooling its final hidden states; the
:class:`CausalLM` is pretrained on next-token prediction and fine-tuned
on retrieval-augmented prompts with the loss restricted to answer
tokens. Stage execution is sequential; rerunning any stage from the
same checkpoint and seed is bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .corpus import TEMPLATE_PREFIX, TEMPLATE_SEPARATOR, Corpus
from .errors import DimensionMismatch, EmptyTrainingSet, ShapeMismatch
from .model import (
    ArchConfig,
    ModelParams,
    forward,
    greedy_generate,
    init_params,
    load_arrays,
    load_checkpoint,
    save_arrays,
    save_checkpoint,
)
from .tokenizer import BOS_ID, EOS_ID, BpeTokenizer
from .train import TrainConfig, TrainLog, fit, pad_sequences

_EMBED_CHUNK = 16


def _encode_truncated(tokenizer: BpeTokenizer, text: str, max_len: int) -> list[int]:
    ids = tokenizer.encode(text, add_bos_eos=True)
    return ids[:max_len]


class SentenceEncoder(BaseEstimator, TransformerMixin):
    """Sentence-level embedding model pretrained on masked tokens.

    ``fit`` runs masked-token pretraining over the given texts;
    ``transform`` returns one mean-pooled final-state vector per text
    (shape ``(n, d_model)``), pooled over non-pad positions only.
    """

    def __init__(
        self,
        tokenizer: BpeTokenizer | None = None,
        arch: ArchConfig | None = None,
        train_config: TrainConfig | None = None,
    ):
        self.tokenizer = tokenizer
        self.arch = arch
        self.train_config = train_config

    def _effective_arch(self, head: str) -> ArchConfig:
        if self.arch is not None:
            if self.arch.vocab_size != self.tokenizer.vocab_size_:
                raise ShapeMismatch(
                    f"arch vocab_size {self.arch.vocab_size} != tokenizer "
                    f"vocabulary {self.tokenizer.vocab_size_}"
                )
            return replace(self.arch, head=head)
        return ArchConfig(vocab_size=self.tokenizer.vocab_size_, head=head)

    def fit(self, texts: Sequence[str], y=None, heldout: Sequence[str] | None = None,
            checkpoint_dir=None, checkpoint_meta=None) -> "SentenceEncoder":
        cfg = self.train_config or TrainConfig()
        arch = self._effective_arch("mlm")
        seqs = [_encode_truncated(self.tokenizer, t, arch.max_seq_len) for t in texts]
        held = (
            [_encode_truncated(self.tokenizer, t, arch.max_seq_len) for t in heldout]
            if heldout
            else None
        )
        params = init_params(arch, seed=cfg.seed)
        self.params_, self.log_ = fit(
            params, cfg, "mlm", seqs, heldout=held,
            checkpoint_dir=checkpoint_dir, checkpoint_meta=checkpoint_meta,
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("SentenceEncoder is not fitted; call fit() or from_checkpoint()")

    def transform(self, texts: Sequence[str]) -> np.ndarray:
        self._check_fitted()
        embed_params = ModelParams(
            config=replace(self.params_.config, head="embedding"),
            arrays=self.params_.arrays,
        )
        out = []
        for start in range(0, len(texts), _EMBED_CHUNK):
            chunk = texts[start : start + _EMBED_CHUNK]
            seqs = [
                _encode_truncated(self.tokenizer, t, embed_params.config.max_seq_len)
                for t in chunk
            ]
            pooled, _ = forward(embed_params, pad_sequences(seqs))
            out.append(pooled)
        if not out:
            return np.zeros((0, self.params_.config.d_model))
        return np.vstack(out)

    def embed(self, text: str) -> np.ndarray:
        return self.transform([text])[0]

    def save(self, path, meta: dict | None = None) -> None:
        self._check_fitted()
        save_checkpoint(path, self.params_, meta)

    @classmethod
    def from_checkpoint(cls, path, tokenizer: BpeTokenizer) -> "SentenceEncoder":
        params, meta = load_checkpoint(path)
        enc = cls(tokenizer=tokenizer, arch=params.config)
        enc.params_ = params
        enc.meta_ = meta
        return enc


class CausalLM(BaseEstimator):
    """Next-token language model with greedy decoding.

    ``fit`` pretrains on raw texts; ``finetune`` continues training on
    rendered prompts where only the answer continuation (and the closing
    EOS) contributes to the loss.
    """

    def __init__(
        self,
        tokenizer: BpeTokenizer | None = None,
        arch: ArchConfig | None = None,
        train_config: TrainConfig | None = None,
    ):
        self.tokenizer = tokenizer
        self.arch = arch
        self.train_config = train_config

    def _effective_arch(self) -> ArchConfig:
        if self.arch is not None:
            if self.arch.vocab_size != self.tokenizer.vocab_size_:
                raise ShapeMismatch(
                    f"arch vocab_size {self.arch.vocab_size} != tokenizer "
                    f"vocabulary {self.tokenizer.vocab_size_}"
                )
            return replace(self.arch, head="causal")
        return ArchConfig(vocab_size=self.tokenizer.vocab_size_, head="causal")

    def fit(self, texts: Sequence[str], y=None, heldout: Sequence[str] | None = None,
            checkpoint_dir=None, checkpoint_meta=None) -> "CausalLM":
        cfg = self.train_config or TrainConfig()
        arch = self._effective_arch()
        seqs = [_encode_truncated(self.tokenizer, t, arch.max_seq_len) for t in texts]
        held = (
            [_encode_truncated(self.tokenizer, t, arch.max_seq_len) for t in heldout]
            if heldout
            else None
        )
        params = init_params(arch, seed=cfg.seed)
        self.params_, self.log_ = fit(
            params, cfg, "causal", seqs, heldout=held,
            checkpoint_dir=checkpoint_dir, checkpoint_meta=checkpoint_meta,
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("CausalLM is not fitted; call fit() or from_checkpoint()")

    def finetune(
        self,
        prompts: Sequence["PromptRecord"],
        train_config: TrainConfig,
        checkpoint_dir=None,
        checkpoint_meta=None,
    ) -> tuple["CausalLM", TrainLog]:
        self._check_fitted()
        if not prompts:
            raise EmptyTrainingSet("finetune needs at least one prompt")
        seqs, starts = prompt_sequences(prompts, self.tokenizer, self.params_.config.max_seq_len)
        self.params_, log = fit(
            self.params_, train_config, "causal", seqs, loss_starts=starts,
            checkpoint_dir=checkpoint_dir, checkpoint_meta=checkpoint_meta,
        )
        return self, log

    def generate_ids(self, prompt_ids: Sequence[int], max_length: int = 100) -> list[int]:
        self._check_fitted()
        return greedy_generate(self.params_, prompt_ids, max_length=max_length, eos_id=EOS_ID)

    def sequence_nll(self, sequences: Sequence[Sequence[int]]) -> tuple[float, int]:
        """(total NLL, number of scored positions) over whole sequences."""
        from .model import next_token_loss

        self._check_fitted()
        total, count = 0.0, 0
        for seq in sequences:
            if len(seq) < 2:
                continue
            batch = pad_sequences([seq])
            logits, _ = forward(self.params_, batch)
            loss, _ = next_token_loss(logits, batch)
            n = len(seq) - 1
            total += loss * n
            count += n
        return total, count

    def save(self, path, meta: dict | None = None) -> None:
        self._check_fitted()
        save_checkpoint(path, self.params_, meta)

    @classmethod
    def from_checkpoint(cls, path, tokenizer: BpeTokenizer) -> "CausalLM":
        params, meta = load_checkpoint(path)
        lm = cls(tokenizer=tokenizer, arch=params.config)
        lm.params_ = params
        lm.meta_ = meta
        return lm


# -- retrieval index -----------------------------------------------------------


@dataclass
class EmbeddingIndex:
    """Unit-normalized question embeddings keyed by pair id."""

    ids: list[str] = field(default_factory=list)
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        if len(self.ids) != len(self.vectors):
            raise ShapeMismatch("ids and vectors must align")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        if len(self.vectors):
            norms = np.linalg.norm(self.vectors, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-9):
                raise ValueError("index vectors must be unit-norm")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1] if self.vectors.size else 0

    def __len__(self) -> int:
        return len(self.ids)

    def query(self, vector: np.ndarray, k: int, exclude_id: str | None = None) -> list[tuple[str, float]]:
        """Top-k cosine neighbors, ties broken by smaller id.

        The scan is exhaustive, so results match a brute-force ranking
        by construction.
        """
        if k <= 0 or not len(self.ids):
            return []
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise DimensionMismatch(f"query dim {vector.shape} vs index dim {self.dim}")
        norm = np.linalg.norm(vector)
        if norm == 0:
            raise ValueError("cannot rank by cosine against a zero vector")
        scores = self.vectors @ (vector / norm)
        ranked = sorted(
            (
                (self.ids[i], float(scores[i]))
                for i in range(len(self.ids))
                if self.ids[i] != exclude_id
            ),
            key=lambda pair: (-pair[1], pair[0]),
        )
        return ranked[:k]

    def vector_for(self, pair_id: str) -> np.ndarray:
        i = self.ids.index(pair_id)
        return self.vectors[i]

    def save(self, path, meta: dict | None = None) -> None:
        save_arrays(
            path,
            {"vectors": self.vectors},
            {"kind": "embedding_index", "ids": self.ids, "dim": self.dim, "meta": meta or {}},
        )

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        arrays, header = load_arrays(path)
        if header.get("kind") != "embedding_index":
            raise ValueError(f"not an embedding index: kind={header.get('kind')!r}")
        idx = cls(ids=list(header["ids"]), vectors=arrays["vectors"])
        idx.meta_ = header.get("meta", {})
        return idx


def build_index(encoder: SentenceEncoder, corpus: Corpus) -> EmbeddingIndex:
    """Embed every question, L2-normalize, and store with its pair id."""
    if not corpus.pairs:
        return EmbeddingIndex(ids=[], vectors=np.zeros((0, 0)))
    raw = encoder.transform([p.question for p in corpus.pairs])
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("a question embedded to the zero vector; cannot normalize")
    return EmbeddingIndex(ids=[p.id for p in corpus.pairs], vectors=raw / norms)


# -- prompts ---------------------------------------------------------------------


@dataclass
class PromptRecord:
    """Few-shot prompt: retrieved exemplars plus the target question."""

    target_id: str
    target_question: str
    exemplars: list[tuple[str, str]]
    rendered: str
    target_answer: str | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "target_id": self.target_id,
                "question": self.target_question,
                "exemplars": [list(e) for e in self.exemplars],
                "rendered": self.rendered,
                "answer": self.target_answer,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "PromptRecord":
        obj = json.loads(line)
        return cls(
            target_id=obj["target_id"],
            target_question=obj["question"],
            exemplars=[tuple(e) for e in obj["exemplars"]],
            rendered=obj["rendered"],
            target_answer=obj.get("answer"),
        )


def render_prompt(exemplars: Sequence[tuple[str, str]], target_question: str) -> str:
    lines = [
        f"{TEMPLATE_PREFIX}{q}{TEMPLATE_SEPARATOR} {a}" for q, a in exemplars
    ]
    lines.append(f"{TEMPLATE_PREFIX}{target_question}{TEMPLATE_SEPARATOR}")
    return "\n".join(lines)


def generate_prompts(index: EmbeddingIndex, corpus: Corpus, k: int) -> list[PromptRecord]:
    """One record per pair: its top-k cosine neighbors (self excluded)
    rendered as exemplar lines, then the target question."""
    if k < 0:
        raise ValueError("k must be >= 0")
    by_id = corpus.by_id()
    records = []
    for pair in corpus.pairs:
        exemplars: list[tuple[str, str]] = []
        if k > 0:
            neighbors = index.query(index.vector_for(pair.id), k, exclude_id=pair.id)
            exemplars = [(by_id[nid].question, by_id[nid].answer) for nid, _ in neighbors]
        records.append(
            PromptRecord(
                target_id=pair.id,
                target_question=pair.question,
                exemplars=exemplars,
                rendered=render_prompt(exemplars, pair.question),
                target_answer=pair.answer,
            )
        )
    return records


def prompt_sequences(
    prompts: Sequence[PromptRecord], tokenizer: BpeTokenizer, max_seq_len: int
) -> tuple[list[list[int]], list[int]]:
    """Token sequences plus the index where the answer span starts.

    Merges never cross whitespace boundaries, so encoding prompt and
    answer separately equals encoding their concatenation.
    """
    sequences: list[list[int]] = []
    starts: list[int] = []
    for record in prompts:
        if record.target_answer is None:
            raise EmptyTrainingSet(f"prompt {record.target_id!r} carries no target answer")
        prompt_ids = [BOS_ID] + tokenizer.encode(record.rendered)
        if len(prompt_ids) >= max_seq_len:
            raise ShapeMismatch(
                f"prompt {record.target_id!r} is {len(prompt_ids)} tokens; "
                f"max_seq_len {max_seq_len} leaves no room for the answer"
            )
        full = prompt_ids + tokenizer.encode(" " + record.target_answer) + [EOS_ID]
        sequences.append(full[:max_seq_len])
        starts.append(len(prompt_ids))
    return sequences, starts


ANSWER_MARKER = "Answer:"


def answer(
    encoder: SentenceEncoder,
    decoder: CausalLM,
    index: EmbeddingIndex,
    corpus: Corpus,
    question: str,
    k: int = 2,
    max_length: int = 100,
) -> str:
    """Build a retrieval-augmented prompt for the question, decode
    greedily, and return the text after the final answer marker."""
    exemplars: list[tuple[str, str]] = []
    if k > 0 and len(index):
        vec = encoder.embed(question)
        by_id = corpus.by_id()
        neighbors = index.query(vec, k)
        exemplars = [(by_id[nid].question, by_id[nid].answer) for nid, _ in neighbors]
    rendered = render_prompt(exemplars, question)
    prompt_ids = [BOS_ID] + decoder.tokenizer.encode(rendered)
    ids = decoder.generate_ids(prompt_ids, max_length=max_length)
    text = decoder.tokenizer.decode(ids)
    return text.rsplit(ANSWER_MARKER, 1)[-1].strip()


def write_prompts(path, prompts: Sequence[PromptRecord], meta: dict | None = None) -> None:
    """JSON-lines with a leading header object carrying metadata."""
    header = json.dumps({"kind": "prompts", "meta": meta or {}}, ensure_ascii=False)
    body = "\n".join(p.to_json() for p in prompts)
    Path(path).write_text(header + ("\n" + body if body else "") + "\n", encoding="utf-8")


def read_prompts(path) -> tuple[list[PromptRecord], dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        return [], {}
    header = json.loads(lines[0])
    if header.get("kind") != "prompts":
        raise ValueError("not a prompts file")
    return [PromptRecord.from_json(line) for line in lines[1:] if line.strip()], header.get("meta", {})
