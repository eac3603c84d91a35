"""Desk-scale medical question answering.

Corpus preparation and augmentation, byte-level BPE tokenization, tiny
encoder/decoder transformer language models trained with exact analytic
gradients, retrieval-augmented prompting, and a precision evaluation
harness with comparison reports.
"""

from .augment import (
    DictionaryTranslator,
    EmbeddingPoint,
    SmoteOversampler,
    SynonymLexicon,
    back_translate,
    balance_by_duplication,
    smote,
    synonym_replace,
)
from .corpus import (
    Corpus,
    CorpusStats,
    Provenance,
    QAPair,
    clean,
    format_template,
    parse_corpus,
    split_corpus,
    templated_lines,
)
from .evaluation import (
    EvalConfig,
    EvalRow,
    emit_report,
    evaluate_perplexity,
    evaluate_retrieval,
    precision,
    render_report_text,
    token_f1,
)
from .model import (
    ArchConfig,
    Batch,
    DropoutConfig,
    ModelParams,
    backward,
    dropout_apply,
    forward,
    greedy_generate,
    init_params,
    load_checkpoint,
    masked_lm_loss,
    next_token_loss,
    perplexity,
    save_checkpoint,
)
from .pipeline import (
    CausalLM,
    EmbeddingIndex,
    PromptRecord,
    SentenceEncoder,
    answer,
    build_index,
    generate_prompts,
)
from .tokenizer import BpeTokenizer
from .train import TrainConfig, TrainLog, clip_gradients, fit, lr_at, sgd_step

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "Batch",
    "BpeTokenizer",
    "CausalLM",
    "Corpus",
    "CorpusStats",
    "DictionaryTranslator",
    "DropoutConfig",
    "EmbeddingIndex",
    "EmbeddingPoint",
    "EvalConfig",
    "EvalRow",
    "ModelParams",
    "PromptRecord",
    "Provenance",
    "QAPair",
    "SentenceEncoder",
    "SmoteOversampler",
    "SynonymLexicon",
    "TrainConfig",
    "TrainLog",
    "answer",
    "back_translate",
    "backward",
    "balance_by_duplication",
    "build_index",
    "clean",
    "clip_gradients",
    "dropout_apply",
    "emit_report",
    "evaluate_perplexity",
    "evaluate_retrieval",
    "fit",
    "format_template",
    "forward",
    "generate_prompts",
    "greedy_generate",
    "init_params",
    "load_checkpoint",
    "lr_at",
    "masked_lm_loss",
    "next_token_loss",
    "parse_corpus",
    "perplexity",
    "precision",
    "render_report_text",
    "save_checkpoint",
    "sgd_step",
    "smote",
    "split_corpus",
    "synonym_replace",
    "templated_lines",
    "token_f1",
]
