"""Command-line entry point.

Subcommands map onto the pipeline stages::

    medqa prepare  --config cfg.json
    medqa train    --config cfg.json --stage tokenizer|encoder|decoder|prompts|finetune
    medqa eval     --config cfg.json --mode retrieval|generation
    medqa report   --config cfg.json

The config file is the single source of truth; ``--set key=value``
overrides individual keys and ``MEDQA_SEED`` overrides the global seed.
Every artifact embeds the config hash that produced it, and runs are
deterministic: the same config and seed rewrite every artifact
byte-identically. Exit codes: 0 success, 1 internal error, 2 user or
config error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import zlib
from dataclasses import asdict, replace
from importlib import resources
from pathlib import Path

from .augment import DictionaryTranslator, SynonymLexicon, back_translate, balance_by_duplication, synonym_replace
from .config import RunConfig, apply_override, config_from_dict
from .corpus import (
    Corpus,
    clean,
    corpus_from_jsonl,
    corpus_to_jsonl,
    extend_corpus,
    parse_corpus,
    split_corpus,
    templated_lines,
)
from .errors import (
    ConfigError,
    MalformedRecord,
    MedqaError,
    MissingLabel,
    MissingPrerequisite,
)
from .evaluation import (
    EvalConfig,
    EvalRow,
    emit_report,
    evaluate_perplexity,
    evaluate_retrieval,
    render_report_json,
    render_report_text,
    token_f1,
)
from .model import ArchConfig
from .pipeline import (
    CausalLM,
    EmbeddingIndex,
    SentenceEncoder,
    answer,
    build_index,
    generate_prompts,
    read_prompts,
    write_prompts,
)
from .tokenizer import BpeTokenizer

STAGES = ("tokenizer", "encoder", "decoder", "prompts", "finetune")
EVAL_MODES = ("retrieval", "generation")

# Per-stage seed offsets keep the stages' RNG streams decorrelated while
# remaining a pure function of the global seed.
_STAGE_SEED_OFFSET = {"encoder": 1, "decoder": 2, "finetune": 3}


class RunPaths:
    def __init__(self, cfg: RunConfig):
        self.root = Path(cfg.output_dir)
        self.prepared = self.root / "prepared"
        self.train_jsonl = self.prepared / "train.jsonl"
        self.val_jsonl = self.prepared / "val.jsonl"
        self.test_jsonl = self.prepared / "test.jsonl"
        self.stats_json = self.prepared / "stats.json"
        self.tokenizer_json = self.root / "tokenizer.json"
        self.encoder_dir = self.root / "encoder"
        self.encoder_ckpt = self.encoder_dir / "final.ckpt"
        self.decoder_dir = self.root / "decoder"
        self.decoder_ckpt = self.decoder_dir / "final.ckpt"
        self.prompts_dir = self.root / "prompts"
        self.index_bin = self.prompts_dir / "index.bin"
        self.prompts_jsonl = self.prompts_dir / "prompts.jsonl"
        self.finetune_dir = self.root / "finetune"
        self.finetune_ckpt = self.finetune_dir / "final.ckpt"
        self.report_dir = self.root / "report"
        self.report_json = self.report_dir / "report.json"
        self.report_txt = self.report_dir / "report.txt"


def _bundled(name: str) -> Path:
    return Path(str(resources.files("medqakit") / "data" / name))


def _seed_for(base: int, *parts: str) -> int:
    return (base + zlib.crc32(":".join(parts).encode("utf-8"))) % (2**31)


def _require(path: Path, stage: str, hint: str) -> None:
    if not path.exists():
        raise MissingPrerequisite(stage, f"{path} is missing; {hint}")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _load_split(path: Path) -> Corpus:
    return corpus_from_jsonl(path.read_text(encoding="utf-8"))


def _write_train_log(dir_path: Path, log) -> None:
    _write_text(dir_path / "train_log.jsonl", log.to_jsonl())
    _write_text(dir_path / "summary.json", json.dumps(log.summary(), sort_keys=True) + "\n")


# -- prepare -------------------------------------------------------------------


def cmd_prepare(cfg: RunConfig, no_overwrite: bool = False) -> None:
    paths = RunPaths(cfg)
    outputs = [paths.train_jsonl, paths.val_jsonl, paths.test_jsonl, paths.stats_json]
    if no_overwrite and all(p.exists() for p in outputs):
        print("prepare: artifacts exist, skipping")
        return
    raw_path = Path(cfg.corpus.input)
    if not raw_path.exists():
        raise FileNotFoundError(f"input corpus not found: {raw_path}")
    corp = clean(parse_corpus(raw_path.read_bytes(), cfg.corpus.format, cfg.corpus.strict))

    lexicon = SynonymLexicon.load(cfg.augment.synonyms_path or _bundled("synonyms.json"))
    extra = []
    for pair in corp.pairs:
        for copy in range(cfg.augment.synonym_copies):
            extra.append(
                synonym_replace(
                    pair, lexicon, cfg.augment.synonym_rate,
                    seed=_seed_for(cfg.seed, pair.id, f"syn{copy}"),
                )
            )
    if cfg.augment.back_translation:
        translator = DictionaryTranslator.load(
            cfg.augment.pivot_path or _bundled("pivot_dictionary.json")
        )
        extra.extend(back_translate(pair, translator) for pair in corp.pairs)
    if extra:
        corp = extend_corpus(corp, extra)
    if cfg.augment.balance:
        corp = balance_by_duplication(corp, lexicon, seed=cfg.seed, rate=cfg.augment.synonym_rate)

    train, val, test = split_corpus(corp, cfg.corpus.split.ratios(), cfg.seed)
    _write_text(paths.train_jsonl, corpus_to_jsonl(train))
    _write_text(paths.val_jsonl, corpus_to_jsonl(val))
    _write_text(paths.test_jsonl, corpus_to_jsonl(test))
    stats_doc = {
        "config_hash": cfg.config_hash(),
        "corpus": corp.stats.to_dict(),
        "splits": {"train": len(train), "val": len(val), "test": len(test)},
    }
    _write_text(paths.stats_json, json.dumps(stats_doc, sort_keys=True, indent=2) + "\n")
    print(f"prepare: wrote {len(train)}/{len(val)}/{len(test)} pairs under {paths.prepared}")


# -- train stages ----------------------------------------------------------------


def _stage_arch(spec, vocab_size: int, head: str) -> ArchConfig:
    return ArchConfig(vocab_size=vocab_size, head=head, **asdict(spec))


def cmd_train(cfg: RunConfig, stage: str, no_overwrite: bool = False) -> None:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; choose from {STAGES}")
    paths = RunPaths(cfg)
    h = cfg.config_hash()
    meta = {"config_hash": h, "stage": stage}

    if stage == "tokenizer":
        if no_overwrite and paths.tokenizer_json.exists():
            print("tokenizer: artifact exists, skipping")
            return
        _require(paths.train_jsonl, stage, "run `medqa prepare` first")
        texts = templated_lines(_load_split(paths.train_jsonl))
        tok = BpeTokenizer(vocab_size=cfg.tokenizer.vocab_size).fit(texts)
        paths.tokenizer_json.parent.mkdir(parents=True, exist_ok=True)
        tok.save(paths.tokenizer_json, meta=meta)
        print(f"tokenizer: {tok.vocab_size_} symbols -> {paths.tokenizer_json}")
        return

    _require(paths.tokenizer_json, stage, "run `medqa train --stage tokenizer` first")
    tok = BpeTokenizer.load(paths.tokenizer_json)

    if stage in ("encoder", "decoder"):
        ckpt = paths.encoder_ckpt if stage == "encoder" else paths.decoder_ckpt
        if no_overwrite and ckpt.exists():
            print(f"{stage}: artifact exists, skipping")
            return
        _require(paths.train_jsonl, stage, "run `medqa prepare` first")
        texts = templated_lines(_load_split(paths.train_jsonl))
        heldout = templated_lines(_load_split(paths.val_jsonl)) if paths.val_jsonl.exists() else None
        spec = cfg.encoder if stage == "encoder" else cfg.decoder
        train_cfg = replace(spec.train, seed=cfg.seed + _STAGE_SEED_OFFSET[stage])
        if stage == "encoder":
            arch = _stage_arch(spec.arch, tok.vocab_size_, "mlm")
            est = SentenceEncoder(tok, arch, train_cfg)
            est.fit(texts, heldout=heldout, checkpoint_dir=paths.encoder_dir, checkpoint_meta=meta)
            _write_train_log(paths.encoder_dir, est.log_)
        else:
            arch = _stage_arch(spec.arch, tok.vocab_size_, "causal")
            est = CausalLM(tok, arch, train_cfg)
            est.fit(texts, heldout=heldout, checkpoint_dir=paths.decoder_dir, checkpoint_meta=meta)
            _write_train_log(paths.decoder_dir, est.log_)
        print(f"{stage}: trained {est.params_.n_parameters()} parameters -> {ckpt}")
        return

    if stage == "prompts":
        if no_overwrite and paths.prompts_jsonl.exists() and paths.index_bin.exists():
            print("prompts: artifacts exist, skipping")
            return
        _require(paths.encoder_ckpt, stage, "run `medqa train --stage encoder` first")
        _require(paths.train_jsonl, stage, "run `medqa prepare` first")
        encoder = SentenceEncoder.from_checkpoint(paths.encoder_ckpt, tok)
        train_corpus = _load_split(paths.train_jsonl)
        index = build_index(encoder, train_corpus)
        paths.prompts_dir.mkdir(parents=True, exist_ok=True)
        index.save(paths.index_bin, meta=meta)
        records = generate_prompts(index, train_corpus, cfg.prompts.k)
        write_prompts(paths.prompts_jsonl, records, meta=meta)
        print(f"prompts: {len(records)} records (k={cfg.prompts.k}) -> {paths.prompts_jsonl}")
        return

    # finetune
    if no_overwrite and paths.finetune_ckpt.exists():
        print("finetune: artifact exists, skipping")
        return
    _require(paths.decoder_ckpt, stage, "run `medqa train --stage decoder` first")
    _require(paths.prompts_jsonl, stage, "run `medqa train --stage prompts` first")
    lm = CausalLM.from_checkpoint(paths.decoder_ckpt, tok)
    records, _ = read_prompts(paths.prompts_jsonl)
    train_cfg = replace(cfg.finetune, seed=cfg.seed + _STAGE_SEED_OFFSET[stage])
    _, log = lm.finetune(records, train_cfg, checkpoint_dir=paths.finetune_dir, checkpoint_meta=meta)
    _write_train_log(paths.finetune_dir, log)
    print(f"finetune: {len(records)} prompts -> {paths.finetune_ckpt}")


# -- eval -------------------------------------------------------------------------


def _check_artifact_hashes(tok: BpeTokenizer, encoder: SentenceEncoder) -> None:
    tok_hash = getattr(tok, "meta_", {}).get("config_hash")
    enc_hash = getattr(encoder, "meta_", {}).get("config_hash")
    if tok_hash != enc_hash:
        raise ConfigError(
            f"artifact config hashes disagree: tokenizer={tok_hash!r} encoder={enc_hash!r}; "
            "re-run the pipeline from a single config"
        )


def cmd_eval(cfg: RunConfig, mode: str, no_overwrite: bool = False) -> None:
    if mode not in EVAL_MODES:
        raise ConfigError(f"unknown eval mode {mode!r}; choose from {EVAL_MODES}")
    paths = RunPaths(cfg)
    if no_overwrite and paths.report_json.exists():
        print("eval: report exists, skipping")
        return
    for path, hint in (
        (paths.tokenizer_json, "train --stage tokenizer"),
        (paths.encoder_ckpt, "train --stage encoder"),
        (paths.index_bin, "train --stage prompts"),
        (paths.finetune_ckpt, "train --stage finetune"),
        (paths.test_jsonl, "prepare"),
    ):
        _require(path, "eval", f"run `medqa {hint}` first")

    tok = BpeTokenizer.load(paths.tokenizer_json)
    encoder = SentenceEncoder.from_checkpoint(paths.encoder_ckpt, tok)
    _check_artifact_hashes(tok, encoder)
    index = EmbeddingIndex.load(paths.index_bin)
    decoder = CausalLM.from_checkpoint(paths.finetune_ckpt, tok)
    train_corpus = _load_split(paths.train_jsonl)
    test_corpus = _load_split(paths.test_jsonl)
    answers_by_id = {p.id: p.answer for p in train_corpus.pairs}

    eval_cfg = EvalConfig(
        threshold=cfg.eval.threshold,
        match_rule=cfg.eval.match_rule,
        token_f1_threshold=cfg.eval.token_f1_threshold,
    )
    if mode == "retrieval":
        counts = evaluate_retrieval(encoder, index, test_corpus.pairs, eval_cfg, answers_by_id)
        match_rule = eval_cfg.match_rule
    else:
        counts = _evaluate_generation(cfg, encoder, decoder, index, train_corpus, test_corpus, eval_cfg)
        match_rule = "token_f1"

    test_sequences = [
        tok.encode(line, add_bos_eos=True)[: decoder.params_.config.max_seq_len]
        for line in templated_lines(test_corpus)
    ]
    ppl = evaluate_perplexity(decoder.params_, test_sequences)

    from .evaluation import precision as precision_fn

    row = EvalRow(
        name=f"{cfg.eval.name} ({mode})",
        precision=precision_fn(counts.tp, counts.fp),
        tp=counts.tp,
        fp=counts.fp,
        abstained=counts.abstained,
        perplexity=ppl,
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
        mode=mode,
        match_rule=match_rule,
    )
    report = emit_report([row])
    _write_text(paths.report_json, render_report_json(report))
    text = render_report_text(report)
    _write_text(paths.report_txt, text)
    print(text, end="")


def _evaluate_generation(cfg, encoder, decoder, index, train_corpus, test_corpus, eval_cfg):
    """Generate an answer per test question and grade it by token F1;
    the retrieval threshold still gates abstention."""
    from .evaluation import RetrievalCounts, RetrievalTrace

    counts = RetrievalCounts()
    for pair in test_corpus.pairs:
        vec = encoder.embed(pair.question)
        hits = index.query(vec, 1)
        if not hits or hits[0][1] < eval_cfg.threshold:
            counts.abstained += 1
            counts.trace.append(
                RetrievalTrace(pair.id, None, hits[0][1] if hits else None, "abstain")
            )
            continue
        generated = answer(
            encoder, decoder, index, train_corpus, pair.question,
            k=cfg.prompts.k, max_length=cfg.eval.max_length,
        )
        hit = token_f1(generated, pair.answer) >= eval_cfg.token_f1_threshold
        if hit:
            counts.tp += 1
        else:
            counts.fp += 1
        counts.trace.append(RetrievalTrace(pair.id, hits[0][0], hits[0][1], "tp" if hit else "fp"))
    counts.trace.sort(key=lambda t: t.question_id)
    return counts


def cmd_report(cfg: RunConfig) -> None:
    paths = RunPaths(cfg)
    _require(paths.report_json, "report", "run `medqa eval` first")
    doc = json.loads(paths.report_json.read_text(encoding="utf-8"))
    print(render_report_text(doc), end="")


# -- argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medqa",
        description="Config-driven medical QA pipeline: prepare data, train the "
        "tokenizer and models stage by stage, evaluate, and print reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[],
            metavar="KEY=VALUE", help="override a config key (dotted path)",
        )
        p.add_argument(
            "--no-overwrite", action="store_true",
            help="skip the stage when its artifacts already exist",
        )

    common(sub.add_parser("prepare", help="parse, clean, augment, balance, split"))
    p_train = sub.add_parser("train", help="run one training stage")
    common(p_train)
    p_train.add_argument("--stage", required=True, choices=STAGES)
    p_eval = sub.add_parser("eval", help="evaluate and write the report")
    common(p_eval)
    p_eval.add_argument("--mode", required=True, choices=EVAL_MODES)
    common(sub.add_parser("report", help="print the report table"))
    return parser


def _load_cfg(args) -> RunConfig:
    path = Path(args.config)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    for override in args.overrides:
        if "=" not in override:
            raise ConfigError(f"--set expects KEY=VALUE, got {override!r}")
        key, value = override.split("=", 1)
        apply_override(data, key, value)
    cfg = config_from_dict(data)
    env_seed = os.environ.get("MEDQA_SEED")
    if env_seed is not None:
        cfg = replace(cfg, seed=int(env_seed))
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    label = args.command
    if getattr(args, "stage", None):
        label += f" --stage {args.stage}"
    if getattr(args, "mode", None):
        label += f" --mode {args.mode}"
    try:
        cfg = _load_cfg(args)
        if args.command == "prepare":
            cmd_prepare(cfg, args.no_overwrite)
        elif args.command == "train":
            cmd_train(cfg, args.stage, args.no_overwrite)
        elif args.command == "eval":
            cmd_eval(cfg, args.mode, args.no_overwrite)
        else:
            cmd_report(cfg)
        return 0
    except (ConfigError, FileNotFoundError, MissingPrerequisite, MalformedRecord, MissingLabel) as exc:
        print(f"error in {label}: {exc}", file=sys.stderr)
        return 2
    except MedqaError as exc:
        print(f"error in {label}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error in {label}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
