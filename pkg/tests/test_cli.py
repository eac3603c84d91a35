import json
from importlib import resources
from pathlib import Path

import pytest

from medqakit.cli import main

TOY = Path(str(resources.files("medqakit") / "data" / "toy_corpus.jsonl"))

ARCH = {"d_model": 16, "n_heads": 2, "n_layers": 1, "d_ff": 24, "max_seq_len": 160}
TRAIN = {"init_lr": 0.3, "total_steps": 4, "batch_size": 8}


def micro_config(out_dir: Path, input_path: Path = TOY) -> dict:
    return {
        "seed": 0,
        "output_dir": str(out_dir),
        "corpus": {"input": str(input_path), "format": "jsonl",
                   "split": {"train": 0.8, "val": 0.1, "test": 0.1}},
        "augment": {"synonym_copies": 1, "synonym_rate": 0.5,
                    "back_translation": True, "balance": True},
        "tokenizer": {"vocab_size": 384},
        "encoder": {"arch": dict(ARCH), "train": dict(TRAIN)},
        "decoder": {"arch": dict(ARCH), "train": dict(TRAIN)},
        "finetune": dict(TRAIN),
        "prompts": {"k": 1},
        "eval": {"name": "micro", "threshold": -1.0, "match_rule": "exact_id",
                 "max_length": 160},
    }


def write_config(tmp_path: Path, cfg: dict, name: str = "config.json") -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(cfg, indent=2))
    return path


def run(*argv) -> int:
    return main(list(argv))


def run_pipeline(config_path: Path) -> None:
    assert run("prepare", "--config", str(config_path)) == 0
    for stage in ("tokenizer", "encoder", "decoder", "prompts", "finetune"):
        assert run("train", "--config", str(config_path), "--stage", stage) == 0
    assert run("eval", "--config", str(config_path), "--mode", "retrieval") == 0


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    out = tmp / "run"
    config_path = write_config(tmp, micro_config(out))
    run_pipeline(config_path)
    return tmp, out, config_path


class TestEndToEnd:
    def test_artifacts_exist(self, completed_run):
        _, out, _ = completed_run
        for rel in (
            "prepared/train.jsonl", "prepared/val.jsonl", "prepared/test.jsonl",
            "prepared/stats.json", "tokenizer.json", "encoder/final.ckpt",
            "decoder/final.ckpt", "prompts/index.bin", "prompts/prompts.jsonl",
            "finetune/final.ckpt", "report/report.json", "report/report.txt",
        ):
            assert (out / rel).exists(), rel

    def test_report_contents(self, completed_run):
        _, out, _ = completed_run
        doc = json.loads((out / "report" / "report.json").read_text())
        ref = {r["name"]: r["precision"] for r in doc["reference"]}
        assert ref["Sentence-T5 + Mistral 7B + Pretrain"] == 0.762
        row = doc["rows"][0]
        assert row["mode"] == "retrieval"
        assert row["match_rule"] == "exact_id"
        assert row["perplexity"] > 0
        assert row["tp"] + row["fp"] + row["abstained"] == 15
        assert len(row["config_hash"]) == 12

    def test_stats_and_balance(self, completed_run):
        _, out, _ = completed_run
        stats = json.loads((out / "prepared" / "stats.json").read_text())
        counts = stats["corpus"]["per_qtype"]
        assert len(set(counts.values())) == 1  # balanced classes
        assert stats["splits"] == {"train": 120, "val": 15, "test": 15}

    def test_config_hash_embedded_in_artifacts(self, completed_run):
        _, out, config_path = completed_run
        from medqakit.config import load_config
        from medqakit.model import load_arrays
        from medqakit.tokenizer import BpeTokenizer

        expected = load_config(config_path).config_hash()
        tok = BpeTokenizer.load(out / "tokenizer.json")
        assert tok.meta_["config_hash"] == expected
        for ckpt in ("encoder/final.ckpt", "decoder/final.ckpt",
                     "finetune/final.ckpt", "prompts/index.bin"):
            _, header = load_arrays(out / ckpt)
            assert header["meta"]["config_hash"] == expected, ckpt
        from medqakit.pipeline import read_prompts

        _, prompts_meta = read_prompts(out / "prompts" / "prompts.jsonl")
        assert prompts_meta["config_hash"] == expected

    def test_report_subcommand_prints_table(self, completed_run, capsys):
        _, _, config_path = completed_run
        assert run("report", "--config", str(config_path)) == 0
        printed = capsys.readouterr().out
        assert "Model Configuration" in printed
        assert "0.762" in printed
        assert "paper-reported, not reproduced" in printed

    def test_no_overwrite_skips(self, completed_run, capsys):
        _, _, config_path = completed_run
        assert run("prepare", "--config", str(config_path), "--no-overwrite") == 0
        assert "skipping" in capsys.readouterr().out

    def test_generation_mode_records_token_f1(self, completed_run):
        _, out, config_path = completed_run
        assert run("eval", "--config", str(config_path), "--mode", "generation") == 0
        doc = json.loads((out / "report" / "report.json").read_text())
        row = doc["rows"][0]
        assert row["mode"] == "generation"
        assert row["match_rule"] == "token_f1"


class TestPrepareDeterminism:
    def test_rerun_byte_identical(self, tmp_path):
        cfg = micro_config(tmp_path / "run")
        config_path = write_config(tmp_path, cfg)
        assert run("prepare", "--config", str(config_path)) == 0
        first = {
            p.name: p.read_bytes() for p in (tmp_path / "run" / "prepared").iterdir()
        }
        assert run("prepare", "--config", str(config_path)) == 0
        second = {
            p.name: p.read_bytes() for p in (tmp_path / "run" / "prepared").iterdir()
        }
        assert first == second

    def test_split_ratios_on_ten_pairs(self, tmp_path):
        lines = [
            json.dumps({"id": f"p{i}", "q": f"Question {i}?", "a": f"Answer {i}.", "type": "t"})
            for i in range(10)
        ]
        raw = tmp_path / "ten.jsonl"
        raw.write_text("\n".join(lines) + "\n")
        cfg = micro_config(tmp_path / "run", input_path=raw)
        cfg["augment"] = {"synonym_copies": 0, "back_translation": False, "balance": False}
        config_path = write_config(tmp_path, cfg)
        assert run("prepare", "--config", str(config_path)) == 0
        stats = json.loads((tmp_path / "run" / "prepared" / "stats.json").read_text())
        assert stats["splits"] == {"train": 8, "val": 1, "test": 1}


class TestErrorPaths:
    def test_missing_input_file_names_path(self, tmp_path, capsys):
        cfg = micro_config(tmp_path / "run", input_path=tmp_path / "nope.jsonl")
        config_path = write_config(tmp_path, cfg)
        assert run("prepare", "--config", str(config_path)) == 2
        err = capsys.readouterr().err
        assert "nope.jsonl" in err
        assert "prepare" in err

    def test_missing_prerequisite(self, tmp_path, capsys):
        config_path = write_config(tmp_path, micro_config(tmp_path / "run"))
        assert run("train", "--config", str(config_path), "--stage", "prompts") == 2
        err = capsys.readouterr().err
        assert "train --stage prompts" in err

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = micro_config(tmp_path / "run")
        cfg["tokenzier"] = {"vocab_size": 10}
        config_path = write_config(tmp_path, cfg)
        assert run("prepare", "--config", str(config_path)) == 2
        assert "tokenzier" in capsys.readouterr().err

    def test_invalid_nested_value(self, tmp_path, capsys):
        cfg = micro_config(tmp_path / "run")
        cfg["decoder"]["train"]["init_lr"] = -1.0
        config_path = write_config(tmp_path, cfg)
        assert run("prepare", "--config", str(config_path)) == 2
        assert "init_lr" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert run("prepare", "--config", str(tmp_path / "ghost.json")) == 2

    def test_hash_mismatch_refused(self, tmp_path, capsys):
        out = tmp_path / "run"
        config_path = write_config(tmp_path, micro_config(out))
        run_pipeline(config_path)
        # Retrain only the tokenizer under a config with a different hash.
        changed = micro_config(out)
        changed["eval"]["name"] = "renamed"
        changed_path = write_config(tmp_path, changed, name="changed.json")
        assert run("train", "--config", str(changed_path), "--stage", "tokenizer") == 0
        code = run("eval", "--config", str(changed_path), "--mode", "retrieval")
        assert code == 2
        assert "hash" in capsys.readouterr().err.lower()


class TestOverrides:
    def test_set_override_changes_config(self, tmp_path):
        cfg = micro_config(tmp_path / "run")
        cfg["augment"] = {"synonym_copies": 0, "back_translation": False, "balance": False}
        config_path = write_config(tmp_path, cfg)
        assert run(
            "prepare", "--config", str(config_path),
            "--set", "corpus.split.train=0.9",
            "--set", "corpus.split.val=0.06",
            "--set", "corpus.split.test=0.04",
        ) == 0
        stats = json.loads((tmp_path / "run" / "prepared" / "stats.json").read_text())
        assert stats["splits"] == {"train": 45, "val": 3, "test": 2}

    def test_env_seed_override(self, tmp_path, monkeypatch):
        cfg = micro_config(tmp_path / "run")
        cfg["augment"] = {"synonym_copies": 0, "back_translation": False, "balance": False}
        config_path = write_config(tmp_path, cfg)
        assert run("prepare", "--config", str(config_path)) == 0
        base = (tmp_path / "run" / "prepared" / "train.jsonl").read_bytes()
        monkeypatch.setenv("MEDQA_SEED", "99")
        assert run("prepare", "--config", str(config_path)) == 0
        changed = (tmp_path / "run" / "prepared" / "train.jsonl").read_bytes()
        assert base != changed
