"""End-to-end command-line pipeline: config handling, provenance, determinism, failure cleanup."""
import json
import subprocess
import sys
from pathlib import Path

import pytest

from answer_retrieval.cli import CliError, RunConfig, derive_seed, main, parse_config

TINY_CONFIG = """\
seed = 3

[generator]
n_docs = 10
sections_per_doc = [2, 3]
sentences_per_section = [1, 2]
words_per_sentence = [3, 5]
entities = ["cardiomyopathy", "nausea", "heart failure", "asthma"]
aspects = ["family history", "chief complaint", "allergies", "medications"]
mention_prob = 1.0

[encoder]
d_model = 8
n_heads = 2
n_layers = 1
ffn_dim = 12
max_len = 32

[training]
batch_size = 8
epochs = 2

[eval]
n_candidates = 5

[bench]
n_queries = 3
warmup = 1
"""


def run_pipeline(config: Path, out: Path, *, archs=("bi",), epochs: int = 2) -> list[int]:
    """gen-corpus -> label -> train -> index -> eval; returns the exit codes."""
    common = ["--config", str(config), "--out", str(out)]
    corpus, labels = str(out / "corpus.jsonl"), str(out / "labels.jsonl")
    codes = [main(["gen-corpus", *common]), main(["label", *common, "--corpus", corpus])]
    for arch in archs:
        codes.append(main(["train", *common, "--corpus", corpus, "--labels", labels, "--arch", arch,
                           "--epochs", str(epochs)]))
    codes.append(main(["index", *common, "--corpus", corpus, "--checkpoint", str(out / "bi" / "model.npz")]))
    checkpoints = [f"--checkpoint={a}={out / a / 'model.npz'}" for a in archs]
    codes.append(main(["eval", *common, "--corpus", corpus, "--labels", labels, *checkpoints,
                       "--baselines", "bm25", "tfidf"]))
    return codes


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full pipeline run shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("pipeline")
    config = root / "run.toml"
    config.write_text(TINY_CONFIG)
    out = root / "out"
    codes = run_pipeline(config, out, archs=("bi", "poly"), epochs=5)
    return config, out, codes


class TestConfig:
    def test_defaults_when_no_keys(self):
        assert parse_config({}) == RunConfig()

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(CliError, match="unknown config key 'optimizer'"):
            parse_config({"optimizer": {}})

    def test_unknown_section_key_rejected(self):
        with pytest.raises(CliError, match=r"\[training\]"):
            parse_config({"training": {"learning_rte": 0.1}})

    def test_per_stage_seed_keys_rejected(self):
        with pytest.raises(CliError):
            parse_config({"training": {"seed": 4}})

    def test_unknown_key_in_file_gives_exit_1(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("[encoder]\nwidth = 3\n")
        assert main(["gen-corpus", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
        assert "width" in capsys.readouterr().err

    def test_hash_ignores_output_location(self):
        a, b = RunConfig(out="x"), RunConfig(out="y")
        assert a.hash() == b.hash() and a.hash() != RunConfig(seed=1).hash()

    def test_stage_seeds_differ_per_stage_and_are_stable(self):
        assert derive_seed(7, "train:bi") == derive_seed(7, "train:bi")
        assert len({derive_seed(7, s) for s in ("gen-corpus", "train:bi", "train:poly", "eval")}) == 4


class TestPipeline:
    def test_every_stage_exits_zero(self, pipeline):
        _, _, codes = pipeline
        assert codes == [0] * len(codes)

    def test_artifacts_carry_provenance(self, pipeline):
        _, out, _ = pipeline
        for name in ("corpus.jsonl", "labels.jsonl", "bi/model.npz", "bi/loss_trace.csv", "index.bin", "eval.csv"):
            meta = json.loads((out / (name + ".meta.json")).read_text())
            assert set(meta) >= {"command", "config_hash", "seed"} and meta["seed"] == 3

    def test_resolved_config_is_echoed(self, pipeline):
        _, out, _ = pipeline
        echo = json.loads((out / "train.config.json").read_text())
        assert echo["config"]["encoder"]["d_model"] == 8 and echo["config"]["training"]["architecture"] == "poly"

    def test_eval_grid_has_every_architecture(self, pipeline):
        _, out, _ = pipeline
        rows = (out / "eval.csv").read_text().splitlines()
        archs = {line.split(",")[2] for line in rows[1:]}
        assert archs == {"bi", "poly", "bm25", "tfidf"}

    def test_query_prints_five_row_table(self, pipeline, capsys):
        config, out, _ = pipeline
        capsys.readouterr()
        code = main(["query", "--config", str(config), "--out", str(out), "--corpus", str(out / "corpus.jsonl"),
                     "--entity", "cardiomyopathy", "--aspect", "family history", "--k", "5",
                     "--checkpoint", str(out / "bi" / "model.npz"), "--index", str(out / "index.bin")])
        lines = capsys.readouterr().out.splitlines()
        assert code == 0
        assert lines[0].split()[:2] == ["rank", "score"] and len(lines) == 6
        assert [line.split()[0] for line in lines[1:]] == ["1", "2", "3", "4", "5"]

    def test_index_and_on_the_fly_query_agree(self, pipeline, capsys):
        config, out, _ = pipeline
        base = ["query", "--config", str(config), "--out", str(out), "--corpus", str(out / "corpus.jsonl"),
                "--entity", "asthma", "--aspect", "allergies", "--checkpoint", str(out / "bi" / "model.npz")]
        capsys.readouterr()
        main(base + ["--index", str(out / "index.bin")])
        with_index = capsys.readouterr().out
        main(base)
        assert capsys.readouterr().out == with_index

    def test_lexical_query_needs_no_checkpoint(self, pipeline, capsys):
        config, out, _ = pipeline
        code = main(["query", "--config", str(config), "--out", str(out), "--corpus", str(out / "corpus.jsonl"),
                     "--entity", "nausea", "--aspect", "chief complaint", "--arch", "bm25", "--k", "3"])
        assert code == 0 and len(capsys.readouterr().out.splitlines()) <= 4

    def test_bench_writes_latency_csv(self, pipeline, tmp_path):
        config, out, _ = pipeline
        code = main(["bench", "--config", str(config), "--out", str(tmp_path), "--corpus", str(out / "corpus.jsonl"),
                     "--checkpoint", f"bi={out / 'bi' / 'model.npz'}", "--checkpoint",
                     f"poly={out / 'poly' / 'model.npz'}", "--counts", "4", "8"])
        lines = (tmp_path / "latency.csv").read_text().splitlines()
        assert code == 0
        assert [l.split(",")[:2] for l in lines if not l.startswith("#")][1:] == [
            ["bi", "4"], ["bi", "8"], ["poly", "4"], ["poly", "8"]]


class TestDeterminism:
    def test_gen_corpus_twice_gives_identical_files(self, config_file, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-corpus", "--config", str(config_file), "--seed", "7", "--out", str(tmp_path / name)]) == 0
        for name in ("corpus.jsonl", "corpus.jsonl.meta.json", "gen-corpus.config.json"):
            a, b = (tmp_path / "a" / name).read_bytes(), (tmp_path / "b" / name).read_bytes()
            if name.endswith("config.json"):
                a, b = (json.loads(x) for x in (a, b))
                a["config"].pop("out"), b["config"].pop("out")
            assert a == b

    def test_seed_changes_the_corpus(self, config_file, tmp_path):
        main(["gen-corpus", "--config", str(config_file), "--seed", "1", "--out", str(tmp_path / "a")])
        main(["gen-corpus", "--config", str(config_file), "--seed", "2", "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "corpus.jsonl").read_bytes() != (tmp_path / "b" / "corpus.jsonl").read_bytes()

    def test_full_pipeline_reruns_are_byte_identical(self, config_file, tmp_path):
        for name in ("a", "b"):
            assert run_pipeline(config_file, tmp_path / name) == [0] * 5
        for name in ("corpus.jsonl", "labels.jsonl", "bi/loss_trace.csv", "eval.csv", "index.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


class TestFailures:
    def test_missing_corpus_is_actionable(self, config_file, tmp_path, capsys):
        code = main(["label", "--config", str(config_file), "--out", str(tmp_path), "--corpus",
                     str(tmp_path / "nope.jsonl")])
        err = capsys.readouterr().err
        assert code == 1 and "does not exist" in err and "gen-corpus" in err

    def test_missing_labels_leaves_outputs_unchanged(self, config_file, tmp_path):
        out = tmp_path / "out"
        assert main(["gen-corpus", "--config", str(config_file), "--out", str(out)]) == 0
        before = sorted(p.relative_to(out) for p in out.rglob("*"))
        code = main(["train", "--config", str(config_file), "--out", str(out), "--corpus", str(out / "corpus.jsonl"),
                     "--labels", str(out / "labels.jsonl")])
        assert code == 1
        assert sorted(p.relative_to(out) for p in out.rglob("*")) == before

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_removes_partial_outputs(self, config_file, tmp_path):
        out = tmp_path / "out"
        common = ["--config", str(config_file), "--out", str(out)]
        main(["gen-corpus", *common])
        main(["label", *common, "--corpus", str(out / "corpus.jsonl")])
        before = sorted(p.relative_to(out) for p in out.rglob("*"))
        bad = tmp_path / "bad.toml"
        bad.write_text(TINY_CONFIG.replace("epochs = 2", "epochs = 2\nlearning_rate = 1e300"))
        code = main(["train", "--config", str(bad), "--out", str(out), "--corpus", str(out / "corpus.jsonl"),
                     "--labels", str(out / "labels.jsonl")])
        assert code == 1
        assert sorted(p.relative_to(out) for p in out.rglob("*")) == before

    def test_index_rejects_cross_checkpoint(self, pipeline, tmp_path, capsys):
        config, out, _ = pipeline
        code = main(["index", "--config", str(config), "--out", str(tmp_path), "--corpus", str(out / "corpus.jsonl"),
                     "--checkpoint", str(out / "poly" / "model.npz")])
        assert code == 1 and "Bi-encoder" in capsys.readouterr().err

    def test_stale_index_rejected(self, pipeline, tmp_path, capsys):
        config, out, _ = pipeline
        main(["train", "--config", str(config), "--out", str(tmp_path), "--corpus", str(out / "corpus.jsonl"),
              "--labels", str(out / "labels.jsonl"), "--arch", "bi", "--epochs", "1"])
        code = main(["query", "--config", str(config), "--out", str(tmp_path), "--corpus", str(out / "corpus.jsonl"),
                     "--entity", "asthma", "--aspect", "allergies", "--checkpoint", str(tmp_path / "bi" / "model.npz"),
                     "--index", str(out / "index.bin")])
        assert code == 1 and "rebuild" in capsys.readouterr().err


class TestEntryPoint:
    def test_module_help(self):
        proc = subprocess.run([sys.executable, "-m", "answer_retrieval.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        for command in ("gen-corpus", "label", "train", "index", "query", "eval", "bench"):
            assert command in proc.stdout
