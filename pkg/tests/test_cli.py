import json

import pandas as pd
import pytest

from btr.config import settings
from btr.main import main
from btr.store.model_file import save_model
from btr.store.token_store import read_store

CORPUS = "1\tthe value of key k01 k02 is v03 v04\n2\tthe value of key k05 k06 is v07 v08\n"
QUERIES = "what is the value of key k01 k02\t1,2\tv03 v04\nwhat is the value of key k05 k06\t2\tv07 v08\n"


@pytest.fixture
def workspace(tmp_path, tiny_model, vocab):
    save_model(tiny_model, vocab, tmp_path / "model.btrm")
    (tmp_path / "corpus.tsv").write_text(CORPUS, encoding="utf-8")
    (tmp_path / "queries.tsv").write_text(QUERIES, encoding="utf-8")
    return tmp_path


def precompute(ws, *extra):
    return main(
        ["precompute", "--corpus", str(ws / "corpus.tsv"), "--model", str(ws / "model.btrm"), "--out", str(ws / "s.btr"), *extra]
    )


def test_selftest_single_suite(capsys):
    assert main(["selftest", "--suite", "pack"]) == 0
    assert "pack" in capsys.readouterr().out


def test_injected_fault_fails_selftest(monkeypatch):
    monkeypatch.setattr(settings, "DEBUG", True)
    assert main(["selftest", "--suite", "pack", "--inject-fault", "bit-order"]) == 3


def test_fault_injection_needs_debug(monkeypatch):
    monkeypatch.setattr(settings, "DEBUG", False)
    assert main(["selftest", "--suite", "pack", "--inject-fault", "bit-order"]) == 1


def test_precompute_writes_store(workspace):
    assert precompute(workspace) == 0
    with read_store(workspace / "s.btr") as store:
        assert store.header.passage_count == 2
        assert store.passage_ids() == [1, 2]
        assert not store.compressed
    first = (workspace / "s.btr").read_bytes()
    assert precompute(workspace) == 1
    assert precompute(workspace, "--overwrite") == 0
    assert (workspace / "s.btr").read_bytes() == first


def test_precompute_empty_corpus(workspace):
    (workspace / "corpus.tsv").write_text("", encoding="utf-8")
    assert precompute(workspace) == 0
    with read_store(workspace / "s.btr") as store:
        assert len(store) == 0


def test_precompute_bad_input(workspace):
    (workspace / "corpus.tsv").write_text("abc\tthe key\n", encoding="utf-8")
    assert precompute(workspace) == 2
    assert precompute(workspace, "--k", "2") == 1
    assert main(["precompute", "--corpus", str(workspace / "corpus.tsv")]) == 1


def test_stats(workspace, capsys):
    precompute(workspace)
    capsys.readouterr()
    assert main(["stats", "--store", str(workspace / "s.btr"), "--csv", str(workspace / "stats.csv")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[:6] == ["magic=BTR1", "version=1", "d=16", "vocab_size=64", "passage_count=2", "flags=0"]
    assert "vectors_stored=18" in lines
    assert "occurrences=18" in lines
    frame = pd.read_csv(workspace / "stats.csv")
    assert frame.loc[0, "bytes_bits"] == 18 * 2


def test_compress_then_query(workspace, capsys):
    precompute(workspace)
    capsys.readouterr()
    args = ["compress", "--in", str(workspace / "s.btr"), "--model", str(workspace / "model.btrm")]
    csv = workspace / "compress.csv"
    assert main([*args, "--out", str(workspace / "c.btr"), "--ratio", "0.2", "--csv", str(csv)]) == 0
    out = capsys.readouterr().out
    with read_store(workspace / "c.btr") as store:
        assert store.compressed
        # "the", "of" and "is" collapse to one vector each
        stored = sum(store.rep_count(t) for t in range(64))
        assert stored < 18
    assert f"vectors_stored={stored}" in out.splitlines()
    assert "occurrences=18" in out.splitlines()
    frame = pd.read_csv(csv)
    assert len(frame) == 1
    assert frame.loc[0, "vectors_stored"] == stored
    query = "what is the value of key k01 k02"
    assert main(["query", "--store", str(workspace / "c.btr"), "--model", str(workspace / "model.btrm"), "--query", query, "--passages", "1,2"]) == 0
    assert capsys.readouterr().out.endswith("\n")
    assert main(["query", "--store", str(workspace / "c.btr"), "--model", str(workspace / "model.btrm"), "--query", query, "--passages", "9"]) == 2


def test_compress_without_model_reads_stopword_ids(workspace, vocab):
    precompute(workspace)
    with_model = ["compress", "--in", str(workspace / "s.btr"), "--model", str(workspace / "model.btrm")]
    assert main([*with_model, "--out", str(workspace / "a.btr")]) == 0
    ids = workspace / "stop_ids.txt"
    ids.write_text("\n".join(str(vocab.id_of(w)) for w in ("the", "of", "is")) + "\n", encoding="utf-8")
    assert main(["compress", "--in", str(workspace / "s.btr"), "--stopwords", str(ids), "--out", str(workspace / "b.btr")]) == 0
    with read_store(workspace / "a.btr") as a, read_store(workspace / "b.btr") as b:
        assert [a.rep_count(t) for t in range(64)] == [b.rep_count(t) for t in range(64)]
    assert main(["compress", "--out", str(workspace / "c.btr")]) == 1
    # a compressed store is not compressed again
    assert main(["compress", "--in", str(workspace / "b.btr"), "--out", str(workspace / "d.btr")]) == 2


def test_bench_csv_columns(workspace):
    precompute(workspace)
    csv = workspace / "bench.csv"
    code = main(
        [
            "bench", "--store", str(workspace / "s.btr"), "--model", str(workspace / "model.btrm"),
            "--queries", str(workspace / "queries.tsv"), "--repeats", "1", "--warmup", "0", "--csv", str(csv),
        ]
    )
    assert code == 0
    frame = pd.read_csv(csv)
    assert list(frame.columns) == [
        "variant", "r_p", "queries", "repeats", "qps_median", "qps_min", "qps_max", "tokens_per_sec",
        "accuracy", "peak_rss_mb", "lookup_ms", "query_encode_ms", "restore_ms", "upper_encoder_ms",
        "memory_merge_ms", "decode_ms", "encode_ms",
    ]
    assert frame["variant"].tolist() == ["uncached", "cached", "cached"]
    assert frame["r_p"].tolist() == [0.0, 0.0, 0.2]


def test_offline_sweep(workspace):
    precompute(workspace)
    csv = workspace / "sweep.csv"
    args = ["sweep", "--kind", "offline", "--store", str(workspace / "s.btr"), "--model", str(workspace / "model.btrm")]
    assert main([*args, "--ratios", "0.1,0.2", "--csv", str(csv)]) == 0
    frame = pd.read_csv(csv)
    assert frame["label"].tolist() == ["uncompressed", "compressed", "compressed"]
    assert (frame["occurrences"] == 18).all()


def test_invalid_values_are_usage_errors(workspace):
    assert main(["sweep", "--store", "x", "--ratios", "0.1,0.9"]) == 1
    assert main(["query", "--store", "x", "--model", "y", "--query", "q", "--runtime-ratio", "0.7"]) == 1
    config = workspace / "run.json"
    config.write_text(json.dumps({"not_a_knob": 1}), encoding="utf-8")
    assert main(["stats", "--store", "x", "--config", str(config)]) == 1


def test_config_file_supplies_defaults(workspace, capsys):
    precompute(workspace)
    config = workspace / "run.json"
    config.write_text(json.dumps({"store": str(workspace / "s.btr")}), encoding="utf-8")
    assert main(["stats", "--config", str(config)]) == 0
    assert "occurrences=18" in capsys.readouterr().out


def test_argparse_errors_exit_with_usage_code():
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 1


def test_train_toy_writes_artifacts(tmp_path, tiny_config, capsys):
    budget = {
        "reader": tiny_config.model_dump(),
        "task": {"n_facts": 30, "dev_facts": 5, "test_facts": 5, "n_distractors": 2},
        "step1_steps": 2,
        "step2_steps": 2,
        "step3_steps": 2,
        "batch_size": 4,
        "eval_every": 1,
    }
    config = tmp_path / "toy.json"
    config.write_text(json.dumps(budget), encoding="utf-8")
    out = tmp_path / "run"
    assert main(["train-toy", "--config", str(config), "--out", str(out), "--seed", "1"]) == 0
    for name in ("reference.btrm", "decomposed.btrm", "binarized.btrm", "corpus.tsv", "dev_queries.tsv", "test_queries.tsv"):
        assert (out / name).exists(), name
    trace = pd.read_csv(out / "metrics.csv")
    assert len(trace) == 6
    assert "step3_dev_accuracy=" in capsys.readouterr().out
    assert main(["train-toy", "--config", str(config), "--out", str(out)]) == 1
