import json

import numpy as np
import pytest

from befa.attribution import AttributionBundle, read_pgm, save_bundle
from befa.cli import build_parser, experiment_table, format_improvement, improvement, main, parse_seeds, run_config_schema
from befa.dataio import load_interactions, load_split

TRAIN_FLAGS = ["--dim", "8", "--epochs", "8", "--patience", "3", "--batch-size", "128", "--lr", "0.01"]


def _files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--users", "50", "--items", "80", "--seed", "7", "--out", str(root / "syn")]) == 0
    assert main(["prep", "--input", str(root / "syn/interactions.tsv"), "--kcore", "2", "--seed", "7", "--out", str(root / "split")]) == 0
    args = ["train", "--data", str(root / "split"), "--features", str(root / "syn/features_v.befa"), "--seed", "7", "--deterministic"]
    assert main(args + TRAIN_FLAGS + ["--out", str(root / "run")]) == 0
    return root


def test_synth_is_byte_identical(workspace, tmp_path):
    assert main(["synth", "--users", "50", "--items", "80", "--seed", "7", "--out", str(tmp_path / "again")]) == 0
    assert _files(tmp_path / "again") == _files(workspace / "syn")
    assert set(_files(tmp_path / "again")) == {"interactions.tsv", "features_v.befa", "ideal_v.befa", "corruption.tsv", "synth.json"}


def test_prep_kcore_ten(tmp_path):
    assert main(["synth", "--users", "120", "--items", "150", "--per-user", "25", "--seed", "3", "--out", str(tmp_path / "s")]) == 0
    assert main(["prep", "--input", str(tmp_path / "s/interactions.tsv"), "--kcore", "10", "--out", str(tmp_path / "p")]) == 0
    split = load_split(tmp_path / "p")
    recs = np.concatenate([split.train, split.valid, split.test])
    assert np.bincount(recs[:, 0]).min() >= 10 and np.bincount(recs[:, 1]).min() >= 10
    stats = json.loads((tmp_path / "p/prep.json").read_text())
    assert stats["filtered"]["interactions"] == len(recs)


def test_train_outputs_and_determinism(workspace, tmp_path):
    files = _files(workspace / "run")
    assert {"checkpoint.befc", "epochs.jsonl", "metrics.json", "metrics.txt", "run.json"} <= set(files)
    args = ["train", "--data", str(workspace / "split"), "--features", str(workspace / "syn/features_v.befa"), "--seed", "7", "--deterministic"]
    assert main(args + TRAIN_FLAGS + ["--out", str(tmp_path / "again")]) == 0
    again = _files(tmp_path / "again")
    for name in ("checkpoint.befc", "metrics.json", "epochs.jsonl", "metrics.txt"):
        assert again[name] == files[name], name


def test_config_file_and_flag_precedence(workspace, tmp_path):
    cfg = {
        "data": str(workspace / "split"),
        "features": {"v": str(workspace / "syn/features_v.befa")},
        "dim": 4, "epochs": 2, "patience": 2, "batch_size": 256, "adapter": "lora",
        "out": str(tmp_path / "from_cfg"),
    }
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--dim", "6"]) == 0
    run = json.loads((tmp_path / "from_cfg/run.json").read_text())
    assert run["dim"] == 6 and run["adapter"] == "lora" and run["epochs"] == 2


@pytest.mark.parametrize("bad", [{"dim": 4, "unknown_key": 1}, {"dim": "wide"}, {"adapter": "gru"}, {"synthetic": {"users": 5, "x": 1}}])
def test_schema_violations_fail_without_outputs(tmp_path, bad, capsys):
    (tmp_path / "c.json").write_text(json.dumps(bad))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()
    assert "error" in capsys.readouterr().err


def test_missing_inputs_fail_cleanly(workspace, tmp_path, capsys):
    assert main(["prep", "--input", str(tmp_path / "nope.tsv"), "--out", str(tmp_path / "o1")]) == 1
    assert main(["train", "--data", str(tmp_path / "nope"), "--features", "x.befa", "--out", str(tmp_path / "o2")]) == 1
    assert main(["evaluate", "--checkpoint", str(tmp_path / "nope.befc"), "--data", str(workspace / "split")]) == 1
    assert main(["evaluate", "--checkpoint", str(workspace / "run/checkpoint.befc"), "--data", str(workspace / "split"),
                 "--features", str(workspace / "syn/features_v.befa"), "--adapter", "none", "--out", str(tmp_path / "o3")]) == 1
    # the k-core filter empties the data: nothing may be written
    assert main(["prep", "--input", str(workspace / "syn/interactions.tsv"), "--kcore", "500", "--out", str(tmp_path / "o4")]) == 1
    for name in ("o1", "o2", "o3", "o4"):
        assert not (tmp_path / name).exists()
    err = capsys.readouterr().err
    assert "not found" in err and "expected 'none'" in err


def test_evaluate_prints_metrics(workspace, capsys):
    assert main(["evaluate", "--checkpoint", str(workspace / "run/checkpoint.befc"), "--data", str(workspace / "split"),
                 "--features", str(workspace / "syn/features_v.befa"), "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    metrics = json.loads((workspace / "run/metrics.json").read_text())["test"]
    assert out == metrics


def test_compare_table_shape(tmp_path, capsys):
    args = ["compare", "--seeds", "1..2", "--users", "40", "--items", "60", *TRAIN_FLAGS, "--out", str(tmp_path / "cmp")]
    assert main(args) == 0
    text = capsys.readouterr().out
    body = json.loads((tmp_path / "cmp/compare.json").read_text())
    assert body["seeds"] == [1, 2]
    rows = body["mean"]
    assert {(r["row"], r["metric"]) for r in rows} == {
        (a, m) for a in ("none", "befa", "lora", "prompt") for m in ("recall@10", "recall@20", "ndcg@10", "ndcg@20")
    }
    for r in rows:
        per_seed = [body["per_seed"][s][r["row"]]["test"][r["metric"]] for s in ("1", "2")]
        assert r["value"] == pytest.approx(sum(per_seed) / 2, rel=1e-15)
    for a in ("none", "befa", "lora", "prompt"):
        assert any(line.startswith(a) for line in text.splitlines())
    assert "Delta" in text


def test_improvement_formatting():
    assert format_improvement(improvement(0.05, 0.05)) == "+0.00%"
    assert format_improvement(improvement(0.0391, 0.0320)) == "+22.19%"
    assert format_improvement(improvement(0.0319, 0.0298)) == "+7.05%"
    assert format_improvement(improvement(0.1, 0.0)) == "n/a"
    text, records = experiment_table({"base": {"recall@20": 0.0}, "new": {"recall@20": 0.2}}, "base")
    assert "n/a" in text and records[-1]["improvement"] is None
    with pytest.raises(ValueError):
        experiment_table({"x": {"recall@20": 1.0}}, "missing")


def test_parse_seeds():
    assert parse_seeds("1..5") == [1, 2, 3, 4, 5]
    assert parse_seeds("3,9") == [3, 9]
    assert parse_seeds("4") == [4]


def test_help_lists_flags_with_defaults(capsys):
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"synth", "prep", "train", "evaluate", "compare", "attribute", "diagnose"}
    train_help = sub["train"].format_help()
    for flag in ("--config", "--seed", "--adapter", "--dim", "--da-mult", "--dropout", "--deterministic",
                 "--stop-grad-behavior", "--out"):
        assert flag in train_help
    assert "(default: 64)" in train_help and "(default: 4.0)" in train_help
    assert "--kcore" in sub["prep"].format_help() and "--split-mode" in sub["prep"].format_help()
    assert "--raw-cosine" in sub["attribute"].format_help()
    for name, p in sub.items():
        for action in p._actions:
            if action.option_strings and action.help and action.default not in (None, False) and action.dest != "help":
                assert "default" in p.format_help(), name


def test_schema_rejects_unknown_keys():
    assert run_config_schema()["additionalProperties"] is False


def test_attribute_writes_heatmaps(workspace, tmp_path):
    rng = np.random.default_rng(0)
    d_m = 32
    save_bundle(tmp_path / "item1", AttributionBundle(rng.random((3, 4, 4)), rng.normal(size=(3, d_m)), rng.normal(size=8), (8, 8)))
    args = ["attribute", "--checkpoint", str(workspace / "run/checkpoint.befc"), "--bundle", str(tmp_path / "item1"),
            "--out", str(tmp_path / "att")]
    assert main(args) == 0
    assert read_pgm(tmp_path / "att/item1.pgm").shape == (8, 8)
    summary = json.loads((tmp_path / "att/attribution.json").read_text())
    assert len(summary["bundles"]["item1"]["weights"]) == 3
    first = _files(tmp_path / "att")
    assert main(args) == 0 and _files(tmp_path / "att") == first
    # raw cosine needs matching dims
    assert main(["attribute", "--raw-cosine", "--bundle", str(tmp_path / "item1"), "--out", str(tmp_path / "raw")]) == 1
    assert not (tmp_path / "raw").exists()


def test_diagnose_reports(workspace, tmp_path, capsys):
    args = ["diagnose", "--features", str(workspace / "syn/features_v.befa"), "--ideal", str(workspace / "syn/ideal_v.befa"),
            "--checkpoint", str(workspace / "run/checkpoint.befc"), "--data", str(workspace / "split"), "--out", str(tmp_path / "d")]
    assert main(args) == 0
    body = json.loads((tmp_path / "d/diagnose.json").read_text())
    assert set(body) == {"raw", "adapted", "raw/aligned", "adapted/aligned"}
    assert 0.0 <= body["raw"]["delta"] <= 2.0
    assert main(["diagnose", "--features", str(workspace / "syn/features_v.befa"), "--ideal",
                 str(workspace / "syn/ideal_v.befa"), "--checkpoint", str(workspace / "run/checkpoint.befc")]) == 1


def test_prep_output_reloads(workspace):
    split = load_split(workspace / "split")
    assert len(split.train) + len(split.valid) + len(split.test) == len(load_interactions(workspace / "syn/interactions.tsv"))
