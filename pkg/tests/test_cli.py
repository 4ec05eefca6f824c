import csv
import json

import numpy as np
import pytest

from qkiter import cli
from qkiter import encoder as E
from qkiter.config import ExperimentConfig, from_dict, load_config
from qkiter.data import read_dataset, write_vectors
from qkiter.errors import ConfigError, NumericError
from qkiter.metrics import evaluate_model

TINY = {
    "synth": {"n_keys": 200, "d_in": 8, "n_clusters": 10},
    "eval": {"n_eval_queries": 20, "n_distractors": 10, "n_extra_keys": 10},
    "model": {"backbone_width": 16, "d_mid": 8, "head_hidden": 8, "d_out": 4, "d_proj": 12},
    "loss": {"M": 4},
    "train": {
        "batch_size": 8,
        "chunk_size": 64,
        "phases": [{"kind": "Q", "max_steps": 5}, {"kind": "K", "max_steps": 5}, {"kind": "Q", "max_steps": 5}],
    },
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


@pytest.fixture
def dataset(tmp_path, cfg_path):
    out = tmp_path / "data"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out", str(out)]) == 0
    return out


def files_of(root, skip=("timing.jsonl", "run_timing.json")):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name not in skip
    }


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_defaults_roundtrip(tmp_path):
    cfg = ExperimentConfig()
    cfg.validate()
    assert cfg.simclr_steps() == cfg.schedule().total_steps == 1800
    assert from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "raw, key",
    [
        ({"synht": {}}, "synht"),
        ({"loss": {"tau": 0.07, "temperature": 1}}, "loss.temperature"),
        ({"train": {"phases": [{"kind": "Q", "max_steps": 3, "every": 1}]}}, "train.phases[0].every"),
    ],
)
def test_unknown_keys_named(raw, key):
    with pytest.raises(ConfigError, match=key.replace("[", r"\[").replace("]", r"\]")):
        from_dict(raw)


@pytest.mark.parametrize(
    "raw",
    [
        {"loss": {"tau": -1}},
        {"synth": {"n_clusters": 0}},
        {"train": {"phases": [{"kind": "Q", "max_steps": 0}]}},
        {"train": {"batch_size": 0}},
        {"model": {"d_out": 100}},
        {"workers": 0},
    ],
)
def test_invalid_values(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_gen_data_deterministic(tmp_path, cfg_path, dataset):
    again = tmp_path / "again"
    cli.main(["gen-data", "--config", str(cfg_path), "--out", str(again)])
    assert files_of(dataset) == files_of(again)
    assert {p.name for p in dataset.iterdir()} == {
        "train_keys.qkds", "eval_keys.qkds", "eval_queries.qkds", "ground_truth.csv", "manifest.json",
    }
    other = tmp_path / "other"
    cli.main(["gen-data", "--config", str(cfg_path), "--out", str(other), "--seed-override", "5"])
    assert files_of(other)["train_keys.qkds"] != files_of(dataset)["train_keys.qkds"]


def test_malformed_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"synth": {"n_keys": 10, "colour": 3}}))
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "synth.colour" in capsys.readouterr().err
    bad.write_text("{not json")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_train_qk_table(tmp_path, cfg_path, dataset):
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(dataset), "--out", str(out)]) == 0
    rows = read_rows(out / "phases.csv")
    assert [r["phase"] for r in rows] == ["Q1", "K1", "Q2"]
    summary = json.loads((out / "phases.json").read_text())
    assert summary["mode"] == "qk" and len(summary["phases"]) == 3
    assert len(list((out / "stores").iterdir())) == 3
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 15


def test_train_simclr_mode(tmp_path, cfg_path, dataset):
    out = tmp_path / "run"
    args = ["train", "--config", str(cfg_path), "--data", str(dataset), "--out", str(out), "--mode", "simclr"]
    assert cli.main(args) == 0
    rows = read_rows(out / "phases.csv")
    assert len(rows) == 1 and rows[0]["steps"] == "15"
    assert not (out / "stores").exists() and not (out / "checkpoints").exists()


def test_resume_equivalence(tmp_path, cfg_path, dataset):
    base = ["train", "--config", str(cfg_path), "--data", str(dataset)]
    cli.main(base + ["--out", str(tmp_path / "full")])
    cut = tmp_path / "cut"
    cli.main(base + ["--out", str(cut), "--stop-after", "1"])
    assert not (cut / "checkpoints" / "02_K1").exists()
    cli.main(base + ["--out", str(cut), "--resume"])
    assert files_of(cut) == files_of(tmp_path / "full")


def test_embed_evaluate_matches_in_process(tmp_path, cfg_path, dataset):
    run = tmp_path / "run"
    cli.main(["train", "--config", str(cfg_path), "--data", str(dataset), "--out", str(run)])
    qv, kv, metrics = tmp_path / "q.qkdv", tmp_path / "k.qkdv", tmp_path / "m.json"
    assert cli.main(["embed", "--checkpoint", str(run / "query.qkcp"), "--input",
                     str(dataset / "eval_queries.qkds"), "--role", "query", "--out", str(qv)]) == 0
    assert cli.main(["embed", "--checkpoint", str(run / "key.qkcp"), "--input",
                     str(dataset / "eval_keys.qkds"), "--role", "key", "--out", str(kv)]) == 0
    assert cli.main(["evaluate", "--queries", str(qv), "--keys", str(kv), "--ground-truth",
                     str(dataset / "ground_truth.csv"), "--out", str(metrics),
                     "--pr-csv", str(tmp_path / "pr.csv")]) == 0
    report = json.loads(metrics.read_text())
    _, split = read_dataset(dataset)
    q = E.read_checkpoint(run / "query.qkcp")
    k = E.read_checkpoint(run / "key.qkcp")
    fz = E.load_featurizer(run / "featurizer.qkfz")
    ref = evaluate_model(q, k, fz, split)
    assert abs(report["mu_ap"] - ref["mu_ap"]) <= 1e-12
    assert abs(report["macro_ap"] - ref["macro_ap"]) <= 1e-12
    assert report["n_pairs"] == len(split.queries) * len(split.keys)
    final = json.loads((run / "phases.json").read_text())["phases"][-1]
    assert report["mu_ap"] == final["mu_ap"]


def test_embed_role_mismatch_and_empty(tmp_path, cfg_path, dataset, capsys):
    run = tmp_path / "run"
    cli.main(["train", "--config", str(cfg_path), "--data", str(dataset), "--out", str(run), "--mode", "simclr"])
    code = cli.main(["embed", "--checkpoint", str(run / "query.qkcp"), "--input",
                     str(dataset / "eval_keys.qkds"), "--role", "key", "--out", str(tmp_path / "x")])
    assert code == 3 and "query model" in capsys.readouterr().err
    write_vectors(tmp_path / "empty.qkds", np.zeros((0, 8)))
    code = cli.main(["embed", "--checkpoint", str(run / "key.qkcp"), "--input",
                     str(tmp_path / "empty.qkds"), "--role", "key", "--out", str(tmp_path / "x")])
    assert code == 3


def test_evaluate_rejects_swapped_roles(tmp_path):
    write_vectors(tmp_path / "a.qkdv", np.zeros((2, 3)), role="key")
    write_vectors(tmp_path / "b.qkdv", np.zeros((2, 3)), role="key")
    (tmp_path / "gt.csv").write_text("query_id,key_id\n0,0\n")
    code = cli.main(["evaluate", "--queries", str(tmp_path / "a.qkdv"), "--keys", str(tmp_path / "b.qkdv"),
                     "--ground-truth", str(tmp_path / "gt.csv"), "--out", str(tmp_path / "m.json")])
    assert code == 3


def test_compare_table(tmp_path, cfg_path, dataset):
    out = tmp_path / "cmp"
    assert cli.main(["compare", "--config", str(cfg_path), "--data", str(dataset), "--out", str(out)]) == 0
    rows = read_rows(out / "compare.csv")
    assert [r["mode"] for r in rows] == ["qk", "simclr"]
    assert rows[0]["steps"] == rows[1]["steps"] == "15"
    assert rows[0]["baseline_mu_ap"] == rows[1]["baseline_mu_ap"]


def test_numeric_error_exit_code(monkeypatch, cfg_path, dataset, tmp_path):
    def boom(args):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(cli, "cmd_train", boom)
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(dataset), "--out", str(tmp_path)]) == 4


def test_missing_dataset_is_data_error(tmp_path, cfg_path):
    code = cli.main(["train", "--config", str(cfg_path), "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert code == 3


def test_workers_do_not_change_files(tmp_path, cfg_path, dataset):
    base = ["train", "--config", str(cfg_path), "--data", str(dataset)]
    cli.main(base + ["--out", str(tmp_path / "w1"), "--workers", "1"])
    cli.main(base + ["--out", str(tmp_path / "w3"), "--workers", "3"])
    assert files_of(tmp_path / "w1") == files_of(tmp_path / "w3")


def test_load_config_file(cfg_path):
    assert load_config(cfg_path).synth.n_keys == 200
