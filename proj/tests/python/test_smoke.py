import json

import numpy as np
import pytest

import cilfuse

SMALL = {
    "scenario": {"n_base_classes": 6, "novel_steps": [3], "per_class_train": 30, "per_class_val": 6,
                 "per_class_test": 8, "dim": 4},
    "arch": {"trunk_widths": [12], "branch_widths": [8]},
    "schedules": {"pretrain": {"epochs": 3}, "stage1": {"epochs": 3}, "finetune": {"epochs": 2},
                  "router": {"epochs": 2}, "fusion": {"epochs": 2}, "cat": {"epochs": 2}},
    "grid": {"alphas": [0, 0.5, 1], "betas": [0, 1]},
    "seeds": [0],
}


def test_defaults():
    cfg = cilfuse.default_config()
    assert cfg["scenario"]["stddev"] == 0.3
    assert cfg["methods"] == cilfuse.methods
    assert cilfuse.normalize_config({"scenario": {"dim": 5}})["scenario"]["stddev"] == 0.3


def test_unknown_key_raises_config_error():
    with pytest.raises(cilfuse.ConfigError, match="scenario.dimm"):
        cilfuse.normalize_config({"scenario": {"dimm": 3}})
    assert issubclass(cilfuse.ConfigError, cilfuse.Error)


def test_metric_helpers():
    assert cilfuse.round4(cilfuse.average_accuracy(0.6377, 0.5267)) == 0.5822
    assert cilfuse.round4(cilfuse.average_accuracy(0.6435, 0.5376, 0.5613)) == 0.5808
    assert cilfuse.average_accuracy(None) is None
    assert cilfuse.spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_scenario_is_seeded():
    a = cilfuse.make_scenario(SMALL, 3)
    assert a == cilfuse.make_scenario(SMALL, 3)
    assert a["spec"]["seed"] == 3
    assert len(a["steps"]) == 2


def test_run_in_memory_is_deterministic():
    first = cilfuse.run(SMALL)
    assert json.dumps(first) == json.dumps(cilfuse.run(SMALL, threads=2))
    rows = [r for r in first["summary"] if r["seed"] == "mean"]
    assert {r["method"] for r in rows} == set(cilfuse.methods)
    grid = first["runs"][0]["steps"][-1]["grid"]
    assert len(grid["cells"]) == 6


def test_run_to_directory(tmp_path):
    art = cilfuse.run_to_directory(dict(SMALL, output_dir=str(tmp_path)))
    assert art["report"].exists() and art["csv"].exists()
    assert len(art["plots"]) == 3
    info = cilfuse.checkpoint_info(art["checkpoints"][-1])
    assert len(info["branches"]) == 2
    assert info["has_fusion"] and info["cross_weights"] == 2
    again = cilfuse.render_report(tmp_path)
    assert again["csv"].read_text() == art["csv"].read_text()
    with pytest.raises(cilfuse.ReportError):
        cilfuse.render_report(tmp_path / "missing")


def test_feature_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 3)).astype(np.float32).astype(np.float64)
    labels = [0, 1, 2, 0, 1, 2]
    path = tmp_path / "f.cilf"
    cilfuse.write_feature_file(path, x, labels)
    back, back_labels = cilfuse.read_feature_file(path)
    assert np.array_equal(back, x)
    assert back_labels == labels
    (tmp_path / "m.json").write_text(json.dumps({"feature_file": "f.cilf", "num_classes": 3}))
    data = cilfuse.ingest_features(path, tmp_path / "m.json")
    assert np.array_equal(data["x"], x) and data["y"] == labels
    (tmp_path / "bad.json").write_text(json.dumps({"feature_file": "f.cilf", "num_classes": 2}))
    with pytest.raises(cilfuse.FormatError, match="byte offset"):
        cilfuse.ingest_features(path, tmp_path / "bad.json")


def test_config_schema_matches_core():
    jsonschema = pytest.importorskip("jsonschema")
    import pathlib

    schema = json.loads((pathlib.Path(__file__).parents[2] / "docs" / "config.schema.json").read_text())
    jsonschema.validate(cilfuse.default_config(), schema)
    jsonschema.validate(SMALL, schema)
    for bad in ({"scenario": {"dimm": 3}}, {"grid": {"pooler": "median"}}, {"methods": ["magic"]},
                {"schedules": {"router": {"lr": 1}}}):
        with pytest.raises(jsonschema.ValidationError):
            jsonschema.validate(bad, schema)
        with pytest.raises(cilfuse.ConfigError):
            cilfuse.normalize_config(bad)
