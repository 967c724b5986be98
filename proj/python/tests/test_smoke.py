import json
import math

import numpy as np
import pytest

import clf


def test_metrics_and_formatting():
    m = np.array([[0.8, np.nan], [0.6, 0.4]])
    assert clf.avg_accuracy(m) == pytest.approx(0.5)
    assert clf.avg_forgetting(m) == pytest.approx(20.0)
    assert clf.format_result(0.5, 20.0) == "50.00 (20.00)"
    with pytest.raises(clf.ContractError):
        clf.avg_accuracy(np.zeros((2, 3)))


def test_ledger():
    assert len(clf.ledger_methods()) == 11
    assert clf.storage_ledger("ewc", M=1000) == (2000.0, "2 · M")
    assert clf.storage_ledger("gem", T=2, M=10, R=5) == (25.0, "T · M + R")


def test_gem_and_herding():
    g, projected = clf.gem_project(np.array([1.0, -1.0]), np.array([[0.0, 1.0]]), 0.5)
    assert projected
    assert list(g) == [1.0, 0.5]
    f = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 1.0]])
    assert clf.herding_select(f, 2) == [2, 0]


def test_stability_decay_with_python_learner():
    seen = []

    def learner(values, attempt):
        seen.append(values["lambda"])
        return 0.4 if values["lambda"] > 60 else 0.5

    out = clf.stability_decay([{"name": "lambda", "value": 400.0, "floor": 1e-3}], 0.55, 0.2, 0.5, learner)
    assert seen == [400, 200, 100, 50]
    assert out["hyper"]["lambda"] == 50
    assert [a["decision"] for a in out["attempts"]] == ["reject"] * 3 + ["accept"]


def _config(tmp_path, **overrides):
    clf.save_toy_dataset(tmp_path / "toy.csv")
    cfg = {
        "schema_version": 1,
        "dataset": {"path": "toy.csv"},
        "net": {"hidden": [8, 8]},
        "schedule": {"max_epochs": 3, "batch_size": 32},
        "framework": {"lr_grid": [1e-2], "first_task_extra": [5e-2]},
        "method": {"id": "packnet"},
        "output_dir": "out",
    }
    cfg.update(overrides)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_resume_report(tmp_path):
    path = _config(tmp_path)
    echo = clf.load_config(path)
    assert echo["method"]["id"] == "packnet"
    part = clf.run(path, workers=1, stop_after=2)
    assert part["tasks_done"] == 2
    ck = clf.latest_checkpoint(tmp_path / "out")
    assert ck is not None and ck.name == "task_002.clck"
    full = clf.run(path, workers=2, resume=ck)
    assert full["tasks_done"] == 5
    assert full["avg_forgetting"] == 0.0
    assert math.isnan(full["matrix"][0, 1])
    again = clf.report(tmp_path / "out")
    np.testing.assert_array_equal(again["matrix"], full["matrix"])
    assert clf.capacity(tmp_path / "out").startswith("layer,task_1")
    assert "T · M[bit]" in clf.ledger(path)


def test_config_errors(tmp_path):
    path = _config(tmp_path, bogus=1)
    with pytest.raises(clf.ConfigError, match="bogus"):
        clf.run(path)
    assert issubclass(clf.ConfigError, ValueError)
