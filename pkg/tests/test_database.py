import json
from datetime import datetime

import pytest

from services.database import Database


def _run(run_id, status="pending", experiment="converge"):
    now = datetime.now().isoformat()
    return {"run_id": run_id, "experiment": experiment, "scheme": "midpoint_ua", "config_json": "{}",
            "status": status, "output_dir": f"results/{run_id}", "created_at": now, "updated_at": now}


def test_create_and_get_run(isolated_registry):
    db = isolated_registry
    assert db.create_run(_run("a"))
    assert not db.create_run(_run("a"))
    row = db.get_run("a")
    assert row["status"] == "pending"
    assert row["error_message"] is None
    assert db.get_run("missing") is None


def test_update_run_rejects_unknown_fields(isolated_registry):
    db = isolated_registry
    db.create_run(_run("a"))
    assert db.update_run("a", {"status": "error", "error_message": "boom"})
    assert db.get_run("a")["error_message"] == "boom"
    with pytest.raises(ValueError):
        db.update_run("a", {"color": "red"})
    assert not db.update_run("a", {})


def test_filters_and_statistics(isolated_registry):
    db = isolated_registry
    db.create_run(_run("a", "passed"))
    db.create_run(_run("b", "failed", "landau"))
    db.create_run(_run("c", "passed", "landau"))
    assert {r["run_id"] for r in db.get_all_runs("passed")} == {"a", "c"}
    assert {r["run_id"] for r in db.get_all_runs(experiment="landau")} == {"b", "c"}
    assert len(db.get_all_runs("all")) == 3
    stats = db.get_run_statistics()
    assert stats["total"] == 3
    assert stats["passed"] == 2
    assert stats["error"] == 0


def test_gates_are_replaced_and_deleted_with_run(isolated_registry):
    db = isolated_registry
    db.create_run(_run("a"))
    db.record_gates("a", [{"name": "x", "value": 1.0, "passed": True}])
    db.record_gates("a", [{"name": "y", "value": None, "lower": 0.0, "passed": False},
                          {"name": "z", "value": 2.0, "upper": 3.0, "passed": True}])
    gates = db.get_gates("a")
    assert [g["name"] for g in gates] == ["y", "z"]
    assert gates[0]["passed"] is False
    assert gates[0]["value"] is None
    assert db.delete_run("a")
    assert db.get_gates("a") == []


def test_delete_runs_by_status(isolated_registry):
    db = isolated_registry
    db.create_run(_run("a", "error"))
    db.create_run(_run("b", "error"))
    db.create_run(_run("c", "passed"))
    assert db.delete_runs_by_status("error") == 2
    assert [r["run_id"] for r in db.get_all_runs()] == ["c"]


def test_config_values(tmp_path):
    db = Database(tmp_path / "other.db")
    db.set_config("app_config", {"runtime": {"threads": 3}})
    db.set_config("flag", 1)
    assert json.loads(db.get_config("app_config")) == {"runtime": {"threads": 3}}
    assert db.get_config("flag") == "1"
    assert db.get_config("missing", "default") == "default"
    assert set(db.get_all_config()) == {"app_config", "flag"}
