import json

import pytest
from fastapi.testclient import TestClient

import bench_orchestrator
import server

SMALL_RUN = {
    "name": "api",
    "n_rows": 8,
    "n_cols": 8,
    "estimators": ["rownn"],
    "eta_row_percentiles": [50, 100],
}


@pytest.fixture
def client(tmp_path, monkeypatch):
    monkeypatch.setattr(server, "RUNS_DB_FILE", str(tmp_path / "runs.json"))
    monkeypatch.setattr(server, "OUTPUT_DIR", str(tmp_path / "output"))
    monkeypatch.setattr(bench_orchestrator, "OUTPUT_DIR", str(tmp_path / "output"))
    return TestClient(server.app)


def test_bench_run_completes(client, tmp_path):
    response = client.post("/bench", json=SMALL_RUN)
    assert response.status_code == 200
    assert response.json() == {"message": "Bench started", "name": "api"}

    status = client.get("/status/api").json()
    assert status["status"] == "completed"
    assert status["report_path"] == "/reports/api/report.json"
    assert set(status["summary"]) == {"rownn"}
    assert (tmp_path / "output" / "api" / "report.json").is_file()

    names = [run["name"] for run in client.get("/runs").json()]
    assert names == ["api"]


def test_out_is_ignored_for_api_runs(client, tmp_path):
    client.post("/bench", json={**SMALL_RUN, "out": str(tmp_path / "elsewhere")})
    assert (tmp_path / "output" / "api" / "report.json").is_file()
    assert not (tmp_path / "elsewhere").exists()


def test_runs_include_reports_written_by_the_cli(client, tmp_path):
    folder = tmp_path / "output" / "from_cli"
    folder.mkdir(parents=True)
    (folder / "report.json").write_text("{}")
    runs = client.get("/runs").json()
    assert runs == [{"name": "from_cli", "status": "completed", "report_path": "/reports/from_cli/report.json"}]


def test_running_name_is_rejected(client, tmp_path):
    (tmp_path / "runs.json").write_text(json.dumps({"api": {"status": "processing"}}))
    assert client.post("/bench", json=SMALL_RUN).status_code == 400


def test_failed_run_is_recorded(client, tmp_path):
    body = {**SMALL_RUN, "name": "broken", "dataset": "long-csv", "path": str(tmp_path / "missing.csv")}
    client.post("/bench", json=body)
    status = client.get("/status/broken").json()
    assert status["status"] == "failed"
    assert status["report_path"] is None


def test_unknown_run_and_invalid_config(client):
    assert client.get("/status/nope").status_code == 404
    assert client.post("/bench", json={**SMALL_RUN, "estimators": ["kernelnn"]}).status_code == 422
    assert client.post("/bench", json={**SMALL_RUN, "trials": 0}).status_code == 422


def test_config_endpoint(client, tmp_path):
    body = client.get("/config").json()
    assert body["status"] == "ok"
    assert body["version"] == bench_orchestrator.__version__
    assert body["output_dir"] == str(tmp_path / "output")
