import pytest

from app import create_app
from config.settings import config_hash
from models.state import RunLedger


@pytest.fixture
def ledger(default_settings):
    return RunLedger(default_settings.database_url)


@pytest.fixture
def client(default_settings, ledger):
    return create_app(default_settings, ledger).test_client()


def test_health_check(client) -> None:
    response = client.get("/")

    assert response.status_code == 200
    assert response.get_json()["status"] == "healthy"
    assert response.get_json()["ledger_available"] is True


def test_config_reports_the_hash(client, default_settings) -> None:
    body = client.get("/config").get_json()

    assert body["config_hash"] == config_hash(default_settings)
    assert body["config"]["drive"]["rf_frequency_mhz"] == 20.0
    assert "database_url" not in body["config"]


def test_status_lists_recorded_runs(client, ledger) -> None:
    run_id = ledger.start_run("calibrate", "h", 3)

    body = client.get("/status").get_json()

    assert body["recent_runs"][0]["id"] == run_id


def test_single_run_and_missing_run(client, ledger) -> None:
    run_id = ledger.start_run("servo_sim", "h", 3)
    ledger.finish_run(run_id, {"linewidth_nm": 0.001})

    found = client.get(f"/runs/{run_id}")
    missing = client.get("/runs/999")

    assert found.get_json()["summary"] == {"linewidth_nm": 0.001}
    assert missing.status_code == 404


def test_unknown_route_lists_endpoints(client) -> None:
    response = client.get("/nowhere")

    assert response.status_code == 404
    assert "available_endpoints" in response.get_json()
