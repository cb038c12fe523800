import math
from dataclasses import replace

import pytest

from app import create_app
from app.config import STANDARD_MASK_SIDES, preset
from app.services.experiment_service import experiment_service
from ml_training.console import set_quiet


@pytest.fixture(scope="module")
def results_dir(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("served")
    cfg = preset("blobs")
    cfg = replace(
        cfg,
        n_labeled=(100,),
        capacity_factors=(1.0, 2.0),
        pool_size=300,
        blob_per_class=100,
        blob_test_per_class=40,
        base_width=8,
        out_dir=str(out_dir),
        teacher=replace(cfg.teacher, batch_size=50, burn_in=100, thinning=20, total_iters=400),
    )
    set_quiet(True)
    experiment_service.run_grid(cfg)
    return str(out_dir)


@pytest.fixture
def client(results_dir):
    return create_app(results_dir).test_client()


def test_status(client, results_dir):
    body = client.get('/api/experiment/status').get_json()
    assert body["status"] == "success"
    assert body["preset"] == "blobs"
    assert body["completed_cells"] == 2
    assert body["in_flight_cells"] == 0
    assert body["failed_cells"] == 0
    assert len(body["config_hash"]) == 32


def test_status_of_empty_directory(tmp_path):
    body = create_app(str(tmp_path)).test_client().get('/api/experiment/status').get_json()
    assert body["config_hash"] is None
    assert body["completed_cells"] == 0


def test_records(client):
    body = client.get('/api/experiment/records').get_json()
    assert body["count"] == 2
    assert [r["capacity_factor"] for r in body["records"]] == [1.0, 2.0]
    for record in body["records"]:
        assert math.isclose(record["delta"], record["nll_student"] - record["nll_teacher"], abs_tol=1e-12)
        assert "_dir" not in record


def test_entropy_summaries(client):
    body = client.get('/api/experiment/entropy').get_json()
    assert body["count"] == 2
    for row in body["summaries"]:
        assert 0.0 <= row["min"] <= row["q1"] <= row["median"] <= row["q3"] <= row["max"] <= math.log(3) + 1e-9


def test_plot_download(client):
    response = client.get('/api/experiment/plots/delta_vs_capacity')
    assert response.status_code == 200
    assert response.mimetype == 'image/svg+xml'
    assert b"<svg" in response.data


def test_unknown_plot(client):
    response = client.get('/api/experiment/plots/pie_chart')
    assert response.status_code == 404
    assert "entropy_boxplots" in response.get_json()["available"]


def test_missing_plot_file(tmp_path):
    response = create_app(str(tmp_path)).test_client().get('/api/experiment/plots/delta_vs_rate')
    assert response.status_code == 404


def test_report_rebuild(client):
    body = client.post('/api/experiment/report').get_json()
    assert body["status"] == "success"
    assert body["rows"] == 2
    assert set(body["plots"]) >= {"delta_vs_capacity", "entropy_boxplots"}


def test_report_without_results(tmp_path):
    response = create_app(str(tmp_path / "absent")).test_client().post('/api/experiment/report')
    assert response.status_code == 404


def test_masking_rates(client):
    body = client.get('/api/data/masking-rates').get_json()
    assert body["image_side"] == 28
    assert [r["mask_side"] for r in body["rates"]] == list(STANDARD_MASK_SIDES)
    assert body["rates"][4]["mask_rate"] == pytest.approx(0.25)

    picked = client.get('/api/data/masking-rates?m=26&m=28').get_json()["rates"]
    assert picked == [{"mask_side": 26, "mask_rate": 676 / 784}, {"mask_side": 28, "mask_rate": 1.0}]


def test_masking_rate_out_of_range(client):
    response = client.get('/api/data/masking-rates?m=30')
    assert response.status_code == 400
    assert response.get_json()["status"] == "error"
