import gzip
import os

import pytest
import requests
from click.testing import CliRunner

from app.cli import EXIT_COMPUTE, EXIT_CONFIG, EXIT_DATA, EXIT_OK, cli
from app.services.experiment_service import CellRunner
from ml_training.data_pipeline import MNIST_FILES, parse_idx

BLOB_CONFIG = """
[experiment]
preset = blobs
n_labeled = 100
base_width = 8
checkpoint_every = 100

[data]
pool_size = 300
blob_per_class = 100
blob_test_per_class = 40

[teacher]
batch_size = 50
burn_in = 100
thinning = 20
total_iters = 400
"""


@pytest.fixture
def runner(monkeypatch):
    for name in ("BDK_DATA_DIR", "BDK_OUT_DIR"):
        monkeypatch.delenv(name, raising=False)
    return CliRunner()


@pytest.fixture
def blob_config_file(tmp_path):
    path = tmp_path / "blobs.conf"
    path.write_text(BLOB_CONFIG)
    return str(path)


def _run(runner, *args):
    return runner.invoke(cli, list(args), catch_exceptions=False)


def test_run_success_then_report(runner, blob_config_file, tmp_path):
    out_dir = str(tmp_path / "out")
    result = _run(runner, "run", "--config", blob_config_file, "--out", out_dir, "--quiet")
    assert result.exit_code == EXIT_OK
    assert os.path.exists(os.path.join(out_dir, "results.csv"))

    os.remove(os.path.join(out_dir, "results.csv"))
    result = _run(runner, "report", "--out", out_dir)
    assert result.exit_code == EXIT_OK
    assert os.path.exists(os.path.join(out_dir, "results.csv"))
    assert "results.csv" in result.output


def test_seed_flag_changes_results(runner, blob_config_file, tmp_path):
    _run(runner, "run", "--config", blob_config_file, "--out", str(tmp_path / "a"), "--quiet")
    _run(runner, "run", "--config", blob_config_file, "--out", str(tmp_path / "b"), "--seed", "9", "--quiet")
    assert (tmp_path / "a" / "results.csv").read_bytes() != (tmp_path / "b" / "results.csv").read_bytes()


def test_missing_config_exits_with_config_error(runner, tmp_path):
    result = _run(runner, "run", "--config", str(tmp_path / "absent.conf"), "--out", str(tmp_path / "out"))
    assert result.exit_code == EXIT_CONFIG


def test_bad_config_value_exits_with_config_error(runner, tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("[teacher]\nthinning = -3\n")
    result = _run(runner, "run", "--config", str(path), "--out", str(tmp_path / "out"), "--quiet")
    assert result.exit_code == EXIT_CONFIG


def test_missing_mnist_exits_with_data_error(runner, tmp_path, monkeypatch):
    monkeypatch.setenv("BDK_DATA_DIR", str(tmp_path / "nowhere"))
    result = _run(runner, "run", "--preset", "desk", "--out", str(tmp_path / "out"), "--quiet")
    assert result.exit_code == EXIT_DATA


def test_paper_preset_is_accepted(runner, tmp_path, monkeypatch):
    # reaches the data check, so the preset itself parsed
    monkeypatch.setenv("BDK_DATA_DIR", str(tmp_path / "nowhere"))
    result = _run(runner, "run", "--preset", "paper", "--out", str(tmp_path / "out"), "--quiet")
    assert result.exit_code == EXIT_DATA


@pytest.mark.parametrize("args", [
    ["run", "--preset", "huge"],
    ["run", "--seed", "forty-two"],
    ["run", "--colour", "blue"],
    ["resume"],
])
def test_bad_options_exit_with_config_error(runner, tmp_path, args):
    result = _run(runner, *args, "--out", str(tmp_path / "out")) if args[0] == "run" else _run(runner, *args)
    assert result.exit_code == EXIT_CONFIG


def test_failed_cell_exits_with_compute_error(runner, blob_config_file, tmp_path, monkeypatch):
    def broken(self):
        raise FloatingPointError("overflow")

    monkeypatch.setattr(CellRunner, "evaluate", broken)
    result = _run(runner, "run", "--config", blob_config_file, "--out", str(tmp_path / "out"), "--quiet")
    assert result.exit_code == EXIT_COMPUTE


def test_resume_checks_config(runner, blob_config_file, tmp_path):
    out_dir = str(tmp_path / "out")
    _run(runner, "run", "--config", blob_config_file, "--out", out_dir, "--quiet")

    assert _run(runner, "resume", "--out", out_dir, "--quiet").exit_code == EXIT_OK
    assert _run(runner, "resume", "--out", out_dir, "--config", blob_config_file, "--quiet").exit_code == EXIT_OK
    edited = _run(runner, "resume", "--out", out_dir, "--config", blob_config_file, "--seed", "5", "--quiet")
    assert edited.exit_code == EXIT_CONFIG
    assert _run(runner, "resume", "--out", str(tmp_path / "empty"), "--quiet").exit_code == EXIT_CONFIG


def test_mask_preview(runner, fake_mnist_dir, tmp_path):
    output = tmp_path / "preview.svg"
    result = _run(runner, "mask-preview", "--data-dir", fake_mnist_dir, "-m", "14", "--count", "4",
                  "--output", str(output))
    assert result.exit_code == EXIT_OK
    assert output.read_text().lstrip().startswith("<?xml")


def test_mask_preview_without_data(runner, tmp_path):
    result = _run(runner, "mask-preview", "--data-dir", str(tmp_path), "-m", "14",
                  "--output", str(tmp_path / "p.png"))
    assert result.exit_code == EXIT_DATA


def test_dump_data(runner, fake_mnist_dir, tmp_path):
    config = tmp_path / "small.conf"
    config.write_text(f"[experiment]\nn_labeled = 100\n[data]\ndata_dir = {fake_mnist_dir}\n"
                      "pool_size = 300\ntest_size = 100\n")
    target = tmp_path / "dump"
    result = _run(runner, "dump-data", "--config", str(config), "-n", "100", "-m", "10", "--target", str(target))
    assert result.exit_code == EXIT_OK

    prefix = "fcnn_n100_m10_c1_r0"
    inputs, labels = parse_idx((target / f"{prefix}-labeled-images-idx3-ubyte").read_bytes(),
                               (target / f"{prefix}-labeled-labels-idx1-ubyte").read_bytes())
    assert inputs.shape == (100, 1, 28, 28) and labels.shape == (100,)
    assert "m = 10" in (target / f"{prefix}-test-provenance.txt").read_text()


class _Response:
    def __init__(self, content):
        self.content = content

    def raise_for_status(self):
        pass


def test_fetch_data(runner, fake_mnist_dir, tmp_path, monkeypatch):
    requested = []

    def fake_get(url, timeout):
        requested.append(url)
        name = url.rsplit("/", 1)[1]
        with open(os.path.join(fake_mnist_dir, name), 'rb') as f:
            return _Response(f.read())

    monkeypatch.setattr(requests, "get", fake_get)
    target = tmp_path / "downloaded"
    result = _run(runner, "fetch-data", "--data-dir", str(target), "--mirror", "https://mirror.test/mnist")
    assert result.exit_code == EXIT_OK
    assert len(requested) == 4
    assert all(url.startswith("https://mirror.test/mnist/") for url in requested)
    with gzip.open(target / (MNIST_FILES["test"][1] + ".gz"), 'rb') as f:
        assert len(f.read()) == 8 + 200

    # files already present: nothing is downloaded again
    assert _run(runner, "fetch-data", "--data-dir", str(target)).exit_code == EXIT_OK
    assert len(requested) == 4


def test_fetch_data_network_failure(runner, tmp_path, monkeypatch):
    def offline(url, timeout):
        raise requests.ConnectionError("no route to host")

    monkeypatch.setattr(requests, "get", offline)
    result = _run(runner, "fetch-data", "--data-dir", str(tmp_path / "downloaded"))
    assert result.exit_code == EXIT_DATA
