"""
Qualitative trends of the desk-scale grids on real MNIST.

Each test runs a full desk configuration (tens of minutes on one core),
so both are marked slow and need BDK_MNIST_DIR.
"""
import math
import os

import pandas as pd
import pytest

from app.config import load_config
from app.services.experiment_service import experiment_service

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "config")

pytestmark = [pytest.mark.slow, pytest.mark.mnist]


def _run(name, tmp_path):
    cfg = load_config(os.path.join(CONFIG_DIR, name), data_dir=os.environ["BDK_MNIST_DIR"],
                      out_dir=str(tmp_path / name), quiet=True)
    result = experiment_service.run_grid(cfg)
    assert result["status"] == "success"
    return (pd.read_csv(result["report"]["csv"]),
            pd.read_csv(result["report"]["entropy_csv"]))


def test_masking_raises_teacher_nll_and_entropy(tmp_path):
    results, entropy = _run("desk.conf", tmp_path)
    teacher = results.set_index("mask_side")["nll_teacher"]
    assert teacher[14] > teacher[0]
    assert abs(teacher[26] - math.log(10)) <= 0.15 * math.log(10)

    heavy = entropy[entropy.mask_side == 26].iloc[0]
    assert heavy["mean"] >= 0.85 * math.log(10)


def test_wider_students_close_the_gap(tmp_path):
    results, _ = _run("capacity.conf", tmp_path)
    medians = results.groupby("capacity_factor")["delta"].median()
    assert medians[4.0] <= 0.75 * medians[1.0]
