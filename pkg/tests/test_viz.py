"""Flow-plot emission: exact low-rank PCA reconstruction and outputs."""

import csv

import numpy as np
import pytest

from statflow.errors import ValidationError
from statflow.viz import emit_flow_plot, pca_fit


def test_identical_flows_unit_cosine(tmp_path):
    flows = np.random.default_rng(0).normal(size=(6, 12))
    res = emit_flow_plot(flows, flows.copy(), 6, str(tmp_path / "f"))
    assert res["mean_cosine"] == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(res["per_class_cosine"], 1.0, atol=1e-12)
    assert (tmp_path / "f.png").exists()
    assert (tmp_path / "f.csv").exists()


def test_rank2_flows_reconstruct_exactly():
    rng = np.random.default_rng(1)
    basis = rng.normal(size=(2, 10))
    coords = rng.normal(size=(8, 2))
    rows = coords @ basis  # rank-2 set
    mu, comps = pca_fit(rows, dims=2)
    recon = mu + (rows - mu) @ comps.T @ comps
    assert np.abs(recon - rows).max() < 1e-6


def test_csv_layout_and_order(tmp_path):
    rng = np.random.default_rng(2)
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(5, 7))
    emit_flow_plot(a, b, 3, str(tmp_path / "p"))
    with open(tmp_path / "p.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["class", "stat_x", "stat_y", "syn_x", "syn_y", "cosine"]
    assert [r[0] for r in rows[1:6]] == ["0", "1", "2", "3", "4"]
    assert rows[-1][0] == "mean"
    # locale-independent: every numeric field parses with a dot separator
    for r in rows[1:6]:
        for v in r[1:]:
            float(v)


def test_k_classes_validation(tmp_path):
    a = np.random.default_rng(3).normal(size=(4, 6))
    with pytest.raises(ValidationError):
        emit_flow_plot(a, a, 5, str(tmp_path / "x"))
    with pytest.raises(ValidationError):
        emit_flow_plot(a, a[:3], 2, str(tmp_path / "y"))
