"""Distillation loop contracts, mostly exercised in feature space via the
identity encoder (fast); the image-space desk runs live in the
acceptance suite."""

import inspect

import numpy as np
import pytest

from statflow.data import Dataset
from statflow.distill import (DistillConfig, SyntheticDataset, distill_ablation,
                              distill_lgm, distill_sfm)
from statflow.encoders import load_encoder
from statflow.errors import FingerprintMismatch, ValidationError
from statflow.statistics import (build_statistical_flow,
                                 compute_class_statistics)
from statflow.synthesis import AugmentParams


def feature_toy(seed=1, c=4, f=8, n=30, spread=0.05):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.25, 0.75, size=(c, f))
    imgs = np.clip(centers[np.repeat(np.arange(c), n)]
                   + rng.normal(0, spread, size=(c * n, f)), 0, 1)
    return Dataset(imgs.reshape(-1, f, 1, 1).astype(np.float32),
                   np.repeat(np.arange(c), n), c)


@pytest.fixture(scope="module")
def ident_setup():
    enc = load_encoder("identity-8")
    ds = feature_toy()
    stats = compute_class_statistics(enc, ds)
    flow = build_statistical_flow(stats)
    return enc, ds, stats, flow


def no_aug(seed=0):
    return AugmentParams(seed=seed).disabled()


def test_zero_iterations_returns_initialization(ident_setup):
    enc, _, _, flow = ident_setup
    cfg = DistillConfig(method="sfm", iterations=0, seed=3, augment=no_aug())
    out = distill_sfm(cfg, enc, flow)
    assert out.trace.shape == (0, 2)
    cfg2 = DistillConfig(method="sfm", iterations=0, seed=3, augment=no_aug())
    out2 = distill_sfm(cfg2, enc, flow)
    for a, b in zip(out.pyramids, out2.pyramids):
        np.testing.assert_array_equal(a.levels[0], b.levels[0])


def test_identity_smoke_run_converges(ident_setup):
    enc, _, _, flow = ident_setup
    cfg = DistillConfig(method="sfm", iterations=200, learning_rate=0.1,
                        seed=0, augment=no_aug())
    out = distill_sfm(cfg, enc, flow)
    assert out.trace[-1, 0] < out.trace[0, 0]
    assert out.trace[-1, 0] < 1e-2


def test_seeded_reproducibility_bitwise(ident_setup):
    enc, _, _, flow = ident_setup
    cfg = DistillConfig(method="sfm", iterations=50, learning_rate=0.05, seed=9)
    a = distill_sfm(cfg, enc, flow)
    b = distill_sfm(DistillConfig(method="sfm", iterations=50,
                                  learning_rate=0.05, seed=9), enc, flow)
    np.testing.assert_array_equal(a.compose_all(), b.compose_all())
    np.testing.assert_array_equal(a.trace, b.trace)


def test_encoder_unchanged_by_distillation(ident_setup):
    enc, ds, stats, flow = ident_setup
    conv = load_encoder("toy-conv-32", seed=0)
    before = conv.param_checksum()
    imgs = np.random.default_rng(0).uniform(0, 1, (40, 3, 32, 32)).astype(np.float32)
    small = Dataset(imgs, np.repeat(np.arange(4), 10), 4)
    st = compute_class_statistics(conv, small)
    fl = build_statistical_flow(st)
    distill_sfm(DistillConfig(method="sfm", iterations=3, seed=0), conv, fl)
    assert conv.param_checksum() == before


def test_trace_is_finite_and_loss_positive(ident_setup):
    enc, _, _, flow = ident_setup
    cfg = DistillConfig(method="sfm", iterations=40, learning_rate=0.05, seed=1)
    out = distill_sfm(cfg, enc, flow)
    assert np.isfinite(out.trace).all()
    assert (out.trace[:, 0] >= 0).all() and (out.trace[:, 0] <= 2).all()


def test_sfm_interface_takes_no_real_data():
    names = list(inspect.signature(distill_sfm).parameters)
    assert names == ["config", "encoder", "flow"]


def test_fingerprint_mismatch_refused(ident_setup):
    enc, _, _, flow = ident_setup
    other = load_encoder("identity-8")
    assert other.fingerprint == enc.fingerprint  # identity encoders match
    import dataclasses

    bad = dataclasses.replace(flow, encoder_fingerprint="deadbeef")
    with pytest.raises(FingerprintMismatch):
        distill_sfm(DistillConfig(method="sfm", iterations=1), enc, bad)


def test_zero_flow_row_names_class(ident_setup):
    enc, _, _, flow = ident_setup
    import dataclasses

    m = flow.matrix.copy()
    m[2] = 0.0
    dead = dataclasses.replace(flow, matrix=m)
    with pytest.raises(ValidationError, match="class 2"):
        distill_sfm(DistillConfig(method="sfm", iterations=1), enc, dead)


def test_method_config_validation(ident_setup):
    enc, ds, stats, flow = ident_setup
    with pytest.raises(ValidationError):
        distill_sfm(DistillConfig(method="lgm"), enc, flow)
    with pytest.raises(ValidationError):
        distill_ablation(DistillConfig(method="sfm"), enc, stats)
    with pytest.raises(ValidationError):
        distill_lgm(DistillConfig(method="sfm"), enc, ds)
    with pytest.raises(ValidationError):
        DistillConfig(method="nope")
    with pytest.raises(ValidationError):
        DistillConfig(learning_rate=0.0)


def test_tcdd_perfect_match_zero_loss(ident_setup):
    """If synthetic class means equal the statistical centers, the
    target-center loss is zero by construction."""
    enc, ds, stats, _ = ident_setup
    from statflow import flows

    centers = stats.centers()
    syn = flows.class_aggregate(centers, flows.one_hot(np.arange(4), 4), 1.0, 0.0)
    assert flows.cosine_distance(stats.centers(), syn) < 1e-12


def test_ablation_runs_and_traces(ident_setup):
    enc, _, stats, _ = ident_setup
    for method in ("tcdd", "ncdd"):
        cfg = DistillConfig(method=method, iterations=30, learning_rate=0.05,
                            seed=0, augment=no_aug())
        out = distill_ablation(cfg, enc, stats)
        assert out.trace.shape == (30, 2)
        assert out.trace[-1, 0] < out.trace[0, 0]


def test_lgm_analytic_full_batch_equals_sfm_at_step0(ident_setup):
    enc, ds, stats, flow = ident_setup
    per_class = int(ds.class_indices()[0].size)
    sfm_cfg = DistillConfig(method="sfm", iterations=1, seed=4, augment=no_aug())
    lgm_cfg = DistillConfig(method="lgm", lgm_w_mode="analytic", iterations=1,
                            seed=4, augment=no_aug(),
                            real_batch_per_class=per_class)
    a = distill_sfm(sfm_cfg, enc, flow)
    b = distill_lgm(lgm_cfg, enc, ds)
    assert abs(a.trace[0, 0] - b.trace[0, 0]) < 1e-5


def test_lgm_w_modes_run_and_leave_real_data_untouched(ident_setup):
    enc, ds, _, _ = ident_setup
    snapshot = ds.images.copy()
    for mode in ("random", "fixed", "analytic"):
        cfg = DistillConfig(method="lgm", lgm_w_mode=mode, iterations=10,
                            learning_rate=0.05, seed=0, real_batch_per_class=4)
        out = distill_lgm(cfg, enc, ds)
        assert out.trace.shape == (10, 2)
        assert out.provenance["w_mode"] == mode
    np.testing.assert_array_equal(ds.images, snapshot)


def test_level_schedule_on_conv_target():
    conv = load_encoder("toy-conv-32", seed=1)
    imgs = np.random.default_rng(0).uniform(0, 1, (20, 3, 32, 32)).astype(np.float32)
    ds = Dataset(imgs, np.repeat(np.arange(2), 10), 2)
    stats = compute_class_statistics(conv, ds)
    flow = build_statistical_flow(stats)
    cfg = DistillConfig(method="sfm", iterations=5, level_interval=2, seed=0)
    out = distill_sfm(cfg, conv, flow)
    # levels appear at steps 2 and 4: 8 -> 16 -> 32
    assert [lv.shape[-1] for lv in out.pyramids[0].levels] == [8, 16, 32]


def test_plateau_early_stop(ident_setup):
    enc, _, _, flow = ident_setup
    cfg = DistillConfig(method="sfm", iterations=5000, learning_rate=0.1,
                        seed=0, augment=no_aug(), plateau_patience=25,
                        plateau_tol=1e-4)
    out = distill_sfm(cfg, enc, flow)
    assert len(out.trace) < 5000


def test_save_load_round_trip(tmp_path, ident_setup):
    enc, _, _, flow = ident_setup
    cfg = DistillConfig(method="sfm", iterations=20, learning_rate=0.05, seed=2)
    out = distill_sfm(cfg, enc, flow)
    d = str(tmp_path / "syn")
    out.save(d)
    loaded = SyntheticDataset.load(d)
    np.testing.assert_array_equal(loaded.labels, out.labels)
    for a, b in zip(loaded.pyramids, out.pyramids):
        assert len(a.levels) == len(b.levels)
        for la, lb in zip(a.levels, b.levels):
            np.testing.assert_array_equal(la, lb)
    np.testing.assert_allclose(loaded.trace, out.trace, rtol=1e-15)
    assert loaded.provenance["config_fingerprint"] == cfg.fingerprint()
    assert (tmp_path / "syn" / "trace.csv").exists()


def test_save_writes_pngs_for_rgb_pyramids(tmp_path):
    conv = load_encoder("toy-conv-32", seed=1)
    imgs = np.random.default_rng(0).uniform(0, 1, (20, 3, 32, 32)).astype(np.float32)
    ds = Dataset(imgs, np.repeat(np.arange(2), 10), 2)
    flow = build_statistical_flow(compute_class_statistics(conv, ds))
    out = distill_sfm(DistillConfig(method="sfm", iterations=2, seed=0), conv, flow)
    out.save(str(tmp_path / "syn"))
    assert (tmp_path / "syn" / "images" / "class_000.png").exists()
    assert (tmp_path / "syn" / "images" / "class_001.png").exists()


def test_labels_cover_classes(ident_setup):
    enc, _, _, flow = ident_setup
    out = distill_sfm(DistillConfig(method="sfm", iterations=1, seed=0), enc, flow)
    assert sorted(out.labels.tolist()) == [0, 1, 2, 3]
    with pytest.raises(ValidationError):
        SyntheticDataset(pyramids=out.pyramids, labels=np.zeros(4, np.int64),
                         provenance={})
