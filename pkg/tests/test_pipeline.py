import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gemgaze import tensorcore as tc
from gemgaze.pipeline import (
    BOS,
    CLASS_TOKEN0,
    EOS,
    PAD,
    AdamW,
    GEMModel,
    NonFiniteLossError,
    TrainConfig,
    blob_radius,
    fit_gaze_count,
    gaze_metrics,
    make_split,
    masked_mse,
    stack,
    synth_sample,
    total_loss,
    train_epoch,
)
from gemgaze.tensorcore import ParamStore, Tensor

TINY = dict(
    image_size=48, stage_channels=(2, 2, 2, 2), c1=2, c2=2, c3=2, text_dim=4,
    fusion_width=2, model_dim=4, node_dim=4, heads=2, k=3,
)


def brute_metrics(pred, gt, valid):
    """Naive per-point loops; shares no code with gaze_metrics."""
    sq = ab = 0.0
    hits = {0.2: 0, 0.3: 0, 0.4: 0}
    n_pts = 0
    for b in range(len(gt)):
        for i in range(len(gt[b])):
            if not valid[b][i]:
                continue
            n_pts += 1
            dx = pred[b][i][0] - gt[b][i][0]
            dy = pred[b][i][1] - gt[b][i][1]
            sq += dx * dx + dy * dy
            ab += abs(dx) + abs(dy)
            d = math.hypot(dx, dy)
            for t in hits:
                if d <= t:
                    hits[t] += 1
    return {
        "mse": sq / (2 * n_pts),
        "mae": ab / (2 * n_pts),
        "pck02": 100.0 * hits[0.2] / n_pts,
        "pck03": 100.0 * hits[0.3] / n_pts,
        "pck04": 100.0 * hits[0.4] / n_pts,
    }


# -- synthetic task -----------------------------------------------------------------
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_synth_sample_construction(seed):
    cfg = TrainConfig(image_size=64)
    s = synth_sample(np.random.default_rng(seed), cfg)
    assert s.image.shape == (64, 64)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert s.tokens.tolist() == [BOS, CLASS_TOKEN0 + s.meta["cls"], EOS, PAD]
    assert s.meta["cls"] != s.meta["other_cls"]
    np.testing.assert_array_equal(s.gaze[0], s.meta["center"])
    sep = np.linalg.norm(np.subtract(s.meta["center"], s.meta["other_center"]))
    assert sep >= 0.3
    assert s.gaze.shape == (cfg.k, 2) and s.valid.all()
    assert s.gaze.min() >= 0.0 and s.gaze.max() <= 1.0


def test_synth_sample_deterministic():
    cfg = TrainConfig(image_size=64)
    a = synth_sample(np.random.default_rng([7, 0, 3]), cfg)
    b = synth_sample(np.random.default_rng([7, 0, 3]), cfg)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.gaze, b.gaze)
    assert a.meta == b.meta


def test_splits_are_disjoint_streams():
    cfg = TrainConfig(image_size=64)
    tr = make_split(cfg, "train", 3)
    va = make_split(cfg, "val", 3)
    assert not np.array_equal(tr[0].image, va[0].image)
    # prefix property: a longer split starts with the shorter one
    np.testing.assert_array_equal(make_split(cfg, "train", 5)[2].image, tr[2].image)


def test_satellite_spread_matches_sigma():
    cfg = TrainConfig(image_size=64)
    offsets = []
    for s in make_split(cfg, "train", 300):
        c = np.asarray(s.meta["center"])
        offsets.append(s.gaze[1:] - c)
    off = np.concatenate(offsets)
    # centers sit >= 0.1 from the border, so clamping at 0/1 (2.5 sigma) is rare
    assert abs(off.std() - 0.04) < 0.003
    assert abs(off.mean()) < 0.003


def test_blob_peak_at_target_center():
    cfg = TrainConfig(image_size=128)
    s = synth_sample(np.random.default_rng(5), cfg)
    cx, cy = s.meta["center"]
    r, c = int(cy * 128), int(cx * 128)
    assert s.image[r, c] >= 0.8
    assert blob_radius(0) == 4 and blob_radius(3) == 10


def test_fit_gaze_count():
    pts = np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
    np.testing.assert_array_equal(fit_gaze_count(pts, 2, np.random.default_rng(0)), pts[:2])
    up = fit_gaze_count(pts, 7, np.random.default_rng(0))
    assert up.shape == (7, 2)
    np.testing.assert_array_equal(up[:3], pts)
    assert all(any(np.array_equal(row, p) for p in pts) for row in up)
    with pytest.raises(ValueError):
        fit_gaze_count(np.zeros((0, 2)), 3, np.random.default_rng(0))


# -- loss -----------------------------------------------------------------------------
def test_total_loss_weighted_sum():
    gt = np.full((1, 2, 2), 0.5)
    pred = Tensor(gt + 0.2)  # every coordinate off by 0.2 -> MSE 0.04
    corr = Tensor(np.array([[math.exp(-0.5), 0.0], [0.0, math.exp(-0.5)]]))  # CE 0.5
    loss, parts = total_loss(pred, gt, np.ones((1, 2), bool), corr, alpha=1.0, beta=0.1)
    assert parts["mse"] == pytest.approx(0.04, abs=1e-15)
    assert parts["ce"] == pytest.approx(0.5, abs=1e-15)
    assert loss.item() == pytest.approx(0.09, abs=1e-15)


def test_total_loss_zero_at_perfect_match():
    gt = np.random.default_rng(0).uniform(size=(2, 4, 2))
    loss, _ = total_loss(Tensor(gt.copy()), gt, np.ones((2, 4), bool), Tensor(np.eye(4)), 1.0, 0.1)
    assert loss.item() == 0.0


def test_beta_zero_equals_mse_metric_exactly():
    rng = np.random.default_rng(1)
    gt = rng.uniform(size=(3, 5, 2))
    pred = rng.uniform(size=(3, 5, 2))
    valid = np.ones((3, 5), bool)
    loss, _ = total_loss(Tensor(pred), gt, valid, None, alpha=1.0, beta=0.0)
    assert loss.item() == pytest.approx(gaze_metrics(pred, gt, valid).mse, rel=1e-15)


def test_masked_mse_ignores_invalid_points():
    gt = np.zeros((1, 3, 2))
    pred = np.zeros((1, 3, 2))
    pred[0, 2] = 100.0
    valid = np.array([[True, True, False]])
    assert masked_mse(Tensor(pred), gt, valid).item() == 0.0
    with pytest.raises(ValueError, match="no valid"):
        masked_mse(Tensor(pred), gt, np.zeros((1, 3), bool))


# -- metrics ----------------------------------------------------------------------------
def test_metrics_match_brute_force_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        b, k = rng.integers(1, 6), rng.integers(2, 9)
        gt = rng.uniform(size=(b, k, 2))
        pred = np.clip(gt + rng.normal(0, 0.25, size=gt.shape), 0, 1)
        valid = rng.uniform(size=(b, k)) < 0.8
        valid[0, 0] = True
        got = gaze_metrics(pred, gt, valid).to_dict()
        want = brute_metrics(pred, gt, valid)
        for key, v in want.items():
            assert abs(got[key] - v) <= 1e-9, key
        assert got["n"] == b


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_pck_monotone_in_threshold(seed, spread):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(size=(4, 8, 2))
    pred = np.clip(gt + rng.normal(0, spread, size=gt.shape), 0, 1)
    r = gaze_metrics(pred, gt)
    assert 0 <= r.pck02 <= r.pck03 <= r.pck04 <= 100


def test_pck_inclusive_boundary():
    gt = np.array([[[0.5, 0.5]]])
    pred = np.array([[[0.5, 0.9]]])
    r = gaze_metrics(pred, gt)
    assert r.pck04 == 100.0
    assert r.pck03 == 0.0 and r.pck02 == 0.0


def test_perfect_prediction_metrics():
    gt = np.random.default_rng(3).uniform(size=(2, 8, 2))
    r = gaze_metrics(gt.copy(), gt)
    assert (r.mse, r.mae, r.pck02, r.pck03, r.pck04) == (0.0, 0.0, 100.0, 100.0, 100.0)


def test_metrics_report_schema():
    r = gaze_metrics(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))
    assert set(r.to_dict()) == {"mse", "mae", "pck02", "pck03", "pck04", "n"}


# -- optimiser ----------------------------------------------------------------------------
def _store():
    ps = ParamStore()
    ps.add("w", np.array([1.0, -2.0, 3.0]))
    return ps


def test_adamw_zero_lr_leaves_parameters():
    ps = _store()
    opt = AdamW(ps, lr=0.0, weight_decay=0.1)
    for _ in range(3):
        ps.zero_grad()
        tc.sum_(tc.square(ps["w"])).backward()
        opt.step()
    np.testing.assert_array_equal(ps["w"].data, [1.0, -2.0, 3.0])


def test_adamw_first_step_is_signed_lr():
    ps = _store()
    opt = AdamW(ps, lr=0.01)
    tc.sum_(tc.square(ps["w"])).backward()
    opt.step()
    # bias-corrected first step: m/sqrt(v) = g/|g|
    np.testing.assert_allclose(ps["w"].data, [0.99, -1.99, 2.99], rtol=0, atol=1e-9)


def test_adamw_decay_is_decoupled():
    ps = _store()
    opt = AdamW(ps, lr=0.1, weight_decay=0.5)
    ps["w"].grad = np.zeros(3)
    opt.step()
    # zero gradient: only the decay term moves the weights
    np.testing.assert_allclose(ps["w"].data, np.array([1.0, -2.0, 3.0]) * (1 - 0.05), atol=1e-12)


# -- training loop ---------------------------------------------------------------------------
def test_overfit_single_sample():
    cfg = TrainConfig(batch_size=1, seed=3)
    model = GEMModel(cfg)
    sample = make_split(cfg, "train", 1)
    opt = AdamW(model.params, cfg.lr)
    for step in range(200):
        trace = train_epoch(model, opt, sample, step)
    images, tokens, gaze, valid = stack(sample)
    mse = gaze_metrics(model.predict(images, tokens), gaze, valid).mse
    assert mse < 1e-3, (mse, trace)


def test_train_epoch_trace_deterministic():
    cfg = TrainConfig(**TINY, batch_size=4)
    data = make_split(cfg, "train", 10)
    traces = []
    for _ in range(2):
        model = GEMModel(cfg)
        opt = AdamW(model.params, cfg.lr)
        traces.append(train_epoch(model, opt, data, 0) + train_epoch(model, opt, data, 1))
    assert traces[0] == traces[1]
    assert len(traces[0]) == 6
    assert all(set(t) == {"loss", "mse", "ce"} for t in traces[0])


def test_train_epoch_names_bad_batch():
    cfg = TrainConfig(**TINY, batch_size=4)
    model = GEMModel(cfg)
    model.params["head.fc.b"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError, match="batch 0"):
        train_epoch(model, AdamW(model.params), make_split(cfg, "train", 8), 0)


def test_train_epoch_rejects_empty():
    cfg = TrainConfig(**TINY)
    model = GEMModel(cfg)
    with pytest.raises(ValueError, match="empty"):
        train_epoch(model, AdamW(model.params), [], 0)


def test_matching_loss_skipped_without_beta():
    cfg = TrainConfig(**TINY, beta=0.0)
    model = GEMModel(cfg)
    images, tokens, gaze, valid = stack(make_split(cfg, "train", 2))
    loss, parts = model.loss(images, tokens, gaze, valid)
    assert math.isnan(parts["ce"])
    assert loss.item() == parts["mse"]


def test_partially_valid_batch_matches_per_sample():
    cfg = TrainConfig(**TINY)
    model = GEMModel(cfg)
    images, tokens, gaze, valid = stack(make_split(cfg, "train", 2))
    valid = valid.copy()
    valid[1, 2] = False
    loss, parts = model.loss(images, tokens, gaze, valid)
    assert np.isfinite(loss.item()) and np.isfinite(parts["ce"])


def test_config_round_trip_and_validation():
    cfg = TrainConfig(**TINY)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    for bad in (dict(alpha=-1.0), dict(beta=-0.1), dict(batch_size=0), dict(k=1), dict(image_size=40)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    assert TrainConfig().grid == 16
