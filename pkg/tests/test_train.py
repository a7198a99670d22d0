"""Losses, schedule, clipping, optimizer, and the fit loop."""

import math

import numpy as np
import pytest

from bridgeflow import tensor as T
from bridgeflow.nets import GATConfig, HeadConfig, MLPConfig, TrafficNet
from bridgeflow.train import (
    AdamW,
    TrainConfig,
    TrainReport,
    UncertaintyState,
    clip_gradients,
    evaluate_mse,
    fit,
    global_grad_norm,
    lr_at,
    mae_loss,
    mse_loss,
    per_category_mse,
    uncertainty_loss,
)

CFG = TrainConfig()


# ---------------------------------------------------------------- losses

def test_losses_zero_on_perfect_prediction():
    y = np.random.default_rng(0).normal(size=(6, 4))
    assert mse_loss(y, y) == 0.0
    assert mae_loss(y, y) == 0.0


def test_losses_constant_error():
    y = np.zeros((5, 4))
    pred = y + 1.5
    assert mse_loss(y, pred) == pytest.approx(2.25, abs=1e-15)
    assert mae_loss(y, pred) == pytest.approx(1.5, abs=1e-15)


def test_losses_match_loop_oracle():
    rng = np.random.default_rng(1)
    y, p = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    se = ae = 0.0
    for i in range(7):
        for k in range(4):
            se += (p[i, k] - y[i, k]) ** 2
            ae += abs(p[i, k] - y[i, k])
    assert mse_loss(y, p) == pytest.approx(se / 28, abs=1e-12)
    assert mae_loss(y, p) == pytest.approx(ae / 28, abs=1e-12)


def test_uncertainty_loss_s_zero_is_half_sum_mse():
    rng = np.random.default_rng(2)
    y, p = rng.normal(size=(9, 4)), rng.normal(size=(9, 4))
    state = UncertaintyState()
    loss = uncertainty_loss(y, T.constant(p), state).item()
    expected = 0.5 * per_category_mse(y, p).sum()
    assert abs(loss - expected) <= 1e-12


def test_uncertainty_loss_perfect_prediction_zero():
    y = np.random.default_rng(3).normal(size=(4, 4))
    state = UncertaintyState()
    assert uncertainty_loss(y, T.constant(y.copy()), state).item() == 0.0


def test_uncertainty_loss_optimal_s_matches_stationarity():
    """For fixed residuals the minimizing s_k satisfies exp(s_k) = mse_k / 2."""
    from scipy.optimize import minimize_scalar

    rng = np.random.default_rng(4)
    y = rng.normal(size=(50, 4))
    p = y + rng.normal(size=(50, 4)) * np.array([0.5, 1.0, 2.0, 4.0])
    mse_k = per_category_mse(y, p)
    for k in range(4):
        res = minimize_scalar(
            lambda s, m=mse_k[k]: 0.5 * math.exp(-s) * m + s,
            bounds=(-20, 20), method="bounded",
            options={"xatol": 1e-10},
        )
        assert res.x == pytest.approx(math.log(mse_k[k] / 2.0), abs=1e-6)


def test_uncertainty_loss_gradient_flows_to_s():
    rng = np.random.default_rng(5)
    y = rng.normal(size=(8, 4))
    p = T.parameter(rng.normal(size=(8, 4)))
    state = UncertaintyState()
    loss = uncertainty_loss(y, p, state)
    T.backward(loss)
    # dL/ds_k = -0.5 exp(-s) mse_k + 1, with s = 0.
    expected = -0.5 * per_category_mse(y, p.data) + 1.0
    np.testing.assert_allclose(state.s.grad, expected, atol=1e-12)
    assert p.grad is not None and np.any(p.grad != 0)


def test_uncertainty_loss_shape_check():
    state = UncertaintyState()
    with pytest.raises(T.ShapeMismatch):
        uncertainty_loss(np.zeros((3, 4)), T.constant(np.zeros((4, 4))), state)


# ---------------------------------------------------------------- schedule

def test_lr_warmup_and_peak_exact():
    assert lr_at(0, CFG) == pytest.approx(0.005 / 30, abs=1e-18)
    for e in range(29):
        assert lr_at(e, CFG) < lr_at(e + 1, CFG)
    assert lr_at(30, CFG) == 0.005  # exact at the warmup/cosine boundary
    assert lr_at(29, CFG) == pytest.approx(0.005, abs=1e-15)


def test_lr_cosine_floor_and_restart():
    assert lr_at(130, CFG) == pytest.approx(1e-7, abs=1e-20)
    assert lr_at(131, CFG) > 0.99 * CFG.peak_lr
    assert lr_at(131, CFG) < CFG.peak_lr
    assert lr_at(230, CFG) == pytest.approx(1e-7, abs=1e-20)  # second cycle floor
    # Monotone decay within a cycle.
    values = [lr_at(e, CFG) for e in range(30, 131)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_lr_continuity_within_segments():
    # Adjacent epochs inside the cosine segment differ by a bounded step.
    for e in range(31, 130):
        assert abs(lr_at(e, CFG) - lr_at(e + 1, CFG)) < 0.005 * math.pi / 100


def test_lr_rejects_negative_epoch():
    with pytest.raises(ValueError):
        lr_at(-1, CFG)


# ---------------------------------------------------------------- clipping

def test_clip_identity_below_threshold():
    g = [np.array([0.6, 0.8])]  # norm 1
    before = g[0].copy()
    clip_gradients(g, 5.0)
    np.testing.assert_array_equal(g[0], before)


def test_clip_scales_to_exact_norm():
    g = [np.array([6.0, 8.0])]  # norm 10
    clip_gradients(g, 5.0)
    assert global_grad_norm(g) == pytest.approx(5.0, abs=1e-12)
    np.testing.assert_allclose(g[0], [3.0, 4.0], atol=1e-12)


def test_clip_preserves_direction_and_never_grows():
    rng = np.random.default_rng(6)
    for _ in range(20):
        g = [rng.normal(size=s) * 3 for s in [(3,), (2, 2), (4,)]]
        flat_before = np.concatenate([x.ravel() for x in g])
        norm_before = global_grad_norm(g)
        clip_gradients(g, 5.0)
        flat_after = np.concatenate([x.ravel() for x in g])
        norm_after = global_grad_norm(g)
        assert norm_after <= max(norm_before, 5.0) + 1e-12
        cos = flat_before @ flat_after / (
            np.linalg.norm(flat_before) * np.linalg.norm(flat_after)
        )
        assert cos == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------- optimizer

def test_adamw_first_step_matches_hand_formula():
    p = T.parameter([2.0])
    p.grad = np.array([0.5])
    cfg = TrainConfig()
    opt = AdamW({"w": p}, cfg, no_decay=frozenset())
    opt.step(0.01)
    g = 0.5
    update = g / (abs(g) + cfg.eps) + cfg.weight_decay * 2.0
    assert p.data[0] == pytest.approx(2.0 - 0.01 * update, abs=1e-12)


def test_adamw_no_decay_exemption():
    s = T.parameter([1.0, -1.0])
    s.grad = np.zeros(2)
    opt = AdamW({"uncertainty.s": s}, TrainConfig())
    opt.step(0.1)
    np.testing.assert_array_equal(s.data, [1.0, -1.0])  # zero grad, no decay
    w = T.parameter([1.0])
    w.grad = np.zeros(1)
    opt2 = AdamW({"w": w}, TrainConfig())
    opt2.step(0.1)
    assert w.data[0] == pytest.approx(1.0 - 0.1 * 0.01 * 1.0)  # decay applies


# ---------------------------------------------------------------- fit loop

def tiny_model(seed=0, dropout=0.0):
    return TrafficNet(
        "fe_mlp", n_nodes=4, channels=1, window_len=20, seed=seed,
        gat=GATConfig(heads=2, head_dim=2, f_out=4),
        head=HeadConfig(hidden=4),
        mlp=MLPConfig(hidden=(8,), dropout=dropout),
    )


def toy_data(n=32, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4, 1, 20))
    y = np.tile(np.array([1.0, 2.0, 0.5, 3.0]), (n, 1))
    return x, y


def test_fit_loss_decreases_on_learnable_target():
    x, y = toy_data(48, seed=7)
    cfg = TrainConfig(batch_size=16, max_epochs=8, patience=50,
                      peak_lr=0.01, warmup_epochs=5)
    report = fit(tiny_model(seed=1), (x, y), (x.copy(), y.copy()), cfg, seed=3)
    assert len(report.train_loss) == 8
    for a, b in zip(report.train_loss[:5], report.train_loss[1:6]):
        assert b < a
    assert report.best_epoch >= 0


def test_fit_reduces_validation_mse_within_30_epochs():
    x, y = toy_data(64, seed=8)
    x_val, y_val = toy_data(32, seed=9)
    model = tiny_model(seed=2)
    before = evaluate_mse(model, x_val, y_val)["mse"]
    cfg = TrainConfig(batch_size=32, max_epochs=30, patience=50,
                      peak_lr=0.01, warmup_epochs=5)
    fit(model, (x, y), (x_val, y_val), cfg, seed=4)
    after = evaluate_mse(model, x_val, y_val)["mse"]
    assert after <= 0.5 * before


def test_fit_deterministic_per_seed():
    x, y = toy_data(32, seed=10)
    cfg = TrainConfig(batch_size=16, max_epochs=4, patience=50,
                      augment_variance=0.01)
    r1 = fit(tiny_model(seed=5, dropout=0.2), (x, y), (x, y), cfg, seed=6)
    r2 = fit(tiny_model(seed=5, dropout=0.2), (x, y), (x, y), cfg, seed=6)
    assert r1.train_loss == r2.train_loss
    assert r1.val_loss == r2.val_loss
    r3 = fit(tiny_model(seed=5, dropout=0.2), (x, y), (x, y), cfg, seed=7)
    assert r1.train_loss != r3.train_loss


def test_fit_patience_zero_stops_at_first_non_improvement():
    x, y = toy_data(24, seed=11)
    cfg = TrainConfig(batch_size=8, max_epochs=50, patience=0)
    report = fit(tiny_model(seed=8), (x, y), (x, y), cfg, seed=9)
    n = len(report.val_loss)
    assert n < 50
    # Every epoch but the last strictly improved on the best so far.
    best = math.inf
    for i, v in enumerate(report.val_loss):
        if i < n - 1:
            assert v < best
            best = v
        else:
            assert v >= best


def test_fit_restores_best_checkpoint(tmp_path):
    x, y = toy_data(32, seed=12)
    model = tiny_model(seed=10)
    cfg = TrainConfig(batch_size=16, max_epochs=6, patience=50, peak_lr=0.02,
                      warmup_epochs=2)
    path = tmp_path / "best.ckpt"
    report = fit(model, (x, y), (x, y), cfg, seed=11, checkpoint_path=path)
    # The in-memory model equals the stored best checkpoint.
    restored, meta = TrafficNet.load(path)
    for name, p in model.parameters().items():
        np.testing.assert_array_equal(p.data, restored.parameters()[name].data)
    assert meta["best_epoch"] == report.best_epoch
    # And its validation loss reproduces the reported best.
    s = np.asarray(meta["uncertainty_s"])
    val_pred = model.forward(x).data
    mse_k = per_category_mse(y, val_pred)
    val = float(np.sum(0.5 * np.exp(-s) * mse_k + s))
    assert val == pytest.approx(report.best_val_loss, rel=1e-12)


@pytest.mark.filterwarnings("ignore:overflow*:RuntimeWarning")
def test_fit_divergence_flagged_and_model_finite():
    x, y = toy_data(16, seed=13)
    cfg = TrainConfig(batch_size=8, max_epochs=20, patience=50, peak_lr=1e9,
                      warmup_epochs=1, clip_norm=1e12)
    model = tiny_model(seed=12)
    report = fit(model, (x, y), (x, y), cfg, seed=13)
    assert report.diverged
    for p in model.parameters().values():
        assert np.all(np.isfinite(p.data))


def test_fit_rejects_bad_config_and_data():
    x, y = toy_data(8, seed=14)
    with pytest.raises(ValueError):
        fit(tiny_model(), (x, y), (x, y), TrainConfig(batch_size=0))
    with pytest.raises(ValueError):
        fit(tiny_model(), (x, y[:4]), (x, y), TrainConfig())
    with pytest.raises(ValueError):
        fit(tiny_model(), (np.zeros((0, 4, 1, 20)), np.zeros((0, 4))), (x, y),
            TrainConfig())


def test_report_round_trip(tmp_path):
    report = TrainReport(train_loss=[1.0, 0.5], val_loss=[1.1, 0.6],
                         val_mse_per_category=[[1, 1, 1, 1]], s_trace=[[0, 0, 0, 0]],
                         lr_trace=[0.001], best_epoch=1, best_val_loss=0.6,
                         stopped_epoch=1)
    path = tmp_path / "report.json"
    report.save(path)
    from bridgeflow.io import read_json

    assert TrainReport.from_dict(read_json(path)).to_dict() == report.to_dict()
