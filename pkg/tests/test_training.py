import csv
import math

import numpy as np
import pytest

from teddn import data as D
from teddn.errors import ConfigError, NumericalError
from teddn.model import ModelConfig, build
from teddn.optim import Adam
from teddn.tensor import Tensor, backward
from teddn.training import (EarlyStopping, TrainConfig, ablation_suite, ablation_table, baselines,
                            curriculum_horizon, evaluate, full_is_best, historical_average_forecast,
                            historical_average_table, loss, lr_schedule, metrics, persistence_forecast, predict,
                            predict_tensor, target_array, train)


def brute_metrics(pred, target, threshold):
    """Scalar-loop reference: per-horizon and pooled MAE, RMSE, masked MAPE (percent)."""
    B, H = pred.shape[:2]
    rest = int(np.prod(pred.shape[2:]))
    p = pred.reshape(B, H, rest)
    y = target.reshape(B, H, rest)
    rows = []
    tot = [0.0, 0.0, 0.0, 0, 0]
    for h in range(H):
        s_abs = s_sq = s_ape = 0.0
        n = m = 0
        for b in range(B):
            for k in range(rest):
                e = p[b, h, k] - y[b, h, k]
                s_abs += abs(e)
                s_sq += e * e
                n += 1
                if abs(y[b, h, k]) > threshold:
                    s_ape += abs(e) / abs(y[b, h, k])
                    m += 1
        rows.append((s_abs / n, math.sqrt(s_sq / n), 100 * s_ape / m if m else None))
        for i, v in enumerate((s_abs, s_sq, s_ape, n, m)):
            tot[i] += v
    avg = (tot[0] / tot[3], math.sqrt(tot[1] / tot[3]), 100 * tot[2] / tot[4] if tot[4] else None)
    return rows, avg


def close(a, b, tol=1e-10):
    if a is None or b is None:
        return a is None and b is None
    return abs(a - b) <= tol * max(1.0, abs(b))


# ---------------------------------------------------------------- loss


def test_loss_values():
    y = np.random.default_rng(0).normal(size=(2, 4, 3, 1))
    assert loss(Tensor(y), y, 4).item() == 0.0
    assert abs(loss(Tensor(y + 1), y, 2).item() - 1.0) < 1e-12
    noisy = y.copy()
    noisy[:, 1:] += 100
    assert loss(Tensor(noisy), y, 1).item() == 0.0
    with pytest.raises(ConfigError):
        loss(Tensor(y), y, 5)
    with pytest.raises(ConfigError):
        loss(Tensor(y), y, 0)


# ---------------------------------------------------------------- metrics


def test_metrics_perfect_and_single():
    y = np.full((1, 1, 1), 100.0)
    r = metrics(y, y)
    assert (r.mae, r.rmse, r.mape) == (0.0, 0.0, 0.0)
    r = metrics(np.full((1, 1, 1), 110.0), y)
    assert (r.mae, r.rmse) == (10.0, 10.0) and abs(r.mape - 10.0) < 1e-12


def test_metrics_zero_target_masked():
    target = np.array([[[0.0], [50.0]]]).reshape(1, 1, 2)
    pred = np.array([[[3.0], [45.0]]]).reshape(1, 1, 2)
    r = metrics(pred, target)
    assert r.mae == 4.0
    assert abs(r.rmse - math.sqrt((9 + 25) / 2)) < 1e-12
    assert abs(r.mape - 10.0) < 1e-12


def test_metrics_all_masked():
    r = metrics(np.ones((2, 3, 2)), np.zeros((2, 3, 2)))
    assert r.mape is None and r.mae == 1.0
    assert all(h.mape is None for h in r.horizons)


@pytest.mark.parametrize("seed", range(100))
def test_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 3)))
    target = rng.uniform(-50, 200, size=shape)
    target[rng.uniform(size=shape) < 0.2] = 0.0
    pred = target + rng.normal(scale=rng.uniform(0.1, 30), size=shape)
    r = metrics(pred, target, 1.0)
    rows, avg = brute_metrics(pred, target, 1.0)
    for h, (mae, rmse, mape) in zip(r.horizons, rows):
        assert close(h.mae, mae) and close(h.rmse, rmse) and close(h.mape, mape)
    assert close(r.mae, avg[0]) and close(r.rmse, avg[1]) and close(r.mape, avg[2])
    assert r.rmse >= r.mae >= 0


def test_metric_scaling():
    rng = np.random.default_rng(1)
    y = rng.uniform(10, 100, size=(3, 4, 5))
    p = y + rng.normal(size=y.shape)
    a, b = metrics(p, y), metrics(7 * p, 7 * y)
    assert abs(b.mae - 7 * a.mae) < 1e-9 and abs(b.rmse - 7 * a.rmse) < 1e-9 and abs(b.mape - a.mape) < 1e-9


# ---------------------------------------------------------------- schedules


def test_curriculum_values():
    cfg = TrainConfig()
    assert [curriculum_horizon(e, cfg) for e in (0, 29, 30, 33, 63, 500)] == [1, 1, 1, 2, 12, 12]
    hs = [curriculum_horizon(e, cfg) for e in range(200)]
    assert hs == sorted(hs) and hs[-1] == 12


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_schedule(50, [10.0 - 0.1 * i for i in range(50)], cfg) == 0.002
    flat = [5.0] * 11
    assert lr_schedule(10, flat, cfg) == 0.002
    assert lr_schedule(11, flat, cfg) == 0.001
    assert lr_schedule(2000, [5.0] * 2000, cfg) == 1e-6


def test_early_stopping_semantics():
    es = EarlyStopping(3)
    out = [es.update(e, v) for e, v in enumerate([5, 4, 4, 4, 4])]
    assert out == [(True, False), (True, False), (False, False), (False, False), (False, True)]
    assert es.best_epoch == 1


def test_train_config_strict():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


# ---------------------------------------------------------------- training loop


def tiny_setup(steps=2, seed=0, **model_kw):
    series = D.synthetic_sinusoid(200, 2, 24)
    data = D.prepare(series, steps, steps)
    kw = dict(num_nodes=2, input_steps=steps, output_steps=steps, steps_per_day=24, d_t=4, d_n=4, d_h=4,
              reduction_ratio=2, dtype="float64")
    kw.update(model_kw)
    return data, build(ModelConfig(**kw), seed)


def test_early_stop_at_best_plus_patience():
    data, model = tiny_setup()
    cfg = TrainConfig(max_horizon=2, batch_size=256, patience=100, max_epochs=1000, warmup_epochs=0)
    vals = [10.0, 9.0, 8.0, 7.5, 7.0, 6.9]
    result = train(model, data, cfg, val_fn=lambda e, m: vals[e] if e < len(vals) else 6.9)
    assert result.best_epoch == 5
    assert result.log[-1].epoch == 5 + 100
    assert result.epochs_run == 106


def test_restores_best_parameters():
    data, model = tiny_setup()
    cfg = TrainConfig(max_horizon=2, batch_size=256, patience=100, max_epochs=6, warmup_epochs=0)
    snaps = {}

    def val(epoch, m):
        snaps[epoch] = m.checksum()
        return [3.0, 1.0, 2.0, 2.0, 2.0, 2.0][epoch]

    result = train(model, data, cfg, val_fn=val)
    assert result.best_epoch == 1
    assert model.checksum() == snaps[1]


def test_checkpoints_never_regress(tmp_path):
    data, model = tiny_setup()
    cfg = TrainConfig(max_horizon=2, batch_size=64, max_epochs=8, warmup_epochs=0)
    result = train(model, data, cfg, out_dir=tmp_path)
    best = math.inf
    for r in result.log:
        if r.val_mae < best:
            best = r.val_mae
    assert result.best_val_mae == best
    assert (tmp_path / "best.ckpt").exists()


def test_nan_abort_names_stage():
    data, model = tiny_setup()
    model.streams[1].graph.e1.data[0, 0] = np.nan
    with pytest.raises(NumericalError, match="stream1.graph.e1"):
        train(model, data, TrainConfig(max_horizon=2, max_epochs=2))
    data, model = tiny_setup()
    model.head.proj.data *= 1e300
    with pytest.raises(NumericalError, match="first bad stage"):
        train(model, data, TrainConfig(max_horizon=2, max_epochs=2, lr=1e300))


def test_nan_forward_stage_is_located():
    data, model = tiny_setup()
    data.train.normalized[5, 0, 0] = np.inf
    with pytest.raises(NumericalError, match="forward stage 'input'"):
        train(model, data, TrainConfig(max_horizon=2, max_epochs=1))


def test_horizon_mismatch():
    data, model = tiny_setup()
    with pytest.raises(ConfigError):
        train(model, data, TrainConfig(max_horizon=12))


def test_deterministic_logs_and_checkpoints(tmp_path):
    cfg = TrainConfig(max_horizon=2, batch_size=16, max_epochs=4, warmup_epochs=1, curriculum_step=1)
    for run in ("a", "b"):
        data, model = tiny_setup(dtype="float32")
        train(model, data, cfg, out_dir=tmp_path / run)
    for name in ("epoch_log.csv", "best.ckpt", "metrics.csv", "metrics.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    rows = list(csv.reader(open(tmp_path / "a" / "epoch_log.csv")))
    assert rows[0] == ["epoch", "lr", "horizon", "train_loss", "val_mae"]
    assert [r[2] for r in rows[1:]] == ["1", "1", "2", "2"]


def test_final_report_matches_evaluate(tmp_path):
    data, model = tiny_setup()
    result = train(model, data, TrainConfig(max_horizon=2, batch_size=64, max_epochs=3), out_dir=tmp_path)
    again = evaluate(model, data.test, data.stats)
    assert again.mae == result.test.mae and again.rmse == result.test.rmse


def test_predict_is_raw_scale_and_zero_head():
    data, model = tiny_setup()
    model.head.proj.data[:] = 0
    pred = predict(model, data.test, data.stats)
    assert pred.shape == (len(data.test), 2, 2, 1)
    np.testing.assert_allclose(pred, data.stats.mean[0])


def fixed_batch_losses(seed, steps=5):
    series = D.synthetic_traffic(600, 8, steps_per_day=48, seed=seed)
    data = D.prepare(series, 12, 12)
    model = build(ModelConfig(num_nodes=8, steps_per_day=48, d_t=8, d_n=8, d_h=16, hops=2), seed)
    batch = data.train.batch(data.train.starts[:32], dtype=np.float32)
    opt = Adam(model.parameters(), lr=1e-3)
    values = []
    for _ in range(steps + 1):
        opt.zero_grad()
        value = loss(predict_tensor(model, batch, data.stats), batch.targets, 12)
        values.append(value.item())
        backward(value)
        opt.step()
    return values


def test_fixed_batch_loss_decreases():
    decreasing = 0
    for seed in range(10):
        values = fixed_batch_losses(seed)
        decreasing += all(b < a for a, b in zip(values, values[1:]))
    assert decreasing >= 9, decreasing


# ---------------------------------------------------------------- baselines and ablation


def series_data(values, spd=24, steps=3):
    return D.prepare(D.TrafficSeries(values, spd, 0), steps, steps)


def test_constant_series_baselines():
    reports = baselines(series_data(np.full((200, 3), 42.0)))
    assert reports["persistence"].mae == 0 and reports["historical_average"].mae == 0


def test_periodic_series_baselines():
    reports = baselines(series_data(D.synthetic_sinusoid(240, 3, 24).values))
    assert reports["historical_average"].mae < 1e-9
    assert reports["persistence"].mae > 1


def test_random_walk_prefers_persistence():
    rng = np.random.default_rng(0)
    walk = 500 + np.cumsum(rng.normal(size=(2000, 4)), axis=0)
    reports = baselines(series_data(walk, spd=48))
    assert reports["persistence"].mae < reports["historical_average"].mae


def test_baseline_forecast_shapes():
    data = series_data(D.synthetic_sinusoid(240, 3, 24).values)
    assert persistence_forecast(data.test).shape == target_array(data.test).shape
    table = historical_average_table(data.train)
    assert table.shape == (24, 3, 1)
    assert historical_average_forecast(data.test, table).shape == target_array(data.test).shape


def test_ablation_table_shape(tmp_path):
    data, _ = tiny_setup(steps=12)
    cfg = ModelConfig(num_nodes=2, steps_per_day=24, d_t=4, d_n=4, d_h=4, reduction_ratio=2)
    tc = TrainConfig(max_epochs=2, batch_size=64)
    rows = ablation_suite(data, cfg, tc, out_dir=tmp_path)
    table = ablation_table(rows)
    assert len(table) == 4 * 4
    assert [r[0] for r in table[::4]] == ["full", "w/o TE", "w/o DG", "w/o GRU"]
    assert [r[1] for r in table[:4]] == [3, 6, 12, "avg"]
    assert isinstance(full_is_best(rows), bool)
    first = (tmp_path / "ablation.csv").read_bytes()
    ablation_suite(data, cfg, tc, out_dir=tmp_path / "again")
    assert (tmp_path / "again" / "ablation.csv").read_bytes() == first
    same = ablation_suite(data, cfg, tc, variants=("full", "full"))
    assert ablation_table(same)[:4] == ablation_table(same)[4:]


def test_desk_config_beats_baselines_on_synthetic_traffic():
    # stand-in for the real-data desk run: same reduced model, shorter synthetic series
    data = D.prepare(D.synthetic_traffic(2016, 8, steps_per_day=96, seed=0), 12, 12)
    model = build(ModelConfig(num_nodes=8, steps_per_day=96, d_t=8, d_n=8, d_h=16, hops=2), 0)
    result = train(model, data, TrainConfig(max_epochs=30, warmup_epochs=3, curriculum_step=1))
    reports = baselines(data)
    assert result.test.mae < reports["historical_average"].mae
    assert result.test.mae < reports["persistence"].mae
