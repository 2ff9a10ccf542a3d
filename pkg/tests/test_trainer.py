import math

import numpy as np
import pytest

from conftest import tiny_config, toy_manifest
from topdown_iqa import numerics as nx
from topdown_iqa.data import DistRecord, Manifest, MosRecord, TwoAFCRecord, make_texture
from topdown_iqa.exceptions import ArgumentError, NumericError
from topdown_iqa.layers import Parameter
from topdown_iqa.model import CFANet
from topdown_iqa.trainer import AdamW, TrainConfig, TrainLog, cosine_lr, evaluate, predict_record, train

FAST = dict(batch_size=4, max_epochs=3, patience=5, seed=0, lr=1e-3)


@pytest.fixture(scope="module")
def small_set():
    return toy_manifest(size=32, sigmas=np.linspace(0, 0.3, 6))


def test_cosine_schedule():
    assert cosine_lr(0, 1e-4) == 1e-4
    assert cosine_lr(50, 1e-4, 1e-6) == pytest.approx(1e-4)  # restart
    assert cosine_lr(49, 1.0, 0.0, t_max=50) == pytest.approx(0.5 * (1 + math.cos(math.pi * 49 / 50)))
    assert cosine_lr(25, 1.0, 0.2) == pytest.approx(0.6)
    assert cosine_lr(50, 1.0, 0.2, restart=False) == 0.2
    assert cosine_lr(120, 1.0, 0.2, restart=False) == 0.2
    with pytest.raises(ArgumentError):
        cosine_lr(-1, 1.0)


def test_train_config_validation():
    assert TrainConfig().base_lr("FR") == 1e-4 and TrainConfig().base_lr("NR") == 3e-5
    for bad in (dict(lr=1e-4, eta_min=1e-3), dict(patience=0), dict(batch_size=0)):
        with pytest.raises(ArgumentError):
            TrainConfig(**bad)
    cfg = TrainConfig.from_dict({"crop": [16, 16], "unknown": 1})
    assert cfg.crop == (16, 16)


def test_zero_lr_step_changes_nothing(rng):
    p = Parameter(rng.standard_normal((3, 3)))
    before = p.data.copy()
    opt = AdamW([p], lr=0.0, weight_decay=0.0)
    p.grad = rng.standard_normal((3, 3))
    opt.step()
    assert np.array_equal(p.data, before)


def test_weight_decay_factor(rng):
    p = Parameter(rng.standard_normal(4), dtype=np.float64)
    b = Parameter(rng.standard_normal(4), decay=False, dtype=np.float64)
    p0, b0 = p.data.copy(), b.data.copy()
    opt = AdamW([p, b], lr=0.1, weight_decay=0.5)
    p.grad, b.grad = np.zeros(4), np.zeros(4)
    opt.step()
    np.testing.assert_allclose(p.data, p0 * (1 - 0.05), rtol=1e-15)
    assert np.array_equal(b.data, b0)


def test_adamw_first_step_is_sign_step(rng):
    p = Parameter(np.zeros(3), dtype=np.float64)
    opt = AdamW([p], lr=0.01, weight_decay=0.0)
    p.grad = np.array([2.0, -0.5, 0.0])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.01, 0.01, 0.0], atol=1e-9)


def test_decay_excludes_biases_and_position_encoding():
    for name, p in CFANet(tiny_config()).named_parameters():
        assert p.decay == (not (name.endswith("bias") or name.startswith("pos."))), name


def test_constant_model_stops_after_two_epochs(small_set):
    model = CFANet(tiny_config())
    model.head.fc2.weight.data[...] = 0
    _, log = train(model, small_set, small_set, TrainConfig(**{**FAST, "lr": 0.0, "patience": 1, "max_epochs": 10}))
    assert len(log.epochs) == 2 and log.stopped_early and log.best_epoch == 0
    assert math.isnan(log.epochs[0]["val_srcc"])


def test_training_is_deterministic(small_set):
    logs = []
    for _ in range(2):
        _, log = train(CFANet(tiny_config()), small_set, small_set, TrainConfig(**FAST))
        logs.append(log.to_csv())
    assert logs[0] == logs[1]
    assert logs[0].startswith("epoch,train_loss,val_plcc,val_srcc,lr,best_srcc\n")


def test_best_checkpoint_is_restored(small_set):
    model = CFANet(tiny_config())
    ckpt, log = train(model, small_set, small_set, TrainConfig(**FAST))
    assert ckpt.meta["mos_stats"] == [0.0, 1.0]
    for name, p in model.named_parameters():
        assert np.array_equal(p.data, ckpt.params[name])
    best = [row["best_srcc"] for row in log.epochs]
    assert all(b >= a for a, b in zip(best, best[1:]) if not math.isnan(a))


def test_training_reduces_loss(small_set):
    _, log = train(CFANet(tiny_config()), small_set, small_set, TrainConfig(**{**FAST, "max_epochs": 8, "lr": 3e-3}))
    assert log.epochs[-1]["train_loss"] < log.epochs[0]["train_loss"]


def test_train_kind_errors(small_set):
    nr = CFANet(tiny_config(mode="NR"))
    with pytest.raises(ArgumentError):
        train(nr, small_set, small_set, TrainConfig(**FAST))
    with pytest.raises(ArgumentError):
        train(CFANet(tiny_config()), small_set, Manifest("mos-fr", []), TrainConfig(**FAST))


def test_non_finite_loss_aborts(small_set):
    model = CFANet(tiny_config())
    model.head.fc2.bias.data[...] = np.inf
    with pytest.raises(NumericError, match="batch"):
        train(model, small_set, small_set, TrainConfig(**FAST))


def test_distribution_and_2afc_training_runs(rng):
    tex = make_texture(32, 1)
    dist_set = Manifest("dist", [DistRecord(dist=np.clip(tex + 0.05 * k, 0, 1), p=np.eye(5)[k]) for k in range(5)])
    nr = CFANet(tiny_config(mode="NR", head="distribution", bins=5))
    _, log = train(nr, dist_set, dist_set, TrainConfig(**{**FAST, "max_epochs": 2}))
    assert len(log.epochs) == 2
    noisy = [np.clip(tex + rng.normal(0, s, tex.shape), 0, 1).astype(np.float32) for s in (0.02, 0.1, 0.2, 0.3)]
    trip = Manifest("2afc", [TwoAFCRecord(ref=tex, a=noisy[i], b=noisy[3 - i], p_ab=p)
                             for i, p in enumerate([0.9, 0.7, 0.3, 0.1])])
    _, log = train(CFANet(tiny_config()), trip, trip, TrainConfig(**{**FAST, "max_epochs": 2}))
    assert all(np.isfinite(row["train_loss"]) for row in log.epochs)
    report = evaluate(CFANet(tiny_config()), trip)
    assert 0 <= report.twoafc <= 1


@pytest.mark.filterwarnings("ignore:logistic fit did not converge")
def test_evaluate_oracles(small_set):
    labels = {id(r): r.mos for r in small_set.records}
    report = evaluate(lambda rec: labels[id(rec)], small_set)
    assert report.srcc == pytest.approx(1) and report.plcc == pytest.approx(1)
    assert evaluate(lambda rec: -labels[id(rec)], small_set).srcc == pytest.approx(-1)
    with pytest.raises(ArgumentError):
        evaluate(CFANet(tiny_config(mode="NR")), small_set)
    with pytest.raises(ArgumentError):
        evaluate(lambda rec: 0.0, Manifest("mos-fr", []))
    with pytest.raises(NumericError):
        evaluate(lambda rec: float("nan"), small_set)


@pytest.mark.filterwarnings("ignore:logistic fit did not converge")
def test_distribution_evaluation_uses_bin_expectation():
    tex = make_texture(32, 2)
    records = [DistRecord(dist=tex, p=np.eye(5)[k]) for k in range(5)]
    report = evaluate(lambda rec: float(np.argmax(rec.p) + 1), Manifest("dist", records))
    assert report.srcc == pytest.approx(1)


def test_evaluate_matches_predict_record(small_set):
    model = CFANet(tiny_config())
    preds = [predict_record(model, r) for r in small_set.records]
    with nx.no_grad():
        direct = model.predict(small_set.records[0].dist[None], small_set.records[0].ref[None])
    assert preds[0] == float(direct[0])


def test_trainlog_csv_round_trips_floats():
    log = TrainLog()
    log.record(0, 0.1 + 0.2, float("nan"), 0.5, 1e-4, 0.5)
    text = log.to_csv()
    assert repr(0.1 + 0.2) in text and "nan" in text and text.endswith("# best_epoch=-1\n")
