import csv

import numpy as np
import pytest

from norank.data import connectivity_dataset, generate_blobs
from norank.encoder import embed, init_params
from norank.losses import LossConfig
from norank.metrics import separation_ratio
from norank.trainer import (
    LOG_COLUMNS,
    TrainConfig,
    TrainingDiverged,
    lr_schedule,
    train,
)


@pytest.fixture(scope="module")
def blob_run():
    ds = generate_blobs(80, 10, 2, seed=0)
    p0 = init_params(10, seed=0)
    p1, log = train(ds, p0, TrainConfig(epochs=30, seed=0))
    return ds, p0, p1, log


def test_lr_schedule_values():
    cfg = TrainConfig(learning_rate=0.1, decay=0.01)
    assert lr_schedule(cfg, 0) == 0.1
    assert lr_schedule(cfg, 100) == pytest.approx(0.05, abs=1e-15)
    const = TrainConfig(learning_rate=0.1, schedule="constant")
    assert lr_schedule(const, 10**6) == 0.1
    with pytest.raises(ValueError):
        lr_schedule(cfg, -1)


def test_decay_schedule_is_robbins_monro_shaped():
    cfg = TrainConfig(learning_rate=0.1, decay=0.01)
    eta = np.array([lr_schedule(cfg, t) for t in range(200_000)])
    assert np.all(np.diff(eta) < 0)
    # partial sums of eta keep growing like log t, squares level off
    assert eta[:200_000].sum() > 2 * eta[:2_000].sum()
    assert np.sum(eta[100_000:] ** 2) < 1e-2 * np.sum(eta[:100_000] ** 2)


def test_zero_epochs_returns_params_unchanged():
    ds = generate_blobs(20, 4, 2, seed=1)
    p = init_params(4, (8,), 3, seed=1)
    q, log = train(ds, p, TrainConfig(epochs=0))
    assert q is p and len(log) == 0


def test_blob_triplet_loss_decreases(blob_run):
    _, _, _, log = blob_run
    trip = log.series("triplet")
    assert len(log) == 30
    assert trip[-1] < trip[0]


def test_blob_separation_ratio_increases(blob_run):
    ds, p0, p1, _ = blob_run
    before = separation_ratio(embed(p0, ds.x), ds.labels)
    after = separation_ratio(embed(p1, ds.x), ds.labels)
    assert after > before


def test_log_breakdown_and_objective(blob_run):
    _, _, _, log = blob_run
    for rec in log.epochs:
        br = rec.losses
        assert abs(br.total - (br.triplet + 0.1 * br.diversity + 0.1 * br.uniformity
                               + 0.01 * br.local + 0.01 * br.global_)) <= 1e-9
        assert rec.objective is not None and np.isfinite(rec.objective.total)
        assert rec.batches == 2 and rec.grad_norm > 0
    assert log.series("total", objective=True).shape == (30,)


def test_training_is_deterministic():
    ds = generate_blobs(40, 6, 2, seed=2)
    p = init_params(6, (16,), 4, seed=2)
    cfg = TrainConfig(epochs=5, batch_size=16, seed=7)
    a, la = train(ds, p, cfg)
    b, lb = train(ds, p, cfg)
    for x, y in zip(a.arrays(), b.arrays()):
        assert np.array_equal(x, y)
    assert [r.losses for r in la.epochs] == [r.losses for r in lb.epochs]
    c, _ = train(ds, p, TrainConfig(epochs=5, batch_size=16, seed=8))
    assert not np.array_equal(a.weights[0], c.weights[0])


def test_input_params_not_mutated():
    ds = generate_blobs(20, 4, 2, seed=3)
    p = init_params(4, (8,), 3, seed=3)
    before = [a.copy() for a in p.arrays()]
    train(ds, p, TrainConfig(epochs=2, batch_size=8))
    assert all(np.array_equal(a, b) for a, b in zip(before, p.arrays()))


def test_csv_log(tmp_path, blob_run):
    _, _, _, log = blob_run
    log.to_csv(tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert len(rows) == 31
    assert float(rows[5][LOG_COLUMNS.index("total")]) == log.series("total")[4]


def test_head_training_runs():
    ds = generate_blobs(30, 5, 2, seed=4)
    p = init_params(5, (8,), 4, head=True, seed=4)
    q, log = train(ds, p, TrainConfig(epochs=2, batch_size=10))
    assert q.head is not None and len(log) == 2


def test_divergence_is_reported():
    ds = generate_blobs(20, 4, 2, seed=5)
    p = init_params(4, (8,), 3, seed=5)
    with pytest.raises(TrainingDiverged):
        with np.errstate(all="ignore"):
            train(ds, p, TrainConfig(epochs=3, batch_size=20, learning_rate=1e305))


def test_augmentation_on_connectivity_only(caplog):
    rng = np.random.default_rng(6)
    mats = rng.normal(size=(12, 4, 4))
    mats = mats + mats.transpose(0, 2, 1)
    conn = connectivity_dataset(mats, np.repeat([0, 1], 6))
    p = init_params(16, (8,), 3, seed=6)
    cfg = TrainConfig(epochs=2, batch_size=6, augment=True, augment_probability=1.0,
                      loss=LossConfig(k=2))
    a, _ = train(conn, p, cfg)
    b, _ = train(conn, p, TrainConfig(epochs=2, batch_size=6, loss=LossConfig(k=2)))
    assert not np.array_equal(a.weights[0], b.weights[0])
    blobs = generate_blobs(20, 4, 2, seed=6)
    with caplog.at_level("WARNING"):
        train(blobs, init_params(4, (8,), 3), TrainConfig(epochs=1, augment=True))
    assert "augmentation only applies" in caplog.text


def test_rejects_bad_inputs():
    ds = generate_blobs(20, 4, 2, seed=7)
    with pytest.raises(ValueError):
        train(ds, init_params(5, (8,), 3), TrainConfig(epochs=1))
    one = generate_blobs(20, 4, 1, seed=7)
    with pytest.raises(ValueError):
        train(one, init_params(4, (8,), 3), TrainConfig(epochs=1))


def test_config_validation_and_round_trip():
    cfg = TrainConfig(epochs=3, strategy="hard", loss=LossConfig(margin=0.5))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert TrainConfig().strategy_for(0) == "random" and TrainConfig().strategy_for(1) == "semi-hard"
    for bad in ({"epochs": -1}, {"batch_size": 1}, {"learning_rate": 0}, {"schedule": "cosine"},
                {"strategy": "easy"}, {"augment_probability": 2.0}, {"decay": -0.1}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
