import numpy as np
import pytest
import torch

from pcac.codec import CodecConfig, model_init
from pcac.entropy import EntropyModel
from pcac.training import (
    TrainConfig,
    TrainingDiverged,
    rd_loss,
    synth_dataset,
    train,
    write_log_csv,
)

TINY = CodecConfig(channels=8, k_neighbors=4, latent_channels=4)


@pytest.fixture(scope="module")
def data():
    return synth_dataset(4, 0)


def _fresh(seed=0):
    return model_init(TINY, seed), EntropyModel(TINY.latent_channels, seed=seed)


def test_synth_deterministic_and_valid():
    a, b = synth_dataset(3, 7), synth_dataset(3, 7)
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa.positions, pb.positions)
        np.testing.assert_array_equal(pa.colors, pb.colors)
        assert pa.positions.shape == (2048, 3)
        assert np.linalg.norm(pa.positions, axis=1).max() == pytest.approx(1.0)
        assert pa.colors.min() >= 0 and pa.colors.max() <= 1


def test_synth_has_color_variation():
    for p in synth_dataset(8, 1):
        assert p.colors[:, 0].std() > 0.01


def test_synth_rejects_empty():
    with pytest.raises(ValueError):
        synth_dataset(0, 0)


def test_rd_loss_examples():
    z = torch.zeros(2, 3)
    assert rd_loss(z, z, torch.tensor(0.0), 0.1).item() == 0.0
    assert rd_loss(z, torch.ones(2, 3), torch.tensor(100.0), 0.01).item() == pytest.approx(7.0)
    with pytest.raises(ValueError):
        rd_loss(z, torch.zeros(3, 2), torch.tensor(0.0), 0.1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=0, steps=1)
    with pytest.raises(ValueError):
        TrainConfig(lam=1e-4, steps=0)


def test_train_same_seed_identical_logs(data):
    cfg = TrainConfig(lam=1e-3, steps=4, batch=2)
    _, _, a = train(*_fresh(), data, cfg)
    _, _, b = train(*_fresh(), data, cfg)
    assert a == b


def test_train_loss_decreases(data):
    cfg = TrainConfig(lam=1e-4, steps=60, batch=2, lr=2e-3)
    _, _, rows = train(*_fresh(), data, cfg)
    first = np.mean([r["loss"] for r in rows[:10]])
    last = np.mean([r["loss"] for r in rows[-10:]])
    assert last < first


def test_gradients_reach_every_parameter(data):
    from pcac.codec import GeometryBatch, patch_geometry
    from pcac.entropy import quantize, rate_estimate

    model, em = _fresh()
    geom = GeometryBatch.stack([patch_geometry(data[0].positions, TINY)])
    target = torch.as_tensor(data[0].colors, dtype=torch.float32)[None]
    noisy = quantize(model.encode(target, geom), "train", torch.Generator().manual_seed(0))
    loss = rd_loss(model.decode(noisy, geom), target, rate_estimate(noisy, em), 1e-2)
    loss.backward()
    for name, p in list(model.named_parameters()) + list(em.named_parameters()):
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_divergence_raises(data):
    model, em = _fresh()
    with torch.no_grad():
        model.head.bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged):
        train(model, em, data, TrainConfig(lam=1e-3, steps=2, batch=1))


def test_write_log_csv(tmp_path, data):
    _, _, rows = train(*_fresh(), data, TrainConfig(lam=1e-3, steps=2, batch=1))
    write_log_csv(rows, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].split(",")[:2] == ["step", "loss"] and len(lines) == 3
