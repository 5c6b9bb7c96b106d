import math

import numpy as np
import pytest
import torch

import fewseg.training as training
from fewseg.backbone import param_hash
from fewseg.errors import NonFiniteLoss, ShapeMismatch
from fewseg.model import build_model
from fewseg.pipeline import gen_synthetic, preprocess_image, resize_to_model, sample_exemplars
from fewseg.prompts import make_prompt
from fewseg.training import (TrainConfig, ce_loss, combined_loss, dice_loss, fixed_math, lr_at,
                             split_validation, train)

from conftest import full_gradient_check, small_config


class TestLosses:
    def test_dice_examples(self):
        m = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
        assert dice_loss(m, m).item() < 1e-5
        assert dice_loss(m, 1 - m).item() == pytest.approx(1.0, abs=1e-5)
        gt = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
        expected = 1 - (2 * 2 + 1e-5) / (4 + 2 + 1e-5)
        assert dice_loss(torch.ones(2, 2), gt).item() == pytest.approx(expected, abs=1e-7)
        assert expected == pytest.approx(1 / 3, abs=1e-5)

    def test_dice_empty_pair(self):
        assert dice_loss(torch.zeros(3, 3), torch.zeros(3, 3)).item() == 0.0

    def test_ce_examples(self):
        gt = torch.randint(0, 2, (5, 5)).float()
        assert ce_loss(torch.zeros(5, 5), gt).item() == pytest.approx(math.log(2), abs=1e-7)
        assert ce_loss((2 * gt - 1) * 1e4, gt).item() < 1e-6
        assert ce_loss(torch.tensor([1.0]), torch.tensor([1.0])).item() == pytest.approx(
            math.log1p(math.exp(-1)), abs=1e-7)

    def test_combined(self):
        torch.manual_seed(0)
        z = torch.randn(8, 8, dtype=torch.float64)
        g = (torch.rand(8, 8) > 0.5).double()
        assert combined_loss(z, g, 0, 1).item() == ce_loss(z, g).item()
        assert combined_loss(z, g, 1, 0).item() == dice_loss(torch.sigmoid(z), g).item()
        gt = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
        assert combined_loss(torch.full((2, 2), 1e4), gt).item() == pytest.approx(1 / 3 + 5000, rel=1e-3)
        assert combined_loss(1e4 * (2 * gt - 1), gt).item() < 1e-5
        with pytest.raises(ValueError):
            combined_loss(z, g, -1, 1)

    def test_bounds(self):
        rng = torch.Generator().manual_seed(1)
        for _ in range(50):
            z = torch.randn(6, 6, generator=rng) * 5
            g = (torch.rand(6, 6, generator=rng) > 0.5).float()
            d = dice_loss(torch.sigmoid(z), g).item()
            assert 0 <= d <= 1 and combined_loss(z, g).item() >= 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            dice_loss(torch.zeros(2, 2), torch.zeros(2, 3))
        with pytest.raises(ShapeMismatch):
            ce_loss(torch.zeros(2, 2), torch.zeros(4))


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(29, cfg) == 1e-4
    assert lr_at(30, cfg) == pytest.approx(1e-5, rel=1e-12)
    assert lr_at(90, cfg) == pytest.approx(1e-7, rel=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1)
    with pytest.raises(Exception):
        TrainConfig(bbox_rate=0.4)
    with pytest.raises(ValueError):
        TrainConfig(prompt_setting="Z")


def test_split_validation():
    data = [preprocess_image(s) for s in gen_synthetic(10, 32, seed=0)]
    tr, va, weak = split_validation(data, 0.2, 0)
    assert len(va) == 2 and len(tr) == 8 and not weak
    assert not {s.sample_id for s in tr} & {s.sample_id for s in va}
    tr1, va1, weak1 = split_validation(data[:1], 0.2, 0)
    assert tr1 == va1 and weak1


@pytest.fixture(scope="module")
def desk_data():
    data = [preprocess_image(s) for s in gen_synthetic(8, 32, seed=1)]
    return sample_exemplars(data, 5, 0)


def test_zero_epochs_keeps_init(desk_data):
    model = build_model(small_config())
    before = {k: v.clone() for k, v in model.state_dict().items()}
    _, rec = train(model, desk_data, TrainConfig(epochs=0))
    assert rec.stop_reason == "max_epochs" and rec.epochs == []
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_early_stop_after_patience(desk_data, monkeypatch):
    scores = iter([10, 20, 30, 40] + [5] * 100)
    monkeypatch.setattr(training, "validation_dice", lambda *a, **k: float(next(scores)))
    model = build_model(small_config())
    _, rec = train(model, desk_data, TrainConfig(epochs=100, lr=1e-3))
    assert rec.best_epoch == 3 and rec.stop_reason == "early_stop"
    assert rec.epochs[-1]["epoch"] == 3 + 10


def test_best_state_restored(desk_data, monkeypatch):
    scores = iter([50, 10, 10])
    snapshots = []
    real = training.trainable_state

    def spy(model):
        snapshots.append(real(model))
        return snapshots[-1]

    monkeypatch.setattr(training, "validation_dice", lambda *a, **k: float(next(scores)))
    monkeypatch.setattr(training, "trainable_state", spy)
    model = build_model(small_config())
    best, rec = train(model, desk_data, TrainConfig(epochs=3, lr=1e-2))
    assert rec.best_epoch == 0
    state = model.state_dict()
    for k, v in best.items():
        assert torch.equal(state[k], v)
    assert best is snapshots[1]  # snapshot taken after epoch 0


def test_frozen_hash_and_gradient_partition(desk_data):
    model = build_model(small_config())
    h = param_hash(model.encoder)
    s = resize_to_model(desk_data.samples[0], 32)
    x = torch.from_numpy(s.image)[None]
    y = torch.from_numpy(s.mask)[None, None].float()
    combined_loss(model(x, [make_prompt("D", "train", s)]), y).backward()
    for n, p in model.encoder.named_parameters():
        assert p.grad is None, n
    for n, p in model.trainable_named_parameters():
        assert p.grad is not None and torch.isfinite(p.grad).all(), n
    groups = {n.split(".")[1] if n.startswith("adapters.") else n.split(".")[0]
              for n, _ in model.trainable_named_parameters()}
    assert groups == {"hfa", "msfa", "selector", "decoder"}
    _, rec = train(model, desk_data, TrainConfig(epochs=2, lr=1e-3))
    assert rec.frozen_hash_before == rec.frozen_hash_after == h


def test_non_finite_loss(desk_data, monkeypatch):
    monkeypatch.setattr(training, "combined_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(NonFiniteLoss):
        train(build_model(small_config()), desk_data, TrainConfig(epochs=1))


def test_full_model_gradient(desk_model, desk_data):
    results = full_gradient_check(desk_model, desk_data.samples[0])
    assert len(results) == 20
    assert any(".selector." in r[0] and r[0].endswith(".bias") for r in results)
    bad = [r for r in results if r[4] >= 1e-3]
    assert not bad, bad


def test_deterministic_runs(desk_data, tmp_path):
    paths = []
    for i in range(2):
        with fixed_math():
            model = build_model(small_config(seed=5))
            _, rec = train(model, desk_data, TrainConfig(epochs=3, lr=1e-3, seed=5))
        paths.append(rec.write_csv(tmp_path / f"run{i}.csv"))
    assert paths[0].read_bytes() == paths[1].read_bytes()
