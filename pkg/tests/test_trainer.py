import math

import numpy as np
import pytest
import torch

from conftest import random_sample, small_config
from save_avs.config import ModelConfig, TrainConfig
from save_avs.data import AVSDataset
from save_avs.model import build_model, partition_parameters
from save_avs.trainer import (METRICS_HEADER, MetricsLog, cosine_lr, evaluate, gradient_check,
                              load_checkpoint, perturb_trainable_, save_checkpoint, train)
from save_avs.validation import NonFiniteError


def snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def test_freeze_invariant_after_five_steps(toy_sets):
    train_set, val_set = toy_sets
    model = build_model(ModelConfig())
    before = snapshot(model)
    batch = math.ceil(len(train_set) / 5)
    assert math.ceil(len(train_set) / batch) == 5
    train(model, train_set, val_set, TrainConfig(epochs=1, batch_size=batch))
    part = partition_parameters(model)
    for name, p in model.named_parameters():
        if name in part.frozen:
            assert torch.equal(p, before[name]), name
            assert not p.requires_grad
        else:
            assert not torch.equal(p, before[name]), name


def test_partition_covers_every_parameter():
    model = build_model(small_config())
    part = partition_parameters(model)
    names = {n for n, _ in model.named_parameters()}
    assert set(part.frozen) | set(part.trainable) == names
    assert not set(part.frozen) & set(part.trainable)
    assert any(".adapter." in n for n in part.trainable)
    assert all(n.startswith("encoder.") for n in part.frozen)


def test_cosine_schedule():
    assert cosine_lr(0, 100, 2e-4) == 2e-4
    assert abs(cosine_lr(100, 100, 2e-4)) <= 1e-20
    assert cosine_lr(50, 100, 2e-4) == pytest.approx(1e-4, abs=1e-18)
    lrs = [cosine_lr(t, 100, 2e-4) for t in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_evaluate_is_deterministic(trained_toy, toy_sets):
    model, _ = trained_toy
    _, val_set = toy_sets
    assert evaluate(model, val_set) == evaluate(model, val_set)


def test_untrained_model_scores_low(toy_sets):
    _, val_set = toy_sets
    assert evaluate(build_model(ModelConfig()), val_set)["miou"] < 0.5


def test_oracle_predictions_score_one(monkeypatch):
    g = torch.Generator().manual_seed(0)
    masks = (torch.rand(10, 16, 16, generator=g) > 0.5).float()
    images = torch.rand(10, 3, 16, 16, generator=g)
    images[:, 0] = masks
    ds = AVSDataset(images, torch.randn(10, 6, generator=g), masks)
    model = build_model(small_config())
    monkeypatch.setattr(model, "predict_logits", lambda im, au: 20 * im[:, 0] - 10)
    assert evaluate(model, ds) == {"miou": 1.0, "fscore": 1.0}


def test_per_category_breakdown(trained_toy, toy_sets):
    model, _ = trained_toy
    _, val_set = toy_sets
    result = evaluate(model, val_set, per_category=True)
    assert set(result["per_category"]) == set(val_set.categories)


def test_training_reduces_loss(trained_toy):
    _, log = trained_toy
    assert log.rows[4]["mean_train_loss"] < log.rows[0]["mean_train_loss"]


def test_trained_prompts_depend_on_audio(trained_toy, toy_sets):
    model, _ = trained_toy
    train_set, _ = toy_sets
    with torch.no_grad():
        a = model.audio(train_set.audio[:1]).prompt
        b = model.audio(train_set.audio[1:2] + 1.0).prompt
    assert not torch.allclose(a, b)


def test_gradient_check_passes_on_small_model():
    model = build_model(small_config()).double()
    perturb_trainable_(model, seed=0)
    report = gradient_check(model, random_sample(model.config), max_per_tensor=20)
    assert report.passed(1e-4), report.format()


def test_gradient_check_detects_corrupted_gradient():
    model = build_model(small_config()).double()
    perturb_trainable_(model, seed=0)

    def corrupt(grads):
        grads["decoder.hypernet.layers.2.weight"] *= 1.5
        return grads

    report = gradient_check(model, random_sample(model.config), max_per_tensor=10,
                            analytic_hook=corrupt)
    assert report.max_error > 1e-2


def test_gradient_check_excludes_frozen():
    model = build_model(small_config()).double()
    report = gradient_check(model, random_sample(model.config), max_per_tensor=2)
    frozen = set(partition_parameters(model).frozen)
    assert report.errors and not frozen & set(report.errors)


def test_gradient_check_needs_float64():
    with pytest.raises(ValueError, match="float64"):
        gradient_check(build_model(small_config()), random_sample(small_config()))


def test_checkpoint_round_trip(tmp_path, trained_toy):
    model, _ = trained_toy
    loaded = load_checkpoint(save_checkpoint(model, tmp_path / "ck"))
    assert loaded.config == model.config
    for (n, a), (_, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert torch.equal(a, b), n
    for (n, a), (_, b) in zip(model.named_buffers(), loaded.named_buffers()):
        assert torch.equal(a, b), n


def test_checkpoint_shape_mismatch(tmp_path):
    path = save_checkpoint(build_model(small_config()), tmp_path / "ck")
    small_config(embed_dim=16, prompt_dim=16).to_json(path / "config.json")
    with pytest.raises(Exception):
        load_checkpoint(path)


def test_metrics_csv(tmp_path, toy_sets):
    train_set, val_set = toy_sets
    model = build_model(ModelConfig())
    tc = TrainConfig(epochs=2, batch_size=16, checkpoint_dir=str(tmp_path))
    _, log, ckpts = train(model, train_set, val_set, tc)
    text = (tmp_path / "metrics.csv").read_text().splitlines()
    assert tuple(text[0].split(",")) == METRICS_HEADER and len(text) == 3
    assert MetricsLog.from_csv(tmp_path / "metrics.csv").rows == log.rows
    assert set(ckpts) == {"last", "best"}


def test_metrics_log_is_append_only():
    log = MetricsLog()
    log.append(1, 0.5, 0.1, 0.1, 1e-4)
    with pytest.raises(ValueError):
        log.append(1, 0.4, 0.2, 0.2, 1e-4)


def test_non_finite_aborts_with_location(toy_sets):
    train_set, val_set = toy_sets
    model = build_model(ModelConfig())
    with torch.no_grad():
        model.encoder.patch_embed.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteError, match="epoch 1, batch 0"):
        train(model, train_set, val_set, TrainConfig(epochs=1))


def test_train_rejects_empty_set(toy_sets):
    _, val_set = toy_sets
    empty = AVSDataset(torch.zeros(0, 3, 64, 64), torch.zeros(0, 32), torch.zeros(0, 64, 64))
    with pytest.raises(ValueError):
        train(build_model(ModelConfig()), empty, val_set, TrainConfig(epochs=1))


def test_short_runs_are_reproducible(toy_sets):
    train_set, val_set = toy_sets
    sub = AVSDataset(train_set.images[:16], train_set.audio[:16], train_set.masks[:16])
    runs = [train(build_model(ModelConfig()), sub, val_set, TrainConfig(epochs=2, batch_size=8))[1]
            for _ in range(2)]
    assert runs[0].rows == runs[1].rows
    assert np.isfinite(runs[0].rows[-1]["val_miou"])
