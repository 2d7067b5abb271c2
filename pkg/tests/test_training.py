import csv
import warnings

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from recsm.dataio import SyntheticSceneConfig, generate_sequence, sequence_samples
from recsm.datamodel import ConfigError, FormatError, LossWeights, NumericError
from recsm.training import (
    METRICS_HEADER,
    EmptyMaskWarning,
    TrainConfig,
    branch_loss,
    collate,
    gradient_check,
    load_checkpoint,
    lr_at_epoch,
    masked_smooth_l1,
    model_loss,
    save_checkpoint,
    smooth_l1,
    total_loss,
    train,
)

from conftest import tiny_model

CFG = TrainConfig()


def small_samples(seed=0, frames=3):
    return sequence_samples(generate_sequence(SyntheticSceneConfig(height=32, width=64, frames=frames,
                                                                   object_size=(8, 14), object_disparity=(10, 24),
                                                                   change_edges=(0, 3, 10), change_targets=(0.5,),
                                                                   seed=seed)))


# ---------------------------------------------------------------- schedule

def test_lr_knots_exact():
    assert [lr_at_epoch(e, CFG) for e in (0, 10, 300, 700)] == [5.8e-5, 4e-4, 4e-4, 2e-6]


def test_lr_interpolation():
    assert lr_at_epoch(5, CFG) == pytest.approx(2.29e-4, abs=1e-12)
    assert lr_at_epoch(500, CFG) == pytest.approx(2.01e-4, abs=1e-12)
    assert lr_at_epoch(150, CFG) == 4e-4
    assert lr_at_epoch(900, CFG) == 2e-6


@given(st.floats(0, 800))
def test_lr_continuous_piecewise_linear(e):
    h = 1e-6
    assert abs(lr_at_epoch(e + h, CFG) - lr_at_epoch(e, CFG)) <= 4e-5 * h * 1.01
    assert 2e-6 <= lr_at_epoch(e, CFG) <= 4e-4


def test_schedule_validation():
    with pytest.raises(ConfigError):
        TrainConfig(warmup_epochs=400)
    with pytest.raises(ConfigError):
        TrainConfig(lr_start=1e-3)
    with pytest.raises(ConfigError):
        lr_at_epoch(-1, CFG)


def test_train_config_round_trip():
    cfg = TrainConfig(crop_h=64, max_steps=3, loss_weights=LossWeights(scs_weights=(1.0, 2.0), dom_weight=0.5))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"nope": 1})


# ---------------------------------------------------------------- losses

@given(st.floats(-50, 50, allow_nan=False))
def test_smooth_l1_closed_form(x):
    v = smooth_l1(torch.tensor(x, dtype=torch.float64)).item()
    expected = 0.5 * x * x if abs(x) < 1 else abs(x) - 0.5
    assert v == pytest.approx(expected, abs=1e-12)


def test_branch_loss_unit_values():
    gt = torch.zeros(1, 4, 4, dtype=torch.float64)
    mask = torch.ones(1, 4, 4, dtype=torch.bool)
    unit = gt + 1.5  # smooth L1 of 1.5 is exactly 1
    assert branch_loss((unit, unit, unit), gt, mask).item() == 2.1
    assert branch_loss((gt, gt, gt), gt, mask).item() == 0.0
    half = gt + 0.5
    assert branch_loss((half, half, half), gt, mask).item() == pytest.approx(0.2625, abs=1e-15)


def test_total_loss_examples():
    assert total_loss([0.1, 0.2, 0.3], [1, 1, 1]) == pytest.approx(0.6)
    assert total_loss([0.7], [1.0]) == 0.7
    assert total_loss([1, 1, 1], [0.5, 0.7, 0.9]) == pytest.approx(2.1, abs=1e-15)
    with pytest.raises(ConfigError):
        total_loss([1, 1], [1.0])


def test_masked_loss_excludes_invalid_and_warns_on_empty():
    pred = torch.tensor([[[0.0, 100.0]]])
    gt = torch.zeros(1, 1, 2)
    mask = torch.tensor([[[True, False]]])
    assert masked_smooth_l1(pred, gt, mask).item() == 0.0
    with pytest.warns(EmptyMaskWarning):
        assert masked_smooth_l1(pred, gt, torch.zeros_like(mask)).item() == 0.0


def test_model_loss_zero_iff_outputs_match():
    model = tiny_model(k=1)
    s = small_samples()[0]
    left, right, prior, gt, valid = collate([s])
    out = model(left, right, prior)
    loss, per_scs = model_loss(out, model, gt, valid, LossWeights(dom_weight=1.0))
    assert loss.item() > 0 and len(per_scs) == 1
    perfect = out.per_scs_mrem[0].branches["large"].detach()
    loss0, _ = model_loss(out, model, perfect, torch.ones_like(valid), LossWeights(branch_weights=(0, 0, 1)))
    assert loss0.item() == 0.0


def test_shared_dom_receives_gradients_from_every_unit():
    model = tiny_model(k=2)
    torch.nn.init.normal_(model.dom.head.weight, 0, 0.05)
    s = small_samples()[0]
    left, right, prior, gt, valid = collate([s])

    def dom_grads(scs_weights):
        model.zero_grad()
        loss, _ = model_loss(model(left, right, prior), model, gt, valid,
                             LossWeights(scs_weights=scs_weights, dom_weight=1.0))
        loss.backward()
        return torch.cat([p.grad.flatten() for p in model.dom.parameters()])

    both = dom_grads((1.0, 1.0))
    last_only = dom_grads((1e-12, 1.0))
    assert not torch.allclose(both, last_only)


# ---------------------------------------------------------------- gradient check

def test_gradient_check_k1():
    model = tiny_model(k=1)
    torch.nn.init.normal_(model.dom.head.weight, 0, 0.05)
    res = gradient_check(model, small_samples()[0], n_params=30, weights=LossWeights(dom_weight=1.0))
    assert res.max_rel_error < 1e-4
    assert res.rejected <= res.checked // 3


def test_gradient_check_shared_dom_k2():
    model = tiny_model(k=2)
    torch.nn.init.normal_(model.dom.head.weight, 0, 0.05)
    res = gradient_check(model, small_samples()[0], n_params=20, weights=LossWeights(dom_weight=1.0),
                         parameter_filter=lambda n: n.startswith("dom."))
    assert res.max_rel_error < 1e-4 and res.checked == 20


def test_gradient_check_zero_model():
    model = tiny_model(k=1)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    # every layer sees zero weights, so nothing upstream of the aggregation's last layer gets gradient
    res = gradient_check(model, small_samples()[0], n_params=15,
                         parameter_filter=lambda n: n.startswith("backbone.stages"))
    assert res.max_rel_error == 0.0
    with pytest.raises(ConfigError):
        gradient_check(model, small_samples()[0], parameter_filter=lambda n: False)


# ---------------------------------------------------------------- loop, checkpoints

def test_training_is_deterministic(tmp_path):
    samples = small_samples()
    cfg = TrainConfig(crop_h=32, crop_w=48, max_steps=3, seed=4)
    a = train(samples, tiny_model(k=1), cfg)
    b = train(samples, tiny_model(k=1), cfg)
    assert a.final_loss == pytest.approx(b.final_loss, abs=1e-6)
    assert a.steps == 3


def test_metrics_csv_and_checkpoint(tmp_path):
    model = tiny_model(k=2, shared_dom=False)
    cfg = TrainConfig(crop_h=32, crop_w=64, max_steps=2, checkpoint_every=1, loss_weights=LossWeights(scs_weights=(0.5, 1.0)))
    train(small_samples(), model, cfg, out_dir=tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(METRICS_HEADER) == ["epoch", "loss", "epe", "d1_all", "lr"]
    loaded, manifest = load_checkpoint(tmp_path / "checkpoint.zip")
    assert manifest["lambda"] == [0.5, 1.0]
    assert manifest["model_config"]["shared_dom"] is False
    for (n, p), (m, q) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert n == m and torch.equal(p, q)
    assert (tmp_path / "checkpoint_0000.zip").exists()


def test_bad_checkpoint(tmp_path):
    bad = tmp_path / "x.zip"
    bad.write_bytes(b"not a zip")
    with pytest.raises(FormatError):
        load_checkpoint(bad)


def test_nonfinite_loss_dumps_batch(tmp_path):
    model = tiny_model(k=1)
    with torch.no_grad():
        model.dom.head.bias.fill_(float("inf"))
    cfg = TrainConfig(crop_h=32, crop_w=64, max_steps=2, loss_weights=LossWeights(dom_weight=1.0))
    with pytest.raises(NumericError):
        train(small_samples(), model, cfg, out_dir=tmp_path)
    assert (tmp_path / "nonfinite_batch.pt").exists()


def test_loss_decreases_early_in_most_seeds():
    """Ten steps on one fixed batch: the last loss is below the first for at least 8 of 10 seeds."""
    s = small_samples(seed=1)
    decreased = 0
    for seed in range(10):
        model = tiny_model(k=1, seed=seed)
        cfg = TrainConfig(crop_h=32, crop_w=64, batch_size=1, lr_start=1e-3, lr_peak=2e-3, warmup_epochs=0,
                          max_steps=10, seed=seed, loss_weights=LossWeights(dom_weight=1.0))
        res = train(s[:1], model, cfg)
        decreased += res.metrics[-1]["loss"] < res.metrics[0]["loss"]
    assert decreased >= 8
