import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from cineseg.checkpoint import checkpoint_from_model, restore_model
from cineseg.dataset import Manifest
from cineseg.model import ModelConfig, build_model
from cineseg.phantom import ScanSpec, default_jitter_for_size, default_params_for_size, generate_dataset
from cineseg.preprocess import AugmentConfig
from cineseg.train import (
    MADGRAD,
    TrainConfig,
    TrainingAborted,
    bce_loss,
    combined_loss,
    dice_loss,
    gradient_check,
    lr_at_epoch,
    mode_filter,
    restore_optimizer,
    optimizer_state_dict,
    train_loop,
)

TINY_MODEL = ModelConfig(
    embed_dim=8,
    num_blocks=1,
    num_heads=2,
    encoder_channels=(4, 8),
    adapter_bottleneck=4,
    decoder_heads=2,
    max_phases=8,
)


# --------------------------------------------------------------------- losses

def scalar_bce(logits, targets):
    total = 0.0
    for z, y in zip(logits, targets):
        p = 1.0 / (1.0 + math.exp(-z))
        total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return total / len(logits)


def scalar_dice(logits, targets, smooth):
    p = [1.0 / (1.0 + math.exp(-z)) for z in logits]
    inter = sum(pi * yi for pi, yi in zip(p, targets))
    denom = sum(p) + sum(targets)
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def test_bce_zero_logits_is_ln2():
    logits = torch.zeros(2, 1, 3, 3, 2)
    target = (torch.rand_like(logits) > 0.5).float()
    assert float(bce_loss(logits, target)) == pytest.approx(math.log(2.0), rel=1e-6)


def test_bce_saturated_is_tiny():
    target = (torch.rand(1, 1, 4, 4, 2) > 0.5).float()
    logits = torch.where(target > 0, torch.tensor(50.0), torch.tensor(-50.0))
    assert float(bce_loss(logits, target)) < 1e-9


def test_bce_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=4) * 3
    targets = rng.integers(0, 2, size=4).astype(float)
    t_logits = torch.tensor(logits, dtype=torch.float64).reshape(1, 1, 2, 2, 1)
    t_targets = torch.tensor(targets, dtype=torch.float64).reshape(1, 1, 2, 2, 1)
    assert float(bce_loss(t_logits, t_targets)) == pytest.approx(
        scalar_bce(logits, targets), rel=1e-12
    )


def test_dice_loss_zero_when_saturated():
    target = (torch.rand(2, 1, 4, 4, 2) > 0.5).float()
    logits = torch.where(target > 0, torch.tensor(500.0), torch.tensor(-500.0))
    assert float(dice_loss(logits, target, smooth=1.0)) == 0.0


def test_dice_loss_empty_target_empty_pred():
    target = torch.zeros(1, 1, 3, 3, 1)
    logits = torch.full_like(target, -500.0)  # sigmoid saturates to exactly 0
    assert float(dice_loss(logits, target, smooth=1.0)) == 0.0


def test_dice_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=6) * 2
    targets = rng.integers(0, 2, size=6).astype(float)
    t_logits = torch.tensor(logits, dtype=torch.float64).reshape(1, 1, 3, 2, 1)
    t_targets = torch.tensor(targets, dtype=torch.float64).reshape(1, 1, 3, 2, 1)
    assert float(dice_loss(t_logits, t_targets, smooth=1.0)) == pytest.approx(
        scalar_dice(logits, targets, 1.0), rel=1e-12
    )


def test_combined_loss_degenerate_weights_and_composition():
    torch.manual_seed(0)
    logits = torch.randn(2, 1, 3, 3, 2, dtype=torch.float64)
    target = (torch.rand(2, 1, 3, 3, 2) > 0.5).double()
    assert torch.equal(combined_loss(logits, target, 1.0, 0.0), bce_loss(logits, target))
    assert torch.equal(
        combined_loss(logits, target, 0.0, 1.0), dice_loss(logits, target, 1.0)
    )
    both = combined_loss(logits, target, 0.5, 0.5)
    expected = 0.5 * float(bce_loss(logits, target)) + 0.5 * float(dice_loss(logits, target))
    assert float(both) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError, match="weights"):
        combined_loss(logits, target, 0.0, 0.0)


def test_losses_reject_non_binary_targets():
    logits = torch.zeros(1, 1, 2, 2, 1)
    target = torch.full_like(logits, 0.5)
    for fn in (bce_loss, lambda a, b: dice_loss(a, b, 1.0)):
        with pytest.raises(ValueError, match="binary"):
            fn(logits, target)


# ------------------------------------------------------------------- schedule

def test_lr_schedule():
    config = TrainConfig()
    assert lr_at_epoch(config, 0) == pytest.approx(1e-4)
    assert lr_at_epoch(config, 99) == pytest.approx(1e-4)
    assert lr_at_epoch(config, 250) == pytest.approx(1e-6)
    with pytest.raises(ValueError):
        lr_at_epoch(config, -1)


# ------------------------------------------------------------------- optimizer

def madgrad_scalar_oracle(grad_fn, x_init, lr, steps, momentum=0.9, eps=1e-6):
    """Reference update in plain float arithmetic."""
    x = x_init
    x0 = x_init
    gss = 0.0
    s = 0.0
    trajectory = []
    for k in range(steps):
        g = grad_fn(x)
        lamb = lr * math.sqrt(k + 1)
        gss += lamb * g * g
        s += lamb * g
        z = x0 - s / (gss ** (1.0 / 3.0) + eps)
        x = x + (1.0 - momentum) * (z - x)
        trajectory.append(x)
    return trajectory


def test_madgrad_zero_gradients_are_a_fixed_point():
    p = torch.tensor([1.5, -2.25, 0.125], dtype=torch.float64, requires_grad=True)
    initial = p.detach().clone()
    opt = MADGRAD([p], lr=0.1)
    for _ in range(5):
        p.grad = torch.zeros_like(p)
        opt.step()
    assert torch.equal(p.detach(), initial)


@pytest.mark.parametrize("momentum", [0.0, 0.9])
def test_madgrad_quadratic_convergence_matches_oracle(momentum):
    p = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    opt = MADGRAD([p], lr=0.1, momentum=momentum)
    trajectory = []
    for _ in range(2000):
        p.grad = 2.0 * (p.detach() - 3.0)
        opt.step()
        trajectory.append(float(p.detach()))
    assert abs(trajectory[-1] - 3.0) < 0.01

    if momentum:
        oracle = madgrad_scalar_oracle(lambda x: 2.0 * (x - 3.0), 0.0, 0.1, 2000, momentum)
        np.testing.assert_allclose(trajectory, oracle, rtol=1e-9, atol=1e-12)


def test_madgrad_deterministic():
    def run():
        torch.manual_seed(3)
        p = torch.randn(4, requires_grad=True)
        opt = MADGRAD([p], lr=0.05)
        gen = torch.Generator().manual_seed(5)
        for _ in range(20):
            p.grad = torch.randn(4, generator=gen)
            opt.step()
        return p.detach().numpy().tobytes()

    assert run() == run()


def test_madgrad_aborts_on_nonfinite_gradient():
    p = torch.zeros(2, requires_grad=True)
    opt = MADGRAD([p], lr=0.1, names=["layer.weight"])
    p.grad = torch.tensor([float("nan"), 0.0])
    with pytest.raises(TrainingAborted, match="layer.weight"):
        opt.step()


def test_madgrad_validates_hyperparameters():
    p = torch.zeros(1, requires_grad=True)
    for kwargs in (dict(lr=0.0), dict(lr=0.1, momentum=1.0), dict(lr=0.1, eps=-1e-9)):
        with pytest.raises(ValueError):
            MADGRAD([p], **kwargs)


# ------------------------------------------------------------------ train loop

SLICES = ("basal", "mid", "apical")


def make_manifest(tmp_path, n_scans=4, views=("SAX",), size=16, phases=4, seed0=300):
    base = default_params_for_size(size, phases)
    jitter = default_jitter_for_size(size)
    specs = []
    for i in range(n_scans):
        pairs = tuple((v, SLICES[i % 3]) for v in views)
        specs.append(
            ScanSpec(f"scan{i:03d}", seed=seed0 + i, views=pairs, base=base, jitter=jitter)
        )
    return generate_dataset(specs, tmp_path)


def tiny_train_config(**overrides):
    defaults = dict(
        lr0=3e-3,
        epochs=3,
        batch_size=2,
        seed=11,
        mode="sax",
        augment_enabled=False,
        log_train_dice=True,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


def test_zero_epochs_returns_initial_parameters(tmp_path):
    manifest = make_manifest(tmp_path)
    model, part = build_model(TINY_MODEL, seed=1)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    ckpt, history = train_loop(model, part, manifest, tiny_train_config(epochs=0))
    assert history == []
    for name, p in model.named_parameters():
        assert torch.equal(p.detach(), before[name])


def test_frozen_parameters_never_change(tmp_path):
    manifest = make_manifest(tmp_path)
    model, part = build_model(TINY_MODEL, seed=2)
    frozen_before = {n: dict(model.named_parameters())[n].detach().clone() for n in part.frozen}
    trainable_before = {
        n: dict(model.named_parameters())[n].detach().clone() for n in part.trainable
    }
    train_loop(model, part, manifest, tiny_train_config(epochs=5, batch_size=4))
    after = dict(model.named_parameters())
    for name, value in frozen_before.items():
        assert torch.equal(after[name].detach(), value), name
    assert any(
        not torch.equal(after[name].detach(), value)
        for name, value in trainable_before.items()
    )


def test_train_loop_is_deterministic(tmp_path):
    manifest = make_manifest(tmp_path)

    def run():
        model, part = build_model(TINY_MODEL, seed=3)
        ckpt, history = train_loop(
            model, part, manifest, tiny_train_config(augment_enabled=True)
        )
        return (
            {n: v.tobytes() for n, v in ckpt.params.items()},
            [row["loss"] for row in history],
        )

    a = run()
    b = run()
    assert a == b


def test_resume_equivalence(tmp_path):
    manifest = make_manifest(tmp_path)
    config4 = tiny_train_config(epochs=4)

    model_a, part_a = build_model(TINY_MODEL, seed=4)
    ckpt_a, _ = train_loop(model_a, part_a, manifest, config4)

    config2 = replace(config4, epochs=2)
    model_b, part_b = build_model(TINY_MODEL, seed=4)
    ckpt_half, history_half = train_loop(model_b, part_b, manifest, config2)

    # round-trip through the serialized checkpoint, then resume to epoch 4
    model_c, part_c = restore_model(ckpt_half)
    names = list(part_c.trainable)
    lookup = dict(model_c.named_parameters())
    optimizer = MADGRAD(
        [lookup[n] for n in names],
        lr=config4.lr0,
        momentum=config4.momentum,
        eps=config4.optimizer_eps,
        names=names,
    )
    restore_optimizer(optimizer, names, ckpt_half.optimizer)
    ckpt_c, _ = train_loop(
        model_c,
        part_c,
        manifest,
        config4,
        start_epoch=ckpt_half.epoch,
        optimizer=optimizer,
        history=ckpt_half.history,
    )
    assert ckpt_a.params.keys() == ckpt_c.params.keys()
    for name in ckpt_a.params:
        assert ckpt_a.params[name].tobytes() == ckpt_c.params[name].tobytes(), name
    assert ckpt_a.optimizer["step"] == ckpt_c.optimizer["step"]
    for name in ckpt_a.optimizer["tensors"]:
        for buf, arr in ckpt_a.optimizer["tensors"][name].items():
            assert arr.tobytes() == ckpt_c.optimizer["tensors"][name][buf].tobytes()


def test_loss_decreases_over_first_epochs(tmp_path):
    manifest = make_manifest(tmp_path, n_scans=2)
    model, part = build_model(TINY_MODEL, seed=5)
    _, history = train_loop(
        model, part, manifest, tiny_train_config(epochs=20, batch_size=2, lr0=5e-3)
    )
    losses = np.array([row["loss"] for row in history])
    smoothed = np.convolve(losses, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smoothed) < 1e-6)
    assert smoothed[-1] < smoothed[0]


def test_mode_filter_and_prompt_wiring(tmp_path):
    manifest = make_manifest(tmp_path, n_scans=2, views=("SAX", "LAX"))
    assert len(mode_filter(manifest, "sax").entries) == 2
    assert len(mode_filter(manifest, "lax").entries) == 2
    assert len(mode_filter(manifest, "multi").entries) == 4
    with pytest.raises(ValueError, match="mode"):
        mode_filter(manifest, "everything")

    model, part = build_model(TINY_MODEL, seed=6)
    ckpt, history = train_loop(
        model, part, manifest, tiny_train_config(mode="multi-prompt", epochs=1, batch_size=4)
    )
    assert history[0]["loss"] > 0


def test_train_loop_aborts_on_nonfinite_loss(tmp_path):
    manifest = make_manifest(tmp_path)
    model, part = build_model(TINY_MODEL, seed=7)
    with torch.no_grad():
        model.decoder.head_out.weight.fill_(float("nan"))
    with pytest.raises(TrainingAborted, match="non-finite loss"):
        train_loop(model, part, manifest, tiny_train_config(epochs=1))


def test_train_loop_rejects_empty_mode_selection(tmp_path):
    manifest = make_manifest(tmp_path, views=("SAX",))
    model, part = build_model(TINY_MODEL, seed=8)
    with pytest.raises(ValueError, match="no training clips"):
        train_loop(model, part, manifest, tiny_train_config(mode="lax"))


def test_optimizer_state_roundtrip():
    model, part = build_model(TINY_MODEL, seed=9)
    names = list(part.trainable)
    lookup = dict(model.named_parameters())
    params = [lookup[n] for n in names]
    opt = MADGRAD(params, lr=0.01, names=names)
    gen = torch.Generator().manual_seed(1)
    for _ in range(3):
        for p in params:
            p.grad = torch.randn(p.shape, generator=gen)
        opt.step()
    state = optimizer_state_dict(opt, names)
    opt2 = MADGRAD(params, lr=0.01, names=names)
    restore_optimizer(opt2, names, state)
    state2 = optimizer_state_dict(opt2, names)
    assert state["step"] == state2["step"]
    for name in state["tensors"]:
        for buf in state["tensors"][name]:
            assert np.array_equal(state["tensors"][name][buf], state2["tensors"][name][buf])


# -------------------------------------------------------------- gradient check

def test_gradient_check_micro_model():
    model, _ = build_model(TINY_MODEL, seed=10)
    torch.manual_seed(0)
    x = torch.randn(1, 1, 8, 8, 2)
    y = (torch.rand(1, 1, 8, 8, 2) > 0.5).double()
    report = gradient_check(model, x, y, view="LAX", min_coords=60, coords_per_param=1)
    assert report["max_rel_error"] <= 1e-4
    assert report["num_coords"] >= 60
    # frozen parameters are excluded from the report
    assert not any(".attn_s." in name or ".mlp." in name for name in report["per_group"])


def test_gradient_check_pure_linear_head_is_nearly_exact():
    # a single linear map through the decoder head: finite differences are
    # exact up to roundoff for the bias of the final projection
    model, _ = build_model(TINY_MODEL, seed=11)
    torch.manual_seed(1)
    x = torch.randn(1, 1, 8, 8, 2)
    y = (torch.rand(1, 1, 8, 8, 2) > 0.5).double()
    report = gradient_check(model, x, y, min_coords=10, coords_per_param=1)
    assert report["max_rel_error"] <= 1e-4
