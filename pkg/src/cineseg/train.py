"""Losses, the MADGRAD optimizer, LR schedule, and the training loop.

The loop trains only the partition's trainable parameters; frozen backbone
weights are never handed to the optimizer and stay bit-identical to their
initialization. Every random draw (batch order, augmentation) derives from
(config.seed, epoch, clip identity), so resuming from a checkpoint reproduces
the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, checkpoint_from_model, save_checkpoint
from .dataset import ClipMeta, Manifest, Sample, iterate_batches, load_clip
from .metrics import dice_score
from .model import ModelConfig, ParameterPartition, SegmentationNetwork
from .preprocess import AugmentConfig, augment, center_crop, minmax_normalize, resample_phases
from .seeding import derive_seed

MODES = ("sax", "lax", "multi", "multi-prompt")


class TrainingAborted(RuntimeError):
    """Raised when the loss or a gradient goes non-finite; prior checkpoints survive."""


def _check_binary(target: torch.Tensor) -> None:
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("target mask must be binary")


def bce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Voxel-mean binary cross-entropy, evaluated in the stable logit form."""
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    _check_binary(target)
    return torch.nn.functional.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def dice_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft Dice loss, summed per clip over H x W x T and averaged over the batch."""
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(logits.shape)} vs {tuple(target.shape)}")
    _check_binary(target)
    p = torch.sigmoid(logits).reshape(logits.shape[0], -1)
    y = target.to(logits.dtype).reshape(target.shape[0], -1)
    intersection = (p * y).sum(dim=1)
    denom = p.sum(dim=1) + y.sum(dim=1)
    return (1.0 - (2.0 * intersection + smooth) / (denom + smooth)).mean()


def combined_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    w_bce: float = 0.5,
    w_dice: float = 0.5,
    smooth: float = 1.0,
) -> torch.Tensor:
    if w_bce < 0 or w_dice < 0 or w_bce + w_dice == 0:
        raise ValueError(f"loss weights must be >= 0 with a positive sum, got ({w_bce}, {w_dice})")
    total = logits.new_zeros(())
    if w_bce:
        total = total + w_bce * bce_loss(logits, target)
    if w_dice:
        total = total + w_dice * dice_loss(logits, target, smooth)
    return total


class MADGRAD(torch.optim.Optimizer):
    """Momentumized, adaptive, dual-averaged gradient method.

    Per step k (0-based) with weight lamb = lr * sqrt(k + 1):
        G += lamb * g^2;  s += lamb * g
        z  = x0 - s / (G^(1/3) + eps)
        x += (1 - momentum) * (z - x)
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, eps: float = 1e-6, names=None):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if eps < 0:
            raise ValueError(f"eps must be >= 0, got {eps}")
        super().__init__(params, dict(lr=lr, momentum=momentum, eps=eps))
        self._names = list(names) if names is not None else None

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        index = 0
        for group in self.param_groups:
            lr = group["lr"]
            eps = group["eps"]
            momentum = group["momentum"]
            ck = 1.0 - momentum
            for p in group["params"]:
                name = self._names[index] if self._names else f"param{index}"
                index += 1
                if p.grad is None:
                    continue
                grad = p.grad
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["grad_sum_sq"] = torch.zeros_like(p)
                    state["s"] = torch.zeros_like(p)
                    if momentum != 0:
                        state["x0"] = p.detach().clone()
                if not torch.isfinite(grad).all():
                    raise TrainingAborted(
                        f"non-finite gradient for {name!r} at step {state['step']}"
                    )
                k = state["step"]
                lamb = lr * math.sqrt(k + 1)
                grad_sum_sq = state["grad_sum_sq"]
                s = state["s"]
                if momentum == 0:
                    rms = grad_sum_sq.pow(1.0 / 3.0).add_(eps)
                    x0 = p.addcdiv(s, rms, value=1)
                else:
                    x0 = state["x0"]
                grad_sum_sq.addcmul_(grad, grad, value=lamb)
                rms = grad_sum_sq.pow(1.0 / 3.0).add_(eps)
                s.add_(grad, alpha=lamb)
                z = x0.addcdiv(s, rms, value=-1)
                if momentum == 0:
                    p.copy_(z)
                else:
                    p.add_(z - p, alpha=ck)
                state["step"] = k + 1
        return loss


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    decay_every: int = 100
    decay_factor: float = 0.1
    w_bce: float = 0.5
    w_dice: float = 0.5
    momentum: float = 0.9
    optimizer_eps: float = 1e-6
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    dice_smooth: float = 1.0
    mode: str = "multi-prompt"
    checkpoint_every: int = 0  # 0 = final checkpoint only
    log_train_dice: bool = True
    crop_size: tuple[int, int] | None = None
    num_phases: int = 0  # 0 = keep the stored phase count
    augment_enabled: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.decay_every < 1:
            raise ValueError(f"decay_every must be >= 1, got {self.decay_every}")
        if self.decay_factor <= 0:
            raise ValueError(f"decay_factor must be positive, got {self.decay_factor}")
        if self.w_bce < 0 or self.w_dice < 0 or self.w_bce + self.w_dice == 0:
            raise ValueError(f"loss weights ({self.w_bce}, {self.w_dice}) invalid")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.optimizer_eps <= 0:
            raise ValueError(f"optimizer_eps must be positive, got {self.optimizer_eps}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.dice_smooth < 0:
            raise ValueError(f"dice_smooth must be >= 0, got {self.dice_smooth}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.num_phases != 0 and self.num_phases < 2:
            raise ValueError(f"num_phases must be 0 (off) or >= 2, got {self.num_phases}")
        self.augment.validate()

    def to_dict(self) -> dict:
        data = asdict(self)
        data["crop_size"] = list(self.crop_size) if self.crop_size else None
        data["augment"]["contrast_range"] = list(self.augment.contrast_range)
        data["augment"]["brightness_range"] = list(self.augment.brightness_range)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        aug = dict(data.pop("augment", {}))
        if aug:
            aug["contrast_range"] = tuple(aug["contrast_range"])
            aug["brightness_range"] = tuple(aug["brightness_range"])
        crop = data.pop("crop_size", None)
        return cls(
            **data,
            crop_size=tuple(crop) if crop else None,
            augment=AugmentConfig(**aug) if aug else AugmentConfig(),
        )


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Step decay: lr0 * decay_factor ** floor(epoch / decay_every)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.lr0 * config.decay_factor ** (epoch // config.decay_every)


def mode_filter(manifest: Manifest, mode: str) -> Manifest:
    """Restrict a manifest to the views a training mode consumes."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode in ("multi", "multi-prompt"):
        return manifest
    wanted = "SAX" if mode == "sax" else "LAX"
    entries = [e for e in manifest.entries if e.meta.view == wanted]
    return Manifest(entries=entries, root=manifest.root)


def preprocess_sample(
    image: np.ndarray, mask: np.ndarray, meta: ClipMeta, config: TrainConfig
) -> Sample:
    """The deterministic (non-augmentation) preprocessing applied at train and eval time."""
    if config.crop_size is not None:
        image = center_crop(image, config.crop_size)
        mask = center_crop(mask, config.crop_size)
    if config.num_phases:
        image, mask, ed, es = resample_phases(
            image, mask, config.num_phases, meta.ed_index, meta.es_index
        )
        meta = replace(meta, ed_index=ed, es_index=es)
    image = minmax_normalize(image)
    return image, np.ascontiguousarray(mask), meta


def load_split_samples(manifest: Manifest, split: str, config: TrainConfig) -> list[Sample]:
    samples = []
    for entry in manifest.entries:
        if entry.split != split:
            continue
        clip, mask = load_clip(manifest.resolve(entry))
        meta = replace(clip.meta, scan_id=entry.meta.scan_id)
        samples.append(preprocess_sample(clip.data, mask.data, meta, config))
    return samples


def _train_dice(logits: torch.Tensor, target: torch.Tensor) -> float:
    preds = (logits.detach() >= 0).cpu().numpy().astype(np.uint8)
    gt = target.detach().cpu().numpy().astype(np.uint8)
    return float(np.mean([dice_score(preds[i], gt[i]) for i in range(preds.shape[0])]))


def optimizer_state_dict(optimizer: MADGRAD, names: list[str]) -> dict:
    tensors = {}
    step = 0
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for name, p in zip(names, params):
        state = optimizer.state.get(p, {})
        if not state:
            continue
        step = state["step"]
        tensors[name] = {
            "grad_sum_sq": state["grad_sum_sq"].detach().cpu().numpy().copy(),
            "s": state["s"].detach().cpu().numpy().copy(),
        }
        if "x0" in state:
            tensors[name]["x0"] = state["x0"].detach().cpu().numpy().copy()
    return {"step": step, "tensors": tensors}


def restore_optimizer(
    optimizer: MADGRAD, names: list[str], opt_state: dict
) -> None:
    params = [p for g in optimizer.param_groups for p in g["params"]]
    for name, p in zip(names, params):
        if name not in opt_state["tensors"]:
            continue
        bufs = opt_state["tensors"][name]
        state = optimizer.state[p]
        state["step"] = opt_state["step"]
        state["grad_sum_sq"] = torch.from_numpy(bufs["grad_sum_sq"].copy())
        state["s"] = torch.from_numpy(bufs["s"].copy())
        if "x0" in bufs:
            state["x0"] = torch.from_numpy(bufs["x0"].copy())


def _write_log(history: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "loss", "train_dice", "wall_seconds"])
        for row in history:
            writer.writerow(
                [
                    row["epoch"],
                    f"{row['lr']:.10g}",
                    f"{row['loss']:.10g}",
                    "" if row.get("train_dice") is None else f"{row['train_dice']:.6f}",
                    f"{row.get('wall_seconds', 0.0):.3f}",
                ]
            )


def train_loop(
    model: SegmentationNetwork,
    partition: ParameterPartition,
    manifest: Manifest,
    config: TrainConfig,
    *,
    out_dir: str | Path | None = None,
    start_epoch: int = 0,
    optimizer: MADGRAD | None = None,
    history: list[dict] | None = None,
    verbose: bool = False,
) -> tuple[Checkpoint, list[dict]]:
    """Run the training schedule and return the final checkpoint plus the log.

    Mode selects the clips and the prompt behaviour: `sax`/`lax` filter to one
    view, `multi` mixes both without prompts, `multi-prompt` mixes both and
    feeds each clip's view prompt to the decoder.
    """
    config.validate()
    partition.validate(model)
    filtered = mode_filter(manifest, config.mode)
    samples = load_split_samples(filtered, "train", config)
    if not samples:
        raise ValueError(f"no training clips in manifest for mode {config.mode!r}")
    if verbose:
        print(f"training on {len(samples)} clips (mode={config.mode})")

    names = [n for n in partition.trainable]
    lookup = dict(model.named_parameters())
    params = [lookup[n] for n in names]
    if optimizer is None:
        optimizer = MADGRAD(
            params, lr=config.lr0, momentum=config.momentum, eps=config.optimizer_eps, names=names
        )
    history = list(history) if history else []
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def emit(epoch: int) -> Checkpoint:
        ckpt = checkpoint_from_model(
            model,
            partition,
            epoch,
            config.to_dict(),
            [{k: v for k, v in row.items() if k != "wall_seconds"} for row in history],
            optimizer_state_dict(optimizer, names),
        )
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint_final.ckpt", ckpt)
            _write_log(history, out_dir / "train_log.csv")
        return ckpt

    model.train()
    for epoch in range(start_epoch, config.epochs):
        tic = time.monotonic()
        lr = lr_at_epoch(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        loss_sum = 0.0
        dice_sum = 0.0
        count = 0
        for images, masks, metas in iterate_batches(
            filtered, "train", config.batch_size, config.seed, epoch=epoch, samples=samples
        ):
            if config.augment_enabled:
                for i, meta in enumerate(metas):
                    clip_seed = derive_seed(
                        config.seed, "augment", epoch, meta.scan_id, meta.view, meta.slice_position
                    )
                    images[i, 0], masks[i, 0] = augment(
                        images[i, 0], masks[i, 0], clip_seed, config.augment
                    )
            x = torch.from_numpy(images)
            y = torch.from_numpy(masks.astype(np.float32))
            views = [m.view for m in metas] if config.mode == "multi-prompt" else None
            logits = model(x, views)
            loss = combined_loss(logits, y, config.w_bce, config.w_dice, config.dice_smooth)
            if not torch.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            batch = images.shape[0]
            loss_sum += float(loss.detach()) * batch
            if config.log_train_dice:
                dice_sum += _train_dice(logits, y) * batch
            count += batch
        row = {
            "epoch": epoch,
            "lr": lr,
            "loss": loss_sum / count,
            "train_dice": (dice_sum / count) if config.log_train_dice else None,
            "wall_seconds": time.monotonic() - tic,
        }
        history.append(row)
        if verbose:
            dice_text = "" if row["train_dice"] is None else f" dice={row['train_dice']:.4f}"
            print(f"epoch {epoch}: lr={lr:.2e} loss={row['loss']:.5f}{dice_text}")
        if (
            out_dir is not None
            and config.checkpoint_every
            and (epoch + 1) % config.checkpoint_every == 0
            and epoch + 1 < config.epochs
        ):
            ckpt = emit(epoch + 1)
            save_checkpoint(out_dir / f"checkpoint_{epoch + 1:05d}.ckpt", ckpt)

    return emit(config.epochs), history


def gradient_check(
    model: SegmentationNetwork,
    image: torch.Tensor,
    target: torch.Tensor,
    *,
    view=None,
    w_bce: float = 0.5,
    w_dice: float = 0.5,
    dice_smooth: float = 1.0,
    coords_per_param: int = 2,
    min_coords: int = 200,
    step: float = 1e-5,
    seed: int = 0,
) -> dict:
    """Compare backprop gradients against central finite differences.

    Runs in double precision. Relative error uses a 1e-6 floor: below that,
    both sides sit in finite-difference roundoff. Frozen parameters carry no
    gradient and are excluded. Returns per-parameter max errors plus the
    overall max and coordinate count.
    """
    model = model.double()
    x = image.double()
    y = target.double()

    def loss_value() -> torch.Tensor:
        return combined_loss(model(x, view), y, w_bce, w_dice, dice_smooth)

    model.zero_grad()
    loss_value().backward()
    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]

    rng = np.random.default_rng(seed)
    coords: list[tuple[str, torch.Tensor, int]] = []
    for name, p in trainable:
        n = min(coords_per_param, p.numel())
        for idx in rng.choice(p.numel(), size=n, replace=False):
            coords.append((name, p, int(idx)))
    while len(coords) < min_coords:
        name, p = trainable[int(rng.integers(len(trainable)))]
        coords.append((name, p, int(rng.integers(p.numel()))))

    per_group: dict[str, float] = {}
    with torch.no_grad():
        for name, p, idx in coords:
            flat = p.view(-1)
            analytic = float(p.grad.view(-1)[idx])
            original = float(flat[idx])
            flat[idx] = original + step
            plus = float(loss_value())
            flat[idx] = original - step
            minus = float(loss_value())
            flat[idx] = original
            fd = (plus - minus) / (2.0 * step)
            rel = abs(analytic - fd) / max(1e-6, abs(analytic), abs(fd))
            per_group[name] = max(per_group.get(name, 0.0), rel)

    return {
        "per_group": per_group,
        "max_rel_error": max(per_group.values()),
        "num_coords": len(coords),
        "num_groups": len(trainable),
    }
