"""2D+T cine myocardium segmentation with factorized space-time attention.

Library layout:
    phantom     synthetic contracting-annulus/horseshoe cine clips
    dataset     clip container format, manifests, splits, batching
    preprocess  crop, phase resampling, normalization, augmentation
    model       encoder/attention-stack/decoder network + freeze partition
    train       losses, MADGRAD, LR schedule, training loop, gradient check
    metrics     Dice, boundary Hausdorff, stratified reports
    checkpoint  versioned parameter/optimizer container
    cli         `cineseg` command-line entry point
"""

from .dataset import CineClip, ClipMeta, Manifest, MaskClip, load_clip, save_clip
from .metrics import binarize, dice_score, hausdorff_distance, stratified_report
from .model import ModelConfig, ParameterPartition, SegmentationNetwork, build_model, count_parameters
from .phantom import PhantomParams, ScanSpec, generate_dataset, generate_lax_clip, generate_sax_clip
from .train import MADGRAD, TrainConfig, bce_loss, combined_loss, dice_loss, lr_at_epoch, train_loop

__version__ = "0.1.0"

__all__ = [
    "CineClip",
    "ClipMeta",
    "Manifest",
    "MaskClip",
    "ModelConfig",
    "ParameterPartition",
    "PhantomParams",
    "ScanSpec",
    "SegmentationNetwork",
    "TrainConfig",
    "MADGRAD",
    "bce_loss",
    "binarize",
    "build_model",
    "combined_loss",
    "count_parameters",
    "dice_loss",
    "dice_score",
    "generate_dataset",
    "generate_lax_clip",
    "generate_sax_clip",
    "hausdorff_distance",
    "load_clip",
    "lr_at_epoch",
    "save_clip",
    "stratified_report",
    "train_loop",
]
