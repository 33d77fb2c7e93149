"""Clip containers, manifests, train/test splitting, and batched iteration.

Clip container layout (little-endian):
    magic "CMRC" | version u32 | H u32 | W u32 | T u32 | view u8 |
    slice_position u8 | ed u16 | es u16 |
    H*W*T float32 image values, row-major (H, W, T) |
    H*W*T uint8 mask values, same order

Manifest: UTF-8 text, one clip per line,
    path<TAB>scan_id<TAB>view<TAB>slice_position<TAB>ed<TAB>es<TAB>split
with paths relative to the manifest's directory.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"CMRC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIBBHH")

VIEWS = ("SAX", "LAX")
SLICE_POSITIONS = ("basal", "mid", "apical", "not_applicable")
_VIEW_CODES = {"SAX": 0, "LAX": 1}
_SLICE_CODES = {"basal": 0, "mid": 1, "apical": 2, "not_applicable": 255}
_VIEW_NAMES = {v: k for k, v in _VIEW_CODES.items()}
_SLICE_NAMES = {v: k for k, v in _SLICE_CODES.items()}


class ClipFormatError(ValueError):
    """Raised when a clip container fails to parse; names the offending field."""


@dataclass
class ClipMeta:
    scan_id: str
    view: str
    slice_position: str
    ed_index: int
    es_index: int

    def validate(self, num_phases: int) -> None:
        if self.view not in _VIEW_CODES:
            raise ValueError(f"unknown view {self.view!r}; expected one of {VIEWS}")
        if self.slice_position not in _SLICE_CODES:
            raise ValueError(
                f"unknown slice_position {self.slice_position!r}; "
                f"expected one of {SLICE_POSITIONS}"
            )
        if not (0 <= self.ed_index < num_phases and 0 <= self.es_index < num_phases):
            raise ValueError(
                f"ed/es indices ({self.ed_index}, {self.es_index}) out of range "
                f"for {num_phases} phases"
            )
        if self.ed_index == self.es_index:
            raise ValueError(f"ed_index equals es_index ({self.ed_index})")


@dataclass
class CineClip:
    """H x W x T scalar image volume plus acquisition metadata."""

    data: np.ndarray
    meta: ClipMeta

    def validate(self) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"clip data must be (H, W, T), got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"clip dimensions must be >= 1, got {self.data.shape}")
        self.meta.validate(self.data.shape[2])


@dataclass
class MaskClip:
    """H x W x T binary labels (1 = myocardium) aligned to a CineClip."""

    data: np.ndarray

    def validate(self, clip: CineClip | None = None) -> None:
        if self.data.ndim != 3:
            raise ValueError(f"mask data must be (H, W, T), got shape {self.data.shape}")
        values = np.unique(self.data)
        if not np.isin(values, (0, 1)).all():
            raise ValueError(f"mask values must be binary, found {values[:8]}")
        if clip is not None and clip.data.shape != self.data.shape:
            raise ValueError(
                f"mask shape {self.data.shape} does not match clip shape {clip.data.shape}"
            )


def save_clip(clip: CineClip, mask: MaskClip, path: str | Path) -> None:
    """Write a clip/mask pair in the container format; round-trips bit-exactly."""
    clip.validate()
    mask.validate(clip)
    h, w, t = clip.data.shape
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        h,
        w,
        t,
        _VIEW_CODES[clip.meta.view],
        _SLICE_CODES[clip.meta.slice_position],
        clip.meta.ed_index,
        clip.meta.es_index,
    )
    image = np.ascontiguousarray(clip.data, dtype="<f4")
    labels = np.ascontiguousarray(mask.data, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(image.tobytes())
        fh.write(labels.tobytes())


def load_clip(path: str | Path) -> tuple[CineClip, MaskClip]:
    """Parse a clip container, raising ClipFormatError naming the bad field."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ClipFormatError(f"{path}: truncated header ({len(blob)} bytes)")
    magic, version, h, w, t, view_code, slice_code, ed, es = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ClipFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ClipFormatError(f"{path}: unsupported version {version}")
    if view_code not in _VIEW_NAMES:
        raise ClipFormatError(f"{path}: unknown view code {view_code}")
    if slice_code not in _SLICE_NAMES:
        raise ClipFormatError(f"{path}: unknown slice_position code {slice_code}")
    voxels = h * w * t
    if min(h, w, t) < 1 or voxels > 2**31:
        raise ClipFormatError(f"{path}: dimensions ({h}, {w}, {t}) out of range")
    expected = _HEADER.size + voxels * 5
    if len(blob) < expected:
        raise ClipFormatError(
            f"{path}: truncated payload; header declares {h}x{w}x{t} "
            f"({expected} bytes) but file has {len(blob)}"
        )
    if ed >= t or es >= t:
        raise ClipFormatError(f"{path}: ed/es ({ed}, {es}) out of range for T={t}")
    image = np.frombuffer(blob, dtype="<f4", count=voxels, offset=_HEADER.size)
    labels = np.frombuffer(blob, dtype=np.uint8, count=voxels, offset=_HEADER.size + voxels * 4)
    meta = ClipMeta(
        scan_id="",
        view=_VIEW_NAMES[view_code],
        slice_position=_SLICE_NAMES[slice_code],
        ed_index=ed,
        es_index=es,
    )
    clip = CineClip(data=image.reshape(h, w, t).copy(), meta=meta)
    mask = MaskClip(data=labels.reshape(h, w, t).copy())
    mask.validate(clip)
    return clip, mask


@dataclass
class ManifestEntry:
    path: str
    meta: ClipMeta
    split: str


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path | None = None

    def scan_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for entry in self.entries:
            seen.setdefault(entry.meta.scan_id, None)
        return list(seen)

    def resolve(self, entry: ManifestEntry) -> Path:
        path = Path(entry.path)
        if path.is_absolute() or self.root is None:
            return path
        return self.root / path


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    lines = []
    for e in manifest.entries:
        m = e.meta
        lines.append(
            f"{e.path}\t{m.scan_id}\t{m.view}\t{m.slice_position}"
            f"\t{m.ed_index}\t{m.es_index}\t{e.split}"
        )
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(fields)}")
        clip_path, scan_id, view, slice_position, ed, es, split = fields
        if split not in ("train", "test"):
            raise ValueError(f"{path}:{lineno}: unknown split {split!r}")
        meta = ClipMeta(scan_id, view, slice_position, int(ed), int(es))
        entries.append(ManifestEntry(clip_path, meta, split))
    return Manifest(entries=entries, root=path.parent)


def split_manifest(manifest: Manifest, train_fraction: float, seed: int) -> Manifest:
    """Reassign splits scan-wise: shuffle scan ids by seed, then partition.

    All clips of one scan land on the same side, so no scan straddles the split.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    scans = sorted(manifest.scan_ids())
    if len(scans) < 2:
        raise ValueError(f"need at least 2 scans to split, got {len(scans)}")
    rng = np.random.default_rng(seed)
    order = [scans[i] for i in rng.permutation(len(scans))]
    n_train = int(round(train_fraction * len(scans)))
    n_train = min(max(n_train, 1), len(scans) - 1)
    train_ids = set(order[:n_train])
    entries = [
        replace(e, split="train" if e.meta.scan_id in train_ids else "test")
        for e in manifest.entries
    ]
    return Manifest(entries=entries, root=manifest.root)


Sample = tuple[np.ndarray, np.ndarray, ClipMeta]


def load_samples(manifest: Manifest, split: str) -> list[Sample]:
    """Load every clip of a split as (image, mask, meta) volumes, manifest order."""
    samples = []
    for entry in manifest.entries:
        if entry.split != split:
            continue
        clip, mask = load_clip(manifest.resolve(entry))
        meta = replace(clip.meta, scan_id=entry.meta.scan_id)
        samples.append((clip.data, mask.data, meta))
    return samples


def iterate_batches(
    manifest: Manifest,
    split: str,
    batch_size: int,
    shuffle_seed: int,
    *,
    epoch: int = 0,
    samples: Sequence[Sample] | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray, list[ClipMeta]]]:
    """Yield (images B x 1 x H x W x T, masks likewise, metas) batches.

    Every clip of the split appears exactly once per epoch; the last batch may
    be smaller. Order is a pure function of (shuffle_seed, epoch). `samples`
    short-circuits disk loads with preloaded (and possibly preprocessed) volumes
    aligned with the split's manifest order.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if samples is None:
        samples = load_samples(manifest, split)
    if not samples:
        return
    shapes = {s[0].shape for s in samples}
    if len(shapes) > 1:
        offenders = sorted(
            f"{meta.scan_id}/{meta.view}/{meta.slice_position}{img.shape}"
            for img, _, meta in samples
        )
        raise ValueError(f"clips in split {split!r} have heterogeneous dimensions: {offenders}")
    rng = np.random.default_rng([shuffle_seed, epoch])
    order = rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        images = np.stack([samples[i][0] for i in chunk])[:, None].astype(np.float32)
        masks = np.stack([samples[i][1] for i in chunk])[:, None]
        metas = [samples[i][2] for i in chunk]
        yield images, masks, metas
