"""Deterministic contracting-annulus cine phantoms with exact ground truth.

A short-axis clip is a ring (myocardium) around a bright pool (blood) that
contracts and relaxes over the cardiac cycle; a long-axis clip is the same ring
cut at the level of the center row and extended upward into a horseshoe. Every
voxel is a pure function of the parameter record, including the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import (
    CineClip,
    ClipMeta,
    Manifest,
    ManifestEntry,
    MaskClip,
    save_clip,
    write_manifest,
)
from .seeding import derive_seed

RADIUS_SCALES = {"basal": 1.0, "mid": 0.85, "apical": 0.6}


@dataclass(frozen=True)
class PhantomParams:
    height: int = 64
    width: int = 64
    num_phases: int = 12
    center: tuple[float, float] = (31.5, 31.5)
    outer_radius_ed: float = 20.0
    wall_thickness_ed: float = 7.0
    contraction_fraction: float = 0.35
    slice_position: str = "mid"
    radius_scale: float = 0.85
    intensity_myo: float = 0.35
    intensity_blood: float = 0.85
    intensity_bg: float = 0.12
    noise_sigma: float = 0.03
    seed: int = 0
    lax_basal_row: int | None = None

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ValueError(f"grid {self.height}x{self.width} too small")
        if self.num_phases < 2:
            raise ValueError(f"num_phases must be >= 2, got {self.num_phases}")
        if not self.outer_radius_ed > self.wall_thickness_ed > 0:
            raise ValueError(
                f"need outer_radius_ed > wall_thickness_ed > 0, got "
                f"{self.outer_radius_ed} and {self.wall_thickness_ed}"
            )
        if not 0.0 <= self.contraction_fraction < 1.0:
            raise ValueError(
                f"contraction_fraction must be in [0, 1), got {self.contraction_fraction}"
            )
        # inner radius must stay positive at peak contraction
        if self.outer_radius_ed * (1.0 - self.contraction_fraction) <= self.wall_thickness_ed:
            raise ValueError("contraction collapses the inner radius below zero")
        if self.slice_position not in RADIUS_SCALES:
            raise ValueError(
                f"unknown slice_position {self.slice_position!r}; "
                f"expected one of {tuple(RADIUS_SCALES)}"
            )
        if self.radius_scale <= 0:
            raise ValueError(f"radius_scale must be positive, got {self.radius_scale}")
        for name in ("intensity_myo", "intensity_blood", "intensity_bg"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        r_max = self.radius_scale * self.outer_radius_ed
        cy, cx = self.center
        if (
            cy - r_max < 2
            or cx - r_max < 2
            or cy + r_max > self.height - 3
            or cx + r_max > self.width - 3
        ):
            raise ValueError(
                f"annulus of radius {r_max:.2f} at {self.center} does not fit the "
                f"{self.height}x{self.width} grid with a 2-pixel margin"
            )
        if self.lax_basal_row is not None and not 2 <= self.lax_basal_row < cy:
            raise ValueError(
                f"lax_basal_row must lie in [2, center row), got {self.lax_basal_row}"
            )


def contraction_factor(params: PhantomParams, t: int) -> float:
    """Radial scale c(t): 1 at t=0, minimal (1 - contraction_fraction) at mid-cycle."""
    phase = 2.0 * math.pi * t / params.num_phases
    return 1.0 - params.contraction_fraction * (1.0 - math.cos(phase)) / 2.0


def radii_at_phase(params: PhantomParams, t: int) -> tuple[float, float]:
    r_out = params.radius_scale * params.outer_radius_ed * contraction_factor(params, t)
    r_in = r_out - params.radius_scale * params.wall_thickness_ed
    return r_out, r_in


def _ed_es_from_areas(areas: np.ndarray) -> tuple[int, int]:
    # ED = first maximal-area phase; ES = first minimal-area phase other than ED.
    ed = int(np.argmax(areas))
    rest = [t for t in range(len(areas)) if t != ed]
    es = min(rest, key=lambda t: (areas[t], t))
    return ed, es


def _render(params: PhantomParams, myo: np.ndarray, blood: np.ndarray) -> np.ndarray:
    image = np.full(myo.shape, params.intensity_bg, dtype=np.float64)
    image[blood] = params.intensity_blood
    image[myo] = params.intensity_myo
    if params.noise_sigma > 0:
        rng = np.random.default_rng(params.seed)
        image = image + rng.normal(0.0, params.noise_sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def _finish(params: PhantomParams, view: str, myo: np.ndarray, blood: np.ndarray):
    image = _render(params, myo, blood)
    mask = myo.astype(np.uint8)
    areas = mask.sum(axis=(0, 1))
    ed, es = _ed_es_from_areas(areas)
    meta = ClipMeta(
        scan_id="",
        view=view,
        slice_position=params.slice_position,
        ed_index=ed,
        es_index=es,
    )
    return CineClip(data=image, meta=meta), MaskClip(data=mask)


def generate_sax_clip(params: PhantomParams) -> tuple[CineClip, MaskClip]:
    """Short-axis clip: a contracting annulus. A pixel belongs to a region iff
    its center does; no anti-aliasing, so masks are exactly reproducible."""
    params.validate()
    cy, cx = params.center
    rows = np.arange(params.height, dtype=np.float64)[:, None]
    cols = np.arange(params.width, dtype=np.float64)[None, :]
    dist = np.hypot(rows - cy, cols - cx)
    myo = np.zeros((params.height, params.width, params.num_phases), dtype=bool)
    blood = np.zeros_like(myo)
    for t in range(params.num_phases):
        r_out, r_in = radii_at_phase(params, t)
        myo[:, :, t] = (dist <= r_out) & (dist > r_in)
        blood[:, :, t] = dist <= r_in
    return _finish(params, "SAX", myo, blood)


def default_lax_basal_row(params: PhantomParams) -> int:
    cy = params.center[0]
    reach = 1.2 * params.radius_scale * params.outer_radius_ed
    return max(2, int(round(cy - reach)))


def generate_lax_clip(params: PhantomParams) -> tuple[CineClip, MaskClip]:
    """Long-axis clip: the annulus restricted to rows at or below the center
    row, extended upward by two wall bars that stop at the basal row."""
    params.validate()
    cy, cx = params.center
    basal_row = params.lax_basal_row
    if basal_row is None:
        basal_row = default_lax_basal_row(params)
    rows = np.arange(params.height, dtype=np.float64)[:, None]
    cols = np.arange(params.width, dtype=np.float64)[None, :]
    dist = np.hypot(rows - cy, cols - cx)
    col_dist = np.abs(cols - cx) + 0.0 * rows
    lower = rows >= cy
    bar_rows = (rows >= basal_row) & (rows < cy)
    myo = np.zeros((params.height, params.width, params.num_phases), dtype=bool)
    blood = np.zeros_like(myo)
    for t in range(params.num_phases):
        r_out, r_in = radii_at_phase(params, t)
        ring = (dist <= r_out) & (dist > r_in)
        bars = (col_dist <= r_out) & (col_dist > r_in)
        myo[:, :, t] = (lower & ring) | (bar_rows & bars)
        blood[:, :, t] = (lower & (dist <= r_in)) | (bar_rows & (col_dist <= r_in))
    return _finish(params, "LAX", myo, blood)


def generate_clip(params: PhantomParams, view: str) -> tuple[CineClip, MaskClip]:
    if view == "SAX":
        return generate_sax_clip(params)
    if view == "LAX":
        return generate_lax_clip(params)
    raise ValueError(f"unknown view {view!r}; expected 'SAX' or 'LAX'")


def default_params_for_size(size: int, num_phases: int = 12) -> PhantomParams:
    """Default parameter record scaled to a square grid of the given size."""
    scale = size / 64.0
    return PhantomParams(
        height=size,
        width=size,
        num_phases=num_phases,
        center=((size - 1) / 2.0, (size - 1) / 2.0),
        outer_radius_ed=20.0 * scale,
        wall_thickness_ed=7.0 * scale,
    )


def default_jitter_for_size(size: int) -> "JitterRanges":
    scale = size / 64.0
    return JitterRanges(
        center=3.0 * scale, outer_radius=2.0 * scale, wall_thickness=1.0 * scale
    )


@dataclass(frozen=True)
class JitterRanges:
    """Half-widths of uniform per-clip parameter perturbations."""

    center: float = 3.0
    outer_radius: float = 2.0
    wall_thickness: float = 1.0
    contraction: float = 0.06
    intensity: float = 0.05
    noise_sigma: tuple[float, float] = (0.01, 0.04)


@dataclass(frozen=True)
class ScanSpec:
    scan_id: str
    seed: int
    views: tuple[tuple[str, str], ...]  # (view, slice_position) pairs
    base: PhantomParams = field(default_factory=PhantomParams)
    jitter: JitterRanges | None = field(default_factory=JitterRanges)


def _jittered_params(spec: ScanSpec, view: str, slice_position: str) -> PhantomParams:
    clip_seed = derive_seed(spec.seed, view, slice_position)
    base = spec.base
    updates = {
        "slice_position": slice_position,
        "radius_scale": RADIUS_SCALES[slice_position],
        "seed": clip_seed,
    }
    if spec.jitter is not None:
        j = spec.jitter
        rng = np.random.default_rng(clip_seed)
        cy, cx = base.center
        updates["center"] = (
            cy + rng.uniform(-j.center, j.center),
            cx + rng.uniform(-j.center, j.center),
        )
        updates["outer_radius_ed"] = base.outer_radius_ed + rng.uniform(
            -j.outer_radius, j.outer_radius
        )
        updates["wall_thickness_ed"] = base.wall_thickness_ed + rng.uniform(
            -j.wall_thickness, j.wall_thickness
        )
        updates["contraction_fraction"] = float(
            np.clip(
                base.contraction_fraction + rng.uniform(-j.contraction, j.contraction),
                0.0,
                0.95,
            )
        )
        for name in ("intensity_myo", "intensity_blood", "intensity_bg"):
            updates[name] = float(
                np.clip(getattr(base, name) + rng.uniform(-j.intensity, j.intensity), 0.0, 1.0)
            )
        lo, hi = j.noise_sigma
        updates["noise_sigma"] = float(rng.uniform(lo, hi))
    return replace(base, **updates)


def generate_scan(spec: ScanSpec) -> list[tuple[CineClip, MaskClip]]:
    clips = []
    for view, slice_position in spec.views:
        params = _jittered_params(spec, view, slice_position)
        clip, mask = generate_clip(params, view)
        clip.meta.scan_id = spec.scan_id
        clips.append((clip, mask))
    return clips


def generate_dataset(specs: list[ScanSpec], out_dir: str | Path) -> Manifest:
    """Write one clip container per (scan, view, slice) plus a manifest.tsv.

    Regeneration from identical specs is byte-identical, including the manifest.
    """
    ids = [s.scan_id for s in specs]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ValueError(f"duplicate scan_ids: {dupes}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in specs:
        for (view, slice_position), (clip, mask) in zip(spec.views, generate_scan(spec)):
            name = f"{spec.scan_id}_{view.lower()}_{slice_position}.cmrc"
            try:
                save_clip(clip, mask, out_dir / name)
            except OSError as exc:
                raise OSError(f"failed writing clip {out_dir / name}: {exc}") from exc
            entries.append(ManifestEntry(path=name, meta=clip.meta, split="train"))
    manifest = Manifest(entries=entries, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


def read_scan_specs(path: str | Path, base: PhantomParams | None = None) -> list[ScanSpec]:
    """Parse a plain-text spec file: one scan per line, `id seed views`.

    `views` is a comma-separated list of VIEW:slice tokens, e.g.
    `scan007 42 SAX:basal,SAX:mid,LAX:mid`. Blank lines and #-comments allowed.
    """
    base = base or PhantomParams()
    specs = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ValueError(f"{path}:{lineno}: expected `id seed views`, got {raw!r}")
        scan_id, seed_text, views_text = fields
        views = []
        for token in views_text.split(","):
            view, _, slice_position = token.partition(":")
            if view not in ("SAX", "LAX") or slice_position not in RADIUS_SCALES:
                raise ValueError(f"{path}:{lineno}: bad view token {token!r}")
            views.append((view, slice_position))
        specs.append(ScanSpec(scan_id=scan_id, seed=int(seed_text), views=tuple(views), base=base))
    return specs
