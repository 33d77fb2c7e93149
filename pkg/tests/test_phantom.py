import hashlib
import math
from dataclasses import replace

import numpy as np
import pytest

from cineseg.phantom import (
    JitterRanges,
    PhantomParams,
    ScanSpec,
    default_lax_basal_row,
    default_params_for_size,
    generate_dataset,
    generate_lax_clip,
    generate_sax_clip,
    generate_scan,
    radii_at_phase,
    read_scan_specs,
)

MID = PhantomParams()  # 64x64, mid-slice defaults


def test_zero_contraction_gives_constant_mask():
    params = replace(MID, contraction_fraction=0.0)
    _, mask = generate_sax_clip(params)
    areas = mask.data.sum(axis=(0, 1))
    assert np.all(areas == areas[0])
    for t in range(params.num_phases):
        assert np.array_equal(mask.data[:, :, t], mask.data[:, :, 0])


def test_noiseless_background_is_exactly_zero():
    params = replace(MID, noise_sigma=0.0, intensity_bg=0.0)
    clip, mask = generate_sax_clip(params)
    outside = mask.data[:, :, 0] == 0
    # blood pool is inside the annulus; restrict to true background
    cy, cx = params.center
    rows = np.arange(params.height)[:, None]
    cols = np.arange(params.width)[None, :]
    r_out, _ = radii_at_phase(params, 0)
    background = outside & (np.hypot(rows - cy, cols - cx) > r_out)
    assert np.all(clip.data[:, :, 0][background] == 0.0)


def test_mask_area_minimal_at_es_pixel_count_oracle():
    clip, mask = generate_sax_clip(MID)
    areas = [int(mask.data[:, :, t].sum()) for t in range(MID.num_phases)]
    ed, es = clip.meta.ed_index, clip.meta.es_index
    assert areas[es] < areas[ed]
    assert areas[ed] == max(areas)
    assert areas[es] == min(areas)


def test_monotone_systole_extrema_positions():
    clip, mask = generate_sax_clip(replace(MID, noise_sigma=0.0))
    areas = mask.data.sum(axis=(0, 1))
    assert clip.meta.ed_index == 0
    assert clip.meta.es_index == round(MID.num_phases / 2)


def test_mask_pixels_carry_exact_myo_intensity():
    params = replace(MID, noise_sigma=0.0)
    clip, mask = generate_sax_clip(params)
    assert np.all(clip.data[mask.data == 1] == np.float32(params.intensity_myo))


def test_image_values_clamped_to_unit_interval():
    clip, _ = generate_sax_clip(replace(MID, noise_sigma=0.3, seed=9))
    assert clip.data.min() >= 0.0 and clip.data.max() <= 1.0


def test_same_seed_bit_identical():
    a_clip, a_mask = generate_sax_clip(MID)
    b_clip, b_mask = generate_sax_clip(MID)
    assert a_clip.data.tobytes() == b_clip.data.tobytes()
    assert a_mask.data.tobytes() == b_mask.data.tobytes()
    assert a_clip.meta == b_clip.meta


@pytest.mark.parametrize(
    "bad",
    [
        dict(outer_radius_ed=5.0, wall_thickness_ed=7.0),
        dict(wall_thickness_ed=0.0),
        dict(contraction_fraction=1.0),
        dict(contraction_fraction=-0.1),
        dict(outer_radius_ed=40.0),  # margin violation on a 64-pixel grid
        dict(noise_sigma=-0.01),
        dict(intensity_blood=1.5),
        dict(slice_position="middle"),
        dict(num_phases=1),
        dict(contraction_fraction=0.7),  # inner radius collapses
    ],
)
def test_invalid_params_rejected(bad):
    with pytest.raises(ValueError):
        generate_sax_clip(replace(MID, **bad))


def test_lax_zero_contraction_constant():
    _, mask = generate_lax_clip(replace(MID, contraction_fraction=0.0))
    for t in range(MID.num_phases):
        assert np.array_equal(mask.data[:, :, t], mask.data[:, :, 0])


def test_lax_rows_above_cut_are_bars_only_per_row_oracle():
    params = replace(MID, noise_sigma=0.0)
    _, mask = generate_lax_clip(params)
    cy, cx = params.center
    basal = default_lax_basal_row(params)
    for t in range(params.num_phases):
        r_out, r_in = radii_at_phase(params, t)
        for row in range(math.ceil(cy)):
            got = set(np.nonzero(mask.data[row, :, t])[0])
            if row < basal:
                expected = set()
            else:
                expected = {
                    c
                    for c in range(params.width)
                    if r_in < abs(c - cx) <= r_out
                }
            assert got == expected, f"row {row}, phase {t}"


def test_lax_same_seed_bit_identical():
    a_clip, a_mask = generate_lax_clip(MID)
    b_clip, b_mask = generate_lax_clip(MID)
    assert a_clip.data.tobytes() == b_clip.data.tobytes()
    assert a_mask.data.tobytes() == b_mask.data.tobytes()


def _dir_digest(path):
    digest = hashlib.sha256()
    for p in sorted(path.iterdir()):
        digest.update(p.name.encode())
        digest.update(p.read_bytes())
    return digest.hexdigest()


def test_generate_dataset_counts_and_determinism(tmp_path):
    views = (("SAX", "basal"), ("SAX", "mid"), ("SAX", "apical"))
    specs = [ScanSpec(f"scan{i:03d}", seed=40 + i, views=views) for i in range(3)]
    manifest = generate_dataset(specs, tmp_path / "a")
    assert len(manifest.entries) == 9
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.tsv" in files and len(files) == 10

    generate_dataset(specs, tmp_path / "b")
    assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")


def test_generate_dataset_empty_specs(tmp_path):
    manifest = generate_dataset([], tmp_path / "empty")
    assert manifest.entries == []
    assert sorted(p.name for p in (tmp_path / "empty").iterdir()) == ["manifest.tsv"]


def test_generate_dataset_duplicate_scan_id(tmp_path):
    views = (("SAX", "mid"),)
    specs = [ScanSpec("scanX", 1, views), ScanSpec("scanX", 2, views)]
    with pytest.raises(ValueError, match="duplicate"):
        generate_dataset(specs, tmp_path)


def test_jittered_scans_differ_but_are_reproducible():
    views = (("SAX", "mid"), ("LAX", "mid"))
    a = ScanSpec("s0", seed=7, views=views, jitter=JitterRanges())
    b = ScanSpec("s1", seed=8, views=views, jitter=JitterRanges())
    clips_a = [c.data.tobytes() for c, _ in generate_scan(a)]
    clips_b = [c.data.tobytes() for c, _ in generate_scan(b)]
    assert clips_a != clips_b
    clips_a2 = [c.data.tobytes() for c, _ in generate_scan(a)]
    assert clips_a == clips_a2


def test_read_scan_specs(tmp_path):
    text = "# demo scans\nscan000 11 SAX:basal,SAX:mid\nscan001 12 LAX:mid\n"
    path = tmp_path / "scans.txt"
    path.write_text(text)
    specs = read_scan_specs(path)
    assert [s.scan_id for s in specs] == ["scan000", "scan001"]
    assert specs[0].views == (("SAX", "basal"), ("SAX", "mid"))
    assert specs[1].seed == 12
    with pytest.raises(ValueError, match="bad view token"):
        bad = tmp_path / "bad.txt"
        bad.write_text("scan queue SAX:everywhere\n".replace("queue", "3"))
        read_scan_specs(bad)


def test_default_params_scale_with_grid():
    small = default_params_for_size(32, 8)
    small.validate()
    assert small.height == small.width == 32
    assert small.num_phases == 8
    assert small.outer_radius_ed == pytest.approx(10.0)
