import math

import numpy as np
import pytest

from cineseg.metrics import (
    ClipMetrics,
    binarize,
    boundary_points,
    clip_hausdorff,
    dice_score,
    evaluate_clip,
    hausdorff_distance,
    report_csv,
    report_json,
    stratified_report,
)


# ------------------------------------------------------------------- oracles

def brute_force_dice(pred, gt):
    p = {tuple(idx) for idx in np.argwhere(pred != 0)}
    g = {tuple(idx) for idx in np.argwhere(gt != 0)}
    if not p and not g:
        return 1.0
    return 2.0 * len(p & g) / (len(p) + len(g))


def brute_force_boundary(mask):
    h, w = mask.shape
    points = []
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            neighbors = []
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                neighbors.append(mask[rr, cc] if 0 <= rr < h and 0 <= cc < w else 0)
            if not all(neighbors):
                points.append((r, c))
    return points


def brute_force_hausdorff(pred, gt):
    a = brute_force_boundary(pred)
    b = brute_force_boundary(gt)
    h_ab = max(min(math.sqrt((ra - rb) ** 2 + (ca - cb) ** 2) for rb, cb in b) for ra, ca in a)
    h_ba = max(min(math.sqrt((ra - rb) ** 2 + (ca - cb) ** 2) for ra, ca in a) for rb, cb in b)
    return max(h_ab, h_ba)


def random_mask(rng, size=16):
    # random blob: a few filled rectangles, guaranteed non-empty
    mask = np.zeros((size, size), dtype=np.uint8)
    for _ in range(rng.integers(1, 4)):
        r0, c0 = rng.integers(0, size - 2, size=2)
        r1 = rng.integers(r0 + 1, min(size, r0 + 7))
        c1 = rng.integers(c0 + 1, min(size, c0 + 7))
        mask[r0:r1, c0:c1] = 1
    return mask


# -------------------------------------------------------------------- binarize

def test_binarize_threshold_convention():
    probs = np.full((3, 3), 0.5)
    assert np.all(binarize(probs) == 1)
    assert np.all(binarize(np.full((3, 3), 0.49)) == 0)


def test_binarize_idempotent():
    rng = np.random.default_rng(0)
    probs = rng.random((8, 8))
    once = binarize(probs)
    assert np.array_equal(binarize(once), once)


# ----------------------------------------------------------------------- dice

def test_dice_identical_and_disjoint():
    mask = np.zeros((6, 6), dtype=np.uint8)
    mask[1:4, 1:4] = 1
    assert dice_score(mask, mask) == 1.0
    other = np.zeros_like(mask)
    other[4:6, 4:6] = 1
    assert dice_score(mask, other) == 0.0


def test_dice_shifted_block_is_half():
    p = np.zeros((5, 5), dtype=np.uint8)
    g = np.zeros_like(p)
    p[1:3, 1:3] = 1
    g[1:3, 2:4] = 1  # overlap is a 2x1 strip: 2 of 4 pixels each
    assert dice_score(p, g) == 0.5


def test_dice_empty_convention_and_symmetry():
    empty = np.zeros((4, 4), dtype=np.uint8)
    assert dice_score(empty, empty) == 1.0
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = random_mask(rng), random_mask(rng)
        assert dice_score(a, b) == dice_score(b, a)
        assert dice_score(a, b) == brute_force_dice(a, b)


def test_dice_translation_invariance():
    rng = np.random.default_rng(2)
    a = np.zeros((16, 16), dtype=np.uint8)
    b = np.zeros_like(a)
    a[4:8, 4:9] = 1
    b[5:8, 3:9] = 1
    shifted_a = np.roll(a, (2, 3), axis=(0, 1))
    shifted_b = np.roll(b, (2, 3), axis=(0, 1))
    assert dice_score(a, b) == dice_score(shifted_a, shifted_b)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        dice_score(np.zeros((3, 3)), np.zeros((4, 4)))


# ------------------------------------------------------------------- hausdorff

def test_boundary_border_counts_as_background():
    full = np.ones((5, 7), dtype=np.uint8)
    points = {tuple(p) for p in boundary_points(full)}
    expected = {
        (r, c)
        for r in range(5)
        for c in range(7)
        if r in (0, 4) or c in (0, 6)
    }
    assert points == expected


def test_hausdorff_identical_masks():
    m = np.zeros((8, 8), dtype=np.uint8)
    m[2:6, 2:6] = 1
    assert hausdorff_distance(m, m) == 0.0


def test_hausdorff_single_pixels():
    a = np.zeros((8, 8), dtype=np.uint8)
    b = np.zeros_like(a)
    a[0, 0] = 1
    b[3, 4] = 1
    assert hausdorff_distance(a, b) == 5.0


def test_hausdorff_matches_brute_force_exactly():
    rng = np.random.default_rng(3)
    for _ in range(40):
        a, b = random_mask(rng), random_mask(rng)
        assert hausdorff_distance(a, b) == brute_force_hausdorff(a, b)
        assert hausdorff_distance(a, b) == hausdorff_distance(b, a)


def test_hausdorff_zero_iff_equal_boundaries():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = random_mask(rng), random_mask(rng)
        hd = hausdorff_distance(a, b)
        same_boundary = {tuple(p) for p in boundary_points(a)} == {
            tuple(p) for p in boundary_points(b)
        }
        assert (hd == 0.0) == same_boundary


def test_hausdorff_requires_nonempty():
    empty = np.zeros((4, 4), dtype=np.uint8)
    filled = np.ones((4, 4), dtype=np.uint8)
    with pytest.raises(ValueError, match="non-empty"):
        hausdorff_distance(empty, filled)


def test_clip_hausdorff_excludes_empty_phases():
    pred = np.zeros((6, 6, 3), dtype=np.uint8)
    gt = np.zeros_like(pred)
    pred[2:4, 2:4, 0] = 1
    gt[2:4, 2:4, 0] = 1
    gt[1:3, 1:3, 1] = 1  # pred empty at phase 1 -> excluded
    hd, excluded = clip_hausdorff(pred, gt)
    assert hd == 0.0
    assert excluded == 2  # phase 1 (pred empty) and phase 2 (both empty)

    all_empty, excluded = clip_hausdorff(np.zeros_like(pred), np.zeros_like(gt))
    assert all_empty is None
    assert excluded == 3


# --------------------------------------------------------------------- report

def _row(scan, slice_position, dice, hd=1.0, view="SAX"):
    return ClipMetrics(scan, view, slice_position, 4, dice, hd)


def test_report_group_means():
    rows = [
        _row("a", "basal", 0.8),
        _row("b", "mid", 0.9),
        _row("c", "apical", 0.7),
    ]
    report = stratified_report(rows)
    assert report.groups["all"].dice_mean == pytest.approx(0.8)
    assert report.groups["basal"].dice_mean == pytest.approx(0.8)
    assert report.groups["mid"].count == 1
    assert report.groups["view:SAX"].count == 3


def test_report_single_row():
    report = stratified_report([_row("a", "mid", 0.75, hd=2.5)])
    for name in ("all", "mid", "view:SAX"):
        assert report.groups[name].dice_mean == pytest.approx(0.75)
        assert report.groups[name].hd_mean == pytest.approx(2.5)


def test_report_excludes_missing_hd_from_hd_mean_only():
    rows = [_row("a", "mid", 0.9, hd=2.0), _row("b", "mid", 0.7, hd=None)]
    report = stratified_report(rows)
    assert report.groups["all"].dice_mean == pytest.approx(0.8)
    assert report.groups["all"].hd_mean == pytest.approx(2.0)
    assert report.groups["all"].hd_count == 1


def test_report_empty_input():
    report = stratified_report([])
    assert report.rows == [] and report.groups == {}
    assert report_json(report) == '{\n  "groups": {}\n}\n'


def test_report_bytes_deterministic():
    rows = [_row("b", "mid", 0.9), _row("a", "apical", 0.6)]
    a = (report_csv(stratified_report(rows)), report_json(stratified_report(rows)))
    b = (report_csv(stratified_report(list(rows))), report_json(stratified_report(list(rows))))
    assert a == b
    # rows are sorted by scan id in the emitted CSV
    lines = a[0].splitlines()
    assert lines[1].startswith("a,") and lines[2].startswith("b,")


def test_evaluate_clip_end_to_end():
    rng = np.random.default_rng(5)
    gt = np.stack([random_mask(rng) for _ in range(3)], axis=2)
    meta = type("M", (), {"scan_id": "s", "view": "SAX", "slice_position": "mid"})()
    row = evaluate_clip(gt, gt, meta)
    assert row.dice == 1.0 and row.hd == 0.0 and row.num_phases == 3
