import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labelfuse.errors import InvalidInputError, NoSeedError
from labelfuse.tracker import TrackerConfig, estimate_shift, propagate_mask, track_sequence

H, W = 60, 80
BG = (40, 40, 40)


def square_frame(x0, y0, size=12, color=(220, 30, 30), lab=1, extra=()):
    img = np.empty((H, W, 3), np.uint8)
    img[:] = BG
    mask = np.zeros((H, W), np.uint16)
    for x, y, s, c, l in ((x0, y0, size, color, lab), *extra):
        img[y:y + s, x:x + s] = c
        mask[y:y + s, x:x + s] = l
    return img, mask


def oracle_shift(current, previous, region, radius):
    """Exhaustive search: mean colour agreement of the shifted region, ties to shorter then (dx, dy)."""
    ys, xs = np.nonzero(region)
    best = None
    for dx in range(-radius, radius + 1):
        for dy in range(-radius, radius + 1):
            total = 0.0
            for y, x in zip(ys, xs):
                ty, tx = y + dy, x + dx
                if 0 <= ty < H and 0 <= tx < W:
                    total += np.abs(current[ty, tx].astype(int) - previous[y, x].astype(int)).mean() / 255.0
                else:
                    total += 1.0
            key = (total / len(ys), dx * dx + dy * dy, dx, dy)
            best = key if best is None or key < best else best
    return best[2], best[3]


def test_static_scene_is_fixed_point():
    img, mask = square_frame(20, 20, extra=[(50, 30, 8, (30, 200, 30), 7)])
    assert np.array_equal(propagate_mask(img, img, mask), mask)


def test_translation_3_minus_2():
    prev, mask = square_frame(30, 25)
    cur, expected = square_frame(33, 23)
    out = propagate_mask(cur, prev, mask)
    assert np.array_equal(out, expected)
    assert oracle_shift(cur, prev, mask == 1, 4) == (3, -2)
    assert estimate_shift(cur, prev, mask == 1, 4)[:2] == (3, -2)


@settings(max_examples=15, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(0, 2 ** 31))
def test_shift_matches_exhaustive_oracle(dx, dy, seed):
    rng = np.random.default_rng(seed)
    prev = rng.integers(0, 256, (H, W, 3)).astype(np.uint8)
    cur = np.roll(prev, (dy, dx), axis=(0, 1))
    cur = np.clip(cur.astype(int) + rng.integers(-20, 21, cur.shape), 0, 255).astype(np.uint8)
    region = np.zeros((H, W), bool)
    region[20:26, 30:37] = True
    assert estimate_shift(cur, prev, region, 3)[:2] == oracle_shift(cur, prev, region, 3) == (dx, dy)


def test_ties_break_toward_zero_shift():
    img = np.full((H, W, 3), 90, np.uint8)
    mask = np.zeros((H, W), np.uint16)
    mask[10:20, 10:20] = 2
    assert estimate_shift(img, img, mask == 2, 5)[:2] == (0, 0)


def test_occluded_label_is_lost():
    prev, mask = square_frame(20, 20, extra=[(50, 30, 8, (30, 200, 30), 4)])
    cur, _ = square_frame(20, 20)  # green square painted over with background
    out, lost = propagate_mask(cur, prev, mask, return_lost=True)
    assert lost == [4]
    assert set(np.unique(out)) == {0, 1}


def test_errors():
    img, mask = square_frame(10, 10)
    with pytest.raises(NoSeedError):
        propagate_mask(img, img, np.zeros_like(mask))
    with pytest.raises(InvalidInputError):
        propagate_mask(img[:-1], img, mask)
    with pytest.raises(NoSeedError):
        track_sequence([img], {1: mask})
    with pytest.raises(InvalidInputError):
        TrackerConfig(color_threshold=1.5)
    with pytest.raises(InvalidInputError):
        TrackerConfig(min_area=0)


def test_single_frame_sequence():
    img, mask = square_frame(10, 10)
    out = track_sequence([img], {0: mask})
    assert len(out) == 1 and np.array_equal(out[0], mask)


def moving_sequence(n=10, step=(2, 1)):
    frames = [square_frame(10 + step[0] * i, 12 + step[1] * i,
                           extra=[(60 - step[0] * i, 40, 9, (30, 60, 220), 9)]) for i in range(n)]
    return [f[0] for f in frames], [f[1] for f in frames]


def iou(a, b):
    inter = np.count_nonzero((a == b) & (a > 0))
    union = np.count_nonzero((a > 0) | (b > 0))
    return inter / union


def test_ten_frame_translation_iou_one():
    images, truth = moving_sequence()
    out = track_sequence(images, {0: truth[0]})
    assert len(out) == 10
    assert all(iou(o, t) == 1.0 for o, t in zip(out, truth))


def test_correction_heals_sequence():
    images, truth = moving_sequence()
    bad = np.zeros_like(truth[4])
    bad[0:5, 0:5] = 1
    out = track_sequence(images, {0: truth[0], 4: bad, 5: truth[5]})
    assert iou(out[4], truth[4]) < 0.1
    assert all(np.array_equal(out[i], truth[i]) for i in range(5, 10))


def test_static_sequence_idempotent_and_deterministic():
    img, mask = square_frame(20, 20, extra=[(50, 30, 8, (30, 200, 30), 3)])
    a = track_sequence([img] * 6, {0: mask})
    b = track_sequence([img] * 6, {0: mask})
    assert all(np.array_equal(m, mask) for m in a)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_never_invents_labels(seed):
    rng = np.random.default_rng(seed)
    images = [rng.integers(0, 256, (30, 40, 3)).astype(np.uint8) for _ in range(4)]
    seed_mask = np.zeros((30, 40), np.uint16)
    seed_mask[5:15, 5:15] = rng.integers(1, 60000)
    seed_mask[18:25, 20:30] = rng.integers(1, 60000)
    later = np.zeros_like(seed_mask)
    later[0:4, 0:4] = 12345
    seeds = {0: seed_mask, 2: later}
    allowed = set(np.unique(seed_mask)) | set(np.unique(later))
    for m in track_sequence(images, seeds, TrackerConfig(search_radius=2, min_area=1)):
        assert set(np.unique(m)) <= allowed
