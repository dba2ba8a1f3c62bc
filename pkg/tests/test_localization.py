from collections import deque

import numpy as np
import pytest

from ega.errors import ContractError, DimensionError
from ega.localization import (TAU_GRID, BoundingBox, extract_box, label_components, localize, normalize_map,
                              threshold_sweep_boxes, upsample_cam)


def flood_fill_components(binary):
    """Reference 4-connected labeling: list of pixel sets."""
    h, w = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    comps = []
    for y in range(h):
        for x in range(w):
            if not binary[y, x] or seen[y, x]:
                continue
            comp, queue = set(), deque([(y, x)])
            seen[y, x] = True
            while queue:
                cy, cx = queue.popleft()
                comp.add((cy, cx))
                for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
                    if 0 <= ny < h and 0 <= nx < w and binary[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
            comps.append(frozenset(comp))
    return comps


def reference_box(score, tau):
    score = np.asarray(score, dtype=np.float64)
    h, w = score.shape
    lo, hi = score.min(), score.max()
    if hi - lo < 1e-12:
        return (0, 0, w, h)
    norm = (score - lo) / (hi - lo)
    comps = flood_fill_components(norm >= tau)
    if not comps:
        return (0, 0, w, h)

    def key(c):
        ys = [p[0] for p in c]
        xs = [p[1] for p in c]
        return (-len(c), min(ys), min(xs))

    best = min(comps, key=key)
    ys = [p[0] for p in best]
    xs = [p[1] for p in best]
    return (min(xs), min(ys), max(xs) + 1, max(ys) + 1)


class TestBoundingBox:
    def test_area(self):
        assert BoundingBox(3, 2, 8, 5).area == 15

    @pytest.mark.parametrize("coords", [(2, 0, 2, 4), (0, 3, 4, 1), (-1, 0, 2, 2)])
    def test_invalid(self, coords):
        with pytest.raises(ContractError):
            BoundingBox(*coords)

    def test_full(self):
        assert BoundingBox.full(10, 20).as_tuple() == (0, 0, 20, 10)


class TestUpsample:
    def test_same_size_is_normalization(self, rng):
        cam = rng.standard_normal((5, 5))
        np.testing.assert_allclose(upsample_cam(cam, 5, 5), (cam - cam.min()) / np.ptp(cam), atol=1e-12)

    def test_single_pixel_is_zero(self):
        np.testing.assert_array_equal(upsample_cam(np.array([[3.0]]), 4, 4), np.zeros((4, 4)))

    def test_bilinear_hand_values(self):
        out = upsample_cam(np.array([[0.0, 1.0], [0.0, 1.0]]), 2, 4)
        np.testing.assert_allclose(out, [[0, 1 / 3, 2 / 3, 1]] * 2, atol=1e-12)

    def test_batch(self, rng):
        cams = rng.standard_normal((3, 4, 4))
        out = upsample_cam(cams, 8, 8)
        assert out.shape == (3, 8, 8)
        np.testing.assert_array_equal(out[1], upsample_cam(cams[1], 8, 8))

    def test_range(self, rng):
        out = upsample_cam(rng.standard_normal((16, 16)), 64, 64)
        assert out.min() == 0 and out.max() == 1

    @pytest.mark.parametrize("size", [(0, 4), (4, 0), (2, 8)])
    def test_bad_target(self, size):
        with pytest.raises(DimensionError):
            upsample_cam(np.zeros((4, 4)), *size)

    def test_non_finite(self):
        with pytest.raises(ContractError):
            upsample_cam(np.array([[0.0, np.inf]]), 2, 2)


class TestExtractBox:
    def test_rectangle(self):
        m = np.zeros((10, 12))
        m[2:5, 3:8] = 1
        assert extract_box(m, 0.2).as_tuple() == (3, 2, 8, 5)

    def test_all_zero_fallback(self):
        assert extract_box(np.zeros((6, 9)), 0.5).as_tuple() == (0, 0, 9, 6)

    def test_largest_component(self):
        m = np.zeros((12, 12))
        m[0:2, 0:3] = 1  # 6 px
        m[5:9, 4:9] = 1  # 20 px
        assert extract_box(m, 0.5).as_tuple() == (4, 5, 9, 9)

    def test_tie_prefers_top_left(self):
        m = np.zeros((8, 8))
        m[5:7, 0:2] = 1
        m[1:3, 5:7] = 1
        assert extract_box(m, 0.5).as_tuple() == (5, 1, 7, 3)

    def test_diagonal_pixels_are_separate(self):
        m = np.zeros((4, 4))
        m[0, 0] = m[1, 1] = 1
        m[3, 2:4] = 1
        assert extract_box(m, 0.5).as_tuple() == (2, 3, 4, 4)

    def test_ramp(self):
        ramp = np.tile(np.linspace(0, 1, 64), (64, 1))
        assert extract_box(ramp, 0.5).as_tuple() == (32, 0, 64, 64)

    def test_affine_invariance(self, rng):
        for _ in range(50):
            m = rng.random((12, 12))
            tau = float(rng.choice(TAU_GRID))
            assert extract_box(3.0 * m + 2.0, tau) == extract_box(m, tau)

    def test_matches_flood_fill_reference(self, rng):
        for _ in range(100):
            h, w = rng.integers(1, 33, size=2)
            m = (rng.random((h, w)) < rng.uniform(0.2, 0.7)).astype(float)
            tau = float(rng.choice(TAU_GRID))
            assert extract_box(m, tau).as_tuple() == reference_box(m, tau)

    def test_total_on_random_maps(self, rng):
        for _ in range(50):
            m = rng.standard_normal((16, 16)) * rng.uniform(0, 2)
            box = extract_box(m, float(rng.uniform(0.01, 0.99)))
            assert box.within(16, 16)


class TestComponents:
    def test_matches_flood_fill(self, rng):
        for _ in range(100):
            h, w = rng.integers(1, 33, size=2)
            binary = rng.random((h, w)) < rng.uniform(0.1, 0.8)
            labels, n = label_components(binary)
            ours = [frozenset(zip(*np.nonzero(labels == k))) for k in range(1, n + 1)]
            assert set(ours) == set(flood_fill_components(binary))
            assert len(ours) == n


class TestSweep:
    def test_grid_size(self, rng):
        assert len(TAU_GRID) == 19
        assert TAU_GRID[0] == 0.05 and TAU_GRID[-1] == 0.95
        assert len(threshold_sweep_boxes(rng.random((8, 8)))) == 19

    def test_binary_blob_is_stable(self):
        m = np.zeros((16, 16))
        m[4:10, 6:12] = 1
        assert {b.as_tuple() for b in threshold_sweep_boxes(m)} == {(6, 4, 12, 10)}

    @pytest.mark.parametrize("taus", [[], [0.0], [1.0], [0.5, 1.2]])
    def test_bad_taus(self, taus):
        with pytest.raises(ContractError):
            threshold_sweep_boxes(np.ones((2, 2)), taus)


def test_localize_end_to_end():
    cam = np.zeros((4, 4))
    cam[1:3, 1:3] = 1
    box = localize(cam, 0.9, 16)
    assert box.within(16, 16)
    assert box.as_tuple() == (5, 5, 11, 11)


def test_normalize_constant():
    np.testing.assert_array_equal(normalize_map(np.full((3, 3), 7.0)), 0)
