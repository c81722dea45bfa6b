import csv
import math

import numpy as np
import pytest

from kirby import surrogate as S
from kirby.classifier import CnnConfig, build_model
from kirby.data import ImageDataset


def tiny_set(n=12, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return ImageDataset(rng.uniform(0, 1, (n, 1, size, size)), rng.integers(0, 3, n), 3, "tiny")


def tiny_model(size=8):
    m = build_model(CnnConfig(input_shape=(1, size, size), widths=(4,), num_classes=3, seed=1))
    m.params["block0.conv1.bias"].data[:] = 0.05
    return m


def brute_window(mask, wh, ww):
    """Float brute force over window centres; returns all maximizers in raster order."""
    holes = np.argwhere(mask == 0)
    h, w = mask.shape
    best, arg = -1.0, []
    for r in range(h - wh + 1):
        for c in range(w - ww + 1):
            cy, cx = r + (wh - 1) / 2, c + (ww - 1) / 2
            d = min(math.hypot(cy - y, cx - x) for y, x in holes)
            if d > best + 1e-12:
                best, arg = d, [(r, c)]
            elif abs(d - best) <= 1e-12:
                arg.append((r, c))
    return arg


def test_erase_examples():
    img = np.full((1, 2, 2), 0.8)
    assert np.array_equal(S.erase(img, np.ones((2, 2))).image, img)
    assert not S.erase(img, np.zeros((2, 2))).image.any()
    out = S.erase(img, np.array([[0, 1], [1, 0]])).image
    assert out.tolist() == [[[0.0, 0.8], [0.8, 0.0]]]
    with pytest.raises(ValueError):
        S.erase(img, np.ones((3, 2)))


def test_erase_is_idempotent_and_broadcasts():
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (3, 5, 5))
    mask = (rng.uniform(size=(5, 5)) > 0.5).astype(np.uint8)
    once = S.erase(img, mask).image
    assert np.array_equal(S.erase(once, mask).image, once)
    assert (once[:, mask == 0] == 0).all()


def test_distant_window_corner_hole():
    mask = np.ones((32, 32), np.uint8)
    mask[:4, :4] = 0
    assert S.distant_window(mask) == (16, 16)
    assert brute_window(mask, 16, 16) == [(16, 16)]


def test_distant_window_symmetric_tie_break():
    mask = np.ones((32, 32), np.uint8)
    mask[14:18, 14:18] = 0
    maximizers = brute_window(mask, 16, 16)
    assert len(maximizers) > 1
    assert S.distant_window(mask) == maximizers[0]


def test_distant_window_matches_brute_force_on_random_masks():
    rng = np.random.default_rng(3)
    for _ in range(10):
        mask = (rng.uniform(size=(12, 12)) > 0.15).astype(np.uint8)
        mask[0, 0] = 0
        assert S.distant_window(mask) == brute_window(mask, 6, 6)[0]
        assert S.distant_window(mask, "side") == brute_window(mask, 3, 3)[0]


def test_distant_patch_shapes_and_empty_hole():
    img = np.random.default_rng(1).uniform(0, 1, (1, 16, 16)).astype(np.float32)
    assert np.array_equal(S.distant_patch(img, np.ones((16, 16))), img)
    mask = np.ones((16, 16), np.uint8)
    mask[:3, :3] = 0
    patch = S.distant_patch(img, mask)
    assert patch.shape == img.shape and patch.dtype == img.dtype
    # corner pixels of the upscaled patch are the crop's corners
    assert patch[0, -1, -1] == img[0, -1, -1]
    assert patch[0, 0, 0] == img[0, 8, 8]


class FixedRng:
    def __init__(self, value):
        self.value = value

    def random(self):
        return self.value


def test_augment_branches():
    img = np.random.default_rng(2).uniform(0, 1, (1, 8, 8))
    mask = np.ones((8, 8), np.uint8)
    mask[:2, :2] = 0
    assert np.array_equal(S.augment_for_training(img, mask, FixedRng(0.2)), S.distant_patch(img, mask))
    assert S.augment_for_training(img, mask, FixedRng(0.8)) is img


def test_augment_frequency():
    img = np.zeros((1, 4, 4))
    mask = np.ones((4, 4), np.uint8)
    mask[0, 0] = 0
    rng = np.random.default_rng(0)
    hits = sum(S.augment_for_training(img, mask, rng) is not img for _ in range(10000))
    assert 0.48 <= hits / 10000 <= 0.52


def test_construct_size_alignment_and_immutability():
    ds = tiny_set()
    before = ds.images.copy()
    sur = S.construct_ood_set(ds, tiny_model(), S.SurrogateConfig())
    assert len(sur) == len(ds)
    assert sur.stage == "inpainted"
    assert np.array_equal(ds.images, before)
    keep = sur.masks[:, None].astype(bool)
    assert np.array_equal(sur.images[keep], ds.images[keep])
    assert sur[3].source_index == 3


def test_construct_is_deterministic():
    ds = tiny_set(seed=4)
    a = S.construct_ood_set(ds, tiny_model(), S.SurrogateConfig())
    b = S.construct_ood_set(ds, tiny_model(), S.SurrogateConfig())
    assert a.images.tobytes() == b.images.tobytes()
    assert a.masks.tobytes() == b.masks.tobytes()


def test_lambda_one_flags_degenerate():
    ds = tiny_set(seed=5)
    sur = S.construct_ood_set(ds, tiny_model(), S.SurrogateConfig(lam=1.0))
    for i in range(len(ds)):
        if sur.degenerate[i]:
            assert np.array_equal(sur.images[i], ds.images[i])
    assert sur.report()["degenerate"] == int(sur.degenerate.sum())


def test_all_erased_falls_back_to_gray():
    ds = tiny_set(n=2)
    masks = np.zeros((2, 8, 8), np.uint8)
    masks[1, 0, 0] = 1
    for method in ("fm", "mean"):
        sur = S.construct_ood_set(ds, None, S.SurrogateConfig(inpaint_method=method), masks=masks)
        assert (sur.images[0] == S.FALLBACK_GRAY).all()
        assert sur.all_erased.tolist() == [True, False]


def test_erase_only_stage():
    ds = tiny_set(n=3)
    masks = np.ones((3, 8, 8), np.uint8)
    masks[:, 2:5, 2:5] = 0
    sur = S.construct_ood_set(ds, None, S.SurrogateConfig(inpaint_method="none"), masks=masks)
    assert sur.stage == "erased"
    assert not sur.images[:, :, 2:5, 2:5].any()


def test_random_masks_cover_requested_area():
    masks = S.random_masks(200, 32, 32, (0.25, 0.5), seed=0)
    cov = 1 - masks.reshape(200, -1).mean(axis=1)
    assert cov.min() >= 0.2 and cov.max() <= 0.55
    assert np.array_equal(masks, S.random_masks(200, 32, 32, (0.25, 0.5), seed=0))


def test_persistence_round_trip(tmp_path):
    ds = tiny_set(n=5)
    sur = S.construct_ood_set(ds, tiny_model(), S.SurrogateConfig(lam=0.5))
    S.save_surrogates(sur, tmp_path / "sur")
    back = S.load_surrogates(tmp_path / "sur")
    assert back.images.tobytes() == sur.images.tobytes()
    assert back.config == sur.config
    with open(tmp_path / "sur" / "manifest.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 5
    assert (tmp_path / "sur" / rows[0]["image_file"]).exists()
    assert float(rows[2]["mask_coverage"]) == pytest.approx(sur.coverage[2], abs=1e-6)


def test_config_validation():
    with pytest.raises(ValueError):
        S.SurrogateConfig(lam=0)
    with pytest.raises(ValueError):
        S.SurrogateConfig(inpaint_method="cs")
    with pytest.raises(ValueError):
        S.SurrogateSample(np.zeros((1, 2, 2)), np.ones((2, 2)), 0, "painted")
