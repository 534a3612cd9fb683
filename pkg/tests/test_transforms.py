import hashlib

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ensemble_patch.patch import init_patch
from ensemble_patch.synthetic import make_dataset
from ensemble_patch.transforms import (BoundingBox, BoxDraw, LabeledImage, RandomDraw,
                                       TransformConfig, apply_patch, blur_sigma, distance_blur,
                                       format_labels, identity_draw, lighting_transform,
                                       parse_label_line, place_patch, read_labels, sample_draw,
                                       tps_warp)
from oracles import conv2d_reflect, tps_reference

# sha256 of the 8-bit quantised composite, recorded once (see test below)
GOLDEN_COMPOSITE = "199e9b221a0ea7c633b70ab2626974ac4c8f79ca0e92a2231c11cd60f5ed37cf"


def test_box_validation():
    BoundingBox(0, 0.5, 0.5, 1.0, 1.0)
    for bad in [(0, 0.5, 0.5, 1.2, 0.3), (0, 0.1, 0.5, 0.4, 0.2), (0, 0.5, 0.5, 0.0, 0.2),
                (-1, 0.5, 0.5, 0.2, 0.2)]:
        with pytest.raises(ValueError):
            BoundingBox(*bad)


def test_label_parsing(tmp_path):
    assert parse_label_line("0 0.5 0.5 0.2 0.4") == BoundingBox(0, 0.5, 0.5, 0.2, 0.4)
    f = tmp_path / "a.txt"
    f.write_text("0 0.5 0.5 0.2 0.4\n\n1 0.3 0.3 0.1 0.1\n0 0.5 0.5 1.2 0.3\n")
    with pytest.raises(ValueError, match=r"a.txt:4"):
        read_labels(f)
    f.write_text("0 0.5 x 0.2 0.4\n")
    with pytest.raises(ValueError, match=r"a.txt:1"):
        read_labels(f)
    boxes = [BoundingBox(0, 0.5, 0.5, 0.2, 0.4), BoundingBox(2, 0.25, 0.75, 0.1, 0.3)]
    f.write_text(format_labels(boxes))
    assert read_labels(f) == boxes


# --- TPS

def test_tps_zero_offsets_bit_exact():
    p = init_patch(7, 9, seed=1)
    assert torch.equal(tps_warp(p, np.zeros((5, 5, 2))), p)


def test_tps_constant_patch_stays_constant():
    p = torch.full((3, 8, 8), 0.37, dtype=torch.float64)
    off = np.random.default_rng(0).uniform(-0.05, 0.05, (5, 5, 2))
    assert torch.allclose(tps_warp(p, off), p, atol=1e-15)


def test_tps_constant_offset_is_translation():
    p = init_patch(6, 8, seed=2)
    off = np.zeros((4, 4, 2))
    off[..., 0] = 1 / 8  # one pixel right
    off[..., 1] = 2 / 6  # two pixels down
    out = tps_warp(p, off).numpy()
    src = p.numpy()
    expect = np.empty_like(src)
    for i in range(6):
        for j in range(8):
            expect[:, i, j] = src[:, max(i - 2, 0), max(j - 1, 0)]
    np.testing.assert_allclose(out, expect, atol=1e-9)


def test_tps_matches_reference():
    p = init_patch(9, 11, seed=2)
    off = np.random.default_rng(1).uniform(-0.05, 0.05, (4, 4, 2))
    np.testing.assert_allclose(tps_warp(p, off).numpy(), tps_reference(p.numpy(), off),
                               atol=1e-10)


def test_tps_bad_offsets():
    with pytest.raises(ValueError):
        tps_warp(init_patch(4, 4), np.zeros((3, 4, 2)))


# --- blur

def test_blur_sigma_rule():
    assert blur_sigma(1.0) == 0.0
    assert blur_sigma(0.5, 1.5) == 1.5
    with pytest.raises(ValueError):
        blur_sigma(0.0)


def test_blur_identity_and_constant():
    p = init_patch(5, 6, seed=3)
    assert torch.equal(distance_blur(p, 1.0), p)
    c = torch.full((3, 5, 6), 0.25, dtype=torch.float64)
    assert torch.allclose(distance_blur(c, 0.3), c, atol=1e-15)


def test_blur_impulse_matches_convolution():
    imp = torch.zeros(3, 5, 5, dtype=torch.float64)
    imp[:, 2, 2] = 1.0
    imp[1, 0, 1] = 0.5
    sigma = blur_sigma(0.5)
    np.testing.assert_allclose(distance_blur(imp, 0.5).numpy(),
                               conv2d_reflect(imp.numpy(), sigma), atol=1e-14)


def test_blur_larger_patch_matches_convolution():
    p = init_patch(12, 9, seed=5)
    np.testing.assert_allclose(distance_blur(p, 0.7).numpy(),
                               conv2d_reflect(p.numpy(), blur_sigma(0.7)), atol=1e-13)


# --- placement

def test_place_axis_aligned_square():
    p = init_patch(4, 4, seed=0)
    box = BoundingBox(0, 0.5, 0.5, 0.4, 0.5)
    layer, mask = place_patch(p, box, (20, 20), BoxDraw(), patch_scale=0.4)
    rows, cols = np.nonzero(mask[0].numpy())
    assert mask.sum() == 16
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (8, 11, 8, 11)
    # side equals the patch resolution, so sampling hits pixel centres
    assert torch.allclose(layer[:, 8:12, 8:12], p, atol=1e-12)


def test_place_mask_counts_pixels():
    p = init_patch(6, 6, seed=0)
    box = BoundingBox(0, 0.4, 0.5, 0.3, 0.6)
    _, mask = place_patch(p, box, (50, 50), BoxDraw(), patch_scale=0.4)  # side 12 px
    assert mask.sum() == 144
    assert set(np.unique(mask.numpy())) <= {0.0, 1.0}


def test_place_rotation_90_hand_indexed():
    p = torch.tensor([[[0.1, 0.2], [0.3, 0.4]],
                      [[0.5, 0.6], [0.7, 0.8]],
                      [[0.9, 0.0], [0.15, 0.25]]], dtype=torch.float64)
    box = BoundingBox(0, 0.5, 0.5, 0.5, 0.5)
    layer, mask = place_patch(p, box, (8, 8), BoxDraw(angle=90.0), patch_scale=0.5)
    expect = torch.empty_like(p)
    for a in range(2):
        for b in range(2):
            expect[:, a, b] = p[:, 1 - b, a]  # clockwise quarter turn
    assert mask.sum() == 4
    assert torch.allclose(layer[:, 3:5, 3:5], expect, atol=1e-12)
    np.testing.assert_allclose(expect.numpy(), np.rot90(p.numpy(), k=-1, axes=(1, 2)))


def test_place_degenerate_box_is_empty():
    box = BoundingBox(0, 0.5, 0.5, 0.001, 0.001)
    layer, mask = place_patch(init_patch(4, 4), box, (64, 64), BoxDraw())
    assert mask.sum() == 0 and layer.abs().sum() == 0


def test_place_partially_outside_frame():
    box = BoundingBox(0, 0.05, 0.5, 0.1, 1.0)
    _, mask = place_patch(init_patch(4, 4), box, (40, 40), BoxDraw(shift_x=-0.4), 0.5)
    assert 0 < mask.sum() < 400


# --- lighting

def test_lighting_cases():
    img = torch.full((3, 4, 4), 0.4, dtype=torch.float64)
    assert torch.equal(lighting_transform(img, RandomDraw()), img)
    out = lighting_transform(img, RandomDraw(contrast=0.5, brightness=0.2))
    assert torch.allclose(out, img, atol=1e-15)
    noisy = RandomDraw(contrast=1.8, brightness=0.3, noise=np.full((3, 4, 4), 5.0))
    out = lighting_transform(img, noisy)
    assert out.min() >= 0 and out.max() <= 1


# --- sampling and composition

def test_sample_draw_deterministic_and_ranged():
    cfg = TransformConfig()
    a = sample_draw(cfg, 3, 5, 2, (32, 32))
    b = sample_draw(cfg, 3, 5, 2, (32, 32))
    assert a.boxes[1].angle == b.boxes[1].angle and np.array_equal(a.noise, b.noise)
    assert a.boxes[0].angle != sample_draw(cfg, 3, 6, 2, (32, 32)).boxes[0].angle
    for bd in a.boxes:
        assert abs(bd.angle) <= 20 and abs(bd.shift_x) <= 0.1
        assert np.abs(bd.tps_offsets).max() <= 0.05
    assert 0.8 <= a.contrast <= 1.2 and abs(a.brightness) <= 0.1
    # adding boxes does not disturb earlier streams
    c = sample_draw(cfg, 3, 5, 3, (32, 32))
    assert c.boxes[0].angle == a.boxes[0].angle and c.contrast == a.contrast


def test_apply_disabled_no_boxes_is_identity():
    img = torch.rand(3, 16, 16, dtype=torch.float64)
    s = LabeledImage(img, [])
    out = apply_patch(init_patch(4, 4), s, TransformConfig().disabled(), identity_draw())
    assert torch.equal(out.image, img)


def test_apply_outside_mask_untouched():
    s = make_dataset(1, seed=2)[0]
    cfg = TransformConfig()
    draw = sample_draw(cfg, 0, 0, len(s.boxes), s.size)
    draw = RandomDraw(boxes=draw.boxes)  # identity lighting
    out, mask = apply_patch(init_patch(8, 8), s, cfg, draw, return_mask=True)
    keep = mask[0] == 0
    assert torch.equal(out.image[:, keep], s.image[:, keep])
    assert mask.sum() > 0


def test_apply_only_person_boxes():
    img = torch.zeros(3, 32, 32, dtype=torch.float64)
    s = LabeledImage(img, [BoundingBox(1, 0.5, 0.5, 0.5, 0.5)])
    cfg = TransformConfig().disabled()
    out, mask = apply_patch(init_patch(4, 4), s, cfg, identity_draw(1), return_mask=True)
    assert mask.sum() == 0 and torch.equal(out.image, img)


def test_apply_later_box_on_top():
    img = torch.zeros(3, 40, 40, dtype=torch.float64)
    box = BoundingBox(0, 0.5, 0.5, 0.5, 0.5)
    s = LabeledImage(img, [box, box])
    cfg = TransformConfig(patch_scale=0.5).disabled()
    first = RandomDraw(boxes=[BoxDraw(), BoxDraw(shift_x=0.05)])
    white = torch.ones(3, 4, 4, dtype=torch.float64)
    out = apply_patch(white, s, cfg, first)
    assert out.image.max() == 1.0


def test_apply_golden_composite():
    s = make_dataset(1, seed=5)[0]
    cfg = TransformConfig()
    p = init_patch(9, 11, seed=2)
    out = apply_patch(p, s, cfg, sample_draw(cfg, 42, 0, len(s.boxes), s.size))
    q = np.round(out.image.numpy() * 255).astype(np.uint8)
    assert hashlib.sha256(q.tobytes()).hexdigest() == GOLDEN_COMPOSITE


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_apply_output_in_range(seed):
    s = make_dataset(1, seed=seed % 50)[0]
    cfg = TransformConfig(noise_std=0.3, brightness_range=0.5)
    out = apply_patch(init_patch(6, 6, seed=seed), s, cfg, sample_draw(cfg, seed, 0,
                      len(s.boxes), s.size))
    assert out.image.min() >= 0 and out.image.max() <= 1


def test_apply_gradient_reaches_patch():
    s = make_dataset(1, seed=0)[0]
    p = init_patch(8, 8, seed=0).requires_grad_(True)
    cfg = TransformConfig()
    out = apply_patch(p, s, cfg, sample_draw(cfg, 0, 0, len(s.boxes), s.size))
    out.image.sum().backward()
    assert p.grad.abs().sum() > 0
