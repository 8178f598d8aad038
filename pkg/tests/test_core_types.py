import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viclfuse.core_types import (
    Canvas,
    CanvasConfig,
    Image,
    Label,
    LabelKind,
    Quadrant,
    ShapeError,
    SupportPair,
    compose_canvas,
    compose_canvas_parts,
    extract_quadrant,
    masked_patch_indices,
    patchify,
    quadrant_patch_indices,
    unpatchify,
    with_quadrant,
)


def const_image(h, w, value):
    return Image(pixels=np.full((h, w, 3), value, dtype=np.float64))


def const_label(h, w, value, kind=LabelKind.SEG_MASK):
    return Label(pixels=np.full((h, w, 3), value, dtype=np.float64), kind=kind)


def tiny_pair(img_val=0.2, lbl_val=1.0, h=2, w=2):
    return SupportPair(
        image=const_image(h, w, img_val),
        label=const_label(h, w, lbl_val),
        id=0,
    )


# ---------------------------------------------------------------- validation


def test_image_rejects_out_of_range():
    with pytest.raises(ValueError):
        Image(pixels=np.full((4, 4, 3), 1.5))


def test_image_rejects_bad_shape():
    with pytest.raises(ShapeError):
        Image(pixels=np.zeros((4, 4)))


def test_image_pixels_read_only():
    im = const_image(4, 4, 0.5)
    with pytest.raises(ValueError):
        im.pixels[0, 0, 0] = 1.0


def test_seg_label_rejects_non_binary():
    with pytest.raises(ValueError):
        const_label(4, 4, 0.5)


def test_seg_label_rejects_channel_mismatch():
    px = np.zeros((4, 4, 3))
    px[0, 0, 0] = 1.0  # one channel only
    with pytest.raises(ValueError):
        Label(pixels=px, kind=LabelKind.SEG_MASK)


def test_boxmask_accepts_filled_rectangle():
    px = np.zeros((8, 8, 3))
    px[2:5, 3:7, :] = 1.0
    lbl = Label(pixels=px, kind=LabelKind.DET_BOXMASK)
    assert lbl.mask.sum() == 3 * 4


def test_boxmask_rejects_l_shape():
    px = np.zeros((8, 8, 3))
    px[2:5, 3:7, :] = 1.0
    px[2, 3, :] = 0.0  # notch one corner
    with pytest.raises(ValueError):
        Label(pixels=px, kind=LabelKind.DET_BOXMASK)


def test_boxmask_rejects_empty():
    with pytest.raises(ValueError):
        const_label(8, 8, 0.0, kind=LabelKind.DET_BOXMASK)


def test_color_target_allows_any_values():
    rng = np.random.default_rng(0)
    Label(pixels=rng.random((8, 8, 3)), kind=LabelKind.COLOR_TARGET)


def test_support_pair_rejects_dim_mismatch():
    with pytest.raises(ShapeError):
        SupportPair(image=const_image(4, 4, 0.0), label=const_label(8, 8, 1.0), id=1)


def test_canvas_config_rejects_indivisible_quadrant():
    with pytest.raises(ValueError):
        CanvasConfig(quadrant_h=10, quadrant_w=32, patch_size=8)


# ------------------------------------------------------------------- compose


def test_compose_canvas_hand_built_4x4():
    cfg = CanvasConfig(quadrant_h=2, quadrant_w=2, patch_size=2, mask_fill=0.0)
    canvas = compose_canvas(tiny_pair(), const_image(2, 2, 0.5), cfg)
    expected = np.zeros((4, 4, 3))
    expected[:2, :2] = 0.2
    expected[:2, 2:] = 1.0
    expected[2:, :2] = 0.5
    expected[2:, 2:] = 0.0
    np.testing.assert_array_equal(canvas.pixels, expected)
    assert canvas.masked_region is Quadrant.BR


def test_compose_extract_round_trip():
    cfg = CanvasConfig(quadrant_h=8, quadrant_w=8, patch_size=4)
    rng = np.random.default_rng(1)
    pair = SupportPair(
        image=Image(pixels=rng.random((8, 8, 3))),
        label=Label(pixels=(rng.random((8, 8, 3)) > 0.5).astype(np.float64).max(axis=2, keepdims=True).repeat(3, axis=2), kind=LabelKind.SEG_MASK),
        id=7,
    )
    query = Image(pixels=rng.random((8, 8, 3)))
    canvas = compose_canvas(pair, query, cfg)
    np.testing.assert_array_equal(extract_quadrant(canvas, Quadrant.TL).pixels, pair.image.pixels)
    np.testing.assert_array_equal(extract_quadrant(canvas, Quadrant.TR).pixels, pair.label.pixels)
    np.testing.assert_array_equal(extract_quadrant(canvas, Quadrant.BL).pixels, query.pixels)
    np.testing.assert_array_equal(
        extract_quadrant(canvas, Quadrant.BR).pixels, np.zeros((8, 8, 3))
    )


def test_compose_fill_equals_query_makes_bottom_row_uniform():
    cfg = CanvasConfig(quadrant_h=2, quadrant_w=2, patch_size=2, mask_fill=0.5)
    canvas = compose_canvas(tiny_pair(), const_image(2, 2, 0.5), cfg)
    np.testing.assert_array_equal(
        extract_quadrant(canvas, Quadrant.BL).pixels,
        extract_quadrant(canvas, Quadrant.BR).pixels,
    )


def test_compose_rejects_dimension_mismatch():
    cfg = CanvasConfig(quadrant_h=4, quadrant_w=4, patch_size=2)
    with pytest.raises(ShapeError):
        compose_canvas(tiny_pair(), const_image(4, 4, 0.5), cfg)


def test_compose_parts_accepts_non_binary_label_quadrant():
    cfg = CanvasConfig(quadrant_h=2, quadrant_w=2, patch_size=2)
    fused = np.full((2, 2, 3), 0.37)
    canvas = compose_canvas_parts(
        np.zeros((2, 2, 3)), fused, np.ones((2, 2, 3)), cfg
    )
    np.testing.assert_array_equal(extract_quadrant(canvas, Quadrant.TR).pixels, fused)


def test_with_quadrant_replaces_only_target():
    cfg = CanvasConfig(quadrant_h=2, quadrant_w=2, patch_size=2)
    canvas = compose_canvas(tiny_pair(), const_image(2, 2, 0.5), cfg)
    new = with_quadrant(canvas, Quadrant.BR, np.full((2, 2, 3), 0.9))
    np.testing.assert_array_equal(extract_quadrant(new, Quadrant.BR).pixels, 0.9)
    np.testing.assert_array_equal(
        extract_quadrant(new, Quadrant.TL).pixels,
        extract_quadrant(canvas, Quadrant.TL).pixels,
    )


# -------------------------------------------------------------- patch indices


def test_masked_patch_indices_default_geometry():
    cfg = CanvasConfig(quadrant_h=32, quadrant_w=32, patch_size=8)
    expected = frozenset(
        [36, 37, 38, 39, 44, 45, 46, 47, 52, 53, 54, 55, 60, 61, 62, 63]
    )
    got = masked_patch_indices(cfg)
    assert got == expected
    assert len(got) == 16


def test_masked_patch_indices_degenerate_single_patch():
    cfg = CanvasConfig(quadrant_h=8, quadrant_w=8, patch_size=8)
    assert masked_patch_indices(cfg) == frozenset([3])  # last of a 2x2 grid


def test_quadrant_indices_partition_all_patches():
    cfg = CanvasConfig(quadrant_h=32, quadrant_w=32, patch_size=8)
    sets = [quadrant_patch_indices(cfg, q) for q in Quadrant]
    union = set().union(*sets)
    assert union == set(range(cfg.num_patches))
    assert sum(len(s) for s in sets) == cfg.num_patches  # pairwise disjoint


@given(
    qgrid=st.integers(min_value=1, max_value=4),
    patch=st.sampled_from([1, 2, 4]),
)
def test_quadrant_indices_partition_property(qgrid, patch):
    cfg = CanvasConfig(quadrant_h=qgrid * patch, quadrant_w=qgrid * patch, patch_size=patch)
    sets = [quadrant_patch_indices(cfg, q) for q in Quadrant]
    assert set().union(*sets) == set(range(cfg.num_patches))
    for i, a in enumerate(sets):
        for b in sets[i + 1 :]:
            assert not (a & b)


# ---------------------------------------------------------- patch flattening


def test_patchify_row_major_patch_order():
    cfg = CanvasConfig(quadrant_h=4, quadrant_w=4, patch_size=2)
    # give every patch a constant value equal to its row-major index / 15
    pixels = np.zeros((8, 8, 3))
    for r in range(4):
        for c in range(4):
            pixels[2 * r : 2 * r + 2, 2 * c : 2 * c + 2] = (r * 4 + c) / 15.0
    patches = patchify(pixels, cfg.patch_size)
    np.testing.assert_allclose(patches.mean(axis=1), np.arange(16) / 15.0)


@settings(max_examples=25)
@given(st.integers(min_value=0, max_value=10_000))
def test_patchify_unpatchify_round_trip(seed):
    rng = np.random.default_rng(seed)
    pixels = rng.random((8, 12, 3))
    patches = patchify(pixels, 4)
    back = unpatchify(patches, 2, 3, 4)
    np.testing.assert_array_equal(back, pixels)


def test_patchify_rejects_indivisible():
    with pytest.raises(ShapeError):
        patchify(np.zeros((9, 8, 3)), 4)


def test_canvas_rejects_odd_dimensions():
    with pytest.raises(ShapeError):
        Canvas(pixels=np.zeros((5, 6, 3)))
