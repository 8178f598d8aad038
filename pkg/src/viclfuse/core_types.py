"""Images, labels, support pairs, and the 2x2 prompt-canvas algebra.

A canvas is a 2x2 grid of equally sized quadrants:

    top-left:     prompt image        top-right:    prompt label
    bottom-left:  query image         bottom-right: masked (to predict)

All pixel data is float64 in [0, 1], shape (H, W, 3), and immutable after
construction. Patch bookkeeping (row-major over the canvas patch grid) is
defined here once and shared by the tokenizer and the backbone.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when pixel-array geometry does not match expectations."""


class Quadrant(enum.Enum):
    TL = "TL"
    TR = "TR"
    BL = "BL"
    BR = "BR"


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64).copy()
    out.setflags(write=False)
    return out


def _check_pixels(pixels: np.ndarray, what: str) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"{what}: expected (H, W, 3) pixels, got {pixels.shape}")
    if pixels.shape[0] < 1 or pixels.shape[1] < 1:
        raise ShapeError(f"{what}: empty pixel array {pixels.shape}")
    if not np.isfinite(pixels).all():
        raise ValueError(f"{what}: non-finite pixel values")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise ValueError(f"{what}: pixel values outside [0, 1]")


@dataclass(frozen=True, eq=False)
class Image:
    """An RGB image with float64 pixels in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "pixels", _freeze(self.pixels))
        _check_pixels(self.pixels, "Image")

    @property
    def h(self) -> int:
        return self.pixels.shape[0]

    @property
    def w(self) -> int:
        return self.pixels.shape[1]


class LabelKind(enum.Enum):
    SEG_MASK = "seg_mask"
    DET_BOXMASK = "det_boxmask"
    COLOR_TARGET = "color_target"


@dataclass(frozen=True, eq=False)
class Label:
    """A task label stored as an image.

    seg_mask / det_boxmask labels are strictly binary with identical
    channels; a det_boxmask foreground must be one filled axis-aligned
    rectangle. color_target labels are ordinary RGB images.
    """

    pixels: np.ndarray
    kind: LabelKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "pixels", _freeze(self.pixels))
        _check_pixels(self.pixels, "Label")
        if self.kind in (LabelKind.SEG_MASK, LabelKind.DET_BOXMASK):
            vals = np.unique(self.pixels)
            if not np.isin(vals, (0.0, 1.0)).all():
                raise ValueError(f"{self.kind.value} label must be binary")
            ch = self.pixels[:, :, 0]
            if not (self.pixels == ch[:, :, None]).all():
                raise ValueError(f"{self.kind.value} label channels must agree")
        if self.kind is LabelKind.DET_BOXMASK:
            self._check_boxmask()

    def _check_boxmask(self) -> None:
        fg = self.pixels[:, :, 0] == 1.0
        if not fg.any():
            raise ValueError("det_boxmask label has no foreground")
        rows = np.where(fg.any(axis=1))[0]
        cols = np.where(fg.any(axis=0))[0]
        rect = np.zeros_like(fg)
        rect[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = True
        if not (fg == rect).all():
            raise ValueError("det_boxmask foreground is not a filled rectangle")

    @property
    def h(self) -> int:
        return self.pixels.shape[0]

    @property
    def w(self) -> int:
        return self.pixels.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """Boolean foreground mask (first channel == 1)."""
        return self.pixels[:, :, 0] == 1.0


@dataclass(frozen=True, eq=False)
class SupportPair:
    """An image together with its task label; the unit of retrieval."""

    image: Image
    label: Label
    id: int

    def __post_init__(self) -> None:
        if self.image.pixels.shape != self.label.pixels.shape:
            raise ShapeError(
                f"support pair {self.id}: image {self.image.pixels.shape} vs "
                f"label {self.label.pixels.shape}"
            )


@dataclass(frozen=True)
class CanvasConfig:
    """Geometry of the 2x2 canvas; quadrants are quadrant_h x quadrant_w."""

    quadrant_h: int = 32
    quadrant_w: int = 32
    patch_size: int = 8
    mask_fill: float = 0.0

    def __post_init__(self) -> None:
        if self.patch_size < 1:
            raise ValueError("patch_size must be positive")
        if self.quadrant_h < 1 or self.quadrant_w < 1:
            raise ValueError("quadrant dimensions must be positive")
        if self.quadrant_h % self.patch_size or self.quadrant_w % self.patch_size:
            raise ValueError("quadrant dimensions must be divisible by patch_size")
        if not 0.0 <= self.mask_fill <= 1.0:
            raise ValueError("mask_fill must lie in [0, 1]")

    @property
    def canvas_h(self) -> int:
        return 2 * self.quadrant_h

    @property
    def canvas_w(self) -> int:
        return 2 * self.quadrant_w

    @property
    def grid_h(self) -> int:
        """Canvas patch-grid height."""
        return self.canvas_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.canvas_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def quadrant_grid_h(self) -> int:
        return self.quadrant_h // self.patch_size

    @property
    def quadrant_grid_w(self) -> int:
        return self.quadrant_w // self.patch_size

    @property
    def patches_per_quadrant(self) -> int:
        return self.quadrant_grid_h * self.quadrant_grid_w

    @property
    def patch_dim(self) -> int:
        """Flattened pixel dimension of one patch."""
        return self.patch_size * self.patch_size * 3


@dataclass(frozen=True, eq=False)
class Canvas:
    """The assembled 2x2 grid; masked_region names the quadrant to predict."""

    pixels: np.ndarray
    masked_region: Quadrant = field(default=Quadrant.BR)

    def __post_init__(self) -> None:
        object.__setattr__(self, "pixels", _freeze(self.pixels))
        _check_pixels(self.pixels, "Canvas")
        if self.pixels.shape[0] % 2 or self.pixels.shape[1] % 2:
            raise ShapeError("canvas dimensions must be even")

    @property
    def quadrant_h(self) -> int:
        return self.pixels.shape[0] // 2

    @property
    def quadrant_w(self) -> int:
        return self.pixels.shape[1] // 2


def _quadrant_slices(h: int, w: int, which: Quadrant) -> tuple[slice, slice]:
    rows = slice(0, h) if which in (Quadrant.TL, Quadrant.TR) else slice(h, 2 * h)
    cols = slice(0, w) if which in (Quadrant.TL, Quadrant.BL) else slice(w, 2 * w)
    return rows, cols


def compose_canvas(pair: SupportPair, query: Image, cfg: CanvasConfig) -> Canvas:
    """Assemble [prompt image, prompt label / query image, mask fill]."""
    return compose_canvas_parts(pair.image.pixels, pair.label.pixels, query.pixels, cfg)


def compose_canvas_parts(
    top_left: np.ndarray,
    top_right: np.ndarray,
    bottom_left: np.ndarray,
    cfg: CanvasConfig,
) -> Canvas:
    """compose_canvas on raw quadrant arrays (e.g. a fused, non-binary label)."""
    expected = (cfg.quadrant_h, cfg.quadrant_w, 3)
    for name, arr in (("top_left", top_left), ("top_right", top_right), ("bottom_left", bottom_left)):
        if arr.shape != expected:
            raise ShapeError(f"{name} quadrant has shape {arr.shape}, expected {expected}")
    pixels = np.full((cfg.canvas_h, cfg.canvas_w, 3), cfg.mask_fill, dtype=np.float64)
    for which, arr in (
        (Quadrant.TL, top_left),
        (Quadrant.TR, top_right),
        (Quadrant.BL, bottom_left),
    ):
        rows, cols = _quadrant_slices(cfg.quadrant_h, cfg.quadrant_w, which)
        pixels[rows, cols] = arr
    return Canvas(pixels=pixels, masked_region=Quadrant.BR)


def extract_quadrant(canvas: Canvas, which: Quadrant) -> Image:
    rows, cols = _quadrant_slices(canvas.quadrant_h, canvas.quadrant_w, which)
    return Image(pixels=canvas.pixels[rows, cols])


def with_quadrant(canvas: Canvas, which: Quadrant, content: np.ndarray) -> Canvas:
    """A copy of the canvas with one quadrant replaced."""
    h, w = canvas.quadrant_h, canvas.quadrant_w
    if content.shape != (h, w, 3):
        raise ShapeError(f"quadrant content has shape {content.shape}, expected {(h, w, 3)}")
    pixels = canvas.pixels.copy()
    rows, cols = _quadrant_slices(h, w, which)
    pixels[rows, cols] = content
    return Canvas(pixels=pixels, masked_region=canvas.masked_region)


def quadrant_patch_indices(cfg: CanvasConfig, which: Quadrant) -> frozenset[int]:
    """Flattened canvas patch indices (row-major) covered by a quadrant."""
    qh, qw = cfg.quadrant_grid_h, cfg.quadrant_grid_w
    rows = range(0, qh) if which in (Quadrant.TL, Quadrant.TR) else range(qh, 2 * qh)
    cols = range(0, qw) if which in (Quadrant.TL, Quadrant.BL) else range(qw, 2 * qw)
    return frozenset(r * cfg.grid_w + c for r in rows for c in cols)


def masked_patch_indices(cfg: CanvasConfig) -> frozenset[int]:
    """Patch indices lying entirely in the masked bottom-right quadrant."""
    return quadrant_patch_indices(cfg, Quadrant.BR)


def patchify(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """(H, W, 3) -> (H/p * W/p, p*p*3), patches in row-major grid order."""
    h, w, c = pixels.shape
    if h % patch_size or w % patch_size:
        raise ShapeError(f"({h}, {w}) not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = pixels.reshape(gh, patch_size, gw, patch_size, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch_size * patch_size * c)


def unpatchify(patches: np.ndarray, grid_h: int, grid_w: int, patch_size: int) -> np.ndarray:
    """Inverse of patchify."""
    n, d = patches.shape
    if n != grid_h * grid_w or d != patch_size * patch_size * 3:
        raise ShapeError(f"patch array {patches.shape} does not match grid ({grid_h}, {grid_w})")
    x = patches.reshape(grid_h, grid_w, patch_size, patch_size, 3)
    return x.transpose(0, 2, 1, 3, 4).reshape(grid_h * patch_size, grid_w * patch_size, 3)
