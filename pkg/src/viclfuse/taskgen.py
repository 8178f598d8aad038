"""Synthetic task generators: segmentation, detection, colorization.

Scenes are colored shapes (circle / square / triangle) on a lightly
textured background. Every sample is drawn from one of 24 archetypes
(shape type x position cell x size bucket) plus jitter, so feature-space
similarity correlates with scene layout and retrieval rankings carry
signal. All pixels are quantized to the 8-bit grid at generation time,
which makes PNG serialization lossless and datasets byte-reproducible.

Per-sample RNG is counter-based: sample i of stream s under seed q uses
np.random.SeedSequence([q, s, i]), so generation order never matters.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .core_types import Image, Label, LabelKind, SupportPair

SHAPES = ("circle", "square", "triangle")
_ANCHORS = ((0.32, 0.32), (0.32, 0.68), (0.68, 0.32), (0.68, 0.68))
_SIZE_BUCKETS = (0.14, 0.26)  # radius as a fraction of the image side


class TaskKind(enum.Enum):
    SEG = "seg"
    DET = "det"
    COLOR = "color"


@dataclass(frozen=True)
class TaskSpec:
    task: TaskKind
    n_support: int = 256
    n_query: int = 64
    seed: int = 0
    side: int = 32

    def __post_init__(self) -> None:
        if isinstance(self.task, str):
            object.__setattr__(self, "task", TaskKind(self.task))
        if self.n_support < 1:
            raise ValueError("n_support must be >= 1")
        if self.n_query < 0:
            raise ValueError("n_query must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.side < 8:
            raise ValueError("side must be >= 8")


@dataclass(frozen=True, eq=False)
class Dataset:
    support: tuple[SupportPair, ...]
    queries: tuple[tuple[Image, Label], ...]
    manifest: dict


def archetypes() -> list[dict]:
    """24 cluster prototypes: shape x anchor cell x size bucket."""
    table = []
    for shape in SHAPES:
        for ay, ax in _ANCHORS:
            for r in _SIZE_BUCKETS:
                hue = len(table) / 24.0
                table.append({"shape": shape, "cy": ay, "cx": ax, "r": r, "hue": hue})
    return table


_ARCHETYPES = archetypes()


def _rng_for(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def _hue_to_rgb(h: float) -> np.ndarray:
    """Saturated palette color at hue h in [0, 1)."""
    h6 = (h % 1.0) * 6.0
    k = np.array([(5 + h6) % 6, (3 + h6) % 6, (1 + h6) % 6])
    return 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def q8(pixels: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid; the PNG round-trip is then lossless."""
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0) / 255.0


@dataclass(frozen=True)
class ShapeParams:
    shape: str
    cy: float
    cx: float
    r: float
    color: tuple[float, float, float]


def shape_mask(p: ShapeParams, side: int) -> np.ndarray:
    """Boolean membership over pixel centers."""
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    if p.shape == "circle":
        return (yy - p.cy) ** 2 + (xx - p.cx) ** 2 <= p.r**2
    if p.shape == "square":
        return np.maximum(np.abs(yy - p.cy), np.abs(xx - p.cx)) <= p.r
    if p.shape == "triangle":  # apex up, base at cy + r
        band = (yy >= p.cy - p.r) & (yy <= p.cy + p.r)
        return band & (np.abs(xx - p.cx) <= (yy - p.cy + p.r) / 2.0)
    raise ValueError(f"unknown shape {p.shape!r}")


def render_scene(shapes: list[ShapeParams], bg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Paint shapes over the background; returns (image, union foreground)."""
    img = bg.copy()
    fg = np.zeros(bg.shape[:2], dtype=bool)
    for p in shapes:
        m = shape_mask(p, bg.shape[0])
        img[m] = p.color
        fg |= m
    return img, fg


def sample_scene(spec: TaskSpec, rng: np.random.Generator, max_shapes: int = 3):
    """One archetype + jitter -> (shape params list, textured background)."""
    side = spec.side
    a = _ARCHETYPES[int(rng.integers(len(_ARCHETYPES)))]
    n_shapes = int(rng.integers(1, max_shapes + 1))
    base = _hue_to_rgb(a["hue"] + rng.uniform(-0.03, 0.03))
    shapes = []
    for _ in range(n_shapes):
        r = max(1.5, a["r"] * side * rng.uniform(0.85, 1.15))
        cy = a["cy"] * side + rng.uniform(-0.08, 0.08) * side
        cx = a["cx"] * side + rng.uniform(-0.08, 0.08) * side
        # keep the shape inside the frame so masks are never clipped empty
        cy = float(np.clip(cy, r + 0.5, side - r - 0.5))
        cx = float(np.clip(cx, r + 0.5, side - r - 0.5))
        color = np.clip(base + rng.uniform(-0.08, 0.08, size=3), 0.05, 1.0)
        shapes.append(ShapeParams(a["shape"], cy, cx, float(r), tuple(color)))
    tint = rng.uniform(0.75, 0.95)
    bg = np.clip(tint + rng.uniform(-0.05, 0.05, size=(side, side, 3)), 0.0, 1.0)
    return shapes, bg


def _mask_label(fg: np.ndarray, kind: LabelKind) -> Label:
    return Label(pixels=np.repeat(fg[:, :, None].astype(np.float64), 3, axis=2), kind=kind)


def _bbox_mask(fg: np.ndarray) -> np.ndarray:
    rows = np.where(fg.any(axis=1))[0]
    cols = np.where(fg.any(axis=0))[0]
    box = np.zeros_like(fg)
    box[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = True
    return box


def luminance(img: Image) -> Image:
    """0.299 R + 0.587 G + 0.114 B, replicated to three channels."""
    gray = img.pixels @ np.array([0.299, 0.587, 0.114])
    return Image(pixels=q8(np.repeat(gray[:, :, None], 3, axis=2)))


def _gen_one(spec: TaskSpec, stream: int, index: int) -> tuple[Image, Label]:
    rng = _rng_for(spec.seed, stream, index)
    if spec.task is TaskKind.SEG:
        shapes, bg = sample_scene(spec, rng)
        img, fg = render_scene(shapes, bg)
        return Image(pixels=q8(img)), _mask_label(fg, LabelKind.SEG_MASK)
    if spec.task is TaskKind.DET:
        shapes, bg = sample_scene(spec, rng, max_shapes=1)
        img, fg = render_scene(shapes, bg)
        return Image(pixels=q8(img)), _mask_label(_bbox_mask(fg), LabelKind.DET_BOXMASK)
    if spec.task is TaskKind.COLOR:
        shapes, bg = sample_scene(spec, rng)
        img, _ = render_scene(shapes, bg)
        color = Image(pixels=q8(img))
        gray = luminance(color)
        return gray, Label(pixels=color.pixels, kind=LabelKind.COLOR_TARGET)
    raise ValueError(f"unknown task {spec.task}")


def _generate(spec: TaskSpec) -> Dataset:
    support = []
    for i in range(spec.n_support):
        img, lbl = _gen_one(spec, 0, i)
        support.append(SupportPair(image=img, label=lbl, id=i))
    support = tuple(support)
    queries = tuple(_gen_one(spec, 1, i) for i in range(spec.n_query))
    manifest = {
        "task": spec.task.value,
        "seed": spec.seed,
        "spec": {**asdict(spec), "task": spec.task.value},
        "content_hash": dataset_content_hash(support, queries),
    }
    return Dataset(support=support, queries=queries, manifest=manifest)


def gen_segmentation(spec: TaskSpec) -> Dataset:
    if spec.task is not TaskKind.SEG:
        raise ValueError("spec.task must be seg")
    return _generate(spec)


def gen_detection(spec: TaskSpec) -> Dataset:
    if spec.task is not TaskKind.DET:
        raise ValueError("spec.task must be det")
    return _generate(spec)


def gen_colorization(spec: TaskSpec) -> Dataset:
    if spec.task is not TaskKind.COLOR:
        raise ValueError("spec.task must be color")
    return _generate(spec)


def generate(spec: TaskSpec) -> Dataset:
    return {
        TaskKind.SEG: gen_segmentation,
        TaskKind.DET: gen_detection,
        TaskKind.COLOR: gen_colorization,
    }[spec.task](spec)


# -------------------------------------------------------------- serialization


def to_u8(pixels: np.ndarray) -> np.ndarray:
    return np.round(pixels * 255.0).astype(np.uint8)


def from_u8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 255.0


def dataset_content_hash(
    support: tuple[SupportPair, ...], queries: tuple[tuple[Image, Label], ...]
) -> str:
    h = hashlib.sha256()
    for pair in support:
        h.update(to_u8(pair.image.pixels).tobytes())
        h.update(to_u8(pair.label.pixels).tobytes())
    for img, lbl in queries:
        h.update(to_u8(img.pixels).tobytes())
        h.update(to_u8(lbl.pixels).tobytes())
    return h.hexdigest()


def _save_png(pixels: np.ndarray, path: Path) -> None:
    PILImage.fromarray(to_u8(pixels), mode="RGB").save(path)


def _load_png(path: Path) -> np.ndarray:
    return from_u8(np.asarray(PILImage.open(path).convert("RGB")))


def save_dataset(ds: Dataset, root: Path) -> Path:
    """Write data/<task>/<split>/pair_NNNNNN_{img,lbl}.png plus manifest."""
    task_dir = Path(root) / ds.manifest["task"]
    for split, items in (
        ("support", [(p.image, p.label) for p in ds.support]),
        ("query", list(ds.queries)),
    ):
        d = task_dir / split
        d.mkdir(parents=True, exist_ok=True)
        for i, (img, lbl) in enumerate(items):
            _save_png(img.pixels, d / f"pair_{i:06d}_img.png")
            _save_png(lbl.pixels, d / f"pair_{i:06d}_lbl.png")
    with open(task_dir / "manifest.json", "w") as f:
        json.dump(ds.manifest, f, indent=2, sort_keys=True)
    return task_dir


_LABEL_KINDS = {
    "seg": LabelKind.SEG_MASK,
    "det": LabelKind.DET_BOXMASK,
    "color": LabelKind.COLOR_TARGET,
}


def load_dataset(root: Path, task: TaskKind | str) -> Dataset:
    """Read a saved dataset back; verifies the manifest content hash."""
    task = TaskKind(task) if isinstance(task, str) else task
    task_dir = Path(root) / task.value
    with open(task_dir / "manifest.json") as f:
        manifest = json.load(f)
    kind = _LABEL_KINDS[task.value]

    def read_split(split: str) -> list[tuple[Image, Label]]:
        d = task_dir / split
        out = []
        for i in range(len(list(d.glob("pair_*_img.png")))):
            img = Image(pixels=_load_png(d / f"pair_{i:06d}_img.png"))
            lbl = Label(pixels=_load_png(d / f"pair_{i:06d}_lbl.png"), kind=kind)
            out.append((img, lbl))
        return out

    support = tuple(
        SupportPair(image=img, label=lbl, id=i)
        for i, (img, lbl) in enumerate(read_split("support"))
    )
    queries = tuple(read_split("query"))
    got = dataset_content_hash(support, queries)
    if got != manifest["content_hash"]:
        raise ValueError(f"content hash mismatch: manifest {manifest['content_hash']}, files {got}")
    return Dataset(support=support, queries=queries, manifest=manifest)
