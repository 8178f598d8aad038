"""Deterministic patch-palette tokenizer.

A flat k-means codebook over image patches plays the role of a frozen
VQGAN: `encode` quantizes every patch to its nearest entry, `decode`
pastes entries back. Both directions are pure and bit-exact, so token
targets for inpainting training are reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_types import Canvas, Image, patchify, unpatchify


@dataclass(frozen=True, eq=False)
class Codebook:
    entries: np.ndarray  # (V, patch_size*patch_size*3)
    patch_size: int

    def __post_init__(self) -> None:
        entries = np.asarray(self.entries, dtype=np.float64).copy()
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)
        if entries.ndim != 2:
            raise ValueError(f"codebook entries must be 2-D, got {entries.shape}")
        if entries.shape[0] < 2:
            raise ValueError("codebook needs at least 2 entries")
        if entries.shape[1] != self.patch_size * self.patch_size * 3:
            raise ValueError(
                f"entry dim {entries.shape[1]} != patch_size**2 * 3 "
                f"for patch_size={self.patch_size}"
            )
        if not np.isfinite(entries).all():
            raise ValueError("codebook entries must be finite")
        if entries.min() < 0.0 or entries.max() > 1.0:
            raise ValueError("codebook entries must lie in [0, 1]")
        if len(np.unique(entries, axis=0)) != entries.shape[0]:
            raise ValueError("codebook entries must be pairwise distinct")

    @property
    def V(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class TokenGrid:
    tokens: np.ndarray  # (grid_h, grid_w) int64
    vocab: int

    def __post_init__(self) -> None:
        tokens = np.asarray(self.tokens, dtype=np.int64).copy()
        tokens.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)
        if tokens.ndim != 2:
            raise ValueError(f"token grid must be 2-D, got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.vocab:
            raise ValueError(f"tokens outside [0, {self.vocab})")

    @property
    def flat(self) -> np.ndarray:
        """Row-major flattened tokens, matching canvas patch order."""
        return self.tokens.reshape(-1)


def _gather_patches(images: list[Image], patch_size: int) -> np.ndarray:
    if not images:
        raise ValueError("need at least one image to fit a codebook")
    return np.concatenate([patchify(im.pixels, patch_size) for im in images], axis=0)


def fit_codebook(
    images: list[Image], V: int, seed: int, patch_size: int = 8
) -> Codebook:
    """k-means patch palette: V centroids, 25 Lloyd iterations, seeded init.

    Initial centroids are drawn (without replacement) from the distinct
    patches; empty clusters keep their previous centroid, so the result is
    a pure function of (images, V, seed, patch_size).
    """
    if V < 2:
        raise ValueError("V must be at least 2")
    patches = _gather_patches(images, patch_size)
    uniq = np.unique(patches, axis=0)
    if len(uniq) < V:
        raise ValueError(f"V={V} exceeds the {len(uniq)} distinct patches available")

    rng = np.random.default_rng(seed)
    centroids = uniq[rng.choice(len(uniq), size=V, replace=False)].copy()

    for _ in range(25):
        d2 = ((patches[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = d2.argmin(axis=1)  # argmin ties -> lowest index
        for k in range(V):
            members = patches[assign == k]
            if len(members):
                centroids[k] = members.mean(axis=0)
    centroids = np.clip(centroids, 0.0, 1.0)

    # deduplicate collapsed centroids from the distinct-patch pool so the
    # codebook invariant (pairwise distinct rows) always holds
    for k in range(V):
        while any((centroids[k] == centroids[j]).all() for j in range(k)):
            d2 = ((uniq[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            centroids[k] = uniq[d2.min(axis=1).argmax()]
    return Codebook(entries=centroids, patch_size=patch_size)


def encode(image_or_canvas: Image | Canvas, cb: Codebook) -> TokenGrid:
    """Quantize each patch to its nearest entry (squared Euclidean,
    ties broken by lowest index)."""
    pixels = image_or_canvas.pixels
    p = cb.patch_size
    patches = patchify(pixels, p)
    d2 = ((patches[:, None, :] - cb.entries[None, :, :]) ** 2).sum(axis=2)
    tokens = d2.argmin(axis=1)
    gh, gw = pixels.shape[0] // p, pixels.shape[1] // p
    return TokenGrid(tokens=tokens.reshape(gh, gw), vocab=cb.V)


def decode(tokens: TokenGrid, cb: Codebook) -> Image:
    """Paste the codebook entry of each token back into pixel space."""
    if tokens.vocab > cb.V and tokens.tokens.max() >= cb.V:
        raise ValueError("token grid references entries beyond this codebook")
    gh, gw = tokens.tokens.shape
    patches = cb.entries[tokens.flat]
    return Image(pixels=unpatchify(patches, gh, gw, cb.patch_size))
