"""Support retrieval and prompt grouping.

Queries are matched to support pairs by cosine similarity of backbone
features (the image tiled into a solo canvas, final-block features mean
pooled, L2 normalized). The ranked top-K is then partitioned into the
holistic / high-similarity / low-similarity groups consumed by the fusion
model; `split_ranked` generalizes the split to n contiguous groups for
group-count sweeps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import InpaintingBackbone
from .core_types import Canvas, Image, SupportPair


@dataclass(frozen=True, eq=False)
class RankedSupport:
    """Top-K support pairs with non-increasing scores, ties by ascending id."""

    pairs: tuple[tuple[SupportPair, float], ...]
    query_id: int

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ValueError("ranking must be nonempty")
        for (pa, sa), (pb, sb) in zip(self.pairs, self.pairs[1:]):
            if sb > sa:
                raise ValueError("scores must be non-increasing")
            if sb == sa and pb.id <= pa.id:
                raise ValueError("tied scores must be ordered by ascending id")
        for _, s in self.pairs:
            if not -1.0 <= s <= 1.0:
                raise ValueError(f"cosine score {s} outside [-1, 1]")

    @property
    def k(self) -> int:
        return len(self.pairs)

    @property
    def support(self) -> tuple[SupportPair, ...]:
        return tuple(p for p, _ in self.pairs)

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(s for _, s in self.pairs)


@dataclass(frozen=True, eq=False)
class PromptGroups:
    """MPGS triple: all K / first K_g1 / last K_g2 of the ranking."""

    holistic: tuple[SupportPair, ...]
    high: tuple[SupportPair, ...]
    low: tuple[SupportPair, ...]

    def __post_init__(self) -> None:
        if not (self.holistic and self.high and self.low):
            raise ValueError("all three groups must be nonempty")
        if self.holistic[: len(self.high)] != self.high:
            raise ValueError("high group must be a prefix of the holistic ranking")
        if self.holistic[len(self.holistic) - len(self.low) :] != self.low:
            raise ValueError("low group must be a suffix of the holistic ranking")


def _solo_canvas(img: Image) -> Canvas:
    return Canvas(pixels=np.tile(img.pixels, (2, 2, 1)))


@torch.no_grad()
def embed_images(
    images: list[Image], model: InpaintingBackbone, batch_size: int = 64
) -> np.ndarray:
    """(n, d) array of L2-normalized final-block mean features."""
    chunks = []
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size]
        patches = torch.stack([model.patch_tensor(_solo_canvas(im)) for im in batch])
        feats = model.forward_blocks(patches)[-1]  # (B, P, d)
        chunks.append(feats.mean(dim=1).double().numpy())
    vecs = np.concatenate(chunks, axis=0)
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    degenerate = norms[:, 0] < 1e-12
    if degenerate.any():
        warnings.warn("zero-norm embedding left as zeros", RuntimeWarning)
        norms[degenerate] = 1.0
    return vecs / norms


def embed_image(img: Image, model: InpaintingBackbone) -> np.ndarray:
    return embed_images([img], model)[0]


def select_top_k(
    query: Image,
    support: list[SupportPair],
    K: int,
    model: InpaintingBackbone,
    query_id: int = -1,
    support_emb: np.ndarray | None = None,
) -> RankedSupport:
    """Rank support by cosine similarity to the query; keep the top K.

    `support_emb` may carry precomputed embed_images output for the support
    set (one row per pair, same order) to amortize retrieval over queries.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if K > len(support):
        raise ValueError(f"K={K} exceeds support size {len(support)}")
    if support_emb is None:
        support_emb = embed_images([p.image for p in support], model)
    if support_emb.shape[0] != len(support):
        raise ValueError("support_emb rows must match support list")
    q = embed_image(query, model)
    scores = np.clip(support_emb @ q, -1.0, 1.0)
    order = sorted(range(len(support)), key=lambda i: (-scores[i], support[i].id))
    ranked = tuple((support[i], float(scores[i])) for i in order[:K])
    return RankedSupport(pairs=ranked, query_id=query_id)


def mpgs_partition(ranked: RankedSupport, K_g1: int, K_g2: int) -> PromptGroups:
    """holistic = all K, high = first K_g1, low = last K_g2."""
    if K_g1 < 1 or K_g2 < 1:
        raise ValueError("group sizes must be >= 1")
    if K_g1 + K_g2 > ranked.k:
        raise ValueError(f"K_g1+K_g2 = {K_g1 + K_g2} exceeds K = {ranked.k}")
    pairs = ranked.support
    return PromptGroups(holistic=pairs, high=pairs[:K_g1], low=pairs[len(pairs) - K_g2 :])


def split_ranked(ranked: RankedSupport, n_groups: int) -> list[tuple[SupportPair, ...]]:
    """n contiguous rank chunks (sizes as equal as possible), order preserved."""
    if not 1 <= n_groups <= ranked.k:
        raise ValueError(f"n_groups={n_groups} outside [1, {ranked.k}]")
    pairs = ranked.support
    bounds = [round(i * ranked.k / n_groups) for i in range(n_groups + 1)]
    return [pairs[a:b] for a, b in zip(bounds, bounds[1:])]
