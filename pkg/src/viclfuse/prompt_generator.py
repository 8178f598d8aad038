"""Prompt condenser: many support pairs in, one fused support pair out.

The condenser runs at quadrant resolution on patch tokens. Two heads share
an image-patch embedding:

  * image head — query tokens cross-attend over all member image tokens
    (the query's own tokens are included as keys so a pure alignment
    objective is attainable), followed by a sigmoid-bounded projection
    back to pixel space;
  * label head — per patch position, a softmax over group members mixes
    the members' *raw* label pixels, so outputs stay convex in [0, 1] and
    a single-member group passes its label through exactly.

Training optimizes (1-lambda)*alignment-MSE + lambda*masked-token CE with
every backbone parameter frozen; gradients reach only the condenser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import InpaintingBackbone, TokenLogits, masked_ce_loss
from .core_types import (
    Canvas,
    CanvasConfig,
    Image,
    Quadrant,
    ShapeError,
    SupportPair,
    compose_canvas_parts,
    masked_patch_indices,
    patchify,
    quadrant_patch_indices,
    unpatchify,
)
from .tokenizer import Codebook, TokenGrid, encode


@dataclass(frozen=True, eq=False)
class FusedPair:
    """Condensed prompt: image plus a label-shaped image (continuous values)."""

    image: Image
    label: Image

    def __post_init__(self) -> None:
        if self.image.pixels.shape != self.label.pixels.shape:
            raise ShapeError("fused image and label must share dimensions")


@dataclass(frozen=True)
class PGTrainConfig:
    lam: float = 0.9
    lr: float = 0.05
    epochs: int = 10
    batch: int = 16
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


class Condenser(nn.Module):
    def __init__(
        self,
        canvas_cfg: CanvasConfig,
        d_model: int = 64,
        heads: int = 4,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        if d_model % heads:
            raise ValueError("d_model must be divisible by heads")
        self.canvas_cfg = canvas_cfg
        self.d_model = d_model
        self.heads = heads
        pd = canvas_cfg.patch_dim
        self.img_embed = nn.Linear(pd, d_model)
        self.q_proj = nn.Linear(d_model, d_model)
        # key biases shift every softmax logit equally, so they are dead
        # parameters; omit them
        self.k_proj = nn.Linear(d_model, d_model, bias=False)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, pd)
        self.lbl_q = nn.Linear(d_model, d_model)
        self.lbl_k = nn.Linear(d_model, d_model, bias=False)
        # fan-in scaled init: the module is shallow, so a ViT-style 0.02 std
        # leaves the sigmoid head too flat to train at SGD speeds
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                if p.ndim >= 2:
                    p.normal_(0.0, 1.0 / p.shape[1] ** 0.5, generator=g)
                else:
                    p.zero_()
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.img_embed.weight.dtype

    def forward(
        self,
        member_imgs: torch.Tensor,  # (B, M, L, pd)
        member_lbls: torch.Tensor,  # (B, M, L, pd)
        query: torch.Tensor,  # (B, L, pd)
    ) -> tuple[torch.Tensor, torch.Tensor]:
        B, M, L, pd = member_imgs.shape
        d, H = self.d_model, self.heads
        dh = d // H
        me = self.img_embed(member_imgs)  # (B, M, L, d)
        qe = self.img_embed(query)  # (B, L, d)

        # image head: attend over member tokens plus the query's own tokens
        keysrc = torch.cat([me.reshape(B, M * L, d), qe], dim=1)
        q = self.q_proj(qe).view(B, L, H, dh).transpose(1, 2)  # (B, H, L, dh)
        k = self.k_proj(keysrc).view(B, M * L + L, H, dh).transpose(1, 2)
        v = self.v_proj(keysrc).view(B, M * L + L, H, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        pooled = qe + (att @ v).transpose(1, 2).reshape(B, L, d)  # residual read
        fused_img = torch.sigmoid(self.out_proj(pooled))  # (B, L, pd)

        # label head: per-position softmax over members, mixing raw pixels
        scores = (self.lbl_k(me) * self.lbl_q(qe).unsqueeze(1)).sum(-1)  # (B, M, L)
        weights = torch.softmax(scores / math.sqrt(d), dim=1)
        fused_lbl = (weights.unsqueeze(-1) * member_lbls).sum(dim=1)  # (B, L, pd)
        return fused_img, fused_lbl


def quadrant_tokens(pixels: np.ndarray, cfg: CanvasConfig, dtype: torch.dtype) -> torch.Tensor:
    """(quadrant_h, quadrant_w, 3) -> (patches_per_quadrant, patch_dim)."""
    if pixels.shape != (cfg.quadrant_h, cfg.quadrant_w, 3):
        raise ShapeError(f"quadrant pixels have shape {pixels.shape}")
    return torch.from_numpy(patchify(pixels, cfg.patch_size)).to(dtype)


def group_tensors(
    group: list[SupportPair] | tuple[SupportPair, ...],
    cfg: CanvasConfig,
    dtype: torch.dtype,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(M, L, pd) image and label patch stacks in canonical (ascending-id)
    member order, which makes condense bit-exactly permutation-invariant."""
    if not group:
        raise ValueError("group must be nonempty")
    members = sorted(group, key=lambda p: p.id)
    imgs = torch.stack([quadrant_tokens(m.image.pixels, cfg, dtype) for m in members])
    lbls = torch.stack([quadrant_tokens(m.label.pixels, cfg, dtype) for m in members])
    return imgs, lbls


def tokens_to_quadrant(tokens: torch.Tensor, cfg: CanvasConfig) -> np.ndarray:
    """(patches_per_quadrant, patch_dim) -> clipped (qh, qw, 3) float64."""
    arr = tokens.detach().double().numpy()
    return np.clip(
        unpatchify(arr, cfg.quadrant_grid_h, cfg.quadrant_grid_w, cfg.patch_size), 0.0, 1.0
    )


@torch.no_grad()
def condense(
    group: list[SupportPair] | tuple[SupportPair, ...],
    query: Image,
    params: Condenser,
) -> FusedPair:
    cfg = params.canvas_cfg
    mi, ml = group_tensors(group, cfg, params.dtype)
    qt = quadrant_tokens(query.pixels, cfg, params.dtype)
    fused_img, fused_lbl = params(mi.unsqueeze(0), ml.unsqueeze(0), qt.unsqueeze(0))
    return FusedPair(
        image=Image(pixels=tokens_to_quadrant(fused_img.squeeze(0), cfg)),
        label=Image(pixels=tokens_to_quadrant(fused_lbl.squeeze(0), cfg)),
    )


def build_fused_canvas(fp: FusedPair, query: Image, cfg: CanvasConfig) -> Canvas:
    """Fused pair in the top row, query bottom-left, mask fill bottom-right."""
    return compose_canvas_parts(fp.image.pixels, fp.label.pixels, query.pixels, cfg)


def assembly_perm(cfg: CanvasConfig) -> torch.Tensor:
    """perm[i] = row of canvas patch i inside the [TL|TR|BL|BR] patch stack.

    Lets fused canvases be assembled in torch (differentiably) in exactly
    the order patchify(compose_canvas_parts(...)) would produce.
    """
    L = cfg.patches_per_quadrant
    perm = torch.empty(cfg.num_patches, dtype=torch.long)
    for qi, quad in enumerate((Quadrant.TL, Quadrant.TR, Quadrant.BL, Quadrant.BR)):
        for j, ci in enumerate(sorted(quadrant_patch_indices(cfg, quad))):
            perm[ci] = qi * L + j
    return perm


def assemble_canvas_patches(
    tl: torch.Tensor, tr: torch.Tensor, bl: torch.Tensor, cfg: CanvasConfig,
    perm: torch.Tensor | None = None,
) -> torch.Tensor:
    """(B, L, pd) quadrant token stacks -> (B, num_patches, patch_dim)."""
    br = torch.full_like(tl, float(cfg.mask_fill))
    stacked = torch.cat([tl, tr, bl, br], dim=1)
    perm = assembly_perm(cfg) if perm is None else perm
    return stacked[:, perm, :]


def pg_loss(
    fp: FusedPair | torch.Tensor,
    query: Image | torch.Tensor,
    logits: TokenLogits | torch.Tensor,
    target: TokenGrid | torch.Tensor,
    mask: frozenset[int],
    lam: float,
) -> torch.Tensor:
    """(1-lam) * mean-squared alignment + lam * masked cross-entropy."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    img = fp.image.pixels if isinstance(fp, FusedPair) else fp
    ref = query.pixels if isinstance(query, Image) else query
    img_t = img if isinstance(img, torch.Tensor) else torch.from_numpy(np.array(img))
    ref_t = ref if isinstance(ref, torch.Tensor) else torch.from_numpy(np.array(ref))
    if img_t.shape != ref_t.shape:
        raise ShapeError("alignment operands must share shape")
    align = ((img_t - ref_t.to(img_t.dtype)) ** 2).mean()
    ce = masked_ce_loss(logits, target, mask)
    return (1.0 - lam) * align + lam * ce.to(align.dtype)


@dataclass(frozen=True, eq=False)
class PGSample:
    """One training instance: a prompt group, the query, and its true label."""

    group: tuple[SupportPair, ...]
    query: Image
    target: Image  # ground-truth label rendered as an image

    def __post_init__(self) -> None:
        if not self.group:
            raise ValueError("group must be nonempty")


@dataclass(frozen=True, eq=False)
class PGTrainResult:
    condenser: Condenser
    loss_trace: list[float] = field(default_factory=list)


def train_prompt_generator(
    samples: list[PGSample],
    model: InpaintingBackbone,
    cb: Codebook,
    cfg: PGTrainConfig,
    condenser: Condenser | None = None,
) -> PGTrainResult:
    """Optimize condenser parameters against the frozen backbone."""
    if not samples:
        raise ValueError("empty sample list")
    sizes = {len(s.group) for s in samples}
    if len(sizes) != 1:
        raise ValueError(f"group sizes must agree within a run, got {sorted(sizes)}")
    canvas_cfg = model.canvas_cfg
    condenser = condenser or Condenser(canvas_cfg, seed=cfg.seed, dtype=model.dtype)

    mi = torch.stack([group_tensors(s.group, canvas_cfg, model.dtype)[0] for s in samples])
    ml = torch.stack([group_tensors(s.group, canvas_cfg, model.dtype)[1] for s in samples])
    qt = torch.stack([quadrant_tokens(s.query.pixels, canvas_cfg, model.dtype) for s in samples])
    targets = torch.stack(
        [torch.from_numpy(encode(s.target, cb).flat.copy()) for s in samples]
    )  # (N, patches_per_quadrant), BR row-major == sorted mask order
    mask_idx = torch.tensor(sorted(masked_patch_indices(canvas_cfg)), dtype=torch.long)
    perm = assembly_perm(canvas_cfg)

    was_training = model.training
    grad_flags = [p.requires_grad for p in model.parameters()]
    model.requires_grad_(False)
    opt = torch.optim.SGD(condenser.parameters(), lr=cfg.lr)
    g = torch.Generator().manual_seed(cfg.seed + 1)
    n = len(samples)
    trace: list[float] = []
    try:
        for _ in range(cfg.epochs):
            order = torch.randperm(n, generator=g)
            total = 0.0
            for start in range(0, n, cfg.batch):
                idx = order[start : start + cfg.batch]
                fused_img, fused_lbl = condenser(mi[idx], ml[idx], qt[idx])
                canvas = assemble_canvas_patches(fused_img, fused_lbl, qt[idx], canvas_cfg, perm)
                logits = model(canvas)  # (b, P, V)
                sel = logits[:, mask_idx, :]
                ce = F.cross_entropy(sel.reshape(-1, sel.shape[-1]), targets[idx].reshape(-1))
                align = ((fused_img - qt[idx]) ** 2).mean()
                loss = (1.0 - cfg.lam) * align + cfg.lam * ce
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            trace.append(total / n)
    finally:
        for p, flag in zip(model.parameters(), grad_flags):
            p.requires_grad_(flag)
        model.train(was_training)
    return PGTrainResult(condenser=condenser, loss_trace=trace)
