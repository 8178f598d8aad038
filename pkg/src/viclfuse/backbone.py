"""Inpainting backbone: patch embed -> N pre-norm transformer blocks -> token head.

The model predicts discrete codebook tokens for the masked bottom-right
quadrant of a canvas and exposes every block's output features, which the
fusion model taps for cross-attention injection. All randomness flows
through explicit torch.Generator instances so that two runs with the same
seed produce bit-identical weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import (
    Canvas,
    CanvasConfig,
    Image,
    Quadrant,
    extract_quadrant,
    masked_patch_indices,
    patchify,
    with_quadrant,
)
from .tokenizer import Codebook, TokenGrid, decode, encode


@dataclass(frozen=True)
class BackboneConfig:
    depth: int = 16
    embed_dim: int = 128
    heads: int = 4
    mlp_ratio: float = 2.0
    patch_size: int = 8
    vocab: int = 64

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """Per-patch features after `block_index` blocks (0 = patch embedding)."""

    features: torch.Tensor  # (num_patches, embed_dim)
    block_index: int

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValueError(f"features must be (num_patches, d), got {tuple(self.features.shape)}")
        if not torch.isfinite(self.features).all():
            raise ValueError("non-finite features")


@dataclass(frozen=True, eq=False)
class TokenLogits:
    logits: torch.Tensor  # (num_patches, vocab)

    def __post_init__(self) -> None:
        if self.logits.ndim != 2:
            raise ValueError(f"logits must be (num_patches, V), got {tuple(self.logits.shape)}")
        if not torch.isfinite(self.logits).all():
            raise ValueError("non-finite logits")


class TransformerBlock(nn.Module):
    """Pre-norm block: x += attn(LN(x)); x += mlp(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float) -> None:
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        B, P, d = x.shape
        dh = d // self.heads
        qkv = self.qkv(self.ln1(x))  # (B, P, 3d)
        q, k, v = qkv.chunk(3, dim=-1)
        # (B, P, d) -> (B, heads, P, dh)
        q = q.view(B, P, self.heads, dh).transpose(1, 2)
        k = k.view(B, P, self.heads, dh).transpose(1, 2)
        v = v.view(B, P, self.heads, dh).transpose(1, 2)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, P, d)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attend(x)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class InpaintingBackbone(nn.Module):
    def __init__(
        self,
        cfg: BackboneConfig,
        canvas_cfg: CanvasConfig,
        seed: int,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        if cfg.patch_size != canvas_cfg.patch_size:
            raise ValueError("backbone and canvas patch sizes disagree")
        self.cfg = cfg
        self.canvas_cfg = canvas_cfg
        self.embed = nn.Linear(canvas_cfg.patch_dim, cfg.embed_dim)
        self.pos = nn.Parameter(torch.zeros(canvas_cfg.num_patches, cfg.embed_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.embed_dim, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)
        )
        self.final_norm = nn.LayerNorm(cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, cfg.vocab)
        reset_parameters(self, seed)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.embed.weight.dtype

    def patch_tensor(self, canvas: Canvas) -> torch.Tensor:
        """Canvas pixels -> (num_patches, patch_dim) in the model dtype."""
        if canvas.pixels.shape[:2] != (self.canvas_cfg.canvas_h, self.canvas_cfg.canvas_w):
            raise ValueError(
                f"canvas {canvas.pixels.shape[:2]} does not match config "
                f"{(self.canvas_cfg.canvas_h, self.canvas_cfg.canvas_w)}"
            )
        patches = patchify(canvas.pixels, self.cfg.patch_size)
        return torch.from_numpy(patches).to(self.dtype)

    def embed_patches(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, num_patches, patch_dim) -> (B, num_patches, d) with pos added."""
        return self.embed(patches) + self.pos

    def forward_blocks(self, patches: torch.Tensor) -> list[torch.Tensor]:
        """All intermediate features: [embed, block_1, ..., block_N]."""
        feats = [self.embed_patches(patches)]
        for block in self.blocks:
            feats.append(block(feats[-1]))
        return feats

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        """(B, num_patches, patch_dim) -> (B, num_patches, vocab) logits."""
        x = self.embed_patches(patches)
        for block in self.blocks:
            x = block(x)
        return self.head(self.final_norm(x))


def reset_parameters(model: nn.Module, seed: int) -> None:
    """Seeded init: normal(0, 0.02) matrices, zero biases, unit layer norms."""
    g = torch.Generator().manual_seed(seed)
    for name, p in model.named_parameters():
        with torch.no_grad():
            if p.ndim >= 2:
                p.normal_(0.0, 0.02, generator=g)
            else:
                p.zero_() if name.endswith("bias") else p.fill_(1.0)


# ------------------------------------------------------------ functional ops


def patch_embed(canvas: Canvas, model: InpaintingBackbone) -> FeatureSequence:
    x = model.embed_patches(model.patch_tensor(canvas).unsqueeze(0))
    return FeatureSequence(features=x.squeeze(0), block_index=0)


def run_block(i: int, x: FeatureSequence, model: InpaintingBackbone) -> FeatureSequence:
    if not 1 <= i <= model.cfg.depth:
        raise ValueError(f"block index {i} outside [1, {model.cfg.depth}]")
    if x.block_index != i - 1:
        raise ValueError(f"block {i} applied to features from block {x.block_index}")
    out = model.blocks[i - 1](x.features.unsqueeze(0)).squeeze(0)
    return FeatureSequence(features=out, block_index=i)


def predict_tokens(x: FeatureSequence, model: InpaintingBackbone) -> TokenLogits:
    if x.block_index != model.cfg.depth:
        raise ValueError(f"head applied at block {x.block_index}, expected {model.cfg.depth}")
    return TokenLogits(logits=model.head(model.final_norm(x.features)))


def masked_ce_loss(
    logits: TokenLogits | torch.Tensor,
    target: TokenGrid | torch.Tensor,
    mask: frozenset[int],
) -> torch.Tensor:
    """Mean cross-entropy over masked patch positions only."""
    if not mask:
        raise ValueError("mask must be nonempty")
    raw = logits.logits if isinstance(logits, TokenLogits) else logits
    tgt = torch.from_numpy(target.flat.copy()) if isinstance(target, TokenGrid) else target
    idx = torch.tensor(sorted(mask), dtype=torch.long)
    if idx.min() < 0 or idx.max() >= raw.shape[0]:
        raise ValueError("mask indices outside patch range")
    return F.cross_entropy(raw[idx], tgt[idx])


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 10
    batch_size: int = 16


@dataclass(frozen=True, eq=False)
class BackboneTrainResult:
    model: InpaintingBackbone
    loss_trace: list[float] = field(default_factory=list)  # per-epoch mean


def canvas_batch(model: InpaintingBackbone, canvases: list[Canvas]) -> torch.Tensor:
    return torch.stack([model.patch_tensor(c) for c in canvases])


def encode_targets(canvases: list[Canvas], cb: Codebook) -> torch.Tensor:
    """(B, num_patches) int64 token targets from ground-truth canvases."""
    return torch.stack([torch.from_numpy(encode(c, cb).flat.copy()) for c in canvases])


def mask_inputs(canvases: list[Canvas], cfg: CanvasConfig) -> list[Canvas]:
    fill = np.full((cfg.quadrant_h, cfg.quadrant_w, 3), cfg.mask_fill)
    return [with_quadrant(c, Quadrant.BR, fill) for c in canvases]


def batch_masked_ce(
    logits: torch.Tensor, targets: torch.Tensor, mask_idx: torch.Tensor
) -> torch.Tensor:
    """(B, P, V) logits vs (B, P) targets, CE averaged over batch x mask."""
    sel = logits[:, mask_idx, :]
    return F.cross_entropy(sel.reshape(-1, sel.shape[-1]), targets[:, mask_idx].reshape(-1))


def train_backbone(
    dataset: list[Canvas],
    cb: Codebook,
    cfg: BackboneConfig,
    seed: int,
    canvas_cfg: CanvasConfig | None = None,
    train: TrainConfig | None = None,
) -> BackboneTrainResult:
    """SGD on masked-token cross-entropy over BR-masked canvases.

    `dataset` holds ground-truth canvases (true label in BR); inputs are the
    same canvases with BR mask-filled and targets their encoded tokens.
    """
    if not dataset:
        raise ValueError("empty dataset")
    canvas_cfg = canvas_cfg or CanvasConfig(patch_size=cfg.patch_size)
    train = train or TrainConfig()

    model = InpaintingBackbone(cfg, canvas_cfg, seed=seed)
    inputs = canvas_batch(model, mask_inputs(dataset, canvas_cfg))  # (N, P, pd)
    targets = encode_targets(dataset, cb)  # (N, P)
    mask_idx = torch.tensor(sorted(masked_patch_indices(canvas_cfg)), dtype=torch.long)

    opt = torch.optim.SGD(model.parameters(), lr=train.lr)
    g = torch.Generator().manual_seed(seed + 1)
    n = len(dataset)
    trace: list[float] = []
    for _ in range(train.epochs):
        order = torch.randperm(n, generator=g)
        total = 0.0
        for start in range(0, n, train.batch_size):
            idx = order[start : start + train.batch_size]
            loss = batch_masked_ce(model(inputs[idx]), targets[idx], mask_idx)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        trace.append(total / n)
    return BackboneTrainResult(model=model, loss_trace=trace)


@torch.no_grad()
def infer_inpaint(canvas: Canvas, model: InpaintingBackbone, cb: Codebook) -> Image:
    """Predict BR tokens, decode with the codebook, return the BR quadrant."""
    cfg = model.canvas_cfg
    logits = model(model.patch_tensor(canvas).unsqueeze(0)).squeeze(0)
    tokens = logits.argmax(dim=1).numpy().reshape(cfg.grid_h, cfg.grid_w)
    decoded = decode(TokenGrid(tokens=tokens, vocab=cb.V), cb)
    return extract_quadrant(Canvas(pixels=decoded.pixels), Quadrant.BR)
