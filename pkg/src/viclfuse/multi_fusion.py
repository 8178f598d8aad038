"""Multi-branch inpainting with block-wise cross-attention guidance.

A trainable mainstream copy of the pretrained backbone consumes the
holistic fused canvas while a frozen auxiliary copy encodes the
high/low-similarity guidance canvases. At every block i inside the fusion
range, a FuseModule lets mainstream features attend over the concatenated
guidance features of the same depth:

    Q = proj_q(LN(p_m))   K = proj_k(LN([g_1; g_2]))   V = proj_v([g_1; g_2])
    p_m <- p_m + proj_out(Attention(Q, K, V))

proj_out starts at zero, so an untrained fusion model is bit-identical to
the plain backbone; training refines from there. Ablation variants rewire
canvas roles, weight sharing, or the injection rule.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from .backbone import (
    FeatureSequence,
    InpaintingBackbone,
    TokenLogits,
    batch_masked_ce,
    encode_targets,
    reset_parameters,
)
from .core_types import (
    Canvas,
    CanvasConfig,
    Image,
    Quadrant,
    extract_quadrant,
    masked_patch_indices,
)
from .prompt_generator import Condenser, build_fused_canvas, condense
from .retrieval import PromptGroups
from .tokenizer import Codebook, TokenGrid, decode


@dataclass(frozen=True)
class FusionRange:
    """Inclusive block range [n_down, n_up]; n_up < n_down means disabled."""

    n_down: int = 8
    n_up: int = 14

    def __post_init__(self) -> None:
        if self.n_down < 1:
            raise ValueError("n_down must be >= 1")
        if self.n_up < self.n_down and (self.n_down, self.n_up) != (1, 0):
            raise ValueError("empty range must be written FusionRange.empty()")

    @classmethod
    def empty(cls) -> "FusionRange":
        return cls(n_down=1, n_up=0)

    @classmethod
    def from_center_width(cls, center: int, width: int, depth: int) -> "FusionRange":
        if width == 0:
            return cls.empty()
        if not 1 <= center <= depth:
            raise ValueError(f"center {center} outside [1, {depth}]")
        if width < 0:
            raise ValueError("width must be >= 0")
        n_down = max(1, center - (width - 1) // 2)
        n_up = min(depth, n_down + width - 1)
        return cls(n_down=n_down, n_up=n_up)

    @property
    def is_empty(self) -> bool:
        return self.n_up < self.n_down

    def blocks(self) -> range:
        return range(self.n_down, self.n_up + 1)

    def __contains__(self, i: int) -> bool:
        return self.n_down <= i <= self.n_up


class AblationVariant(enum.Enum):
    FULL = "full"
    ONLY_G1 = "only_g1"
    ONLY_G2 = "only_g2"
    G1_AS_MAIN = "g1_as_main"
    G2_AS_MAIN = "g2_as_main"
    RANDOM_GUIDANCE = "random_guidance"
    FREEZE_BACKBONE = "freeze_backbone"
    SHARED_1MLP = "shared_1mlp"
    SHARED_2MLP = "shared_2mlp"
    NO_CROSS_ATTENTION = "no_cross_attention"
    NO_RESIDUAL = "no_residual"


@dataclass(frozen=True)
class VariantConfig:
    variant: AblationVariant = AblationVariant.FULL
    share_qkv: bool = False
    share_kv: bool = False
    cross_attention: bool = True
    residual: bool = True
    freeze_mainstream: bool = False
    random_guidance: bool = False
    noise_seed: int = 0


def make_variant(v: AblationVariant | str, noise_seed: int = 0) -> VariantConfig:
    """Table of ablation rewirings; FULL is the identity configuration."""
    v = AblationVariant(v) if isinstance(v, str) else v
    base = VariantConfig(variant=v, noise_seed=noise_seed)
    if v in (
        AblationVariant.FULL,
        AblationVariant.ONLY_G1,
        AblationVariant.ONLY_G2,
        AblationVariant.G1_AS_MAIN,
        AblationVariant.G2_AS_MAIN,
    ):
        return base  # canvas arrangement handled by arrange_canvases
    if v is AblationVariant.RANDOM_GUIDANCE:
        return replace(base, random_guidance=True)
    if v is AblationVariant.FREEZE_BACKBONE:
        return replace(base, freeze_mainstream=True)
    if v is AblationVariant.SHARED_1MLP:
        return replace(base, share_qkv=True)
    if v is AblationVariant.SHARED_2MLP:
        return replace(base, share_kv=True)
    if v is AblationVariant.NO_CROSS_ATTENTION:
        return replace(base, cross_attention=False)
    if v is AblationVariant.NO_RESIDUAL:
        return replace(base, residual=False)
    raise ValueError(f"unknown variant {v}")


def arrange_canvases(
    variant: AblationVariant, x_g1: Canvas, x_g2: Canvas, x_gm: Canvas
) -> tuple[Canvas, list[Canvas]]:
    """(mainstream canvas, guidance canvases) for a variant."""
    table = {
        AblationVariant.ONLY_G1: (x_gm, [x_g1, x_g1]),
        AblationVariant.ONLY_G2: (x_gm, [x_g2, x_g2]),
        AblationVariant.G1_AS_MAIN: (x_g1, [x_gm, x_g2]),
        AblationVariant.G2_AS_MAIN: (x_g2, [x_g1, x_gm]),
    }
    return table.get(variant, (x_gm, [x_g1, x_g2]))


class FuseModule(nn.Module):
    """One block's guidance injection; output projection starts at zero."""

    def __init__(
        self,
        dim: int,
        heads: int = 4,
        seed: int = 0,
        variant: VariantConfig = VariantConfig(),
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.variant = variant
        self.ln_q = nn.LayerNorm(dim)
        self.ln_k = nn.LayerNorm(dim)
        self.q_proj = nn.Linear(dim, dim)
        if variant.share_qkv:
            self.k_proj = self.q_proj
            self.v_proj = self.q_proj
        elif variant.share_kv:
            self.k_proj = nn.Linear(dim, dim)
            self.v_proj = self.k_proj
        else:
            self.k_proj = nn.Linear(dim, dim, bias=False)  # key bias is dead
            self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        reset_parameters(self, seed)
        if variant.residual:
            # zero injection at init so the fused model reproduces the
            # mainstream exactly until training moves out_proj
            with torch.no_grad():
                self.out_proj.weight.zero_()
                self.out_proj.bias.zero_()
        self.to(dtype)

    def forward(self, p: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        """p: (B, P, d) mainstream; g: (B, G, d) concatenated guidance."""
        if p.shape[-1] != g.shape[-1] or p.shape[0] != g.shape[0]:
            raise ValueError(f"mainstream {tuple(p.shape)} vs guidance {tuple(g.shape)}")
        if self.variant.cross_attention:
            B, P, d = p.shape
            dh = d // self.heads
            q = self.q_proj(self.ln_q(p)).view(B, P, self.heads, dh).transpose(1, 2)
            k = self.k_proj(self.ln_k(g)).view(B, -1, self.heads, dh).transpose(1, 2)
            v = self.v_proj(g).view(B, -1, self.heads, dh).transpose(1, 2)
            att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
            inj = self.out_proj((att @ v).transpose(1, 2).reshape(B, P, d))
        else:
            inj = self.out_proj(self.v_proj(g).mean(dim=1, keepdim=True)).expand_as(p)
        return p + inj if self.variant.residual else inj


def fuse_step(
    i: int,
    mainstream: FeatureSequence,
    g1: FeatureSequence,
    g2: FeatureSequence,
    fp: FuseModule,
) -> FeatureSequence:
    for name, seq in (("mainstream", mainstream), ("g1", g1), ("g2", g2)):
        if seq.block_index != i:
            raise ValueError(f"{name} features are from block {seq.block_index}, not {i}")
    g = torch.cat([g1.features, g2.features], dim=0).unsqueeze(0)
    out = fp(mainstream.features.unsqueeze(0), g).squeeze(0)
    return FeatureSequence(features=out, block_index=i)


class MultiModel(nn.Module):
    """Trainable mainstream + frozen shared auxiliary + per-block fusers."""

    def __init__(
        self,
        pretrained: InpaintingBackbone,
        fusion_range: FusionRange = FusionRange(),
        variant: VariantConfig = VariantConfig(),
        seed: int = 0,
    ) -> None:
        super().__init__()
        depth = pretrained.cfg.depth
        if not fusion_range.is_empty and fusion_range.n_up > depth:
            raise ValueError(f"fusion range {fusion_range} exceeds depth {depth}")
        self.fusion_range = fusion_range
        self.variant = variant
        self.mainstream = copy.deepcopy(pretrained)
        self.aux = copy.deepcopy(pretrained)
        self.aux.requires_grad_(False)
        dim, heads = pretrained.cfg.embed_dim, pretrained.cfg.heads
        self.fuses = nn.ModuleDict(
            {
                str(i): FuseModule(dim, heads, seed=seed + i, variant=variant,
                                   dtype=pretrained.dtype)
                for i in fusion_range.blocks()
            }
        )

    @torch.no_grad()
    def guidance_features(self, guidance_patches: list[torch.Tensor]) -> dict[int, torch.Tensor]:
        """{block i in range: (B, n_streams*P, d)} from the frozen aux branch."""
        if self.fusion_range.is_empty:
            return {}
        per_stream = [self.aux.forward_blocks(gp) for gp in guidance_patches]
        return {
            i: torch.cat([feats[i] for feats in per_stream], dim=1)
            for i in self.fusion_range.blocks()
        }

    def noise_features(self, batch: int, num_patches: int, n_streams: int = 2) -> dict[int, torch.Tensor]:
        """Unit-Gaussian stand-ins for guidance features, fixed per seed."""
        dim = self.mainstream.cfg.embed_dim
        out = {}
        for i in self.fusion_range.blocks():
            g = torch.Generator().manual_seed(self.variant.noise_seed * 1000 + i)
            out[i] = torch.randn(
                batch, n_streams * num_patches, dim, generator=g, dtype=self.mainstream.dtype
            )
        return out

    def forward_batch(
        self, main_patches: torch.Tensor, guidance: dict[int, torch.Tensor]
    ) -> torch.Tensor:
        """(B, P, pd) + per-block guidance -> (B, P, V) logits."""
        x = self.mainstream.embed_patches(main_patches)
        for i, block in enumerate(self.mainstream.blocks, start=1):
            x = block(x)
            if i in self.fusion_range:
                x = self.fuses[str(i)](x, guidance[i])
        return self.mainstream.head(self.mainstream.final_norm(x))

    def forward(
        self, main_patches: torch.Tensor, guidance_patches: list[torch.Tensor]
    ) -> torch.Tensor:
        if self.variant.random_guidance:
            guidance = self.noise_features(
                main_patches.shape[0], main_patches.shape[1],
                n_streams=max(1, len(guidance_patches)),
            )
        else:
            guidance = self.guidance_features(guidance_patches)
        return self.forward_batch(main_patches, guidance)


def multi_forward(
    x_gm: Canvas,
    x_g1: Canvas,
    x_g2: Canvas,
    model: MultiModel,
) -> TokenLogits:
    """Single-canvas forward; canvas roles already arranged by the caller."""
    main = model.mainstream.patch_tensor(x_gm).unsqueeze(0)
    guidance = [model.aux.patch_tensor(c).unsqueeze(0) for c in (x_g1, x_g2)]
    return TokenLogits(logits=model(main, guidance).squeeze(0))


@torch.no_grad()
def predict_label_streams(
    main: Canvas, guidance: list[Canvas], model: MultiModel, cb: Codebook
) -> Image:
    """Argmax tokens, decode, return the predicted BR quadrant.

    Accepts any number of guidance canvases (group-count sweeps)."""
    cfg = model.mainstream.canvas_cfg
    mp = model.mainstream.patch_tensor(main).unsqueeze(0)
    gp = [model.aux.patch_tensor(c).unsqueeze(0) for c in guidance]
    logits = model(mp, gp).squeeze(0)
    tokens = logits.argmax(dim=1).numpy().reshape(cfg.grid_h, cfg.grid_w)
    decoded = decode(TokenGrid(tokens=tokens, vocab=cb.V), cb)
    return extract_quadrant(Canvas(pixels=decoded.pixels), Quadrant.BR)


def predict_label(
    x_gm: Canvas, x_g1: Canvas, x_g2: Canvas, model: MultiModel, cb: Codebook
) -> Image:
    return predict_label_streams(x_gm, [x_g1, x_g2], model, cb)


def build_group_canvases(
    groups: PromptGroups, query: Image, pg: Condenser, cfg: CanvasConfig
) -> tuple[Canvas, Canvas, Canvas]:
    """(X_g1, X_g2, X_gm): one fused canvas per prompt group."""
    canvases = []
    for group in (groups.high, groups.low, groups.holistic):
        fp = condense(group, query, pg)
        canvases.append(build_fused_canvas(fp, query, cfg))
    return tuple(canvases)


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class MultiTrainConfig:
    lr: float = 0.05
    epochs: int = 10
    batch: int = 16
    seed: int = 0
    # the fuse projections start at zero, so their gradients are small until
    # attention co-adapts; heavy-ball momentum is what lets them grow within
    # a short finetune
    momentum: float = 0.9


@dataclass(frozen=True, eq=False)
class MultiSample:
    """One training instance: prompt groups, query, true label as image.

    `streams` overrides the high/low pair with n explicit guidance groups
    (group-count sweeps); the mainstream canvas stays holistic."""

    groups: PromptGroups
    query: Image
    target: Image
    streams: tuple[tuple, ...] | None = None


@dataclass(frozen=True, eq=False)
class MultiTrainResult:
    model: MultiModel
    loss_trace: list[float] = field(default_factory=list)


def train_multi(
    samples: list[MultiSample],
    pg: Condenser,
    pretrained: InpaintingBackbone,
    cb: Codebook,
    cfg: MultiTrainConfig | None = None,
    fusion_range: FusionRange = FusionRange(),
    variant: VariantConfig = VariantConfig(),
) -> MultiTrainResult:
    """Finetune mainstream + fusers on masked-token CE; aux and pg frozen.

    Guidance canvases come from the frozen prompt generator and their
    auxiliary features are constant, so both are precomputed once.
    """
    if not samples:
        raise ValueError("empty sample list")
    cfg = cfg or MultiTrainConfig()
    canvas_cfg = pretrained.canvas_cfg
    stream_counts = {len(s.streams) for s in samples if s.streams is not None}
    if stream_counts and (len(stream_counts) > 1 or any(s.streams is None for s in samples)):
        raise ValueError("stream counts must agree across all samples")
    if stream_counts and variant.variant is not AblationVariant.FULL:
        raise ValueError("explicit streams only combine with the full variant")
    model = MultiModel(pretrained, fusion_range, variant, seed=cfg.seed)
    if variant.freeze_mainstream:
        model.mainstream.requires_grad_(False)

    main_patches, guid_patches, gt = [], [], []
    with torch.no_grad():
        for s in samples:
            if s.streams is not None:
                main_c = build_fused_canvas(
                    condense(s.groups.holistic, s.query, pg), s.query, canvas_cfg
                )
                guid_c = [
                    build_fused_canvas(condense(g, s.query, pg), s.query, canvas_cfg)
                    for g in s.streams
                ]
            else:
                x_g1, x_g2, x_gm = build_group_canvases(s.groups, s.query, pg, canvas_cfg)
                main_c, guid_c = arrange_canvases(variant.variant, x_g1, x_g2, x_gm)
            main_patches.append(model.mainstream.patch_tensor(main_c))
            guid_patches.append([model.aux.patch_tensor(c) for c in guid_c])
            gt.append(Canvas(pixels=_gt_canvas(s, canvas_cfg)))
    inputs = torch.stack(main_patches)  # (N, P, pd)
    targets = encode_targets(gt, cb)  # (N, P)
    blocks_in_range = list(fusion_range.blocks())
    # random_guidance is an inference-time corruption: it trains exactly like
    # the full variant and model.forward swaps in noise features, so the
    # ablation isolates how much the trained model relies on guidance content
    with torch.no_grad():
        streams = [
            torch.stack([gp[j] for gp in guid_patches]) for j in range(len(guid_patches[0]))
        ]
        guid = model.guidance_features(streams)  # {i: (N, G, d)}
    mask_idx = torch.tensor(sorted(masked_patch_indices(canvas_cfg)), dtype=torch.long)

    trainable = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(trainable, lr=cfg.lr, momentum=cfg.momentum) if trainable else None
    g = torch.Generator().manual_seed(cfg.seed + 1)
    n = len(samples)
    trace: list[float] = []
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=g)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            logits = model.forward_batch(inputs[idx], {i: guid[i][idx] for i in blocks_in_range})
            loss = batch_masked_ce(logits, targets[idx], mask_idx)
            if opt is not None:
                opt.zero_grad()
                loss.backward()
                opt.step()
            total += loss.item() * len(idx)
        trace.append(total / n)
    return MultiTrainResult(model=model, loss_trace=trace)


def _gt_canvas(s: MultiSample, cfg: CanvasConfig) -> np.ndarray:
    """Ground-truth canvas: only the BR tokens feed the masked loss, so any
    canvas whose BR quadrant is the true label works; tile query with label."""
    px = np.zeros((cfg.canvas_h, cfg.canvas_w, 3))
    px[: cfg.quadrant_h, : cfg.quadrant_w] = s.query.pixels
    px[: cfg.quadrant_h, cfg.quadrant_w :] = s.target.pixels
    px[cfg.quadrant_h :, : cfg.quadrant_w] = s.query.pixels
    px[cfg.quadrant_h :, cfg.quadrant_w :] = s.target.pixels
    return px
