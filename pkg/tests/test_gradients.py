"""Autograd vs. hand-written finite differences on micro-sized models.

Every trainable path gets checked: a single transformer block, full
masked-token cross-entropy through the backbone, and (in later sections)
the prompt condenser and the cross-attention fusion step.
"""

import numpy as np
import pytest
import torch
from grad_utils import fd_grad, rel_err

from viclfuse.backbone import (
    BackboneConfig,
    FeatureSequence,
    InpaintingBackbone,
    masked_ce_loss,
    run_block,
)
from viclfuse.core_types import Canvas, CanvasConfig, masked_patch_indices
from viclfuse.multi_fusion import FuseModule, FusionRange, MultiModel, fuse_step
from viclfuse.prompt_generator import Condenser

TOL = 1e-4
EPS = 1e-5

MICRO_CANVAS = CanvasConfig(quadrant_h=8, quadrant_w=8, patch_size=4)
MICRO_CFG = BackboneConfig(depth=2, embed_dim=8, heads=2, mlp_ratio=2.0, patch_size=4, vocab=3)


def micro_model(seed=0):
    return InpaintingBackbone(MICRO_CFG, MICRO_CANVAS, seed=seed, dtype=torch.float64)


def random_canvas(seed):
    rng = np.random.default_rng(seed)
    size = (MICRO_CANVAS.canvas_h, MICRO_CANVAS.canvas_w, 3)
    return Canvas(pixels=rng.integers(0, 4, size=size) / 3.0)


def test_run_block_input_gradient_matches_fd():
    model = micro_model()
    P, d = MICRO_CANVAS.num_patches, MICRO_CFG.embed_dim
    g = torch.Generator().manual_seed(1)
    x = torch.randn(P, d, generator=g, dtype=torch.float64)
    probe = torch.randn(P, d, generator=g, dtype=torch.float64)

    x_var = x.clone().requires_grad_(True)
    out = run_block(1, FeatureSequence(x_var, 0), model).features
    (out * probe).sum().backward()
    analytic = x_var.grad

    def loss_fn():
        return (run_block(1, FeatureSequence(x, 0), model).features * probe).sum().item()

    numeric = fd_grad(loss_fn, x, eps=EPS)
    assert rel_err(analytic, numeric) < TOL


def test_backbone_param_gradients_match_fd():
    model = micro_model(seed=3)
    patches = model.patch_tensor(random_canvas(0)).unsqueeze(0)
    targets = torch.from_numpy(
        np.random.default_rng(1).integers(0, MICRO_CFG.vocab, size=MICRO_CANVAS.num_patches)
    )
    mask = masked_patch_indices(MICRO_CANVAS)

    def loss():
        return masked_ce_loss(model(patches).squeeze(0), targets, mask)

    model.zero_grad()
    loss().backward()

    def loss_fn():
        with torch.no_grad():
            return loss().item()

    for name, p in model.named_parameters():
        numeric = fd_grad(loss_fn, p.data, eps=EPS)
        assert p.grad is not None, name
        err = rel_err(p.grad, numeric)
        assert err < TOL, f"{name}: rel err {err:.2e}"


def test_condense_param_gradients_match_fd():
    cond = Condenser(MICRO_CANVAS, d_model=8, heads=2, seed=5, dtype=torch.float64)
    g = torch.Generator().manual_seed(7)
    B, M, L, pd = 1, 2, MICRO_CANVAS.patches_per_quadrant, MICRO_CANVAS.patch_dim
    mi = torch.rand(B, M, L, pd, generator=g, dtype=torch.float64)
    ml = torch.rand(B, M, L, pd, generator=g, dtype=torch.float64)
    qt = torch.rand(B, L, pd, generator=g, dtype=torch.float64)
    probe_i = torch.randn(B, L, pd, generator=g, dtype=torch.float64)
    probe_l = torch.randn(B, L, pd, generator=g, dtype=torch.float64)

    def loss():
        fi, fl = cond(mi, ml, qt)
        return (fi * probe_i).sum() + (fl * probe_l).sum()

    cond.zero_grad()
    loss().backward()

    def loss_fn():
        with torch.no_grad():
            return loss().item()

    for name, p in cond.named_parameters():
        numeric = fd_grad(loss_fn, p.data, eps=EPS)
        assert p.grad is not None, name
        err = rel_err(p.grad, numeric)
        assert err < TOL, f"{name}: rel err {err:.2e}"


def test_fuse_step_param_gradients_match_fd():
    fm = FuseModule(dim=8, heads=2, seed=9, dtype=torch.float64)
    with torch.no_grad():  # zero-init out_proj would zero most gradients
        fm.out_proj.weight.normal_(0, 0.2, generator=torch.Generator().manual_seed(2))
        fm.out_proj.bias.normal_(0, 0.2, generator=torch.Generator().manual_seed(3))
    g = torch.Generator().manual_seed(11)
    P, d = MICRO_CANVAS.num_patches, 8
    pm = torch.randn(P, d, generator=g, dtype=torch.float64)
    g1 = torch.randn(P, d, generator=g, dtype=torch.float64)
    g2 = torch.randn(P, d, generator=g, dtype=torch.float64)
    probe = torch.randn(P, d, generator=g, dtype=torch.float64)

    def loss():
        f = lambda t: FeatureSequence(t, 1)
        return (fuse_step(1, f(pm), f(g1), f(g2), fm).features * probe).sum()

    fm.zero_grad()
    loss().backward()

    def loss_fn():
        with torch.no_grad():
            return loss().item()

    for name, p in fm.named_parameters():
        numeric = fd_grad(loss_fn, p.data, eps=EPS)
        assert p.grad is not None, name
        err = rel_err(p.grad, numeric)
        assert err < TOL, f"{name}: rel err {err:.2e}"


def test_multi_forward_ce_gradients_match_fd():
    # the full chain: mainstream blocks + fuse injections + head + masked CE
    base = micro_model(seed=13)
    model = MultiModel(base, FusionRange(n_down=1, n_up=2), seed=17)
    with torch.no_grad():
        for fuse in model.fuses.values():
            fuse.out_proj.weight.normal_(0, 0.2, generator=torch.Generator().manual_seed(4))
            fuse.out_proj.bias.normal_(0, 0.2, generator=torch.Generator().manual_seed(5))
    main = base.patch_tensor(random_canvas(2)).unsqueeze(0)
    guidance = [base.patch_tensor(random_canvas(s)).unsqueeze(0) for s in (3, 4)]
    guid_feats = model.guidance_features(guidance)
    targets = torch.from_numpy(
        np.random.default_rng(5).integers(0, MICRO_CFG.vocab, size=MICRO_CANVAS.num_patches)
    )
    mask = masked_patch_indices(MICRO_CANVAS)

    def loss():
        logits = model.forward_batch(main, guid_feats).squeeze(0)
        return masked_ce_loss(logits, targets, mask)

    model.zero_grad()
    loss().backward()

    def loss_fn():
        with torch.no_grad():
            return loss().item()

    for name, p in model.named_parameters():
        if not p.requires_grad:  # frozen aux branch
            continue
        # the long chain leaves eps=1e-5 roundoff-dominated; 1e-4 is optimal
        numeric = fd_grad(loss_fn, p.data, eps=1e-4)
        assert p.grad is not None, name
        err = rel_err(p.grad, numeric)
        assert err < TOL, f"{name}: rel err {err:.2e}"
