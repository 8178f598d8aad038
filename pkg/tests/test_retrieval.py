import numpy as np
import pytest
import torch

from viclfuse.backbone import BackboneConfig, InpaintingBackbone
from viclfuse.core_types import CanvasConfig, Image, Label, LabelKind, SupportPair
from viclfuse.retrieval import (
    PromptGroups,
    RankedSupport,
    embed_image,
    embed_images,
    mpgs_partition,
    select_top_k,
    split_ranked,
)

CANVAS = CanvasConfig(quadrant_h=8, quadrant_w=8, patch_size=4)
CFG = BackboneConfig(depth=2, embed_dim=16, heads=2, mlp_ratio=2.0, patch_size=4, vocab=4)


@pytest.fixture(scope="module")
def model():
    return InpaintingBackbone(CFG, CANVAS, seed=0)


def rand_image(seed):
    rng = np.random.default_rng(seed)
    return Image(pixels=rng.integers(0, 8, size=(8, 8, 3)) / 7.0)


def pair_for(img, pid):
    lbl = Label(pixels=np.zeros((8, 8, 3)) + (pid % 2), kind=LabelKind.SEG_MASK)
    return SupportPair(image=img, label=lbl, id=pid)


def rand_pairs(n, seed0=100):
    return [pair_for(rand_image(seed0 + i), i) for i in range(n)]


def fake_ranked(n, query_id=0):
    """A ranking with hand-set, strictly decreasing scores."""
    pairs = rand_pairs(n)
    return RankedSupport(
        pairs=tuple((p, 1.0 - i / n) for i, p in enumerate(pairs)), query_id=query_id
    )


# ------------------------------------------------------------------ embedding


def test_embed_identical_images_identical_vectors(model):
    a = embed_image(rand_image(1), model)
    b = embed_image(rand_image(1), model)
    np.testing.assert_array_equal(a, b)


def test_embed_unit_norm(model):
    for s in range(5):
        v = embed_image(rand_image(s), model)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-6


def test_embed_self_cosine_is_one(model):
    v = embed_image(rand_image(3), model)
    assert float(v @ v) == pytest.approx(1.0, abs=1e-6)


def test_embed_zero_model_flags_degenerate():
    dead = InpaintingBackbone(CFG, CANVAS, seed=0)
    with torch.no_grad():
        for p in dead.parameters():
            p.zero_()
    with pytest.warns(RuntimeWarning):
        v = embed_image(rand_image(0), dead)
    np.testing.assert_array_equal(v, np.zeros_like(v))


def test_embed_images_matches_single(model):
    imgs = [rand_image(s) for s in range(4)]
    batched = embed_images(imgs, model)
    for i, im in enumerate(imgs):
        np.testing.assert_array_equal(batched[i], embed_image(im, model))


# ------------------------------------------------------------------- top-K


def test_query_verbatim_in_support_ranks_first(model):
    q = rand_image(42)
    support = rand_pairs(6)
    support.append(pair_for(q, 6))
    ranked = select_top_k(q, support, K=3, model=model)
    assert ranked.pairs[0][0].id == 6
    assert ranked.pairs[0][1] == pytest.approx(1.0, abs=1e-6)


def test_identical_support_breaks_ties_by_id(model):
    img = rand_image(7)
    support = [pair_for(img, pid) for pid in (5, 2, 9, 0)]
    ranked = select_top_k(rand_image(8), support, K=4, model=model)
    assert [p.id for p in ranked.support] == [0, 2, 5, 9]


def test_ranking_matches_brute_force_cosine(model):
    # nested shading of one base pattern gives a hand-planted similarity order
    base = rand_image(50).pixels
    noise = np.random.default_rng(51).random((8, 8, 3))
    support = []
    for i, alpha in enumerate((0.0, 0.2, 0.4, 0.6, 0.8)):
        support.append(pair_for(Image(np.clip((1 - alpha) * base + alpha * noise, 0, 1)), i))
    q = Image(base)
    ranked = select_top_k(q, support, K=5, model=model)

    emb = embed_images([p.image for p in support], model)
    qv = embed_image(q, model)
    brute = sorted(range(5), key=lambda i: (-(emb[i] @ qv), i))
    assert [p.id for p in ranked.support] == brute
    assert list(ranked.scores) == sorted(ranked.scores, reverse=True)


def test_scores_non_increasing_on_random_inputs(model):
    support = rand_pairs(10)
    emb = embed_images([p.image for p in support], model)
    for s in range(5):
        ranked = select_top_k(rand_image(200 + s), support, K=7, model=model, support_emb=emb)
        assert list(ranked.scores) == sorted(ranked.scores, reverse=True)


def test_rank_stability_under_weaker_addition(model):
    q = rand_image(60)
    support = rand_pairs(6)
    ranked = select_top_k(q, support, K=4, model=model)
    kth = ranked.scores[-1]
    # find an image strictly weaker than rank K and append it
    for s in range(300, 340):
        cand = rand_image(s)
        if float(embed_image(cand, model) @ embed_image(q, model)) < kth - 1e-6:
            bigger = support + [pair_for(cand, 99)]
            again = select_top_k(q, bigger, K=4, model=model)
            assert [p.id for p in again.support] == [p.id for p in ranked.support]
            return
    pytest.fail("no weaker candidate found")


def test_select_top_k_validates_k(model):
    support = rand_pairs(3)
    with pytest.raises(ValueError):
        select_top_k(rand_image(0), support, K=4, model=model)
    with pytest.raises(ValueError):
        select_top_k(rand_image(0), support, K=0, model=model)


# --------------------------------------------------------------------- MPGS


def test_partition_eight_eight_of_sixteen():
    ranked = fake_ranked(16)
    groups = mpgs_partition(ranked, K_g1=8, K_g2=8)
    ids = [p.id for p in ranked.support]
    assert [p.id for p in groups.holistic] == ids
    assert [p.id for p in groups.high] == ids[:8]
    assert [p.id for p in groups.low] == ids[8:]


def test_partition_four_four_of_eight():
    groups = mpgs_partition(fake_ranked(8), K_g1=4, K_g2=4)
    assert len(groups.high) == 4 and len(groups.low) == 4
    assert groups.high == groups.holistic[:4]
    assert groups.low == groups.holistic[4:]


def test_partition_degenerate_two():
    groups = mpgs_partition(fake_ranked(2), K_g1=1, K_g2=1)
    assert groups.high == (groups.holistic[0],)
    assert groups.low == (groups.holistic[1],)


def test_partition_rejects_oversize_and_empty():
    ranked = fake_ranked(8)
    with pytest.raises(ValueError):
        mpgs_partition(ranked, K_g1=5, K_g2=4)
    with pytest.raises(ValueError):
        mpgs_partition(ranked, K_g1=0, K_g2=4)


def test_partition_prefix_suffix_disjointness_property():
    rng = np.random.default_rng(0)
    for _ in range(50):
        k = int(rng.integers(2, 17))
        ranked = fake_ranked(k)
        g1 = int(rng.integers(1, k))
        g2 = int(rng.integers(1, k - g1 + 1))
        groups = mpgs_partition(ranked, g1, g2)
        assert groups.high == groups.holistic[:g1]
        assert groups.low == groups.holistic[k - g2 :]
        if g1 + g2 <= k:
            assert not set(p.id for p in groups.high) & set(p.id for p in groups.low)
        if g1 + g2 == k:
            assert [p.id for p in groups.high + groups.low] == [
                p.id for p in groups.holistic
            ]


def test_partition_is_pure():
    ranked = fake_ranked(8)
    a = mpgs_partition(ranked, 4, 4)
    b = mpgs_partition(ranked, 4, 4)
    assert a.holistic == b.holistic and a.high == b.high and a.low == b.low


def test_prompt_groups_rejects_non_prefix():
    ranked = fake_ranked(4)
    pairs = ranked.support
    with pytest.raises(ValueError):
        PromptGroups(holistic=pairs, high=(pairs[1],), low=(pairs[3],))


# ------------------------------------------------------------- split_ranked


def test_split_ranked_two_groups_matches_mpgs_default():
    ranked = fake_ranked(8)
    halves = split_ranked(ranked, 2)
    groups = mpgs_partition(ranked, 4, 4)
    assert halves[0] == groups.high
    assert halves[1] == groups.low


def test_split_ranked_sizes_and_order():
    ranked = fake_ranked(8)
    assert split_ranked(ranked, 1) == [ranked.support]
    quarters = split_ranked(ranked, 4)
    assert [len(c) for c in quarters] == [2, 2, 2, 2]
    flat = tuple(p for chunk in quarters for p in chunk)
    assert flat == ranked.support
    with pytest.raises(ValueError):
        split_ranked(ranked, 9)
