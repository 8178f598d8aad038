"""Metrics, method comparison, and sweep plumbing.

Segmentation and detection predictions are binarized at 0.5 and scored
with mask IoU (both-empty pairs count as 1.0); colorization is scored
with pixel MSE. run_method evaluates one of four method families over a
dataset's queries for every seed's weights bundle; sweep repeats a run
across one knob's values, reporting invalid points without aborting the
series. Persisted metric records never include wall-clock time, so
reruns are byte-identical.
"""

from __future__ import annotations

import csv
import enum
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import InpaintingBackbone, infer_inpaint
from .core_types import Image, Label, LabelKind, ShapeError, compose_canvas
from .multi_fusion import (
    AblationVariant,
    MultiModel,
    arrange_canvases,
    build_group_canvases,
    predict_label,
    predict_label_streams,
)
from .prompt_generator import Condenser, build_fused_canvas, condense
from .retrieval import embed_images, mpgs_partition, select_top_k, split_ranked
from .taskgen import Dataset
from .tokenizer import Codebook


def binarize(pred: Image, threshold: float = 0.5) -> Label:
    """Mean channel >= threshold -> foreground."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    fg = pred.pixels.mean(axis=2) >= threshold
    return Label(
        pixels=np.repeat(fg[:, :, None].astype(np.float64), 3, axis=2),
        kind=LabelKind.SEG_MASK,
    )


def miou(pred: Label, gt: Label) -> float:
    """Foreground IoU; both masks empty counts as perfect agreement."""
    if pred.pixels.shape != gt.pixels.shape:
        raise ShapeError(f"mask shapes differ: {pred.pixels.shape} vs {gt.pixels.shape}")
    p, g = pred.mask, gt.mask
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def mse(pred: Image | Label, gt: Image | Label) -> float:
    if pred.pixels.shape != gt.pixels.shape:
        raise ShapeError(f"image shapes differ: {pred.pixels.shape} vs {gt.pixels.shape}")
    return float(((pred.pixels - gt.pixels) ** 2).mean())


def score_prediction(task: str, pred: Image, gt: Label) -> float:
    if task in ("seg", "det"):
        return miou(binarize(pred), gt)
    if task == "color":
        return mse(pred, gt)
    raise ValueError(f"unknown task {task!r}")


class Method(enum.Enum):
    TOP1 = "top1"
    CONDENSER_SINGLE = "condenser_single"
    MULTI_FULL = "multi_full"
    MULTI_VARIANT = "multi_variant"


@dataclass(frozen=True, eq=False)
class WeightsBundle:
    """Everything one seed's evaluation needs; parts may be absent."""

    backbone: InpaintingBackbone
    codebook: Codebook
    condenser: Condenser | None = None
    multi: MultiModel | None = None


@dataclass(frozen=True)
class MetricReport:
    method: str
    metric: str  # "miou" or "mse"
    per_query: tuple[tuple[int, int, float], ...]  # (seed, query index, score)
    aggregate: float
    seed_means: tuple[tuple[int, float], ...]
    std_over_seeds: float
    config_hash: str
    wall_clock: float  # informational only; never serialized

    def __post_init__(self) -> None:
        scores = [s for _, _, s in self.per_query]
        if scores and abs(self.aggregate - float(np.mean(scores))) > 1e-12:
            raise ValueError("aggregate must equal the mean of per-query scores")


def make_report(
    method: str,
    metric: str,
    per_query: list[tuple[int, int, float]],
    config_hash: str,
    wall_clock: float,
) -> MetricReport:
    seeds = sorted({s for s, _, _ in per_query})
    seed_means = tuple(
        (s, float(np.mean([v for sd, _, v in per_query if sd == s]))) for s in seeds
    )
    means = [m for _, m in seed_means]
    return MetricReport(
        method=method,
        metric=metric,
        per_query=tuple(per_query),
        aggregate=float(np.mean([v for _, _, v in per_query])),
        seed_means=seed_means,
        std_over_seeds=float(np.std(means)) if len(means) > 1 else 0.0,
        config_hash=config_hash,
        wall_clock=wall_clock,
    )


def _required_parts(method: Method) -> tuple[str, ...]:
    if method is Method.TOP1:
        return ()
    if method is Method.CONDENSER_SINGLE:
        return ("condenser",)
    return ("condenser", "multi")


def predict_query(
    method: Method,
    bundle: WeightsBundle,
    query: Image,
    support: list,
    support_emb: np.ndarray,
    K: int,
    K_g1: int,
    K_g2: int,
    group_count: int = 2,
) -> Image:
    """One query through one method; returns the predicted BR quadrant."""
    bb, cb = bundle.backbone, bundle.codebook
    cfg = bb.canvas_cfg
    ranked = select_top_k(query, support, K, bb, support_emb=support_emb)
    if method is Method.TOP1:
        canvas = compose_canvas(ranked.support[0], query, cfg)
        return infer_inpaint(canvas, bb, cb)
    if method is Method.CONDENSER_SINGLE:
        fp = condense(ranked.support, query, bundle.condenser)
        return infer_inpaint(build_fused_canvas(fp, query, cfg), bb, cb)
    if group_count != 2:  # group-count sweep: 1 main + n auxiliary
        if bundle.multi.variant.variant is not AblationVariant.FULL:
            raise ValueError("group_count != 2 requires the full variant")
        main_fp = condense(ranked.support, query, bundle.condenser)
        main = build_fused_canvas(main_fp, query, cfg)
        guid = [
            build_fused_canvas(condense(g, query, bundle.condenser), query, cfg)
            for g in split_ranked(ranked, group_count)
        ]
        return predict_label_streams(main, guid, bundle.multi, cb)
    # multi methods: canvas roles depend on the model's ablation variant
    groups = mpgs_partition(ranked, K_g1, K_g2)
    x_g1, x_g2, x_gm = build_group_canvases(groups, query, bundle.condenser, cfg)
    main, guid = arrange_canvases(bundle.multi.variant.variant, x_g1, x_g2, x_gm)
    return predict_label(main, guid[0], guid[1], bundle.multi, cb)


def run_method(
    method: Method | str,
    dataset: Dataset,
    bundles: dict[int, WeightsBundle],
    K: int,
    K_g1: int = 8,
    K_g2: int = 8,
    config_hash: str = "",
    group_count: int = 2,
) -> MetricReport:
    method = Method(method) if isinstance(method, str) else method
    if not bundles:
        raise ValueError("no weights bundles supplied")
    for seed, b in bundles.items():
        for part in _required_parts(method):
            if getattr(b, part) is None:
                raise ValueError(f"{method.value} needs {part} weights (seed {seed})")
    task = dataset.manifest["task"]
    metric = "mse" if task == "color" else "miou"
    support = list(dataset.support)

    start = time.monotonic()
    per_query: list[tuple[int, int, float]] = []
    for seed in sorted(bundles):
        bundle = bundles[seed]
        emb = embed_images([p.image for p in support], bundle.backbone)
        for qi, (query, gt) in enumerate(dataset.queries):
            pred = predict_query(
                method, bundle, query, support, emb, K, K_g1, K_g2, group_count
            )
            per_query.append((seed, qi, score_prediction(task, pred, gt)))
    return make_report(
        method.value, metric, per_query, config_hash, time.monotonic() - start
    )


# --------------------------------------------------------------------- sweeps


class Knob(enum.Enum):
    K_G1 = "K_g1"
    K_G2 = "K_g2"
    FUSION_CENTER = "fusion_center"
    FUSION_WIDTH = "fusion_width"
    GROUP_COUNT = "group_count"


def apply_knob(base: dict, knob: Knob | str, value: int) -> dict:
    """New config dict with one knob changed; raises on constraint violations."""
    knob = Knob(knob) if isinstance(knob, str) else knob
    out = dict(base)
    out[knob.value] = value
    K = out.get("K", 16)
    k_g1, k_g2 = out.get("K_g1", 8), out.get("K_g2", 8)
    depth = out.get("depth", 16)
    if knob in (Knob.K_G1, Knob.K_G2):
        if value < 1:
            raise ValueError(f"{knob.value} must be >= 1")
        if k_g1 + k_g2 > K:
            raise ValueError(f"K_g1+K_g2 = {k_g1 + k_g2} exceeds K = {K}")
    if knob is Knob.FUSION_CENTER and not 1 <= value <= depth:
        raise ValueError(f"fusion_center {value} outside [1, {depth}]")
    if knob is Knob.FUSION_WIDTH and value < 0:
        raise ValueError("fusion_width must be >= 0")
    if knob is Knob.GROUP_COUNT and not 1 <= value <= K:
        raise ValueError(f"group_count {value} outside [1, {K}]")
    return out


@dataclass(frozen=True, eq=False)
class SweepResult:
    knob: str
    points: tuple[tuple[int, "MetricReport"], ...]
    invalid: tuple[tuple[int, str], ...]  # (value, reason)


def sweep(knob: Knob | str, values: list[int], base: dict, evaluate) -> SweepResult:
    """One evaluate(config) per valid value; invalid values are recorded,
    not fatal, so a series with a bad point still produces the rest."""
    knob = Knob(knob) if isinstance(knob, str) else knob
    points, invalid = [], []
    for v in values:
        try:
            cfg = apply_knob(base, knob, v)
        except ValueError as e:
            invalid.append((v, str(e)))
            continue
        points.append((v, evaluate(cfg)))
    return SweepResult(knob=knob.value, points=tuple(points), invalid=tuple(invalid))


# ------------------------------------------------------------------ emission


def write_jsonl(report: MetricReport, path: Path) -> None:
    """One record per (seed, query); excludes wall-clock for reproducibility."""
    with open(path, "w") as f:
        for seed, qi, score in report.per_query:
            rec = {
                "method": report.method,
                "metric": report.metric,
                "seed": seed,
                "query": qi,
                "score": score,
                "config_hash": report.config_hash,
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def write_summary(report: MetricReport, path: Path) -> None:
    with open(path, "w") as f:
        json.dump(
            {
                "method": report.method,
                "metric": report.metric,
                "aggregate": report.aggregate,
                "seed_means": {str(s): m for s, m in report.seed_means},
                "std_over_seeds": report.std_over_seeds,
                "config_hash": report.config_hash,
                "n_records": len(report.per_query),
            },
            f,
            indent=2,
            sort_keys=True,
        )
        f.write("\n")


def write_csv(reports: list[tuple[str, MetricReport]], path: Path) -> None:
    """Rows of (label, aggregate, std, metric, method) for a report series."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label", "aggregate", "std_over_seeds", "metric", "method"])
        for label, r in reports:
            w.writerow([label, repr(r.aggregate), repr(r.std_over_seeds), r.metric, r.method])
