"""Command-line pipeline: gen-data, three training stages, eval, ablate,
sweep, plot.

Stage ordering is explicit — a missing prerequisite checkpoint is an
error, never an implicit training run. Commands are idempotent: existing
outputs whose stored config hash matches the current config are left
untouched (exit 0); a hash mismatch demands --force. Failures print one
machine-readable JSON record to stderr and exit nonzero.

Layout under --out (data may be redirected with $VICLFUSE_DATA_DIR):

    data/<task>/...            gen-data
    backbone/ckpt_seed<S>.viclf
    pg/ckpt_seed<S>.viclf
    multi/ckpt_<variant>_seed<S>.viclf
    eval/<method>[_<variant>].jsonl / ..._summary.json
    ablate/ablation.csv
    sweep/<knob>.csv, sweep/<knob>_<value>/...
    plot/<name>.png
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .backbone import (
    BackboneConfig,
    InpaintingBackbone,
    TrainConfig,
    train_backbone,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_hash, emit_config, parse_config, parse_config_dict
from .core_types import Canvas, CanvasConfig, Image
from .eval_harness import (
    Method,
    WeightsBundle,
    make_report,
    run_method,
    sweep as run_sweep,
    write_csv,
    write_jsonl,
    write_summary,
)
from .multi_fusion import (
    FusionRange,
    MultiModel,
    MultiSample,
    MultiTrainConfig,
    make_variant,
    train_multi,
)
from .prompt_generator import Condenser, PGSample, PGTrainConfig, train_prompt_generator
from .retrieval import embed_images, mpgs_partition, select_top_k, split_ranked
from .taskgen import Dataset, TaskSpec, generate, load_dataset, save_dataset
from .tokenizer import fit_codebook

VARIANT_CHOICES = (
    "full",
    "only_g1",
    "only_g2",
    "g1_as_main",
    "g2_as_main",
    "random_guidance",
    "freeze_backbone",
    "shared_1mlp",
    "shared_2mlp",
    "no_cross_attention",
    "no_residual",
)
ABLATION_DEFAULT = (
    "full",
    "only_g1",
    "only_g2",
    "random_guidance",
    "no_cross_attention",
    "no_residual",
    "freeze_backbone",
)


class StageOrderError(RuntimeError):
    pass


def canvas_config(cfg: RunConfig) -> CanvasConfig:
    return CanvasConfig(quadrant_h=cfg.quadrant, quadrant_w=cfg.quadrant,
                        patch_size=cfg.patch_size)


def backbone_config(cfg: RunConfig) -> BackboneConfig:
    return BackboneConfig(depth=cfg.depth, embed_dim=cfg.embed_dim, heads=cfg.heads,
                          mlp_ratio=cfg.mlp_ratio, patch_size=cfg.patch_size,
                          vocab=cfg.vocab)


def fusion_range(cfg: RunConfig) -> FusionRange:
    if (cfg.n_down, cfg.n_up) == (1, 0):
        return FusionRange.empty()
    return FusionRange(n_down=cfg.n_down, n_up=cfg.n_up)


def data_root(out: Path) -> Path:
    env = os.environ.get("VICLFUSE_DATA_DIR")
    return Path(env) if env else out / "data"


def _seeds(cfg: RunConfig, args) -> tuple[int, ...]:
    return (args.seed,) if args.seed is not None else cfg.seeds


def _load_data(out: Path, cfg: RunConfig) -> Dataset:
    root = data_root(out)
    if not (root / cfg.task / "manifest.json").is_file():
        raise StageOrderError(
            f"no dataset for task {cfg.task!r} under {root}; run gen-data first"
        )
    return load_dataset(root, cfg.task)


def _skip_if_current(path: Path, chash: str, force: bool, stage: str) -> bool:
    """True if an up-to-date artifact exists; error if stale and not forced."""
    if not path.is_file() or force:
        return False
    existing = load_checkpoint(path)
    if existing.config_hash == chash:
        print(f"{stage}: {path} is up to date")
        return True
    raise CheckpointError(
        f"{path} was built with config hash {existing.config_hash}, current is "
        f"{chash}; pass --force to overwrite"
    )


# ------------------------------------------------------------- model builders


def build_backbone(cfg: RunConfig, data) -> InpaintingBackbone:
    model = InpaintingBackbone(backbone_config(cfg), canvas_config(cfg), seed=0)
    model.load_state_dict(data.state)
    return model


def build_condenser(cfg: RunConfig, data) -> Condenser:
    cond = Condenser(canvas_config(cfg), d_model=cfg.pg_d_model, heads=cfg.pg_heads, seed=0)
    cond.load_state_dict(data.state)
    return cond


def build_multi(cfg: RunConfig, data, pretrained: InpaintingBackbone) -> MultiModel:
    rng = FusionRange(*data.extra["fusion_range"]) if data.extra["fusion_range"] != [1, 0] \
        else FusionRange.empty()
    variant = make_variant(data.extra["variant"], noise_seed=data.extra["noise_seed"])
    model = MultiModel(pretrained, rng, variant, seed=0)
    model.load_state_dict(data.state)
    return model


def ckpt_path(out: Path, stage: str, seed: int, variant: str | None = None) -> Path:
    if stage == "multi":
        return out / "multi" / f"ckpt_{variant}_seed{seed}.viclf"
    return out / stage / f"ckpt_seed{seed}.viclf"


def _require(path: Path, stage: str, chash: str):
    if not path.is_file():
        raise StageOrderError(f"missing {stage} checkpoint {path}; run train-{stage} first")
    return load_checkpoint(path, expect_stage=stage, expect_config_hash=chash)


# ------------------------------------------------------------ training inputs


def gt_canvas(tl: Image, tr: Image, bl: Image, br: Image, cfg: CanvasConfig) -> Canvas:
    """Fully populated ground-truth canvas (nothing masked)."""
    q = cfg.quadrant_h
    px = np.empty((cfg.canvas_h, cfg.canvas_w, 3))
    px[:q, :q] = tl.pixels
    px[:q, q:] = tr.pixels
    px[q:, :q] = bl.pixels
    px[q:, q:] = br.pixels
    return Canvas(pixels=px)


def backbone_canvases(ds: Dataset, cfg: CanvasConfig) -> list[Canvas]:
    """Prompt/query canvases from support alone: each pair's prompt row is
    its nearest pixel-space neighbour, so canvases resemble inference-time
    retrieval pairings."""
    flat = np.stack([p.image.pixels.ravel() for p in ds.support])
    canvases = []
    for i, pair in enumerate(ds.support):
        d = ((flat - flat[i]) ** 2).sum(axis=1)
        d[i] = np.inf
        j = int(d.argmin())
        nb = ds.support[j]
        canvases.append(
            gt_canvas(nb.image, Image(pixels=nb.label.pixels),
                      pair.image, Image(pixels=pair.label.pixels), cfg)
        )
    return canvases


def leave_one_out_groups(ds: Dataset, bb: InpaintingBackbone, cfg: RunConfig):
    """(pair, ranked) per support pair, ranked over the other pairs."""
    support = list(ds.support)
    emb = embed_images([p.image for p in support], bb)
    out = []
    for i, pair in enumerate(support):
        rest = support[:i] + support[i + 1 :]
        rest_emb = np.delete(emb, i, axis=0)
        ranked = select_top_k(pair.image, rest, cfg.K, bb,
                              query_id=pair.id, support_emb=rest_emb)
        out.append((pair, ranked))
    return out


def pg_samples(ds: Dataset, bb: InpaintingBackbone, cfg: RunConfig) -> list[PGSample]:
    return [
        PGSample(group=ranked.support, query=pair.image,
                 target=Image(pixels=pair.label.pixels))
        for pair, ranked in leave_one_out_groups(ds, bb, cfg)
    ]


def multi_samples(ds: Dataset, bb: InpaintingBackbone, cfg: RunConfig) -> list[MultiSample]:
    out = []
    for pair, ranked in leave_one_out_groups(ds, bb, cfg):
        groups = mpgs_partition(ranked, cfg.K_g1, cfg.K_g2)
        streams = tuple(split_ranked(ranked, cfg.group_count)) if cfg.group_count != 2 else None
        out.append(MultiSample(groups=groups, query=pair.image,
                               target=Image(pixels=pair.label.pixels), streams=streams))
    return out


# ------------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    root = data_root(Path(args.out))
    spec = TaskSpec(task=cfg.task, n_support=cfg.n_support, n_query=cfg.n_query,
                    seed=cfg.data_seed, side=cfg.quadrant)
    manifest_path = root / cfg.task / "manifest.json"
    ds = generate(spec)
    if manifest_path.is_file() and not args.force:
        existing = json.loads(manifest_path.read_text())
        if existing.get("content_hash") == ds.manifest["content_hash"]:
            print(f"gen-data: {manifest_path.parent} is up to date")
            return 0
        raise CheckpointError(
            f"{manifest_path.parent} holds different data "
            f"(hash {existing.get('content_hash')}); pass --force to overwrite"
        )
    task_dir = save_dataset(ds, root)
    print(f"gen-data: wrote {len(ds.support)} support / {len(ds.queries)} query pairs "
          f"to {task_dir}")
    return 0


def cmd_train_backbone(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    chash = config_hash(cfg)
    ds = _load_data(out, cfg)
    cc = canvas_config(cfg)
    canvases = backbone_canvases(ds, cc)
    images = [p.image for p in ds.support] + [Image(pixels=p.label.pixels) for p in ds.support]
    for seed in _seeds(cfg, args):
        path = ckpt_path(out, "backbone", seed)
        if _skip_if_current(path, chash, args.force, "train-backbone"):
            continue
        cb = fit_codebook(images, V=cfg.vocab, seed=seed, patch_size=cfg.patch_size)
        res = train_backbone(canvases, cb, backbone_config(cfg), seed=seed,
                             canvas_cfg=cc,
                             train=TrainConfig(lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch))
        save_checkpoint(path, "backbone", res.model.state_dict(), cb, chash,
                        extra={"seed": seed, "loss_trace": res.loss_trace})
        print(f"train-backbone: seed {seed} final loss {res.loss_trace[-1]:.4f} -> {path}")
    return 0


def cmd_train_pg(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    chash = config_hash(cfg)
    ds = _load_data(out, cfg)
    for seed in _seeds(cfg, args):
        path = ckpt_path(out, "pg", seed)
        if _skip_if_current(path, chash, args.force, "train-pg"):
            continue
        bb_data = _require(ckpt_path(out, "backbone", seed), "backbone", chash)
        bb = build_backbone(cfg, bb_data)
        samples = pg_samples(ds, bb, cfg)
        res = train_prompt_generator(
            samples, bb, bb_data.codebook,
            PGTrainConfig(lam=cfg.lam, lr=cfg.lr, epochs=cfg.epochs,
                          batch=cfg.batch, seed=seed),
            condenser=Condenser(canvas_config(cfg), d_model=cfg.pg_d_model,
                                heads=cfg.pg_heads, seed=seed),
        )
        save_checkpoint(path, "pg", res.condenser.state_dict(), bb_data.codebook, chash,
                        extra={"seed": seed, "loss_trace": res.loss_trace,
                               "d_model": cfg.pg_d_model, "heads": cfg.pg_heads})
        print(f"train-pg: seed {seed} final loss {res.loss_trace[-1]:.4f} -> {path}")
    return 0


def cmd_train_multi(cfg: RunConfig, args, ds: Dataset | None = None) -> int:
    out = Path(args.out)
    chash = config_hash(cfg)
    ds = ds if ds is not None else _load_data(out, cfg)
    variant = args.variant or cfg.variant
    for seed in _seeds(cfg, args):
        path = ckpt_path(out, "multi", seed, variant)
        if _skip_if_current(path, chash, args.force, "train-multi"):
            continue
        bb_data = _require(ckpt_path(out, "backbone", seed), "backbone", chash)
        pg_data = _require(ckpt_path(out, "pg", seed), "pg", chash)
        bb = build_backbone(cfg, bb_data)
        pg = build_condenser(cfg, pg_data)
        samples = multi_samples(ds, bb, cfg)
        res = train_multi(
            samples, pg, bb, bb_data.codebook,
            MultiTrainConfig(lr=cfg.lr, epochs=cfg.epochs, batch=cfg.batch, seed=seed),
            fusion_range(cfg), make_variant(variant, noise_seed=seed),
        )
        save_checkpoint(path, "multi", res.model.state_dict(), bb_data.codebook, chash,
                        extra={"seed": seed, "loss_trace": res.loss_trace,
                               "variant": variant, "noise_seed": seed,
                               "fusion_range": [cfg.n_down, cfg.n_up]})
        print(f"train-multi[{variant}]: seed {seed} final loss {res.loss_trace[-1]:.4f} -> {path}")
    return 0


def _bundles(cfg: RunConfig, out: Path, seeds, method: Method, variant: str, chash: str):
    bundles = {}
    for seed in seeds:
        bb_data = _require(ckpt_path(out, "backbone", seed), "backbone", chash)
        bb = build_backbone(cfg, bb_data)
        cond = multi = None
        if method is not Method.TOP1:
            cond = build_condenser(cfg, _require(ckpt_path(out, "pg", seed), "pg", chash))
        if method in (Method.MULTI_FULL, Method.MULTI_VARIANT):
            mv = variant if method is Method.MULTI_VARIANT else "full"
            mpath = ckpt_path(out, "multi", seed, mv)
            if not mpath.is_file():
                raise StageOrderError(
                    f"missing multi checkpoint {mpath}; run train-multi"
                    + (f" --variant {mv}" if mv != "full" else "")
                    + " first"
                )
            multi = build_multi(cfg, load_checkpoint(mpath, "multi", chash), bb)
        bundles[seed] = WeightsBundle(backbone=bb, codebook=bb_data.codebook,
                                      condenser=cond, multi=multi)
    return bundles


def _eval_once(cfg: RunConfig, out: Path, seeds, method: Method, variant: str,
               ds: Dataset, chash: str, eval_dir: Path, force: bool) -> float:
    name = method.value if method is not Method.MULTI_VARIANT else f"multi_{variant}"
    jsonl = eval_dir / f"{name}.jsonl"
    summary = eval_dir / f"{name}_summary.json"
    if jsonl.is_file() and summary.is_file() and not force:
        existing = json.loads(summary.read_text())
        if existing.get("config_hash") == chash:
            print(f"eval[{name}]: up to date (aggregate {existing['aggregate']:.4f})")
            return existing["aggregate"]
        raise CheckpointError(
            f"{summary} was produced under config hash {existing.get('config_hash')}, "
            f"current is {chash}; pass --force to overwrite"
        )
    bundles = _bundles(cfg, out, seeds, method, variant, chash)
    report = run_method(method, ds, bundles, cfg.K, cfg.K_g1, cfg.K_g2,
                        config_hash=chash, group_count=cfg.group_count)
    eval_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(report, jsonl)
    write_summary(report, summary)
    print(f"eval[{name}]: {report.metric} aggregate {report.aggregate:.4f} "
          f"(std over seeds {report.std_over_seeds:.4f}) -> {jsonl}")
    return report.aggregate


def cmd_eval(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    chash = config_hash(cfg)
    ds = _load_data(out, cfg)
    method = Method(args.method)
    variant = args.variant or cfg.variant
    _eval_once(cfg, out, _seeds(cfg, args), method, variant, ds, chash,
               out / "eval", args.force)
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    chash = config_hash(cfg)
    ds = _load_data(out, cfg)
    seeds = _seeds(cfg, args)
    variants = args.variant.split(",") if args.variant else list(ABLATION_DEFAULT)
    for v in variants:
        if v not in VARIANT_CHOICES:
            raise ConfigError(f"unknown variant {v!r}")
    rows = []
    for v in variants:
        ns = argparse.Namespace(out=args.out, seed=args.seed, force=args.force, variant=v)
        cmd_train_multi(cfg, ns, ds=ds)
        agg = _eval_once(cfg, out, seeds, Method.MULTI_VARIANT, v, ds, chash,
                         out / "ablate", args.force)
        summary = json.loads((out / "ablate" / f"multi_{v}_summary.json").read_text())
        rows.append((v, summary, agg))
    csv_path = out / "ablate" / "ablation.csv"
    with open(csv_path, "w") as f:
        f.write("variant,aggregate,std_over_seeds,metric\n")
        for v, s, _ in rows:
            f.write(f"{v},{s['aggregate']!r},{s['std_over_seeds']!r},{s['metric']}\n")
    print(f"ablate: {len(rows)} variants -> {csv_path}")
    return 0


def _sweep_config(base: dict) -> tuple[RunConfig, FusionRange]:
    """Translate sweep-only keys (fusion_center/width) into a RunConfig."""
    d = dict(base)
    center = d.pop("fusion_center", None)
    width = d.pop("fusion_width", None)
    cfg = parse_config_dict(d)
    rng = fusion_range(cfg)
    if center is not None or width is not None:
        if center is None:
            center = (cfg.n_down + cfg.n_up) // 2 if cfg.n_up >= cfg.n_down else 1
        if width is None:
            width = cfg.n_up - cfg.n_down + 1 if cfg.n_up >= cfg.n_down else 0
        rng = FusionRange.from_center_width(center, width, cfg.depth)
    if rng.is_empty:
        cfg = parse_config_dict({**emit_config(cfg), "n_down": 1, "n_up": 0})
    else:
        cfg = parse_config_dict({**emit_config(cfg), "n_down": rng.n_down, "n_up": rng.n_up})
    return cfg, rng


def cmd_sweep(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    ds = _load_data(out, cfg)
    seeds = _seeds(cfg, args)
    values = [int(v) for v in args.values.split(",")]
    base = emit_config(cfg)

    def evaluate(point_cfg: dict):
        pcfg, _ = _sweep_config(point_cfg)
        pchash = config_hash(pcfg)
        knob_val = point_cfg[args.knob]
        point_out = out / "sweep" / f"{args.knob}_{knob_val}"
        # the swept knob only affects the multi stage; reuse earlier stages
        for seed in seeds:
            for stage in ("backbone", "pg"):
                src = _require(ckpt_path(out, stage, seed), stage, config_hash(cfg))
                dst = ckpt_path(point_out, stage, seed)
                if not dst.is_file():
                    save_checkpoint(dst, stage, src.state, src.codebook, pchash,
                                    extra=src.extra)
        ns = argparse.Namespace(out=str(point_out), seed=args.seed,
                                force=args.force, variant="full")
        cmd_train_multi(pcfg, ns, ds=ds)
        agg = _eval_once(pcfg, point_out, seeds, Method.MULTI_FULL, "full", ds,
                         pchash, point_out / "eval", args.force)
        summary = json.loads(
            (point_out / "eval" / "multi_full_summary.json").read_text()
        )
        return make_report("multi_full", summary["metric"],
                           [(0, 0, summary["aggregate"])], pchash, 0.0)

    result = run_sweep(args.knob, values, base, evaluate)
    sweep_dir = out / "sweep"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    write_csv([(f"{args.knob}={v}", r) for v, r in result.points],
              sweep_dir / f"{args.knob}.csv")
    for v, reason in result.invalid:
        print(f"sweep: skipped {args.knob}={v}: {reason}")
    print(f"sweep: {len(result.points)} points -> {sweep_dir / (args.knob + '.csv')}")
    return 0


def cmd_plot(cfg: RunConfig, args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    plot_dir = out / "plot"
    plot_dir.mkdir(parents=True, exist_ok=True)
    if args.knob:
        src = out / "sweep" / f"{args.knob}.csv"
        if not src.is_file():
            raise StageOrderError(f"no sweep series at {src}; run sweep first")
        labels, values = [], []
        for line in src.read_text().splitlines()[1:]:
            cells = line.split(",")
            labels.append(cells[0].split("=")[1])
            values.append(float(cells[1]))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(labels, values, marker="o")
        ax.set_xlabel(args.knob)
        ax.set_ylabel("aggregate")
        dest = plot_dir / f"{args.knob}.png"
    else:
        src = out / "ablate" / "ablation.csv"
        if not src.is_file():
            raise StageOrderError(f"no ablation table at {src}; run ablate first")
        labels, values = [], []
        for line in src.read_text().splitlines()[1:]:
            cells = line.split(",")
            labels.append(cells[0])
            values.append(float(cells[1]))
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar(labels, values)
        ax.set_ylabel("aggregate")
        ax.tick_params(axis="x", rotation=45)
        dest = plot_dir / "ablation.png"
    fig.tight_layout()
    fig.savefig(dest, dpi=120)
    plt.close(fig)
    print(f"plot: wrote {dest}")
    return 0


# ----------------------------------------------------------------- entrypoint


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="viclfuse",
                                description="multi-prompt visual in-context learning pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train-backbone", "train-pg", "train-multi",
                 "eval", "ablate", "sweep", "plot"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None, help="JSON config path")
        sp.add_argument("--seed", type=int, default=None,
                        help="single seed overriding the config's seed list")
        sp.add_argument("--out", type=str, default="runs", help="output directory")
        sp.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")
        if name in ("train-multi", "eval", "ablate"):
            sp.add_argument("--variant", type=str, default=None,
                            help="ablation variant"
                            + (" (csv list)" if name == "ablate" else ""))
        if name == "eval":
            sp.add_argument("--method", type=str, default="multi_full",
                            choices=[m.value for m in Method])
        if name in ("sweep", "plot"):
            sp.add_argument("--knob", type=str,
                            default=None if name == "plot" else "K_g1",
                            choices=["K_g1", "K_g2", "fusion_center",
                                     "fusion_width", "group_count"])
        if name == "sweep":
            sp.add_argument("--values", type=str, required=True,
                            help="comma-separated integers")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-backbone": cmd_train_backbone,
    "train-pg": cmd_train_pg,
    "train-multi": cmd_train_multi,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "plot": cmd_plot,
}


def _error_record(code: str, exc: Exception) -> str:
    return json.dumps({"error": code, "message": str(exc)}, sort_keys=True)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "variant", None) is not None and args.command != "ablate":
        if args.variant not in VARIANT_CHOICES:
            print(_error_record("config", ValueError(f"unknown variant {args.variant!r}")),
                  file=sys.stderr)
            return 2
    try:
        cfg = parse_config(args.config) if args.config else RunConfig()
        torch.manual_seed(0)  # belt and braces; all code paths seed explicitly
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(_error_record("config", e), file=sys.stderr)
        return 2
    except StageOrderError as e:
        print(_error_record("stage-order", e), file=sys.stderr)
        return 3
    except CheckpointError as e:
        print(_error_record("checkpoint", e), file=sys.stderr)
        return 4
    except (ValueError, OSError) as e:
        print(_error_record("runtime", e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
