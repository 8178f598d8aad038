"""Run configuration: strict JSON parsing, defaults, and content hashing.

Parsing is strict so experiment configs stay honest: unknown keys are
fatal, and every constraint violation is reported in one error with its
field path rather than failing one key at a time.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

_VARIANTS = (
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


@dataclass(frozen=True)
class RunConfig:
    # task / data
    task: str = "seg"
    n_support: int = 256
    n_query: int = 64
    data_seed: int = 0
    # geometry
    quadrant: int = 32
    patch_size: int = 8
    # backbone
    depth: int = 16
    embed_dim: int = 128
    heads: int = 4
    mlp_ratio: float = 2.0
    vocab: int = 64
    # retrieval / grouping
    K: int = 16
    K_g1: int = 8
    K_g2: int = 8
    group_count: int = 2
    # fusion range
    n_down: int = 8
    n_up: int = 14
    # prompt generator
    lam: float = 0.9
    pg_d_model: int = 64
    pg_heads: int = 4
    # optimization (shared by all three stages)
    lr: float = 0.05
    epochs: int = 10
    batch: int = 16
    # experiment
    seeds: tuple[int, ...] = (0, 1, 2)
    variant: str = "full"


class ConfigError(ValueError):
    """Raised with every detected problem listed, one per line."""


def _type_ok(value, f) -> bool:
    if f.name == "seeds":
        return (
            isinstance(value, (list, tuple))
            and len(value) > 0
            and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        )
    if f.type in ("float", float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if f.type in ("int", int):
        return isinstance(value, int) and not isinstance(value, bool)
    if f.type in ("str", str):
        return isinstance(value, str)
    return True


def _constraints(cfg: RunConfig) -> list[str]:
    errs = []

    def check(cond: bool, path: str, msg: str) -> None:
        if not cond:
            errs.append(f"$.{path}: {msg}")

    check(cfg.task in ("seg", "det", "color"), "task", f"unknown task {cfg.task!r}")
    check(cfg.n_support >= 1, "n_support", "must be >= 1")
    check(cfg.n_query >= 0, "n_query", "must be >= 0")
    check(cfg.data_seed >= 0, "data_seed", "must be >= 0")
    check(cfg.quadrant >= 8, "quadrant", "must be >= 8")
    check(cfg.patch_size >= 1, "patch_size", "must be >= 1")
    if cfg.patch_size >= 1:
        check(
            cfg.quadrant % cfg.patch_size == 0,
            "quadrant",
            f"quadrant {cfg.quadrant} not divisible by patch_size {cfg.patch_size}",
        )
    check(cfg.depth >= 1, "depth", "must be >= 1")
    check(cfg.heads >= 1, "heads", "must be >= 1")
    if cfg.heads >= 1:
        check(
            cfg.embed_dim % cfg.heads == 0,
            "embed_dim",
            f"embed_dim {cfg.embed_dim} not divisible by heads {cfg.heads}",
        )
    check(cfg.pg_heads >= 1, "pg_heads", "must be >= 1")
    if cfg.pg_heads >= 1:
        check(
            cfg.pg_d_model % cfg.pg_heads == 0,
            "pg_d_model",
            f"pg_d_model {cfg.pg_d_model} not divisible by pg_heads {cfg.pg_heads}",
        )
    check(cfg.mlp_ratio > 0, "mlp_ratio", "must be > 0")
    check(cfg.vocab >= 2, "vocab", "must be >= 2")
    check(cfg.K >= 1, "K", "must be >= 1")
    check(cfg.K_g1 >= 1, "K_g1", "must be >= 1")
    check(cfg.K_g2 >= 1, "K_g2", "must be >= 1")
    if cfg.K_g1 >= 1 and cfg.K_g2 >= 1:
        check(cfg.K_g1 + cfg.K_g2 <= cfg.K, "K_g1", "K_g1+K_g2 <= K violated")
    check(1 <= cfg.group_count <= cfg.K, "group_count", f"must lie in [1, K={cfg.K}]")
    check(cfg.n_support >= cfg.K, "n_support", f"must be >= K ({cfg.K})")
    empty_range = (cfg.n_down, cfg.n_up) == (1, 0)
    check(
        empty_range or 1 <= cfg.n_down <= cfg.n_up,
        "n_down",
        "need 1 <= n_down <= n_up (or the empty range 1,0)",
    )
    check(
        empty_range or cfg.n_up <= cfg.depth,
        "n_up",
        f"must be <= depth ({cfg.depth})",
    )
    check(0.0 <= cfg.lam <= 1.0, "lam", "must lie in [0, 1]")
    check(cfg.lr > 0, "lr", "must be > 0")
    check(cfg.epochs >= 1, "epochs", "must be >= 1")
    check(cfg.batch >= 1, "batch", "must be >= 1")
    if isinstance(cfg.seeds, tuple):
        check(len(set(cfg.seeds)) == len(cfg.seeds), "seeds", "must be distinct")
        check(all(s >= 0 for s in cfg.seeds), "seeds", "must be >= 0")
    check(cfg.variant in _VARIANTS, "variant", f"unknown variant {cfg.variant!r}")
    return errs


def parse_config_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    errs = []
    known = {f.name: f for f in fields(RunConfig)}
    for key in sorted(set(obj) - set(known)):
        errs.append(f"$.{key}: unknown key")
    values = {}
    for name, f in known.items():
        if name not in obj:
            continue
        v = obj[name]
        if not _type_ok(v, f):
            errs.append(f"$.{name}: expected {f.type}, got {type(v).__name__}")
            continue
        values[name] = tuple(v) if name == "seeds" else v
    if errs:
        raise ConfigError("invalid config:\n" + "\n".join(errs))
    cfg = RunConfig(**values)
    errs = _constraints(cfg)
    if errs:
        raise ConfigError("invalid config:\n" + "\n".join(errs))
    return cfg


def parse_config(path: Path | str) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return parse_config_dict(obj)


def emit_config(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["seeds"] = list(cfg.seeds)
    return d


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(emit_config(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
