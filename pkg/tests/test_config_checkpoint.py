import json

import numpy as np
import pytest
import torch

from viclfuse.backbone import BackboneConfig, InpaintingBackbone
from viclfuse.checkpoint import (
    MAGIC,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from viclfuse.config import (
    ConfigError,
    RunConfig,
    config_hash,
    emit_config,
    parse_config,
    parse_config_dict,
)
from viclfuse.core_types import CanvasConfig
from viclfuse.tokenizer import Codebook

# --------------------------------------------------------------------- config


def test_empty_object_gives_documented_defaults():
    cfg = parse_config_dict({})
    assert (cfg.K, cfg.K_g1, cfg.K_g2) == (16, 8, 8)
    assert (cfg.n_down, cfg.n_up) == (8, 14)
    assert (cfg.lr, cfg.epochs, cfg.batch) == (0.05, 10, 16)
    assert cfg == RunConfig()


def test_unknown_keys_all_reported():
    with pytest.raises(ConfigError) as e:
        parse_config_dict({"K": 8, "learning_rate": 0.1, "bogus": 1})
    msg = str(e.value)
    assert "$.learning_rate: unknown key" in msg
    assert "$.bogus: unknown key" in msg


def test_constraint_violations_all_listed():
    with pytest.raises(ConfigError) as e:
        parse_config_dict({"K": 16, "K_g1": 10, "K_g2": 10, "lam": 2.0, "epochs": 0})
    msg = str(e.value)
    assert "K_g1+K_g2 <= K" in msg
    assert "$.lam" in msg
    assert "$.epochs" in msg


def test_type_errors_have_field_paths():
    with pytest.raises(ConfigError) as e:
        parse_config_dict({"K": "sixteen", "lr": True})
    msg = str(e.value)
    assert "$.K" in msg and "$.lr" in msg


def test_seeds_validation():
    assert parse_config_dict({"seeds": [3, 1]}).seeds == (3, 1)
    with pytest.raises(ConfigError):
        parse_config_dict({"seeds": []})
    with pytest.raises(ConfigError, match="distinct"):
        parse_config_dict({"seeds": [0, 0]})
    with pytest.raises(ConfigError):
        parse_config_dict({"seeds": "012"})


def test_geometry_divisibility():
    with pytest.raises(ConfigError, match="not divisible"):
        parse_config_dict({"quadrant": 30, "patch_size": 8})
    with pytest.raises(ConfigError, match="not divisible"):
        parse_config_dict({"embed_dim": 130, "heads": 4})


def test_fusion_range_constraints():
    assert parse_config_dict({"n_down": 1, "n_up": 0}).n_up == 0  # empty range ok
    with pytest.raises(ConfigError):
        parse_config_dict({"n_down": 5, "n_up": 3})
    with pytest.raises(ConfigError, match="depth"):
        parse_config_dict({"depth": 4, "n_down": 2, "n_up": 6})


def test_round_trip():
    cfg = parse_config_dict({"K": 8, "K_g1": 4, "K_g2": 4, "seeds": [5]})
    again = parse_config_dict(emit_config(cfg))
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_config_hash_sensitivity():
    a = config_hash(RunConfig())
    b = config_hash(RunConfig(K=8, K_g1=4, K_g2=4))
    assert a != b
    assert a == config_hash(RunConfig())
    assert len(a) == 16


def test_parse_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="not valid JSON"):
        parse_config(bad)
    good = tmp_path / "good.json"
    good.write_text('{"K": 8, "K_g1": 4, "K_g2": 4}')
    assert parse_config(good).K == 8


# ----------------------------------------------------------------- checkpoint


def small_codebook():
    entries = np.linspace(0.0, 1.0, 2 * 48).reshape(2, 48)
    return Codebook(entries=entries, patch_size=4)


def small_state():
    g = torch.Generator().manual_seed(0)
    return {
        "w": torch.randn(3, 4, generator=g),
        "b": torch.randn(4, generator=g).double(),
        "steps": torch.tensor([7], dtype=torch.int64),
    }


def test_checkpoint_round_trip(tmp_path):
    p = tmp_path / "ck.viclf"
    save_checkpoint(p, "backbone", small_state(), small_codebook(), "hash1", {"note": 1})
    data = load_checkpoint(p)
    assert data.stage == "backbone"
    assert data.config_hash == "hash1"
    assert data.extra == {"note": 1}
    want = small_state()
    assert set(data.state) == set(want)
    for k in want:
        assert torch.equal(data.state[k], want[k])
        assert data.state[k].dtype == want[k].dtype
    np.testing.assert_array_equal(data.codebook.entries, small_codebook().entries)
    assert data.codebook.patch_size == 4


def test_checkpoint_bytes_reproducible(tmp_path):
    a, b = tmp_path / "a.viclf", tmp_path / "b.viclf"
    save_checkpoint(a, "pg", small_state(), small_codebook(), "h")
    save_checkpoint(b, "pg", small_state(), small_codebook(), "h")
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_sidecar(tmp_path):
    p = tmp_path / "ck.viclf"
    save_checkpoint(p, "multi", small_state(), small_codebook(), "h", {"variant": "full"})
    side = json.loads((tmp_path / "ck.viclf.json").read_text())
    assert side["stage"] == "multi"
    assert [t["name"] for t in side["tensors"]] == ["b", "steps", "w"]  # sorted
    assert side["extra"] == {"variant": "full"}


def test_checkpoint_validation_errors(tmp_path):
    p = tmp_path / "ck.viclf"
    with pytest.raises(CheckpointError, match="unknown stage"):
        save_checkpoint(p, "embedder", small_state(), small_codebook(), "h")
    save_checkpoint(p, "backbone", small_state(), small_codebook(), "h1")
    with pytest.raises(CheckpointError, match="stage"):
        load_checkpoint(p, expect_stage="pg")
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(p, expect_config_hash="other")
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.viclf")
    junk = tmp_path / "junk.viclf"
    junk.write_bytes(b"PNG....." + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(junk)


def test_checkpoint_detects_trailing_garbage(tmp_path):
    p = tmp_path / "ck.viclf"
    save_checkpoint(p, "backbone", small_state(), small_codebook(), "h")
    with open(p, "ab") as f:
        f.write(b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)
    assert p.read_bytes()[: len(MAGIC)] == MAGIC


def test_backbone_state_round_trip_bit_identical_logits(tmp_path):
    canvas = CanvasConfig(quadrant_h=8, quadrant_w=8, patch_size=4)
    bb_cfg = BackboneConfig(depth=2, embed_dim=16, heads=2, mlp_ratio=2.0, patch_size=4, vocab=4)
    model = InpaintingBackbone(bb_cfg, canvas, seed=1)
    p = tmp_path / "bb.viclf"
    save_checkpoint(p, "backbone", model.state_dict(), small_codebook(), "h")
    fresh = InpaintingBackbone(bb_cfg, canvas, seed=99)  # different init
    fresh.load_state_dict(load_checkpoint(p, expect_stage="backbone").state)
    x = torch.randn(1, canvas.num_patches, canvas.patch_dim,
                    generator=torch.Generator().manual_seed(0))
    assert torch.equal(fresh(x), model(x))
