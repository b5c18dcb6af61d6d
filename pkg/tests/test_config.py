import json

import numpy as np
import pytest

from loca.config import PRESETS, parse_config
from loca.errors import ConfigError


def test_defaults_resolve():
    cfg = parse_config()
    assert cfg.preset == "desk"
    assert cfg.eta == 0.8
    assert all(src == "default" for src in cfg.provenance.values())


def test_desk_preset_geometry():
    cfg = parse_config()
    vit = cfg.vit_config()
    assert vit.ref_grid == (8, 8)
    assert vit.num_positions == 64
    assert vit.embed_dim == 64
    assert cfg.num_prototypes == 256
    aug = cfg.augment_config()
    assert aug.ref_size == (64, 64) and aug.query_size == (32, 32)


def test_paper_preset_geometry():
    cfg = parse_config(flags={"preset": "paper"})
    vit = cfg.vit_config()
    assert vit.num_positions == 196
    assert vit.embed_dim == 768
    assert vit.proj_dim == 256
    assert cfg.num_prototypes == 4096


def test_file_parsing_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\neta = 0.5\nqueries = 7\n\nstructured_mask = false\n")
    cfg = parse_config(path, flags={"eta": 0.9})
    assert cfg.eta == 0.9
    assert cfg.queries == 7
    assert cfg.structured_mask is False
    assert cfg.provenance["eta"] == "flag"
    assert cfg.provenance["queries"] == "file"
    assert cfg.provenance["seed"] == "default"


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = parse_config(path)
    assert cfg.eta == 0.8
    dump = cfg.dump()
    lines = [json.loads(line) for line in dump.splitlines()]
    assert {l["key"] for l in lines} >= {"eta", "preset", "seed"}


def test_unknown_key_named_in_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("etaa = 0.5\n")
    with pytest.raises(ConfigError) as exc:
        parse_config(path)
    assert "etaa" in str(exc.value)


def test_range_violation_names_key():
    with pytest.raises(ConfigError) as exc:
        parse_config(flags={"eta": 1.3})
    assert "eta" in str(exc.value)


def test_type_mismatch_names_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("epochs = three\n")
    with pytest.raises(ConfigError) as exc:
        parse_config(path)
    assert "epochs" in str(exc.value)


def test_k_override():
    cfg = parse_config(flags={"k": 64})
    assert cfg.num_prototypes == 64
    assert cfg.vit_config().num_prototypes == 64


def test_config_hash_tracks_semantics():
    a = parse_config()
    b = parse_config(flags={"preset": "paper"})
    c = parse_config(flags={"out_dir": "elsewhere"})
    assert a.config_hash() != b.config_hash()
    assert a.config_hash() == c.config_hash()  # paths do not affect the hash
    assert len(a.config_hash()) == 32
