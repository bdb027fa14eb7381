import json

import numpy as np
import pytest

from spqi.checkpoint import MAGIC, CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from spqi.config import ConfigError, RunConfig, dump_config, load_config


def arrays(rng):
    return {"b.w": rng.normal(size=(3, 4)), "a": rng.normal(size=5), "scalar": np.array(2.5)}


def test_round_trip_is_byte_identical(tmp_path, rng):
    meta = {"kind": "test", "dims": [3, 4], "note": "café"}
    save_checkpoint(tmp_path / "a.spq", arrays(rng), meta)
    got, got_meta = load_checkpoint(tmp_path / "a.spq")
    save_checkpoint(tmp_path / "b.spq", got, got_meta)
    assert (tmp_path / "a.spq").read_bytes() == (tmp_path / "b.spq").read_bytes()
    assert got_meta == meta
    assert got["scalar"].shape == ()


def test_values_exact(rng):
    src = arrays(rng)
    src["tiny"] = np.array([5e-324, -0.0, np.finfo(float).max])
    got, _ = decode(encode(src))
    for k, v in src.items():
        assert np.array_equal(got[k], v)
        assert got[k].tobytes() == np.asarray(v, dtype=np.float64).tobytes()


def test_header_layout(rng):
    blob = encode({"x": np.ones(2)}, {"k": 1})
    assert blob[:4] == MAGIC
    assert int.from_bytes(blob[4:8], "little") == 1
    n = int.from_bytes(blob[8:16], "little")
    meta = json.loads(blob[16 : 16 + n])
    assert meta["sections"] == [{"length": 16, "name": "x", "offset": 0, "shape": [2]}]
    assert len(blob) == 16 + n + 16


def test_version_mismatch(rng):
    blob = bytearray(encode(arrays(rng)))
    blob[4:8] = (2).to_bytes(4, "little")
    with pytest.raises(CheckpointError, match="incompatible checkpoint version"):
        decode(bytes(blob))


def test_corruption_detected(rng):
    blob = encode(arrays(rng), {"k": 1})
    with pytest.raises(CheckpointError):
        decode(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        decode(blob[:-8])
    with pytest.raises(CheckpointError):
        decode(blob + b"\0")
    with pytest.raises(CheckpointError):
        decode(blob[:10])
    with pytest.raises(CheckpointError):
        encode({"x": np.ones(1)}, {"sections": []})
    with pytest.raises(ValueError):
        encode({"x": np.ones(1)}, {"bad": float("nan")})


def test_config_defaults_and_round_trip(tmp_path):
    cfg = load_config(None)
    assert cfg == RunConfig()
    dump_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_config_partial_nested(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"model": {"node_dim": 16}, "seed": 3}, "target_r": 0.5}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.train.model.node_dim == 16 and cfg.train.seed == 3
    assert cfg.train.model.gat_layers == 4
    assert cfg.target_r == 0.5


@pytest.mark.parametrize(
    "doc, path",
    [
        ({"bogus": 1}, "bogus"),
        ({"synth": {"bogus": 1}}, "synth.bogus"),
        ({"synth": {"signal_strengths": {"x": 1}}}, "synth.signal_strengths.x"),
        ({"train": {"model": {"width": 3}}}, "train.model.width"),
    ],
)
def test_unknown_keys_rejected_with_path(tmp_path, doc, path):
    (tmp_path / "c.json").write_text(json.dumps(doc))
    with pytest.raises(ConfigError, match=f"unknown config key {path}$"):
        load_config(tmp_path / "c.json")


def test_bad_values_are_config_errors(tmp_path):
    for doc in ({"train": {"sampling": "x"}}, {"grid_seeds": []}, {"synth": {"seed": -1}}):
        (tmp_path / "c.json").write_text(json.dumps(doc))
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")
    (tmp_path / "c.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")
