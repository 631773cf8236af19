import struct

import numpy as np
import pytest

from steernet import archive
from steernet.config import ExperimentConfig, parse_config, serialize_config
from steernet.errors import ChecksumError, ConfigError, FormatError

# a (2x2 float32) and id (3 int64), checksum included
GOLDEN_HEX = (
    "4853545231010000000200000000000000010000000000000061000200000000000000020000000000000002000000"
    "000000000000803f000000400000404000008040020000000000000069640301000000000000000300000000000000"
    "070000000000000008000000000000000900000000000000c0b4cf2dd4a660cf"
)


def golden_tensors():
    return {"a": np.array([[1, 2], [3, 4]], dtype=np.float32), "id": np.array([7, 8, 9], dtype=np.int64)}


class TestArchive:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        t = {"w": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5),
             "idx": np.arange(6, dtype=np.int64).reshape(2, 3), "s": np.float32(2.5), "e": np.zeros((0, 2))}
        p = archive.save_checkpoint(t, tmp_path / "a.hstr")
        back = archive.load_checkpoint(p)
        assert list(back) == list(t)
        for k in t:
            assert back[k].dtype == np.asarray(t[k]).dtype and back[k].shape == np.shape(t[k])
            np.testing.assert_array_equal(back[k], t[k])
        p2 = archive.save_checkpoint(back, tmp_path / "b.hstr")
        assert p.read_bytes() == p2.read_bytes()

    def test_empty_archive(self, tmp_path):
        p = archive.save_checkpoint({}, tmp_path / "e.hstr")
        assert archive.load_checkpoint(p) == {}

    def test_corrupted_byte(self, tmp_path):
        p = archive.save_checkpoint({"x": np.ones(8, np.float32)}, tmp_path / "c.hstr")
        data = bytearray(p.read_bytes())
        data[40] ^= 0xFF
        p.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            archive.load_checkpoint(p)

    def test_bad_magic_and_version(self):
        good = archive.encode({"x": np.ones(2)})
        with pytest.raises(FormatError):
            archive.decode(b"XXXXX" + good[5:])
        bumped = good[:5] + struct.pack("<I", 2) + good[9:]
        with pytest.raises(FormatError):
            archive.decode(bumped)

    def test_truncated(self):
        with pytest.raises(FormatError):
            archive.decode(b"HSTR1")

    def test_meta(self, tmp_path):
        p = archive.save_checkpoint({"x": np.ones(1)}, tmp_path / "m.hstr", meta={"kind": "base", "n": 3})
        t, meta = archive.load_checkpoint(p, with_meta=True)
        assert meta == {"kind": "base", "n": 3} and list(t) == ["x"]

    def test_golden_file(self):
        data = bytes.fromhex(GOLDEN_HEX)
        assert archive.encode(golden_tensors()) == data
        back = archive.decode(data)
        np.testing.assert_array_equal(back["a"], golden_tensors()["a"])
        np.testing.assert_array_equal(back["id"], golden_tensors()["id"])

    def test_unsupported_dtype(self):
        with pytest.raises(TypeError):
            archive.encode({"c": np.array([1 + 2j])})


class TestConfig:
    def test_defaults(self):
        cfg = parse_config("")
        assert cfg == ExperimentConfig()
        assert cfg.hypernet.variant == "CrossAttention" and cfg.factor_grid[0] == 0.0
        assert cfg.layer == cfg.model.n_layers // 2

    def test_partial_override(self):
        cfg = parse_config("train:\n  lr: 0.002\nhypernet:\n  variant: NoContext\n")
        assert cfg.train.lr == 0.002 and cfg.hypernet.variant == "NoContext" and cfg.train.batch_size == 32

    @pytest.mark.parametrize("text,key", [("lrr: 1", "lrr"), ("train:\n  lrr: 1", "lrr"),
                                          ("model: {d_model: x}", "d_model"), ("train: {lr: 0}", "lr")])
    def test_errors_name_key(self, text, key):
        with pytest.raises(ConfigError, match=key):
            parse_config(text)

    def test_roundtrip(self):
        cfg = parse_config("seed: 5\nfactor_grid: [0, 1, 3]\nsweep: {sizes: [1, 2]}\nmodel: {layer: 1}")
        assert parse_config(serialize_config(cfg)) == cfg

    def test_cross_unit_norm_rejected(self):
        with pytest.raises(ConfigError):
            parse_config("hypernet: {unit_norm_output: true}")

    def test_depth_rule(self):
        cfg = parse_config("train: {lr: 0.001, lr_rule: depth-sqrt}")
        assert cfg.train_lr(20) == pytest.approx(0.001) and cfg.train_lr(5) == pytest.approx(0.002)

    def test_epochs(self):
        cfg = parse_config("train: {epochs: 2, batch_size: 10}")
        assert cfg.train_steps(25) == 5

    def test_malformed(self):
        with pytest.raises(ConfigError):
            parse_config("a: [1, 2")
        with pytest.raises(ConfigError):
            parse_config("- 1\n- 2")
