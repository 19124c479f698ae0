import numpy as np
import pytest
from conftest import tiny_model_config, tiny_train_config

from hiq.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from hiq.config import config_digest
from hiq.data import build_datasets
from hiq.hierarchy import from_branching
from hiq.model import FlatModel, HierarchicalModel
from hiq.trainer import evaluate, train


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = tiny_train_config()
    data = build_datasets(cfg.data, cfg.model.input_size)
    out = tmp_path_factory.mktemp("ckpt")
    return cfg, data, train(cfg, out, data)


class TestRoundTrip:
    def test_parameters_bit_exact(self, trained):
        _, _, res = trained
        ckpt = load_checkpoint(res.checkpoint_path)
        loaded = dict(ckpt.model.named_parameters())
        for name, p in res.model.named_parameters():
            assert loaded[name].data.tobytes() == p.data.tobytes(), name
        np.testing.assert_array_equal(ckpt.stats.mean, res.stats.mean)

    def test_config_restored(self, trained):
        cfg, _, res = trained
        assert config_digest(load_checkpoint(res.checkpoint_path).cfg) == config_digest(cfg)

    def test_evaluation_identical(self, trained):
        cfg, data, res = trained
        ckpt = load_checkpoint(res.checkpoint_path)
        a = evaluate(res.model, data[2], res.stats, cfg.camp, cfg.model.camp_lambda)
        b = evaluate(ckpt.model, data[2], ckpt.stats, cfg.camp, cfg.model.camp_lambda)
        assert a.to_json() == b.to_json()

    def test_resave_is_byte_identical(self, trained, tmp_path):
        cfg, _, res = trained
        ckpt = load_checkpoint(res.checkpoint_path)
        again = save_checkpoint(ckpt.model, ckpt.stats, tmp_path / "again.hiq", ckpt.cfg)
        assert again.read_bytes() == res.checkpoint_path.read_bytes()

    def test_flat_model(self, trained, tmp_path):
        _, _, res = trained
        m = FlatModel(from_branching([2, 2]), tiny_model_config(), np.random.default_rng(0))
        ckpt = load_checkpoint(save_checkpoint(m, res.stats, tmp_path / "flat.hiq"))
        assert ckpt.kind == "flat"
        np.testing.assert_array_equal(ckpt.model.head.weight.data, m.head.weight.data)


class TestErrors:
    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.hiq")

    def test_truncated(self, trained, tmp_path):
        raw = trained[2].checkpoint_path.read_bytes()
        for cut in (10, len(raw) - 8):
            p = tmp_path / f"cut{cut}.hiq"
            p.write_bytes(raw[:cut])
            with pytest.raises(CheckpointError):
                load_checkpoint(p)

    def test_corrupt_payload(self, trained, tmp_path):
        raw = bytearray(trained[2].checkpoint_path.read_bytes())
        raw[-3] ^= 0xFF
        p = tmp_path / "corrupt.hiq"
        p.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(p)

    def test_bad_magic_and_version(self, trained, tmp_path):
        raw = trained[2].checkpoint_path.read_bytes()
        p = tmp_path / "x.hiq"
        p.write_bytes(b"NOTCKPT" + raw[7:])
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
        p.write_bytes(raw.replace(b"HIQCKPT 1", b"HIQCKPT 9", 1))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(p)

    def test_hierarchy_mismatch_names_sizes(self, tmp_path, trained):
        stats = trained[2].stats
        m = HierarchicalModel(from_branching([4, 2]), tiny_model_config(), np.random.default_rng(0))
        path = save_checkpoint(m, stats, tmp_path / "k4.hiq")
        with pytest.raises(CheckpointError, match=r"k=\(2, 4\).*k=\(2, 6\)"):
            load_checkpoint(path, from_branching([6, 2]))
