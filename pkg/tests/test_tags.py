import numpy as np
import pytest

from tagtune import tags as tg
from tagtune.backbone import Backbone, BackboneConfig
from tagtune.numerics import Tensor, make_rng


def small_backbone(seed=0, vocab_size=16, d=8):
    cfg = BackboneConfig(vocab_size=vocab_size, embed_dim=d, n_layers=1, n_heads=1, context_len=32)
    return Backbone(cfg, make_rng(seed))


class TestInitTag:
    def test_all_equal_base_rows(self):
        bb = small_backbone()
        bb.token_emb.data[:] = np.tile(np.arange(8, dtype=np.float32), (16, 1))
        table = tg.TagTable(16, 8)
        spec, report = tg.init_tag(bb, "t", "domain", 3, table)
        assert abs(report.scale - 1.0) < 1e-6
        np.testing.assert_allclose(spec.embedding.data, np.tile(np.arange(8), (3, 1)), rtol=1e-6)

    def test_two_basis_rows(self):
        # base rows {(1,0),(0,1)}: v_hat=(0.5,0.5), s=sqrt(2), rows=(sqrt2/2, sqrt2/2)
        bb = small_backbone(d=8)
        bb.config = BackboneConfig(vocab_size=2, embed_dim=2, n_layers=1, n_heads=1, context_len=8)
        bb.token_emb = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32))
        table = tg.TagTable(2, 2)
        spec, report = tg.init_tag(bb, "t", "domain", 2, table)
        assert abs(report.scale - np.sqrt(2.0)) < 1e-6
        np.testing.assert_allclose(spec.embedding.data, np.full((2, 2), np.sqrt(2) / 2), rtol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(spec.embedding.data, axis=1), [1.0, 1.0], rtol=1e-6)

    def test_parameter_count_at_paper_scale(self):
        rows, _ = tg.compute_init_rows(np.random.default_rng(0).normal(size=(32, 4096)), p=10)
        assert rows.size == 40_960

    def test_zero_mean_errors(self):
        bb = small_backbone()
        bb.token_emb.data[:8] = 1.0
        bb.token_emb.data[8:] = -1.0
        table = tg.TagTable(16, 8)
        with pytest.raises(tg.TagError):
            tg.init_tag(bb, "t", "domain", 2, table)

    def test_rows_identical_and_norm_matched(self):
        for seed in range(5):
            bb = small_backbone(seed=seed, vocab_size=24, d=12)
            table = tg.TagTable(24, 12)
            spec, report = tg.init_tag(bb, "t", "function", 4, table)
            rows = spec.embedding.data
            assert np.all(rows == rows[0])
            mean_norm = np.linalg.norm(bb.token_emb.data.astype(np.float64), axis=1).mean()
            assert abs(np.linalg.norm(rows[0].astype(np.float64)) - mean_norm) < 1e-5

    def test_duplicate_name_rejected(self):
        bb = small_backbone()
        table = tg.TagTable(16, 8)
        tg.init_tag(bb, "t", "domain", 2, table)
        with pytest.raises(tg.TagError):
            tg.init_tag(bb, "t", "domain", 2, table)

    def test_id_assignment(self):
        bb = small_backbone()
        table = tg.TagTable(16, 8)
        a, _ = tg.init_tag(bb, "a", "domain", 2, table)
        b, _ = tg.init_tag(bb, "b", "function", 2, table)
        assert a.tag_id == 16 and b.tag_id == 17
        assert table.by_id(17).name == "b"


class TestStatus:
    def test_set_status(self):
        spec = tg.TagSpec("t", "domain", 1, Tensor(np.zeros((1, 4))))
        tg.set_status(spec, "frozen")
        assert spec.status == "frozen"
        with pytest.raises(tg.TagError):
            tg.set_status(spec, "melted")


class TestEnrichFork:
    def test_child_is_byte_identical_copy(self):
        bb = small_backbone()
        table = tg.TagTable(16, 8)
        parent, _ = tg.init_tag(bb, "dom", "domain", 3, table)
        child = tg.enrich_fork(parent, "qed", table)
        assert child.name == "dom@qed"
        assert np.array_equal(child.embedding.data, parent.embedding.data)
        assert child.embedding.data is not parent.embedding.data

    def test_lineage_recorded(self):
        bb = small_backbone()
        table = tg.TagTable(16, 8)
        parent, _ = tg.init_tag(bb, "dom", "domain", 3, table)
        child = tg.enrich_fork(parent, "qed", table)
        assert child.lineage == [{"stage": 2, "task": "qed", "parent": "dom"}]

    def test_function_tag_rejected(self):
        bb = small_backbone()
        table = tg.TagTable(16, 8)
        fn, _ = tg.init_tag(bb, "fn", "function", 2, table)
        with pytest.raises(tg.TagError):
            tg.enrich_fork(fn, "task", table)

    def test_training_child_leaves_parent_unchanged(self):
        bb = small_backbone()
        table = tg.TagTable(16, 8)
        parent, _ = tg.init_tag(bb, "dom", "domain", 2, table)
        child = tg.enrich_fork(parent, "task", table)
        before = parent.embedding.data.copy()
        child.embedding.data += 1.0
        assert np.array_equal(parent.embedding.data, before)


class TestPersistence:
    def make_table(self):
        bb = small_backbone(seed=3)
        table = tg.TagTable(16, 8)
        spec, _ = tg.init_tag(bb, "dom", "domain", 3, table)
        tg.set_status(spec, "frozen")
        fn, _ = tg.init_tag(bb, "fn", "function", 2, table)
        tg.enrich_fork(spec, "task", table)
        return table

    def test_save_load_save_identical_bytes(self, tmp_path):
        table = self.make_table()
        j1, b1 = tmp_path / "a.json", tmp_path / "a.bin"
        tg.save_tags(table, j1, b1)
        loaded = tg.load_tags(j1, b1)
        j2, b2 = tmp_path / "b.json", tmp_path / "b.bin"
        tg.save_tags(loaded, j2, b2)
        assert j1.read_bytes() == j2.read_bytes()
        assert b1.read_bytes() == b2.read_bytes()

    def test_status_and_lineage_roundtrip(self, tmp_path):
        table = self.make_table()
        tg.save_tags(table, tmp_path / "t.json", tmp_path / "t.bin")
        loaded = tg.load_tags(tmp_path / "t.json", tmp_path / "t.bin")
        assert loaded.get("dom").status == "frozen"
        assert loaded.get("dom@task").lineage == [{"stage": 2, "task": "task", "parent": "dom"}]
        assert loaded.get("fn").tag_id == table.get("fn").tag_id

    def test_wrong_d_rejected(self, tmp_path):
        table = self.make_table()
        tg.save_tags(table, tmp_path / "t.json", tmp_path / "t.bin")
        with pytest.raises(tg.TagError):
            tg.load_tags(tmp_path / "t.json", tmp_path / "t.bin", expect_d=64)

    def test_empty_table_roundtrips(self, tmp_path):
        table = tg.TagTable(16, 8)
        tg.save_tags(table, tmp_path / "t.json", tmp_path / "t.bin")
        loaded = tg.load_tags(tmp_path / "t.json", tmp_path / "t.bin")
        assert len(loaded) == 0 and loaded.base_vocab_size == 16

    def test_clone_is_independent(self):
        table = self.make_table()
        copy = table.clone()
        copy.get("dom").embedding.data += 5.0
        assert not np.array_equal(copy.get("dom").embedding.data, table.get("dom").embedding.data)
        assert copy.get("dom").tag_id == table.get("dom").tag_id
