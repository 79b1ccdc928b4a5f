import math

import numpy as np
import pytest

from helpers import check_gradients
from tagtune import heads as hd
from tagtune import numerics as nm
from tagtune import templates as tp
from tagtune.backbone import Backbone, BackboneConfig
from tagtune.numerics import AdamW, Tensor, make_rng
from tagtune.tags import TagTable, init_tag


@pytest.fixture
def model():
    cfg = BackboneConfig(vocab_size=tp.BASE_VOCAB_SIZE, embed_dim=16, n_layers=1, n_heads=2, context_len=48)
    return Backbone(cfg, make_rng(0))


class TestPredictNumeric:
    def test_zero_weight_gives_zero(self):
        head = hd.make_head("t", "regression", d=8)
        hidden = Tensor(np.random.default_rng(0).standard_normal((5, 8)).astype(np.float32))
        out = hd.predict_numeric(hidden, 2, head)
        assert out.data.shape == (1, 1) and out.data[0, 0] == 0.0

    def test_basis_weight_reads_coordinate(self):
        head = hd.make_head("t", "regression", d=4)
        head.weight.data[0, 0] = 1.0
        hidden = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4))
        out = hd.predict_numeric(hidden, 1, head)
        assert out.data[0, 0] == hidden.data[1, 0]

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        hidden = Tensor(rng.standard_normal((4, 6)), dtype=np.float64)
        w = Tensor(rng.standard_normal((6, 1)), dtype=np.float64, requires_grad=True)
        head = hd.TaskHead("t", "regression", d_t=1, weight=w)
        target = Tensor(rng.standard_normal((1, 1)), dtype=np.float64)

        def forward():
            return nm.mse(hd.predict_numeric(hidden, 2, head), target)

        check_gradients(forward, {"w": w})

    def test_readout_out_of_range(self):
        head = hd.make_head("t", "regression", d=4)
        hidden = Tensor(np.zeros((3, 4)))
        with pytest.raises(hd.HeadError):
            hd.predict_numeric(hidden, 3, head)

    def test_linearity_in_hidden_state(self):
        # superposition: w.(a+b) == w.a + w.b
        rng = np.random.default_rng(2)
        head = hd.make_head("t", "regression", d=6)
        head.weight.data[:] = rng.standard_normal((6, 1)).astype(np.float32)
        a = rng.standard_normal((1, 6)).astype(np.float32)
        b = rng.standard_normal((1, 6)).astype(np.float32)
        out_sum = hd.predict_numeric(Tensor(a + b), 0, head).data[0, 0]
        out_parts = (
            hd.predict_numeric(Tensor(a), 0, head).data[0, 0]
            + hd.predict_numeric(Tensor(b), 0, head).data[0, 0]
        )
        assert abs(out_sum - out_parts) < 1e-4

    def test_generation_head_rejected(self):
        head = hd.make_head("t", "generation", d=4)
        with pytest.raises(hd.HeadError):
            hd.predict_numeric(Tensor(np.zeros((2, 4))), 0, head)


class TestClassification:
    def test_probs_sum_to_one(self):
        head = hd.make_head("t", "classification", d=6, d_t=3, loss="cross_entropy")
        head.weight.data[:] = np.random.default_rng(0).standard_normal((6, 3)).astype(np.float32)
        hidden = Tensor(np.random.default_rng(1).standard_normal((2, 6)).astype(np.float32))
        probs = hd.classify_probs(head, hidden, 1)
        assert abs(probs.sum() - 1.0) < 1e-6


class TestStandardization:
    def test_roundtrip(self):
        head = hd.make_head("t", "regression", d=4)
        hd.fit_standardizer(head, [1.0, 3.0, 5.0])
        assert abs(hd.destandardize(head, hd.standardize(head, 4.2)) - 4.2) < 1e-9
        assert head.target_mean == 3.0


class TestGreedyDecode:
    def test_degenerate_model_repeats_favored_token(self, model):
        for p in model.parameters().values():
            p.data[:] = 0.0
        favored = tp.CHAR_TO_ID["q"]
        model.w_out.data[:, favored] = 0.0
        model.ln_f_b.data[:] = 1.0
        model.w_out.data[0, favored] = 5.0
        out = hd.greedy_decode(model, None, tp.tokenize("ab"), max_len=6)
        assert out == [favored] * 6

    def test_never_emits_tag_ids(self, model):
        table = TagTable(model.config.vocab_size, model.config.embed_dim)
        spec, _ = init_tag(model, "dom", "domain", 2, table)
        prompt = [spec.tag_id] * 2 + tp.tokenize("abc")
        out = hd.greedy_decode(model, table, prompt, max_len=20)
        assert all(i < model.config.vocab_size for i in out)

    def test_overfit_single_pair_reproduces_target(self, model):
        # memorize one prompt->target pair, then decode it back exactly
        model.set_trainable(True)
        prompt = tp.tokenize("In: ab\nOut: ")
        target = tp.tokenize("cd") + [tp.EOS_ID]
        ids = np.asarray(prompt + target, dtype=np.int64)
        mask = np.zeros(len(ids), dtype=np.float32)
        targets = np.roll(ids, -1)
        for i in range(len(prompt) - 1, len(ids) - 1):
            mask[i] = 1.0
        opt = AdamW(model.parameters())
        for step in range(60):
            logits, _ = model.forward(model.embed(ids))
            loss = nm.cross_entropy(logits, targets, mask)
            nm.backward(loss)
            opt.step(lr=5e-3)
            opt.zero_grad()
        model.set_trainable(False)
        out = hd.greedy_decode(model, None, prompt, max_len=8)
        assert out == tp.tokenize("cd")


class TestDigitCodec:
    def test_roundtrip_positive(self):
        text, parsed = hd.digit_generation_roundtrip(3.14, 2)
        assert text == "3.14" and parsed == 3.14

    def test_roundtrip_negative(self):
        text, parsed = hd.digit_generation_roundtrip(-0.5, 2)
        assert text == "-0.50" and parsed == -0.5

    def test_parse_failure_returns_none(self):
        assert hd.parse_value("3.1.4") is None
        assert hd.parse_value("") is None

    def test_ce_is_insensitive_to_digit_order_but_mse_is_not(self):
        # Per-digit CE under a uniform-confusion predictor scores "3.24" and
        # "3.15" identically against "3.14"; MSE separates them.
        digits = "0123456789."
        ids = {c: i for i, c in enumerate(digits)}

        def per_digit_ce(pred: str, target: str) -> float:
            total = 0.0
            for p, t in zip(pred, target):
                # predictor peaked on pred's digit with uniform confusion mass
                logits = np.zeros((1, len(digits)), dtype=np.float32)
                logits[0, ids[p]] = 3.0
                total += nm.cross_entropy(Tensor(logits), [ids[t]], [1.0]).item()
            return total

        ce_24 = per_digit_ce("3.14", "3.24")
        ce_15 = per_digit_ce("3.14", "3.15")
        assert abs(ce_24 - ce_15) < 1e-6
        assert abs(nm.mse(Tensor([3.14]), Tensor([3.24])).item() - 0.01) < 1e-6
        assert nm.mse(Tensor([3.14]), Tensor([3.24])).item() > nm.mse(Tensor([3.14]), Tensor([3.15])).item()

    def test_decode_numeric_failure_value(self, model):
        # untrained model will not emit a parseable decimal; failure flagged
        value, failed = hd.decode_numeric(model, None, tp.tokenize("Out: "), precision=2, failure_value=7.5)
        if failed:
            assert value == 7.5


class TestHeadPersistence:
    def test_roundtrip(self, tmp_path):
        heads = {
            "reg": hd.make_head("reg", "regression", d=8),
            "gen": hd.make_head("gen", "generation", d=8),
        }
        heads["reg"].weight.data[:] = 0.25
        hd.fit_standardizer(heads["reg"], [0.0, 2.0])
        hd.save_heads(heads, tmp_path / "heads.json", tmp_path / "heads.bin")
        loaded = hd.load_heads(tmp_path / "heads.json", tmp_path / "heads.bin")
        assert loaded["reg"].target_mean == 1.0
        np.testing.assert_array_equal(loaded["reg"].weight.data, heads["reg"].weight.data)
        assert loaded["gen"].weight is None
