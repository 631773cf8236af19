import numpy as np
import pytest

from steernet import conceptlab as cl
from steernet.errors import ConfigError, DataError, LengthError, NumericError, ShapeError, TrainingError
from steernet.hypernet import (ContextCache, Hypernet, HypernetConfig, HyperTrainConfig, SteeringVector,
                               cross_attention_block, depth_lr, eval_loss, label_batch, reconstruction_loss,
                               steering_loss, train_e2e, train_reconstruction)
from steernet.numerics import Tensor, no_grad
from steernet.tinylm import LmConfig, TinyLM

D = 32


@pytest.fixture(scope="module")
def lm():
    return TinyLM.init(LmConfig(d_model=D, n_layers=2, n_heads=4, d_ff=64, max_seq_len=48), seed=1).freeze()


@pytest.fixture(scope="module")
def data():
    return cl.gen_dataset(["mark:03", "sep:05"], n_train=6, n_eval=2, seed=0)


def cfg(variant="CrossAttention", **kw):
    base = dict(variant=variant, n_blocks=2, n_heads=4, n_cross_heads=2, d_model=D, d_ff=64, max_seq_len=24)
    base.update(kw)
    return HypernetConfig(**base)


def randomized(h: Hypernet, seed=0):
    """Give every parameter generic nonzero values (the head is zero at init)."""
    rng = np.random.default_rng(seed)
    for p in h.params.values():
        p.data = (p.data + rng.normal(0, 0.1, p.shape)).astype(np.float32)
    return h


class TestConfig:
    def test_unit_norm_forbidden_for_cross(self):
        with pytest.raises(ConfigError):
            cfg(unit_norm_output=True)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            cfg("Perceiver")

    def test_cross_heads_required(self):
        with pytest.raises(ConfigError):
            cfg(n_cross_heads=0)

    def test_steering_vector_norm_flag(self):
        SteeringVector(np.array([0.6, 0.8]), normalized=True)
        with pytest.raises(NumericError):
            SteeringVector(np.array([1.0, 1.0]), normalized=True)


class TestEncode:
    def test_shape_and_determinism(self, lm):
        h = Hypernet.build(cfg("NoContext"), lm, 0)
        s = cl.get_concept("tag:02").steering_prompt
        a = h.encode_steering_prompt(s)
        b = h.encode_steering_prompt(s)
        assert a[-1].shape == (len(s), D) and len(a) == 3
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_causal(self, lm):
        h = randomized(Hypernet.build(cfg("NoContext", init="random"), lm, 0))
        s = [16, 100, 40, 41]
        full = h.encode_steering_prompt(s)[-1]
        part = h.encode_steering_prompt(s[:2])[-1]
        np.testing.assert_allclose(full[:2], part, atol=1e-6)

    def test_length_overflow(self, lm):
        h = Hypernet.build(cfg("NoContext"), lm, 0)
        with pytest.raises(LengthError):
            h.encode_steering_prompt(list(range(32, 32 + 25)))
        with pytest.raises(LengthError):
            h.encode_steering_prompt([])


class TestCrossAttention:
    def _setup(self, lm, seed=0):
        h = randomized(Hypernet.build(cfg(init="random"), lm, seed), seed)
        x = Tensor(np.random.default_rng(seed).normal(size=(1, 3, D)).astype(np.float32))
        return h, x

    def test_single_key(self, lm):
        h, x = self._setup(lm)
        P = h.params
        ctx = np.random.default_rng(5).normal(size=(1, 1, D)).astype(np.float32)
        w = []
        with no_grad():
            cross_attention_block(P, "blocks.0.", x, Tensor(ctx), 4, 2, 1e-5, weights=w)
        cross = w[0][1]
        np.testing.assert_allclose(cross, 1.0)

    def test_rows_sum_to_one(self, lm):
        h, x = self._setup(lm)
        ctx = Tensor(np.random.default_rng(6).normal(size=(1, 5, D)).astype(np.float32))
        w = []
        with no_grad():
            cross_attention_block(h.params, "blocks.1.", x, ctx, 4, 2, 1e-5, weights=w)
        np.testing.assert_allclose(w[0][0].sum(-1), 1.0, atol=1e-6)
        np.testing.assert_allclose(w[0][1].sum(-1), 1.0, atol=1e-6)

    def test_zero_context_contributes_nothing(self, lm):
        h, x = self._setup(lm)
        P = dict(h.params)
        for k in ("b_kv", "b_o", "ln_kv.b", "ln_kv.g"):
            name = "blocks.0.xattn." + k
            P[name] = Tensor(np.zeros_like(P[name].data))
        zeros = Tensor(np.zeros((1, 4, D), np.float32))
        rng_ctx = Tensor(np.random.default_rng(2).normal(size=(1, 4, D)).astype(np.float32))
        with no_grad():
            a = cross_attention_block(P, "blocks.0.", x, zeros, 4, 2, 1e-5).data
            # zero LN gain/bias on the keys/values makes any context look like zeros
            b = cross_attention_block(P, "blocks.0.", x, rng_ctx, 4, 2, 1e-5).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_width_mismatch(self, lm):
        h, x = self._setup(lm)
        with pytest.raises(ShapeError):
            cross_attention_block(h.params, "blocks.0.", x, Tensor(np.zeros((1, 2, D + 1), np.float32)), 4, 2, 1e-5)


class TestHead:
    def test_unit_norm(self, lm):
        h = randomized(Hypernet.build(cfg("NoContext", unit_norm_output=True), lm, 0))
        v = h.generate_vector(cl.get_concept("wrap:01").steering_prompt)
        assert v.normalized and abs(np.linalg.norm(v.values) - 1) < 1e-5

    def test_zero_head_emits_zero(self, lm):
        h = Hypernet.build(cfg("NoContext"), lm, 0)
        v = h.generate_vector(cl.get_concept("wrap:01").steering_prompt)
        assert v.values.shape == (D,) and not v.values.any()

    def test_unit_norm_of_zero_raises(self, lm):
        h = Hypernet.build(cfg("NoContext", unit_norm_output=True), lm, 0)
        for k in ("head.w2", "head.b2"):
            h.params[k].data[:] = 0
        with pytest.raises(NumericError):
            h.generate_vector([16, 96])


class TestVariants:
    def test_nocontext_ignores_x(self, lm):
        h = randomized(Hypernet.build(cfg("NoContext"), lm, 0))
        s = cl.get_concept("case:04").steering_prompt
        a = h.generate_vector(s, (8, 32, 33, 34, 2)).values
        b = h.generate_vector(s, (9, 40, 41, 42, 43, 2)).values
        np.testing.assert_array_equal(a, b)

    def test_incontext_depends_on_x(self, lm):
        s = cl.get_concept("case:04").steering_prompt
        for seed in range(3):
            h = randomized(Hypernet.build(cfg("InContext"), lm, seed), seed)
            a = h.generate_vector(s, (8, 32, 33, 34, 2)).values
            b = h.generate_vector(s, (9, 40, 41, 42, 43, 2)).values
            assert not np.array_equal(a, b)

    def test_required_inputs(self, lm):
        s = [16, 96]
        with pytest.raises(TypeError):
            Hypernet.build(cfg("InContext"), lm, 0).generate_vector(s)
        with pytest.raises(TypeError):
            Hypernet.build(cfg(), lm, 0).generate_vector(s, (8, 32, 2))

    def test_single_row_context(self, lm):
        h = randomized(Hypernet.build(cfg(), lm, 0))
        acts = lm.capture_residual([8], 1).acts
        maps = h.attention_maps([16, 96], [8], acts)
        for m in maps:
            assert m["cross"].shape == (2, 2, 1)
            np.testing.assert_allclose(m["cross"], 1.0)

    def test_pretrained_init_copies_base(self, lm):
        h = Hypernet.build(cfg(), lm, 0)
        np.testing.assert_array_equal(h.params["tok_emb"].data, lm.params["tok_emb"].data)
        np.testing.assert_array_equal(h.params["blocks.1.attn.w_qkv"].data, lm.params["blocks.1.attn.w_qkv"].data)

    def test_batch_matches_single(self, lm, data):
        h = randomized(Hypernet.build(cfg(), lm, 0))
        tasks = data.eval
        cache = ContextCache(lm, 1)
        with no_grad():
            batch = h.vectors(h.make_inputs([(t.s, t.x) for t in tasks], lm, 1, cache)).data
        for i, t in enumerate(tasks):
            single = h.generate_vector(t.s, t.x, cache.get(t.x)).values
            np.testing.assert_allclose(batch[i], single, atol=1e-5)

    def test_state_roundtrip(self, lm):
        h = randomized(Hypernet.build(cfg(), lm, 0))
        h2 = Hypernet.from_state_dict(h.config, h.state_dict())
        assert h2.checksum() == h.checksum()


class TestLosses:
    def test_label_mask(self, data):
        toks, mask = label_batch(data.train[:3])
        for i, t in enumerate(data.train[:3]):
            idx = np.flatnonzero(mask[i])
            assert [toks[i, p + 1] for p in idx] == list(t.y_label) + [cl.EOS]

    def test_reconstruction_identities(self):
        t = Tensor(np.array([[0.6, 0.8, 0.0]]))
        assert reconstruction_loss(Tensor(t.data.copy()), t).item() == pytest.approx(0.0, abs=1e-12)
        assert reconstruction_loss(Tensor(-t.data), t).item() == pytest.approx(6.0)

    def test_zero_head_loss_is_unsteered(self, lm, data):
        h = Hypernet.build(cfg(), lm, 0)
        toks, mask = label_batch(data.train)
        with no_grad():
            ref = steering_loss(lm, np.zeros((len(data.train), D), np.float32), toks, mask, 1).item()
            logits = lm.forward(toks[:, :-1])
        from steernet.numerics import ops
        plain = ops.cross_entropy(logits, toks[:, 1:], mask).item()
        assert ref == plain
        assert eval_loss(h, lm, data.train, 1) == pytest.approx(plain, rel=1e-5)

    def test_gradient_reaches_hypernet(self, lm, data):
        h = randomized(Hypernet.build(cfg(), lm, 0))
        toks, mask = label_batch(data.train[:4])
        inp = h.make_inputs([(t.s, t.x) for t in data.train[:4]], lm, 1)
        loss = steering_loss(lm, h.vectors(inp), toks, mask, 1)
        loss.backward()
        assert any(np.abs(p.grad).sum() > 0 for p in h.parameters() if p.grad is not None)
        assert all(p.grad is None or not p.grad.any() for p in lm.parameters())

    def test_depth_lr(self):
        assert depth_lr(1e-3, 20) == pytest.approx(1e-3)
        assert depth_lr(1e-3, 5) == pytest.approx(2e-3)
        with pytest.raises(ConfigError):
            depth_lr(1e-3, 0)


class TestTraining:
    @pytest.mark.slow
    def test_overfit_single_example(self, trained_base, data):
        one = data.train[:1]
        c = HypernetConfig(variant="NoContext", n_blocks=2, d_model=64, d_ff=256)
        tc = HyperTrainConfig(steps=500, batch_size=1, lr=1e-3, log_every=0)
        _, res = train_e2e(one, trained_base, c, tc)
        assert res.losses[-1] < 0.05

    def test_base_untouched_and_trace(self, lm, data):
        before = lm.checksum()
        tc = HyperTrainConfig(steps=6, batch_size=4, log_every=0, eval_every=3)
        _, res = train_e2e(data.train, lm, cfg(), tc, eval_tasks=data.eval)
        assert lm.checksum() == before
        assert res.eval_steps == [0, 3, 6] and len(res.flops) == 6 and all(f > 0 for f in res.flops)

    def test_requires_frozen_base(self, data):
        live = TinyLM.init(LmConfig(d_model=D, n_layers=2, n_heads=4, d_ff=64, max_seq_len=48), seed=2)
        with pytest.raises(ConfigError):
            train_e2e(data.train, live, cfg(), HyperTrainConfig(steps=1))

    def test_empty_dataset(self, lm):
        with pytest.raises(DataError):
            train_e2e([], lm, cfg(), HyperTrainConfig(steps=1))

    def test_nan_aborts_with_checkpoint(self, lm, data):
        h = Hypernet.build(cfg("NoContext"), lm, 0)
        h.params["head.b2"].data[:] = np.nan
        with pytest.raises(TrainingError) as err:
            train_e2e(data.train, lm, h, HyperTrainConfig(steps=3, log_every=0))
        assert err.value.checkpoint is not None and err.value.step == 0

    def test_deterministic(self, lm, data):
        tc = HyperTrainConfig(steps=5, batch_size=4, log_every=0)
        a, ra = train_e2e(data.train, lm, cfg(), tc)
        b, rb = train_e2e(data.train, lm, cfg(), tc)
        assert a.checksum() == b.checksum() and ra.losses == rb.losses

    def test_reconstruction(self, lm):
        rng = np.random.default_rng(0)
        ids = ["mark:00", "wrap:01", "tag:02"]
        pairs = [(cl.get_concept(c).steering_prompt, rng.normal(0, 0.3, D)) for c in ids]
        _, res, cos = train_reconstruction(pairs, cfg("NoContext"), HyperTrainConfig(steps=300, lr=3e-3, log_every=0), lm)
        assert res.losses[-1] < res.losses[0] and cos > 0.9

    def test_reconstruction_rejects_zero_target(self, lm):
        with pytest.raises(DataError):
            train_reconstruction([([16, 96], np.zeros(D))], cfg("NoContext"), HyperTrainConfig(steps=1), lm)

    def test_reconstruction_needs_nocontext(self, lm):
        with pytest.raises(ConfigError):
            train_reconstruction([([16, 96], np.ones(D))], cfg("InContext"), HyperTrainConfig(steps=1), lm)
