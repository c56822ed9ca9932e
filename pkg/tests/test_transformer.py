"""Attention stack tests: head math, masking, causality, composition oracles."""

import numpy as np
import pytest

from signscribe import autodiff as ad
from signscribe import transformer as tf
from signscribe.autodiff import Graph, Tensor
from signscribe.errors import ConfigError, ContractError

from conftest import assert_grad_close, finite_difference_grad

D, H, DFF = 8, 2, 16


def make_attn(seed=0, d=D, heads=H):
    return tf.AttentionParams(d, heads, np.random.default_rng(seed))


# --- numpy reference implementations, kept deliberately naive -----------------


def ref_layer_norm(x, gain, bias, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def ref_mha(q_in, kv_in, mask, attn):
    """Per-head loop over explicit column slices."""
    dh = attn.d // attn.n_heads
    q = q_in @ attn.wq.data + attn.bq.data
    k = kv_in @ attn.wk.data + attn.bk.data
    v = kv_in @ attn.wv.data + attn.bv.data
    heads = []
    for h in range(attn.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        logits = q[:, cols] @ k[:, cols].T / np.sqrt(dh)
        if mask is not None:
            logits = np.where(mask, logits, -np.inf)
        w = np.exp(logits - logits.max(axis=-1, keepdims=True))
        w = w / w.sum(axis=-1, keepdims=True)
        heads.append(w @ v[:, cols])
    return np.concatenate(heads, axis=-1) @ attn.wo.data + attn.bo.data


def ref_encoder_layer(x, mask, block):
    a = ref_mha(x, x, mask, block.attn)
    x = ref_layer_norm(x + a, block.norm1.gain.data, block.norm1.bias.data)
    f = np.maximum(x @ block.ffn.w1.data + block.ffn.b1.data, 0.0)
    f = f @ block.ffn.w2.data + block.ffn.b2.data
    return ref_layer_norm(x + f, block.norm2.gain.data, block.norm2.bias.data)


def ref_decoder_layer(x, z, causal, src_mask, block):
    a = ref_mha(x, x, causal, block.self_attn)
    x = ref_layer_norm(x + a, block.norm1.gain.data, block.norm1.bias.data)
    c = ref_mha(x, z, src_mask, block.cross_attn)
    x = ref_layer_norm(x + c, block.norm2.gain.data, block.norm2.bias.data)
    f = np.maximum(x @ block.ffn.w1.data + block.ffn.b1.data, 0.0)
    f = f @ block.ffn.w2.data + block.ffn.b2.data
    return ref_layer_norm(x + f, block.norm3.gain.data, block.norm3.bias.data)


class TestMultiHeadAttention:
    def test_single_position_passes_value_through(self):
        attn = make_attn(1)
        x = Tensor(np.random.default_rng(2).normal(size=(1, D)))
        out = tf.multi_head_attention(x, x, None, attn).data
        v = x.data @ attn.wv.data + attn.bv.data
        expect = v @ attn.wo.data + attn.bo.data
        assert np.array_equal(out, expect)

    def test_identical_keys_split_weight_evenly(self):
        # 0.5/0.5 over two identical rows reduces to the single-key output.
        attn = make_attn(3)
        rng = np.random.default_rng(4)
        row = rng.normal(size=(1, D))
        q = Tensor(rng.normal(size=(2, D)))
        doubled = tf.multi_head_attention(q, Tensor(np.vstack([row, row])), None, attn).data
        single = tf.multi_head_attention(q, Tensor(row), None, attn).data
        assert doubled == pytest.approx(single, abs=1e-12)

    def test_matches_per_head_reference(self):
        attn = make_attn(5)
        rng = np.random.default_rng(6)
        q = rng.normal(size=(3, D))
        kv = rng.normal(size=(4, D))
        mask = np.array(
            [[1, 1, 0, 1], [1, 1, 1, 1], [0, 1, 1, 0]], dtype=bool
        )
        out = tf.multi_head_attention(Tensor(q), Tensor(kv), mask, attn).data
        assert out == pytest.approx(ref_mha(q, kv, mask, attn), abs=1e-12)

    def test_batched_matches_per_sample(self):
        attn = make_attn(7)
        rng = np.random.default_rng(8)
        xs = rng.normal(size=(3, 4, D))
        mask = rng.random((3, 4, 4)) < 0.7
        mask[..., 0] = True  # keep every query row satisfiable
        out = tf.multi_head_attention(Tensor(xs), Tensor(xs), mask, attn).data
        for b in range(3):
            assert out[b] == pytest.approx(ref_mha(xs[b], xs[b], mask[b], attn), abs=1e-12)

    def test_fully_masked_query_rejected(self):
        attn = make_attn(9)
        x = Tensor(np.zeros((2, D)))
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(ContractError):
            tf.multi_head_attention(x, x, mask, attn)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ConfigError):
            tf.AttentionParams(6, 4, np.random.default_rng(0))

    def test_gradients_flow_through_attention(self):
        attn = make_attn(10, d=4, heads=2)
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 4))
        mask = np.tril(np.ones((3, 3), dtype=bool))

        def f(w):
            saved = attn.wq.data
            attn.wq.data = w
            out = ref_mha(x, x, mask, attn)
            attn.wq.data = saved
            return float((out ** 2).sum())

        with Graph() as g:
            xt = Tensor(x, requires_grad=True)
            out = tf.multi_head_attention(xt, xt, mask, attn)
            ad.backward(g, ad.tensor_sum(out * out))
        assert_grad_close(attn.wq.grad, finite_difference_grad(f, attn.wq.data))

        def fx(v):
            return float((ref_mha(v, v, mask, attn) ** 2).sum())

        assert_grad_close(xt.grad, finite_difference_grad(fx, x))


class TestEncoder:
    def make_stack(self, n_layers=2, n_gloss=5, seed=20):
        return tf.EncoderStack(n_layers, D, H, DFF, n_gloss, np.random.default_rng(seed))

    def test_single_frame_is_finite(self):
        stack = self.make_stack()
        z = tf.run_encoder(Tensor(np.random.default_rng(21).normal(size=(1, D))), None, stack)
        assert z.shape == (1, D)
        assert np.all(np.isfinite(z.data))

    def test_preserves_length(self):
        stack = self.make_stack()
        for t in (1, 2, 7):
            z = tf.run_encoder(Tensor(np.zeros((t, D))), None, stack)
            assert z.shape == (t, D)

    def test_matches_layer_composition(self):
        # Two-layer stack equals hand-composing the per-layer reference twice.
        stack = self.make_stack(n_layers=2, seed=22)
        x = np.random.default_rng(23).normal(size=(3, D))
        z = tf.run_encoder(Tensor(x), None, stack).data
        h = ref_encoder_layer(x, None, stack.blocks[0])
        h = ref_encoder_layer(h, None, stack.blocks[1])
        expect = ref_layer_norm(h, stack.final_norm.gain.data, stack.final_norm.bias.data)
        assert z == pytest.approx(expect, abs=1e-12)

    def test_padding_content_cannot_leak(self):
        # Same padded length, wildly different padding content: bitwise equal.
        stack = self.make_stack(seed=24)
        rng = np.random.default_rng(25)
        real = rng.normal(size=(3, D))
        mask = np.array([1, 1, 1, 0, 0], dtype=bool)
        a = np.vstack([real, np.zeros((2, D))])
        b = np.vstack([real, 1e6 * np.ones((2, D))])
        za = tf.run_encoder(Tensor(a), mask, stack).data
        zb = tf.run_encoder(Tensor(b), mask, stack).data
        assert np.array_equal(za[:3], zb[:3])

    def test_batched_padding_isolation(self):
        stack = self.make_stack(seed=26)
        rng = np.random.default_rng(27)
        x = rng.normal(size=(2, 4, D))
        mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1]], dtype=bool)
        y = x.copy()
        y[0, 2:] = -777.0
        za = tf.run_encoder(Tensor(x), mask, stack).data
        zb = tf.run_encoder(Tensor(y), mask, stack).data
        assert np.array_equal(za[0, :2], zb[0, :2])
        assert np.array_equal(za[1], zb[1])

    def test_eval_determinism(self):
        stack = self.make_stack(seed=28)
        x = Tensor(np.random.default_rng(29).normal(size=(4, D)))
        assert np.array_equal(
            tf.run_encoder(x, None, stack).data, tf.run_encoder(x, None, stack).data
        )

    def test_all_padding_rejected(self):
        stack = self.make_stack()
        with pytest.raises(ContractError):
            tf.run_encoder(Tensor(np.zeros((2, D))), np.zeros(2, dtype=bool), stack)

    def test_zero_layers_rejected(self):
        with pytest.raises(ConfigError):
            tf.EncoderStack(0, D, H, DFF, 5, np.random.default_rng(0))


class TestGlossLogits:
    def test_zero_projection_gives_zero_logits(self):
        stack = tf.EncoderStack(1, D, H, DFF, 4, np.random.default_rng(30))
        stack.gloss_w = Tensor(np.zeros((D, 4)))
        stack.gloss_b = Tensor(np.zeros(4))
        out = tf.gloss_logits(Tensor(np.random.default_rng(31).normal(size=(3, D))), stack)
        assert np.all(out.data == 0.0)

    def test_identity_projection_copies_rows(self):
        stack = tf.EncoderStack(1, D, H, DFF, D, np.random.default_rng(32))
        stack.gloss_w = Tensor(np.eye(D))
        stack.gloss_b = Tensor(np.zeros(D))
        z = np.random.default_rng(33).normal(size=(2, D))
        assert np.array_equal(tf.gloss_logits(Tensor(z), stack).data, z)

    def test_matmul_oracle(self):
        stack = tf.EncoderStack(1, D, H, DFF, 6, np.random.default_rng(34))
        z = np.random.default_rng(35).normal(size=(5, D))
        expect = z @ stack.gloss_w.data + stack.gloss_b.data
        assert tf.gloss_logits(Tensor(z), stack).data == pytest.approx(expect, abs=1e-14)


class TestDecoder:
    def make_stack(self, n_layers=1, n_words=7, seed=40):
        return tf.DecoderStack(n_layers, D, H, DFF, n_words, np.random.default_rng(seed))

    def encode(self, t=3, seed=41):
        rng = np.random.default_rng(seed)
        return Tensor(rng.normal(size=(t, D)))

    def test_bos_only_step_is_finite(self):
        stack = self.make_stack()
        logits = tf.run_decoder(Tensor(np.zeros((1, D))), self.encode(), None, stack)
        assert logits.shape == (1, 7)
        assert np.all(np.isfinite(logits.data))

    def test_preserves_target_length(self):
        stack = self.make_stack()
        for u in (1, 2, 5):
            logits = tf.run_decoder(Tensor(np.zeros((u, D))), self.encode(), None, stack)
            assert logits.shape == (u, 7)

    def test_future_positions_cannot_leak(self):
        # Bitwise causality: rows <= u never see edits at rows > u.
        stack = self.make_stack(n_layers=2, seed=42)
        rng = np.random.default_rng(43)
        z = self.encode(seed=44)
        m = rng.normal(size=(4, D))
        for u in range(3):
            other = m.copy()
            other[u + 1 :] = rng.normal(size=(3 - u, D)) * 50
            la = tf.run_decoder(Tensor(m), z, None, stack).data
            lb = tf.run_decoder(Tensor(other), z, None, stack).data
            assert np.array_equal(la[: u + 1], lb[: u + 1])

    def test_matches_loop_reference(self):
        stack = self.make_stack(n_layers=2, seed=45)
        rng = np.random.default_rng(46)
        m = rng.normal(size=(2, D))
        z = rng.normal(size=(2, D))
        src_mask = np.array([True, True])
        out = tf.run_decoder(Tensor(m), Tensor(z), src_mask, stack).data

        causal = np.tril(np.ones((2, 2), dtype=bool))
        h = ref_decoder_layer(m, z, causal, src_mask[None, :], stack.blocks[0])
        h = ref_decoder_layer(h, z, causal, src_mask[None, :], stack.blocks[1])
        h = ref_layer_norm(h, stack.final_norm.gain.data, stack.final_norm.bias.data)
        expect = h @ stack.word_w.data + stack.word_b.data
        assert out == pytest.approx(expect, abs=1e-12)

    def test_source_padding_isolated_from_decoder(self):
        stack = self.make_stack(seed=47)
        rng = np.random.default_rng(48)
        m = rng.normal(size=(3, D))
        z = rng.normal(size=(4, D))
        z_dirty = z.copy()
        z_dirty[2:] = 1e5
        src_mask = np.array([1, 1, 0, 0], dtype=bool)
        la = tf.run_decoder(Tensor(m), Tensor(z), src_mask, stack).data
        lb = tf.run_decoder(Tensor(m), Tensor(z_dirty), src_mask, stack).data
        assert np.array_equal(la, lb)

    def test_batched_matches_per_sample(self):
        stack = self.make_stack(n_layers=1, seed=49)
        rng = np.random.default_rng(50)
        m = rng.normal(size=(2, 3, D))
        z = rng.normal(size=(2, 4, D))
        src_mask = np.array([[1, 1, 1, 0], [1, 1, 1, 1]], dtype=bool)
        out = tf.run_decoder(Tensor(m), Tensor(z), src_mask, stack).data
        for b in range(2):
            single = tf.run_decoder(
                Tensor(m[b]), Tensor(z[b]), src_mask[b], stack
            ).data
            assert out[b] == pytest.approx(single, abs=1e-12)

    def test_gradients_reach_all_parameter_groups(self):
        # One backward pass touches every decoder parameter (no dead wiring).
        stack = self.make_stack(n_layers=1, seed=51)
        enc = tf.EncoderStack(1, D, H, DFF, 5, np.random.default_rng(52))
        rng = np.random.default_rng(53)
        frames = Tensor(rng.normal(size=(3, D)), requires_grad=True)
        m = Tensor(rng.normal(size=(2, D)), requires_grad=True)
        with Graph() as g:
            z = tf.run_encoder(frames, None, enc)
            logits = tf.run_decoder(m, z, None, stack)
            ad.backward(g, ad.tensor_sum(logits * logits))
        for name, p in stack.named_parameters():
            assert p.grad is not None, name
            assert np.all(np.isfinite(p.grad)), name
        for name, p in enc.named_parameters():
            if name.startswith("gloss_proj"):
                continue  # not on this loss path
            assert p.grad is not None, name

    def test_end_to_end_gradient_matches_finite_differences(self):
        d, heads, dff = 4, 2, 6
        stack = tf.DecoderStack(1, d, heads, dff, 3, np.random.default_rng(54))
        enc = tf.EncoderStack(1, d, heads, dff, 3, np.random.default_rng(55))
        rng = np.random.default_rng(56)
        frames = rng.normal(size=(3, d))
        m = rng.normal(size=(2, d))

        def f(v):
            ft = Tensor(v)
            z = tf.run_encoder(ft, None, enc)
            logits = tf.run_decoder(Tensor(m), z, None, stack)
            return float((logits.data ** 2).sum())

        with Graph() as g:
            ft = Tensor(frames, requires_grad=True)
            z = tf.run_encoder(ft, None, enc)
            logits = tf.run_decoder(Tensor(m), z, None, stack)
            ad.backward(g, ad.tensor_sum(logits * logits))
        assert_grad_close(ft.grad, finite_difference_grad(f, frames))


class TestDropoutMode:
    def test_train_mode_dropout_changes_with_rng(self):
        stack = tf.EncoderStack(1, D, H, DFF, 4, np.random.default_rng(60))
        x = Tensor(np.random.default_rng(61).normal(size=(4, D)))
        a = tf.run_encoder(x, None, stack, train=True, rng=np.random.default_rng(1), dropout_rate=0.5).data
        b = tf.run_encoder(x, None, stack, train=True, rng=np.random.default_rng(2), dropout_rate=0.5).data
        c = tf.run_encoder(x, None, stack, train=True, rng=np.random.default_rng(1), dropout_rate=0.5).data
        assert not np.array_equal(a, b)
        assert np.array_equal(a, c)

    def test_eval_ignores_dropout_rate(self):
        stack = tf.EncoderStack(1, D, H, DFF, 4, np.random.default_rng(62))
        x = Tensor(np.random.default_rng(63).normal(size=(4, D)))
        a = tf.run_encoder(x, None, stack, dropout_rate=0.9).data
        b = tf.run_encoder(x, None, stack).data
        assert np.array_equal(a, b)


class TestParameterNaming:
    def test_names_are_unique_and_complete(self):
        enc = tf.EncoderStack(2, D, H, DFF, 5, np.random.default_rng(70))
        dec = tf.DecoderStack(2, D, H, DFF, 9, np.random.default_rng(71))
        enc_names = [n for n, _ in enc.named_parameters()]
        dec_names = [n for n, _ in dec.named_parameters()]
        assert len(enc_names) == len(set(enc_names))
        assert len(dec_names) == len(set(dec_names))
        # per encoder layer: 8 attention + 4 ffn + 4 norm; stack adds 2 norm + 2 proj
        assert len(enc_names) == 2 * (8 + 4 + 4) + 4
        assert len(dec_names) == 2 * (16 + 4 + 6) + 4
