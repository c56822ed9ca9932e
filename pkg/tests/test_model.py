"""Joint model tests: wiring, protocol isolation, decoding pathway, batching."""

import numpy as np
import pytest

from signscribe import autodiff as ad
from signscribe import data, decoding, model as jm
from signscribe.autodiff import Graph, Tensor
from signscribe.data import GLOSS_SPECIALS, TEXT_EOS, TEXT_SPECIALS, Sample, Vocabulary
from signscribe.errors import ConfigError, ContractError
from signscribe.losses import LossWeights, ctc_log_prob, translation_loss
from signscribe.model import JointModel, batch_losses


def tiny_model(seed=0, dropout=0.0, **overrides):
    kwargs = dict(
        d_in=5,
        d=8,
        n_heads=2,
        n_enc_layers=2,
        n_dec_layers=2,
        n_glosses=6,
        n_words=9,
        d_ff=16,
        dropout=dropout,
        seed=seed,
    )
    kwargs.update(overrides)
    return JointModel(**kwargs)


def tiny_batch(rng=None, b=2, d_in=5):
    rng = rng or np.random.default_rng(7)
    gloss = Vocabulary({"A", "B", "C", "D"}, GLOSS_SPECIALS)
    text = Vocabulary({"u", "v", "w", "x", "y"}, TEXT_SPECIALS)
    samples = [
        Sample("s0", rng.normal(size=(6, d_in)).astype(np.float32), ("A", "B"), ("u", "v", "w")),
        Sample("s1", rng.normal(size=(4, d_in)).astype(np.float32), ("C",), ("x",)),
    ][:b]
    return data.make_batch(samples, gloss, text), gloss, text


class TestWiring:
    def test_parameter_names(self):
        m = tiny_model()
        names = set(m.named_parameters())
        assert {"spatial.weight", "spatial.bias", "spatial.bn_gain", "spatial.bn_bias",
                "gloss_words.table", "words.table"} <= names
        assert "encoder.layers.0.attn.wq" in names
        assert "encoder.layers.1.norm2.gain" in names
        assert "encoder.gloss_proj.weight" in names
        assert "decoder.layers.1.cross_attn.wo" in names
        assert "decoder.word_proj.bias" in names
        # every name resolves to a distinct tensor
        tensors = list(m.named_parameters().values())
        assert len({id(t) for t in tensors}) == len(tensors)

    def test_buffers_are_running_stats(self):
        m = tiny_model()
        bufs = m.named_buffers()
        assert set(bufs) == {"spatial.bn_running_mean", "spatial.bn_running_var"}
        assert bufs["spatial.bn_running_var"].shape == (8,)

    def test_projection_widths_span_vocabularies(self):
        m = tiny_model()
        assert m.encoder.gloss_w.shape == (8, 6)
        assert m.decoder.word_w.shape == (8, 9)

    def test_dropout_range_checked(self):
        with pytest.raises(ConfigError):
            tiny_model(dropout=1.0)

    def test_same_seed_same_init(self):
        a = tiny_model(seed=3).named_parameters()
        b = tiny_model(seed=3).named_parameters()
        for name in a:
            assert np.array_equal(a[name].data, b[name].data), name

    def test_unknown_protocol(self):
        m = tiny_model()
        with pytest.raises(ConfigError):
            m.trainable_parameters("speech2text")


class TestTrainableSubsets:
    def test_sign2gloss_excludes_translation_stack(self):
        names = set(tiny_model().trainable_parameters("sign2gloss"))
        assert not any(n.startswith(("decoder.", "words.", "gloss_words.")) for n in names)
        assert "encoder.gloss_proj.weight" in names
        assert "spatial.weight" in names

    def test_sign2text_excludes_gloss_head(self):
        names = set(tiny_model().trainable_parameters("sign2text"))
        assert not any("gloss_proj" in n for n in names)
        assert not any(n.startswith("gloss_words.") for n in names)
        assert "decoder.word_proj.weight" in names
        assert "spatial.weight" in names

    def test_joint_excludes_only_gloss_input_table(self):
        m = tiny_model()
        names = set(m.trainable_parameters("sign2gloss+text"))
        assert names == set(m.named_parameters()) - {"gloss_words.table"}

    def test_gloss2text_excludes_frame_front_end(self):
        names = set(tiny_model().trainable_parameters("gloss2text"))
        assert not any(n.startswith("spatial.") for n in names)
        assert not any("gloss_proj" in n for n in names)
        assert "gloss_words.table" in names


class TestForwardShapes:
    def test_encode_frames_batched(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        z = m.encode_frames(batch.features, batch.src_mask)
        assert z.shape == (2, 6, 8)
        assert np.all(np.isfinite(z.data))

    def test_gloss_log_probs_normalized(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        z = m.encode_frames(batch.features, batch.src_mask)
        log_p = m.frame_gloss_log_probs(z)
        assert log_p.shape == (2, 6, 6)
        total = np.exp(log_p.data).sum(axis=-1)
        assert np.allclose(total, 1.0, atol=1e-12)

    def test_word_logits_shape(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        z = m.encode_frames(batch.features, batch.src_mask)
        logits = m.word_logits(batch.text_in, z, batch.src_mask)
        assert logits.shape == (2, 4, 9)

    def test_encode_glosses(self):
        m = tiny_model()
        ids = np.array([[2, 3, 4], [5, 2, 1]])
        mask = np.array([[True, True, True], [True, True, False]])
        z = m.encode_glosses(ids, mask)
        assert z.shape == (2, 3, 8)

    def test_single_sequence_encode(self):
        m = tiny_model()
        frames = np.random.default_rng(0).normal(size=(5, 5))
        z = m.encode_frames(frames, np.ones(5, dtype=bool))
        assert z.shape == (5, 8)

    def test_train_mode_without_rng_rejected(self):
        m = tiny_model(dropout=0.2)
        batch, _, _ = tiny_batch()
        with pytest.raises(ContractError):
            m.encode_frames(batch.features, batch.src_mask, train=True)


class TestBatchConsistency:
    def test_batched_encode_matches_per_sample(self):
        # Eval mode: each sample encoded alone must match its batch row on
        # real frames (padded rows share no keys with real ones).
        m = tiny_model()
        batch, _, _ = tiny_batch()
        z = m.encode_frames(batch.features, batch.src_mask)
        for i, t in enumerate(batch.frame_counts):
            alone = m.encode_frames(batch.features[i, :t], np.ones(t, dtype=bool))
            assert np.allclose(z.data[i, :t], alone.data, atol=1e-10), i

    def test_pad_feature_content_never_leaks(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        z0 = m.encode_frames(batch.features, batch.src_mask)
        poisoned = batch.features.copy()
        poisoned[1, 4:] = 1e6
        z1 = m.encode_frames(poisoned, batch.src_mask)
        assert np.array_equal(z0.data[1, :4], z1.data[1, :4])
        assert np.array_equal(z0.data[0], z1.data[0])

    def test_batch_loss_equals_per_sample_average(self):
        # The padded-batch loss must equal hand-combined unpadded losses.
        m = tiny_model()
        batch, gloss, text = tiny_batch()
        weights = LossWeights(lambda_r=5.0, lambda_t=1.0)
        total, loss_r, loss_t, skipped = batch_losses(
            m, batch, weights, "sign2gloss+text"
        )
        assert skipped == []

        per_r = []
        per_t_sums = []
        n_tokens = 0
        for i, t in enumerate(batch.frame_counts):
            z = m.encode_frames(batch.features[i, :t], np.ones(t, dtype=bool))
            log_p = m.frame_gloss_log_probs(z)
            target = tuple(int(g) for g in batch.gloss_ids[i, : batch.gloss_counts[i]])
            from signscribe.losses import CtcTarget

            per_r.append(-ctc_log_prob(log_p, CtcTarget(target)).data)
            u = int(batch.target_mask[i].sum())
            logits = m.word_logits(batch.text_in[i, :u], z, np.ones(t, dtype=bool))
            ref = batch.text_out[i, :u]
            per_t_sums.append(translation_loss(logits, ref).data * 1.0)
            n_tokens += u
        want_r = np.mean(per_r)
        want_t = np.sum(per_t_sums) / n_tokens
        assert np.isclose(loss_r.data, want_r, atol=1e-9)
        assert np.isclose(loss_t.data, want_t, atol=1e-9)
        assert np.isclose(total.data, 5.0 * want_r + 1.0 * want_t, atol=1e-9)


class TestProtocolIsolation:
    def run_backward(self, protocol, weights):
        m = tiny_model(dropout=0.0)
        batch, _, _ = tiny_batch()
        with Graph() as g:
            total, _, _, _ = batch_losses(m, batch, weights, protocol)
            ad.backward(g, total)
        return m

    @pytest.mark.parametrize(
        "protocol,weights,frozen",
        [
            ("sign2gloss", LossWeights(1.0, 0.0), ("decoder.", "words.", "gloss_words.")),
            ("sign2text", LossWeights(0.0, 1.0), ("encoder.gloss_proj.", "gloss_words.")),
            ("gloss2text", LossWeights(0.0, 1.0), ("spatial.", "encoder.gloss_proj.")),
        ],
    )
    def test_loss_never_reaches_frozen_parameters(self, protocol, weights, frozen):
        m = self.run_backward(protocol, weights)
        for name, p in m.named_parameters().items():
            if name.startswith(frozen):
                assert p.grad is None or not np.any(p.grad), name
            elif name in m.trainable_parameters(protocol):
                assert p.grad is not None and np.any(p.grad), name

    def test_joint_reaches_both_heads(self):
        m = self.run_backward("sign2gloss+text", LossWeights(5.0, 1.0))
        grads = {n: p.grad for n, p in m.named_parameters().items()}
        assert np.any(grads["encoder.gloss_proj.weight"])
        assert np.any(grads["decoder.word_proj.weight"])
        assert np.any(grads["spatial.weight"])
        assert grads["gloss_words.table"] is None


class TestDecodingPathway:
    def test_prefix_logits_match_teacher_forcing(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        t = batch.frame_counts[0]
        z = m.encode_frames(batch.features[0, :t], np.ones(t, dtype=bool))
        prefix = [5, 7]
        got = m.prefix_logits(z, np.ones(t, dtype=bool), prefix)
        full = m.word_logits(np.array([data.TEXT_BOS, 5, 7]), z, np.ones(t, dtype=bool))
        assert np.array_equal(got, full.data[-1])

    def test_prefix_logits_batch_matches_singles(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        z = m.encode_frames(batch.features, batch.src_mask)
        prefixes = [[4, 6], [8, 5]]
        got = m.prefix_logits_batch(z, batch.src_mask, [0, 1], prefixes)
        for row, (i, p) in enumerate(zip([0, 1], prefixes)):
            t = batch.frame_counts[i]
            alone = m.prefix_logits(
                Tensor(z.data[i]), batch.src_mask[i], p
            )
            assert np.allclose(got[row], alone, atol=1e-12)

    def test_mismatched_prefix_lengths_rejected(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        z = m.encode_frames(batch.features, batch.src_mask)
        with pytest.raises(ContractError):
            m.prefix_logits_batch(z, batch.src_mask, [0, 1], [[1], [1, 2]])

    def test_greedy_decode_runs_end_to_end(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        t = batch.frame_counts[0]
        z = m.encode_frames(batch.features[0, :t], np.ones(t, dtype=bool))
        hyp = decoding.ar_greedy(z, np.ones(t, dtype=bool), m, max_len=5)
        assert hyp.finished or len(hyp.tokens) == 5
        assert all(0 <= w < 9 for w in hyp.words())

    def test_beam_decode_runs_end_to_end(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        t = batch.frame_counts[1]
        z = m.encode_frames(batch.features[1, :t], np.ones(t, dtype=bool))
        cfg = decoding.DecodeConfig(beam_width=3, alpha=1.0, max_len=5)
        hyp = decoding.ar_beam_search(z, np.ones(t, dtype=bool), m, cfg)
        assert hyp.log_prob <= 0.0

    def test_batched_greedy_matches_sequential(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        z = m.encode_frames(batch.features, batch.src_mask)
        got = decoding.ar_greedy_batch(z, batch.src_mask, m, max_len=6)
        for i in range(2):
            t = batch.frame_counts[i]
            alone = decoding.ar_greedy(
                Tensor(z.data[i, :t]), batch.src_mask[i, :t], m, max_len=6
            )
            assert got[i].tokens == alone.tokens, i


class TestLossRouting:
    def test_sign2gloss_has_no_translation_term(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        total, loss_r, loss_t, _ = batch_losses(
            m, batch, LossWeights(1.0, 0.0), "sign2gloss"
        )
        assert loss_t is None
        assert np.isclose(total.data, loss_r.data)

    def test_sign2text_has_no_recognition_term(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        total, loss_r, loss_t, _ = batch_losses(
            m, batch, LossWeights(0.0, 1.0), "sign2text"
        )
        assert loss_r is None
        assert np.isclose(total.data, loss_t.data)

    def test_gloss2text_translates_from_gloss_tokens(self):
        m = tiny_model()
        batch, _, _ = tiny_batch()
        total, loss_r, loss_t, _ = batch_losses(
            m, batch, LossWeights(0.0, 1.0), "gloss2text"
        )
        assert loss_r is None and total is not None

    def test_infeasible_targets_reported(self):
        gloss = Vocabulary({"A", "B", "C", "D"}, GLOSS_SPECIALS)
        text = Vocabulary({"u"}, TEXT_SPECIALS)
        rng = np.random.default_rng(0)
        # 2 frames cannot carry 3 glosses; make_batch does not police this,
        # the loss layer skips and reports.
        samples = [
            Sample("bad", rng.normal(size=(2, 5)).astype(np.float32), ("A", "B", "C"), ("u",)),
            Sample("ok", rng.normal(size=(6, 5)).astype(np.float32), ("D",), ("u",)),
        ]
        batch = data.make_batch(samples, gloss, text)
        m = tiny_model()
        total, loss_r, _, skipped = batch_losses(
            m, batch, LossWeights(1.0, 1.0), "sign2gloss+text"
        )
        assert skipped == [0]
        assert np.isfinite(loss_r.data)

    def test_train_losses_are_finite_and_graph_backed(self):
        m = tiny_model(dropout=0.1)
        batch, _, _ = tiny_batch()
        rng = np.random.default_rng(5)
        with Graph() as g:
            total, _, _, _ = batch_losses(
                m, batch, LossWeights(5.0, 1.0), "sign2gloss+text",
                train=True, rng=rng,
            )
            assert np.isfinite(total.data)
            ad.backward(g, total)
        assert m.spatial.weight.grad is not None
