"""Corpus evaluation and decode-parameter sweep tests."""

import numpy as np
import pytest

from signscribe import data, evaluation
from signscribe.data import GLOSS_SPECIALS, TEXT_SPECIALS, Sample, Vocabulary
from signscribe.evaluation import (
    SWEEP_ALPHAS,
    SWEEP_WIDTHS,
    corpus_wer,
    evaluate_corpus,
    encode_split,
    decode_sentences,
    sweep_decode_parameters,
)
from signscribe.model import JointModel


class TestCorpusWer:
    def test_pooled_counts(self):
        # pair 1 perfect (N=3), pair 2 has one substitution (N=2):
        # corpus WER = 1/5 = 20%
        refs = [["a", "b", "c"], ["a", "b"]]
        hyps = [["a", "b", "c"], ["a", "x"]]
        report = corpus_wer(refs, hyps)
        assert report.ref_len == 5
        assert report.substitutions == 1
        assert np.isclose(report.wer, 20.0)

    def test_pooling_differs_from_averaging(self):
        # 1 error over N=1 plus 0 errors over N=9: pooled 10%, mean 50%
        refs = [["a"], list("bcdefghij")]
        hyps = [["x"], list("bcdefghij")]
        assert np.isclose(corpus_wer(refs, hyps).wer, 10.0)

    def test_accepts_strings(self):
        report = corpus_wer(["a b"], ["a b"])
        assert report.wer == 0.0


def small_setup(seed=3):
    rng = np.random.default_rng(seed)
    gloss = Vocabulary({"A", "B", "C"}, GLOSS_SPECIALS)
    text = Vocabulary({"u", "v", "w", "x"}, TEXT_SPECIALS)
    samples = [
        Sample(f"s{i}", rng.normal(size=(t, 4)).astype(np.float32),
               tuple(g), tuple(s))
        for i, (t, g, s) in enumerate([
            (7, ("A", "B"), ("u", "v")),
            (5, ("C",), ("w",)),
            (9, ("B", "C", "A"), ("x", "u", "w")),
        ])
    ]
    model = JointModel(
        d_in=4, d=8, n_heads=2, n_enc_layers=1, n_dec_layers=1,
        n_glosses=len(gloss), n_words=len(text), d_ff=16, dropout=0.0,
        seed=seed,
    )
    return model, samples, gloss, text


class TestEvaluateCorpus:
    def test_joint_reports_both_metrics(self):
        model, samples, gloss, text = small_setup()
        report = evaluate_corpus(model, samples, gloss, text, "sign2gloss+text")
        assert report.n_samples == 3
        assert 0.0 <= report.wer.wer
        assert 0.0 <= report.bleu.bleu4 <= 100.0

    def test_recognition_only_has_no_bleu(self):
        model, samples, gloss, text = small_setup()
        report = evaluate_corpus(model, samples, gloss, text, "sign2gloss")
        assert report.bleu is None
        assert report.wer is not None

    def test_gloss_input_protocol_has_no_wer(self):
        model, samples, gloss, text = small_setup()
        report = evaluate_corpus(model, samples, gloss, text, "gloss2text")
        assert report.wer is None
        assert report.bleu is not None

    def test_deterministic(self):
        model, samples, gloss, text = small_setup()
        a = evaluate_corpus(model, samples, gloss, text, "sign2gloss+text")
        b = evaluate_corpus(model, samples, gloss, text, "sign2gloss+text")
        assert a == b

    def test_precomputed_encodings_give_same_report(self):
        model, samples, gloss, text = small_setup()
        encoded = encode_split(model, samples, gloss, text, "sign2gloss+text")
        a = evaluate_corpus(model, samples, gloss, text, "sign2gloss+text",
                            encoded=encoded)
        b = evaluate_corpus(model, samples, gloss, text, "sign2gloss+text")
        assert a == b

    def test_beam_settings_recorded(self):
        model, samples, gloss, text = small_setup()
        report = evaluate_corpus(model, samples, gloss, text,
                                 "sign2gloss+text", beam_width=2, alpha=1.0)
        assert report.beam_width == 2
        assert report.alpha == 1.0

    def test_small_batches_match_one_batch(self):
        model, samples, gloss, text = small_setup()
        a = evaluate_corpus(model, samples, gloss, text, "sign2gloss+text",
                            batch_size=1)
        b = evaluate_corpus(model, samples, gloss, text, "sign2gloss+text",
                            batch_size=32)
        assert a.wer == b.wer
        assert a.bleu == b.bleu


class TestDecodedSentences:
    def test_no_reserved_tokens_in_output(self):
        model, samples, gloss, text = small_setup()
        encoded = encode_split(model, samples, gloss, text, "sign2gloss+text")
        for width in (0, 2):
            for sentence in decode_sentences(model, encoded, text, width, 0.0, 10):
                assert "<pad>" not in sentence
                assert "<bos>" not in sentence
                assert "<eos>" not in sentence

    def test_max_len_cap_respected(self):
        model, samples, gloss, text = small_setup()
        encoded = encode_split(model, samples, gloss, text, "sign2gloss+text")
        for sentence in decode_sentences(model, encoded, text, 0, 0.0, 2):
            assert len(sentence) <= 2


class TestSweep:
    def test_grid_shape_and_order(self):
        model, samples, gloss, text = small_setup()
        result = sweep_decode_parameters(
            model, samples, gloss, text, "sign2gloss+text",
            widths=(0, 1), alphas=(0.0, 1.0),
        )
        grid = [(e.beam_width, e.alpha) for e in result.entries]
        assert grid == [(0, 0.0), (0, 1.0), (1, 0.0), (1, 1.0)]

    def test_default_grid_is_11_by_5(self):
        assert len(SWEEP_WIDTHS) == 11
        assert len(SWEEP_ALPHAS) == 5

    def test_best_is_earliest_maximum(self):
        model, samples, gloss, text = small_setup()
        result = sweep_decode_parameters(
            model, samples, gloss, text, "sign2gloss+text",
            widths=(0, 1, 2), alphas=(0.0, 0.5),
        )
        top = max(e.bleu4 for e in result.entries)
        first = next(e for e in result.entries if e.bleu4 == top)
        assert (result.best_width, result.best_alpha) == (first.beam_width, first.alpha)

    def test_sweep_result_reproducible(self):
        model, samples, gloss, text = small_setup()
        kwargs = dict(widths=(0, 1), alphas=(0.0, 2.0))
        a = sweep_decode_parameters(model, samples, gloss, text,
                                    "sign2gloss+text", **kwargs)
        b = sweep_decode_parameters(model, samples, gloss, text,
                                    "sign2gloss+text", **kwargs)
        assert a == b
