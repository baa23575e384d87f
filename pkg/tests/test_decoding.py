import math
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import tiny_config
from s2ut_lab.decoding import (
    DecodeRecord,
    Hypothesis,
    beam_search,
    ctc_greedy_collapse,
    decode_corpus,
    greedy_decode,
    read_decode_dump,
    write_decode_dump,
)
from s2ut_lab.model import Model


class FakeModel:
    """Fixed per-prefix log-prob tables; vocab layout [t0 t1 t2 bos eos pad]."""

    def __init__(self, tables):
        self.cfg = SimpleNamespace(unit_vocab=6, unit_bos=3, unit_eos=4, unit_pad=5)
        self.tables = {k: np.log(np.asarray(v)) for k, v in tables.items()}

    def prefix_logprobs(self, enc, prefixes):
        if prefixes and np.isscalar(prefixes[0]):
            prefixes = [prefixes]
        return np.stack([self.tables[tuple(p)] for p in prefixes])

    def ctc_frame_labels(self, enc, ids):
        return np.zeros(len(ids), dtype=np.int64)


def tree_model():
    # greedy takes t0 then eos (p = .6 * .3); the better path is t1 then eos (.399 * .9)
    return FakeModel({
        (3,): [0.6, 0.399, 0.0002, 0.0002, 0.0004, 0.0002],
        (3, 0): [0.2, 0.25, 0.2496, 0.0002, 0.3, 0.0002],
        (3, 1): [0.04, 0.03, 0.0296, 0.0002, 0.9, 0.0002],
        (3, 2): [0.3, 0.3, 0.2995, 0.0002, 0.1, 0.0003],
    })


class TestGreedy:
    def test_eos_favoring_model_stops_immediately(self):
        model = FakeModel({(3,): [0.01, 0.01, 0.01, 0.001, 0.968, 0.001]})
        trace = greedy_decode(model, None, max_len=5)
        assert trace.hypothesis.tokens == [4]
        assert trace.hypothesis.finished and not trace.truncated

    def test_follows_argmax_path(self):
        trace = greedy_decode(tree_model(), None, max_len=4)
        assert trace.hypothesis.tokens == [0, 4]
        assert trace.hypothesis.logprob == pytest.approx(math.log(0.6) + math.log(0.3))

    def test_captures_one_distribution_and_frame_per_step(self):
        trace = greedy_decode(tree_model(), None, max_len=4)
        assert trace.distributions.shape == (2, 6)
        assert len(trace.frame_labels) == 2
        np.testing.assert_allclose(trace.distributions.sum(axis=-1), 1.0, atol=1e-9)

    def test_truncation_flagged(self):
        model = FakeModel({
            (3,): [0.9, 0.02, 0.02, 0.02, 0.02, 0.02],
            (3, 0): [0.9, 0.02, 0.02, 0.02, 0.02, 0.02],
            (3, 0, 0): [0.9, 0.02, 0.02, 0.02, 0.02, 0.02],
        })
        trace = greedy_decode(model, None, max_len=2)
        assert trace.truncated and not trace.hypothesis.finished
        assert trace.hypothesis.tokens == [0, 0]


class TestBeam:
    def test_beam1_equals_greedy_on_fake(self):
        greedy = greedy_decode(tree_model(), None, max_len=4).hypothesis
        beam = beam_search(tree_model(), None, beam=1, max_len=4)
        assert beam.tokens == greedy.tokens
        assert beam.logprob == pytest.approx(greedy.logprob)

    def test_beam2_beats_greedy_on_counterexample(self):
        greedy = greedy_decode(tree_model(), None, max_len=4).hypothesis
        beam = beam_search(tree_model(), None, beam=2, max_len=4)
        assert beam.tokens == [1, 4]
        assert beam.logprob > greedy.logprob
        assert beam.logprob == pytest.approx(math.log(0.399) + math.log(0.9))

    def test_beam1_equals_greedy_on_real_model(self, rng, tiny_model):
        for i in range(4):
            enc = tiny_model.encode(rng.normal(size=(3, tiny_model.cfg.feat_dim)))
            greedy = greedy_decode(tiny_model, enc, max_len=6).hypothesis
            beam = beam_search(tiny_model, enc, beam=1, max_len=6)
            assert beam.tokens == greedy.tokens, f"sample {i}"

    def test_finished_iff_ends_with_eos(self, rng, tiny_model):
        enc = tiny_model.encode(rng.normal(size=(2, tiny_model.cfg.feat_dim)))
        hyp = beam_search(tiny_model, enc, beam=3, max_len=5)
        assert hyp.finished == (hyp.tokens[-1] == tiny_model.cfg.unit_eos)
        assert hyp.logprob <= 0.0

    def test_never_emits_reserved_ids(self, rng, tiny_model):
        enc = tiny_model.encode(rng.normal(size=(2, tiny_model.cfg.feat_dim)))
        for beam in (1, 3):
            hyp = beam_search(tiny_model, enc, beam=beam, max_len=6)
            assert tiny_model.cfg.unit_bos not in hyp.tokens
            assert tiny_model.cfg.unit_pad not in hyp.tokens

    def test_deterministic(self, rng, tiny_model):
        enc = tiny_model.encode(rng.normal(size=(2, tiny_model.cfg.feat_dim)))
        a = beam_search(tiny_model, enc, beam=4, max_len=6)
        b = beam_search(tiny_model, enc, beam=4, max_len=6)
        assert a.tokens == b.tokens and a.logprob == b.logprob

    def test_invalid_beam_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            beam_search(tiny_model, None, beam=0, max_len=3)

    def test_scores_monotone_along_beam_chain(self, rng, tiny_model):
        for _ in range(4):
            enc = tiny_model.encode(rng.normal(size=(3, tiny_model.cfg.feat_dim)))
            scores = [beam_search(tiny_model, enc, b, max_len=6).logprob for b in (1, 2, 5, 10)]
            for narrow, wide in zip(scores, scores[1:]):
                assert wide >= narrow - 1e-12


class TestCollapse:
    def test_paper_layout(self):
        assert ctc_greedy_collapse([1, 0, 0, 0, 2, 0, 0, 0]) == [1, 2]

    def test_all_blanks_empty(self):
        assert ctc_greedy_collapse([0, 0, 0, 0]) == []

    def test_repeat_across_blank(self):
        assert ctc_greedy_collapse([1, 1, 0, 1]) == [1, 1]

    def test_idempotent_through_refold(self):
        collapsed = ctc_greedy_collapse([1, 1, 0, 2, 2, 0, 0, 3])
        assert ctc_greedy_collapse(collapsed) == collapsed


class TestDumps:
    def test_round_trip(self, tmp_path):
        records = [
            DecodeRecord(id="t-0", tokens=[1, 2, 4], logprob=-2.5, finished=True,
                         frame_labels=[0, 3, 0], step_entropies=[0.5, 0.25, 0.125]),
            DecodeRecord(id="t-1", tokens=[2], logprob=-0.5, finished=False,
                         frame_labels=[1], step_entropies=[1.5],
                         distributions=np.array([[0.25, 0.75]])),
        ]
        path = tmp_path / "dump.jsonl"
        write_decode_dump(path, records)
        loaded = read_decode_dump(path)
        assert [r.id for r in loaded] == ["t-0", "t-1"]
        assert loaded[0].tokens == [1, 2, 4]
        assert loaded[1].distributions.shape == (1, 2)

    def test_missing_field_reported_with_line(self, tmp_path):
        path = tmp_path / "dump.jsonl"
        path.write_text('{"id": "x", "tokens": [1]}\n')
        with pytest.raises(ValueError, match="dump.jsonl:1.*logprob"):
            read_decode_dump(path)

    def test_decode_corpus_modes(self, rng, tiny_model):
        samples = [
            SimpleNamespace(id=f"s-{i}", src_feats=rng.normal(size=(3, tiny_model.cfg.feat_dim)))
            for i in range(2)
        ]
        greedy = decode_corpus(tiny_model, samples, beam=1, max_len=5)
        beamed = decode_corpus(tiny_model, samples, beam=3, max_len=5)
        assert all(r.frame_labels for r in greedy)
        assert all(not r.frame_labels for r in beamed)
        assert [r.id for r in greedy] == ["s-0", "s-1"]
