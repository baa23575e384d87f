import numpy as np
import pytest

from conftest import make_batch, tiny_config
from s2ut_lab import autodiff as ad
from s2ut_lab.autodiff import Tensor, grad_check, sum_all
from s2ut_lab.model import (
    Model,
    ModelConfig,
    output_logits,
    read_array_container,
    write_array_container,
)


class TestConfig:
    def test_attach_layer_bounds(self):
        with pytest.raises(ValueError, match="attach_layer"):
            tiny_config(attach_layer=5)

    def test_heads_must_divide_dims(self):
        with pytest.raises(ValueError, match="divisible"):
            tiny_config(enc_dim=10, heads=4)

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="mtp_variant"):
            tiny_config(mtp_variant="mystery")

    def test_reserved_ids_default_to_vocab_tail(self):
        cfg = tiny_config()
        assert (cfg.unit_bos, cfg.unit_eos, cfg.unit_pad) == (8, 9, 10)
        assert cfg.text_blank == 0

    def test_digest_changes_with_config(self):
        assert tiny_config().digest() != tiny_config(n_future=5).digest()


class TestEncoder:
    def test_single_frame_shape(self, rng, tiny_model):
        feats = rng.normal(size=(1, tiny_model.cfg.feat_dim))
        enc = tiny_model.encode(feats)
        assert enc.h_enc.data[0].shape == (1, tiny_model.cfg.enc_dim)

    def test_deterministic(self, rng, tiny_model):
        feats = rng.normal(size=(4, tiny_model.cfg.feat_dim))
        a = tiny_model.encode(feats).h_enc.data
        b = tiny_model.encode(feats).h_enc.data
        assert (a == b).all()

    def test_position_sensitivity(self, rng, tiny_model):
        feats = rng.normal(size=(2, tiny_model.cfg.feat_dim))
        swapped = feats[::-1].copy()
        a = tiny_model.encode(feats).h_enc.data
        b = tiny_model.encode(swapped).h_enc.data
        assert not np.allclose(a[0, 0], b[0, 1])

    def test_feat_dim_mismatch(self, rng, tiny_model):
        with pytest.raises(ValueError, match="feature dim"):
            tiny_model.encode(rng.normal(size=(3, 7)))

    def test_tap_states_recorded(self, rng, tiny_model):
        enc = tiny_model.encode(rng.normal(size=(3, tiny_model.cfg.feat_dim)))
        assert set(enc.tap_states) == set(tiny_model.cfg.aux_enc_taps)


class TestDecoder:
    def make_enc(self, rng, model):
        return model.encode(rng.normal(size=(3, model.cfg.feat_dim)))

    def test_trace_length(self, rng, tiny_model):
        enc = self.make_enc(rng, tiny_model)
        ids = [tiny_model.cfg.unit_bos, 1, 2, 3]
        trace = tiny_model.decode_trace(enc, ids)
        assert len(trace.states) == tiny_model.cfg.dec_layers + 1

    def test_bos_only_trace(self, rng, tiny_model):
        enc = self.make_enc(rng, tiny_model)
        trace = tiny_model.decode_trace(enc, [tiny_model.cfg.unit_bos])
        for state in trace.states:
            assert state.data[0].shape == (1, tiny_model.cfg.dec_dim)

    def test_empty_target_rejected(self, rng, tiny_model):
        enc = self.make_enc(rng, tiny_model)
        with pytest.raises(ValueError, match="non-empty"):
            tiny_model.decode_trace(enc, np.zeros((1, 0), dtype=np.int64))

    def test_must_begin_with_bos(self, rng, tiny_model):
        enc = self.make_enc(rng, tiny_model)
        with pytest.raises(ValueError, match="bos"):
            tiny_model.decode_trace(enc, [1, 2])

    def test_causality_at_every_layer(self, rng, tiny_model):
        enc = self.make_enc(rng, tiny_model)
        bos = tiny_model.cfg.unit_bos
        ids_a = [bos, 1, 2, 3, 4]
        ids_b = [bos, 1, 6, 3, 4]  # differs at position 2
        ta = tiny_model.decode_trace(enc, ids_a)
        tb = tiny_model.decode_trace(enc, ids_b)
        for layer, (sa, sb) in enumerate(zip(ta.states, tb.states)):
            np.testing.assert_array_equal(
                sa.data[0, :2], sb.data[0, :2], err_msg=f"layer {layer} leaks forward"
            )
            if layer > 0:
                assert not np.allclose(sa.data[0, 2:], sb.data[0, 2:])


class TestOutputProjection:
    def test_zero_hidden_gives_uniform(self):
        h = Tensor(np.zeros((1, 3, 8)))
        w = Tensor(np.random.default_rng(0).normal(size=(8, 11)))
        probs = ad.softmax_row(output_logits(h, ad.mul(w, 0.0)))
        np.testing.assert_allclose(probs.data, 1.0 / 11, atol=1e-15)

    def test_shape(self, rng):
        h = Tensor(rng.normal(size=(2, 5, 8)))
        w = Tensor(rng.normal(size=(8, 11)))
        assert output_logits(h, w).shape == (2, 5, 11)

    def test_gradient(self, rng):
        h = Tensor(rng.uniform(-1, 1, (2, 8)), requires_grad=True)
        w = Tensor(rng.uniform(-1, 1, (8, 5)), requires_grad=True)
        proj = rng.normal(size=(2, 5))

        def f(ts):
            return sum_all(ad.mul(output_logits(ts[0], ts[1]), Tensor(proj)))

        assert grad_check(f, [h, w], eps=1e-3, tol=1e-6).passed


class TestParameterSets:
    @pytest.mark.parametrize("variant", ["parallel_linear", "deepseek_v3", "vocalnet", "s2ut"])
    def test_mtp_adds_params_only_under_mtp_namespace(self, variant):
        base = Model(tiny_config(), seed=3).named_params()
        extended = Model(tiny_config(mtp_variant=variant), seed=3).named_params()
        assert set(base) == {n for n in extended if not n.startswith("mtp.")}
        assert any(n.startswith("mtp.") for n in extended)

    def test_baseline_has_no_mtp_params(self):
        assert not any(n.startswith("mtp.") for n in Model(tiny_config(), seed=3).named_params())

    @pytest.mark.parametrize("variant", ["parallel_linear", "deepseek_v3", "vocalnet", "s2ut"])
    def test_inference_never_touches_mtp_params(self, rng, variant):
        model = Model(tiny_config(mtp_variant=variant), seed=5)
        feats = rng.normal(size=(3, model.cfg.feat_dim))
        enc = model.encode(feats)
        prefix = [model.cfg.unit_bos, 2, 4]
        before_lp = model.prefix_logprobs(enc, prefix)
        before_frames = model.ctc_frame_labels(enc, prefix)
        for name, t in model.named_params().items():
            if name.startswith("mtp."):
                t.data = rng.normal(size=t.data.shape)
        enc2 = model.encode(feats)
        np.testing.assert_array_equal(before_lp, model.prefix_logprobs(enc2, prefix))
        np.testing.assert_array_equal(before_frames, model.ctc_frame_labels(enc2, prefix))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        model = Model(tiny_config(mtp_variant="s2ut"), seed=9)
        path = tmp_path / "model.ckpt"
        extra = {"adam.m.decoder.emb": rng.normal(size=model.unit_emb.data.shape)}
        model.save_checkpoint(path, extra_arrays=extra, meta={"step": 17})
        snapshot = {n: t.data.copy() for n, t in model.named_params().items()}

        other = Model(tiny_config(mtp_variant="s2ut"), seed=1)
        header = other.load_checkpoint(path)
        assert header["meta"]["step"] == 17
        for name, t in other.named_params().items():
            assert (t.data == snapshot[name]).all(), name
        np.testing.assert_array_equal(
            header["extra_arrays"]["adam.m.decoder.emb"], extra["adam.m.decoder.emb"]
        )

    def test_config_digest_mismatch_rejected(self, tmp_path):
        model = Model(tiny_config(), seed=9)
        path = tmp_path / "model.ckpt"
        model.save_checkpoint(path)
        other = Model(tiny_config(n_future=5), seed=9)
        with pytest.raises(ValueError, match="digest"):
            other.load_checkpoint(path)

    def test_container_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            read_array_container(path)

    def test_container_round_trip(self, tmp_path, rng):
        arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(7,))}
        path = tmp_path / "c.bin"
        write_array_container(path, arrays, config_digest="x", meta={"k": 1})
        header, loaded = read_array_container(path)
        assert header["meta"] == {"k": 1}
        for name in arrays:
            np.testing.assert_array_equal(arrays[name], loaded[name])


class TestDecodeHelpers:
    def test_prefix_logprobs_normalize(self, rng, tiny_model):
        enc = tiny_model.encode(rng.normal(size=(3, tiny_model.cfg.feat_dim)))
        lp = tiny_model.prefix_logprobs(enc, [[tiny_model.cfg.unit_bos, 1], [tiny_model.cfg.unit_bos, 2]])
        assert lp.shape == (2, tiny_model.cfg.unit_vocab)
        np.testing.assert_allclose(np.exp(lp).sum(axis=-1), 1.0, atol=1e-9)

    def test_sequence_distributions_match_prefix_steps(self, rng, tiny_model):
        bos = tiny_model.cfg.unit_bos
        enc = tiny_model.encode(rng.normal(size=(3, tiny_model.cfg.feat_dim)))
        seq = [bos, 3, 1, 4]
        dists = tiny_model.sequence_unit_distributions(enc, seq)
        for t in range(1, len(seq) + 1):
            lp = tiny_model.prefix_logprobs(enc, seq[:t])
            np.testing.assert_allclose(dists[t - 1], np.exp(lp[0]), atol=1e-12)

    def test_ctc_frame_labels_one_per_position(self, rng, tiny_model):
        enc = tiny_model.encode(rng.normal(size=(3, tiny_model.cfg.feat_dim)))
        frames = tiny_model.ctc_frame_labels(enc, [tiny_model.cfg.unit_bos, 1, 2])
        assert frames.shape == (3,)
        assert ((frames >= 0) & (frames < tiny_model.cfg.text_vocab)).all()
