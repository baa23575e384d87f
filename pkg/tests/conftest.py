import numpy as np
import pytest

from s2ut_lab.losses import UnitSequence, prepare_batch
from s2ut_lab.model import Model, ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        unit_vocab=11,   # 8 units + bos/eos/pad
        text_vocab=8,    # blank + 4 letters + bos/eos/pad
        feat_dim=5,
        enc_layers=2,
        enc_dim=8,
        dec_layers=2,
        dec_dim=8,
        heads=2,
        n_future=3,
        attach_layer=1,
        aux_enc_taps=(1, 2),
        aux_dec_layers=1,
        ffn_mult=2,
        mtp_head_layers=1,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_units(rng, cfg, n_units) -> UnitSequence:
    ids = tuple(int(v) for v in rng.integers(0, 8, size=n_units)) + (cfg.unit_eos,)
    return UnitSequence(ids, cfg.unit_bos, cfg.unit_eos, cfg.unit_pad)


def make_batch(rng, cfg, sizes=(4, 6), src_lens=(3, 4), text_lens=(2, 2)):
    units = [make_units(rng, cfg, n) for n in sizes]
    feats = [rng.normal(size=(s, cfg.feat_dim)) for s in src_lens]
    texts_x = [[int(v) for v in rng.integers(1, 5, size=n)] for n in text_lens]
    texts_y = [[int(v) for v in rng.integers(1, 5, size=n)] for n in text_lens]
    return prepare_batch(units, feats, texts_x, texts_y)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return Model(tiny_config(), seed=7)
