"""Full finite-difference gradient suite over every differentiable primitive
and every training objective, run across many seeds.

Each check builds small random inputs in [-1, 1], reduces the op output to a
scalar through a fixed random projection, and compares analytic gradients
against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .losses import (
    LossWeights,
    UnitSequence,
    compute_losses,
    ctc_loss,
    prepare_batch,
)
from .model import Model, ModelConfig


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float


def _rand(rng, *shape):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=True)


def _away_from_kink(rng, *shape, margin=0.05):
    """Uniform in [-1, 1] but outside [-margin, margin] (relu is kinked at 0)."""
    x = rng.uniform(margin, 1.0, shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True)


def _projector(rng, shape):
    p = Tensor(rng.normal(size=shape))
    return lambda out: ad.sum_all(ad.mul(out, p))


def _primitive_checks(rng):
    x = _rand(rng, 2, 5)
    w = _rand(rng, 5, 4)
    g, b = _rand(rng, 5), _rand(rng, 5)
    table = _rand(rng, 6, 5)
    kern = _rand(rng, 3, 5)
    x3 = _rand(rng, 2, 3, 5)
    xk = _away_from_kink(rng, 2, 5)
    ids = rng.integers(0, 6, size=3)
    targets = rng.integers(0, 4, size=2)
    bias = _rand(rng, 5)
    p25 = _projector(rng, (2, 5))
    p24 = _projector(rng, (2, 4))
    p235 = _projector(rng, (2, 3, 5))
    p325 = _projector(rng, (3, 2, 5))
    p65 = _projector(rng, (6, 5))
    p28 = _projector(rng, (2, 8))
    p35 = _projector(rng, (3, 5))
    return {
        "add": ([x, bias], lambda ts: p25(ad.add(ts[0], ts[1]))),
        "mul": ([x, bias], lambda ts: p25(ad.mul(ts[0], ts[1]))),
        "relu": ([xk], lambda ts: p25(ad.relu(ts[0]))),
        "gelu": ([x], lambda ts: p25(ad.gelu(ts[0]))),
        "matmul": ([x, w], lambda ts: p24(ad.matmul(ts[0], ts[1]))),
        "affine": ([x, w, _rand(rng, 4)], lambda ts: p24(ad.affine(ts[0], ts[1], ts[2]))),
        "transpose": ([x3], lambda ts: p325(ad.transpose(ts[0], (1, 0, 2)))),
        "reshape": ([x3], lambda ts: p65(ad.reshape(ts[0], (6, 5)))),
        "concat": ([x, _rand(rng, 2, 3)], lambda ts: p28(ad.concat([ts[0], ts[1]], axis=-1))),
        "sum_all": ([x], lambda ts: ad.sum_all(ad.mul(ts[0], ts[0]))),
        "softmax_row": ([x], lambda ts: p25(ad.softmax_row(ts[0]))),
        "log_softmax_row": ([x], lambda ts: p25(ad.log_softmax_row(ts[0]))),
        "layer_norm": ([x, g, b], lambda ts: p25(ad.layer_norm(ts[0], ts[1], ts[2], eps=1e-5))),
        "embedding_lookup": ([table], lambda ts: p35(ad.embedding_lookup(ts[0], ids))),
        "nll_from_logprobs": ([x], lambda ts: ad.nll_from_logprobs(
            ad.log_softmax_row(ts[0]), targets, [True, True])),
        "depthwise_conv1d": ([x3, kern], lambda ts: p235(ad.depthwise_conv1d(ts[0], ts[1]))),
    }


def _loss_model(variant: str, seed: int) -> tuple[Model, object]:
    cfg = ModelConfig(
        unit_vocab=9, text_vocab=7, feat_dim=4, enc_layers=1, enc_dim=8,
        dec_layers=2, dec_dim=8, heads=2, mtp_variant=variant, n_future=2,
        attach_layer=1, mtp_head_layers=1, aux_enc_taps=(1,), aux_dec_layers=1,
        ffn_mult=2,
    )
    model = Model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    units = [UnitSequence(tuple(int(v) for v in rng.integers(0, 6, size=3)) + (cfg.unit_eos,),
                          cfg.unit_bos, cfg.unit_eos, cfg.unit_pad)]
    feats = [rng.normal(size=(2, cfg.feat_dim))]
    texts = [[1, 2]]
    batch = prepare_batch(units, feats, texts, texts)
    return model, batch


def _loss_checks(seed: int):
    checks = {}

    def loss_case(name, variant, probe_names):
        model, batch = _loss_model(variant, seed)
        params = model.named_params()
        probes = [params[p] for p in probe_names if p in params]

        def f(_):
            total, _bd = compute_losses(model, batch, LossWeights())
            return total

        checks[name] = (probes, f)

    loss_case("loss/ntp", "none", ["encoder.in_proj.W", "decoder.emb"])
    loss_case("loss/mtp_parallel_linear", "parallel_linear", ["mtp.k1.proj.W", "decoder.emb"])
    loss_case("loss/mtp_deepseek_v3", "deepseek_v3", ["mtp.k1.fuse.W", "decoder.emb"])
    loss_case("loss/mtp_vocalnet", "vocalnet",
              ["mtp.k1.layers.0.self_attn.wq.W", "encoder.in_proj.W"])
    loss_case("loss/mtp_s2ut", "s2ut", ["mtp.k0.layers.0.cross_attn.wk.W", "decoder.emb"])

    rng = np.random.default_rng(seed + 2)
    x = _rand(rng, 2, 4, 4)

    def ctc_f(ts):
        value, _, _ = ctc_loss(ad.log_softmax_row(ts[0]), [[1, 2], [3]], frame_lens=[4, 3])
        return value

    checks["loss/ctc"] = ([x], ctc_f)
    return checks


def run_gradient_suite(seeds: int = 20, eps: float = 1e-3, tol: float = 1e-5,
                       max_coords: int = 16) -> list[CheckResult]:
    """Every primitive and every loss, checked across `seeds` random seeds.

    Returns one result per check name with the worst relative error seen.
    """
    worst: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        for name, (inputs, f) in _primitive_checks(rng).items():
            report = grad_check(f, inputs, eps=eps, tol=tol, max_coords=max_coords,
                                rng=np.random.default_rng(seed))
            worst[name] = max(worst.get(name, 0.0), report.worst)
        for name, (inputs, f) in _loss_checks(seed).items():
            report = grad_check(f, inputs, eps=eps, tol=tol, max_coords=max_coords,
                                rng=np.random.default_rng(seed))
            worst[name] = max(worst.get(name, 0.0), report.worst)
    return [CheckResult(name=n, passed=w <= tol, worst=w) for n, w in sorted(worst.items())]
