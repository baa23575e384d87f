"""Optimizer, schedule, batching, and the multi-task training loop.

Everything is a deterministic function of (seed, config, data): batch
composition is length-bucketed once, bucket order is reshuffled per epoch
from a seeded stream addressed purely by epoch index, so resuming from a
checkpoint replays the exact remaining schedule.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import LossWeights, breakdown_csv_header, breakdown_csv_row, compute_losses, prepare_batch
from .model import Model
from .task import TaskSpec


class NonFiniteGradientError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    peak_lr: float = 3e-3
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    grad_clip_norm: float = 1.0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000

    def __post_init__(self):
        if not (self.steps > self.warmup_steps > 0):
            raise ValueError("need steps > warmup_steps > 0")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Inverse-square-root schedule with linear warmup."""
    if step < 1:
        raise ValueError("schedule is defined for steps >= 1")
    return cfg.peak_lr * min(step / cfg.warmup_steps, math.sqrt(cfg.warmup_steps / step))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: dict) -> "OptimizerState":
        return cls(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
        )


class FlatParamView:
    """Rebind parameter tensors as views into one flat buffer so the whole
    Adam update runs as a few vectorized passes. In-place updates on the flat
    buffer are visible through every view."""

    def __init__(self, params: dict, state: OptimizerState):
        self.names = list(params.keys())
        sizes = [params[n].data.size for n in self.names]
        offsets = np.concatenate(([0], np.cumsum(sizes)))
        self.slices = {n: slice(int(offsets[i]), int(offsets[i + 1]))
                       for i, n in enumerate(self.names)}
        total = int(offsets[-1])
        self.flat = np.empty(total)
        self.m = np.empty(total)
        self.v = np.empty(total)
        for n in self.names:
            sl = self.slices[n]
            p = params[n]
            self.flat[sl] = p.data.ravel()
            p.data = self.flat[sl].reshape(p.data.shape)
            self.m[sl] = state.m[n].ravel()
            self.v[sl] = state.v[n].ravel()
            state.m[n] = self.m[sl].reshape(state.m[n].shape)
            state.v[n] = self.v[sl].reshape(state.v[n].shape)

    def gather_grads(self, params: dict) -> np.ndarray:
        out = np.zeros_like(self.flat)
        for n in self.names:
            g = params[n].grad
            if g is not None:
                out[self.slices[n]] = g.ravel()
        return out


def flat_adam_step(view: FlatParamView, grad: np.ndarray, state: OptimizerState,
                   lr: float, cfg: TrainConfig) -> None:
    if not np.isfinite(grad).all():
        raise NonFiniteGradientError(f"non-finite gradient at update {state.t + 1}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    view.m *= b1
    view.m += (1 - b1) * grad
    view.v *= b2
    grad *= grad
    grad *= 1 - b2
    view.v += grad
    upd = np.sqrt(view.v)
    upd *= 1.0 / math.sqrt(c2)
    upd += cfg.adam_eps
    np.divide(view.m, upd, out=upd)
    upd *= lr / c1
    view.flat -= upd


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so the global norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def adam_step(params: dict, grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float, cfg: TrainConfig) -> None:
    """Standard Adam with bias correction; call after global-norm clipping."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in {name} at update {state.t + 1}")
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    inv_sqrt_c2 = 1.0 / math.sqrt(c2)
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        g = g * g
        g *= 1 - b2
        v += g
        upd = np.sqrt(v)
        upd *= inv_sqrt_c2
        upd += cfg.adam_eps
        np.divide(m, upd, out=upd)
        upd *= lr / c1
        p.data -= upd


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


class BatchPlan:
    """Length-bucketed fixed batches; epoch order is a pure function of epoch."""

    def __init__(self, samples, spec: TaskSpec, batch_size: int, seed: int):
        self.seed = seed
        order = sorted(range(len(samples)), key=lambda i: (len(samples[i].units.ids), samples[i].id))
        self.buckets = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
        self.prepared = []
        for bucket in self.buckets:
            chunk = [samples[i] for i in bucket]
            self.prepared.append(prepare_batch(
                [s.units for s in chunk],
                [s.src_feats for s in chunk],
                [spec.text_ids(s.x_text) for s in chunk],
                [spec.text_ids(s.y_text) for s in chunk],
            ))

    def batch_for_step(self, step: int):
        """step is 1-based; returns the prepared batch for that step."""
        n = len(self.buckets)
        epoch, idx = divmod(step - 1, n)
        perm = np.random.default_rng([self.seed, 17, epoch]).permutation(n)
        return self.prepared[int(perm[idx])]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    steps_run: int
    final_checkpoint: str
    log_path: str
    last_total: float = float("nan")
    skipped_steps: int = 0


def _save(model: Model, state: OptimizerState, path, step: int) -> None:
    extra = {f"adam.m.{n}": a for n, a in state.m.items()}
    extra.update({f"adam.v.{n}": a for n, a in state.v.items()})
    model.save_checkpoint(path, extra_arrays=extra, meta={"step": step})


def load_train_checkpoint(model: Model, path) -> tuple[OptimizerState, int]:
    header = model.load_checkpoint(path)
    extras = header["extra_arrays"]
    state = OptimizerState.fresh(model.named_params())
    for name in state.m:
        if f"adam.m.{name}" in extras:
            state.m[name] = extras[f"adam.m.{name}"].copy()
            state.v[name] = extras[f"adam.v.{name}"].copy()
    step = int(header["meta"].get("step", 0))
    state.t = step
    return state, step


def train(model: Model, samples, spec: TaskSpec, cfg: TrainConfig,
          weights: LossWeights | None = None, out_dir=".", resume_from=None,
          loss_fn=compute_losses) -> TrainResult:
    if not samples:
        raise ValueError("training requires a non-empty dataset")
    weights = weights or LossWeights()
    os.makedirs(out_dir, exist_ok=True)
    params = model.named_params()
    plan = BatchPlan(samples, spec, cfg.batch_size, cfg.seed)

    start_step = 0
    state = OptimizerState.fresh(params)
    if resume_from is not None:
        state, start_step = load_train_checkpoint(model, resume_from)
    view = FlatParamView(params, state)

    log_path = os.path.join(out_dir, "train_log.csv")
    mode = "a" if start_step > 0 and os.path.exists(log_path) else "w"
    log = open(log_path, mode)
    if mode == "w":
        log.write(breakdown_csv_header(model.cfg.n_future) + "\n")

    consecutive_bad = 0
    skipped = 0
    last_total = float("nan")
    final_path = os.path.join(out_dir, "ckpt_final.bin")
    try:
        for step in range(start_step + 1, cfg.steps + 1):
            batch = plan.batch_for_step(step)
            total, bd = loss_fn(model, batch, weights)
            if not math.isfinite(bd.total):
                consecutive_bad += 1
                skipped += 1
                if consecutive_bad >= 2:
                    raise TrainingDivergedError(
                        f"total loss non-finite at steps {step - 1} and {step}"
                    )
                continue
            consecutive_bad = 0
            last_total = bd.total
            for p in params.values():
                p.grad = None
            ad.backward(total)
            grad = view.gather_grads(params)
            norm = math.sqrt(float(grad @ grad))
            if norm > cfg.grad_clip_norm and norm > 0:
                grad *= cfg.grad_clip_norm / norm
            flat_adam_step(view, grad, state, lr_at(step, cfg), cfg)
            if step % cfg.log_every == 0 or step == 1:
                log.write(breakdown_csv_row(step, bd, model.cfg.n_future) + "\n")
                log.flush()
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.steps:
                _save(model, state, os.path.join(out_dir, f"ckpt_step{step}.bin"), step)
        _save(model, state, final_path, cfg.steps)
    finally:
        log.close()
    return TrainResult(steps_run=cfg.steps - start_step, final_checkpoint=final_path,
                       log_path=log_path, last_total=last_total, skipped_steps=skipped)
