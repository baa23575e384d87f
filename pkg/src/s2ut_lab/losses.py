"""Training objectives: next-token, the four multi-token prediction variants,
CTC on intermediate decoder states, auxiliary text decoders, and the weighted
total, together with the sequence-shift utilities they share.

Reduction conventions: within one shift term the negative log-likelihood is
averaged over unmasked positions; terms are summed (not averaged) across
shifts. CTC is averaged over feasible samples of the batch; infeasible
samples are excluded and counted rather than crashing the step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import Model, EncoderOutput, DecoderTrace, key_padding_mask, output_logits


# ---------------------------------------------------------------------------
# unit sequences and shifts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnitSequence:
    """Target unit ids; training targets end with exactly one eos."""

    ids: tuple[int, ...]
    bos: int
    eos: int
    pad: int

    def __len__(self) -> int:
        return len(self.ids)

    def validate_training_target(self) -> None:
        if not self.ids:
            raise ValueError("empty unit sequence")
        if self.ids[-1] != self.eos:
            raise ValueError("training target must end with eos")
        if self.ids.count(self.eos) != 1:
            raise ValueError("training target must contain exactly one eos")
        if self.pad in self.ids:
            raise ValueError("pad may not occur inside a training target")


def right_shift(u: UnitSequence) -> UnitSequence:
    """(u1..un, e) -> (b, u1..un); length preserved."""
    if not u.ids:
        raise ValueError("cannot right-shift an empty sequence")
    if u.ids[-1] != u.eos:
        raise ValueError("right_shift expects a sequence ending with eos")
    return UnitSequence((u.bos,) + u.ids[:-1], u.bos, u.eos, u.pad)


def left_shift(u: UnitSequence, k: int) -> UnitSequence:
    """Drop the first k ids, append k pads; pad positions are mask-false in losses."""
    if k < 0 or k > len(u.ids):
        raise ValueError(f"left shift {k} out of range for length {len(u.ids)}")
    return UnitSequence(u.ids[k:] + (u.pad,) * k, u.bos, u.eos, u.pad)


def _as_unit_list(units) -> list[UnitSequence]:
    return [units] if isinstance(units, UnitSequence) else list(units)


# ---------------------------------------------------------------------------
# batch packing
# ---------------------------------------------------------------------------


@dataclass
class PreparedBatch:
    unit_seqs: list[UnitSequence]
    input_ids: np.ndarray        # (B, T) right-shifted, pad-suffixed
    target_ids: np.ndarray       # (B, T) original ids, pad-suffixed
    unit_lens: np.ndarray        # (B,) true lengths including eos
    src_feats: np.ndarray        # (B, S, F)
    src_mask: np.ndarray         # (B, S)
    x_text: list[list[int]]      # text-token ids, no specials
    y_text: list[list[int]]


def prepare_batch(units: list[UnitSequence], feats: list[np.ndarray],
                  x_text: list[list[int]], y_text: list[list[int]]) -> PreparedBatch:
    b = len(units)
    pad = units[0].pad
    lens = np.array([len(u) for u in units])
    t = int(lens.max())
    input_ids = np.full((b, t), pad, dtype=np.int64)
    target_ids = np.full((b, t), pad, dtype=np.int64)
    for i, u in enumerate(units):
        u.validate_training_target()
        shifted = right_shift(u)
        input_ids[i, : lens[i]] = shifted.ids
        target_ids[i, : lens[i]] = u.ids
    s = max(f.shape[0] for f in feats)
    fd = feats[0].shape[1]
    src = np.zeros((b, s, fd))
    src_mask = np.zeros((b, s), dtype=bool)
    for i, f in enumerate(feats):
        src[i, : f.shape[0]] = f
        src_mask[i, : f.shape[0]] = True
    return PreparedBatch(
        unit_seqs=list(units), input_ids=input_ids, target_ids=target_ids,
        unit_lens=lens, src_feats=src, src_mask=src_mask,
        x_text=[list(x) for x in x_text], y_text=[list(y) for y in y_text],
    )


def shifted_targets(target_ids: np.ndarray, lens: np.ndarray, k: int, pad: int):
    """Per-sample left shift by k over a padded (B, T) id array; mask-false on pads."""
    b, t = target_ids.shape
    tgt = np.full((b, t), pad, dtype=np.int64)
    mask = np.zeros((b, t), dtype=bool)
    for i in range(b):
        n = max(int(lens[i]) - k, 0)
        if n:
            tgt[i, :n] = target_ids[i, k : k + n]
            mask[i, :n] = True
    return tgt, mask


# ---------------------------------------------------------------------------
# next-token and MTP variants
# ---------------------------------------------------------------------------


def _score_states(h: Tensor, w_out: Tensor, tgt: np.ndarray, mask: np.ndarray) -> Tensor:
    return ad.cross_entropy_from_logits(output_logits(h, w_out), tgt, mask)


def _sum_terms(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return total


def ntp_loss(trace: DecoderTrace | Tensor, units, w_out: Tensor) -> Tensor:
    """Mean NLL of the unit sequence under the final decoder states."""
    h = trace.states[-1] if isinstance(trace, DecoderTrace) else trace
    units = _as_unit_list(units)
    lens = np.array([len(u) for u in units])
    if h.shape[-2] < lens.max():
        raise ValueError(f"decoder states length {h.shape[-2]} != target length {lens.max()}")
    h, units, target_ids, lens, pad = _norm_batch_inputs(h, units)
    tgt, mask = shifted_targets(target_ids, lens, 0, pad)
    return _score_states(h, w_out, tgt, mask)


def _norm_batch_inputs(h: Tensor, units):
    units = _as_unit_list(units)
    if h.data.ndim == 2:
        h = ad.reshape(h, (1,) + h.shape)
    pad = units[0].pad
    lens = np.array([len(u) for u in units])
    t = h.shape[1]
    target_ids = np.full((len(units), t), pad, dtype=np.int64)
    for i, u in enumerate(units):
        target_ids[i, : lens[i]] = u.ids
    return h, units, target_ids, lens, pad


def mtp_parallel_linear_loss(h_last: Tensor, units, model: Model):
    """N independent projection heads on the final states; shift 0 is the
    next-token term and scores through the model's shared output projection."""
    h, units, target_ids, lens, pad = _norm_batch_inputs(h_last, units)
    terms = []
    for k in range(model.cfg.n_future):
        w = model.w_out if k == 0 else model.mtp.proj[k].W
        tgt, mask = shifted_targets(target_ids, lens, k, pad)
        terms.append(_score_states(h, w, tgt, mask))
    return _sum_terms(terms), terms


def _head_masks(model: Model, t: int, src_mask: np.ndarray | None):
    causal = model.causal(t)
    cross = Tensor(key_padding_mask(src_mask)) if src_mask is not None else None
    return causal, cross


def mtp_deepseek_v3_loss(h_enc: Tensor, h_last: Tensor, units, model: Model,
                         src_mask: np.ndarray | None = None,
                         head_input_override: dict[int, np.ndarray] | None = None):
    """Chained heads with teacher forcing: each head fuses the normalized
    previous head state with the normalized embedding of the ground-truth
    token preceding its target, then runs a small decoder over the source."""
    h, units, target_ids, lens, pad = _norm_batch_inputs(h_last, units)
    t = h.shape[1]
    causal, cross = _head_masks(model, t, src_mask)
    mtp = model.mtp
    terms = []
    h_out = h
    for k in range(model.cfg.n_future):
        if k > 0:
            in_ids, _ = shifted_targets(target_ids, lens, k - 1, pad)
            if head_input_override and k in head_input_override:
                in_ids = np.asarray(head_input_override[k], dtype=np.int64)
            emb = ad.embedding_lookup(model.unit_emb, in_ids)
            fused = ad.concat([mtp.fuse_ln_prev[k](h_out), mtp.fuse_ln_emb[k](emb)], axis=-1)
            h_in = mtp.fuse[k](fused)
            h_out = mtp.heads[k].run(h_in, h_enc, causal, cross)
        tgt, mask = shifted_targets(target_ids, lens, k, pad)
        terms.append(_score_states(h_out, model.w_out, tgt, mask))
    return _sum_terms(terms), terms


def mtp_vocalnet_loss(h_enc: Tensor, h_last: Tensor, units, model: Model,
                      src_mask: np.ndarray | None = None,
                      zero_chain_input_at: int | None = None):
    """Chained heads without token inputs: each head reads the previous head
    state directly, so no gradient reaches the embedding table from the heads."""
    h, units, target_ids, lens, pad = _norm_batch_inputs(h_last, units)
    causal, cross = _head_masks(model, h.shape[1], src_mask)
    terms = []
    h_out = h
    for k in range(model.cfg.n_future):
        if k > 0:
            h_in = Tensor(np.zeros_like(h_out.data)) if zero_chain_input_at == k else h_out
            h_out = model.mtp.heads[k].run(h_in, h_enc, causal, cross)
        tgt, mask = shifted_targets(target_ids, lens, k, pad)
        terms.append(_score_states(h_out, model.w_out, tgt, mask))
    return _sum_terms(terms), terms


def mtp_s2ut_loss(h_enc: Tensor, h_mid: Tensor, units, model: Model,
                  src_mask: np.ndarray | None = None):
    """N sibling heads reading the CTC-attachment decoder states directly;
    every term pushes gradient into those intermediate states."""
    h, units, target_ids, lens, pad = _norm_batch_inputs(h_mid, units)
    causal, cross = _head_masks(model, h.shape[1], src_mask)
    terms = []
    for k in range(model.cfg.n_future):
        h_out = model.mtp.heads[k].run(h, h_enc, causal, cross)
        tgt, mask = shifted_targets(target_ids, lens, k, pad)
        terms.append(_score_states(h_out, model.w_out, tgt, mask))
    return _sum_terms(terms), terms


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------


def ctc_feasible(n_frames: int, labels: list[int]) -> bool:
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return n_frames >= len(labels) + repeats


def _extended_labels(labels: list[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, blank, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _ctc_forward_backward(lp: np.ndarray, labels: list[int], blank: int):
    """Log-space forward/backward over the blank-interleaved label sequence.

    Returns (logP, alpha, beta, ext); lp is (T, V) log-probs.
    """
    t_frames = lp.shape[0]
    ext = _extended_labels(labels, blank)
    s = ext.size
    can_skip = np.zeros(s, dtype=bool)
    can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    alpha = np.full((t_frames, s), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if s > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, t_frames):
        prev = alpha[t - 1]
        stay = prev
        move = np.concatenate(([-np.inf], prev[:-1]))
        skip = np.concatenate(([-np.inf, -np.inf], prev[:-2]))
        skip = np.where(can_skip, skip, -np.inf)
        alpha[t] = np.logaddexp(np.logaddexp(stay, move), skip) + lp[t, ext]
    log_p = alpha[t_frames - 1, s - 1]
    if s > 1:
        log_p = np.logaddexp(log_p, alpha[t_frames - 1, s - 2])

    beta = np.full((t_frames, s), -np.inf)
    beta[t_frames - 1, s - 1] = 0.0
    if s > 1:
        beta[t_frames - 1, s - 2] = 0.0
    for t in range(t_frames - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        stay = nxt
        move = np.concatenate((nxt[1:], [-np.inf]))
        skip = np.concatenate((nxt[2:], [-np.inf, -np.inf]))
        skip = np.where(np.concatenate((can_skip[2:], [False, False])), skip, -np.inf)
        beta[t] = np.logaddexp(np.logaddexp(stay, move), skip)
    return log_p, alpha, beta, ext


def ctc_loss(logp: Tensor, labels, frame_lens=None, blank: int = 0):
    """Alignment-marginal negative log-likelihood from frame log-probs.

    logp: (T, V) or (B, T, V); labels: one label list per sample. Returns
    (mean loss over feasible samples, per-sample values, infeasible count).
    """
    single = logp.data.ndim == 2
    lp3 = ad.reshape(logp, (1,) + logp.shape) if single else logp
    label_lists = [list(labels)] if single and labels and np.isscalar(labels[0]) else [list(l) for l in labels]
    if single and not label_lists:
        label_lists = [[]]
    b, t_max, _ = lp3.shape
    if frame_lens is None:
        frame_lens = [t_max] * b
    per_sample: list[float] = []
    grads: list[tuple[int, np.ndarray] | None] = []
    n_skipped = 0
    for i in range(b):
        t_i = int(frame_lens[i])
        y = label_lists[i]
        if not ctc_feasible(t_i, y):
            per_sample.append(float("inf"))
            grads.append(None)
            n_skipped += 1
            continue
        log_p, alpha, beta, ext = _ctc_forward_backward(lp3.data[i, :t_i], y, blank)
        per_sample.append(-float(log_p))
        gamma = np.exp(alpha + beta - log_p)
        g = np.zeros((t_i, lp3.shape[-1]))
        for s_idx, c in enumerate(ext):
            g[:, c] -= gamma[:, s_idx]
        grads.append((t_i, g))
    n_ok = b - n_skipped
    value = sum(v for v in per_sample if np.isfinite(v)) / n_ok if n_ok else 0.0

    def bwd(g_up):
        if not lp3.requires_grad or n_ok == 0:
            return
        scale = float(g_up) / n_ok
        for i, entry in enumerate(grads):
            if entry is not None:
                t_i, g = entry
                lp3.grad[i, :t_i] += scale * g

    loss = ad.make_node(np.asarray(value), (lp3,), bwd)
    return loss, per_sample, n_skipped


def ctc_collapse(frames: list[int], blank: int = 0) -> list[int]:
    """Merge adjacent repeats, then drop blanks (decode-side collapse rule)."""
    out = []
    prev = None
    for f in frames:
        if f != prev:
            out.append(f)
        prev = f
    return [f for f in out if f != blank]


# ---------------------------------------------------------------------------
# auxiliary text decoders
# ---------------------------------------------------------------------------


def aux_text_loss(model: Model, which: str, enc: EncoderOutput, texts: list[list[int]]) -> Tensor:
    """Autoregressive NLL of the text sequence under the tap-attached decoder."""
    cfg = model.cfg
    b = len(texts)
    lens = np.array([len(t) + 1 for t in texts])  # + eos
    t_max = int(lens.max())
    in_ids = np.full((b, t_max), cfg.text_pad, dtype=np.int64)
    tgt = np.full((b, t_max), cfg.text_pad, dtype=np.int64)
    mask = np.zeros((b, t_max), dtype=bool)
    for i, text in enumerate(texts):
        if not text:
            continue  # absent text supervises nothing (stays fully masked)
        seq = list(text) + [cfg.text_eos]
        in_ids[i, : lens[i]] = [cfg.text_bos] + seq[:-1]
        tgt[i, : lens[i]] = seq
        mask[i, : lens[i]] = True
    logits = model.aux_text_logits(which, enc, in_ids)
    return ad.cross_entropy_from_logits(logits, tgt, mask)


# ---------------------------------------------------------------------------
# weighted total
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    w_ntp: float = 1.0
    w_ctc: float = 1.6
    w_mtp: float = 1.0
    w_aux_src: float = 8.0
    w_aux_tgt: float = 8.0

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {v}")


@dataclass
class LossBreakdown:
    ntp: float = 0.0
    mtp_terms: list[float] = field(default_factory=list)
    ctc: float = 0.0
    aux_src: float = 0.0
    aux_tgt: float = 0.0
    total: float = 0.0
    ctc_infeasible: int = 0


def total_loss(parts: dict, weights: LossWeights, variant: str):
    """Combine computed parts into the training total.

    The three final-layer variants replace the next-token loss (their shift-0
    term is the next-token term); the mid-layer variant and the baseline keep
    it. Returns (scalar Tensor, LossBreakdown).
    """
    terms: list[Tensor] = []
    bd = LossBreakdown()
    bd.ctc_infeasible = int(parts.get("ctc_infeasible", 0))

    def weighted(t: Tensor, w: float) -> Tensor:
        return ad.mul(t, w)

    if variant in ("parallel_linear", "deepseek_v3", "vocalnet"):
        mtp_sum, mtp_terms = parts["mtp"]
        terms.append(weighted(mtp_sum, weights.w_mtp))
        bd.mtp_terms = [t.item() for t in mtp_terms]
    elif variant == "s2ut":
        terms.append(weighted(parts["ntp"], weights.w_ntp))
        bd.ntp = parts["ntp"].item()
        mtp_sum, mtp_terms = parts["mtp"]
        terms.append(weighted(mtp_sum, weights.w_mtp))
        bd.mtp_terms = [t.item() for t in mtp_terms]
    elif variant == "none":
        terms.append(weighted(parts["ntp"], weights.w_ntp))
        bd.ntp = parts["ntp"].item()
    else:
        raise ValueError(f"unknown variant {variant!r}")

    for key, w in (("ctc", weights.w_ctc), ("aux_src", weights.w_aux_src), ("aux_tgt", weights.w_aux_tgt)):
        if key in parts:
            terms.append(weighted(parts[key], w))
            setattr(bd, key, parts[key].item())
    total = _sum_terms(terms)
    bd.total = total.item()
    return total, bd


def compute_losses(model: Model, batch: PreparedBatch, weights: LossWeights):
    """Full multi-task forward for one batch: all active objectives plus total."""
    cfg = model.cfg
    enc = model.encode(batch.src_feats, batch.src_mask)
    trace = model.decode_trace(enc, batch.input_ids)
    h_last = trace.states[-1]
    h_mid = trace.states[cfg.attach_layer]
    units = batch.unit_seqs

    parts: dict = {}
    variant = cfg.mtp_variant
    if variant == "parallel_linear":
        parts["mtp"] = mtp_parallel_linear_loss(h_last, units, model)
    elif variant == "deepseek_v3":
        parts["mtp"] = mtp_deepseek_v3_loss(enc.h_enc, h_last, units, model, batch.src_mask)
    elif variant == "vocalnet":
        parts["mtp"] = mtp_vocalnet_loss(enc.h_enc, h_last, units, model, batch.src_mask)
    elif variant == "s2ut":
        parts["ntp"] = ntp_loss(trace, units, model.w_out)
        parts["mtp"] = mtp_s2ut_loss(enc.h_enc, h_mid, units, model, batch.src_mask)
    else:
        parts["ntp"] = ntp_loss(trace, units, model.w_out)

    ctc_val, _, n_skip = ctc_loss(
        model.ctc_logprobs(h_mid), batch.y_text, batch.unit_lens, blank=cfg.text_blank
    )
    parts["ctc"] = ctc_val
    parts["ctc_infeasible"] = n_skip
    parts["aux_src"] = aux_text_loss(model, "src", enc, batch.x_text)
    parts["aux_tgt"] = aux_text_loss(model, "tgt", enc, batch.y_text)
    return total_loss(parts, weights, variant)


def breakdown_csv_header(n_future: int) -> str:
    mtp_cols = ",".join(f"mtp_k{k}" for k in range(n_future))
    return f"step,ntp,{mtp_cols},ctc,aux_src,aux_tgt,total,ctc_infeasible"


def breakdown_csv_row(step: int, bd: LossBreakdown, n_future: int) -> str:
    mtp = list(bd.mtp_terms) + [0.0] * (n_future - len(bd.mtp_terms))
    cols = [str(step), f"{bd.ntp:.10g}"] + [f"{v:.10g}" for v in mtp]
    cols += [f"{bd.ctc:.10g}", f"{bd.aux_src:.10g}", f"{bd.aux_tgt:.10g}", f"{bd.total:.10g}",
             str(bd.ctc_infeasible)]
    return ",".join(cols)
