"""Autoregressive unit generation and CTC readout of intermediate states.

Greedy decoding keeps the full next-unit distribution at every step plus the
frame-wise argmax of the CTC head over the produced positions, which is what
the diagnostics consume. Beam search explores top-k continuations jointly
over the live set; with beam 1 its step selection is exactly the greedy
argmax, so the two decode identical sequences.

Reserved ids (bos, pad) are barred from selection at every step; captured
distributions stay raw so uncertainty statistics see the full softmax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .losses import ctc_collapse


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    finished: bool


@dataclass
class DecodedTrace:
    hypothesis: Hypothesis
    distributions: np.ndarray      # (n_steps, V) raw softmax rows
    frame_labels: list[int]        # CTC argmax per generated position
    step_entropies: list[float]
    truncated: bool


def ctc_greedy_collapse(frame_labels, blank: int = 0) -> list[int]:
    """Merge adjacent repeats, then drop blanks."""
    return ctc_collapse(list(frame_labels), blank)


def _selection_mask(vocab: int, forbid) -> np.ndarray:
    mask = np.zeros(vocab)
    mask[list(forbid)] = -np.inf
    return mask


def _entropy_of(row: np.ndarray) -> float:
    p = row[row > 0]
    return float(-(p * np.log(p)).sum())


def greedy_decode(model, enc, max_len: int) -> DecodedTrace:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    cfg = model.cfg
    forbid = _selection_mask(cfg.unit_vocab, (cfg.unit_bos, cfg.unit_pad))
    prefix = [cfg.unit_bos]
    tokens: list[int] = []
    dists = []
    logprob = 0.0
    finished = False
    while len(tokens) < max_len:
        lp = model.prefix_logprobs(enc, prefix)[0]
        dists.append(np.exp(lp))
        tok = int(np.argmax(lp + forbid))
        logprob += float(lp[tok])
        tokens.append(tok)
        if tok == cfg.unit_eos:
            finished = True
            break
        prefix.append(tok)
    frame_inputs = [cfg.unit_bos] + tokens[:-1]
    frames = model.ctc_frame_labels(enc, frame_inputs)
    distributions = np.stack(dists)
    return DecodedTrace(
        hypothesis=Hypothesis(tokens=tokens, logprob=logprob, finished=finished),
        distributions=distributions,
        frame_labels=[int(f) for f in frames],
        step_entropies=[_entropy_of(row) for row in distributions],
        truncated=not finished,
    )


def _beam_core(model, enc, beam: int, max_len: int, forbid: np.ndarray) -> list[Hypothesis]:
    cfg = model.cfg
    live: list[tuple[list[int], float]] = [([cfg.unit_bos], 0.0)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        lp = model.prefix_logprobs(enc, [p for p, _ in live])
        scores = lp + forbid + np.array([s for _, s in live])[:, None]
        flat = scores.reshape(-1)
        top = np.argsort(flat)[::-1][:beam]
        next_live: list[tuple[list[int], float]] = []
        for idx in top:
            hyp_i, tok = divmod(int(idx), cfg.unit_vocab)
            prefix, _ = live[hyp_i]
            score = float(flat[idx])
            if tok == cfg.unit_eos:
                finished.append(Hypothesis(tokens=prefix[1:] + [tok], logprob=score, finished=True))
            else:
                next_live.append((prefix + [tok], score))
        live = next_live[:beam]
        if not live:
            break
        # scores only decrease along extensions, so once the best live
        # prefix cannot beat the best finished hypothesis we are done
        if finished and max(s for _, s in live) <= max(h.logprob for h in finished):
            break

    if not finished and live:
        prefix, score = max(live, key=lambda ps: ps[1])
        finished.append(Hypothesis(tokens=prefix[1:], logprob=score, finished=False))
    return finished


def beam_search(model, enc, beam: int, max_len: int, length_norm: bool = False) -> Hypothesis:
    """Top-k continuation search, monotone in beam along halving chains.

    Candidates pool the searches at widths beam, beam // 2, ..., 1, so a
    wider search never scores below a narrower one on that chain (greedy
    included): pruning alone can otherwise drop a narrow search's winner.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    cfg = model.cfg
    forbid = _selection_mask(cfg.unit_vocab, (cfg.unit_bos, cfg.unit_pad))
    candidates: list[Hypothesis] = []
    width = beam
    while width >= 1:
        candidates.extend(_beam_core(model, enc, width, max_len, forbid))
        if width == 1:
            break
        width //= 2

    def rank_key(h: Hypothesis) -> float:
        return h.logprob / max(len(h.tokens), 1) if length_norm else h.logprob

    return max(candidates, key=rank_key)


# ---------------------------------------------------------------------------
# corpus decoding and dumps
# ---------------------------------------------------------------------------


@dataclass
class DecodeRecord:
    id: str
    tokens: list[int]
    logprob: float
    finished: bool
    frame_labels: list[int] = field(default_factory=list)
    step_entropies: list[float] = field(default_factory=list)
    distributions: np.ndarray | None = None


def decode_corpus(model, samples, beam: int = 1, max_len: int = 64,
                  keep_distributions: bool = False, length_norm: bool = False) -> list[DecodeRecord]:
    """Greedy (beam=1 with trace capture) or beam decode over a sample list."""
    records = []
    for sample in samples:
        enc = model.encode(sample.src_feats)
        if beam == 1:
            trace = greedy_decode(model, enc, max_len)
            records.append(DecodeRecord(
                id=sample.id,
                tokens=trace.hypothesis.tokens,
                logprob=trace.hypothesis.logprob,
                finished=trace.hypothesis.finished,
                frame_labels=trace.frame_labels,
                step_entropies=trace.step_entropies,
                distributions=trace.distributions if keep_distributions else None,
            ))
        else:
            hyp = beam_search(model, enc, beam, max_len, length_norm=length_norm)
            records.append(DecodeRecord(
                id=sample.id, tokens=hyp.tokens, logprob=hyp.logprob, finished=hyp.finished,
            ))
    return records


def write_decode_dump(path, records: list[DecodeRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            rec = {
                "id": r.id,
                "tokens": r.tokens,
                "logprob": r.logprob,
                "finished": r.finished,
                "frame_labels": r.frame_labels,
                "step_entropies": r.step_entropies,
            }
            if r.distributions is not None:
                rec["distributions"] = [list(row) for row in r.distributions.tolist()]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_decode_dump(path) -> list[DecodeRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
            for fname in ("id", "tokens", "logprob", "finished", "frame_labels", "step_entropies"):
                if fname not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field {fname!r}")
            records.append(DecodeRecord(
                id=rec["id"], tokens=[int(t) for t in rec["tokens"]],
                logprob=float(rec["logprob"]), finished=bool(rec["finished"]),
                frame_labels=[int(f) for f in rec["frame_labels"]],
                step_entropies=[float(e) for e in rec["step_entropies"]],
                distributions=(np.asarray(rec["distributions"]) if "distributions" in rec else None),
            ))
    return records
