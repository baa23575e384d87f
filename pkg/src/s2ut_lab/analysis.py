"""Diagnostics: prediction-entropy distributions (baseline-relative), the
CTC first-occurrence forward-shift statistic, and corpus BLEU for the
synthetic evaluation, plus CSV/SVG report rendering.

Entropy uses the natural log with 0*log(0) = 0. Histograms use 50 uniform
bins over [0, ln(vocab)]. The shift statistic averages per sample first and
then over the corpus; a pooled (per-token) variant is exposed alongside.
"""

from __future__ import annotations

import csv
import math
import os
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

N_BINS = 50


def entropy(dist) -> float:
    """Natural-log entropy of a probability vector; 0 log 0 := 0."""
    p = np.asarray(dist, dtype=np.float64)
    if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"not a probability vector (sum {p.sum():.9f})")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class EntropyHistogram:
    bin_edges: np.ndarray          # N_BINS + 1 edges over [0, ln(vocab)]
    frequencies: np.ndarray        # normalized counts
    n_tokens: int


def entropy_histogram(entropies, vocab: int) -> EntropyHistogram:
    values = np.asarray(list(entropies), dtype=np.float64)
    edges = np.linspace(0.0, math.log(vocab), N_BINS + 1)
    counts, _ = np.histogram(np.clip(values, 0.0, edges[-1]), bins=edges)
    freq = counts / values.size if values.size else counts.astype(np.float64)
    return EntropyHistogram(bin_edges=edges, frequencies=freq, n_tokens=int(values.size))


def entropy_delta_histogram(variant_dists, baseline_dists, vocab: int):
    """Bin both entropy samples, subtract baseline frequencies per bin."""
    if len(variant_dists) == 0 or len(baseline_dists) == 0:
        raise ValueError("need non-empty distribution collections on both sides")
    var_h = entropy_histogram([entropy(d) for d in variant_dists], vocab)
    base_h = entropy_histogram([entropy(d) for d in baseline_dists], vocab)
    return var_h, base_h, var_h.frequencies - base_h.frequencies


def delta_from_entropies(variant_entropies, baseline_entropies, vocab: int):
    var_h = entropy_histogram(variant_entropies, vocab)
    base_h = entropy_histogram(baseline_entropies, vocab)
    return var_h, base_h, var_h.frequencies - base_h.frequencies


def delta_mass_split(delta: np.ndarray, edges: np.ndarray, baseline_entropies) -> tuple[float, float]:
    """Total delta mass in bins below/above the baseline median entropy."""
    median = float(np.median(np.asarray(list(baseline_entropies))))
    median_bin = int(np.clip(np.searchsorted(edges, median, side="right") - 1, 0, len(delta) - 1))
    below = float(delta[:median_bin].sum())
    above = float(delta[median_bin + 1 :].sum())
    return below, above


# ---------------------------------------------------------------------------
# CTC first-occurrence forward shift
# ---------------------------------------------------------------------------


@dataclass
class ShiftReport:
    per_sample: list[float]
    corpus_mean: float
    pooled_mean: float
    n_tokens: int
    skipped: int


def first_occurrence_stat(frame_labels, blank: int = 0) -> float | None:
    """Mean over distinct non-blank tokens of (1-based first frame)/(frames).

    Returns None for an all-blank sequence (callers count the skip).
    """
    frames = list(frame_labels)
    if not frames:
        return None
    n = len(frames)
    firsts: dict[int, int] = {}
    for idx, label in enumerate(frames):
        if label != blank and label not in firsts:
            firsts[label] = idx + 1
    if not firsts:
        return None
    return float(np.mean([pos / n for pos in firsts.values()]))


def corpus_shift_report(frames_per_sample, blank: int = 0) -> ShiftReport:
    per_sample = []
    pooled = []
    n_tokens = 0
    skipped = 0
    for frames in frames_per_sample:
        stat = first_occurrence_stat(frames, blank)
        if stat is None:
            skipped += 1
            continue
        per_sample.append(stat)
        n = len(frames)
        firsts: dict[int, int] = {}
        for idx, label in enumerate(frames):
            if label != blank and label not in firsts:
                firsts[label] = idx + 1
        pooled.extend(pos / n for pos in firsts.values())
        n_tokens += len(firsts)
    corpus_mean = float(np.mean(per_sample)) if per_sample else float("nan")
    pooled_mean = float(np.mean(pooled)) if pooled else float("nan")
    return ShiftReport(per_sample=per_sample, corpus_mean=corpus_mean,
                       pooled_mean=pooled_mean, n_tokens=n_tokens, skipped=skipped)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(hyps, refs) -> float:
    """Corpus BLEU, n-grams 1-4, uniform weights, brevity penalty,
    +1 smoothing on the n >= 2 precisions."""
    hyps, refs = list(hyps), list(refs)
    if not hyps or len(hyps) != len(refs):
        raise ValueError("corpus_bleu needs equal, non-zero hypothesis/reference counts")
    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        match = 0
        total = 0
        for h, r in zip(hyps, refs):
            hc = _ngrams(list(h), n)
            rc = _ngrams(list(r), n)
            match += sum(min(c, rc[g]) for g, c in hc.items())
            total += max(len(h) - n + 1, 0)
        if n == 1:
            if match == 0:
                return 0.0
            p = match / total
        else:
            p = (match + 1) / (total + 1)
        log_sum += math.log(p)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_sum / 4.0)


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------


@dataclass
class RunPaths:
    variant: str
    seed: int
    run_dir: str


def read_bleu_csv(path) -> dict[str, float]:
    out = {}
    with open(path) as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            for fname in ("mode", "bleu"):
                if row.get(fname) in (None, ""):
                    raise ValueError(f"{path}:{lineno}: missing field {fname!r}")
            out[row["mode"]] = float(row["bleu"])
    return out


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def render_reports(runs: list[RunPaths], out_dir, unit_vocab: int) -> list[str]:
    """Aggregate per-run artifacts into comparison tables and SVG plots.

    Expects each run directory to hold eval_bleu.csv and dump_greedy.jsonl.
    Returns the list of files written.
    """
    from .decoding import read_decode_dump

    if not runs:
        raise ValueError("render_reports needs at least one run")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    bleu_rows = []
    shift_rows = []
    entropies: dict[str, list[float]] = {}
    for run in runs:
        bleu = read_bleu_csv(os.path.join(run.run_dir, "eval_bleu.csv"))
        records = read_decode_dump(os.path.join(run.run_dir, "dump_greedy.jsonl"))
        shift = corpus_shift_report([r.frame_labels for r in records])
        bleu_rows.append((run.variant, run.seed, bleu))
        shift_rows.append((run.variant, run.seed, shift.corpus_mean))
        entropies.setdefault(run.variant, []).extend(
            e for r in records for e in r.step_entropies
        )

    modes = ("greedy", "beam5", "beam10")
    path = os.path.join(out_dir, "comparison.csv")
    with open(path, "w") as fh:
        fh.write("variant,seed," + ",".join(modes) + "\n")
        for variant, seed, bleu in bleu_rows:
            fh.write(f"{variant},{seed}," + ",".join(_fmt(bleu.get(m, float('nan'))) for m in modes) + "\n")
    written.append(path)

    variants = sorted({v for v, _, _ in bleu_rows})
    means: dict[str, list[float]] = {}
    path = os.path.join(out_dir, "comparison_mean.csv")
    with open(path, "w") as fh:
        fh.write("variant," + ",".join(modes) + "\n")
        for variant in variants:
            rows = [b for v, _, b in bleu_rows if v == variant]
            means[variant] = [float(np.mean([r.get(m, float("nan")) for r in rows])) for m in modes]
            fh.write(f"{variant}," + ",".join(_fmt(v) for v in means[variant]) + "\n")
    written.append(path)

    path = os.path.join(out_dir, "shift_summary.csv")
    with open(path, "w") as fh:
        fh.write("variant,seed,first_occurrence_mean\n")
        for variant, seed, value in shift_rows:
            fh.write(f"{variant},{seed},{_fmt(value)}\n")
    written.append(path)

    shift_means = {
        v: float(np.mean([x for vv, _, x in shift_rows if vv == v])) for v in variants
    }
    path = os.path.join(out_dir, "shift_mean.csv")
    with open(path, "w") as fh:
        fh.write("variant,first_occurrence_mean\n")
        for variant in variants:
            fh.write(f"{variant},{_fmt(shift_means[variant])}\n")
    written.append(path)

    if "none" in entropies:
        base = entropies["none"]
        path = os.path.join(out_dir, "entropy_delta.csv")
        with open(path, "w") as fh:
            fh.write("variant,bin_lo,bin_hi,delta\n")
            for variant in variants:
                if variant == "none":
                    continue
                var_h, base_h, delta = delta_from_entropies(entropies[variant], base, unit_vocab)
                for i, d in enumerate(delta):
                    fh.write(f"{variant},{_fmt(var_h.bin_edges[i])},{_fmt(var_h.bin_edges[i + 1])},{_fmt(d)}\n")
        written.append(path)

    written.append(svg_grouped_bars(
        os.path.join(out_dir, "bleu_bars.svg"),
        "corpus BLEU by variant", variants, modes,
        {v: means[v] for v in variants},
    ))
    written.append(svg_grouped_bars(
        os.path.join(out_dir, "shift_bars.svg"),
        "mean first-occurrence position", variants, ("greedy",),
        {v: [shift_means[v]] for v in variants},
    ))
    if "none" in entropies:
        series = {}
        for variant in variants:
            if variant == "none":
                continue
            _, _, delta = delta_from_entropies(entropies[variant], entropies["none"], unit_vocab)
            series[variant] = delta
        if series:
            written.append(svg_step_plot(
                os.path.join(out_dir, "entropy_delta.svg"),
                "entropy frequency delta vs baseline",
                np.linspace(0.0, math.log(unit_vocab), N_BINS + 1), series,
            ))
    return written


# ---------------------------------------------------------------------------
# minimal deterministic SVG
# ---------------------------------------------------------------------------

_PALETTE = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377")
_W, _H, _M = 640, 360, 48


def _svg_open(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
    ]


def svg_grouped_bars(path, title, groups, series_names, values: dict) -> str:
    parts = _svg_open(title)
    flat = [v for g in groups for v in values[g]]
    vmax = max(max(flat), 1e-9)
    plot_w, plot_h = _W - 2 * _M, _H - 2 * _M
    group_w = plot_w / max(len(groups), 1)
    bar_w = group_w / (len(series_names) + 1)
    for gi, g in enumerate(groups):
        for si in range(len(series_names)):
            v = values[g][si]
            h = 0.0 if not math.isfinite(v) else max(v, 0.0) / vmax * plot_h
            x = _M + gi * group_w + (si + 0.5) * bar_w
            y = _H - _M - h
            parts.append(
                f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w:.2f}" height="{h:.2f}" '
                f'fill="{_PALETTE[si % len(_PALETTE)]}"/>'
            )
        parts.append(
            f'<text x="{_M + (gi + 0.5) * group_w:.2f}" y="{_H - _M + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{g}</text>'
        )
    parts.append(f'<line x1="{_M}" y1="{_H - _M}" x2="{_W - _M}" y2="{_H - _M}" stroke="black"/>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
    return str(path)


def svg_step_plot(path, title, edges, series: dict) -> str:
    parts = _svg_open(title)
    plot_w, plot_h = _W - 2 * _M, _H - 2 * _M
    vmax = max(max(abs(float(v)) for v in vals) for vals in series.values())
    vmax = max(vmax, 1e-9)
    x0, x1 = float(edges[0]), float(edges[-1])

    def xpix(x):
        return _M + (x - x0) / (x1 - x0) * plot_w

    def ypix(v):
        return _H - _M - (v + vmax) / (2 * vmax) * plot_h

    parts.append(
        f'<line x1="{_M}" y1="{ypix(0):.2f}" x2="{_W - _M}" y2="{ypix(0):.2f}" stroke="#888" stroke-dasharray="4 3"/>'
    )
    for si, (name, vals) in enumerate(sorted(series.items())):
        pts = []
        for i, v in enumerate(vals):
            pts.append(f"{xpix(float(edges[i])):.2f},{ypix(float(v)):.2f}")
            pts.append(f"{xpix(float(edges[i + 1])):.2f},{ypix(float(v)):.2f}")
        color = _PALETTE[si % len(_PALETTE)]
        parts.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{_W - _M - 4}" y="{_M + 14 * (si + 1)}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
    return str(path)
