"""Command-line entry point for the full experiment lifecycle.

Subcommands: gen-data, train, eval, analyze, grad-check, report, run-matrix.
Flat key-value config files travel with every run directory; flags override
file values. The S2UT_LAB_OUT environment variable sets the default output
root. Every subcommand overwrites its outputs deterministically, so reruns
with identical inputs are idempotent.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .analysis import (
    RunPaths,
    corpus_bleu,
    corpus_shift_report,
    entropy_histogram,
    render_reports,
)
from .decoding import decode_corpus, read_decode_dump, write_decode_dump
from .gradsuite import run_gradient_suite
from .kv import dataclass_from_kv, read_kv, write_kv
from .losses import LossWeights
from .model import Model, ModelConfig
from .task import TaskSpec, collapse_units, generate_dataset, read_dataset, write_dataset
from .training import TrainConfig, train


def _out_root() -> str:
    return os.environ.get("S2UT_LAB_OUT", ".")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(run_dir, updates: dict) -> None:
    path = os.path.join(run_dir, "manifest.json")
    manifest = {}
    if os.path.exists(path):
        with open(path) as fh:
            manifest = json.load(fh)
    manifest.update(updates)
    digests = {}
    for name in ("task.kv", "model.kv", "train.kv", "weights.kv"):
        p = os.path.join(run_dir, name)
        if os.path.exists(p):
            digests[name] = _sha256(p)
    manifest["config_digests"] = digests
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def _load_task(data_dir) -> TaskSpec:
    return dataclass_from_kv(TaskSpec, read_kv(os.path.join(data_dir, "task.kv")))


def _load_split(data_dir, spec: TaskSpec, split: str):
    return read_dataset(os.path.join(data_dir, f"{split}.jsonl"), spec)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    overrides = {k: getattr(args, k) for k in (
        "seed", "n_semantic", "expansion_min", "expansion_max", "units_per_semantic",
        "sent_len_min", "sent_len_max", "feat_dim", "feat_noise_sigma",
        "n_train", "n_dev", "n_test",
    )}
    base = read_kv(args.task_config) if args.task_config else {}
    spec = dataclass_from_kv(TaskSpec, base, overrides)
    out = args.out or os.path.join(_out_root(), "data")
    os.makedirs(out, exist_ok=True)
    ds = generate_dataset(spec)
    write_kv(os.path.join(out, "task.kv"), spec)
    for split in ("train", "dev", "test"):
        write_dataset(os.path.join(out, f"{split}.jsonl"), ds[split])
    _write_manifest(out, {
        "run_id": f"data-seed{spec.seed}",
        "artifacts": [f"{s}.jsonl" for s in ("train", "dev", "test")] + ["task.kv"],
    })
    print(f"wrote dataset ({spec.n_train}/{spec.n_dev}/{spec.n_test} samples) to {out}")
    return 0


def _model_config_for(spec: TaskSpec, args) -> ModelConfig:
    base = read_kv(args.model_config) if getattr(args, "model_config", None) else {}
    overrides = {
        "unit_vocab": spec.unit_vocab,
        "text_vocab": spec.text_vocab,
        "feat_dim": spec.feat_dim,
        "mtp_variant": args.variant,
        "n_future": args.n_future,
        "attach_layer": args.attach_layer,
        "mtp_head_layers": args.mtp_head_layers,
    }
    return dataclass_from_kv(ModelConfig, base, {k: v for k, v in overrides.items() if v is not None})


def cmd_train(args) -> int:
    spec = _load_task(args.data)
    samples = _load_split(args.data, spec, "train")
    cfg = _model_config_for(spec, args)
    train_base = read_kv(args.train_config) if args.train_config else {}
    tcfg = dataclass_from_kv(TrainConfig, train_base, {
        "steps": args.steps, "batch_size": args.batch_size, "peak_lr": args.peak_lr,
        "warmup_steps": args.warmup_steps, "seed": args.seed,
        "log_every": args.log_every, "checkpoint_every": args.checkpoint_every,
    })
    weights_base = read_kv(args.weights_config) if args.weights_config else {}
    weights = dataclass_from_kv(LossWeights, weights_base, {
        "w_ctc": args.w_ctc, "w_mtp": args.w_mtp,
        "w_aux_src": args.w_aux, "w_aux_tgt": args.w_aux,
    })
    out = args.out or os.path.join(_out_root(), "runs", f"{cfg.mtp_variant}-s{tcfg.seed}")
    os.makedirs(out, exist_ok=True)
    write_kv(os.path.join(out, "task.kv"), spec)
    write_kv(os.path.join(out, "model.kv"), cfg)
    write_kv(os.path.join(out, "train.kv"), tcfg)
    write_kv(os.path.join(out, "weights.kv"), weights)

    model = Model(cfg, seed=tcfg.seed)
    result = train(model, samples, spec, tcfg, weights, out_dir=out,
                   resume_from=args.resume_from)
    _write_manifest(out, {
        "run_id": f"{cfg.mtp_variant}-s{tcfg.seed}",
        "dataset": os.path.abspath(args.data),
        "checkpoint": result.final_checkpoint,
        "train_log": result.log_path,
    })
    print(f"trained {cfg.mtp_variant} seed {tcfg.seed}: {result.steps_run} steps, "
          f"final total {result.last_total:.4f} -> {out}")
    return 0


def _load_run_model(run_dir) -> tuple[Model, TaskSpec]:
    spec = dataclass_from_kv(TaskSpec, read_kv(os.path.join(run_dir, "task.kv")))
    cfg = dataclass_from_kv(ModelConfig, read_kv(os.path.join(run_dir, "model.kv")))
    model = Model(cfg, seed=0)
    model.load_checkpoint(os.path.join(run_dir, "ckpt_final.bin"))
    return model, spec


def cmd_eval(args) -> int:
    model, spec = _load_run_model(args.run)
    samples = _load_split(args.data, spec, args.split)
    max_len = args.max_len or spec.max_decode_len()
    beams = [int(b) for b in args.beams.split(",")]
    refs = [s.y_text for s in samples]
    artifacts = []
    bleu_rows = []
    for beam in beams:
        records = decode_corpus(model, samples, beam=beam, max_len=max_len,
                                keep_distributions=args.dump_dists and beam == 1,
                                length_norm=args.length_norm)
        hyps = [collapse_units(r.tokens, spec) for r in records]
        bleu = corpus_bleu(hyps, refs)
        name = "dump_greedy.jsonl" if beam == 1 else f"dump_beam{beam}.jsonl"
        write_decode_dump(os.path.join(args.run, name), records)
        artifacts.append(name)
        mode = "greedy" if beam == 1 else f"beam{beam}"
        bleu_rows.append((mode, bleu, len(records)))
        print(f"{mode}: BLEU {bleu:.3f} over {len(records)} samples")
    with open(os.path.join(args.run, "eval_bleu.csv"), "w") as fh:
        fh.write("mode,bleu,n_samples\n")
        for mode, bleu, n in bleu_rows:
            fh.write(f"{mode},{bleu:.6f},{n}\n")
    artifacts.append("eval_bleu.csv")
    _write_manifest(args.run, {"eval_split": args.split, "eval_artifacts": artifacts})
    return 0


def cmd_analyze(args) -> int:
    records = read_decode_dump(os.path.join(args.run, "dump_greedy.jsonl"))
    cfg = dataclass_from_kv(ModelConfig, read_kv(os.path.join(args.run, "model.kv")))
    shift = corpus_shift_report([r.frame_labels for r in records])
    with open(os.path.join(args.run, "shift_report.csv"), "w") as fh:
        fh.write("sample_id,first_occurrence_mean\n")
        kept = [r for r in records if any(f != 0 for f in r.frame_labels)]
        for record, value in zip(kept, shift.per_sample):
            fh.write(f"{record.id},{value:.6f}\n")
    with open(os.path.join(args.run, "shift_summary.csv"), "w") as fh:
        fh.write("corpus_mean,pooled_mean,n_tokens,skipped\n")
        fh.write(f"{shift.corpus_mean:.6f},{shift.pooled_mean:.6f},{shift.n_tokens},{shift.skipped}\n")
    entropies = [e for r in records for e in r.step_entropies]
    hist = entropy_histogram(entropies, cfg.unit_vocab)
    with open(os.path.join(args.run, "entropy_hist.csv"), "w") as fh:
        fh.write("bin_lo,bin_hi,frequency\n")
        for i, f in enumerate(hist.frequencies):
            fh.write(f"{hist.bin_edges[i]:.6f},{hist.bin_edges[i + 1]:.6f},{f:.9f}\n")
    _write_manifest(args.run, {
        "analysis_artifacts": ["shift_report.csv", "shift_summary.csv", "entropy_hist.csv"],
    })
    print(f"shift corpus mean {shift.corpus_mean:.4f} ({shift.skipped} skipped), "
          f"{len(entropies)} entropy samples")
    return 0


def cmd_grad_check(args) -> int:
    results = run_gradient_suite(seeds=args.seeds, eps=args.eps, tol=args.tol,
                                 max_coords=args.max_coords)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:32s} worst={r.worst:.3e}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed "
          f"({args.seeds} seeds, eps={args.eps}, tol={args.tol})")
    return 1 if failed else 0


def _runs_from_args(args) -> list[RunPaths]:
    runs = []
    for entry in args.run or []:
        variant, seed, run_dir = entry.split(",", 2)
        runs.append(RunPaths(variant=variant, seed=int(seed), run_dir=run_dir))
    if args.matrix_dir:
        runs_root = os.path.join(args.matrix_dir, "runs")
        for name in sorted(os.listdir(runs_root)):
            if "-s" not in name:
                continue
            variant, seed = name.rsplit("-s", 1)
            runs.append(RunPaths(variant=variant, seed=int(seed),
                                 run_dir=os.path.join(runs_root, name)))
    return runs


def cmd_report(args) -> int:
    runs = _runs_from_args(args)
    if not runs:
        print("no runs given: pass --run variant,seed,dir or --matrix-dir", file=sys.stderr)
        return 2
    spec = _load_task(args.data)
    out = args.out or os.path.join(_out_root(), "report")
    written = render_reports(runs, out, unit_vocab=spec.unit_vocab)
    for path in written:
        print(f"wrote {path}")
    return 0


def _child_env() -> dict:
    env = dict(os.environ)
    for key in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        env[key] = "1"
    return env


def cmd_run_matrix(args) -> int:
    variants = args.variants.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    out = args.out or os.path.join(_out_root(), "matrix")
    runs_root = os.path.join(out, "runs")
    os.makedirs(runs_root, exist_ok=True)
    combos = [(v, s) for v in variants for s in seeds]

    def launch(combo) -> tuple[str, int]:
        variant, seed = combo
        run_dir = os.path.join(runs_root, f"{variant}-s{seed}")
        base = [sys.executable, "-m", "s2ut_lab.cli"]
        stages = [
            base + ["train", "--data", args.data, "--out", run_dir,
                    "--variant", variant, "--seed", str(seed)]
            + (["--steps", str(args.steps)] if args.steps else [])
            + (["--warmup-steps", str(args.warmup_steps)] if args.warmup_steps else [])
            + (["--n-future", str(args.n_future)] if args.n_future else []),
            base + ["eval", "--data", args.data, "--run", run_dir, "--split", args.split],
            base + ["analyze", "--run", run_dir],
        ]
        for stage in stages:
            proc = subprocess.run(stage, env=_child_env(), capture_output=True, text=True)
            if proc.returncode != 0:
                sys.stderr.write(proc.stdout + proc.stderr)
                return f"{variant}-s{seed}", proc.returncode
        return f"{variant}-s{seed}", 0

    jobs = args.jobs or min(len(combos), os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        outcomes = list(pool.map(launch, combos))
    failed = [name for name, code in outcomes if code != 0]
    if failed:
        print(f"failed runs: {', '.join(failed)}", file=sys.stderr)
        return 1
    runs = [RunPaths(variant=v, seed=s, run_dir=os.path.join(runs_root, f"{v}-s{s}"))
            for v, s in combos]
    spec = _load_task(args.data)
    written = render_reports(runs, os.path.join(out, "report"), unit_vocab=spec.unit_vocab)
    print(f"matrix complete: {len(combos)} runs, report in {os.path.join(out, 'report')}")
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s2ut-lab",
        description="Desk-scale speech-to-unit translation lab with multi-token prediction losses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic translation dataset")
    p.add_argument("--out")
    p.add_argument("--task-config")
    for name, typ in (("seed", int), ("n-semantic", int), ("expansion-min", int),
                      ("expansion-max", int), ("units-per-semantic", int),
                      ("sent-len-min", int), ("sent-len-max", int), ("feat-dim", int),
                      ("feat-noise-sigma", float), ("n-train", int), ("n-dev", int),
                      ("n-test", int)):
        p.add_argument(f"--{name}", type=typ)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one loss variant")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--variant", choices=["none", "parallel_linear", "deepseek_v3", "vocalnet", "s2ut"])
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--peak-lr", type=float)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--n-future", type=int)
    p.add_argument("--attach-layer", type=int)
    p.add_argument("--mtp-head-layers", type=int)
    p.add_argument("--w-ctc", type=float)
    p.add_argument("--w-mtp", type=float)
    p.add_argument("--w-aux", type=float)
    p.add_argument("--model-config")
    p.add_argument("--train-config")
    p.add_argument("--weights-config")
    p.add_argument("--resume-from")
    p.set_defaults(func=cmd_train, variant="none")

    p = sub.add_parser("eval", help="decode a split and score BLEU")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--beams", default="1,5,10")
    p.add_argument("--max-len", type=int)
    p.add_argument("--dump-dists", action="store_true")
    p.add_argument("--length-norm", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="entropy and forward-shift reports from dumps")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--max-coords", type=int, default=16)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("report", help="aggregate run artifacts into tables and plots")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--run", action="append", help="variant,seed,run_dir (repeatable)")
    p.add_argument("--matrix-dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run-matrix", help="train/eval/analyze a variant x seed grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--variants", default="none,parallel_linear,deepseek_v3,vocalnet,s2ut")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--steps", type=int)
    p.add_argument("--warmup-steps", type=int)
    p.add_argument("--n-future", type=int)
    p.add_argument("--split", default="test")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_run_matrix)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
