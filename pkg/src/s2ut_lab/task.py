"""Synthetic sparse-semantics translation task.

Semantic tokens translate through a fixed seeded permutation of the
vocabulary; each target semantic token expands into several unit tokens
drawn from a per-token sub-vocabulary whose first member is a deterministic
onset unit. Several units therefore span one semantic token, and collapsing
units at onset boundaries recovers the target text exactly, which makes the
collapse the task's detokenizer-plus-recognizer stand-in for evaluation.

Source "speech" features are fixed per-token embeddings plus Gaussian noise,
so the encoder sees continuous, noisy input without any audio tooling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .losses import UnitSequence, ctc_feasible


@dataclass
class TaskSpec:
    seed: int = 0
    n_semantic: int = 40
    expansion_min: int = 2
    expansion_max: int = 5
    units_per_semantic: int = 8
    sent_len_min: int = 3
    sent_len_max: int = 8
    feat_dim: int = 16
    feat_noise_sigma: float = 0.05
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200

    def __post_init__(self):
        if self.expansion_min < 1 or self.expansion_max < self.expansion_min:
            raise ValueError("expansion range must satisfy 1 <= min <= max")
        if self.sent_len_min < 1 or self.sent_len_max < self.sent_len_min:
            raise ValueError("sentence length range must satisfy 1 <= min <= max")
        if self.units_per_semantic < 1 or self.n_semantic < 2:
            raise ValueError("need units_per_semantic >= 1 and n_semantic >= 2")
        if self.units_per_semantic == 1 and self.expansion_max > 1:
            raise ValueError(
                "units_per_semantic == 1 forces expansion 1: fillers would collide with onsets"
            )

    # unit vocab: per-semantic blocks then bos/eos/pad
    @property
    def unit_vocab(self) -> int:
        return self.n_semantic * self.units_per_semantic + 3

    @property
    def unit_bos(self) -> int:
        return self.unit_vocab - 3

    @property
    def unit_eos(self) -> int:
        return self.unit_vocab - 2

    @property
    def unit_pad(self) -> int:
        return self.unit_vocab - 1

    # text vocab: blank, semantic tokens, bos/eos/pad
    @property
    def text_vocab(self) -> int:
        return self.n_semantic + 4

    def onset_unit(self, semantic: int) -> int:
        return semantic * self.units_per_semantic

    def unit_group(self, unit: int) -> int:
        if not (0 <= unit < self.n_semantic * self.units_per_semantic):
            raise ValueError(f"unit id {unit} has no semantic group")
        return unit // self.units_per_semantic

    def text_ids(self, semantic_seq) -> list[int]:
        """Semantic ids to text-token ids (blank occupies 0)."""
        return [int(s) + 1 for s in semantic_seq]

    def max_decode_len(self) -> int:
        return 2 + self.expansion_max * self.sent_len_max


@dataclass
class Sample:
    id: str
    src_tokens: list[int]
    src_feats: np.ndarray           # (len, feat_dim)
    x_text: list[int]               # source semantic ids
    y_text: list[int]               # target semantic ids (permutation image)
    units: UnitSequence             # expanded target units + eos


@dataclass
class Dataset:
    spec: TaskSpec
    splits: dict[str, list[Sample]] = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[Sample]:
        return self.splits[split]


def semantic_permutation(spec: TaskSpec) -> np.ndarray:
    return np.random.default_rng([spec.seed, 99]).permutation(spec.n_semantic)


def semantic_embeddings(spec: TaskSpec) -> np.ndarray:
    return np.random.default_rng([spec.seed, 7]).normal(size=(spec.n_semantic, spec.feat_dim))


def _expand(spec: TaskSpec, semantic: int, count: int, rng) -> list[int]:
    base = spec.onset_unit(semantic)
    units = [base]
    if count > 1:
        units += [int(base + 1 + v) for v in rng.integers(0, spec.units_per_semantic - 1, size=count - 1)]
    return units


def _draw_sample(spec: TaskSpec, perm, sem_emb, rng, sample_id: str) -> Sample:
    while True:
        length = int(rng.integers(spec.sent_len_min, spec.sent_len_max + 1))
        src = rng.integers(0, spec.n_semantic, size=length)
        y = perm[src]
        counts = rng.integers(spec.expansion_min, spec.expansion_max + 1, size=length)
        if ctc_feasible(int(counts.sum()), [int(v) for v in y]):
            break
    units: list[int] = []
    for semantic, count in zip(y, counts):
        units.extend(_expand(spec, int(semantic), int(count), rng))
    feats = sem_emb[src] + rng.normal(0.0, spec.feat_noise_sigma, size=(length, spec.feat_dim))
    return Sample(
        id=sample_id,
        src_tokens=[int(v) for v in src],
        src_feats=feats,
        x_text=[int(v) for v in src],
        y_text=[int(v) for v in y],
        units=UnitSequence(tuple(units) + (spec.unit_eos,), spec.unit_bos, spec.unit_eos, spec.unit_pad),
    )


def generate_dataset(spec: TaskSpec) -> Dataset:
    """Deterministic function of spec.seed: same spec, byte-identical data."""
    perm = semantic_permutation(spec)
    sem_emb = semantic_embeddings(spec)
    sizes = {"train": spec.n_train, "dev": spec.n_dev, "test": spec.n_test}
    splits: dict[str, list[Sample]] = {}
    for idx, (name, size) in enumerate(sizes.items()):
        rng = np.random.default_rng([spec.seed, idx])
        splits[name] = [_draw_sample(spec, perm, sem_emb, rng, f"{name}-{i}") for i in range(size)]
    return Dataset(spec=spec, splits=splits)


def collapse_units(units, spec: TaskSpec) -> list[int]:
    """Inverse of expansion: segment at onset units or group changes.

    Reserved ids (bos/eos/pad) are skipped; ids outside the vocabulary are
    data errors.
    """
    ids = units.ids if isinstance(units, UnitSequence) else units
    out: list[int] = []
    prev_group = None
    for u in ids:
        u = int(u)
        if u in (spec.unit_bos, spec.unit_eos, spec.unit_pad):
            prev_group = None
            continue
        if not (0 <= u < spec.unit_vocab):
            raise ValueError(f"unknown unit id {u}")
        group = spec.unit_group(u)
        if u == spec.onset_unit(group) or group != prev_group:
            out.append(group)
        prev_group = group
    return out


# ---------------------------------------------------------------------------
# JSON-lines persistence
# ---------------------------------------------------------------------------

_FIELDS = ("id", "src_tokens", "x_text", "y_text", "units", "src_feats")


def write_dataset(path, samples: list[Sample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({
                "id": s.id,
                "src_tokens": s.src_tokens,
                "x_text": s.x_text,
                "y_text": s.y_text,
                "units": list(s.units.ids),
                "src_feats": [list(row) for row in s.src_feats.tolist()],
            }, sort_keys=True) + "\n")


def read_dataset(path, spec: TaskSpec) -> list[Sample]:
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc})") from exc
            for fname in _FIELDS:
                if fname not in rec:
                    raise ValueError(f"{path}:{lineno}: missing field {fname!r}")
            samples.append(Sample(
                id=rec["id"],
                src_tokens=[int(v) for v in rec["src_tokens"]],
                src_feats=np.asarray(rec["src_feats"], dtype=np.float64),
                x_text=[int(v) for v in rec["x_text"]],
                y_text=[int(v) for v in rec["y_text"]],
                units=UnitSequence(tuple(int(v) for v in rec["units"]),
                                   spec.unit_bos, spec.unit_eos, spec.unit_pad),
            ))
    return samples
