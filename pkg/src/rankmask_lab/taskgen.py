"""Synthetic ranked-retrieval classification tasks.

Each example is a question plus P passages ordered by retrieval rank.
Exactly one passage carries the evidence bigram (evidence marker followed
by a class token); the label is decodable from that bigram alone. During
training-split generation the evidence rank is skewed toward rank 1 by
``rank_bias``, which is what makes rank overfitting inducible.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError

# Reserved vocabulary ids. Structural markers mimic the "question:",
# "title:" and "context:" prefixes of real retriever-reader inputs.
PAD_TOKEN = 0
QUESTION_MARK = 1
TITLE_MARK = 2
CONTEXT_MARK = 3
EVIDENCE_MARK = 4
CLASS_TOKEN_BASE = 5

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TaskConfig:
    passages: int = 10
    passage_len: int = 8
    question_len: int = 6
    classes: int = 8
    vocab: int = 64
    rank_bias: float = 1.1
    decoy_rate: float = 0.5
    evidence_repeats: int = 1
    train_size: int = 2000
    val_size: int = 500
    test_size: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.passages < 5:
            raise ConfigError(f"passages must be >= 5, got {self.passages}")
        if self.classes < 2:
            raise ConfigError(f"classes must be >= 2, got {self.classes}")
        if self.passage_len < 3:
            raise ConfigError(f"passage_len must be >= 3, got {self.passage_len}")
        if self.question_len < 2:
            raise ConfigError(f"question_len must be >= 2, got {self.question_len}")
        if self.rank_bias < 0:
            raise ConfigError(f"rank_bias must be >= 0, got {self.rank_bias}")
        if not (0.0 <= self.decoy_rate < 1.0):
            raise ConfigError(f"decoy_rate must be in [0, 1), got {self.decoy_rate}")
        if not (1 <= self.evidence_repeats <= (self.passage_len - 1) // 2):
            raise ConfigError(
                f"evidence_repeats must be in [1, {(self.passage_len - 1) // 2}], got {self.evidence_repeats}"
            )
        for name in ("train_size", "val_size", "test_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        # Two token bands (question words, passage filler) follow the
        # reserved ids and the per-class evidence tokens.
        if self.vocab < CLASS_TOKEN_BASE + self.classes + 4:
            raise ConfigError(
                f"vocab must be >= {CLASS_TOKEN_BASE + self.classes + 4} "
                f"for {self.classes} classes, got {self.vocab}"
            )

    @property
    def question_band(self) -> tuple[int, int]:
        lo = CLASS_TOKEN_BASE + self.classes
        hi = lo + (self.vocab - lo) // 2
        return lo, hi

    @property
    def filler_band(self) -> tuple[int, int]:
        return self.question_band[1], self.vocab


@dataclass(frozen=True)
class Example:
    question: tuple[int, ...]
    passages: tuple[tuple[int, ...], ...]
    label: int
    evidence_position: int  # 1-based retrieval rank of the evidence passage


class Dataset:
    """Train/val/test splits plus an access log for the audit.

    Reads go through :meth:`split` (or the ``train``/``val``/``test``
    properties), which record ``(split, phase)`` pairs. The harness wraps
    training and evaluation in :meth:`phase` blocks so the audit can prove
    the test split is never touched while training.
    """

    def __init__(self, train, val, test, config: TaskConfig):
        self._splits = {
            "train": tuple(train),
            "val": tuple(val),
            "test": tuple(test),
        }
        self.config = config
        self.access_log: list[tuple[str, str]] = []
        self._phase = "unspecified"

    def split(self, name: str) -> tuple[Example, ...]:
        if name not in self._splits:
            raise ConfigError(f"unknown split {name!r}")
        self.access_log.append((name, self._phase))
        return self._splits[name]

    @property
    def train(self) -> tuple[Example, ...]:
        return self.split("train")

    @property
    def val(self) -> tuple[Example, ...]:
        return self.split("val")

    @property
    def test(self) -> tuple[Example, ...]:
        return self.split("test")

    @contextmanager
    def phase(self, label: str):
        prev = self._phase
        self._phase = label
        try:
            yield self
        finally:
            self._phase = prev

    def test_reads_during(self, phase_prefix: str) -> list[tuple[str, str]]:
        return [rec for rec in self.access_log if rec[0] == "test" and rec[1].startswith(phase_prefix)]


def rank_distribution(passages: int, rank_bias: float) -> np.ndarray:
    """P(rank r) proportional to exp(-rank_bias * (r - 1)); uniform at 0."""
    w = np.exp(-rank_bias * np.arange(passages, dtype=np.float64))
    return w / w.sum()


def _random_band(rng, band: tuple[int, int], n: int) -> np.ndarray:
    return rng.integers(band[0], band[1], size=n)


def _evidence_anchors(rng, config: TaskConfig) -> list[int]:
    """Non-overlapping bigram start offsets inside a passage body."""
    anchors: list[int] = []
    while len(anchors) < config.evidence_repeats:
        pos = int(rng.integers(1, config.passage_len - 1))
        if all(abs(pos - a) >= 2 for a in anchors):
            anchors.append(pos)
    return anchors


def _make_example(rng, config: TaskConfig, rank_probs: np.ndarray) -> Example:
    label = int(rng.integers(config.classes))
    rank = int(rng.choice(config.passages, p=rank_probs)) + 1

    question = np.concatenate(
        [[QUESTION_MARK], _random_band(rng, config.question_band, config.question_len - 1)]
    )

    passages = []
    for i in range(config.passages):
        body = _random_band(rng, config.filler_band, config.passage_len - 1)
        passage = np.concatenate([[CONTEXT_MARK], body])
        if i + 1 == rank:
            for pos in _evidence_anchors(rng, config):
                passage[pos] = EVIDENCE_MARK
                passage[pos + 1] = CLASS_TOKEN_BASE + label
        elif config.decoy_rate > 0 and rng.random() < config.decoy_rate:
            # Decoy: a class token without the marker, so the label stays
            # decodable only through the full bigram.
            pos = int(rng.integers(1, config.passage_len))
            passage[pos] = CLASS_TOKEN_BASE + int(rng.integers(config.classes))
        passages.append(tuple(int(t) for t in passage))

    return Example(
        question=tuple(int(t) for t in question),
        passages=tuple(passages),
        label=label,
        evidence_position=rank,
    )


def _generate_split(seed_seq, n: int, config: TaskConfig, rank_probs: np.ndarray) -> list[Example]:
    rng = np.random.default_rng(seed_seq)
    return [_make_example(rng, config, rank_probs) for _ in range(n)]


def generate(config: TaskConfig) -> Dataset:
    """Deterministically generate a dataset from the config (seed included)."""
    probs = rank_distribution(config.passages, config.rank_bias)
    train_ss, val_ss, test_ss = np.random.SeedSequence(config.seed).spawn(3)
    return Dataset(
        train=_generate_split(train_ss, config.train_size, config, probs),
        val=_generate_split(val_ss, config.val_size, config, probs),
        test=_generate_split(test_ss, config.test_size, config, probs),
        config=config,
    )


def find_evidence(example: Example) -> tuple[int, int]:
    """Locate the evidence bigram: (1-based rank, token offset of the marker)."""
    for i, passage in enumerate(example.passages):
        for j, tok in enumerate(passage):
            if tok == EVIDENCE_MARK:
                return i + 1, j
    raise ValueError("example carries no evidence marker")


def brute_force_decode(example: Example) -> int:
    """Scan all passages for the evidence bigram and read off the label."""
    rank, pos = find_evidence(example)
    return example.passages[rank - 1][pos + 1] - CLASS_TOKEN_BASE


def _move_evidence(example: Example, new_rank: int, rng, config: TaskConfig) -> Example:
    old_rank, _ = find_evidence(example)
    passages = [list(p) for p in example.passages]
    old = passages[old_rank - 1]
    for pos, tok in enumerate(old):
        if tok == EVIDENCE_MARK:
            fresh = _random_band(rng, config.filler_band, 2)
            old[pos] = int(fresh[0])
            old[pos + 1] = int(fresh[1])
    for pos in _evidence_anchors(rng, config):
        passages[new_rank - 1][pos] = EVIDENCE_MARK
        passages[new_rank - 1][pos + 1] = CLASS_TOKEN_BASE + example.label
    return replace(
        example,
        passages=tuple(tuple(p) for p in passages),
        evidence_position=new_rank,
    )


_SHIFT_MODE_CODES = {"uniform": 101, "tail-only": 102}


def shift_test_distribution(dataset: Dataset, mode: str) -> Dataset:
    """Resample the test split's evidence positions; train/val untouched.

    ``uniform`` spreads evidence evenly over all ranks; ``tail-only``
    restricts it to ranks greater than 4.
    """
    if mode not in _SHIFT_MODE_CODES:
        raise ConfigError(f"unknown shift mode {mode!r}; expected one of {sorted(_SHIFT_MODE_CODES)}")
    config = dataset.config
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, _SHIFT_MODE_CODES[mode]]))
    lo = 5 if mode == "tail-only" else 1
    shifted = [
        _move_evidence(ex, int(rng.integers(lo, config.passages + 1)), rng, config)
        for ex in dataset._splits["test"]
    ]
    return Dataset(
        train=dataset._splits["train"],
        val=dataset._splits["val"],
        test=shifted,
        config=config,
    )


def save_dataset(dataset: Dataset, path) -> None:
    """Write one JSON record per line with a leading config header."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {"schema_version": SCHEMA_VERSION, "config": asdict(dataset.config)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for split in ("train", "val", "test"):
            for ex in dataset._splits[split]:
                rec = {
                    "split": split,
                    "question": list(ex.question),
                    "passages": [list(p) for p in ex.passages],
                    "label": ex.label,
                    "evidence_position": ex.evidence_position,
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {header.get('schema_version')}")
        config = TaskConfig(**header["config"])
        splits = {"train": [], "val": [], "test": []}
        for line in fh:
            rec = json.loads(line)
            splits[rec["split"]].append(
                Example(
                    question=tuple(rec["question"]),
                    passages=tuple(tuple(p) for p in rec["passages"]),
                    label=rec["label"],
                    evidence_position=rec["evidence_position"],
                )
            )
    return Dataset(config=config, **splits)
