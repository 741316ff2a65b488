"""Passage-mask mechanism: candidate spaces, hard and relaxed application.

A mask candidate is a set of retrieval ranks whose hidden states get
zeroed. The relaxed form mixes all candidates of a space with softmax
weights from learnable selection logits; discretization collapses each
selection row to its argmax candidate. The two conventional baselines
(per-passage mask and per-entry dropout, both with survivor scaling
1/(1-p)) live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .reader import HiddenStates


@dataclass(frozen=True)
class MaskCandidate:
    """Sorted set of 1-based rank positions to zero."""

    positions: tuple[int, ...]

    def __post_init__(self):
        pos = tuple(sorted(int(p) for p in self.positions))
        if len(set(pos)) != len(pos):
            raise ConfigError(f"positions contain duplicates: {self.positions}")
        if pos and pos[0] < 1:
            raise ConfigError(f"positions must be >= 1, got {self.positions}")
        object.__setattr__(self, "positions", pos)

    def __str__(self):
        return "(" + ",".join(str(p) for p in self.positions) + ")"


@dataclass(frozen=True)
class CandidateSpace:
    candidates: tuple[MaskCandidate, ...]

    def __post_init__(self):
        if not self.candidates:
            raise ConfigError("candidate space must hold at least one candidate")
        if len(set(self.candidates)) != len(self.candidates):
            raise ConfigError("candidate space contains duplicates")

    @property
    def size(self) -> int:
        return len(self.candidates)

    def __getitem__(self, k: int) -> MaskCandidate:
        return self.candidates[k]

    def __iter__(self):
        return iter(self.candidates)


def default_space(passages: int) -> CandidateSpace:
    """The six rank pairs drawn from the top four retrieval positions."""
    if passages < 4:
        raise ConfigError(f"passages must be >= 4 for the default space, got {passages}")
    pairs = [(1, 2), (1, 3), (1, 4), (2, 3), (2, 4), (3, 4)]
    return CandidateSpace(tuple(MaskCandidate(p) for p in pairs))


def extended_space(passages: int) -> CandidateSpace:
    """Default pairs plus every singleton rank; 16 candidates at P = 10."""
    base = list(default_space(passages).candidates)
    base.extend(MaskCandidate((r,)) for r in range(1, passages + 1))
    return CandidateSpace(tuple(base))


class MaskParams:
    """Learnable selection logits, one row per selection vector."""

    def __init__(self, logits: Tensor):
        rows, cols = logits.shape
        if rows < 1:
            raise ConfigError(f"selection rows must be >= 1, got {rows}")
        if rows >= cols:
            raise ConfigError(f"selection rows must be < candidate count, got {rows} >= {cols}")
        if not np.isfinite(logits.data).all():
            raise ConfigError("logits must be finite")
        self.logits = logits

    @classmethod
    def zeros(cls, selectors: int, space: CandidateSpace) -> "MaskParams":
        return cls(ad.tensor(np.zeros((selectors, space.size))))

    @property
    def selectors(self) -> int:
        return self.logits.shape[0]

    def copy(self) -> "MaskParams":
        return MaskParams(ad.tensor(self.logits.data.copy()))


def _candidate_factors(slots: int, candidate: MaskCandidate, rescale: bool) -> np.ndarray:
    """Per-slot multipliers for one example: slot 0 is the question slot."""
    passages = slots - 1
    for p in candidate.positions:
        if p > passages:
            raise IndexError(f"candidate position {p} out of range for {passages} passages")
    factors = np.ones(slots)
    if rescale and candidate.positions:
        factors[1:] = passages / (passages - len(candidate.positions))
    factors[list(candidate.positions)] = 0.0
    return factors


def _apply_candidate_values(values: Tensor, batch: int, candidate: MaskCandidate, rescale: bool) -> Tensor:
    slots = values.shape[0] // batch
    factors = np.tile(_candidate_factors(slots, candidate, rescale), batch)
    return ad.mul_const(values, factors[:, None, None])


def apply_candidate(h: HiddenStates, candidate: MaskCandidate, rescale: bool = False) -> HiddenStates:
    """Zero the candidate's passages; optionally scale survivors by P/(P-|o|)."""
    return HiddenStates(_apply_candidate_values(h.values, 1, candidate, rescale))


def _relaxed_mix_values(values: Tensor, batch: int, params: MaskParams, space: CandidateSpace, s: int) -> Tensor:
    if not (0 <= s < params.selectors):
        raise IndexError(f"selection index {s} out of range for {params.selectors} rows")
    weights = ad.softmax_rows(ad.slice_rows(params.logits, s, s + 1))
    mixed = None
    for k, candidate in enumerate(space):
        part = ad.scalar_mul(
            _apply_candidate_values(values, batch, candidate, rescale=False),
            ad.pick(weights, 0, k),
        )
        mixed = part if mixed is None else ad.add(mixed, part)
    return mixed


def relaxed_mix(h: HiddenStates, params: MaskParams, space: CandidateSpace, s: int) -> HiddenStates:
    """Softmax-weighted mixture of all hard-masked variants for selector s."""
    return HiddenStates(_relaxed_mix_values(h.values, 1, params, space, s))


def discretize(params: MaskParams, space: CandidateSpace) -> list[MaskCandidate]:
    """Argmax candidate per selection row; ties resolve to the lowest index."""
    return [space[int(k)] for k in params.logits.data.argmax(axis=1)]


def _vanilla_factors(slots: int, batch: int, rate: float, rng) -> np.ndarray:
    keep = rng.random((batch, slots - 1)) >= rate
    factors = np.ones((batch, slots))
    factors[:, 1:] = keep / (1.0 - rate)
    return factors.ravel()


def _vanilla_mask_values(values: Tensor, batch: int, rate: float, rng) -> Tensor:
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"mask rate must be in [0, 1), got {rate}")
    slots = values.shape[0] // batch
    return ad.mul_const(values, _vanilla_factors(slots, batch, rate, rng)[:, None, None])


def vanilla_mask(h: HiddenStates, rate: float, rng) -> HiddenStates:
    """Drop each passage independently; survivors scale by 1/(1-p)."""
    return HiddenStates(_vanilla_mask_values(h.values, 1, rate, rng))


def _dimension_dropout_values(values: Tensor, batch: int, rate: float, rng) -> Tensor:
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    slots = values.shape[0] // batch
    factors = np.ones(values.shape)
    body = factors.reshape(batch, slots, *values.shape[1:])[:, 1:]
    keep = rng.random(body.shape) >= rate
    body[...] = keep / (1.0 - rate)
    return ad.mul_const(values, factors)


def dimension_dropout(h: HiddenStates, rate: float, rng) -> HiddenStates:
    """Standard dropout on passage states, entry by entry, with 1/(1-p) scaling."""
    return HiddenStates(_dimension_dropout_values(h.values, 1, rate, rng))


# Evaluation-time transforms operate on one example's (P+1, len, d) array.

def eval_mask_ranks(ranks) -> callable:
    ranks = tuple(int(r) for r in ranks)

    def transform(states: np.ndarray, rng=None) -> np.ndarray:
        out = states.copy()
        for r in ranks:
            if not (1 <= r < states.shape[0]):
                raise IndexError(f"rank {r} out of range for {states.shape[0] - 1} passages")
            out[r] = 0.0
        return out

    return transform


def eval_permute_top(k: int) -> callable:
    def transform(states: np.ndarray, rng) -> np.ndarray:
        if not (1 <= k < states.shape[0]):
            raise IndexError(f"cannot permute top {k} of {states.shape[0] - 1} passages")
        out = states.copy()
        out[1 : k + 1] = states[1 : k + 1][rng.permutation(k)]
        return out

    return transform


def eval_remove_rank(rank: int) -> callable:
    def transform(states: np.ndarray, rng=None) -> np.ndarray:
        if not (1 <= rank < states.shape[0]):
            raise IndexError(f"rank {rank} out of range for {states.shape[0] - 1} passages")
        return np.delete(states, rank, axis=0)

    return transform
