"""Toy fusion reader: per-passage encoding, attention pooling, class prediction.

Each passage is encoded independently (question prepended) by a small
shared encoder whose layers mix token states with their sequence mean, so
the question can inform passage representations. Slot 0 of the hidden
states holds the encoded question itself; slots 1..P hold the passages in
retrieval-rank order. Prediction pools every (slot, position) state with
additive attention and classifies the pooled vector.

Pooling is rank-agnostic by default. With ``rank_aware_pooling`` enabled,
a learned per-slot bias joins the attention scores, which gives the model
a rank-exploiting pathway; the bias table has fixed capacity so the
parameter count never depends on the passage count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .taskgen import Example, PAD_TOKEN

MAX_RANKS = 32


@dataclass(frozen=True)
class ReaderConfig:
    width: int = 32
    depth: int = 2
    rank_aware_pooling: bool = False
    # Attention scores are multiplied by this constant before the softmax;
    # with bounded keys the pooling stays too diffuse to train without it.
    score_scale: float = 8.0

    def __post_init__(self):
        if self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}")
        if self.depth not in (1, 2):
            raise ConfigError(f"depth must be 1 or 2, got {self.depth}")
        if self.score_scale <= 0:
            raise ConfigError(f"score_scale must be > 0, got {self.score_scale}")


@dataclass
class HiddenStates:
    """Final-layer states, shape (P+1, len, d); slot i is rank i for i >= 1."""

    values: Tensor

    @property
    def passages(self) -> int:
        return self.values.shape[0] - 1


class ReaderParams:
    """Named leaf tensors for the encoder, pooling, and classifier."""

    def __init__(self, tensors: dict[str, Tensor], vocab: int, classes: int, config: ReaderConfig):
        self.tensors = tensors
        self.vocab = vocab
        self.classes = classes
        self.config = config

    @classmethod
    def init(cls, vocab: int, classes: int, config: ReaderConfig, seed: int) -> "ReaderParams":
        rng = np.random.default_rng(seed)
        d = config.width
        bound = 1.0 / np.sqrt(d)

        def u(*shape):
            return ad.tensor(rng.uniform(-bound, bound, shape))

        tensors: dict[str, Tensor] = {"embed": u(vocab, d)}
        for layer in range(config.depth):
            tensors[f"enc{layer}_w"] = u(d, d)
            tensors[f"enc{layer}_b"] = u(d)
            tensors[f"enc{layer}_ctx"] = u(d, d)
        tensors["attn_w"] = u(d, d)
        tensors["attn_b"] = u(d)
        tensors["attn_v"] = u(d, 1)
        tensors["rank_bias"] = u(MAX_RANKS, 1)
        tensors["cls_w"] = u(d, classes)
        tensors["cls_b"] = u(classes)
        return cls(tensors, vocab, classes, config)

    def copy(self) -> "ReaderParams":
        return ReaderParams(
            {name: ad.tensor(t.data.copy()) for name, t in self.tensors.items()},
            self.vocab,
            self.classes,
            self.config,
        )

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


def _pad_question(question, plen: int) -> list[int]:
    q = list(question)
    if len(q) >= plen:
        return q[-plen:]
    return [PAD_TOKEN] * (plen - len(q)) + q


def _encode_tokens(tokens: np.ndarray, block: int, params: ReaderParams) -> Tensor:
    """Run the shared encoder over flat token rows grouped in blocks."""
    states = ad.take_rows(params["embed"], tokens)
    for layer in range(params.config.depth):
        linear = ad.add_row(ad.matmul(states, params[f"enc{layer}_w"]), params[f"enc{layer}_b"])
        context = ad.matmul(ad.block_mean(states, block), params[f"enc{layer}_ctx"])
        states = ad.tanh(ad.add(linear, ad.repeat_rows(context, block)))
    return states


def _encode_batch(examples, params: ReaderParams) -> Tensor:
    """Encode a batch of same-shaped examples into (B*(P+1), len, d)."""
    batch = len(examples)
    first = examples[0]
    passages = len(first.passages)
    plen = len(first.passages[0])
    qlen = len(first.question)
    for ex in examples:
        if len(ex.passages) != passages or len(ex.passages[0]) != plen or len(ex.question) != qlen:
            raise DimensionError("encode: examples in a batch must share shapes")

    seq_len = qlen + plen
    pass_tokens = np.empty((batch * passages, seq_len), dtype=np.intp)
    q0_tokens = np.empty((batch, plen), dtype=np.intp)
    for b, ex in enumerate(examples):
        q = np.asarray(ex.question, dtype=np.intp)
        for i, passage in enumerate(ex.passages):
            row = pass_tokens[b * passages + i]
            row[:qlen] = q
            row[qlen:] = passage
        q0_tokens[b] = _pad_question(ex.question, plen)

    question_states = _encode_tokens(q0_tokens.ravel(), plen, params)
    passage_full = _encode_tokens(pass_tokens.ravel(), seq_len, params)

    # Keep only the passage positions of each (question ++ passage) block.
    tail = (np.arange(batch * passages)[:, None] * seq_len + np.arange(qlen, seq_len)[None, :]).ravel()
    passage_states = ad.take_rows(passage_full, tail, unique=True)

    # Interleave: for each example, its question slot then its P passages.
    stacked = ad.concat_rows([question_states, passage_states])
    order = np.empty(batch * (passages + 1) * plen, dtype=np.intp)
    span = (passages + 1) * plen
    for b in range(batch):
        order[b * span : b * span + plen] = b * plen + np.arange(plen)
        order[b * span + plen : (b + 1) * span] = (
            batch * plen + b * passages * plen + np.arange(passages * plen)
        )
    arranged = ad.take_rows(stacked, order, unique=True)
    d = params.config.width
    return ad.reshape(arranged, (batch * (passages + 1), plen, d))


def encode(example: Example, params: ReaderParams) -> HiddenStates:
    """Encode one example; passages do not interact below the pooling stage."""
    return HiddenStates(_encode_batch([example], params))


def _predict_batch(values: Tensor, batch: int, params: ReaderParams) -> Tensor:
    """Log-distributions over classes for batched hidden states."""
    rows, plen, d = values.shape
    if rows % batch:
        raise DimensionError(f"predict: {rows} slot rows do not tile batch {batch}")
    slots = rows // batch

    flat = ad.reshape(values, (rows * plen, d))
    keys = ad.tanh(ad.add_row(ad.matmul(flat, params["attn_w"]), params["attn_b"]))
    scores = ad.matmul(keys, params["attn_v"])
    if params.config.rank_aware_pooling:
        if slots > MAX_RANKS:
            raise DimensionError(f"predict: {slots} slots exceed rank-bias capacity {MAX_RANKS}")
        slot_of_row = np.repeat(np.tile(np.arange(slots), batch), plen)
        scores = ad.add(scores, ad.take_rows(params["rank_bias"], slot_of_row))
    scores = ad.scale(scores, params.config.score_scale)
    attn = ad.softmax_rows(ad.reshape(scores, (batch, slots * plen)))
    pooled = ad.attend(attn, flat)
    logits = ad.add_row(ad.matmul(pooled, params["cls_w"]), params["cls_b"])
    return ad.log_softmax_rows(logits)


def predict(h: HiddenStates, params: ReaderParams) -> Tensor:
    """Log-distribution over classes, shape (1, C)."""
    return _predict_batch(h.values, 1, params)


def loss(example: Example, h: HiddenStates, params: ReaderParams) -> Tensor:
    return ad.nll_loss(predict(h, params), example.label)


def batch_loss(examples, params: ReaderParams, mask_fn=None) -> Tensor:
    """Mean prediction loss over a batch, optionally mask-transformed.

    ``mask_fn(values, batch)`` receives the batched hidden states
    (B*(P+1), len, d) and must return a tensor of compatible layout.
    """
    values = _encode_batch(examples, params)
    if mask_fn is not None:
        values = mask_fn(values, len(examples))
    log_probs = _predict_batch(values, len(examples), params)
    labels = np.array([ex.label for ex in examples], dtype=np.intp)
    return ad.nll_mean(log_probs, labels)


def evaluate(split, params: ReaderParams, transform=None, rng=None, batch_size: int = 64) -> float:
    """Fraction of argmax-correct predictions, optionally mask-transformed.

    ``transform(slot_states, rng)`` maps one example's (P+1, len, d) array
    to the array actually fed to the predictor.
    """
    split = list(split)
    if not split:
        raise ContractError("evaluate: empty split")
    correct = 0
    for start in range(0, len(split), batch_size):
        chunk = split[start : start + batch_size]
        batch = len(chunk)
        values = _encode_batch(chunk, params).data
        slots = values.shape[0] // batch
        per_example = values.reshape(batch, slots, values.shape[1], values.shape[2])
        if transform is not None:
            per_example = np.stack([transform(arr, rng) for arr in per_example])
        flat = ad.tensor(per_example.reshape(-1, per_example.shape[2], per_example.shape[3]))
        log_probs = _predict_batch(flat, batch, params).data
        predictions = log_probs.argmax(axis=1)
        correct += int(sum(int(p == ex.label) for p, ex in zip(predictions, chunk)))
    return correct / len(split)


def save_checkpoint(path, params: ReaderParams, mask_logits: np.ndarray | None = None, candidates=None) -> None:
    """Flat named-tensor record; bit-exact round trip via numpy binary."""
    arrays = {f"param/{name}": t.data for name, t in params.tensors.items()}
    arrays["meta/dims"] = np.array(
        [params.vocab, params.classes, params.config.width, params.config.depth,
         int(params.config.rank_aware_pooling)],
        dtype=np.int64,
    )
    if mask_logits is not None:
        arrays["mask_logits"] = np.asarray(mask_logits, dtype=np.float64)
        arrays["mask_candidates"] = np.array(
            [",".join(str(p) for p in cand) for cand in (candidates or [])], dtype="U64"
        )
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns (ReaderParams, mask_logits or None, candidate position tuples or None)."""
    with np.load(path) as data:
        vocab, classes, width, depth, rank_aware = (int(v) for v in data["meta/dims"])
        config = ReaderConfig(width=width, depth=depth, rank_aware_pooling=bool(rank_aware))
        tensors = {
            key[len("param/"):]: ad.tensor(data[key])
            for key in data.files
            if key.startswith("param/")
        }
        params = ReaderParams(tensors, vocab, classes, config)
        mask_logits = data["mask_logits"].copy() if "mask_logits" in data.files else None
        candidates = None
        if "mask_candidates" in data.files:
            candidates = [tuple(int(p) for p in s.split(",")) for s in data["mask_candidates"]]
    return params, mask_logits, candidates
