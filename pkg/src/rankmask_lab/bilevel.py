"""Single-loop joint training of reader weights and mask selection logits.

The inner loop runs plain stochastic gradient descent on the training
loss (through the relaxed mask mixture when mask learning is active).
Every ``outer_every`` steps the selection logits take a step along a
momentum-assisted recursive gradient estimator that combines the current
validation gradient with a corrected previous estimate, using the same
validation batch and the same drawn selector for both gradient
evaluations of the correction term.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import masks as mk
from . import reader as rd
from .errors import ConfigError, ContractError
from .masks import CandidateSpace, MaskParams
from .reader import ReaderParams
from .taskgen import Dataset

PUBLIC_MODES = ("none", "vanilla", "dimension_dropout", "pm", "pm_random_candidate")
ALL_MODES = PUBLIC_MODES + ("pm_fixed_candidate",)


def _as_schedule(value) -> Callable[[int], float]:
    if callable(value):
        return value
    return lambda t: float(value)


@dataclass
class Schedules:
    """Learning-rate and momentum schedules plus loop sizing.

    ``inner_lr``, ``outer_lr`` and ``momentum_mix`` accept either a
    constant or a callable of the step index.
    """

    inner_lr: float | Callable[[int], float] = 0.08
    outer_lr: float | Callable[[int], float] = 0.008
    momentum_mix: float | Callable[[int], float] = 0.9
    outer_every: int = 10
    total_steps: int = 600

    def __post_init__(self):
        if self.outer_every < 1:
            raise ConfigError(f"outer_every must be >= 1, got {self.outer_every}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        for name in ("inner_lr", "outer_lr"):
            v = getattr(self, name)
            if not callable(v) and v < 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")

    def inner_lr_at(self, t: int) -> float:
        return _as_schedule(self.inner_lr)(t)

    def outer_lr_at(self, t: int) -> float:
        return _as_schedule(self.outer_lr)(t)

    def momentum_mix_at(self, t: int) -> float:
        m = _as_schedule(self.momentum_mix)(t)
        if not (0.0 <= m <= 1.0):
            raise ConfigError(f"momentum_mix must be in [0, 1], got {m}")
        return m


@dataclass
class BilevelState:
    """Mutable optimizer state for one training run."""

    rng_batch: np.random.Generator
    rng_select: np.random.Generator
    rng_mask: np.random.Generator
    rng_val: np.random.Generator
    t: int = 0
    grad_estimate: Optional[np.ndarray] = None
    theta_prev: Optional[ReaderParams] = None

    @classmethod
    def from_seed(cls, seed: int) -> "BilevelState":
        batch, select, mask, val = np.random.SeedSequence(seed).spawn(4)
        return cls(
            rng_batch=np.random.default_rng(batch),
            rng_select=np.random.default_rng(select),
            rng_mask=np.random.default_rng(mask),
            rng_val=np.random.default_rng(val),
        )


def sgd_update(params: ReaderParams, grads: dict, lr: float) -> None:
    for t in params.tensors.values():
        g = grads.get(t)
        if g is not None:
            t.data -= lr * g


def inner_step(
    params: ReaderParams,
    mask_params: MaskParams,
    space: CandidateSpace,
    batch,
    schedules: Schedules,
    state: BilevelState,
) -> tuple[ReaderParams, float, int]:
    """One descent step on the batch-mean loss through the relaxed mixture.

    The selection logits participate in the forward pass but receive no
    update here. Returns the (mutated) params, the loss, and the drawn
    selector index.
    """
    s = int(state.rng_select.integers(mask_params.selectors))
    loss_t = rd.batch_loss(
        batch, params, mask_fn=lambda values, b: mk._relaxed_mix_values(values, b, mask_params, space, s)
    )
    grads = ad.backward(loss_t)
    sgd_update(params, grads, schedules.inner_lr_at(state.t))
    return params, loss_t.item(), s


def estimator_update(
    state: BilevelState,
    grad_now: np.ndarray,
    grad_prev_theta: np.ndarray,
    eta: float,
) -> np.ndarray:
    """Recursive momentum estimate from gradients at the current and previous weights.

    Computes eta * g_now + (1 - eta) * (previous_estimate + g_now - g_prev)
    and stores it in the state. Requires an existing previous estimate;
    the first outer step bootstraps directly instead.
    """
    if grad_now.shape != grad_prev_theta.shape:
        raise ContractError(
            f"estimator_update: gradient shapes {grad_now.shape} and {grad_prev_theta.shape} differ"
        )
    if state.grad_estimate is None:
        raise ContractError("estimator_update: no previous estimate; bootstrap first")
    if state.grad_estimate.shape != grad_now.shape:
        raise ContractError(
            f"estimator_update: estimate shape {state.grad_estimate.shape} vs gradient {grad_now.shape}"
        )
    state.grad_estimate = eta * grad_now + (1.0 - eta) * (state.grad_estimate + grad_now - grad_prev_theta)
    return state.grad_estimate


def _val_grad(mask_params: MaskParams, params: ReaderParams, batch, space: CandidateSpace, s: int) -> tuple[np.ndarray, float]:
    loss_t = rd.batch_loss(
        batch, params, mask_fn=lambda values, b: mk._relaxed_mix_values(values, b, mask_params, space, s)
    )
    grads = ad.backward(loss_t)
    g = grads.get(mask_params.logits)
    if g is None:
        g = np.zeros(mask_params.logits.shape)
    return g, loss_t.item()


def outer_step(
    mask_params: MaskParams,
    state: BilevelState,
    schedules: Schedules,
    val_batch,
    params_now: ReaderParams,
    params_prev: Optional[ReaderParams],
    space: CandidateSpace,
) -> tuple[MaskParams, float]:
    """One update of the selection logits from validation gradients.

    Both gradient evaluations share the validation batch and the drawn
    selector. On the first call (no previous weights) the estimate
    bootstraps to the current gradient. Returns the mask params and the
    validation loss at the current weights.
    """
    s = int(state.rng_select.integers(mask_params.selectors))
    eta = schedules.momentum_mix_at(state.t)
    grad_now, val_loss = _val_grad(mask_params, params_now, val_batch, space, s)
    if params_prev is None or state.grad_estimate is None or eta == 1.0:
        # Bootstrap, and the eta = 1 degenerate case: the recursion
        # collapses to the current gradient, no previous-point evaluation.
        state.grad_estimate = grad_now
    else:
        grad_prev, _ = _val_grad(mask_params, params_prev, val_batch, space, s)
        estimator_update(state, grad_now, grad_prev, eta)
    mask_params.logits.data -= schedules.outer_lr_at(state.t) * state.grad_estimate
    state.theta_prev = params_now.copy()
    return mask_params, val_loss


@dataclass
class RunResult:
    """Best-validation checkpoint plus the full per-step log."""

    params: ReaderParams
    mask_params: Optional[MaskParams]
    final_params: ReaderParams
    final_mask_params: Optional[MaskParams]
    log: list = field(default_factory=list)
    best_val_accuracy: float = 0.0
    best_step: int = -1
    seconds: float = 0.0
    mode: str = "none"

    @property
    def steps(self) -> int:
        return sum(1 for rec in self.log if rec.get("step") is not None)


def run(
    dataset: Dataset,
    params: ReaderParams,
    mask_params: Optional[MaskParams],
    space: Optional[CandidateSpace],
    schedules: Schedules,
    mode: str = "pm",
    seed: int = 0,
    batch_size: int = 16,
    val_batch_size: int = 64,
    eval_every: int = 100,
    mask_rate: float = 0.5,
    fixed_candidate: Optional[mk.MaskCandidate] = None,
    outer_enabled: bool = True,
) -> RunResult:
    """Run the full single-loop schedule and keep the best-validation checkpoint.

    The training split feeds the inner steps; the validation split feeds
    the outer steps and early stopping. The test split is never read.
    """
    if mode not in ALL_MODES:
        raise ConfigError(f"mode must be one of {ALL_MODES}, got {mode!r}")
    if mode in ("pm", "pm_random_candidate", "pm_fixed_candidate") and space is None:
        raise ConfigError(f"mode {mode!r} requires a candidate space")
    if mode == "pm" and mask_params is None:
        raise ConfigError("mode 'pm' requires mask params")
    if mode == "pm_fixed_candidate" and fixed_candidate is None:
        raise ConfigError("mode 'pm_fixed_candidate' requires fixed_candidate")

    state = BilevelState.from_seed(seed)
    started = time.perf_counter()
    log: list[dict] = []

    best = params.copy()
    best_mask = mask_params.copy() if mask_params is not None else None
    best_acc = -1.0
    best_step = -1

    with dataset.phase(f"train:{mode}"):
        train = dataset.train
        val = dataset.val
        n_train = len(train)
        bsz = min(batch_size, n_train)
        vsz = len(val) if val_batch_size in (0, None) else min(val_batch_size, len(val))

        for t in range(schedules.total_steps):
            state.t = t
            idx = state.rng_batch.choice(n_train, size=bsz, replace=False)
            batch = [train[i] for i in idx]

            s_drawn = None
            if mode == "pm":
                params, train_loss, s_drawn = inner_step(params, mask_params, space, batch, schedules, state)
            else:
                if mode == "none":
                    mask_fn = None
                elif mode == "vanilla":
                    mask_fn = lambda v, b: mk._vanilla_mask_values(v, b, mask_rate, state.rng_mask)
                elif mode == "dimension_dropout":
                    mask_fn = lambda v, b: mk._dimension_dropout_values(v, b, mask_rate, state.rng_mask)
                elif mode == "pm_random_candidate":
                    cand = space[int(state.rng_select.integers(space.size))]
                    mask_fn = lambda v, b: mk._apply_candidate_values(v, b, cand, rescale=False)
                else:  # pm_fixed_candidate
                    mask_fn = lambda v, b: mk._apply_candidate_values(v, b, fixed_candidate, rescale=False)
                loss_t = rd.batch_loss(batch, params, mask_fn=mask_fn)
                grads = ad.backward(loss_t)
                sgd_update(params, grads, schedules.inner_lr_at(t))
                train_loss = loss_t.item()

            record = {
                "step": t,
                "train_loss": train_loss,
                "val_loss": None,
                "s": s_drawn,
                "w": mask_params.logits.data.tolist() if mask_params is not None else None,
                "events": [],
            }

            outer_due = mode == "pm" and outer_enabled and t % schedules.outer_every == schedules.outer_every - 1
            if outer_due:
                vidx = state.rng_val.choice(len(val), size=vsz, replace=False)
                val_batch = [val[i] for i in vidx]
                mask_params, val_loss = outer_step(
                    mask_params, state, schedules, val_batch, params, state.theta_prev, space
                )
                record["val_loss"] = val_loss
                record["w"] = mask_params.logits.data.tolist()
                record["events"].append("outer_update")

            if (t + 1) % eval_every == 0 or t == schedules.total_steps - 1:
                acc = rd.evaluate(val, params)
                record["val_accuracy"] = acc
                record["events"].append("val_eval")
                if acc > best_acc:
                    best_acc = acc
                    best_step = t
                    best = params.copy()
                    best_mask = mask_params.copy() if mask_params is not None else None
                    record["events"].append("best_checkpoint")

            log.append(record)

    return RunResult(
        params=best,
        mask_params=best_mask,
        final_params=params,
        final_mask_params=mask_params,
        log=log,
        best_val_accuracy=best_acc,
        best_step=best_step,
        seconds=time.perf_counter() - started,
        mode=mode,
    )
