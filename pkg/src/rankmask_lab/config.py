"""Experiment configuration and its plain key-value file format.

The on-disk format is one ``key = value`` pair per line, ``#`` comments,
and a mandatory ``schema_version``. Serialization is deterministic and
round-trips exactly, so the config echo inside every report doubles as a
reproduction recipe.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

from .bilevel import PUBLIC_MODES, Schedules
from .errors import ConfigError
from .reader import ReaderConfig
from .taskgen import TaskConfig

SCHEMA_VERSION = 1

SHIFT_MODES = ("none", "uniform", "tail-only")
SPACE_NAMES = ("default", "extended")


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    reader: ReaderConfig = field(default_factory=lambda: ReaderConfig(rank_aware_pooling=True))
    mask_mode: str = "pm"
    mask_rate: float = 0.5
    selectors: int = 1
    space_name: str = "default"
    rescale_candidates: bool = False
    inner_lr: float = 1.0
    outer_lr: float = 0.05
    momentum_mix: float = 0.9
    outer_every: int = 10
    total_steps: int = 1000
    batch_size: int = 64
    val_batch_size: int = 64
    eval_every: int = 150
    apply_discretized_mask: bool = False
    shift_mode: str = "uniform"
    variance_window: int = 300
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.mask_mode not in PUBLIC_MODES:
            raise ConfigError(f"mask.mode must be one of {PUBLIC_MODES}, got {self.mask_mode!r}")
        if self.space_name not in SPACE_NAMES:
            raise ConfigError(f"mask.space must be one of {SPACE_NAMES}, got {self.space_name!r}")
        if self.shift_mode not in SHIFT_MODES:
            raise ConfigError(f"eval.shift_mode must be one of {SHIFT_MODES}, got {self.shift_mode!r}")
        if not (0.0 <= self.mask_rate < 1.0):
            raise ConfigError(f"mask.rate must be in [0, 1), got {self.mask_rate}")
        if self.selectors < 1:
            raise ConfigError(f"mask.selectors must be >= 1, got {self.selectors}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.variance_window < 2:
            raise ConfigError(f"analysis.variance_window must be >= 2, got {self.variance_window}")
        # Delegate range checks for the shared fields.
        self.schedules()

    def schedules(self) -> Schedules:
        return Schedules(
            inner_lr=self.inner_lr,
            outer_lr=self.outer_lr,
            momentum_mix=self.momentum_mix,
            outer_every=self.outer_every,
            total_steps=self.total_steps,
        )


_BOOL_NAMES = {"true": True, "false": False}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_bool(text: str, key: str) -> bool:
    if text not in _BOOL_NAMES:
        raise ConfigError(f"{key}: expected true or false, got {text!r}")
    return _BOOL_NAMES[text]


def _parse_seeds(text: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from exc


# key -> (value getter, parser)
_KEYS = {
    "task.passages": (lambda c: c.task.passages, int),
    "task.passage_len": (lambda c: c.task.passage_len, int),
    "task.question_len": (lambda c: c.task.question_len, int),
    "task.classes": (lambda c: c.task.classes, int),
    "task.vocab": (lambda c: c.task.vocab, int),
    "task.rank_bias": (lambda c: c.task.rank_bias, float),
    "task.decoy_rate": (lambda c: c.task.decoy_rate, float),
    "task.evidence_repeats": (lambda c: c.task.evidence_repeats, int),
    "task.train_size": (lambda c: c.task.train_size, int),
    "task.val_size": (lambda c: c.task.val_size, int),
    "task.test_size": (lambda c: c.task.test_size, int),
    "task.seed": (lambda c: c.task.seed, int),
    "reader.width": (lambda c: c.reader.width, int),
    "reader.depth": (lambda c: c.reader.depth, int),
    "reader.rank_aware_pooling": (lambda c: c.reader.rank_aware_pooling, "bool"),
    "reader.score_scale": (lambda c: c.reader.score_scale, float),
    "mask.mode": (lambda c: c.mask_mode, str),
    "mask.rate": (lambda c: c.mask_rate, float),
    "mask.selectors": (lambda c: c.selectors, int),
    "mask.space": (lambda c: c.space_name, str),
    "mask.rescale": (lambda c: c.rescale_candidates, "bool"),
    "train.inner_lr": (lambda c: c.inner_lr, float),
    "train.outer_lr": (lambda c: c.outer_lr, float),
    "train.momentum_mix": (lambda c: c.momentum_mix, float),
    "train.outer_every": (lambda c: c.outer_every, int),
    "train.total_steps": (lambda c: c.total_steps, int),
    "train.batch_size": (lambda c: c.batch_size, int),
    "train.val_batch_size": (lambda c: c.val_batch_size, int),
    "train.eval_every": (lambda c: c.eval_every, int),
    "eval.apply_discretized_mask": (lambda c: c.apply_discretized_mask, "bool"),
    "eval.shift_mode": (lambda c: c.shift_mode, str),
    "analysis.variance_window": (lambda c: c.variance_window, int),
    "seeds": (lambda c: c.seeds, "seeds"),
}


def config_to_text(config: ExperimentConfig) -> str:
    lines = [f"schema_version = {SCHEMA_VERSION}"]
    lines.extend(f"{key} = {_fmt(getter(config))}" for key, (getter, _) in _KEYS.items())
    return "\n".join(lines) + "\n"


def _build(values: dict) -> ExperimentConfig:
    task = TaskConfig(
        passages=values["task.passages"],
        passage_len=values["task.passage_len"],
        question_len=values["task.question_len"],
        classes=values["task.classes"],
        vocab=values["task.vocab"],
        rank_bias=values["task.rank_bias"],
        decoy_rate=values["task.decoy_rate"],
        evidence_repeats=values["task.evidence_repeats"],
        train_size=values["task.train_size"],
        val_size=values["task.val_size"],
        test_size=values["task.test_size"],
        seed=values["task.seed"],
    )
    reader = ReaderConfig(
        width=values["reader.width"],
        depth=values["reader.depth"],
        rank_aware_pooling=values["reader.rank_aware_pooling"],
        score_scale=values["reader.score_scale"],
    )
    return ExperimentConfig(
        task=task,
        reader=reader,
        mask_mode=values["mask.mode"],
        mask_rate=values["mask.rate"],
        selectors=values["mask.selectors"],
        space_name=values["mask.space"],
        rescale_candidates=values["mask.rescale"],
        inner_lr=values["train.inner_lr"],
        outer_lr=values["train.outer_lr"],
        momentum_mix=values["train.momentum_mix"],
        outer_every=values["train.outer_every"],
        total_steps=values["train.total_steps"],
        batch_size=values["train.batch_size"],
        val_batch_size=values["train.val_batch_size"],
        eval_every=values["train.eval_every"],
        apply_discretized_mask=values["eval.apply_discretized_mask"],
        shift_mode=values["eval.shift_mode"],
        variance_window=values["analysis.variance_window"],
        seeds=values["seeds"],
    )


def config_from_text(text: str) -> ExperimentConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value.strip()

    if "schema_version" not in raw:
        raise ConfigError("schema_version: missing")
    if raw.pop("schema_version") != str(SCHEMA_VERSION):
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}")

    values = {key: getter(ExperimentConfig()) for key, (getter, _) in _KEYS.items()}
    for key, text_value in raw.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown key {key!r}")
        parser = _KEYS[key][1]
        try:
            if parser == "bool":
                values[key] = _parse_bool(text_value, key)
            elif parser == "seeds":
                values[key] = _parse_seeds(text_value, key)
            else:
                values[key] = parser(text_value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{key}: cannot parse {text_value!r}") from exc
    return _build(values)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(config))


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``key=value`` override strings on top of an existing config."""
    values = {key: getter(config) for key, (getter, _) in _KEYS.items()}
    base = config_to_text(_build(values))
    lines = [base]
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        lines.append(item.strip() + "\n")
    # Re-parse with later lines winning.
    merged: dict[str, str] = {}
    for line in "".join(lines).splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("#") or "=" not in stripped:
            continue
        key, _, value = stripped.partition("=")
        merged[key.strip()] = value.strip()
    text = "\n".join(f"{k} = {v}" for k, v in merged.items()) + "\n"
    return config_from_text(text)


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_text(config).encode("utf-8")).hexdigest()[:16]
