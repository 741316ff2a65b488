"""Experiment driver: trains replicates, evaluates protocols, emits reports.

Each analysis is a pure function of (config, seeds): datasets, parameter
initialization, and every random stream derive deterministically from
them, so re-running reproduces byte-identical reports. Timing goes to the
run logs and a sidecar, never into report content.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import bilevel as bl
from . import masks as mk
from . import reader as rd
from . import taskgen as tg
from .bilevel import RunResult, Schedules
from .config import ExperimentConfig, config_hash, config_to_text
from .errors import ConfigError
from .masks import CandidateSpace, MaskParams
from .report import Report, emit_report

# Full-scale reference numbers, used only to annotate the direction each
# desk-scale table is expected to reproduce.
REFERENCE_FULLSCALE = {
    "mask_position": {
        "none": 50.1,
        "mask_rank_1": 44.5,
        "mask_rank_2": 48.8,
        "mask_rank_3": 48.3,
        "mask_rank_4": 49.1,
        "mask_rank_5": 49.6,
        "mask_top_5": 35.7,
    },
    "permute_remove": {
        "none": 50.1,
        "permute_top_3": 50.0,
        "permute_top_5": 50.0,
        "remove_1": 44.9,
        "remove_2": 48.7,
        "remove_3": 49.3,
    },
    "method_comparison": {
        "none": 50.1,
        "dimension_dropout": 50.1,
        "vanilla": 50.2,
        "pm": 51.3,
        "pm_random_candidate": 50.8,
    },
    "loss_variance": {"6": 0.042, "16": 0.046},
}


def derive_seed(*entropy: int) -> int:
    """Stable 63-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0] >> 1)


@dataclass
class Recorder:
    """Collects run logs and timings for later emission."""

    runs: dict = field(default_factory=dict)

    def add(self, run_id: str, result: RunResult) -> None:
        if run_id in self.runs:
            raise ValueError(f"duplicate run id {run_id}")
        self.runs[run_id] = result

    def write(self, out_dir) -> list:
        paths = []
        runs_dir = os.path.join(out_dir, "runs")
        os.makedirs(runs_dir, exist_ok=True)
        for run_id in sorted(self.runs):
            result = self.runs[run_id]
            path = os.path.join(runs_dir, f"{run_id}.log")
            with open(path, "w", encoding="utf-8") as fh:
                header = {
                    "run_id": run_id,
                    "mode": result.mode,
                    "seconds": result.seconds,
                    "s_per_step": result.seconds / max(1, len(result.log)),
                }
                fh.write(json.dumps(header) + "\n")
                for rec in result.log:
                    fh.write(json.dumps(rec) + "\n")
            paths.append(path)
        timing = {
            run_id: {
                "seconds": round(res.seconds, 3),
                "steps": len(res.log),
                "s_per_step": round(res.seconds / max(1, len(res.log)), 5),
            }
            for run_id, res in sorted(self.runs.items())
        }
        timing_path = os.path.join(out_dir, "timing.json")
        with open(timing_path, "w", encoding="utf-8") as fh:
            json.dump(timing, fh, indent=2, sort_keys=True)
        paths.append(timing_path)
        return paths


def make_space(config: ExperimentConfig) -> CandidateSpace:
    if config.space_name == "extended":
        return mk.extended_space(config.task.passages)
    return mk.default_space(config.task.passages)


def make_dataset(config: ExperimentConfig, replicate: int, shift: str | None = None) -> tg.Dataset:
    task = tg.TaskConfig(
        **{**vars_of_task(config.task), "seed": derive_seed(config.task.seed, replicate, 11)}
    )
    dataset = tg.generate(task)
    if shift and shift != "none":
        dataset = tg.shift_test_distribution(dataset, shift)
    return dataset


def vars_of_task(task: tg.TaskConfig) -> dict:
    from dataclasses import asdict

    return asdict(task)


def train_run(
    config: ExperimentConfig,
    dataset: tg.Dataset,
    mode: str,
    replicate: int,
    recorder: Recorder,
    run_id: str,
    space: CandidateSpace | None = None,
    fixed_candidate: mk.MaskCandidate | None = None,
    outer_enabled: bool = True,
) -> RunResult:
    if space is None and mode != "none" and mode.startswith("pm"):
        space = make_space(config)
    params = rd.ReaderParams.init(
        config.task.vocab, config.task.classes, config.reader, seed=derive_seed(replicate, 21)
    )
    mask_params = None
    if mode == "pm":
        mask_params = MaskParams.zeros(config.selectors, space)
    result = bl.run(
        dataset,
        params,
        mask_params,
        space,
        config.schedules(),
        mode=mode,
        seed=derive_seed(replicate, 22),
        batch_size=config.batch_size,
        val_batch_size=config.val_batch_size,
        eval_every=config.eval_every,
        mask_rate=config.mask_rate,
        fixed_candidate=fixed_candidate,
        outer_enabled=outer_enabled,
    )
    recorder.add(run_id, result)
    return result


def _metadata(config: ExperimentConfig, analysis: str, datasets: list) -> dict:
    baseline_count = rd.ReaderParams.init(
        config.task.vocab, config.task.classes, config.reader, seed=0
    ).param_count()
    space = make_space(config)
    test_reads = sum(len(ds.test_reads_during("train")) for ds in datasets)
    return {
        "analysis": analysis,
        "config_hash": config_hash(config),
        "config_echo": config_to_text(config).splitlines(),
        "seeds": list(config.seeds),
        "parameter_count_reader": baseline_count,
        "parameter_count_pm": baseline_count + config.selectors * space.size,
        "mask_logit_count": config.selectors * space.size,
        "test_split_reads_during_training": test_reads,
        "audit_passed": test_reads == 0,
    }


_POSITION_VARIANTS = [
    ("none", None),
    ("mask_rank_1", (1,)),
    ("mask_rank_2", (2,)),
    ("mask_rank_3", (3,)),
    ("mask_rank_4", (4,)),
    ("mask_rank_5", (5,)),
    ("mask_top_5", (1, 2, 3, 4, 5)),
]


def _position_accuracy(result: RunResult, dataset: tg.Dataset, analysis: str) -> dict:
    out = {}
    with dataset.phase(f"eval:{analysis}"):
        test = dataset.test
        for name, ranks in _POSITION_VARIANTS:
            transform = mk.eval_mask_ranks(ranks) if ranks else None
            out[name] = rd.evaluate(test, result.params, transform=transform)
    return out


def run_mask_position_analysis(config: ExperimentConfig, recorder: Recorder | None = None) -> Report:
    """Test accuracy under evaluation-time hard masks of single top ranks."""
    if config.task.passages < 5:
        raise ConfigError(f"mask-position analysis needs passages >= 5, got {config.task.passages}")
    recorder = recorder if recorder is not None else Recorder()
    report = Report(name="mask_position")
    columns = ["seed", "run_id"] + [name for name, _ in _POSITION_VARIANTS]
    table = report.table("mask_position", columns)
    datasets = []
    for seed in config.seeds:
        dataset = make_dataset(config, seed)
        datasets.append(dataset)
        run_id = f"mask_position-none-seed{seed}"
        result = train_run(config, dataset, "none", seed, recorder, run_id)
        accs = _position_accuracy(result, dataset, "mask_position")
        table.add_row(seed=seed, run_id=run_id, **accs)

    summary = report.table("mask_position_summary", ["variant", "mean_accuracy", "reference_fullscale"])
    for name, _ in _POSITION_VARIANTS:
        summary.add_row(
            variant=name,
            mean_accuracy=float(np.mean([row[name] for row in table.rows])),
            reference_fullscale=REFERENCE_FULLSCALE["mask_position"][name],
        )
    report.metadata = _metadata(config, "mask_position", datasets)
    return report


_PERMUTE_REMOVE_VARIANTS = ["none", "permute_top_3", "permute_top_5", "remove_1", "remove_2", "remove_3"]


def run_permute_remove_analysis(config: ExperimentConfig, recorder: Recorder | None = None) -> Report:
    """Test accuracy under passage-order permutation and passage removal."""
    if config.task.passages < 5:
        raise ConfigError(f"permute-remove analysis needs passages >= 5, got {config.task.passages}")
    recorder = recorder if recorder is not None else Recorder()
    report = Report(name="permute_remove")
    table = report.table("permute_remove", ["seed", "run_id"] + _PERMUTE_REMOVE_VARIANTS)
    datasets = []
    for seed in config.seeds:
        dataset = make_dataset(config, seed)
        datasets.append(dataset)
        run_id = f"permute_remove-none-seed{seed}"
        result = train_run(config, dataset, "none", seed, recorder, run_id)
        row = {"seed": seed, "run_id": run_id}
        with dataset.phase("eval:permute_remove"):
            test = dataset.test
            row["none"] = rd.evaluate(test, result.params)
            for k in (3, 5):
                rng = np.random.default_rng(derive_seed(seed, 31, k))
                row[f"permute_top_{k}"] = rd.evaluate(
                    test, result.params, transform=mk.eval_permute_top(k), rng=rng
                )
            for r in (1, 2, 3):
                row[f"remove_{r}"] = rd.evaluate(test, result.params, transform=mk.eval_remove_rank(r))
        table.add_row(**row)

    summary = report.table("permute_remove_summary", ["variant", "mean_accuracy", "reference_fullscale"])
    for name in _PERMUTE_REMOVE_VARIANTS:
        summary.add_row(
            variant=name,
            mean_accuracy=float(np.mean([row[name] for row in table.rows])),
            reference_fullscale=REFERENCE_FULLSCALE["permute_remove"][name],
        )
    report.metadata = _metadata(config, "permute_remove", datasets)
    return report


def _discretized_transform(result: RunResult, space: CandidateSpace):
    if result.mask_params is None:
        return None
    ranks: set[int] = set()
    for cand in mk.discretize(result.mask_params, space):
        ranks.update(cand.positions)
    return mk.eval_mask_ranks(sorted(ranks)) if ranks else None


def run_method_comparison(config: ExperimentConfig, recorder: Recorder | None = None) -> Report:
    """Train every mask mode on the shifted-test task; report accuracy and degradation."""
    recorder = recorder if recorder is not None else Recorder()
    report = Report(name="method_comparison")
    shift = config.shift_mode if config.shift_mode != "none" else "uniform"
    space = make_space(config)
    columns = (
        ["seed", "mode", "run_id", "test_accuracy"]
        + [name for name, _ in _POSITION_VARIANTS if name != "none"]
        + ["degradation_rank_1", "selected_candidates"]
    )
    table = report.table("method_comparison", columns)
    datasets = []
    for seed in config.seeds:
        dataset = make_dataset(config, seed, shift=shift)
        datasets.append(dataset)
        for mode in bl.PUBLIC_MODES:
            run_id = f"method_comparison-{mode}-seed{seed}"
            result = train_run(config, dataset, mode, seed, recorder, run_id, space=space)
            accs = _position_accuracy(result, dataset, "method_comparison")
            selected = ""
            eval_transform = None
            if mode == "pm":
                selected = ";".join(str(c) for c in mk.discretize(result.mask_params, space))
                if config.apply_discretized_mask:
                    eval_transform = _discretized_transform(result, space)
            if eval_transform is not None:
                with dataset.phase("eval:method_comparison"):
                    accs["none"] = rd.evaluate(dataset.test, result.params, transform=eval_transform)
            table.add_row(
                seed=seed,
                mode=mode,
                run_id=run_id,
                test_accuracy=accs["none"],
                degradation_rank_1=accs["none"] - accs["mask_rank_1"],
                selected_candidates=selected,
                **{k: v for k, v in accs.items() if k != "none"},
            )

    summary = report.table(
        "method_comparison_summary",
        ["mode", "mean_test_accuracy", "mean_degradation_rank_1", "reference_fullscale"],
    )
    for mode in bl.PUBLIC_MODES:
        rows = [row for row in table.rows if row["mode"] == mode]
        summary.add_row(
            mode=mode,
            mean_test_accuracy=float(np.mean([row["test_accuracy"] for row in rows])),
            mean_degradation_rank_1=float(np.mean([row["degradation_rank_1"] for row in rows])),
            reference_fullscale=REFERENCE_FULLSCALE["method_comparison"][mode],
        )
    report.metadata = _metadata(config, "method_comparison", datasets)
    report.metadata["shift_mode"] = shift
    return report


def run_grid_search_oracle(config: ExperimentConfig, recorder: Recorder | None = None) -> Report:
    """Brute-force candidate ranking vs the one-shot selection of a joint run."""
    recorder = recorder if recorder is not None else Recorder()
    report = Report(name="grid_search_oracle")
    space = make_space(config)
    ranking_table = report.table(
        "oracle_rankings",
        ["seed", "candidate", "val_accuracy", "val_loss", "rank", "run_id"],
    )
    oneshot_table = report.table(
        "oneshot_vs_oracle",
        ["seed", "selected", "oracle_rank", "in_top_2", "run_id"],
    )
    datasets = []
    for seed in config.seeds:
        dataset = make_dataset(config, seed)
        datasets.append(dataset)
        entries = []
        for k, candidate in enumerate(space):
            run_id = f"oracle-cand{k}-seed{seed}"
            result = train_run(
                config, dataset, "pm_fixed_candidate", seed, recorder, run_id, space=space,
                fixed_candidate=candidate,
            )
            with dataset.phase("eval:oracle"):
                val = dataset.val
                val_loss = float(
                    np.mean([rd.loss(ex, rd.encode(ex, result.params), result.params).item() for ex in val[:128]])
                )
            entries.append(
                {
                    "candidate": str(candidate),
                    "index": k,
                    "val_accuracy": result.best_val_accuracy,
                    "val_loss": val_loss,
                    "run_id": run_id,
                }
            )
        order = sorted(entries, key=lambda e: (-e["val_accuracy"], e["val_loss"], e["index"]))
        rank_of = {}
        for rank, entry in enumerate(order, start=1):
            rank_of[entry["index"]] = rank
            ranking_table.add_row(
                seed=seed,
                candidate=entry["candidate"],
                val_accuracy=entry["val_accuracy"],
                val_loss=entry["val_loss"],
                rank=rank,
                run_id=entry["run_id"],
            )
        pm_id = f"oracle-pm-seed{seed}"
        pm_result = train_run(config, dataset, "pm", seed, recorder, pm_id, space=space)
        selected = mk.discretize(pm_result.mask_params, space)[0]
        sel_index = list(space).index(selected)
        oneshot_table.add_row(
            seed=seed,
            selected=str(selected),
            oracle_rank=rank_of[sel_index],
            in_top_2=rank_of[sel_index] <= 2,
            run_id=pm_id,
        )
    hits = [row["in_top_2"] for row in oneshot_table.rows]
    report.metadata = _metadata(config, "grid_search_oracle", datasets)
    report.metadata["top2_hit_rate"] = float(np.mean([1.0 if h else 0.0 for h in hits]))
    return report


def measure_loss_variance(config: ExperimentConfig, recorder: Recorder | None = None) -> Report:
    """Std of per-step training loss under random hard candidates, by space size."""
    recorder = recorder if recorder is not None else Recorder()
    report = Report(name="loss_variance")
    table = report.table("loss_variance", ["seed", "space_size", "loss_std", "run_id"])
    window = config.variance_window
    spaces = {
        0: None,  # control: no mask, baseline noise floor
        mk.default_space(config.task.passages).size: mk.default_space(config.task.passages),
        mk.extended_space(config.task.passages).size: mk.extended_space(config.task.passages),
    }
    datasets = []
    for seed in config.seeds:
        dataset = make_dataset(config, seed)
        datasets.append(dataset)
        for size, space in sorted(spaces.items()):
            mode = "none" if space is None else "pm_random_candidate"
            run_id = f"loss_variance-{size}-seed{seed}"
            result = train_run(config, dataset, mode, seed, recorder, run_id, space=space)
            losses = [rec["train_loss"] for rec in result.log][-window:]
            table.add_row(
                seed=seed,
                space_size=size,
                loss_std=float(np.std(losses)),
                run_id=run_id,
            )
    summary = report.table("loss_variance_summary", ["space_size", "mean_loss_std", "reference_fullscale"])
    for size in sorted(spaces):
        rows = [row for row in table.rows if row["space_size"] == size]
        summary.add_row(
            space_size=size,
            mean_loss_std=float(np.mean([row["loss_std"] for row in rows])),
            reference_fullscale=REFERENCE_FULLSCALE["loss_variance"].get(str(size)),
        )
    report.metadata = _metadata(config, "loss_variance", datasets)
    return report


def run_training(config: ExperimentConfig, recorder: Recorder | None = None) -> tuple[Report, RunResult]:
    """Single training run in the configured mode; used by the `train` command."""
    recorder = recorder if recorder is not None else Recorder()
    report = Report(name="train")
    seed = config.seeds[0]
    dataset = make_dataset(config, seed, shift=config.shift_mode)
    space = make_space(config)
    run_id = f"train-{config.mask_mode}-seed{seed}"
    result = train_run(config, dataset, config.mask_mode, seed, recorder, run_id, space=space)
    accs = _position_accuracy(result, dataset, "train")
    table = report.table(
        "train", ["seed", "mode", "run_id", "best_val_accuracy", "best_step"] + [n for n, _ in _POSITION_VARIANTS]
    )
    table.add_row(
        seed=seed,
        mode=config.mask_mode,
        run_id=run_id,
        best_val_accuracy=result.best_val_accuracy,
        best_step=result.best_step,
        **accs,
    )
    report.metadata = _metadata(config, "train", [dataset])
    return report, result


ANALYSES = {
    "mask-position": run_mask_position_analysis,
    "permute-remove": run_permute_remove_analysis,
    "method-comparison": run_method_comparison,
    "oracle": run_grid_search_oracle,
    "loss-variance": measure_loss_variance,
}


def run_analysis(name: str, config: ExperimentConfig, out_dir) -> Report:
    """Run one analysis end to end and emit all artifacts into out_dir."""
    recorder = Recorder()
    if name == "train":
        report, result = run_training(config, recorder)
    elif name in ANALYSES:
        report = ANALYSES[name](config, recorder)
        result = None
    else:
        raise ConfigError(f"unknown analysis {name!r}; expected one of {sorted(ANALYSES) + ['train']}")
    paths = emit_report(report, out_dir)
    report.artifacts = [os.path.relpath(p, out_dir) for p in paths]
    # Re-emit with the artifact list filled in so report.json is complete.
    emit_report(report, out_dir)
    recorder.write(out_dir)
    if result is not None:
        ckpt = os.path.join(out_dir, "checkpoint.npz")
        mask_logits = result.mask_params.logits.data if result.mask_params is not None else None
        candidates = [c.positions for c in make_space(config)] if mask_logits is not None else None
        rd.save_checkpoint(ckpt, result.params, mask_logits=mask_logits, candidates=candidates)
    return report
