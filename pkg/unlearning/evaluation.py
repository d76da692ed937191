"""
Metrics, sequence aggregation and run reports.

Responses are decoded classes of the mock head. A forget query counts as a
context-aware refusal when it decodes to its own category's refusal class,
and as a refusal when it decodes to any refusal class.
"""

import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats

from modules.plotting import generate_metrics_plot
from modules.utils import ensure_directory, load_json, save_json, save_jsonl, save_table_csv

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .engine import EngineState, SequenceResult, unlearn_sequence
from .errors import LabelError, MetricError
from .inference import calibrated_batch, pretrained_logits
from .numerics import DEGENERACY
from .refusal import activation_counts
from .world import REFUSAL, MockLM, World, generate_world

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["crr", "rr", "delta_rr", "ar", "specificity"]
CSV_COLUMNS = ["step"] + METRIC_COLUMNS


class MetricsSnapshot(BaseModel):
    """Metrics after one unlearning step (steps count from 1)."""

    model_config = ConfigDict(extra="forbid")

    step: int = Field(ge=1)
    crr: float = Field(ge=0, le=1)
    rr: float = Field(ge=0, le=1)
    delta_rr: float
    ar: float = Field(ge=0, le=1)
    specificity: float = Field(ge=0)
    per_task_crr: Dict[str, float] = Field(default_factory=dict)
    refuser_frequency: Dict[str, List[int]] = Field(default_factory=dict)
    routing_entropy: float = 0.0
    mean_task_routing_entropy: float = 0.0
    benchmark_accuracy: float = 0.0
    pretrained_benchmark_accuracy: float = 0.0

    @model_validator(mode="after")
    def _check_gap(self):
        if abs(self.delta_rr - (self.rr - self.crr)) > 1e-9 or self.delta_rr < -1e-12:
            raise ValueError(f"delta_rr {self.delta_rr} must equal rr - crr >= 0")
        return self


class MetricsReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    snapshots: List[MetricsSnapshot]
    avg: Dict[str, float]
    last: MetricsSnapshot
    seed: int
    ablations: List[str] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)
    degenerate_cosines: int = 0
    meta: Dict[str, Any] = Field(default_factory=dict)


@dataclass(frozen=True)
class Response:
    decoded_class: int
    category_id: str


@dataclass(frozen=True)
class RefusalMetrics:
    crr: float
    rr: float
    delta_rr: float


def refusal_classes(lm: MockLM) -> Dict[str, int]:
    """Category id → refusal class of that category."""
    return {cat: i for i, (kind, cat) in enumerate(zip(lm.class_kinds, lm.class_categories)) if kind == REFUSAL}


def context_refusal_metrics(responses: Sequence[Response], lm: MockLM) -> RefusalMetrics:
    if not responses:
        raise MetricError("refusal metrics are undefined for an empty response list")
    own = refusal_classes(lm)
    decoded = np.array([r.decoded_class for r in responses])
    try:
        expected = np.array([own[r.category_id] for r in responses])
    except KeyError as exc:
        raise LabelError(f"category {exc.args[0]} has no refusal class") from None
    rr = float(np.mean(lm.is_refusal(decoded)))
    crr = float(np.mean(decoded == expected))
    return RefusalMetrics(crr=crr, rr=rr, delta_rr=rr - crr)


def answer_rate(decoded_classes, lm: MockLM) -> float:
    decoded = np.asarray(decoded_classes, dtype=int)
    if decoded.size == 0:
        raise MetricError("answer rate is undefined for an empty pool")
    return float(np.mean(~lm.is_refusal(decoded)))


def specificity(unlearned_accuracy: float, pretrained_accuracy: float) -> float:
    if not pretrained_accuracy > 0:
        raise MetricError(f"specificity needs a positive pretrained accuracy, got {pretrained_accuracy}")
    return 100.0 * unlearned_accuracy / pretrained_accuracy


def avg_last(snapshots: Sequence[MetricsSnapshot]) -> Tuple[Dict[str, float], MetricsSnapshot]:
    if not snapshots:
        raise MetricError("no snapshots to aggregate")
    avg = {name: float(np.mean([getattr(s, name) for s in snapshots])) for name in METRIC_COLUMNS}
    return avg, snapshots[-1]


def refuser_frequency(state: EngineState, world: World, upto_task: int) -> Dict[str, List[int]]:
    """Task → per-refuser top-k selection counts over that task's held-out forget samples."""
    freq = {}
    for task in world.tasks[: upto_task + 1]:
        samples = task.eval_samples
        R_img, R_txt, _ = state.refined(samples.image_features, samples.text_features)
        logits, _ = state.router.forward(R_img, R_txt)
        counts = activation_counts(logits, state.router.top_k, state.bank.num_refusers)
        freq[str(task.task_index)] = [int(c) for c in counts]
    return freq


def _entropy(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    return float(stats.entropy(counts)) if counts.sum() > 0 else 0.0


def routing_entropy(frequency: Dict[str, List[int]]) -> Tuple[float, float]:
    """(entropy of the aggregate frequency, mean per-task entropy), in nats."""
    if not frequency:
        return 0.0, 0.0
    rows = np.array(list(frequency.values()))
    return _entropy(rows.sum(axis=0)), float(np.mean([_entropy(r) for r in rows]))


def evaluate_step(state: EngineState, world: World, task_index: int) -> MetricsSnapshot:
    """Metrics after unlearning tasks 0..task_index."""
    lm = state.lm
    forget = world.forget_eval_pool(task_index)
    forget_out = calibrated_batch(state, forget.image_features, forget.text_features)
    responses = [Response(int(c), cid) for c, cid in zip(forget_out.classes, forget.category_ids)]
    refusal = context_refusal_metrics(responses, lm)

    per_task = {}
    for task in world.tasks[: task_index + 1]:
        out = calibrated_batch(state, task.eval_samples.image_features, task.eval_samples.text_features)
        task_responses = [Response(int(c), cid) for c, cid in zip(out.classes, task.eval_samples.category_ids)]
        per_task[str(task.task_index)] = context_refusal_metrics(task_responses, lm).crr

    retain = world.retain_pool
    ar = answer_rate(calibrated_batch(state, retain.image_features, retain.text_features).classes, lm)

    bench = world.benchmark_pool
    bench_classes = calibrated_batch(state, bench.image_features, bench.text_features).classes
    base_classes = np.argmax(pretrained_logits(state, bench.image_features, bench.text_features), axis=1)
    accuracy = float(np.mean(bench_classes == bench.targets))
    pretrained_accuracy = float(np.mean(base_classes == bench.targets))

    frequency = refuser_frequency(state, world, task_index)
    aggregate_entropy, task_entropy = routing_entropy(frequency)
    snapshot = MetricsSnapshot(
        step=task_index + 1,
        crr=refusal.crr,
        rr=refusal.rr,
        delta_rr=refusal.delta_rr,
        ar=ar,
        specificity=specificity(accuracy, pretrained_accuracy),
        per_task_crr=per_task,
        refuser_frequency=frequency,
        routing_entropy=aggregate_entropy,
        mean_task_routing_entropy=task_entropy,
        benchmark_accuracy=accuracy,
        pretrained_benchmark_accuracy=pretrained_accuracy,
    )
    logger.info(
        f"Step {snapshot.step}: CRR {snapshot.crr:.3f} RR {snapshot.rr:.3f} AR {snapshot.ar:.3f} "
        f"S {snapshot.specificity:.2f}"
    )
    return snapshot


def build_report(config: RunConfig, result: SequenceResult) -> MetricsReport:
    avg, last = avg_last(result.snapshots)
    return MetricsReport(
        snapshots=list(result.snapshots),
        avg=avg,
        last=last,
        seed=config.world.seed,
        ablations=config.ablations.disabled(),
        config=config.model_dump(mode="json"),
        degenerate_cosines=DEGENERACY.count,
        meta={
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "stage1_seconds": [round(s, 6) for s in result.state.stage1_seconds],
            "task_order": [list(r.forget_category_ids) for r in result.state.records],
        },
    )


def metrics_table(report: MetricsReport) -> pd.DataFrame:
    return pd.DataFrame([s.model_dump(include=set(CSV_COLUMNS)) for s in report.snapshots], columns=CSV_COLUMNS)


def activation_rows(state: EngineState, world: World, task_index: int) -> List[dict]:
    """Raw concept-activation blocks and modulator weights for each held-out forget sample."""
    samples = world.forget_eval_pool(task_index)
    E_img, E_txt = state.concept_activations(samples.image_features, samples.text_features)
    m = state.modulator_weights(E_img, E_txt)
    rows = []
    for i, sample_id in enumerate(samples.sample_ids):
        for modality, E in (("img", E_img), ("txt", E_txt)):
            blocks = {cid: [float(v) for v in E[i, sl]]
                      for cid, sl in state.registry.block_index(modality).items()}
            rows.append({"sample_id": sample_id, "category": samples.category_ids[i], "modality": modality,
                         "blocks": blocks, "m": [float(v) for v in m[i]]})
    return rows


def write_report(report: MetricsReport, output_dir, state: Optional[EngineState] = None,
                 world: Optional[World] = None, plot: bool = True) -> Dict[str, str]:
    """
    Write metrics.csv and report.json; with a state and world also the
    activation and refuser-frequency diagnostics; optionally metrics.svg.
    """
    output_dir = Path(ensure_directory(output_dir))
    table = metrics_table(report)
    paths = {
        "metrics": save_table_csv(table, output_dir / "metrics.csv"),
        "report": save_json(report.model_dump(mode="json"), output_dir / "report.json"),
    }
    freq_rows = [
        {"task": int(task), "refuser": j, "count": count}
        for task, counts in report.last.refuser_frequency.items()
        for j, count in enumerate(counts)
    ]
    if freq_rows:
        paths["router_freq"] = save_table_csv(pd.DataFrame(freq_rows, columns=["task", "refuser", "count"]),
                                              output_dir / "router_freq.csv")
    if state is not None and world is not None:
        rows = activation_rows(state, world, report.last.step - 1)
        paths["activations"] = save_jsonl(rows, output_dir / "activations.jsonl")
    if plot:
        paths["plot"] = generate_metrics_plot(table, output_dir / "metrics.svg")
    logger.info(f"Report written to {output_dir}")
    return paths


def load_report(path) -> MetricsReport:
    return MetricsReport.model_validate(load_json(path))


def run_experiment(config: RunConfig, output_dir=None, plot: bool = True) -> Tuple[MetricsReport, SequenceResult]:
    """Generate the world, run the sequence and (optionally) write every report file."""
    DEGENERACY.reset()
    world = generate_world(config.world)
    checkpoint_dir = Path(output_dir) if output_dir is not None else None
    result = unlearn_sequence(world, config, checkpoint_dir=checkpoint_dir)
    report = build_report(config, result)
    if output_dir is not None:
        write_report(report, output_dir, result.state, world, plot=plot)
        save_checkpoint(result.state, Path(output_dir) / "checkpoint.json")
    return report, result


def evaluate_checkpoint(path, output_dir=None, plot: bool = True) -> MetricsReport:
    """Evaluate a saved state on the world rebuilt from its config; one snapshot."""
    DEGENERACY.reset()
    loaded = load_checkpoint(path)
    if loaded.completed_task is None:
        raise MetricError(f"checkpoint {path} holds no completed task")
    snapshot = evaluate_step(loaded.state, loaded.world, loaded.completed_task)
    avg, last = avg_last([snapshot])
    config = loaded.state.config
    report = MetricsReport(
        snapshots=[snapshot], avg=avg, last=last, seed=config.world.seed,
        ablations=config.ablations.disabled(), config=config.model_dump(mode="json"),
        degenerate_cosines=DEGENERACY.count,
        meta={"created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"), "checkpoint": str(path)},
    )
    if output_dir is not None:
        write_report(report, output_dir, loaded.state, loaded.world, plot=plot)
    return report


def run_concept_sweep(config: RunConfig, concept_counts: Sequence[int], output_dir=None) -> pd.DataFrame:
    """
    Rerun the whole sequence at several concept counts per category.

    Each row holds the Last metrics, the mean stage-1 wall time per task and
    the final count of stage-1 parameters.
    """
    rows = []
    for count in concept_counts:
        world_cfg = config.world.model_copy(update={"concepts_per_category_per_modality": int(count)})
        run_cfg = config.model_copy(update={"world": world_cfg})
        report, result = run_experiment(run_cfg)
        row = {"concepts": int(count)}
        row.update({name: getattr(report.last, name) for name in METRIC_COLUMNS})
        row["stage1_seconds"] = float(np.mean(result.state.stage1_seconds))
        row["stage1_params"] = int(sum(p.size for p in result.state.stage1_params().values()))
        rows.append(row)
        logger.info(f"Sweep at {count} concepts: CRR {row['crr']:.3f}, stage 1 {row['stage1_seconds']:.3f}s/task")
    table = pd.DataFrame(rows, columns=["concepts"] + METRIC_COLUMNS + ["stage1_seconds", "stage1_params"])
    if output_dir is not None:
        save_table_csv(table, Path(ensure_directory(output_dir)) / "sweep.csv")
    return table
