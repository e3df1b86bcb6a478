"""Continual-training orchestration.

A run walks the task schedule in order. Task 0 is plain supervised
training; every later task first appends query rows for its new classes,
then optimizes the routed loss, with old-class targets assembled from
frozen snapshots: either each class's own source checkpoint (accumulative)
or the single latest checkpoint (iterative). Every finished task is frozen
into an append-only registry, and the model for task t starts from the
task t-1 parameters.

All randomness is derived from the experiment seed through per-purpose
streams, so a repeated run reproduces results.json byte-for-byte (timing
fields aside).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError, NumericAbort, RegistryError
from .evaluation import (
    ConfusionMatrix,
    GroupMetrics,
    accumulate_confusion,
    forgetting_curve,
    group_metrics,
    miou,
    param_count,
    write_curves_csv,
)
from .losses import DistillConfig, total_loss
from .model import (
    LogitBundle,
    ModelConfig,
    ModelSnapshot,
    SegModel,
    extend_queries,
    linear_mask_logits,
    semantic_decode,
    upsample_bilinear,
)
from .schedule import TaskDataset, TaskSchedule, build_schedule, filter_dataset, schedule_to_json
from .seeding import derive_key, make_rng
from .synthdata import SegSample, SynthConfig, dataset_digest, generate_dataset

RESULTS_FORMAT_VERSION = 1
PIPELINE_MODES = ("accumulative", "iterative")


@dataclass(frozen=True)
class TrainConfig:
    pipeline_mode: str = "accumulative"
    label_mode: str = "soft"
    steps_per_task: int = 400
    batch_size: int = 8
    learning_rate: float = 2e-3
    seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)
    incremental_factor: float = 0.5  # later tasks train this fraction of the steps

    def __post_init__(self):
        if self.pipeline_mode not in PIPELINE_MODES:
            raise ValueError(f"pipeline_mode must be one of {PIPELINE_MODES}")
        if self.label_mode not in ("soft", "pseudo"):
            raise ValueError("label_mode must be 'soft' or 'pseudo'")
        if self.steps_per_task < 1 or self.batch_size < 1:
            raise ValueError("steps_per_task and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        if not 0.0 < self.incremental_factor <= 1.0:
            raise ValueError("incremental_factor must lie in (0,1]")
        if self.distill.mode != self.label_mode:
            object.__setattr__(self, "distill", replace(self.distill, mode=self.label_mode))

    def steps_for_task(self, t: int) -> int:
        if t == 0:
            return self.steps_per_task
        return max(1, round(self.steps_per_task * self.incremental_factor))

    def to_json_dict(self) -> dict:
        doc = asdict(self)
        doc["distill"] = self.distill.to_json_dict()
        return doc


class CheckpointRegistry:
    """Append-only map task_index -> frozen snapshot. Entries are never
    replaced; indices must arrive as 0,1,2,..."""

    def __init__(self):
        self._entries: dict[int, ModelSnapshot] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, t: int) -> bool:
        return t in self._entries

    @property
    def tasks(self) -> tuple[int, ...]:
        return tuple(sorted(self._entries))

    def entry(self, t: int) -> ModelSnapshot:
        if t not in self._entries:
            raise RegistryError(f"no checkpoint registered for task {t}")
        return self._entries[t]

    def register(self, t: int, snap: ModelSnapshot, group_class_ids) -> None:
        if t in self._entries:
            raise RegistryError(f"task {t} already registered")
        if t != len(self._entries):
            raise RegistryError(
                f"registering task {t} with only tasks {self.tasks} present (gap)"
            )
        if snap.task_index != t:
            raise RegistryError(f"snapshot.task_index {snap.task_index} != {t}")
        if tuple(snap.owned_class_ids) != tuple(int(c) for c in group_class_ids):
            raise RegistryError(
                f"snapshot owns {snap.owned_class_ids}, schedule group owns "
                f"{tuple(group_class_ids)}"
            )
        self._entries[t] = snap

    def source_task(self, class_id: int) -> int:
        """The task whose checkpoint first learned class_id."""
        for t in sorted(self._entries):
            if class_id in self._entries[t].owned_class_ids:
                return t
        raise RegistryError(f"no registered checkpoint owns class {class_id}")


def register_checkpoint(registry: CheckpointRegistry, t: int, snap: ModelSnapshot, group_class_ids) -> CheckpointRegistry:
    registry.register(t, snap, group_class_ids)
    return registry


def _check_source_purity(bundle: LogitBundle, snap: ModelSnapshot) -> None:
    stray = set(bundle.class_ids) - set(snap.owned_class_ids)
    if stray:
        raise RegistryError(
            f"teacher channels {sorted(stray)} drawn from checkpoint {snap.task_index}, "
            f"which owns only {snap.owned_class_ids}"
        )


def assemble_targets_accumulative(registry: CheckpointRegistry, images: torch.Tensor, t: int) -> LogitBundle:
    """Old-class targets where channel c comes from the checkpoint of the
    task that first learned c. Checked per batch: no checkpoint ever
    supplies a channel it does not own."""
    if t < 1:
        raise ValueError("no old classes before task 1")
    if len(registry) < t:
        raise RegistryError(f"registry has tasks {registry.tasks}, need 0..{t - 1}")
    parts = []
    for s in range(t):
        snap = registry.entry(s)
        bundle = snap.predict(images, class_ids=snap.owned_class_ids)
        _check_source_purity(bundle, snap)
        parts.append(bundle)
    return LogitBundle.concat(parts)


def assemble_targets_iterative(registry: CheckpointRegistry, images: torch.Tensor, t: int) -> LogitBundle:
    """Old-class targets where every channel comes from the single latest
    checkpoint t-1, including classes it only ever saw through its own
    teacher."""
    if t < 1:
        raise ValueError("no old classes before task 1")
    if len(registry) < t:
        raise RegistryError(f"registry has tasks {registry.tasks}, need 0..{t - 1}")
    latest = registry.entry(t - 1)
    old_ids = sorted(c for s in range(t) for c in registry.entry(s).owned_class_ids)
    return latest.predict(images, class_ids=old_ids)


@dataclass
class RunState:
    model: SegModel
    registry: CheckpointRegistry
    schedule: TaskSchedule
    history: list[GroupMetrics] = field(default_factory=list)


def _batch_tensors(samples: list[SegSample], idx: np.ndarray) -> tuple[torch.Tensor, np.ndarray]:
    images = torch.from_numpy(np.stack([samples[i].image for i in idx]))
    labels = np.stack([samples[i].label for i in idx])
    return images, labels


def train_task(
    state: RunState,
    t: int,
    dataset: TaskDataset,
    cfg: TrainConfig,
    log_path: Path | str | None = None,
) -> RunState:
    """Run one task's optimization, then freeze and register the result.

    t>0: the query bank is extended once, before the first step, and the
    model otherwise continues from the previous task's parameters. A
    non-finite loss aborts with step-level diagnostics.
    """
    if len(state.registry) != t:
        raise RegistryError(f"task {t} requires completed tasks {list(range(t))}")
    if dataset.task_index != t:
        raise ContractError(f"dataset is for task {dataset.task_index}, not {t}")
    if not dataset.samples:
        raise ContractError(f"task {t} has no training samples")
    schedule = state.schedule
    new_ids = schedule.groups[t].class_ids
    torch.manual_seed(derive_key(cfg.seed, "torch", t) & (2**63 - 1))
    if t > 0:
        gen = torch.Generator().manual_seed(derive_key(cfg.seed, "extend", t) & (2**63 - 1))
        state.model.bank = extend_queries(state.model.bank, new_ids, generator=gen)
    elif tuple(state.model.class_ids) != tuple(new_ids):
        raise ContractError(
            f"task 0 model rows {state.model.class_ids} != group {tuple(new_ids)}"
        )

    model = state.model
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate)
    order = make_rng(cfg.seed, "order", t)
    steps = cfg.steps_for_task(t)
    assemble = (
        assemble_targets_accumulative
        if cfg.pipeline_mode == "accumulative"
        else assemble_targets_iterative
    )
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(steps):
            idx = order.integers(0, len(dataset.samples), size=cfg.batch_size)
            images, labels = _batch_tensors(dataset.samples, idx)
            teacher = assemble(state.registry, images, t) if t > 0 else None
            bundle = model.forward_bundle(images)
            report = total_loss(bundle, labels, teacher, schedule, t, cfg.distill)
            if not math.isfinite(report.total):
                diagnostics = {
                    "task_index": t,
                    "step": step,
                    "report": report.to_json_dict(),
                    "batch_sample_ids": [int(dataset.samples[i].sample_id) for i in idx],
                }
                raise NumericAbort(f"non-finite loss at task {t} step {step}", diagnostics)
            optimizer.zero_grad(set_to_none=True)
            report.total_tensor.backward()
            optimizer.step()
            if log_file is not None:
                record = {"task_index": t, "step": step, **report.to_json_dict()}
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    snap = ModelSnapshot.from_model(
        model,
        task_index=t,
        owned_class_ids=new_ids,
        manifest={"train_config": cfg.to_json_dict(), "schedule": schedule_to_json(schedule)},
    )
    state.registry.register(t, snap, new_ids)
    return state


def evaluate_model(
    model,
    samples: list[SegSample],
    schedule: TaskSchedule,
    t: int,
    tau: float = 0.5,
    include_background: bool = False,
    batch_size: int = 16,
) -> GroupMetrics:
    """Confusion-matrix metrics of a model or snapshot over a sample list.

    Ground truth keeps its raw ids; pixels of classes the model has not yet
    seen can only show up as false positives against seen classes, which is
    exactly the continual-evaluation convention.
    """
    conf = ConfusionMatrix.empty(schedule.total_classes)
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk]))
        labels = np.stack([s.label for s in chunk])
        if isinstance(model, ModelSnapshot):
            pred = semantic_decode(model.predict(images), tau=tau)
        else:
            pred = model.decode(images, tau=tau)
        conf = conf.merge(accumulate_confusion(pred, labels, schedule.total_classes))
    return group_metrics(conf, schedule, t, include_background=include_background)


@dataclass(frozen=True)
class ScheduleSpec:
    total: int = 8
    init: int = 4
    incr: int = 2
    protocol: str = "overlap"

    def build(self) -> TaskSchedule:
        return build_schedule(self.total, self.init, self.incr, self.protocol)

    def to_json_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EvalConfig:
    tau: float = 0.5
    include_background: bool = False
    batch_size: int = 16

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0,1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_json_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str
    synth: SynthConfig = field(default_factory=SynthConfig)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train_samples: int = 2000
    test_samples: int = 400
    oracle: bool = False

    def __post_init__(self):
        if self.train_samples < 1 or self.test_samples < 1:
            raise ValueError("sample counts must be positive")
        if self.synth.num_classes != self.schedule.total:
            raise ValueError(
                f"synth.num_classes {self.synth.num_classes} != schedule.total {self.schedule.total}"
            )

    def to_json_dict(self, include_output_dir: bool = True) -> dict:
        doc = {
            "synth": self.synth.to_json_dict(),
            "schedule": self.schedule.to_json_dict(),
            "train": self.train.to_json_dict(),
            "eval": self.eval.to_json_dict(),
            "model": asdict(self.model),
            "train_samples": self.train_samples,
            "test_samples": self.test_samples,
            "oracle": self.oracle,
        }
        if include_output_dir:
            doc["output_dir"] = self.output_dir
        return doc


# offset keeping test sample ids (and thus content) disjoint from any
# reasonable train split size
TEST_INDEX_OFFSET = 1_000_000

RESULTS_REQUIRED_KEYS = (
    "format_version",
    "config",
    "dataset_digest",
    "schedule",
    "tasks",
    "forgetting",
    "oracle",
    "param_counts",
    "wall_time_sec",
)


def validate_results_schema(doc: dict) -> None:
    missing = [k for k in RESULTS_REQUIRED_KEYS if k not in doc]
    if missing:
        raise ContractError(f"results document missing keys {missing}")
    if doc["format_version"] != RESULTS_FORMAT_VERSION:
        raise ContractError(
            f"results format_version {doc['format_version']} != {RESULTS_FORMAT_VERSION}"
        )
    for i, block in enumerate(doc["tasks"]):
        for key in ("task_index", "per_class_iou", "group_miou"):
            if key not in block:
                raise ContractError(f"task block missing '{key}'")
        if block["task_index"] != i:
            raise ContractError(
                f"task blocks out of order: position {i} holds task {block['task_index']}"
            )
        for group in ("base", "new", "all"):
            if group not in block["group_miou"]:
                raise ContractError(f"task block missing group '{group}'")


def results_to_json(doc: dict) -> str:
    validate_results_schema(doc)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def strip_timing(doc: dict) -> dict:
    """Copy of a results document with wall-clock fields removed; the
    reproducibility contract compares these."""
    out = {k: v for k, v in doc.items() if k != "wall_time_sec"}
    if isinstance(out.get("oracle"), dict):
        out["oracle"] = {k: v for k, v in out["oracle"].items() if k != "wall_time_sec"}
    return out


def _train_oracle(cfg: ExperimentConfig, samples: list[SegSample], out_dir: Path) -> dict:
    """Joint training over all classes with the same per-task budget; the
    ceiling the continual runs are compared against."""
    joint = build_schedule(cfg.schedule.total, cfg.schedule.total, 1, cfg.schedule.protocol)
    torch.manual_seed(derive_key(cfg.train.seed, "oracle-model") & (2**63 - 1))
    model = SegModel(cfg.model, head="cit", class_ids=joint.groups[0].class_ids)
    oracle_cfg = replace(cfg.train, seed=derive_key(cfg.train.seed, "oracle"))
    state = RunState(model=model, registry=CheckpointRegistry(), schedule=joint)
    start = time.perf_counter()
    train_task(state, 0, filter_dataset(samples, joint, 0), oracle_cfg,
               log_path=out_dir / "logs" / "train_oracle.jsonl")
    return {
        "metrics": None,  # filled by caller with the test-split evaluation
        "wall_time_sec": time.perf_counter() - start,
        "snapshot": state.registry.entry(0),
    }


def run_experiment(cfg: ExperimentConfig, force: bool = False) -> dict:
    """Execute the full continual run and write all artifacts.

    Returns the results document (also written to results.json). Artifacts:
    config.json, registry/task_<t>/, logs/train_<t>.jsonl, curves/*.csv,
    results.json. On a numeric abort, everything produced so far stays on
    disk plus an abort.json diagnostic record.
    """
    out = Path(cfg.output_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"output dir {out} is not empty (pass force to reuse)")
    (out / "logs").mkdir(parents=True, exist_ok=True)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "registry").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps(
            {"format_version": RESULTS_FORMAT_VERSION, **cfg.to_json_dict()},
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )

    started = time.perf_counter()
    schedule = cfg.schedule.build()
    train_set = generate_dataset(cfg.synth, cfg.train_samples, start_index=0)
    test_set = generate_dataset(cfg.synth, cfg.test_samples, start_index=TEST_INDEX_OFFSET)
    digests = {"train": dataset_digest(train_set), "test": dataset_digest(test_set)}

    torch.manual_seed(derive_key(cfg.train.seed, "model-init") & (2**63 - 1))
    model = SegModel(cfg.model, head="cit", class_ids=schedule.groups[0].class_ids)
    state = RunState(model=model, registry=CheckpointRegistry(), schedule=schedule)

    try:
        for t in range(schedule.num_tasks):
            task_data = filter_dataset(train_set, schedule, t)
            train_task(state, t, task_data, cfg.train, log_path=out / "logs" / f"train_{t}.jsonl")
            state.registry.entry(t).save(out / "registry" / f"task_{t}")
            metrics = evaluate_model(
                state.model,
                test_set,
                schedule,
                t,
                tau=cfg.eval.tau,
                include_background=cfg.eval.include_background,
                batch_size=cfg.eval.batch_size,
            )
            state.history.append(metrics)
    except NumericAbort as abort:
        (out / "abort.json").write_text(
            json.dumps({"error": str(abort), "diagnostics": abort.diagnostics}, indent=2) + "\n"
        )
        raise

    curve = forgetting_curve(state.history)
    write_curves_csv(out / "curves" / "base_miou.csv", state.history)

    oracle_block = None
    if cfg.oracle:
        oracle_run = _train_oracle(cfg, train_set, out)
        joint = build_schedule(cfg.schedule.total, cfg.schedule.total, 1, cfg.schedule.protocol)
        oracle_metrics = evaluate_model(
            oracle_run["snapshot"],
            test_set,
            joint,
            0,
            tau=cfg.eval.tau,
            include_background=cfg.eval.include_background,
            batch_size=cfg.eval.batch_size,
        )
        oracle_run["snapshot"].save(out / "registry" / "oracle")
        oracle_block = {
            "all_miou": oracle_metrics.group_miou["all"],
            "per_class": {str(k): v for k, v in sorted(oracle_metrics.per_class.items())},
            "wall_time_sec": oracle_run["wall_time_sec"],
        }

    doc = {
        "format_version": RESULTS_FORMAT_VERSION,
        "config": cfg.to_json_dict(include_output_dir=False),
        "dataset_digest": digests,
        "schedule": schedule_to_json(schedule),
        "tasks": [m.to_json_dict() for m in state.history],
        "forgetting": {
            "series": [[t, v] for t, v in curve.series],
            "reference": curve.reference,
            "final_drop": curve.final_drop,
        },
        "oracle": oracle_block,
        "param_counts": {"final_model": param_count(state.model)},
        "wall_time_sec": time.perf_counter() - started,
    }
    (out / "results.json").write_text(results_to_json(doc))
    return doc


def train_softmax_joint(
    model: SegModel,
    samples: list[SegSample],
    steps: int,
    batch_size: int,
    learning_rate: float,
    seed: int,
) -> SegModel:
    """Plain joint training of a softmax-head model with pixel
    cross-entropy; the conversion baseline's starting point."""
    if model.head_type != "softmax":
        raise ContractError("expected a softmax-head model")
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=learning_rate)
    order = make_rng(seed, "order", "joint")
    for _ in range(steps):
        idx = order.integers(0, len(samples), size=batch_size)
        images, labels = _batch_tensors(samples, idx)
        feats = model.encoder(images)
        logits = upsample_bilinear(
            linear_mask_logits(feats.values, model.softmax_head.weight),
            tuple(images.shape[-2:]),
        )
        loss = torch.nn.functional.cross_entropy(logits, torch.from_numpy(labels).long())
        if not torch.isfinite(loss):
            raise NumericAbort("non-finite joint loss", {"loss": float(loss)})
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    model.eval()
    return model


def joint_miou(model: SegModel, samples: list[SegSample], num_classes: int, tau: float = 0.5) -> float:
    """All-foreground-class mIoU of any model over a sample list."""
    conf = ConfusionMatrix.empty(num_classes)
    for lo in range(0, len(samples), 16):
        chunk = samples[lo : lo + 16]
        images = torch.from_numpy(np.stack([s.image for s in chunk]))
        labels = np.stack([s.label for s in chunk])
        conf = conf.merge(accumulate_confusion(model.decode(images, tau=tau), labels, num_classes))
    value = miou(conf, range(1, num_classes + 1))
    if value is None:
        raise ContractError("mIoU undefined: no foreground class present")
    return value
