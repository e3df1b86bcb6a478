"""Continual pipeline: registry, teacher assembly, task training, runs."""

import json
from pathlib import Path

import numpy as np
import pytest
import torch

from cit_css.errors import ContractError, NumericAbort, RegistryError
from cit_css.losses import DistillConfig
from cit_css.model import LogitBundle, ModelConfig, ModelSnapshot, SegModel
from cit_css.pipeline import (
    CheckpointRegistry,
    EvalConfig,
    ExperimentConfig,
    RunState,
    ScheduleSpec,
    TrainConfig,
    assemble_targets_accumulative,
    assemble_targets_iterative,
    evaluate_model,
    run_experiment,
    strip_timing,
    train_task,
    validate_results_schema,
)
from cit_css.schedule import build_schedule, filter_dataset
from cit_css.synthdata import SynthConfig, generate_dataset

TINY_MODEL = ModelConfig(feature_dim=16, base_width=8, ffn_hidden=32)
TINY_SYNTH = SynthConfig(num_classes=4, image_size=32, seed=7)


def make_snapshot(task_index, owned, seed=0):
    torch.manual_seed(seed)
    model = SegModel(TINY_MODEL, head="cit", class_ids=owned)
    model.eval()
    return ModelSnapshot.from_model(model, task_index, owned)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_dataset(TINY_SYNTH, 48)


@pytest.fixture()
def images():
    gen = torch.Generator().manual_seed(8)
    return torch.rand(2, 3, 32, 32, generator=gen)


# -------------------------------------------------------------------- registry


def test_registry_append_only():
    reg = CheckpointRegistry()
    reg.register(0, make_snapshot(0, (1, 2)), (1, 2))
    assert len(reg) == 1 and 0 in reg and reg.tasks == (0,)
    with pytest.raises(RegistryError):
        reg.register(0, make_snapshot(0, (1, 2)), (1, 2))  # duplicate
    with pytest.raises(RegistryError):
        reg.register(2, make_snapshot(2, (5, 6)), (5, 6))  # gap
    with pytest.raises(RegistryError):
        reg.register(1, make_snapshot(0, (3, 4)), (3, 4))  # wrong task_index
    with pytest.raises(RegistryError):
        reg.register(1, make_snapshot(1, (3, 4)), (3, 5))  # ownership mismatch
    reg.register(1, make_snapshot(1, (3, 4)), (3, 4))
    assert reg.tasks == (0, 1)


def test_registry_lookup_and_source_task():
    reg = CheckpointRegistry()
    reg.register(0, make_snapshot(0, (1, 2)), (1, 2))
    reg.register(1, make_snapshot(1, (3,)), (3,))
    assert reg.source_task(1) == 0
    assert reg.source_task(3) == 1
    with pytest.raises(RegistryError):
        reg.source_task(9)
    with pytest.raises(RegistryError):
        reg.entry(5)


def test_registry_entries_frozen_under_later_training(tiny_data):
    # training after registration must not disturb the stored snapshot
    reg = CheckpointRegistry()
    schedule = build_schedule(4, 2, 2)
    torch.manual_seed(3)
    model = SegModel(TINY_MODEL, head="cit", class_ids=(1, 2))
    state = RunState(model=model, registry=reg, schedule=schedule)
    cfg = TrainConfig(pipeline_mode="accumulative", label_mode="soft",
                      steps_per_task=3, batch_size=4, seed=1)
    train_task(state, 0, filter_dataset(tiny_data, schedule, 0), cfg)
    digest = reg.entry(0).parameter_digest()
    train_task(state, 1, filter_dataset(tiny_data, schedule, 1), cfg)
    assert reg.entry(0).parameter_digest() == digest


# ------------------------------------------------------------- teacher targets


def two_task_registry(seed_a=0, seed_b=1):
    reg = CheckpointRegistry()
    reg.register(0, make_snapshot(0, (1, 2), seed=seed_a), (1, 2))
    reg.register(1, make_snapshot(1, (3, 4), seed=seed_b), (3, 4))
    return reg


def test_accumulative_channels_come_from_owning_checkpoints(images):
    reg = two_task_registry()
    out = assemble_targets_accumulative(reg, images, 2)
    assert out.class_ids == (1, 2, 3, 4)
    from_t0 = reg.entry(0).predict(images, class_ids=(1, 2))
    from_t1 = reg.entry(1).predict(images, class_ids=(3, 4))
    assert torch.equal(out.restrict((1, 2)).mask_logits, from_t0.mask_logits)
    assert torch.equal(out.restrict((3, 4)).mask_logits, from_t1.mask_logits)
    assert torch.equal(out.restrict((1, 2)).presence_logits, from_t0.presence_logits)


def test_iterative_channels_come_from_latest_checkpoint(images):
    reg = CheckpointRegistry()
    reg.register(0, make_snapshot(0, (1, 2), seed=0), (1, 2))
    # the task-1 model carries rows for 1..4 but only owns 3,4
    torch.manual_seed(5)
    model = SegModel(TINY_MODEL, head="cit", class_ids=(1, 2, 3, 4))
    model.eval()
    reg.register(1, ModelSnapshot.from_model(model, 1, (3, 4)), (3, 4))
    out = assemble_targets_iterative(reg, images, 2)
    ref = reg.entry(1).predict(images, class_ids=(1, 2, 3, 4))
    assert torch.equal(out.mask_logits, ref.mask_logits)
    # and these differ from what the original owner of 1,2 would say
    t0 = reg.entry(0).predict(images, class_ids=(1, 2))
    assert not torch.equal(out.restrict((1, 2)).mask_logits, t0.mask_logits)


def test_corruption_containment(images):
    # damage the class-1 row of the later model: accumulative targets for
    # class 1 are unaffected, iterative targets inherit the damage
    reg = CheckpointRegistry()
    reg.register(0, make_snapshot(0, (1, 2), seed=0), (1, 2))
    torch.manual_seed(5)
    model = SegModel(TINY_MODEL, head="cit", class_ids=(1, 2, 3, 4))
    with torch.no_grad():
        model.bank.queries[0] = 1e3
    model.eval()
    snap1 = ModelSnapshot.from_model(model, 1, (3, 4))

    accum_reg = CheckpointRegistry()
    accum_reg.register(0, reg.entry(0), (1, 2))
    accum_reg.register(1, snap1, (3, 4))
    clean = reg.entry(0).predict(images, class_ids=(1,))
    accum = assemble_targets_accumulative(accum_reg, images, 2).restrict((1,))
    iterative = assemble_targets_iterative(accum_reg, images, 2).restrict((1,))
    assert torch.equal(accum.mask_logits, clean.mask_logits)
    assert not torch.equal(iterative.mask_logits, clean.mask_logits)


def test_modes_agree_at_task_one(images):
    reg = CheckpointRegistry()
    reg.register(0, make_snapshot(0, (1, 2)), (1, 2))
    a = assemble_targets_accumulative(reg, images, 1)
    b = assemble_targets_iterative(reg, images, 1)
    assert a.class_ids == b.class_ids == (1, 2)
    assert torch.equal(a.mask_logits, b.mask_logits)
    assert torch.equal(a.presence_logits, b.presence_logits)


def test_assembly_requires_complete_registry(images):
    reg = CheckpointRegistry()
    with pytest.raises(ValueError):
        assemble_targets_accumulative(reg, images, 0)
    with pytest.raises(RegistryError):
        assemble_targets_accumulative(reg, images, 1)
    reg.register(0, make_snapshot(0, (1, 2)), (1, 2))
    with pytest.raises(RegistryError):
        assemble_targets_iterative(reg, images, 2)


def test_source_purity_guard(images, monkeypatch):
    reg = two_task_registry()
    snap0 = reg.entry(0)
    leaky = snap0.predict(images, class_ids=(1, 2))
    stray = LogitBundle(
        torch.zeros(2, 1), torch.zeros(2, 1, 32, 32), (3,)
    )
    merged = LogitBundle.concat([leaky, stray])
    monkeypatch.setattr(
        ModelSnapshot, "predict", lambda self, imgs, class_ids=None: merged
    )
    with pytest.raises(RegistryError, match="owns only"):
        assemble_targets_accumulative(reg, images, 2)


# ------------------------------------------------------------------ train_task


def micro_train_cfg(**kw):
    base = dict(
        pipeline_mode="accumulative",
        label_mode="soft",
        steps_per_task=4,
        batch_size=4,
        learning_rate=1e-3,
        seed=3,
    )
    base.update(kw)
    return TrainConfig(**base)


def fresh_state(schedule, seed=11):
    torch.manual_seed(seed)
    model = SegModel(TINY_MODEL, head="cit", class_ids=schedule.groups[0].class_ids)
    return RunState(model=model, registry=CheckpointRegistry(), schedule=schedule)


def test_train_task_grows_registry_and_extends_once(tiny_data, tmp_path):
    schedule = build_schedule(4, 2, 2)
    state = fresh_state(schedule)
    cfg = micro_train_cfg()
    log0 = tmp_path / "train_0.jsonl"
    train_task(state, 0, filter_dataset(tiny_data, schedule, 0), cfg, log_path=log0)
    assert state.registry.tasks == (0,)
    assert state.model.class_ids == (1, 2)
    train_task(state, 1, filter_dataset(tiny_data, schedule, 1), cfg)
    assert state.registry.tasks == (0, 1)
    assert state.model.class_ids == (1, 2, 3, 4)  # extended exactly once
    records = [json.loads(line) for line in log0.read_text().splitlines()]
    assert len(records) == 4
    assert records[0]["step"] == 0 and records[0]["no_teacher"] is True
    assert set(records[0]["routing"]) == {"1", "2"}


def test_train_task_rejects_out_of_order(tiny_data):
    schedule = build_schedule(4, 2, 2)
    state = fresh_state(schedule)
    cfg = micro_train_cfg()
    with pytest.raises(RegistryError):
        train_task(state, 1, filter_dataset(tiny_data, schedule, 1), cfg)
    train_task(state, 0, filter_dataset(tiny_data, schedule, 0), cfg)
    with pytest.raises(RegistryError):
        train_task(state, 0, filter_dataset(tiny_data, schedule, 0), cfg)
    with pytest.raises(ContractError):
        train_task(state, 1, filter_dataset(tiny_data, schedule, 0), cfg)


def test_train_task_numeric_abort_diagnostics(tiny_data):
    schedule = build_schedule(4, 2, 2)
    state = fresh_state(schedule)
    with torch.no_grad():
        next(state.model.encoder.parameters()).fill_(float("nan"))
    with pytest.raises(NumericAbort) as err:
        train_task(state, 0, filter_dataset(tiny_data, schedule, 0), micro_train_cfg())
    diag = err.value.diagnostics
    assert diag["task_index"] == 0 and diag["step"] == 0
    assert len(diag["batch_sample_ids"]) == 4
    assert len(state.registry) == 0  # nothing was registered


def test_train_task_deterministic(tiny_data):
    schedule = build_schedule(4, 2, 2)
    digests = []
    for _ in range(2):
        state = fresh_state(schedule, seed=21)
        cfg = micro_train_cfg(seed=9)
        train_task(state, 0, filter_dataset(tiny_data, schedule, 0), cfg)
        train_task(state, 1, filter_dataset(tiny_data, schedule, 1), cfg)
        digests.append(state.registry.entry(1).parameter_digest())
    assert digests[0] == digests[1]


def test_evaluate_model_snapshot_matches_live_model(tiny_data):
    schedule = build_schedule(4, 2, 2)
    state = fresh_state(schedule)
    train_task(state, 0, filter_dataset(tiny_data, schedule, 0), micro_train_cfg())
    state.model.eval()
    live = evaluate_model(state.model, tiny_data[:8], schedule, 0)
    frozen = evaluate_model(state.registry.entry(0), tiny_data[:8], schedule, 0)
    assert live.to_json_dict() == frozen.to_json_dict()


# --------------------------------------------------------------------- configs


def test_train_config_validation_and_step_budget():
    with pytest.raises(ValueError):
        micro_train_cfg(pipeline_mode="both")
    with pytest.raises(ValueError):
        micro_train_cfg(label_mode="hard")
    with pytest.raises(ValueError):
        micro_train_cfg(steps_per_task=0)
    with pytest.raises(ValueError):
        micro_train_cfg(incremental_factor=0.0)
    cfg = micro_train_cfg(steps_per_task=600, incremental_factor=0.5)
    assert cfg.steps_for_task(0) == 600
    assert cfg.steps_for_task(1) == cfg.steps_for_task(3) == 300
    tiny = micro_train_cfg(steps_per_task=1, incremental_factor=0.25)
    assert tiny.steps_for_task(2) == 1  # never rounds to zero


def test_label_mode_syncs_distill_mode():
    cfg = micro_train_cfg(label_mode="pseudo")
    assert cfg.distill.mode == "pseudo"
    cfg = micro_train_cfg(label_mode="soft", distill=DistillConfig(mode="pseudo", lambda2=3.0))
    assert cfg.distill.mode == "soft" and cfg.distill.lambda2 == 3.0


def test_schedule_spec_and_experiment_validation(tmp_path):
    spec = ScheduleSpec(total=8, init=4, incr=2, protocol="overlap")
    schedule = spec.build()
    assert schedule.num_tasks == 3 and schedule.groups[0].class_ids == (1, 2, 3, 4)
    with pytest.raises(ValueError):
        ExperimentConfig(
            output_dir=str(tmp_path),
            synth=SynthConfig(num_classes=6),
            schedule=ScheduleSpec(total=8, init=4, incr=2),
        )
    with pytest.raises(ValueError):
        EvalConfig(tau=1.5)


# -------------------------------------------------------------- run_experiment


def micro_experiment(out_dir, seed=0, **train_kw):
    train = dict(
        pipeline_mode="accumulative",
        label_mode="soft",
        steps_per_task=6,
        batch_size=4,
        learning_rate=1e-3,
        seed=seed,
    )
    train.update(train_kw)
    return ExperimentConfig(
        output_dir=str(out_dir),
        synth=SynthConfig(num_classes=4, image_size=32, seed=seed),
        schedule=ScheduleSpec(total=4, init=2, incr=2),
        train=TrainConfig(**train),
        model=TINY_MODEL,
        train_samples=24,
        test_samples=8,
    )


def test_run_experiment_artifacts_and_schema(tmp_path):
    out = tmp_path / "run"
    doc = run_experiment(micro_experiment(out))
    validate_results_schema(doc)
    assert (out / "config.json").is_file()
    assert (out / "results.json").is_file()
    assert (out / "logs" / "train_0.jsonl").is_file()
    assert (out / "logs" / "train_1.jsonl").is_file()
    assert (out / "registry" / "task_0" / "manifest.json").is_file()
    assert (out / "registry" / "task_1" / "weights.pt").is_file()
    curves = (out / "curves" / "base_miou.csv").read_text().splitlines()
    assert curves[0] == "task_index,base_miou,new_miou,all_miou"
    assert len(curves) == 3
    on_disk = json.loads((out / "results.json").read_text())
    assert strip_timing(on_disk) == strip_timing(doc)
    assert doc["tasks"][0]["task_index"] == 0
    assert set(doc["dataset_digest"]) == {"train", "test"}


def test_run_experiment_refuses_dirty_dir(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    with pytest.raises(FileExistsError):
        run_experiment(micro_experiment(out))
    run_experiment(micro_experiment(out), force=True)
    assert (out / "results.json").is_file()


def test_run_experiment_byte_identical_reruns(tmp_path):
    a = run_experiment(micro_experiment(tmp_path / "a", seed=5))
    b = run_experiment(micro_experiment(tmp_path / "b", seed=5))
    assert strip_timing(a) == strip_timing(b)
    ja = json.loads((tmp_path / "a" / "results.json").read_text())
    jb = json.loads((tmp_path / "b" / "results.json").read_text())
    assert strip_timing(ja) == strip_timing(jb)
    # and a different seed actually changes the outcome
    c = run_experiment(micro_experiment(tmp_path / "c", seed=6))
    assert strip_timing(a) != strip_timing(c)


def test_run_experiment_mode_flag_changes_training(tmp_path):
    a = run_experiment(micro_experiment(tmp_path / "a", seed=2))
    b = run_experiment(micro_experiment(tmp_path / "b", seed=2, pipeline_mode="iterative"))
    # task 0 has no teacher, so the first checkpoints agree; task 1 diverges
    assert a["tasks"][0]["group_miou"] == b["tasks"][0]["group_miou"]
    assert a["config"]["train"]["pipeline_mode"] != b["config"]["train"]["pipeline_mode"]


def test_validate_results_schema_rejects_gaps(tmp_path):
    doc = run_experiment(micro_experiment(tmp_path / "r"))
    bad = json.loads(json.dumps(doc))
    bad.pop("forgetting")
    with pytest.raises(ValueError):
        validate_results_schema(bad)
    bad2 = json.loads(json.dumps(doc))
    bad2["tasks"][1]["task_index"] = 5
    with pytest.raises(ValueError):
        validate_results_schema(bad2)
    bad3 = json.loads(json.dumps(doc))
    bad3["format_version"] = 99
    with pytest.raises(ValueError):
        validate_results_schema(bad3)
