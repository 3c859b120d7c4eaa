"""Training runs: pipeline contracts, determinism and selection rules."""

import logging
import re

import numpy as np
import pytest
from pydantic import ValidationError

from app.data import Dataset, GenSpec, generate
from app.errors import CheckpointError, ConfigError, NumericError
from app.evaluation import majority_baseline
from app.models import LayerSpec, ModelSpec, build_preset, from_checkpoint, init_truncated_normal, to_checkpoint
from app.objectives import DistillConfig
from app.tools.checkpoint_io import save_checkpoint
from app.training import (
    PretrainConfig,
    ProbeConfig,
    TeacherSource,
    TrainConfig,
    evaluate,
    evaluate_checkpoint,
    load_teacher,
    pretrain_encoder,
    teacher_logits,
    train_student,
    train_teacher_probe,
)

EPOCH_LINE = re.compile(r"^epoch=\d+ train_loss=\d+\.\d+ (val_acc|train_acc)=\d\.\d+ lr=\S+$")


@pytest.fixture
def teacher_path(tmp_path, tiny_dataset):
    spec = build_preset("teacher-b", tiny_dataset.input_shape, tiny_dataset.num_classes, widths=[16, 16])
    path = tmp_path / "teacher.ckpt"
    save_checkpoint(to_checkpoint(init_truncated_normal(spec, std=0.3, seed=9), {"name": "tb"}), path)
    return path


def student_cfg(quick_schedule, **kwargs) -> TrainConfig:
    return TrainConfig(preset="vit-s", widths=[16], seed=1, **quick_schedule, **kwargs)


def test_alpha_zero_distill_equals_finetune(tiny_dataset, teacher_path, quick_schedule):
    finetune_ckpt, finetune = train_student(tiny_dataset, student_cfg(quick_schedule))
    distill_ckpt, distill = train_student(
        tiny_dataset,
        student_cfg(quick_schedule, strategy="distill", teacher_path=str(teacher_path), distill=DistillConfig(alpha=0.0)),
    )
    for name, tensor in finetune_ckpt.tensors.items():
        np.testing.assert_allclose(distill_ckpt.tensors[name], tensor, rtol=0, atol=1e-12)
    assert [e.train_loss for e in distill.epochs] == [e.train_loss for e in finetune.epochs]


def test_self_distillation_starts_at_zero_loss(tiny_dataset, tmp_path, quick_schedule):
    cfg = student_cfg(quick_schedule, strategy="distill", teacher_path=str(tmp_path / "self.ckpt"), distill=DistillConfig(alpha=1.0))
    spec = build_preset("vit-s", tiny_dataset.input_shape, tiny_dataset.num_classes, widths=[16])
    save_checkpoint(to_checkpoint(init_truncated_normal(spec, cfg.init_std, cfg.seed)), cfg.teacher_path)
    _, report = train_student(tiny_dataset, cfg)
    assert abs(report.initial_loss) < 1e-12


def test_teacher_checkpoint_is_untouched(tiny_dataset, teacher_path, quick_schedule):
    before = teacher_path.read_bytes()
    train_student(tiny_dataset, student_cfg(quick_schedule, strategy="distill", teacher_path=str(teacher_path)))
    assert teacher_path.read_bytes() == before


def test_cached_and_recomputed_teacher_logits_agree(tiny_dataset, teacher_path, quick_schedule):
    base = dict(strategy="distill", teacher_path=str(teacher_path))
    cached, cached_report = train_student(tiny_dataset, student_cfg(quick_schedule, teacher_cache=True, **base))
    fresh, fresh_report = train_student(tiny_dataset, student_cfg(quick_schedule, teacher_cache=False, **base))
    for name in fresh.tensors:
        np.testing.assert_array_equal(cached.tensors[name], fresh.tensors[name])
    assert cached_report.test_accuracy == fresh_report.test_accuracy


def test_teacher_source_rows_match_cache(tiny_dataset, teacher_path):
    teacher = load_teacher(teacher_path, tiny_dataset)
    cached = TeacherSource(teacher, tiny_dataset, cache=True)
    fresh = TeacherSource(teacher, tiny_dataset, cache=False)
    idx = np.array([5, 0, 77, 12])
    np.testing.assert_array_equal(cached.logits(idx), fresh.logits(idx))
    np.testing.assert_array_equal(fresh.logits(idx), teacher_logits(teacher, tiny_dataset.features[idx]))


def test_runs_are_bitwise_reproducible(tiny_dataset, teacher_path, quick_schedule):
    cfg = student_cfg(quick_schedule, strategy="distill", teacher_path=str(teacher_path), teacher_name="tb")
    first_ckpt, first = train_student(tiny_dataset, cfg)
    second_ckpt, second = train_student(tiny_dataset, cfg)
    assert first_ckpt.to_bytes() == second_ckpt.to_bytes()
    assert first.model_dump_json() == second.model_dump_json()
    assert first.teacher == "tb"
    assert first.teacher_provenance.digest == second.teacher_provenance.digest


def test_report_contents(tiny_dataset, quick_schedule):
    ckpt, report = train_student(tiny_dataset, student_cfg(quick_schedule))
    assert report.role == "student" and report.init == "scratch" and report.strategy == "finetune"
    assert report.config["seed"] == 1
    assert len(report.epochs) == quick_schedule["epochs"]
    assert report.metadata["batch_size"] == 16 and report.metadata["augmentation"] == "none"
    assert ckpt.metadata["metrics"]["test_accuracy"] == report.test_accuracy
    assert report.teacher_provenance is None


def test_best_val_epoch_is_selected_with_earliest_tie(tiny_dataset, quick_schedule):
    _, report = train_student(tiny_dataset, student_cfg(quick_schedule))
    accuracies = [e.val_accuracy for e in report.epochs]
    assert report.selected_epoch == accuracies.index(max(accuracies)) + 1


def test_last_epoch_selected_without_val(tiny_image_dataset, quick_schedule, caplog):
    cfg = TrainConfig(preset="cnx-t", widths=[4, 4], **quick_schedule)
    with caplog.at_level(logging.INFO, logger="app.training"):
        _, report = train_student(tiny_image_dataset, cfg)
    assert report.selected_epoch == quick_schedule["epochs"]
    assert all(e.val_accuracy is None and e.train_accuracy is not None for e in report.epochs)
    lines = [r.getMessage() for r in caplog.records if r.getMessage().startswith("epoch=")]
    assert len(lines) == quick_schedule["epochs"]
    assert all(EPOCH_LINE.match(line) and "train_acc=" in line for line in lines)


def test_one_log_line_per_epoch(tiny_dataset, quick_schedule, caplog):
    with caplog.at_level(logging.INFO, logger="app.training"):
        train_student(tiny_dataset, student_cfg(quick_schedule))
    lines = [r.getMessage() for r in caplog.records if r.getMessage().startswith("epoch=")]
    assert len(lines) == quick_schedule["epochs"]
    assert all(EPOCH_LINE.match(line) and "val_acc=" in line for line in lines)


def test_train_loss_decreases(tiny_dataset, quick_schedule):
    _, report = train_student(tiny_dataset, student_cfg({**quick_schedule, "epochs": 6}))
    assert report.epochs[-1].train_loss < report.epochs[0].train_loss


def test_eval_reproduces_stored_accuracy(tiny_dataset, tmp_path, quick_schedule):
    ckpt, report = train_student(tiny_dataset, student_cfg(quick_schedule))
    path = save_checkpoint(ckpt, tmp_path / "s.ckpt")
    assert evaluate_checkpoint(path, tiny_dataset, "test") == report.test_accuracy


def test_teacher_class_mismatch_is_config_error(tiny_dataset, tmp_path, quick_schedule):
    spec = build_preset("teacher-b", tiny_dataset.input_shape, 7, widths=[8])
    path = save_checkpoint(to_checkpoint(init_truncated_normal(spec)), tmp_path / "wrong.ckpt")
    with pytest.raises(ConfigError, match="7 classes"):
        train_student(tiny_dataset, student_cfg(quick_schedule, strategy="distill", teacher_path=str(path)))


def test_non_finite_loss_names_step(tiny_dataset, quick_schedule):
    poisoned = Dataset(
        features=np.full(tiny_dataset.features.shape, np.inf),
        labels=tiny_dataset.labels.copy(),
        splits=dict(tiny_dataset.splits),
        num_classes=tiny_dataset.num_classes,
    )
    with pytest.raises(NumericError, match="step 0"):
        train_student(poisoned, student_cfg(quick_schedule))


def test_config_contracts():
    with pytest.raises(ValidationError):
        TrainConfig(preset="vit-s", strategy="distill")
    with pytest.raises(ValidationError):
        TrainConfig(preset="vit-s", init="pretrained")
    with pytest.raises(ValidationError):
        TrainConfig(preset="vit-s", lr_max=1e-6, lr_min=1e-4)
    with pytest.raises(ValidationError):
        TrainConfig(preset="vit-s", augmentation="mixup")
    cfg = TrainConfig(preset="vit-s", strategy="distill", teacher_path="t.ckpt", distill=DistillConfig(kl_direction="student_teacher"))
    assert cfg.kl_direction == "student_teacher"
    assert cfg.epochs == 30 and cfg.batch_size == 64 and cfg.lr_max == 1e-4


def test_environment_sets_schedule_defaults(monkeypatch):
    monkeypatch.setenv("KD_EPOCHS", "4")
    monkeypatch.setenv("KD_BATCH_SIZE", "8")
    cfg = TrainConfig(preset="vit-s")
    assert (cfg.epochs, cfg.batch_size) == (4, 8)


def identity_encoder(dataset) -> ModelSpec:
    dim = dataset.input_shape[0]
    return ModelSpec(name="identity", input_shape=(dim,), layers=[], head=LayerSpec(kind="dense", in_features=dim, out_features=2))


def test_probe_keeps_encoder_bytes(tiny_dataset, quick_schedule):
    encoder_ckpt, _ = pretrain_encoder(tiny_dataset, PretrainConfig(preset="vit-s", widths=[12], merge_factor=2, **quick_schedule))
    teacher = train_teacher_probe(encoder_ckpt, tiny_dataset, ProbeConfig(**quick_schedule))
    encoder_names = [n for n in encoder_ckpt.tensors if n.startswith("encoder.")]
    assert encoder_names
    for name in encoder_names:
        assert teacher.tensors[name].tobytes() == encoder_ckpt.tensors[name].tobytes()
    assert teacher.tensors["head.weight"].shape == (12, tiny_dataset.num_classes)
    report = teacher.metadata["report"]
    assert report["role"] == "teacher" and report["strategy"] == "linear-probe"


def test_probe_beats_majority_baseline(tiny_dataset, quick_schedule):
    encoder_ckpt, _ = pretrain_encoder(tiny_dataset, PretrainConfig(preset="vit-s", widths=[12], **quick_schedule))
    teacher = from_checkpoint(train_teacher_probe(encoder_ckpt, tiny_dataset, ProbeConfig(**quick_schedule)))
    assert evaluate(teacher, tiny_dataset, "test") >= majority_baseline(tiny_dataset.split_labels("test"))


def test_probe_separates_noise_free_classes_through_identity_encoder():
    dataset = generate(
        GenSpec(num_classes=4, samples_per_class=20, feature_dim=8, modes_per_class=1, subclass_spread=0.0, noise=0.0, class_separation=1.0, seed=4)
    )
    encoder = to_checkpoint(init_truncated_normal(identity_encoder(dataset), seed=0), {"name": "identity"})
    teacher = train_teacher_probe(encoder, dataset, ProbeConfig(epochs=30, batch_size=16, lr_max=5e-2, lr_min=1e-3))
    assert evaluate(from_checkpoint(teacher), dataset, "train") == 1.0


def test_probe_rejects_shape_mismatch(tiny_dataset, tiny_image_dataset):
    encoder = to_checkpoint(init_truncated_normal(identity_encoder(tiny_dataset)))
    with pytest.raises(ConfigError, match="input"):
        train_teacher_probe(encoder, tiny_image_dataset, ProbeConfig(epochs=1))


def test_pretrained_student_starts_from_encoder(tiny_dataset, tmp_path, quick_schedule):
    encoder_ckpt, encoder_report = pretrain_encoder(tiny_dataset, PretrainConfig(preset="vit-s", widths=[16], merge_factor=2, **quick_schedule))
    assert encoder_report.role == "pretrain" and encoder_report.metadata["num_classes"] == 2
    path = save_checkpoint(encoder_ckpt, tmp_path / "enc.ckpt")
    _, report = train_student(tiny_dataset, student_cfg(quick_schedule, init="pretrained", pretrained_path=str(path)))
    assert report.init == "pretrained"


def test_pretrained_student_rejects_other_preset(tiny_dataset, tmp_path, quick_schedule):
    encoder_ckpt, _ = pretrain_encoder(tiny_dataset, PretrainConfig(preset="vit-s", widths=[16], **quick_schedule))
    path = save_checkpoint(encoder_ckpt, tmp_path / "enc.ckpt")
    with pytest.raises(ConfigError, match="encoder.0"):
        train_student(tiny_dataset, TrainConfig(preset="vit-s+", init="pretrained", pretrained_path=str(path), **quick_schedule))


def test_nan_encoder_weight_aborts_training(tiny_dataset, tmp_path, quick_schedule):
    spec = build_preset("vit-s", tiny_dataset.input_shape, tiny_dataset.num_classes, widths=[16])
    checkpoint = to_checkpoint(init_truncated_normal(spec, seed=2))
    checkpoint.tensors["encoder.0.weight"][0, 0] = np.nan
    path = save_checkpoint(checkpoint, tmp_path / "nan.ckpt")
    with pytest.raises(NumericError, match="step 0"):
        train_student(tiny_dataset, student_cfg(quick_schedule, init="pretrained", pretrained_path=str(path)))


def test_evaluate_checkpoint_checks_expected_spec(tiny_dataset, tmp_path, quick_schedule):
    checkpoint, report = train_student(tiny_dataset, student_cfg(quick_schedule))
    path = save_checkpoint(checkpoint, tmp_path / "student.ckpt")
    same = build_preset("vit-s", tiny_dataset.input_shape, tiny_dataset.num_classes, widths=[16])
    assert evaluate_checkpoint(path, tiny_dataset, expected=same) == report.test_accuracy
    other = build_preset("vit-s+", tiny_dataset.input_shape, tiny_dataset.num_classes)
    with pytest.raises(CheckpointError, match="'vit-s'.*'vit-s\\+'"):
        evaluate_checkpoint(path, tiny_dataset, expected=other)
