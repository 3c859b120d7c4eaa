"""Desk-scale direction-of-effect runs on the species benchmark (slow; run with -m slow)."""

import json
from pathlib import Path
from statistics import mean

import pytest

from app.experiment import ExperimentFile
from app.pipeline import run_experiment

EXPERIMENT = Path(__file__).parent / "experiments" / "species_benchmark.json"


@pytest.fixture(scope="module")
def grid(tmp_path_factory):
    raw = json.loads(EXPERIMENT.read_text())
    raw["pretrain"] = [j for j in raw["pretrain"] if j["name"] in ("teacher-l-fine", "vit-s-coarse")]
    raw["teachers"] = [t for t in raw["teachers"] if t["name"] == "teacher-l-sup"]
    raw["students"] = raw["students"][:4]
    result = run_experiment(ExperimentFile.model_validate(raw), out_dir=tmp_path_factory.mktemp("species"))
    assert not result.failures
    return [r for r in result.reports if r.role == "student"]


def mean_accuracy(reports, init, strategy):
    values = [r.test_accuracy for r in reports if r.init == init and r.strategy == strategy]
    assert len(values) == 5
    return mean(values)


@pytest.mark.slow
def test_scratch_distill_beats_scratch_finetune_by_a_point(grid):
    assert mean_accuracy(grid, "scratch", "distill") >= mean_accuracy(grid, "scratch", "finetune") + 0.01


@pytest.mark.slow
def test_pretrained_distill_not_worse_than_pretrained_finetune(grid):
    assert mean_accuracy(grid, "pretrained", "distill") >= mean_accuracy(grid, "pretrained", "finetune")


@pytest.mark.slow
def test_pretraining_helps_finetuning(grid):
    assert mean_accuracy(grid, "pretrained", "finetune") > mean_accuracy(grid, "scratch", "finetune")


@pytest.mark.slow
def test_every_run_ends_below_its_first_epoch_loss(grid):
    for report in grid:
        assert report.epochs[-1].train_loss < report.epochs[0].train_loss, report.name
