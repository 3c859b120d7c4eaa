"""
Experiment pipeline as a LangGraph workflow.

prepare_data -> pretrain_encoders -> probe_teachers -> train_students -> emit_report,
with conditional routing past stages that have no jobs. Each run is a cell:
its report carries a digest of everything the run depends on, so an
interrupted experiment can be resumed cell by cell.
"""

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from langgraph.graph import END, StateGraph

from app.config import load_settings
from app.data import Dataset
from app.errors import KDError
from app.evaluation import RunReport, emit_summary, emit_table
from app.experiment import ExperimentFile, StudentConfig, resolve_dataset, resolve_pretrain_dataset
from app.state import PipelineState
from app.tools.checkpoint_io import save_checkpoint
from app.tools.report_store import ReportStore, file_digest
from app.training import TrainConfig, pretrain_encoder, train_student, train_teacher_probe

logger = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    reports: List[RunReport] = field(default_factory=list)
    failures: List[Dict[str, str]] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    table: str = ""
    table_path: Optional[Path] = None


def dataset_fingerprint(dataset: Dataset) -> str:
    h = hashlib.sha256()
    h.update(dataset.features.tobytes())
    h.update(dataset.labels.tobytes())
    h.update(json.dumps({"splits": dataset.splits, "num_classes": dataset.num_classes}, sort_keys=True).encode())
    return h.hexdigest()


def cell_digest(payload: Dict[str, Any]) -> str:
    """Digest of everything a run depends on: its config, the data and upstream checkpoints."""
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def _student_cell(dataset: Dataset, cfg_json: Dict[str, Any], checkpoint_path: str) -> Tuple[Optional[Dict[str, Any]], Optional[float], Optional[str]]:
    """Run one student cell; returns (report, seconds, None) or (None, None, error)."""
    cfg = TrainConfig.model_validate(cfg_json)
    try:
        checkpoint, report = train_student(dataset, cfg)
        save_checkpoint(checkpoint, checkpoint_path)
    except KDError as e:
        logger.error(f"Student {cfg.name} failed: {e}")
        return None, None, f"{type(e).__name__}: {e}"
    return report.model_dump(mode="json"), report.wall_clock_seconds, None


class ExperimentPipeline:
    """
    Knowledge-distillation experiment workflow.

    Orchestrates encoder pretraining, teacher linear probing and the student
    regime grid, tolerating per-cell failures.
    """

    def __init__(self):
        self.graph = self._build_graph()

    def _build_graph(self):
        """Build and compile the LangGraph workflow."""
        workflow = StateGraph(PipelineState)

        workflow.add_node("prepare_data", self._prepare_data_node)
        workflow.add_node("pretrain_encoders", self._pretrain_node)
        workflow.add_node("probe_teachers", self._probe_node)
        workflow.add_node("train_students", self._students_node)
        workflow.add_node("emit_report", self._report_node)

        workflow.set_entry_point("prepare_data")

        workflow.add_conditional_edges(
            "prepare_data",
            self._next_stage,
            {"pretrain": "pretrain_encoders", "probe": "probe_teachers", "students": "train_students", "report": "emit_report"},
        )
        workflow.add_conditional_edges(
            "pretrain_encoders",
            self._after_pretrain,
            {"probe": "probe_teachers", "students": "train_students", "report": "emit_report"},
        )
        workflow.add_conditional_edges(
            "probe_teachers",
            self._after_probe,
            {"students": "train_students", "report": "emit_report"},
        )
        workflow.add_edge("train_students", "emit_report")
        workflow.add_edge("emit_report", END)

        return workflow.compile()

    # Routing

    def _next_stage(self, state: PipelineState) -> Literal["pretrain", "probe", "students", "report"]:
        if state["experiment"].pretrain:
            return "pretrain"
        return self._after_pretrain(state)

    def _after_pretrain(self, state: PipelineState) -> Literal["probe", "students", "report"]:
        if state["experiment"].teachers:
            return "probe"
        return self._after_probe(state)

    def _after_probe(self, state: PipelineState) -> Literal["students", "report"]:
        return "students" if state["experiment"].students else "report"

    # Helpers

    @staticmethod
    def _store(state: PipelineState) -> ReportStore:
        store = ReportStore(state["out_dir"])
        store.root.mkdir(parents=True, exist_ok=True)
        return store

    @staticmethod
    def _resolve_ref(ref: str, produced: Dict[str, str]) -> Optional[str]:
        if ref in produced:
            return produced[ref]
        if Path(ref).is_file():
            return ref
        return None

    @staticmethod
    def _failure(name: str, stage: str, error: str) -> Dict[str, str]:
        return {"name": name, "stage": stage, "error": error}

    def _resume(self, state: PipelineState, store: ReportStore, name: str, digest: str) -> Optional[RunReport]:
        if not state.get("resume"):
            return None
        report = store.lookup(name, digest)
        if report is not None:
            logger.info(f"⏭️ Resuming {name}: stored report matches cell digest")
        return report

    # Nodes

    def _prepare_data_node(self, state: PipelineState) -> Dict[str, Any]:
        """Resolve the experiment dataset and pretraining pool; failures here end the experiment."""
        logger.info("📦 Preparing dataset...")
        dataset = resolve_dataset(state["experiment"])
        logger.info(
            f"Dataset ready: {len(dataset)} samples, {dataset.num_classes} classes, input {dataset.input_shape}, "
            f"val split {'present' if dataset.has_val else 'absent'}"
        )
        pretrain_dataset = resolve_pretrain_dataset(state["experiment"], dataset)
        if pretrain_dataset is not dataset:
            logger.info(f"Pretraining pool ready: {len(pretrain_dataset)} samples, {pretrain_dataset.num_classes} classes")
        return {"dataset": dataset, "pretrain_dataset": pretrain_dataset, "encoders": {}, "teachers": {}}

    def _pretrain_node(self, state: PipelineState) -> Dict[str, Any]:
        logger.info("🏗️ Pretraining encoders...")
        store = self._store(state)
        dataset = state["pretrain_dataset"]
        fingerprint = dataset_fingerprint(dataset)
        encoders, reports, failures, skipped = {}, [], [], []
        for job in state["experiment"].pretrain:
            path = store.checkpoint_path(job.name)
            digest = cell_digest({"kind": "pretrain", "config": job.model_dump(mode="json"), "data": fingerprint})
            resumed = self._resume(state, store, job.name, digest)
            if resumed is not None:
                encoders[job.name] = str(path)
                reports.append(resumed)
                skipped.append(job.name)
                continue
            try:
                checkpoint, report = pretrain_encoder(dataset, job)
                save_checkpoint(checkpoint, path)
            except KDError as e:
                logger.error(f"Error in encoder pretraining {job.name}: {e}")
                failures.append(self._failure(job.name, "pretrain", str(e)))
                continue
            report.cell_digest = digest
            store.save(report)
            encoders[job.name] = str(path)
            reports.append(report)
        return {"encoders": encoders, "reports": reports, "failures": failures, "skipped": skipped}

    def _probe_node(self, state: PipelineState) -> Dict[str, Any]:
        logger.info("🔬 Probing teachers on frozen encoders...")
        store = self._store(state)
        dataset = state["dataset"]
        fingerprint = dataset_fingerprint(dataset)
        teachers, reports, failures, skipped = {}, [], [], []
        for teacher in state["experiment"].teachers:
            encoder_path = self._resolve_ref(teacher.encoder, state.get("encoders", {}))
            if encoder_path is None:
                failures.append(self._failure(teacher.name, "probe", f"encoder {teacher.encoder!r} is unavailable"))
                continue
            path = store.checkpoint_path(teacher.name)
            cfg = teacher.probe.model_copy(update={"name": teacher.name})
            digest = cell_digest(
                {"kind": "teacher", "config": cfg.model_dump(mode="json"), "data": fingerprint, "encoder": file_digest(encoder_path)}
            )
            resumed = self._resume(state, store, teacher.name, digest)
            if resumed is not None:
                teachers[teacher.name] = str(path)
                reports.append(resumed)
                skipped.append(teacher.name)
                continue
            try:
                checkpoint = train_teacher_probe(encoder_path, dataset, cfg)
                save_checkpoint(checkpoint, path)
            except KDError as e:
                logger.error(f"Error in teacher probe {teacher.name}: {e}")
                failures.append(self._failure(teacher.name, "probe", str(e)))
                continue
            report = RunReport.model_validate(checkpoint.report)
            report.cell_digest = digest
            store.save(report)
            teachers[teacher.name] = str(path)
            reports.append(report)
        return {"teachers": teachers, "reports": reports, "failures": failures, "skipped": skipped}

    def _student_cells(self, state: PipelineState, fingerprint: str) -> Tuple[List[Tuple[str, Any, str]], List[Dict[str, str]]]:
        """Expand students x seeds into (digest, TrainConfig, checkpoint path) cells."""
        experiment: ExperimentFile = state["experiment"]
        store = self._store(state)
        cells, failures = [], []
        for student in experiment.students:
            for seed in experiment.student_seeds(state.get("seed_override")):
                name = student.run_name(seed)
                upstream = self._upstream(student, state)
                if isinstance(upstream, str):
                    failures.append(self._failure(name, "student", upstream))
                    continue
                encoder_path, teacher_path = upstream
                cfg = student.train_config(seed, encoder_path, teacher_path)
                digest = cell_digest(
                    {
                        "kind": "student",
                        "config": cfg.model_dump(mode="json"),
                        "data": fingerprint,
                        "encoder": file_digest(encoder_path) if encoder_path else None,
                        "teacher": file_digest(teacher_path) if teacher_path else None,
                    }
                )
                cells.append((digest, cfg, str(store.checkpoint_path(name))))
        return cells, failures

    def _upstream(self, student: StudentConfig, state: PipelineState) -> Union[str, Tuple[Optional[str], Optional[str]]]:
        encoder_path = teacher_path = None
        if student.init == "pretrained":
            encoder_path = self._resolve_ref(student.encoder, state.get("encoders", {}))
            if encoder_path is None:
                return f"encoder {student.encoder!r} is unavailable"
        if student.strategy == "distill":
            teacher_path = self._resolve_ref(student.teacher, state.get("teachers", {}))
            if teacher_path is None:
                return f"teacher {student.teacher!r} is unavailable"
        return encoder_path, teacher_path

    def _students_node(self, state: PipelineState) -> Dict[str, Any]:
        logger.info("🎓 Training students...")
        store = self._store(state)
        dataset = state["dataset"]
        cells, failures = self._student_cells(state, dataset_fingerprint(dataset))
        reports: Dict[str, RunReport] = {}
        skipped = []
        pending = []
        for digest, cfg, path in cells:
            resumed = self._resume(state, store, cfg.name, digest)
            if resumed is not None:
                reports[cfg.name] = resumed
                skipped.append(cfg.name)
            else:
                pending.append((digest, cfg, path))

        jobs = max(1, state.get("jobs") or 1)
        logger.info(f"{len(pending)} student cells to train, {len(skipped)} resumed, {jobs} parallel jobs")
        if jobs > 1 and len(pending) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(_student_cell, dataset, cfg.model_dump(mode="json"), path) for _, cfg, path in pending]
                outcomes = []
                for (_, cfg, _), future in zip(pending, futures):
                    try:
                        outcomes.append(future.result())
                    except Exception as e:
                        logger.error(f"Student worker for {cfg.name} crashed: {e}")
                        outcomes.append((None, None, f"{type(e).__name__}: {e}"))
        else:
            outcomes = [_student_cell(dataset, cfg.model_dump(mode="json"), path) for _, cfg, path in pending]

        for (digest, cfg, _), (payload, seconds, error) in zip(pending, outcomes):
            if error is not None:
                failures.append(self._failure(cfg.name, "student", error))
                continue
            report = RunReport.model_validate(payload)
            report.cell_digest = digest
            report.wall_clock_seconds = seconds
            store.save(report)
            reports[cfg.name] = report

        ordered = [reports[cfg.name] for _, cfg, _ in cells if cfg.name in reports]
        return {"reports": ordered, "failures": failures, "skipped": skipped}

    def _report_node(self, state: PipelineState) -> Dict[str, Any]:
        logger.info("📊 Writing result tables...")
        reports = [r for r in state.get("reports", []) if r.role in ("teacher", "student")]
        if not reports:
            logger.warning("No teacher or student runs completed; no table written")
            return {"table": ""}
        table = emit_table(reports)
        if any(r.role == "student" for r in reports):
            table += "\n### Summary over seeds\n\n" + emit_summary(reports)
        path = self._store(state).write_table(table)
        for failure in state.get("failures", []):
            logger.error(f"❌ {failure['stage']} {failure['name']} failed: {failure['error']}")
        logger.info(f"✅ Results written to {path}")
        return {"table": table}


def run_experiment(
    experiment: ExperimentFile,
    out_dir: Optional[Union[str, Path]] = None,
    jobs: Optional[int] = None,
    resume: bool = False,
    seed_override: Optional[int] = None,
) -> PipelineResult:
    """
    Run every job of an experiment file.

    Args:
        experiment: Validated experiment.
        out_dir: Output root; defaults to KD_OUTPUT_DIR.
        jobs: Parallel student cells; defaults to KD_JOBS.
        resume: Skip cells whose stored report has a matching cell digest.
        seed_override: Replaces the experiment seed for student cells.

    Returns:
        PipelineResult: Reports in pipeline order, failed cells, resumed cells and the table.
    """
    settings = load_settings()
    out_dir = Path(out_dir) if out_dir is not None else settings.output_dir
    logger.info(f"🚀 Starting experiment {experiment.name!r} in {out_dir}")
    final = ExperimentPipeline().graph.invoke(
        {
            "experiment": experiment,
            "out_dir": str(out_dir),
            "jobs": jobs or settings.jobs,
            "resume": resume,
            "seed_override": seed_override,
            "reports": [],
            "failures": [],
            "skipped": [],
        }
    )
    table = final.get("table") or ""
    return PipelineResult(
        reports=final.get("reports", []),
        failures=final.get("failures", []),
        skipped=final.get("skipped", []),
        table=table,
        table_path=out_dir / "results.md" if table else None,
    )


def get_graph():
    """Compiled experiment graph for the LangGraph manifest."""
    return ExperimentPipeline().graph
