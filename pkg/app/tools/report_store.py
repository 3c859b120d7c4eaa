import hashlib
import json
import logging
import os
from pathlib import Path
from typing import List, Optional, Union

from pydantic import ValidationError

from app.errors import ConfigError, KDError, StorageError
from app.evaluation import RunReport, report_json

logger = logging.getLogger(__name__)


def save_report(report: RunReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_text(report_json(report) + "\n")
    except OSError as e:
        raise StorageError(f"cannot write report {path}: {e}") from e
    return path


def load_report(path: Union[str, Path]) -> RunReport:
    path = Path(path)
    try:
        return RunReport.model_validate(json.loads(path.read_text()))
    except OSError as e:
        raise StorageError(f"cannot read report {path}: {e}") from e
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"invalid report {path}: {e}") from e


def report_digest(report: RunReport) -> str:
    return hashlib.sha256(report_json(report).encode("utf-8")).hexdigest()


def file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class ReportStore:
    """
    Directory of run reports and the result tables built from them.

    Layout: ``<root>/<run name>/report.json`` next to ``model.ckpt``.
    """

    def __init__(self, root: Optional[Union[str, Path]] = None):
        self.root = Path(root or os.getenv("KD_OUTPUT_DIR", "runs"))
        self.record_timing = os.getenv("KD_RECORD_TIMING", "0") not in ("", "0", "false", "False")

    def run_dir(self, name: str) -> Path:
        return self.root / name

    def report_path(self, name: str) -> Path:
        return self.run_dir(name) / "report.json"

    def checkpoint_path(self, name: str) -> Path:
        return self.run_dir(name) / "model.ckpt"

    def save(self, report: RunReport) -> Path:
        path = save_report(report, self.report_path(report.name))
        if self.record_timing and report.wall_clock_seconds is not None:
            timing = {"wall_clock_seconds": report.wall_clock_seconds}
            (self.run_dir(report.name) / "timing.json").write_text(json.dumps(timing) + "\n")
        logger.info(f"Saved report {path}")
        return path

    def lookup(self, name: str, cell_digest: Optional[str] = None) -> Optional[RunReport]:
        """Return a stored report whose cell digest matches, or None."""
        path = self.report_path(name)
        if not path.exists() or not self.checkpoint_path(name).exists():
            return None
        try:
            report = load_report(path)
        except KDError as e:
            logger.warning(f"Ignoring unreadable report {path}: {e}")
            return None
        if cell_digest is not None and report.cell_digest != cell_digest:
            return None
        return report

    def all_reports(self) -> List[RunReport]:
        return [load_report(p) for p in sorted(self.root.glob("*/report.json"))]

    def write_table(self, text: str, filename: str = "results.md") -> Path:
        path = self.root / filename
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        return path
