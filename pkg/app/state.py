import operator
from typing import Annotated, Any, Dict, List, Optional, TypedDict

from app.evaluation import RunReport
from app.experiment import ExperimentFile


# The PipelineState is the TypedDict passed between the nodes of the experiment graph.
# `operator.add` makes nodes append to reports, failures and skipped instead of replacing them.
class PipelineState(TypedDict, total=False):
    """
    Represents the state of one experiment run.

    Attributes:
        experiment: The validated experiment file.
        out_dir: Directory receiving one sub-directory per run plus results.md.
        jobs: Maximum number of student cells trained in parallel.
        resume: Skip cells whose stored report carries a matching cell digest.
        seed_override: Replaces the file's seed when set.
        dataset: The resolved dataset, shared read-only by every run.
        pretrain_dataset: The pool encoders are pretrained on (the dataset itself unless the file names one).
        encoders: Pretrain job name -> checkpoint path.
        teachers: Teacher name -> checkpoint path.
        reports: Reports of every completed or resumed run.
        failures: One entry per failed run (name, stage, error).
        skipped: Names of runs resumed from disk.
        table: Final markdown result table.
    """

    experiment: ExperimentFile
    out_dir: str
    jobs: int
    resume: bool
    seed_override: Optional[int]
    dataset: Any
    pretrain_dataset: Any
    encoders: Dict[str, str]
    teachers: Dict[str, str]
    reports: Annotated[List[RunReport], operator.add]
    failures: Annotated[List[Dict[str, str]], operator.add]
    skipped: Annotated[List[str], operator.add]
    table: Optional[str]
