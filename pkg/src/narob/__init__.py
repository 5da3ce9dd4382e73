"""Open-book neural algorithmic reasoning engine."""

__version__ = "0.1.0"

from .tasks import (TASKS, Dataset, FeatureSpec, Graph, TaskSpec, TraceInstance,
                    build_dataset, execute_task, generate_graph, load_dataset,
                    persist_dataset)
from .training import TrainConfig, train
from .evaluation import (AttentionProfile, EvalReport, attention_profile,
                         evaluate, run_experiment, score_outputs, select_partner)

__all__ = [
    "TASKS", "Dataset", "FeatureSpec", "Graph", "TaskSpec", "TraceInstance",
    "build_dataset", "execute_task", "generate_graph", "load_dataset",
    "persist_dataset", "TrainConfig", "train", "AttentionProfile", "EvalReport",
    "attention_profile", "evaluate", "run_experiment", "score_outputs",
    "select_partner", "__version__",
]
