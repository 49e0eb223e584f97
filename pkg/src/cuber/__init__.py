"""Continual learning with layer-wise task-correlation detection and selective backward transfer."""
from .learner import ContinualLearner, LearnerConfig, TaskResult, train_multitask
from .memory import SubspaceMemory
from .metrics import AccuracyMatrix, compute_bwt_s, compute_fwt, compute_metrics
from .network import Network
from .regimes import CorrelationThresholds, detect_regimes

__version__ = "0.1.0"

__all__ = [
    "AccuracyMatrix",
    "ContinualLearner",
    "CorrelationThresholds",
    "LearnerConfig",
    "Network",
    "SubspaceMemory",
    "TaskResult",
    "compute_bwt_s",
    "compute_fwt",
    "compute_metrics",
    "detect_regimes",
    "train_multitask",
]
