"""Multiyear time-series labeling with neural emission scores and a cascade HMM layer."""

from .autodiff import Tape, Tensor, backward
from .data import DatasetSplit, SampleSequence, SynthSpec, YearRecord
from .encoder import EmissionScores, EncoderConfig, EncoderParams, YearlySeries
from .evaluation import ConfusionMatrix, F1Report
from .hmm import CascadeResult, JointTransitionTable
from .training import TrainConfig, TrainReport

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "DatasetSplit",
    "SampleSequence",
    "SynthSpec",
    "YearRecord",
    "EmissionScores",
    "EncoderConfig",
    "EncoderParams",
    "YearlySeries",
    "ConfusionMatrix",
    "F1Report",
    "CascadeResult",
    "JointTransitionTable",
    "TrainConfig",
    "TrainReport",
    "__version__",
]
