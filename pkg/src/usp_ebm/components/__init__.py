"""
Experiment components for usp-ebm
"""

from .diagnostics import DiagnosticsComponent
from .figures import FigureEmitter, MissingArtifactsError
from .ood import OodComponent
from .training import TrainingComponent
from .verification import VerificationComponent

__all__ = [
    "DiagnosticsComponent",
    "FigureEmitter",
    "MissingArtifactsError",
    "OodComponent",
    "TrainingComponent",
    "VerificationComponent",
]
