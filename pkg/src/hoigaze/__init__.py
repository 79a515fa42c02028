"""Hand-object-interaction aware gaze estimation on synthetic egocentric motion."""

from .datamodel import FrameWindow, Sequence, load_sequence, windows_from_sequences
from .estimator import Estimator, EstimatorConfig
from .recognizer import Recognizer, RecognizerConfig

__version__ = "0.1.0"

__all__ = ["Estimator", "EstimatorConfig", "FrameWindow", "Recognizer", "RecognizerConfig",
           "Sequence", "load_sequence", "windows_from_sequences"]
