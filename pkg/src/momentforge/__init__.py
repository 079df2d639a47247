"""momentforge: desk-scale simulation and curation of moment-retrieval training data."""

__version__ = "0.1.0"

from .frames import Frame, FrameScore, histogram_dissimilarity, laplacian_clarity, phi_scores, select_frames
from .vmr_eval import MomentAnnotation, TemporalSpan, evaluate, novel_word_split, temporal_iou

__all__ = [
    "__version__",
    "Frame",
    "FrameScore",
    "histogram_dissimilarity",
    "laplacian_clarity",
    "phi_scores",
    "select_frames",
    "MomentAnnotation",
    "TemporalSpan",
    "evaluate",
    "novel_word_split",
    "temporal_iou",
]
