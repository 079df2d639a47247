"""Frame scoring and subset selection.

Scores every frame of a moment by how much it differs from its neighbours
(histogram dissimilarity) and how sharp it is (variance of the Laplacian
response), then picks the top-m frames. The selected subset feeds the
stage-1 instance-descriptor training, which treats the video as an
unordered set of images and benefits from diverse, unblurred frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Frame",
    "FrameScore",
    "histogram_dissimilarity",
    "laplacian_clarity",
    "phi_scores",
    "select_frames",
    "load_frame_dir",
    "read_packed_frames",
    "write_packed_frames",
]

HISTOGRAM_BINS = 32
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# Packed frame file: 16-byte header (magic, width, height, count as
# little-endian uint32), then `count` raw float32 grayscale planes.
PACKED_MAGIC = b"MFFR"
_HEADER = struct.Struct("<4sIII")


@dataclass
class Frame:
    """A single decoded frame with intensities normalised to [0, 1].

    `pixels` is either (height, width) grayscale or (height, width, 3) RGB.
    """

    pixels: np.ndarray
    index: int = 0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim not in (2, 3):
            raise ValueError(f"frame pixels must be 2-D or 3-channel, got shape {self.pixels.shape}")
        if self.pixels.ndim == 3 and self.pixels.shape[2] != 3:
            raise ValueError(f"colour frames must have 3 channels, got {self.pixels.shape[2]}")
        if self.pixels.size == 0:
            raise ValueError("frame must contain at least one pixel")
        if np.min(self.pixels) < 0.0 or np.max(self.pixels) > 1.0:
            raise ValueError("frame pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def gray(self) -> np.ndarray:
        """Grayscale view of the frame (luma conversion for RGB)."""
        if self.pixels.ndim == 2:
            return self.pixels
        return self.pixels @ LUMA_WEIGHTS


FrameSequence = list[Frame]


@dataclass
class FrameScore:
    """Per-frame score components: the total is always their plain sum."""

    index: int
    dissim_prev: float
    dissim_next: float
    clarity: float
    phi: float = field(init=False)

    def __post_init__(self):
        self.dissim_prev = float(self.dissim_prev)
        self.dissim_next = float(self.dissim_next)
        self.clarity = float(self.clarity)
        if min(self.dissim_prev, self.dissim_next, self.clarity) < 0:
            raise ValueError("score components must be nonnegative")
        self.phi = self.dissim_prev + self.dissim_next + self.clarity


def check_sequence(frames: FrameSequence) -> None:
    """Reject empty sequences and mixed frame dimensions."""
    if not frames:
        raise ValueError("frame sequence is empty")
    shape = frames[0].pixels.shape
    for f in frames[1:]:
        if f.pixels.shape != shape:
            raise ValueError(f"frames disagree on dimensions: {shape} vs {f.pixels.shape}")


def _intensity_histogram(frame: Frame, bins: int) -> np.ndarray:
    hist, _ = np.histogram(frame.gray(), bins=bins, range=(0.0, 1.0))
    return hist / frame.pixels.shape[0] / frame.pixels.shape[1]


def histogram_dissimilarity(a: Frame, b: Frame, bins: int = HISTOGRAM_BINS) -> float:
    """1 minus the histogram intersection of two frames.

    Both frames are reduced to `bins`-bin normalised grayscale intensity
    histograms; the intersection is the summed elementwise minimum.
    Symmetric, bounded in [0, 1], and 0 for identical frames.
    """
    if a.pixels.shape[:2] != b.pixels.shape[:2]:
        raise ValueError(f"frame dimensions differ: {a.pixels.shape[:2]} vs {b.pixels.shape[:2]}")
    intersection = np.minimum(_intensity_histogram(a, bins), _intensity_histogram(b, bins)).sum()
    return float(1.0 - intersection)


def laplacian_response(frame: Frame) -> np.ndarray:
    """Response of the 4-neighbour 3x3 Laplacian over interior pixels."""
    if frame.height < 3 or frame.width < 3:
        raise ValueError(f"frame must be at least 3x3, got {frame.height}x{frame.width}")
    g = frame.gray()
    return g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]


def laplacian_clarity(frame: Frame) -> float:
    """Sharpness as the variance of the Laplacian response.

    Constant frames score exactly 0; blur suppresses the response and
    lowers the score. Invariant under adding a constant to all pixels.
    """
    return float(np.var(laplacian_response(frame)))


def phi_scores(frames: FrameSequence, normalize: bool = True) -> list[FrameScore]:
    """Score each frame by neighbour dissimilarity plus clarity.

    Boundary frames have no previous/next neighbour; the missing term
    contributes 0. With `normalize` (the default) each component is
    min-max scaled across the sequence before summing, so the clarity
    term (unbounded) cannot swamp the dissimilarity terms (in [0, 1]).
    Pass ``normalize=False`` for the raw, literal sum.
    """
    check_sequence(frames)
    n = len(frames)
    prev = np.zeros(n)
    nxt = np.zeros(n)
    for i in range(1, n):
        d = histogram_dissimilarity(frames[i], frames[i - 1])
        prev[i] = d
        nxt[i - 1] = d
    clarity = np.array([laplacian_clarity(f) for f in frames])

    if normalize:
        prev = _min_max(prev)
        nxt = _min_max(nxt)
        clarity = _min_max(clarity)

    return [
        FrameScore(index=f.index, dissim_prev=prev[i], dissim_next=nxt[i], clarity=clarity[i])
        for i, f in enumerate(frames)
    ]


def _min_max(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def select_frames(frames: FrameSequence, m: int, normalize: bool = True) -> list[int]:
    """Indices of the m highest-scoring frames, ascending by index.

    Ties are broken in favour of the lower frame index.
    """
    check_sequence(frames)
    if not 1 <= m <= len(frames):
        raise ValueError(f"m must be in [1, {len(frames)}], got {m}")
    scores = phi_scores(frames, normalize=normalize)
    ranked = sorted(scores, key=lambda s: (-s.phi, s.index))
    return sorted(s.index for s in ranked[:m])


# ---------------------------------------------------------------------------
# Frame ingestion
# ---------------------------------------------------------------------------

def load_frame_dir(path: str | Path) -> FrameSequence:
    """Load a directory of numbered PNG frames, sorted by numeric stem."""
    from PIL import Image

    path = Path(path)
    files = sorted(path.glob("*.png"), key=_numeric_key)
    if not files:
        raise ValueError(f"no .png frames found in {path}")
    frames = []
    for i, f in enumerate(files):
        with Image.open(f) as img:
            arr = np.asarray(img.convert("L" if img.mode in ("L", "1", "I;16") else "RGB"))
        frames.append(Frame(pixels=arr.astype(np.float64) / 255.0, index=i))
    check_sequence(frames)
    return frames


def _numeric_key(p: Path):
    digits = "".join(c for c in p.stem if c.isdigit())
    return (int(digits) if digits else 0, p.stem)


def read_packed_frames(path: str | Path) -> FrameSequence:
    """Read the packed binary format: 16-byte header + float32 planes."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, width, height, count = _HEADER.unpack_from(data)
    if magic != PACKED_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * width * height * count
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(data)}")
    planes = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, height, width)
    return [Frame(pixels=planes[i].astype(np.float64), index=i) for i in range(count)]


def write_packed_frames(frames: FrameSequence, path: str | Path) -> None:
    """Write grayscale frames in the packed binary format."""
    check_sequence(frames)
    planes = np.stack([f.gray() for f in frames]).astype("<f4")
    count, height, width = planes.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PACKED_MAGIC, width, height, count))
        fh.write(planes.tobytes())
