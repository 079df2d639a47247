"""Procedural demo fixtures: tiny videos, class images, stand-in encoders.

Everything here is deterministic from a seed so the demo pipeline can be
re-run bit for bit. The "external" embedding providers are stand-ins for
real joint text-image and structure encoders, which are consumed as files
in production use: the joint encoder is a fixed random projection of
pixels (text side: hashed bag of words), the structure encoder is a
pooled-intensity signature. They produce deterministic score spreads,
which is what the selection machinery needs, not semantic judgments.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .curation import AssembledVideo, VideoMoment
from .frames import Frame, FrameSequence
from .seeding import derive_seed
from .vmr_eval import MomentAnnotation, TemporalSpan, VideoContent, tokenize

__all__ = [
    "TargetCorpus",
    "make_moment_frames",
    "make_source_videos",
    "make_class_images",
    "make_target_corpus",
    "instance_prompt_for",
    "structure_embedding",
    "joint_frame_embedding",
    "joint_text_embedding",
]

SOURCE_VERBS = ["walks", "jumps", "waves", "sits", "turns", "runs", "stands", "claps"]
ADVERBS = ["slowly", "quickly", "calmly", "twice"]
NOVEL_VERBS = ["spins", "crawls", "kneels", "stretches"]
# One generation sentence per novel verb plus the remainder in the test
# split: multiplicities 2+3+3+5 give 4 generation and 9 test sentences.
NOVEL_MULTIPLICITIES = [2, 3, 3, 5]

_MOTIONS = {
    "walks": (0, 1),
    "jumps": (-1, 0),
    "waves": (0, 0),
    "sits": (1, 0),
    "turns": (0, -1),
    "runs": (0, 2),
    "stands": (0, 0),
    "claps": (0, 0),
}


def make_moment_frames(
    n_frames: int,
    size: int,
    subject_pos: tuple[int, int],
    motion: tuple[int, int],
    subject_value: float,
    background: float,
    start_index: int = 0,
) -> FrameSequence:
    """A small bright square drifting over a flat background."""
    frames = []
    half = max(size // 4, 1)
    for i in range(n_frames):
        px = np.full((size, size), background)
        r = int(np.clip(subject_pos[0] + motion[0] * i, 0, size - half))
        c = int(np.clip(subject_pos[1] + motion[1] * i, 0, size - half))
        px[r : r + half, c : c + half] = subject_value
        frames.append(Frame(pixels=px.clip(0.0, 1.0), index=start_index + i))
    return frames


def make_source_videos(
    seed: int,
    n_videos: int = 2,
    moments_per_video: int = 3,
    frames_per_moment: int = 4,
    frame_size: int = 8,
    seconds_per_frame: float = 1.0,
) -> list[AssembledVideo]:
    """Tiled source videos: one subject per video, one action per moment."""
    videos = []
    for v in range(n_videos):
        rng = np.random.default_rng(derive_seed(seed, f"source/{v}"))
        subject_value = 0.7 + 0.25 * rng.random()
        background = 0.05 + 0.1 * rng.random()
        moments = []
        t = 0.0
        for m in range(moments_per_video):
            verb = SOURCE_VERBS[int(rng.integers(len(SOURCE_VERBS)))]
            adverb = ADVERBS[int(rng.integers(len(ADVERBS)))]
            pos = (int(rng.integers(0, frame_size // 2)), int(rng.integers(0, frame_size // 2)))
            frames = make_moment_frames(
                frames_per_moment, frame_size, pos, _MOTIONS[verb], subject_value, background
            )
            span = TemporalSpan(t, t + frames_per_moment * seconds_per_frame)
            moments.append(VideoMoment(span=span, query=f"a person {verb} {adverb}", frames=frames))
            t = span.end
        videos.append(AssembledVideo(video_id=f"vid{v:02d}", moments=moments))
    return videos


def make_class_images(seed: int, count: int = 6, frame_size: int = 8) -> FrameSequence:
    """Frames of other instances, for the prior-preservation term."""
    rng = np.random.default_rng(derive_seed(seed, "class"))
    frames = []
    for i in range(count):
        px = np.full((frame_size, frame_size), 0.1 + 0.3 * rng.random())
        half = max(frame_size // 4, 1)
        r, c = rng.integers(0, frame_size - half, size=2)
        px[r : r + half, c : c + half] = 0.5 + 0.5 * rng.random()
        frames.append(Frame(pixels=px.clip(0.0, 1.0), index=i))
    return frames


@dataclass
class TargetCorpus:
    """Target-domain sentences plus the synthetic videos used for testing."""

    annotations: list[MomentAnnotation]
    video_content: dict[str, VideoContent]


def make_target_corpus(seed: int, moments_per_video: int = 3, seconds_per_moment: float = 4.0) -> TargetCorpus:
    """Query sentences over synthetic target videos.

    Novel verbs appear with the configured multiplicities; filler
    sentences reuse source vocabulary, padding the corpus to 20 queries.
    Each sentence is the description of one segment in a dedicated tiled
    target video; sibling segments get source-vocabulary descriptors.
    """
    rng = np.random.default_rng(derive_seed(seed, "target"))
    sentences = []
    for verb, mult in zip(NOVEL_VERBS, NOVEL_MULTIPLICITIES):
        for _ in range(mult):
            adverb = ADVERBS[int(rng.integers(len(ADVERBS)))]
            sentences.append(f"a person {verb} {adverb}")
    while len(sentences) < 20:
        verb = SOURCE_VERBS[int(rng.integers(len(SOURCE_VERBS)))]
        adverb = ADVERBS[int(rng.integers(len(ADVERBS)))]
        sentences.append(f"a person {verb} {adverb}")

    annotations = []
    content: dict[str, VideoContent] = {}
    for i, sentence in enumerate(sentences):
        video_id = f"tgt{i:02d}"
        duration = moments_per_video * seconds_per_moment
        slot = int(rng.integers(moments_per_video))
        segments = []
        for s in range(moments_per_video):
            span = TemporalSpan(s * seconds_per_moment, (s + 1) * seconds_per_moment)
            if s == slot:
                text = sentence
                annotations.append(MomentAnnotation(video_id=video_id, span=span, query=sentence))
            else:
                verb = SOURCE_VERBS[int(rng.integers(len(SOURCE_VERBS)))]
                text = f"a person {verb}"
            segments.append((span, frozenset(tokenize(text))))
        content[video_id] = VideoContent(video_id=video_id, duration=duration, segments=segments)
    return TargetCorpus(annotations=annotations, video_content=content)


def instance_prompt_for(query: str, token: str = "[v]") -> str:
    """Rewrite a dataset query so the subject is the instance token."""
    if "a person" in query:
        return query.replace("a person", f"{token} person", 1)
    return f"{token} {query}"


# ---------------------------------------------------------------------------
# Stand-in embedding providers
# ---------------------------------------------------------------------------

def _hash_rng(tag: str) -> np.random.Generator:
    digest = hashlib.sha256(tag.encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def structure_embedding(frames: FrameSequence, pool: int = 2) -> np.ndarray:
    """Per-frame layout signature: pooled intensities plus a constant slot."""
    rows = []
    for f in frames:
        g = f.gray()
        h, w = g.shape
        ph, pw = h // pool, w // pool
        pooled = g[: ph * pool, : pw * pool].reshape(ph, pool, pw, pool).mean(axis=(1, 3))
        rows.append(np.concatenate([pooled.ravel(), [1.0]]))
    return np.stack(rows)


def joint_frame_embedding(frames: FrameSequence, dim: int = 24) -> np.ndarray:
    """Per-frame vectors in the shared text-image space (fixed projection)."""
    first = frames[0].gray()
    proj = _hash_rng(f"joint-proj:{first.size}:{dim}").standard_normal((dim, first.size))
    proj /= math.sqrt(first.size)
    return np.stack([proj @ f.gray().ravel() for f in frames])


def joint_text_embedding(text: str, dim: int = 24) -> np.ndarray:
    """Bag-of-hashed-words vector in the shared text-image space."""
    words = tokenize(text) or [text.strip().lower()]
    vec = np.zeros(dim)
    for w in words:
        vec += _hash_rng(f"joint-word:{w}").standard_normal(dim)
    return vec / math.sqrt(len(words))
