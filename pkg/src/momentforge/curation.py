"""Candidate bookkeeping and hybrid data selection.

Generated moments are scored for prompt fidelity (edit prompt vs generated
frames, in a joint text-image embedding space) and structure fidelity
(source vs generated frames, in a visual embedding space), combined into a
harmonic score. Selection happens in two passes: a quantitative top-k by
harmonic score to drop noisy candidates, then a qualitative bottom-l by
retrieval performance to keep only moments the current model handles
poorly. Embeddings come from external encoder files; this module never
runs an encoder itself.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .frames import FrameSequence
from .vmr_eval import MomentAnnotation, TemporalSpan

__all__ = [
    "EmbeddingSet",
    "GeneratedMoment",
    "CandidatePool",
    "VideoMoment",
    "AssembledVideo",
    "prompt_fidelity",
    "structure_fidelity",
    "harmonic_score",
    "safe_harmonic_score",
    "pool_fidelity_summary",
    "quantitative_select",
    "qualitative_select",
    "assemble_variant",
    "build_training_set",
    "read_embeddings",
    "write_embeddings",
    "read_pool",
    "write_pool",
    "read_video_doc",
    "write_video_doc",
    "read_scores_csv",
    "write_scores_csv",
]

EMBED_MAGIC = b"MFEB"
_EMBED_HEADER = struct.Struct("<4sII")


@dataclass
class EmbeddingSet:
    """Per-frame embedding vectors from one external encoder."""

    per_frame: np.ndarray  # (frames, dim)
    source_tag: str = ""

    def __post_init__(self):
        self.per_frame = np.asarray(self.per_frame, dtype=np.float64)
        if self.per_frame.ndim != 2 or self.per_frame.shape[0] == 0:
            raise ValueError(f"embeddings must be a (frames, dim) array, got {self.per_frame.shape}")
        norms = np.linalg.norm(self.per_frame, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero-norm embedding vector")

    def __len__(self) -> int:
        return self.per_frame.shape[0]

    @property
    def dim(self) -> int:
        return self.per_frame.shape[1]


@dataclass
class GeneratedMoment:
    """A candidate edited moment with provenance and fidelity scores."""

    id: str
    source_video_id: str
    source_moment_index: int
    edit_prompt: str
    frames_path: str = ""
    joint_path: str = ""
    structure_path: str = ""
    frames: FrameSequence | None = None
    joint_embeddings: EmbeddingSet | None = None
    structure_embeddings: EmbeddingSet | None = None
    prompt_fid: float = 0.0
    struct_fid: float = 0.0
    h_score: float = 0.0


@dataclass
class CandidatePool:
    """An id-unique snapshot of generated moments."""

    items: list[GeneratedMoment]
    provenance: str = ""

    def __post_init__(self):
        ids = [m.id for m in self.items]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate candidate ids: {dupes}")

    def __len__(self) -> int:
        return len(self.items)


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding vector")
    return np.sum(a * b, axis=1) / norms


def prompt_fidelity(moment: GeneratedMoment, prompt_vec: np.ndarray) -> float:
    """Mean cosine similarity between frame embeddings and the prompt vector."""
    if moment.joint_embeddings is None:
        raise ValueError(f"{moment.id}: joint embeddings not loaded")
    prompt_vec = np.asarray(prompt_vec, dtype=np.float64)
    emb = moment.joint_embeddings.per_frame
    if prompt_vec.shape != (emb.shape[1],):
        raise ValueError(f"prompt vector dim {prompt_vec.shape} does not match embeddings ({emb.shape[1]},)")
    tiled = np.broadcast_to(prompt_vec, emb.shape)
    return float(np.mean(_cosine_rows(emb, tiled)))


def structure_fidelity(src: EmbeddingSet, gen: EmbeddingSet) -> float:
    """Mean framewise cosine similarity between source and generated embeddings."""
    if len(src) != len(gen):
        raise ValueError(f"frame count mismatch: {len(src)} vs {len(gen)}")
    if src.dim != gen.dim:
        raise ValueError(f"embedding dim mismatch: {src.dim} vs {gen.dim}")
    return float(np.mean(_cosine_rows(src.per_frame, gen.per_frame)))


def harmonic_score(p: float, s: float) -> float:
    """Harmonic mean 2ps/(p+s); defined only for positive inputs."""
    if p <= 0 or s <= 0:
        raise ValueError(f"harmonic score undefined for nonpositive inputs ({p}, {s})")
    return 2.0 * p * s / (p + s)


def safe_harmonic_score(p: float, s: float) -> float:
    """Harmonic mean, with nonpositive inputs collapsing to 0 (sorts last)."""
    if p <= 0 or s <= 0:
        return 0.0
    return harmonic_score(p, s)


def pool_fidelity_summary(pool: CandidatePool, mode: str = "aggregate") -> dict[str, float]:
    """Pool-level fidelity report.

    `aggregate` takes the harmonic of the mean fidelities; `per_sample`
    averages each item's own harmonic score. The two disagree slightly
    whenever fidelities vary across the pool, so both are exposed.
    """
    if not pool.items:
        raise ValueError("empty pool")
    p = float(np.mean([m.prompt_fid for m in pool.items]))
    s = float(np.mean([m.struct_fid for m in pool.items]))
    if mode == "aggregate":
        h = safe_harmonic_score(p, s)
    elif mode == "per_sample":
        h = float(np.mean([m.h_score for m in pool.items]))
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    return {"prompt_fidelity": p, "structure_fidelity": s, "harmonic": h}


def quantitative_select(pool: CandidatePool, k: int) -> CandidatePool:
    """The k candidates with the highest harmonic score.

    Output is ordered by descending score, ties broken by ascending id;
    selection is independent of the input order and idempotent.
    """
    if not 1 <= k <= len(pool):
        raise ValueError(f"k must be in [1, {len(pool)}], got {k}")
    ranked = sorted(pool.items, key=lambda m: (-m.h_score, m.id))
    return CandidatePool(items=ranked[:k], provenance=pool.provenance)


def qualitative_select(
    filtered: CandidatePool,
    vmr_scores: Mapping[str, float],
    l: int,
) -> CandidatePool:
    """The l candidates the retrieval model scored worst on.

    Every candidate id must have a score. Output is ordered by ascending
    score, ties broken by ascending id.
    """
    if not 1 <= l <= len(filtered):
        raise ValueError(f"l must be in [1, {len(filtered)}], got {l}")
    missing = [m.id for m in filtered.items if m.id not in vmr_scores]
    if missing:
        raise ValueError(f"missing retrieval scores for: {missing}")
    ranked = sorted(filtered.items, key=lambda m: (vmr_scores[m.id], m.id))
    return CandidatePool(items=ranked[:l], provenance=filtered.provenance)


# ---------------------------------------------------------------------------
# Video-variant assembly
# ---------------------------------------------------------------------------

@dataclass
class VideoMoment:
    """One annotated segment of a video timeline."""

    span: TemporalSpan
    query: str
    frames: FrameSequence | None = None
    frames_path: str = ""


@dataclass
class AssembledVideo:
    video_id: str
    moments: list[VideoMoment]

    @property
    def duration(self) -> float:
        return max(m.span.end for m in self.moments) if self.moments else 0.0

    def annotations(self) -> list[MomentAnnotation]:
        return [MomentAnnotation(self.video_id, m.span, m.query) for m in self.moments]


def assemble_variant(
    video: list[VideoMoment],
    i: int,
    edited: FrameSequence,
    mode: str,
    edit_prompt: str,
    insert_before: bool = False,
) -> list[VideoMoment]:
    """Build a video variant around an edited moment.

    Replace substitutes moment i in place (frame counts must match), so
    every span stays put and only the annotation text changes. Inject
    inserts the edited moment next to moment i (after, unless
    `insert_before`), shifting every downstream span by the inserted
    duration and adding one annotation for the new span. The inserted
    duration uses moment i's seconds-per-frame rate.
    """
    if not 0 <= i < len(video):
        raise ValueError(f"moment index {i} out of range for {len(video)} moments")
    if mode not in ("replace", "inject"):
        raise ValueError(f"mode must be 'replace' or 'inject', got {mode!r}")
    if not edited:
        raise ValueError("edited moment has no frames")
    target = video[i]

    if mode == "replace":
        if target.frames is not None and len(edited) != len(target.frames):
            raise ValueError(
                f"replace needs {len(target.frames)} frames, edited moment has {len(edited)}"
            )
        out = list(video)
        out[i] = VideoMoment(span=target.span, query=edit_prompt, frames=list(edited))
        return out

    # inject: duration from the source moment's frame rate, falling back
    # to the source span length when its frame count is unknown
    if target.frames:
        duration = target.span.length / len(target.frames) * len(edited)
    else:
        duration = target.span.length
    insert_at = target.span.start if insert_before else target.span.end
    new_moment = VideoMoment(
        span=TemporalSpan(insert_at, insert_at + duration),
        query=edit_prompt,
        frames=list(edited),
    )

    shifted: list[VideoMoment] = []
    position = len(video)
    for j, m in enumerate(video):
        if m.span.start >= insert_at - 1e-12:
            position = min(position, j)
            span = TemporalSpan(m.span.start + duration, m.span.end + duration)
        else:
            span = m.span
        shifted.append(VideoMoment(span=span, query=m.query, frames=m.frames, frames_path=m.frames_path))
    return shifted[:position] + [new_moment] + shifted[position:]


def build_training_set(
    source: Mapping[str, MomentAnnotation],
    selected: CandidatePool,
    selected_annotations: Mapping[str, MomentAnnotation],
) -> dict[str, MomentAnnotation]:
    """Union of the source dataset and the selected generated moments.

    Id spaces must be disjoint; counts add exactly.
    """
    out = dict(source)
    for item in selected.items:
        if item.id in out:
            raise ValueError(f"id collision between source data and selection: {item.id!r}")
        if item.id not in selected_annotations:
            raise ValueError(f"no annotation supplied for selected moment {item.id!r}")
        out[item.id] = selected_annotations[item.id]
    return out


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_embeddings(emb: EmbeddingSet, path: str | Path) -> None:
    """Per-moment embedding file: (magic, frame count, dim) header + float32 rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = emb.per_frame.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_EMBED_HEADER.pack(EMBED_MAGIC, rows.shape[0], rows.shape[1]))
        fh.write(rows.tobytes())


def read_embeddings(path: str | Path, source_tag: str = "") -> EmbeddingSet:
    data = Path(path).read_bytes()
    if len(data) < _EMBED_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, count, dim = _EMBED_HEADER.unpack_from(data)
    if magic != EMBED_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    expected = _EMBED_HEADER.size + 4 * count * dim
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, got {len(data)}")
    rows = np.frombuffer(data, dtype="<f4", offset=_EMBED_HEADER.size).reshape(count, dim)
    return EmbeddingSet(per_frame=rows.astype(np.float64), source_tag=source_tag)


def write_pool(pool: CandidatePool, path: str | Path) -> None:
    """Candidate pool as newline-delimited JSON metadata records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"provenance": pool.provenance}) + "\n")
        for m in pool.items:
            fh.write(
                json.dumps(
                    {
                        "id": m.id,
                        "source_video_id": m.source_video_id,
                        "source_moment_index": m.source_moment_index,
                        "edit_prompt": m.edit_prompt,
                        "frames": m.frames_path,
                        "joint_embeddings": m.joint_path,
                        "structure_embeddings": m.structure_path,
                        "prompt_fid": m.prompt_fid,
                        "struct_fid": m.struct_fid,
                        "h_score": m.h_score,
                    }
                )
                + "\n"
            )


def read_pool(path: str | Path, load_embeddings: bool = False) -> CandidatePool:
    """Load a candidate pool; relative artifact paths resolve beside the file."""
    path = Path(path)
    base = path.parent
    items: list[GeneratedMoment] = []
    provenance = ""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if line_no == 1 and "provenance" in record and "id" not in record:
                provenance = record["provenance"]
                continue
            moment = GeneratedMoment(
                id=record["id"],
                source_video_id=record["source_video_id"],
                source_moment_index=int(record["source_moment_index"]),
                edit_prompt=record["edit_prompt"],
                frames_path=record.get("frames", ""),
                joint_path=record.get("joint_embeddings", ""),
                structure_path=record.get("structure_embeddings", ""),
                prompt_fid=float(record.get("prompt_fid", 0.0)),
                struct_fid=float(record.get("struct_fid", 0.0)),
                h_score=float(record.get("h_score", 0.0)),
            )
            if load_embeddings:
                if moment.joint_path:
                    moment.joint_embeddings = read_embeddings(base / moment.joint_path, source_tag="joint")
                if moment.structure_path:
                    moment.structure_embeddings = read_embeddings(
                        base / moment.structure_path, source_tag="structure"
                    )
            items.append(moment)
    return CandidatePool(items=items, provenance=provenance)


def write_video_doc(video: AssembledVideo, path: str | Path, meta: Mapping[str, str] | None = None) -> None:
    """Video timeline document: moment spans, queries and frame-file paths."""
    doc = {
        "video_id": video.video_id,
        "moments": [
            {
                "start": m.span.start,
                "end": m.span.end,
                "query": m.query,
                "frames": m.frames_path or None,
            }
            for m in video.moments
        ],
    }
    if meta:
        doc.update(meta)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_video_doc(path: str | Path, load_frames: bool = False) -> AssembledVideo:
    """Load a video document; frame paths resolve beside the file."""
    from .frames import read_packed_frames

    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    moments = []
    for m in doc["moments"]:
        frames = None
        frames_path = m.get("frames") or ""
        if load_frames and frames_path:
            frames = read_packed_frames(path.parent / frames_path)
        moments.append(
            VideoMoment(
                span=TemporalSpan(float(m["start"]), float(m["end"])),
                query=m["query"],
                frames=frames,
                frames_path=frames_path,
            )
        )
    return AssembledVideo(video_id=doc["video_id"], moments=moments)


def write_scores_csv(scores: Mapping[str, float], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "score"])
        for key in sorted(scores):
            writer.writerow([key, repr(scores[key])])


def read_scores_csv(path: str | Path) -> dict[str, float]:
    scores: dict[str, float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row == ["id", "score"]:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}: malformed row {row!r}")
            scores[row[0]] = float(row[1])
    return scores
