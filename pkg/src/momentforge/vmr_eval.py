"""Moment-retrieval evaluation harness.

Temporal IoU, recall-at-n over IoU thresholds, mean IoU, novel-word split
construction, and a pluggable retrieval-scorer interface. A small
sliding-window bag-of-words scorer is bundled as the reference scorer so
the qualitative selection loop can run end to end; real retrieval models
attach through the same interface.
"""

from __future__ import annotations

import json
import random
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol, TYPE_CHECKING

if TYPE_CHECKING:
    from .curation import CandidatePool

__all__ = [
    "TemporalSpan",
    "MomentAnnotation",
    "RetrievalPrediction",
    "MetricsTable",
    "Scorer",
    "SlidingWindowScorer",
    "VideoContent",
    "SplitResult",
    "ScoreReport",
    "temporal_iou",
    "evaluate",
    "novel_word_split",
    "per_sample_scores",
    "tokenize",
    "read_annotations",
    "write_annotations",
    "read_predictions",
    "write_predictions",
]

DEFAULT_THRESHOLDS = (0.3, 0.5, 0.7)

# Tokens ignored when deciding whether a query word is novel.
STOPWORDS = frozenset(
    """a an the and or of to in on at is are was were be been being with for
    from by as it its this that these those there then than up down out off
    over under again very s t can will just do does did doing""".split()
)

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass(frozen=True)
class TemporalSpan:
    """A (start, end) interval in seconds, start strictly before end."""

    start: float
    end: float

    def __post_init__(self):
        if self.start < 0 or self.start >= self.end:
            raise ValueError(f"invalid span [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass
class MomentAnnotation:
    """A ground-truth moment: where it is and what it shows."""

    video_id: str
    span: TemporalSpan
    query: str

    def __post_init__(self):
        if not self.query.strip():
            raise ValueError("annotation query must be nonempty")


@dataclass
class RetrievalPrediction:
    """Ranked span predictions for one (video, query) pair."""

    video_id: str
    query: str
    ranked_spans: list[TemporalSpan]

    def __post_init__(self):
        if not self.ranked_spans:
            raise ValueError("prediction must contain at least one span")


def temporal_iou(a: TemporalSpan, b: TemporalSpan) -> float:
    """Intersection over union of two spans; 0 when disjoint."""
    intersection = min(a.end, b.end) - max(a.start, b.start)
    if intersection <= 0:
        return 0.0
    union = a.length + b.length - intersection
    return intersection / union


@dataclass
class MetricsTable:
    """Recall at the rank cutoff for each IoU threshold, plus mean IoU."""

    rank: int
    recall: dict[float, float]
    miou: float
    num_queries: int

    def as_dict(self) -> dict:
        out = {f"R@{self.rank},IoU={mu:g}": v for mu, v in sorted(self.recall.items())}
        out["mIoU"] = self.miou
        out["queries"] = self.num_queries
        return out

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2)

    def to_text(self) -> str:
        """Aligned plain-text table."""
        rows = [(k, f"{v:.4f}" if isinstance(v, float) else str(v)) for k, v in self.as_dict().items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def evaluate(
    preds: Iterable[RetrievalPrediction],
    gt: Iterable[MomentAnnotation],
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    n: int = 1,
) -> MetricsTable:
    """Score predictions against ground-truth annotations.

    For each threshold mu, recall is the fraction of queries whose top-n
    spans include one with IoU >= mu; mIoU is the mean top-1 IoU. Every
    ground-truth query must have a prediction keyed by (video_id, query).
    """
    gt = list(gt)
    if not gt:
        raise ValueError("no ground-truth annotations to evaluate")
    by_key: dict[tuple[str, str], RetrievalPrediction] = {}
    for p in preds:
        by_key[(p.video_id, p.query)] = p

    thresholds = sorted(set(thresholds))
    hits = {mu: 0 for mu in thresholds}
    iou_sum = 0.0
    for ann in gt:
        key = (ann.video_id, ann.query)
        if key not in by_key:
            raise ValueError(f"missing prediction for video {ann.video_id!r} query {ann.query!r}")
        spans = by_key[key].ranked_spans
        ious = [temporal_iou(s, ann.span) for s in spans[:n]]
        iou_sum += temporal_iou(spans[0], ann.span)
        for mu in thresholds:
            if any(v >= mu for v in ious):
                hits[mu] += 1

    return MetricsTable(
        rank=n,
        recall={mu: hits[mu] / len(gt) for mu in thresholds},
        miou=iou_sum / len(gt),
        num_queries=len(gt),
    )


# ---------------------------------------------------------------------------
# Novel-word split construction
# ---------------------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    """Lowercased, punctuation-stripped tokens with stopwords removed."""
    words = [w.translate(_PUNCT_TABLE) for w in text.lower().split()]
    return [w for w in words if w and w not in STOPWORDS]


@dataclass
class SplitResult:
    """Outcome of the novel-word split.

    `generation` holds one sentence per qualifying novel word (candidates
    for editing-prompt use); `test` holds every other sentence sharing a
    selected novel word. The two sets are disjoint by construction.
    """

    generation: list[MomentAnnotation]
    test: list[MomentAnnotation]
    novel_words: dict[str, int]
    warning: str | None = None


def novel_word_split(
    queries: list[MomentAnnotation],
    train_vocab: set[str],
    seed: int,
) -> SplitResult:
    """Partition query sentences around words unseen in the training vocab.

    A word qualifies as novel when it is absent from `train_vocab` and
    occurs in at least two query sentences. For each qualifying word one
    sentence is chosen (seeded, uniform) for the generation set; every
    remaining sentence containing any qualifying word goes to the test
    set. A sentence chosen for generation never appears in the test set,
    even if it contains several novel words.
    """
    if not queries:
        raise ValueError("empty query corpus")
    vocab = {w.lower() for w in train_vocab}
    tokens = [set(tokenize(q.query)) for q in queries]

    occurrence: dict[str, list[int]] = {}
    for i, toks in enumerate(tokens):
        for w in toks - vocab:
            occurrence.setdefault(w, []).append(i)
    novel = {w: idxs for w, idxs in occurrence.items() if len(idxs) >= 2}

    if not novel:
        return SplitResult([], [], {}, warning="no novel word occurs in multiple sentences")

    rng = random.Random(seed)
    generation_idx: set[int] = set()
    for word in sorted(novel):
        generation_idx.add(rng.choice(novel[word]))

    test_idx = {
        i
        for w, idxs in novel.items()
        for i in idxs
        if i not in generation_idx
    }
    return SplitResult(
        generation=[queries[i] for i in sorted(generation_idx)],
        test=[queries[i] for i in sorted(test_idx)],
        novel_words={w: len(idxs) for w, idxs in sorted(novel.items())},
    )


# ---------------------------------------------------------------------------
# Scorer interface and bundled reference scorer
# ---------------------------------------------------------------------------

class Scorer(Protocol):
    """Any retrieval model that ranks candidate spans for a query."""

    def score(self, video_id: str, query: str) -> list[TemporalSpan]:
        ...


@dataclass
class VideoContent:
    """What a scorer can see about a video: timed segments with word bags."""

    video_id: str
    duration: float
    segments: list[tuple[TemporalSpan, frozenset[str]]] = field(default_factory=list)


class SlidingWindowScorer:
    """Bag-of-words sliding-window proposal scorer.

    Proposes multi-scale windows over the video timeline and ranks them
    by how much of the query vocabulary overlaps the segment word bags
    the window covers. Only words seen in the scorer's training
    annotations are understood; everything else is dropped, so queries
    built entirely from unseen words degrade to the default ranking.
    Deterministic given the same corpus and videos.
    """

    scales = (0.25, 0.5)

    def __init__(self, train_annotations: Iterable[MomentAnnotation], videos: Iterable[VideoContent]):
        self.vocab: set[str] = set()
        for ann in train_annotations:
            self.vocab.update(tokenize(ann.query))
        self.videos = {v.video_id: v for v in videos}

    def add_video(self, video: VideoContent) -> None:
        self.videos[video.video_id] = video

    def score(self, video_id: str, query: str) -> list[TemporalSpan]:
        if video_id not in self.videos:
            raise KeyError(f"unknown video {video_id!r}")
        video = self.videos[video_id]
        known = set(tokenize(query)) & self.vocab

        scored: list[tuple[float, TemporalSpan]] = []
        for window in self._proposals(video.duration):
            value = 0.0
            for span, words in video.segments:
                shared = known & words
                if shared:
                    value += len(shared) / len(known) * temporal_iou(window, span)
            scored.append((value, window))
        scored.sort(key=lambda item: (-item[0], item[1].start, item[1].end))
        return [span for _, span in scored]

    def _proposals(self, duration: float) -> list[TemporalSpan]:
        windows = []
        for scale in self.scales:
            size = duration * scale
            hop = size / 2.0
            start = 0.0
            while start + size <= duration + 1e-9:
                windows.append(TemporalSpan(start, min(start + size, duration)))
                start += hop
        return windows


@dataclass
class ScoreReport:
    """Per-item retrieval scores with per-item failures kept separate."""

    scores: dict[str, float]
    errors: dict[str, str] = field(default_factory=dict)


def per_sample_scores(
    scorer: Scorer,
    items: "CandidatePool",
    annotations: Mapping[str, MomentAnnotation],
) -> ScoreReport:
    """Top-1 IoU of the scorer's prediction against each item's known span.

    Feeds qualitative selection: low scores mark generated moments the
    current retrieval model handles poorly. Scorer failures are recorded
    per item instead of aborting the batch.
    """
    report = ScoreReport(scores={})
    for item in items.items:
        ann = annotations.get(item.id)
        if ann is None:
            report.errors[item.id] = "no annotation for item"
            continue
        try:
            ranked = scorer.score(ann.video_id, ann.query)
            report.scores[item.id] = temporal_iou(ranked[0], ann.span) if ranked else 0.0
        except Exception as exc:  # per-item error marker
            report.errors[item.id] = f"{type(exc).__name__}: {exc}"
    return report


# ---------------------------------------------------------------------------
# Annotation / prediction files (newline-delimited JSON)
# ---------------------------------------------------------------------------

def read_annotations(path: str | Path) -> list[MomentAnnotation]:
    anns = []
    for record in _read_jsonl(path):
        anns.append(
            MomentAnnotation(
                video_id=record["video_id"],
                span=TemporalSpan(float(record["start"]), float(record["end"])),
                query=record["query"],
            )
        )
    return anns


def write_annotations(anns: Iterable[MomentAnnotation], path: str | Path) -> None:
    _write_jsonl(
        (
            {"video_id": a.video_id, "start": a.span.start, "end": a.span.end, "query": a.query}
            for a in anns
        ),
        path,
    )


def read_predictions(path: str | Path) -> list[RetrievalPrediction]:
    preds = []
    for record in _read_jsonl(path):
        spans = [TemporalSpan(float(s), float(e)) for s, e in record["ranked_spans"]]
        preds.append(RetrievalPrediction(record["video_id"], record["query"], spans))
    return preds


def write_predictions(preds: Iterable[RetrievalPrediction], path: str | Path) -> None:
    _write_jsonl(
        (
            {
                "video_id": p.video_id,
                "query": p.query,
                "ranked_spans": [[s.start, s.end] for s in p.ranked_spans],
            }
            for p in preds
        ),
        path,
    )


def _read_jsonl(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
    return records


def _write_jsonl(records: Iterable[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")
