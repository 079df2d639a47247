"""End-to-end orchestration with file-based stage handoff.

Stages run in a fixed order (data, frames, train, edit, score, curate,
assemble, eval, report), each reading only files written by earlier
stages and writing only into its own directory under the run root. A
manifest records, per stage, an input digest (config hash, seed and the
upstream output digest) and the sha256 of every output file; re-running
with unchanged inputs verifies the digests and skips the stage, which
makes completed work resumable and reruns reproducible. Each stage also
drops a provenance sidecar naming the config hash that produced its
artifacts.
"""

from __future__ import annotations

import configparser
import copy
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import torch

from . import __version__
from .checkpoint import load_model, save_model
from .curation import (
    AssembledVideo,
    CandidatePool,
    EmbeddingSet,
    GeneratedMoment,
    VideoMoment,
    assemble_variant,
    build_training_set,
    pool_fidelity_summary,
    prompt_fidelity,
    qualitative_select,
    quantitative_select,
    read_pool,
    read_video_doc,
    safe_harmonic_score,
    structure_fidelity,
    write_embeddings,
    write_pool,
    write_scores_csv,
    write_video_doc,
)
from .denoiser import DenoiserConfig, DenoiserModel, is_instance_token
from .diffusion import NoiseSchedule
from .editor import EditRequest, TrainingBatch, edit_moment, train_stage1, train_stage2
from .frames import FrameSequence, phi_scores, read_packed_frames, select_frames, write_packed_frames
from .seeding import derive_seed
from .synthetic import (
    instance_prompt_for,
    joint_frame_embedding,
    joint_text_embedding,
    make_class_images,
    make_source_videos,
    make_target_corpus,
    structure_embedding,
)
from .vmr_eval import (
    MomentAnnotation,
    RetrievalPrediction,
    SlidingWindowScorer,
    TemporalSpan,
    VideoContent,
    evaluate,
    novel_word_split,
    per_sample_scores,
    read_annotations,
    tokenize,
    write_annotations,
    write_predictions,
)

__all__ = [
    "PipelineConfig",
    "RunManifest",
    "ConfigError",
    "StageError",
    "validate_config",
    "run_pipeline",
    "STAGE_NAMES",
]


class ConfigError(ValueError):
    """Raised when a pipeline configuration fails validation."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in errors))
        self.errors = errors


class StageError(RuntimeError):
    """A stage failed; carries the stage name and the offending item."""

    def __init__(self, stage: str, item: str, cause: str):
        super().__init__(f"stage {stage!r} failed on {item!r}: {cause}")
        self.stage = stage
        self.item = item
        self.cause = cause


@dataclass
class PipelineConfig:
    """Everything a run needs; loadable from an INI file with per-module sections."""

    seed: int | None = None
    jobs: int = 1
    # paths (inputs for non-synthetic runs; output is the default run root)
    frames_path: str = ""
    embeddings_path: str = ""
    annotations_path: str = ""
    checkpoints_path: str = ""
    output_path: str = "runs/demo"
    # data
    synthetic: bool = True
    videos: int = 2
    moments_per_video: int = 3
    frames_per_moment: int = 4
    frame_size: int = 8
    class_images: int = 6
    target_corpus: str = ""
    # frame selection
    select_m: int = 3
    raw_phi: bool = False
    # diffusion
    timesteps: int = 60
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    model_dim: int = 16
    model_blocks: int = 1
    literal_eq2: bool = False
    # editor
    stage1_steps: int = 150
    stage2_steps: int = 150
    learning_rate: float = 2e-3
    invert_steps: int = 15
    sample_steps: int = 15
    instance_token: str = "[v]"
    class_prompt: str = "a person"
    # curation
    k: int = 12
    l: int = 5
    variant_mode: str = "replace"
    harmonic_aggregation: str = "aggregate"
    joint_dim: int = 24
    # evaluation
    thresholds: tuple[float, ...] = (0.3, 0.5, 0.7)
    rank: int = 1

    _SECTIONS = {
        "run": {"seed": "seed", "jobs": "jobs"},
        "paths": {
            "frames": "frames_path",
            "embeddings": "embeddings_path",
            "annotations": "annotations_path",
            "checkpoints": "checkpoints_path",
            "output": "output_path",
        },
        "data": {
            "synthetic": "synthetic",
            "videos": "videos",
            "moments_per_video": "moments_per_video",
            "frames_per_moment": "frames_per_moment",
            "frame_size": "frame_size",
            "class_images": "class_images",
            "target_corpus": "target_corpus",
        },
        "frames": {"select": "select_m", "raw_phi": "raw_phi"},
        "diffusion": {
            "timesteps": "timesteps",
            "beta_start": "beta_start",
            "beta_end": "beta_end",
            "dim": "model_dim",
            "blocks": "model_blocks",
            "literal_eq2": "literal_eq2",
        },
        "editor": {
            "stage1_steps": "stage1_steps",
            "stage2_steps": "stage2_steps",
            "learning_rate": "learning_rate",
            "invert_steps": "invert_steps",
            "sample_steps": "sample_steps",
            "instance_token": "instance_token",
            "class_prompt": "class_prompt",
        },
        "curation": {
            "k": "k",
            "l": "l",
            "mode": "variant_mode",
            "harmonic_aggregation": "harmonic_aggregation",
            "joint_dim": "joint_dim",
        },
        "eval": {"thresholds": "thresholds", "rank": "rank"},
    }

    @classmethod
    def from_ini(cls, path: str | Path) -> "PipelineConfig":
        parser = configparser.ConfigParser()
        if not parser.read(path, encoding="utf-8"):
            raise FileNotFoundError(path)
        config = cls()
        known = {f.name: f for f in fields(cls)}
        for section, keys in cls._SECTIONS.items():
            if not parser.has_section(section):
                continue
            for key, attr in keys.items():
                if not parser.has_option(section, key):
                    continue
                raw = parser.get(section, key).strip()
                setattr(config, attr, _parse_value(raw, known[attr].type, section, key))
        return config

    def to_sections(self) -> dict[str, dict[str, str]]:
        out: dict[str, dict[str, str]] = {}
        for section, keys in self._SECTIONS.items():
            out[section] = {}
            for key, attr in keys.items():
                value = getattr(self, attr)
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                elif isinstance(value, bool):
                    value = "true" if value else "false"
                out[section][key] = "" if value is None else str(value)
        return out

    def config_hash(self) -> str:
        """Hash of every result-affecting setting.

        The output location and the job count are execution details, not
        inputs to the computation, so they are excluded: the same config
        run in two places must produce identical digests.
        """
        lines = []
        for section, entries in sorted(self.to_sections().items()):
            for key, value in sorted(entries.items()):
                if (section, key) in (("paths", "output"), ("run", "jobs")):
                    continue
                lines.append(f"{section}.{key}={value}")
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def _parse_value(raw: str, annotation, section: str, key: str):
    target = str(annotation)
    try:
        if "bool" in target:
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if "tuple" in target:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if "int" in target:
            return int(raw) if raw else None
        if "float" in target:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError([f"{section}.{key}: {exc}"]) from exc


def validate_config(config: PipelineConfig) -> list[str]:
    """Structural checks only; never touches run state. Empty list means ok."""
    errors: list[str] = []

    def check(ok: bool, message: str):
        if not ok:
            errors.append(message)

    check(config.seed is not None, "run.seed: a seed is mandatory")
    check(config.jobs >= 1, "run.jobs: must be >= 1")
    check(config.k >= 1, "curation.k: must be >= 1")
    check(config.l >= 1, "curation.l: must be >= 1")
    check(config.k >= config.l, f"curation.k ({config.k}) must be >= curation.l ({config.l})")
    check(config.variant_mode in ("replace", "inject"), "curation.mode: must be replace or inject")
    check(
        config.harmonic_aggregation in ("aggregate", "per_sample"),
        "curation.harmonic_aggregation: must be aggregate or per_sample",
    )
    check(config.joint_dim >= 2, "curation.joint_dim: must be >= 2")
    check(config.learning_rate > 0, "editor.learning_rate: must be positive")
    check(config.stage1_steps >= 0, "editor.stage1_steps: must be >= 0")
    check(config.stage2_steps >= 0, "editor.stage2_steps: must be >= 0")
    check(config.timesteps >= 1, "diffusion.timesteps: must be >= 1")
    check(0 < config.beta_start < 1, "diffusion.beta_start: must be in (0, 1)")
    check(0 < config.beta_end < 1, "diffusion.beta_end: must be in (0, 1)")
    check(config.model_dim >= 1, "diffusion.dim: must be >= 1")
    check(config.model_blocks >= 1, "diffusion.blocks: must be >= 1")
    for name, steps in (("invert_steps", config.invert_steps), ("sample_steps", config.sample_steps)):
        check(1 <= steps <= config.timesteps, f"editor.{name}: must be in [1, diffusion.timesteps]")
    check(config.select_m >= 1, "frames.select: must be >= 1")
    check(bool(config.thresholds), "eval.thresholds: at least one threshold")
    for mu in config.thresholds:
        check(0 < mu <= 1, f"eval.thresholds: {mu} outside (0, 1]")
    check(config.rank >= 1, "eval.rank: must be >= 1")
    check(is_instance_token(config.instance_token), "editor.instance_token: must be bracketed, e.g. [v]")
    check(bool(config.class_prompt.strip()), "editor.class_prompt: must be nonempty")

    if config.synthetic:
        check(config.videos >= 1, "data.videos: must be >= 1")
        check(config.moments_per_video >= 1, "data.moments_per_video: must be >= 1")
        check(config.frames_per_moment >= 1, "data.frames_per_moment: must be >= 1")
        check(config.frame_size >= 3, "data.frame_size: must be >= 3")
        check(config.class_images >= 1, "data.class_images: must be >= 1")
        check(
            config.select_m <= config.frames_per_moment,
            "frames.select: must be <= data.frames_per_moment",
        )
    else:
        for label, value in (
            ("paths.frames", config.frames_path),
            ("paths.annotations", config.annotations_path),
            ("paths.embeddings", config.embeddings_path),
            ("data.target_corpus", config.target_corpus),
        ):
            check(bool(value), f"{label}: required when data.synthetic is false")

    for label, value in (
        ("paths.frames", config.frames_path),
        ("paths.embeddings", config.embeddings_path),
        ("paths.annotations", config.annotations_path),
        ("paths.checkpoints", config.checkpoints_path),
        ("data.target_corpus", config.target_corpus),
    ):
        if value and not Path(value).exists():
            errors.append(f"{label}: path does not exist: {value}")
    return errors


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    config_hash: str = ""
    seed: int = 0
    versions: dict[str, str] = field(default_factory=dict)
    stages: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        doc = json.loads(path.read_text(encoding="utf-8"))
        return cls(
            config_hash=doc.get("config_hash", ""),
            seed=doc.get("seed", 0),
            versions=doc.get("versions", {}),
            stages=doc.get("stages", {}),
        )

    def save(self, path: Path) -> None:
        doc = {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "versions": self.versions,
            "stages": self.stages,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def output_digests(self) -> dict[str, str]:
        return {name: record["output_digest"] for name, record in self.stages.items()}


def _file_sha(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _digest_outputs(root: Path, stage_dir: Path) -> dict[str, str]:
    out = {}
    for path in sorted(stage_dir.rglob("*")):
        if path.is_file():
            out[path.relative_to(root).as_posix()] = _file_sha(path)
    return out


def _combine_digests(outputs: dict[str, str]) -> str:
    joined = "\n".join(f"{k}={v}" for k, v in sorted(outputs.items()))
    return hashlib.sha256(joined.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Stage context and helpers
# ---------------------------------------------------------------------------

@dataclass
class StageContext:
    config: PipelineConfig
    root: Path
    jobs: int

    def dir(self, stage: str) -> Path:
        return self.root / stage

    @property
    def seed(self) -> int:
        return int(self.config.seed)  # validated upstream


def _parallel_map(fn: Callable, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _moment_id(video_id: str, index: int) -> str:
    return f"{video_id}_m{index}"


def _schedule(config: PipelineConfig) -> NoiseSchedule:
    return NoiseSchedule.linear(config.timesteps, config.beta_start, config.beta_end)


def _relpath(target: Path, start_dir: Path) -> str:
    return os.path.relpath(target, start_dir)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_data(ctx: StageContext) -> None:
    """Materialise source videos, class images and the target corpus."""
    out = ctx.dir("data")
    cfg = ctx.config
    if cfg.synthetic:
        videos = make_source_videos(
            ctx.seed,
            n_videos=cfg.videos,
            moments_per_video=cfg.moments_per_video,
            frames_per_moment=cfg.frames_per_moment,
            frame_size=cfg.frame_size,
        )
        corpus = make_target_corpus(ctx.seed)
        annotations = []
        for video in videos:
            for idx, moment in enumerate(video.moments):
                name = f"{_moment_id(video.video_id, idx)}.bin"
                write_packed_frames(moment.frames, out / "source" / "frames" / name)
                moment.frames_path = f"../frames/{name}"  # relative to the video doc
                annotations.append(MomentAnnotation(video.video_id, moment.span, moment.query))
            write_video_doc(video, out / "source" / "videos" / f"{video.video_id}.json")
        write_annotations(annotations, out / "source" / "annotations.jsonl")
        write_packed_frames(make_class_images(ctx.seed, cfg.class_images, cfg.frame_size), out / "source" / "class_images.bin")
        write_annotations(corpus.annotations, out / "target" / "corpus.jsonl")
        _write_json(
            out / "target" / "videos.json",
            {
                vid: {
                    "duration": content.duration,
                    "segments": [
                        {"start": span.start, "end": span.end, "words": sorted(words)}
                        for span, words in content.segments
                    ],
                }
                for vid, content in sorted(corpus.video_content.items())
            },
        )
    else:
        _ingest_external_data(ctx, out)

    source_annotations = read_annotations(out / "source" / "annotations.jsonl")
    train_vocab = set()
    for ann in source_annotations:
        train_vocab.update(tokenize(ann.query))
    corpus_annotations = read_annotations(out / "target" / "corpus.jsonl")
    split = novel_word_split(corpus_annotations, train_vocab, seed=ctx.seed)
    write_annotations(split.generation, out / "split" / "generation.jsonl")
    write_annotations(split.test, out / "split" / "test.jsonl")
    _write_json(
        out / "split" / "novel_words.json",
        {"novel_words": split.novel_words, "warning": split.warning},
    )


def _ingest_external_data(ctx: StageContext, out: Path) -> None:
    """Normalise user-supplied annotations/frames into the run layout."""
    cfg = ctx.config
    annotations = read_annotations(cfg.annotations_path)
    by_video: dict[str, list[MomentAnnotation]] = {}
    for ann in annotations:
        by_video.setdefault(ann.video_id, []).append(ann)
    frames_root = Path(cfg.frames_path)
    for video_id, anns in sorted(by_video.items()):
        anns.sort(key=lambda a: a.span.start)
        moments = []
        for idx, ann in enumerate(anns):
            name = f"{_moment_id(video_id, idx)}.bin"
            src = frames_root / name
            if not src.exists():
                raise StageError("data", _moment_id(video_id, idx), f"missing frame file {src}")
            frames = read_packed_frames(src)
            write_packed_frames(frames, out / "source" / "frames" / name)
            moments.append(
                VideoMoment(span=ann.span, query=ann.query, frames=frames, frames_path=f"../frames/{name}")
            )
        write_video_doc(AssembledVideo(video_id, moments), out / "source" / "videos" / f"{video_id}.json")
    write_annotations(annotations, out / "source" / "annotations.jsonl")
    write_packed_frames(make_class_images(ctx.seed, cfg.class_images, cfg.frame_size), out / "source" / "class_images.bin")
    corpus = read_annotations(cfg.target_corpus)
    write_annotations(corpus, out / "target" / "corpus.jsonl")
    # target video content falls back to single-segment timelines
    _write_json(
        out / "target" / "videos.json",
        {
            ann.video_id: {
                "duration": ann.span.end,
                "segments": [{"start": ann.span.start, "end": ann.span.end, "words": sorted(tokenize(ann.query))}],
            }
            for ann in corpus
        },
    )


def _load_source_videos(ctx: StageContext) -> list[AssembledVideo]:
    videos_dir = ctx.dir("data") / "source" / "videos"
    return [read_video_doc(path, load_frames=True) for path in sorted(videos_dir.glob("*.json"))]


def stage_frames(ctx: StageContext) -> None:
    """Score every moment's frames and pick the stage-1 training subset."""
    out = ctx.dir("frames")
    out.mkdir(parents=True, exist_ok=True)
    cfg = ctx.config
    selection: dict[str, list[int]] = {}
    rows = []
    for video in _load_source_videos(ctx):
        for idx, moment in enumerate(video.moments):
            mid = _moment_id(video.video_id, idx)
            m = min(cfg.select_m, len(moment.frames))
            scores = phi_scores(moment.frames, normalize=not cfg.raw_phi)
            selection[mid] = select_frames(moment.frames, m, normalize=not cfg.raw_phi)
            for s in scores:
                rows.append((mid, s.index, s.dissim_prev, s.dissim_next, s.clarity, s.phi))
    _write_json(out / "selection.json", selection)
    with open(out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["moment_id", "frame_index", "dissim_prev", "dissim_next", "clarity", "phi"])
        for row in rows:
            writer.writerow([row[0], row[1], *(repr(v) for v in row[2:])])


def stage_train(ctx: StageContext) -> None:
    """Stage-1 per video, stage-2 per moment; one checkpoint per moment."""
    out = ctx.dir("train")
    cfg = ctx.config
    sched = _schedule(cfg)
    ckpt_dir = out / "ckpt"

    if cfg.checkpoints_path:
        _copy_external_checkpoints(ctx, ckpt_dir)
        return

    selection = _read_json(ctx.dir("frames") / "selection.json")
    class_images = read_packed_frames(ctx.dir("data") / "source" / "class_images.bin")
    loss_rows = []
    for video in _load_source_videos(ctx):
        instance_frames = []
        for idx, moment in enumerate(video.moments):
            chosen = set(selection[_moment_id(video.video_id, idx)])
            instance_frames.extend(f for f in moment.frames if f.index in chosen)
        base = DenoiserModel(
            DenoiserConfig(
                channels=1,
                dim=cfg.model_dim,
                blocks=cfg.model_blocks,
                tokens=(cfg.instance_token,),
            ),
            seed=derive_seed(ctx.seed, f"init/{video.video_id}"),
        )
        batch = TrainingBatch(
            instance_frames=instance_frames,
            class_images=class_images,
            instance_prompt=f"{cfg.instance_token} person",
            class_prompt=cfg.class_prompt,
        )
        try:
            stage1 = train_stage1(
                base, batch, sched, cfg.stage1_steps,
                seed=derive_seed(ctx.seed, f"stage1/{video.video_id}"), lr=cfg.learning_rate,
            )
        except Exception as exc:
            raise StageError("train", video.video_id, str(exc)) from exc
        for step, value in enumerate(stage1.losses):
            loss_rows.append(("stage1", video.video_id, step, value))

        for idx, moment in enumerate(video.moments):
            mid = _moment_id(video.video_id, idx)
            model = copy.deepcopy(base)
            try:
                stage2 = train_stage2(
                    model, moment.frames, instance_prompt_for(moment.query, cfg.instance_token),
                    sched, cfg.stage2_steps,
                    seed=derive_seed(ctx.seed, f"stage2/{mid}"), lr=cfg.learning_rate,
                )
            except Exception as exc:
                raise StageError("train", mid, str(exc)) from exc
            for step, value in enumerate(stage2.losses):
                loss_rows.append(("stage2", mid, step, value))
            save_model(model, sched, ckpt_dir / f"{mid}.ckpt")

    with open(out / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "id", "step", "loss"])
        for stage, item, step, value in loss_rows:
            writer.writerow([stage, item, step, repr(value)])


def _copy_external_checkpoints(ctx: StageContext, ckpt_dir: Path) -> None:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    source = Path(ctx.config.checkpoints_path)
    found = sorted(source.glob("*.ckpt")) + sorted(source.glob("*.ckpt.cfg"))
    if not found:
        raise StageError("train", str(source), "no .ckpt files in paths.checkpoints")
    for path in found:
        (ckpt_dir / path.name).write_bytes(path.read_bytes())


def stage_edit(ctx: StageContext) -> None:
    """Edit every source moment with every generation sentence."""
    out = ctx.dir("edit")
    cfg = ctx.config
    sched = _schedule(cfg)
    generation = read_annotations(ctx.dir("data") / "split" / "generation.jsonl")
    videos = _load_source_videos(ctx)

    work = []
    for video in videos:
        for idx, moment in enumerate(video.moments):
            for si, sentence in enumerate(generation):
                work.append((video, idx, moment, si, sentence))

    def run_item(item):
        video, idx, moment, si, sentence = item
        mid = _moment_id(video.video_id, idx)
        gen_id = f"gen_{mid}_s{si:02d}"
        try:
            model, model_sched = load_model(ctx.dir("train") / "ckpt" / f"{mid}.ckpt")
            req = EditRequest(
                moment=moment.frames,
                source_prompt=instance_prompt_for(moment.query, cfg.instance_token),
                edit_prompt=instance_prompt_for(sentence.query, cfg.instance_token),
                inversion_steps=cfg.invert_steps,
                sampling_steps=cfg.sample_steps,
            )
            edited = edit_moment(model, req, model_sched, literal_inversion=cfg.literal_eq2)
            rel = f"frames/{gen_id}.bin"
            write_packed_frames(edited, out / rel)
        except Exception as exc:
            raise StageError("edit", gen_id, str(exc)) from exc
        provenance = {
            "id": gen_id,
            "source_video_id": video.video_id,
            "source_moment_index": idx,
            "source_prompt": req.source_prompt,
            "edit_prompt": sentence.query,
            "edit_prompt_tokenised": req.edit_prompt,
            "inversion_steps": cfg.invert_steps,
            "sampling_steps": cfg.sample_steps,
            "seed": derive_seed(ctx.seed, f"edit/{gen_id}"),
        }
        moment_record = GeneratedMoment(
            id=gen_id,
            source_video_id=video.video_id,
            source_moment_index=idx,
            edit_prompt=sentence.query,
            frames_path=rel,
        )
        return provenance, moment_record

    results = _parallel_map(run_item, work, ctx.jobs)
    with open(out / "provenance.jsonl", "w", encoding="utf-8") as fh:
        for provenance, _ in results:
            fh.write(json.dumps(provenance, sort_keys=True) + "\n")
    pool = CandidatePool(items=[record for _, record in results], provenance=cfg.config_hash())
    write_pool(pool, out / "pool.jsonl")


def stage_score(ctx: StageContext) -> None:
    """Fidelity-score every candidate against its prompt and source moment."""
    out = ctx.dir("score")
    cfg = ctx.config
    pool = read_pool(ctx.dir("edit") / "pool.jsonl")
    videos = {v.video_id: v for v in _load_source_videos(ctx)}
    external = Path(cfg.embeddings_path) if cfg.embeddings_path else None

    def score_item(item: GeneratedMoment) -> GeneratedMoment:
        try:
            generated = read_packed_frames(ctx.dir("edit") / item.frames_path)
            source = videos[item.source_video_id].moments[item.source_moment_index].frames
            mid = _moment_id(item.source_video_id, item.source_moment_index)
            src_struct = _source_structure_embedding(external, mid, source)
            gen_struct = EmbeddingSet(structure_embedding(generated), source_tag="structure")
            joint = EmbeddingSet(joint_frame_embedding(generated, cfg.joint_dim), source_tag="joint")
            item.joint_path = f"embeddings/{item.id}.joint.emb"
            item.structure_path = f"embeddings/{item.id}.structure.emb"
            write_embeddings(joint, out / item.joint_path)
            write_embeddings(gen_struct, out / item.structure_path)
            item.joint_embeddings = joint
            item.structure_embeddings = gen_struct
            item.prompt_fid = prompt_fidelity(item, joint_text_embedding(item.edit_prompt, cfg.joint_dim))
            item.struct_fid = structure_fidelity(src_struct, gen_struct)
            item.h_score = safe_harmonic_score(item.prompt_fid, item.struct_fid)
            return item
        except StageError:
            raise
        except Exception as exc:
            raise StageError("score", item.id, str(exc)) from exc

    items = _parallel_map(score_item, pool.items, ctx.jobs)
    scored = CandidatePool(items=items, provenance=cfg.config_hash())
    write_pool(scored, out / "pool.jsonl")
    summary = {"pool_size": len(scored), "aggregation": cfg.harmonic_aggregation}
    if scored.items:
        summary.update(pool_fidelity_summary(scored, mode=cfg.harmonic_aggregation))
    _write_json(out / "summary.json", summary)


def _source_structure_embedding(external: Path | None, mid: str, source: FrameSequence) -> EmbeddingSet:
    """Per-moment structure embeddings: external file when provided, stand-in otherwise."""
    if external is not None:
        path = external / f"{mid}.structure.emb"
        if path.exists():
            from .curation import read_embeddings

            return read_embeddings(path, source_tag="structure")
    return EmbeddingSet(structure_embedding(source), source_tag="structure")


def _variant_content(video: AssembledVideo, item: GeneratedMoment) -> VideoContent:
    segments = []
    for idx, moment in enumerate(video.moments):
        text = item.edit_prompt if idx == item.source_moment_index else moment.query
        segments.append((moment.span, frozenset(tokenize(text))))
    return VideoContent(
        video_id=f"{video.video_id}:{item.id}",
        duration=video.duration,
        segments=segments,
    )


def stage_curate(ctx: StageContext) -> None:
    """Quantitative top-k then qualitative bottom-l selection."""
    out = ctx.dir("curate")
    cfg = ctx.config
    pool = read_pool(ctx.dir("score") / "pool.jsonl")
    if len(pool) == 0:
        raise StageError("curate", "pool", "no generated candidates (empty generation split?)")
    k = min(cfg.k, len(pool))
    filtered = quantitative_select(pool, k)
    write_pool(filtered, out / "filtered.jsonl")

    source_annotations = read_annotations(ctx.dir("data") / "source" / "annotations.jsonl")
    videos = {v.video_id: v for v in _load_source_videos(ctx)}
    contents = [_variant_content(videos[m.source_video_id], m) for m in filtered.items]
    annotations = {
        m.id: MomentAnnotation(
            video_id=f"{m.source_video_id}:{m.id}",
            span=videos[m.source_video_id].moments[m.source_moment_index].span,
            query=m.edit_prompt,
        )
        for m in filtered.items
    }
    scorer = SlidingWindowScorer(source_annotations, contents)
    report = per_sample_scores(scorer, filtered, annotations)
    if report.errors:
        item, cause = sorted(report.errors.items())[0]
        raise StageError("curate", item, cause)
    write_scores_csv(report.scores, out / "vmr_scores.csv")

    selected = qualitative_select(filtered, report.scores, min(cfg.l, len(filtered)))
    write_pool(selected, out / "selected.jsonl")


def stage_assemble(ctx: StageContext) -> None:
    """Build video variants for the selection and the augmented training set."""
    out = ctx.dir("assemble")
    cfg = ctx.config
    selected = read_pool(ctx.dir("curate") / "selected.jsonl")
    videos = {v.video_id: v for v in _load_source_videos(ctx)}
    data_dir = ctx.dir("data")
    videos_dir = out / "videos"

    selected_annotations: dict[str, MomentAnnotation] = {}
    for item in selected.items:
        source = videos[item.source_video_id]
        edited = read_packed_frames(ctx.dir("edit") / item.frames_path)
        try:
            variant_moments = assemble_variant(
                source.moments, item.source_moment_index, edited, cfg.variant_mode, item.edit_prompt
            )
        except Exception as exc:
            raise StageError("assemble", item.id, str(exc)) from exc
        variant_id = f"{item.source_video_id}:{item.id}"
        variant = AssembledVideo(video_id=variant_id, moments=variant_moments)
        # re-point frame files relative to the variant doc location
        edited_positions = [
            j for j, m in enumerate(variant_moments) if m.query == item.edit_prompt and not m.frames_path
        ]
        source_doc_dir = data_dir / "source" / "videos"
        for j, moment in enumerate(variant_moments):
            if j in edited_positions:
                moment.frames_path = _relpath(ctx.dir("edit") / item.frames_path, videos_dir)
            elif moment.frames_path:
                moment.frames_path = _relpath((source_doc_dir / moment.frames_path).resolve(), videos_dir.resolve())
        write_video_doc(variant, videos_dir / f"{item.id}.json", meta={"config_hash": cfg.config_hash()})
        span = next(m.span for j, m in enumerate(variant_moments) if j in edited_positions)
        selected_annotations[item.id] = MomentAnnotation(variant_id, span, item.edit_prompt)

    source_annotations = read_annotations(data_dir / "source" / "annotations.jsonl")
    source_by_id = {}
    counters: dict[str, int] = {}
    for ann in source_annotations:
        idx = counters.get(ann.video_id, 0)
        counters[ann.video_id] = idx + 1
        source_by_id[f"src_{_moment_id(ann.video_id, idx)}"] = ann
    training = build_training_set(source_by_id, selected, selected_annotations)
    with open(out / "training_set.jsonl", "w", encoding="utf-8") as fh:
        for entry_id, ann in training.items():
            fh.write(
                json.dumps(
                    {
                        "id": entry_id,
                        "video_id": ann.video_id,
                        "start": ann.span.start,
                        "end": ann.span.end,
                        "query": ann.query,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def _load_target_contents(ctx: StageContext) -> list[VideoContent]:
    doc = _read_json(ctx.dir("data") / "target" / "videos.json")
    contents = []
    for video_id, payload in sorted(doc.items()):
        segments = [
            (TemporalSpan(float(s["start"]), float(s["end"])), frozenset(s["words"]))
            for s in payload["segments"]
        ]
        contents.append(VideoContent(video_id=video_id, duration=float(payload["duration"]), segments=segments))
    return contents


def stage_eval(ctx: StageContext) -> None:
    """Score the reference retriever before and after augmentation."""
    out = ctx.dir("eval")
    out.mkdir(parents=True, exist_ok=True)
    cfg = ctx.config
    test_split = read_annotations(ctx.dir("data") / "split" / "test.jsonl")
    if not test_split:
        _write_json(out / "metrics.json", {"warning": "empty test split; no novel words"})
        return
    contents = _load_target_contents(ctx)
    source_annotations = read_annotations(ctx.dir("data") / "source" / "annotations.jsonl")
    augmented_annotations = [
        MomentAnnotation(r["video_id"], TemporalSpan(r["start"], r["end"]), r["query"])
        for r in map(json.loads, (ctx.dir("assemble") / "training_set.jsonl").read_text().splitlines())
    ]

    tables = {}
    for tag, annotations in (("baseline", source_annotations), ("augmented", augmented_annotations)):
        scorer = SlidingWindowScorer(annotations, contents)
        preds = [
            RetrievalPrediction(ann.video_id, ann.query, scorer.score(ann.video_id, ann.query))
            for ann in test_split
        ]
        write_predictions(preds, out / f"predictions_{tag}.jsonl")
        table = evaluate(preds, test_split, thresholds=cfg.thresholds, n=cfg.rank)
        (out / f"metrics_{tag}.json").write_text(table.to_json() + "\n", encoding="utf-8")
        (out / f"metrics_{tag}.txt").write_text(table.to_text() + "\n", encoding="utf-8")
        tables[tag] = table.as_dict()
    _write_json(out / "metrics.json", tables)


def stage_report(ctx: StageContext) -> None:
    """Figures and delimited summaries; see the report module."""
    from . import report

    report.render_run_report(ctx.root, ctx.config.config_hash())


STAGES: list[tuple[str, Callable[[StageContext], None]]] = [
    ("data", stage_data),
    ("frames", stage_frames),
    ("train", stage_train),
    ("edit", stage_edit),
    ("score", stage_score),
    ("curate", stage_curate),
    ("assemble", stage_assemble),
    ("eval", stage_eval),
    ("report", stage_report),
]

STAGE_NAMES = [name for name, _ in STAGES]


def run_pipeline(
    config: PipelineConfig,
    out: str | Path | None = None,
    jobs: int | None = None,
    force: bool = False,
) -> RunManifest:
    """Run every stage in order, skipping stages whose inputs are unchanged.

    Returns the manifest. Raises ConfigError before any work if the config
    does not validate, and StageError (with partial outputs left in place)
    if a stage fails.
    """
    errors = validate_config(config)
    if errors:
        raise ConfigError(errors)
    torch.set_num_threads(1)  # keeps reductions bit-reproducible across hosts

    root = Path(out) if out is not None else Path(config.output_path)
    root.mkdir(parents=True, exist_ok=True)
    manifest_path = root / "manifest.json"
    config_hash = config.config_hash()

    manifest = RunManifest(
        config_hash=config_hash,
        seed=int(config.seed),
        versions={"momentforge": __version__, "python": sys.version.split()[0]},
    )
    if manifest_path.exists() and not force:
        previous = RunManifest.load(manifest_path)
        if previous.config_hash == config_hash and previous.seed == config.seed:
            manifest.stages = previous.stages

    ctx = StageContext(config=config, root=root, jobs=jobs if jobs is not None else config.jobs)
    upstream = ""
    for name, fn in STAGES:
        input_digest = hashlib.sha256(f"{config_hash}:{config.seed}:{name}:{upstream}".encode()).hexdigest()[:16]
        record = manifest.stages.get(name)
        if record and not force and record.get("status") == "ok" and record.get("input_digest") == input_digest:
            if _outputs_intact(root, record.get("outputs", {})):
                record["skipped"] = True
                upstream = record["output_digest"]
                continue

        stage_dir = ctx.dir(name)
        if stage_dir.exists():
            _clear_dir(stage_dir)
        stage_dir.mkdir(parents=True, exist_ok=True)
        started = time.perf_counter()
        try:
            fn(ctx)
        except StageError:
            manifest.stages[name] = {"status": "failed", "input_digest": input_digest}
            manifest.save(manifest_path)
            raise
        except Exception as exc:
            manifest.stages[name] = {"status": "failed", "input_digest": input_digest}
            manifest.save(manifest_path)
            raise StageError(name, "-", str(exc)) from exc
        outputs = _digest_outputs(root, stage_dir)
        output_digest = _combine_digests(outputs)
        _write_json(
            stage_dir / "provenance.json",
            {"stage": name, "config_hash": config_hash, "output_digest": output_digest},
        )
        outputs[(stage_dir / "provenance.json").relative_to(root).as_posix()] = _file_sha(
            stage_dir / "provenance.json"
        )
        manifest.stages[name] = {
            "status": "ok",
            "input_digest": input_digest,
            "outputs": outputs,
            "output_digest": output_digest,
            "elapsed_s": round(time.perf_counter() - started, 3),
        }
        manifest.save(manifest_path)
        upstream = output_digest
    manifest.save(manifest_path)
    return manifest


def _outputs_intact(root: Path, outputs: dict[str, str]) -> bool:
    for rel, digest in outputs.items():
        path = root / rel
        if not path.is_file() or _file_sha(path) != digest:
            return False
    return bool(outputs)


def _clear_dir(path: Path) -> None:
    for child in sorted(path.rglob("*"), reverse=True):
        if child.is_file() or child.is_symlink():
            child.unlink()
        else:
            child.rmdir()
