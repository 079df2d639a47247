"""forge: command-line front end.

Subcommands mirror the pipeline stages (frames, train, edit, curate,
assemble, eval, run, report) and operate on plain files, so single steps
can be run and inspected in isolation. Exit codes: 0 on success, 2 for
validation/input errors, 3 for stage failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

__all__ = ["main"]

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_STAGE = 3


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    from .pipeline import ConfigError, StageError

    try:
        return args.handler(args)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forge",
        description="Simulate, curate and evaluate moment-retrieval training data at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    # frames ----------------------------------------------------------------
    p_frames = sub.add_parser("frames", help="frame scoring and selection")
    frames_sub = p_frames.add_subparsers(dest="frames_command", required=True)
    p_score = frames_sub.add_parser("score", help="score frames and select a subset")
    p_score.add_argument("--in", dest="input", required=True, help="frame directory (PNG) or packed .bin file")
    p_score.add_argument("--select", type=int, default=None, metavar="M", help="also report the top-M frame indices")
    p_score.add_argument("--raw-phi", action="store_true", help="skip per-component min-max normalisation")
    p_score.add_argument("--out", default=None, help="write the score table as JSON here")
    p_score.set_defaults(handler=cmd_frames_score)

    # train -------------------------------------------------------------------
    p_train = sub.add_parser("train", help="two-stage training on one moment")
    p_train.add_argument("--moment", required=True, help="moment frames (dir or packed .bin)")
    p_train.add_argument("--prompt", required=True, help="moment description, e.g. '[v] person walks'")
    p_train.add_argument("--class-images", required=True, help="class images for prior preservation (.bin)")
    p_train.add_argument("--class-prompt", default="a person")
    p_train.add_argument("--stage1-steps", type=int, default=200)
    p_train.add_argument("--stage2-steps", type=int, default=200)
    p_train.add_argument("--lr", type=float, default=2e-3)
    p_train.add_argument("--timesteps", type=int, default=100)
    p_train.add_argument("--dim", type=int, default=16)
    p_train.add_argument("--blocks", type=int, default=1)
    p_train.add_argument("--seed", type=int, required=True)
    p_train.add_argument("--out", required=True, help="checkpoint path to write")
    p_train.set_defaults(handler=cmd_train)

    # edit ----------------------------------------------------------------------
    p_edit = sub.add_parser("edit", help="prompt-controlled moment editing")
    p_edit.add_argument("--moment", required=True, help="moment frames (dir or packed .bin)")
    p_edit.add_argument("--source-prompt", required=True)
    p_edit.add_argument("--edit-prompt", required=True)
    p_edit.add_argument("--ckpt", required=True, help="trained model checkpoint")
    p_edit.add_argument("--steps-invert", type=int, default=50)
    p_edit.add_argument("--steps-sample", type=int, default=50)
    p_edit.add_argument("--seed", type=int, default=0)
    p_edit.add_argument("--literal-eq2", action="store_true", help="printed-form inversion (comparison mode)")
    p_edit.add_argument("--out", required=True, help="output directory for frames + provenance")
    p_edit.set_defaults(handler=cmd_edit)

    # curate -----------------------------------------------------------------
    p_curate = sub.add_parser("curate", help="hybrid candidate selection")
    curate_sub = p_curate.add_subparsers(dest="curate_command", required=True)
    p_quant = curate_sub.add_parser("quant", help="quantitative top-k by harmonic score")
    p_quant.add_argument("--pool", required=True)
    p_quant.add_argument("--k", type=int, required=True)
    p_quant.add_argument("--out", default=None, help="output pool path (default: filtered.jsonl beside input)")
    p_quant.set_defaults(handler=cmd_curate_quant)
    p_qual = curate_sub.add_parser("qual", help="qualitative bottom-l by retrieval score")
    p_qual.add_argument("--pool", required=True)
    p_qual.add_argument("--scores", required=True, help="CSV id,score")
    p_qual.add_argument("--l", type=int, required=True)
    p_qual.add_argument("--out", default=None, help="output pool path (default: selected.jsonl beside input)")
    p_qual.set_defaults(handler=cmd_curate_qual)

    # assemble -----------------------------------------------------------------
    p_asm = sub.add_parser("assemble", help="build a video variant around an edited moment")
    p_asm.add_argument("--video", required=True, help="video document (JSON)")
    p_asm.add_argument("--moment", type=int, required=True, help="moment index to edit")
    p_asm.add_argument("--mode", choices=("replace", "inject"), required=True)
    p_asm.add_argument("--frames", required=True, help="edited frames (packed .bin)")
    p_asm.add_argument("--prompt", required=True, help="annotation text for the edited moment")
    p_asm.add_argument("--insert-before", action="store_true", help="inject before the moment instead of after")
    p_asm.add_argument("--out", required=True, help="variant video document to write")
    p_asm.set_defaults(handler=cmd_assemble)

    # eval ------------------------------------------------------------------------
    p_eval = sub.add_parser("eval", help="retrieval metrics against ground truth")
    p_eval.add_argument("--pred", required=True, help="predictions (JSONL)")
    p_eval.add_argument("--gt", required=True, help="annotations (JSONL)")
    p_eval.add_argument("--thresholds", default="0.3,0.5,0.7")
    p_eval.add_argument("--rank", type=int, default=1)
    p_eval.add_argument("--out", default=None, help="write metrics JSON here (text table beside it)")
    p_eval.add_argument("--plot", default=None, help="render a metrics bar chart to this PNG")
    p_eval.set_defaults(handler=cmd_eval)

    # run -------------------------------------------------------------------------
    p_run = sub.add_parser("run", help="full pipeline from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None, help="run directory (default: paths.output from the config)")
    p_run.add_argument("--seed", type=int, default=None, help="override run.seed")
    p_run.add_argument("--jobs", type=int, default=None, help="per-stage item parallelism")
    p_run.add_argument("--force", action="store_true", help="re-run every stage even if digests match")
    p_run.add_argument("--validate-only", action="store_true", help="validate the config and exit")
    p_run.set_defaults(handler=cmd_run)

    # report ---------------------------------------------------------------------
    p_report = sub.add_parser("report", help="render figures and summary tables for a run")
    p_report.add_argument("--run", required=True, help="run directory (containing manifest.json)")
    p_report.set_defaults(handler=cmd_report)
    return parser


def _load_frames(path_arg: str):
    from .frames import load_frame_dir, read_packed_frames

    path = Path(path_arg)
    if path.is_dir():
        return load_frame_dir(path)
    return read_packed_frames(path)


def cmd_frames_score(args) -> int:
    from .frames import phi_scores, select_frames

    frames = _load_frames(args.input)
    normalize = not args.raw_phi
    scores = phi_scores(frames, normalize=normalize)
    payload = {
        "frames": len(frames),
        "normalized": normalize,
        "scores": [
            {
                "index": s.index,
                "dissim_prev": s.dissim_prev,
                "dissim_next": s.dissim_next,
                "clarity": s.clarity,
                "phi": s.phi,
            }
            for s in scores
        ],
    }
    if args.select is not None:
        payload["selected"] = select_frames(frames, args.select, normalize=normalize)
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import save_model
    from .denoiser import DenoiserConfig, DenoiserModel
    from .diffusion import NoiseSchedule
    from .editor import TrainingBatch, train_stage1, train_stage2
    from .frames import read_packed_frames
    from .seeding import derive_seed

    moment = _load_frames(args.moment)
    class_images = read_packed_frames(args.class_images)
    sched = NoiseSchedule.linear(args.timesteps)
    tokens = tuple(w for w in args.prompt.split() if w.startswith("[") and w.endswith("]"))
    model = DenoiserModel(
        DenoiserConfig(channels=1, dim=args.dim, blocks=args.blocks, tokens=tokens or ("[v]",)),
        seed=derive_seed(args.seed, "init"),
    )
    batch = TrainingBatch(
        instance_frames=moment,
        class_images=class_images,
        instance_prompt=args.prompt,
        class_prompt=args.class_prompt,
    )
    s1 = train_stage1(model, batch, sched, args.stage1_steps, seed=derive_seed(args.seed, "stage1"), lr=args.lr)
    s2 = train_stage2(model, moment, args.prompt, sched, args.stage2_steps, seed=derive_seed(args.seed, "stage2"), lr=args.lr)
    save_model(model, sched, args.out)
    summary = {
        "checkpoint": args.out,
        "stage1_loss": [s1.losses[0], s1.losses[-1]] if s1.losses else [],
        "stage2_loss": [s2.losses[0], s2.losses[-1]] if s2.losses else [],
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_edit(args) -> int:
    from .checkpoint import load_model
    from .editor import EditRequest, edit_moment
    from .frames import write_packed_frames

    moment = _load_frames(args.moment)
    model, sched = load_model(args.ckpt)
    req = EditRequest(
        moment=moment,
        source_prompt=args.source_prompt,
        edit_prompt=args.edit_prompt,
        inversion_steps=args.steps_invert,
        sampling_steps=args.steps_sample,
    )
    edited = edit_moment(model, req, sched, literal_inversion=args.literal_eq2)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_packed_frames(edited, out / "edited.bin")
    provenance = {
        "source_moment": str(args.moment),
        "source_prompt": args.source_prompt,
        "edit_prompt": args.edit_prompt,
        "checkpoint": str(args.ckpt),
        "inversion_steps": args.steps_invert,
        "sampling_steps": args.steps_sample,
        "seed": args.seed,
        "literal_eq2": bool(args.literal_eq2),
        "frames": "edited.bin",
    }
    (out / "provenance.json").write_text(json.dumps(provenance, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(provenance, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_curate_quant(args) -> int:
    from .curation import quantitative_select, read_pool, write_pool

    pool = read_pool(args.pool)
    out = Path(args.out) if args.out else Path(args.pool).with_name("filtered.jsonl")
    filtered = quantitative_select(pool, args.k)
    write_pool(filtered, out)
    print(f"selected {len(filtered)} of {len(pool)} candidates -> {out}")
    return EXIT_OK


def cmd_curate_qual(args) -> int:
    from .curation import qualitative_select, read_pool, read_scores_csv, write_pool

    pool = read_pool(args.pool)
    scores = read_scores_csv(args.scores)
    out = Path(args.out) if args.out else Path(args.pool).with_name("selected.jsonl")
    selected = qualitative_select(pool, scores, args.l)
    write_pool(selected, out)
    print(f"selected {len(selected)} of {len(pool)} candidates -> {out}")
    return EXIT_OK


def cmd_assemble(args) -> int:
    import os

    from .curation import AssembledVideo, assemble_variant, read_video_doc, write_video_doc
    from .frames import read_packed_frames

    video = read_video_doc(args.video, load_frames=True)
    edited = read_packed_frames(args.frames)
    variant_moments = assemble_variant(
        video.moments, args.moment, edited, args.mode, args.prompt, insert_before=args.insert_before
    )
    out = Path(args.out)
    source_dir = Path(args.video).parent
    for j, moment in enumerate(variant_moments):
        if moment.frames_path:
            moment.frames_path = os.path.relpath(source_dir / moment.frames_path, out.parent)
    edited_index = next(
        j for j, m in enumerate(variant_moments) if m.query == args.prompt and not m.frames_path
    )
    variant_moments[edited_index].frames_path = os.path.relpath(args.frames, out.parent)
    write_video_doc(AssembledVideo(f"{video.video_id}:edit", variant_moments), out)
    spans = [[m.span.start, m.span.end] for m in variant_moments]
    print(json.dumps({"video": str(out), "moments": len(variant_moments), "spans": spans}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .vmr_eval import evaluate, read_annotations, read_predictions

    thresholds = tuple(float(v) for v in str(args.thresholds).split(",") if v.strip())
    preds = read_predictions(args.pred)
    gt = read_annotations(args.gt)
    table = evaluate(preds, gt, thresholds=thresholds, n=args.rank)
    print(table.to_text())
    if args.out:
        out = Path(args.out)
        out.write_text(table.to_json() + "\n", encoding="utf-8")
        out.with_suffix(".txt").write_text(table.to_text() + "\n", encoding="utf-8")
    if args.plot:
        from .report import plot_metrics

        plot_metrics({"run": table.as_dict()}, args.plot)
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import ConfigError, PipelineConfig, run_pipeline, validate_config

    config = PipelineConfig.from_ini(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.jobs is not None:
        config.jobs = args.jobs
    errors = validate_config(config)
    if errors:
        raise ConfigError(errors)
    if args.validate_only:
        print("config ok")
        return EXIT_OK
    manifest = run_pipeline(config, out=args.out, jobs=args.jobs, force=args.force)
    summary = {
        "config_hash": manifest.config_hash,
        "seed": manifest.seed,
        "stages": {
            name: {
                "status": record.get("status"),
                "skipped": record.get("skipped", False),
                "output_digest": record.get("output_digest"),
                "elapsed_s": record.get("elapsed_s"),
            }
            for name, record in manifest.stages.items()
        },
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_run_report

    written = render_run_report(args.run)
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
