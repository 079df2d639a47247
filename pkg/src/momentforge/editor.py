"""Two-stage instance-preserving action editor.

Stage 1 treats the moment as an unordered set of frames and aligns a
learnable instance token with them, while a prior-preservation term keeps
reconstructing generic class images so the token does not hijack the
class concept. Only spatial weights and the token table move. Stage 2
freezes everything learned so far and trains just the temporal attention
over the frame sequence. Editing then runs the deterministic inversion
under the source prompt and re-samples under the edit prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .denoiser import DenoiserModel, PromptEmbedding, is_instance_token
from .diffusion import (
    LossResult,
    NoiseSchedule,
    TrainingDivergedError,
    ddim_invert,
    ddim_sample,
    decode,
    encode,
    extract_grads,
    noise_prediction_loss,
)
from .frames import FrameSequence, check_sequence
from .seeding import derive_seed

__all__ = [
    "TrainingBatch",
    "EditRequest",
    "TrainResult",
    "idl_loss",
    "te_loss",
    "train_stage1",
    "train_stage2",
    "edit_moment",
]

DEFAULT_LR = 2e-3


@dataclass
class TrainingBatch:
    """Inputs for stage-1 instance-descriptor learning."""

    instance_frames: FrameSequence
    class_images: FrameSequence
    instance_prompt: str
    class_prompt: str

    def __post_init__(self):
        if not self.instance_frames:
            raise ValueError("instance_frames must be nonempty")
        if not self.class_images:
            raise ValueError("class_images must be nonempty")
        if not self.instance_prompt.strip() or not self.class_prompt.strip():
            raise ValueError("prompts must be nonempty")


@dataclass
class EditRequest:
    """A prompt-controlled edit of one moment."""

    moment: FrameSequence
    source_prompt: str
    edit_prompt: str
    inversion_steps: int = 50
    sampling_steps: int = 50

    def __post_init__(self):
        check_sequence(self.moment)
        if not self.source_prompt.strip() or not self.edit_prompt.strip():
            raise ValueError("prompts must be nonempty")
        if self.inversion_steps < 1 or self.sampling_steps < 1:
            raise ValueError("step counts must be positive")


@dataclass
class TrainResult:
    model: DenoiserModel
    losses: list[float] = field(default_factory=list)


def idl_loss(
    model: DenoiserModel,
    batch: TrainingBatch,
    sched: NoiseSchedule,
    rng_seed: int,
) -> LossResult:
    """Instance-descriptor objective: instance term plus class prior term.

    One instance frame and one class image are drawn per call; the two
    reconstruction terms are weighted equally. Sub-draws use seeds derived
    from `rng_seed`, so each term is reproducible in isolation through the
    plain denoising objective.
    """
    pick = torch.Generator().manual_seed(derive_seed(rng_seed, "pick"))
    inst = batch.instance_frames[int(torch.randint(len(batch.instance_frames), (1,), generator=pick))]
    cls = batch.class_images[int(torch.randint(len(batch.class_images), (1,), generator=pick))]

    p_inst = model.encode_prompt(batch.instance_prompt)
    p_class = model.encode_prompt(batch.class_prompt)
    inst_term, t_inst = noise_prediction_loss(
        model, encode([inst]), p_inst, sched, derive_seed(rng_seed, "inst")
    )
    class_term, _ = noise_prediction_loss(
        model, encode([cls]), p_class, sched, derive_seed(rng_seed, "class")
    )
    loss = inst_term + class_term
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError("non-finite instance-descriptor loss")
    return LossResult(value=value, grads=extract_grads(loss, model), timestep=t_inst)


def te_loss(
    model: DenoiserModel,
    frames: FrameSequence,
    prompt: str,
    sched: NoiseSchedule,
    rng_seed: int,
) -> LossResult:
    """Temporal-encoding objective over the whole frame sequence.

    All frames are noised at one drawn timestep with independent noise,
    and the squared error is averaged over every element, which equals
    the average of the per-frame losses.
    """
    check_sequence(frames)
    p = model.encode_prompt(prompt)
    loss, t = noise_prediction_loss(model, encode(frames), p, sched, rng_seed)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError("non-finite temporal-encoding loss")
    return LossResult(value=value, grads=extract_grads(loss, model), timestep=t)


def _sgd_step(model: DenoiserModel, grads: dict[str, torch.Tensor], lr: float) -> None:
    params = model.trainable_params()
    with torch.no_grad():
        for name, grad in grads.items():
            params[name] -= lr * grad


def train_stage1(
    model: DenoiserModel,
    batch: TrainingBatch,
    sched: NoiseSchedule,
    steps: int,
    seed: int,
    lr: float = DEFAULT_LR,
) -> TrainResult:
    """Align the instance token with the selected frames (stage 1).

    Updates spatial weights and the token table only; temporal weights
    are untouched bit for bit. The model is trained in place.
    """
    for word in model.tokenize(batch.instance_prompt):
        if is_instance_token(word):
            model.ensure_token(word)
    model.set_trainable(spatial=True, temporal=False, tokens=True)
    losses = []
    for step in range(steps):
        try:
            result = idl_loss(model, batch, sched, derive_seed(seed, f"stage1/{step}"))
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"stage 1 diverged at step {step}: {exc}") from exc
        _sgd_step(model, result.grads, lr)
        losses.append(result.value)
    return TrainResult(model=model, losses=losses)


def train_stage2(
    model: DenoiserModel,
    frames: FrameSequence,
    prompt: str,
    sched: NoiseSchedule,
    steps: int,
    seed: int,
    lr: float = DEFAULT_LR,
) -> TrainResult:
    """Capture motion in the temporal layer (stage 2).

    Spatial weights and the token table are frozen and stay bit-identical;
    only temporal attention trains. The model is trained in place.
    """
    model.encode_prompt(prompt)  # validates instance tokens exist before freezing
    model.set_trainable(spatial=False, temporal=True, tokens=False)
    losses = []
    for step in range(steps):
        try:
            result = te_loss(model, frames, prompt, sched, derive_seed(seed, f"stage2/{step}"))
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"stage 2 diverged at step {step}: {exc}") from exc
        _sgd_step(model, result.grads, lr)
        losses.append(result.value)
    return TrainResult(model=model, losses=losses)


def edit_moment(
    model: DenoiserModel,
    req: EditRequest,
    sched: NoiseSchedule,
    codec_mode: str = "identity",
    literal_inversion: bool = False,
) -> FrameSequence:
    """Produce the edit-prompt version of a moment.

    The moment is encoded, inverted to its noisy counterpart under the
    source prompt, then re-sampled under the edit prompt. Output frame
    count and dimensions always match the input. Deterministic for a
    fixed model and request.
    """
    if req.inversion_steps > sched.T or req.sampling_steps > sched.T:
        raise ValueError(f"step counts must not exceed the schedule's {sched.T} timesteps")
    p_source = model.encode_prompt(req.source_prompt)
    p_edit = model.encode_prompt(req.edit_prompt)
    z0 = encode(req.moment, mode=codec_mode)
    z_noisy = ddim_invert(
        model, z0, p_source, sched, req.inversion_steps, literal_printed_form=literal_inversion
    )
    z_edited = ddim_sample(model, z_noisy, p_edit, sched, req.sampling_steps)
    edited = decode(z_edited, mode=codec_mode)
    for frame, source in zip(edited, req.moment):
        frame.index = source.index
    return edited
