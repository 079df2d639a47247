"""Desk-scale latent diffusion machinery.

Noise schedule, frame/latent codec, forward noising, the denoising
training objective, and the deterministic DDIM sampler and its inversion.
Everything runs on small CPU tensors in double precision so gradient and
round-trip properties can be checked tightly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
import torch

from .frames import Frame, FrameSequence, check_sequence

if TYPE_CHECKING:
    from .denoiser import DenoiserModel, PromptEmbedding

__all__ = [
    "NoiseSchedule",
    "LossResult",
    "TrainingDivergedError",
    "encode",
    "decode",
    "forward_noise",
    "ldm_loss",
    "ddim_sample",
    "ddim_invert",
    "timestep_ladder",
]

# A latent is a dense (frames, channels, height, width) tensor; single
# images are represented with frames == 1.
LatentTensor = torch.Tensor


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or a diffusion trajectory stops being finite."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule: per-step betas plus derived cumulative products.

    Timesteps are 1-based: step t uses betas[t-1]. alpha_bar(0) is 1 by
    convention (the clean latent).
    """

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a nonempty 1-D array")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @classmethod
    def linear(cls, timesteps: int = 100, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        if timesteps < 1:
            raise ValueError("need at least one timestep")
        return cls(betas=np.linspace(beta_start, beta_end, timesteps))

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha(self, t: int) -> float:
        """Per-step alpha_t; alpha(0) == 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to step t; alpha_bar(0) == 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


# ---------------------------------------------------------------------------
# Frame <-> latent codec
# ---------------------------------------------------------------------------

def encode(frames: FrameSequence, mode: str = "identity") -> LatentTensor:
    """Encode frames into a latent tensor.

    `identity` keeps pixels as-is (decode is bit-exact); `pool2x` halves
    the spatial resolution with 2x2 average pooling to exercise shape
    plumbing (frame sides must be even).
    """
    check_sequence(frames)
    stacked = np.stack([f.pixels for f in frames])
    if stacked.ndim == 3:  # grayscale -> one channel
        stacked = stacked[:, None, :, :]
    else:  # (F, H, W, 3) -> (F, 3, H, W)
        stacked = stacked.transpose(0, 3, 1, 2)
    z = torch.from_numpy(np.ascontiguousarray(stacked)).to(torch.float64)
    if mode == "identity":
        return z
    if mode == "pool2x":
        f, c, h, w = z.shape
        if h % 2 or w % 2:
            raise ValueError(f"pool2x needs even frame sides, got {h}x{w}")
        return z.reshape(f, c, h // 2, 2, w // 2, 2).mean(dim=(3, 5))
    raise ValueError(f"unknown codec mode {mode!r}")


def decode(z: LatentTensor, mode: str = "identity", channels_last: bool | None = None) -> FrameSequence:
    """Decode a latent back into frames, clipping into the valid [0, 1] range."""
    if z.ndim != 4:
        raise ValueError(f"latent must be (frames, channels, height, width), got {tuple(z.shape)}")
    if mode == "pool2x":
        z = z.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
    elif mode != "identity":
        raise ValueError(f"unknown codec mode {mode!r}")
    arr = z.detach().cpu().numpy().clip(0.0, 1.0)
    frames = []
    for i in range(arr.shape[0]):
        pixels = arr[i, 0] if arr.shape[1] == 1 else arr[i].transpose(1, 2, 0)
        frames.append(Frame(pixels=pixels, index=i))
    return frames


# ---------------------------------------------------------------------------
# Forward process and training objective
# ---------------------------------------------------------------------------

def forward_noise(z0: LatentTensor, t: int, eps: LatentTensor, sched: NoiseSchedule) -> LatentTensor:
    """Noise a clean latent to step t: sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} does not match latent {tuple(z0.shape)}")
    sched._check_t(t)
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


@dataclass
class LossResult:
    """A scalar loss plus gradients for every trainable parameter."""

    value: float
    grads: dict[str, torch.Tensor]
    timestep: int = 0


def draw_noising(shape: tuple[int, ...], sched: NoiseSchedule, rng_seed: int, dtype=torch.float64):
    """Seeded (t, eps) draw shared by the training objectives."""
    gen = torch.Generator().manual_seed(rng_seed)
    t = int(torch.randint(1, sched.T + 1, (1,), generator=gen).item())
    eps = torch.randn(shape, generator=gen, dtype=dtype)
    return t, eps


def noise_prediction_loss(
    model: "DenoiserModel",
    z0: LatentTensor,
    p: "PromptEmbedding",
    sched: NoiseSchedule,
    rng_seed: int,
) -> tuple[torch.Tensor, int]:
    """Single-sample denoising objective as a live graph (for composition)."""
    t, eps = draw_noising(tuple(z0.shape), sched, rng_seed, dtype=z0.dtype)
    z_t = forward_noise(z0, t, eps, sched)
    pred = model(z_t, t, p)
    if pred.shape != z0.shape:
        raise ValueError(f"denoiser returned shape {tuple(pred.shape)}, expected {tuple(z0.shape)}")
    return torch.mean((eps - pred) ** 2), t


def extract_grads(loss: torch.Tensor, model) -> dict[str, torch.Tensor]:
    """Gradients of `loss` for the model's unfrozen parameters."""
    named = [
        (name, param)
        for name, param in getattr(model, "named_parameters", lambda: [])()
        if param.requires_grad
    ]
    if not named or not loss.requires_grad:
        return {}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(named, grads)
    }


def ldm_loss(
    model: "DenoiserModel",
    z0: LatentTensor,
    p: "PromptEmbedding",
    sched: NoiseSchedule,
    rng_seed: int,
) -> LossResult:
    """Denoising objective: mean squared error between drawn and predicted noise.

    The timestep and the noise are drawn from `rng_seed` alone, so a call
    is exactly reproducible. Gradients cover every parameter that is
    currently unfrozen; a non-finite loss raises.
    """
    loss, t = noise_prediction_loss(model, z0, p, sched, rng_seed)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite loss at timestep {t}")
    return LossResult(value=value, grads=extract_grads(loss, model), timestep=t)


# ---------------------------------------------------------------------------
# DDIM sampling and inversion
# ---------------------------------------------------------------------------

def timestep_ladder(T: int, steps: int) -> list[int]:
    """Strictly increasing subsequence of 1..T with `steps` entries.

    Endpoints are pinned: the ladder always finishes at T, and reaches
    down to 1 whenever steps > 1. Sampling walks it downward, inversion
    upward, so round trips see the same timesteps.
    """
    if not 0 <= steps <= T:
        raise ValueError(f"steps must be in [0, {T}], got {steps}")
    if steps == 0:
        return []
    if steps == 1:
        return [T]
    return [round(v) for v in np.linspace(1, T, steps)]


def _check_finite(z: torch.Tensor, t: int, op: str) -> None:
    if not torch.isfinite(z).all():
        raise TrainingDivergedError(f"{op} produced non-finite values at timestep {t}")


@torch.no_grad()
def ddim_sample(
    model: "DenoiserModel",
    zT: LatentTensor,
    p: "PromptEmbedding",
    sched: NoiseSchedule,
    steps: int,
) -> LatentTensor:
    """Deterministic denoising trajectory from a noisy latent to a clean estimate."""
    ladder = timestep_ladder(sched.T, steps)
    z = zT.clone()
    for i in range(len(ladder) - 1, -1, -1):
        t = ladder[i]
        t_prev = ladder[i - 1] if i > 0 else 0
        eps = model(z, t, p)
        ab_t, ab_prev = sched.alpha_bar(t), sched.alpha_bar(t_prev)
        x0 = (z - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        z = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
        _check_finite(z, t_prev, "sampling")
    return z


@torch.no_grad()
def ddim_invert(
    model: "DenoiserModel",
    z0: LatentTensor,
    p: "PromptEmbedding",
    sched: NoiseSchedule,
    steps: int,
    refine: int = 2,
    literal_printed_form: bool = False,
) -> LatentTensor:
    """Map a clean latent to its estimated noisy counterpart.

    Default: the sampling update run in reverse timestep order, written in
    cumulative alpha-bar terms, which makes ddim_sample an (approximate)
    inverse. Each step re-evaluates the noise prediction `refine` times at
    the provisional noisier latent (fixed-point refinement); this closes
    most of the round-trip gap that comes from evaluating the predictor on
    the cleaner latent. `literal_printed_form` switches to the
    per-step-alpha recursion kept for comparison; it does not round-trip.
    """
    if refine < 0:
        raise ValueError("refine must be nonnegative")
    if literal_printed_form:
        return _invert_literal(model, z0, p, sched, steps)
    ladder = timestep_ladder(sched.T, steps)
    z = z0.clone()
    t_prev = 0
    for t in ladder:
        ab_prev, ab_t = sched.alpha_bar(t_prev), sched.alpha_bar(t)
        eps = model(z, t, p)
        for _ in range(refine):
            x0 = (z - math.sqrt(1.0 - ab_prev) * eps) / math.sqrt(ab_prev)
            z_next = math.sqrt(ab_t) * x0 + math.sqrt(1.0 - ab_t) * eps
            eps = model(z_next, t, p)
        x0 = (z - math.sqrt(1.0 - ab_prev) * eps) / math.sqrt(ab_prev)
        z = math.sqrt(ab_t) * x0 + math.sqrt(1.0 - ab_t) * eps
        _check_finite(z, t, "inversion")
        t_prev = t
    return z


@torch.no_grad()
def _invert_literal(model, z0, p, sched, steps) -> LatentTensor:
    # Printed-form recursion over per-step alphas. The last valid index
    # of alpha_{t-1} caps the ladder at T-1.
    ladder = [t for t in timestep_ladder(sched.T, steps) if t <= sched.T - 1] or ([1] if steps else [])
    z = z0.clone()
    for t in ladder:
        eps = model(z, t, p)
        a_t, a_prev = sched.alpha(t), sched.alpha(t - 1)
        z = math.sqrt(a_t) * z + (math.sqrt(1.0 - a_t) - math.sqrt((1.0 - a_t) / a_prev)) * eps
        _check_finite(z, t, "inversion")
    return z
