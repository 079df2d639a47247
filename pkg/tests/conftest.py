import numpy as np
import pytest
import torch

from momentforge.denoiser import DenoiserConfig, DenoiserModel
from momentforge.diffusion import NoiseSchedule, forward_noise
from momentforge.frames import Frame

torch.set_num_threads(1)


def make_gradient_frame(size: int, direction: float, index: int = 0) -> Frame:
    """Synthetic linear-ramp frame; direction rotates the ramp."""
    rows = np.linspace(0.0, 1.0, size)[:, None]
    cols = np.linspace(0.0, 1.0, size)[None, :]
    px = np.clip(direction * rows + (1.0 - direction) * cols, 0.0, 1.0)
    return Frame(pixels=px, index=index)


def random_frame(rng: np.random.Generator, size: int = 8, index: int = 0) -> Frame:
    return Frame(pixels=rng.random((size, size)), index=index)


def moving_square_moment(n_frames: int = 4, size: int = 8) -> list[Frame]:
    frames = []
    for i in range(n_frames):
        px = np.full((size, size), 0.1)
        px[1 + i : 4 + i, 1 + i : 4 + i] = 0.9
        frames.append(Frame(pixels=px.clip(0.0, 1.0), index=i))
    return frames


class PerfectPredictor:
    """Inverts the forward noising exactly, so the loss is zero."""

    def __init__(self, z0: torch.Tensor, sched: NoiseSchedule):
        self.z0 = z0
        self.sched = sched

    def __call__(self, z_t, t, p):
        ab = self.sched.alpha_bar(t)
        return (z_t - np.sqrt(ab) * self.z0) / np.sqrt(1.0 - ab)


class ZeroPredictor:
    def __call__(self, z_t, t, p):
        return torch.zeros_like(z_t)


@pytest.fixture
def sched() -> NoiseSchedule:
    return NoiseSchedule.linear(timesteps=100)


@pytest.fixture
def tiny_model() -> DenoiserModel:
    """Under 200 parameters, for finite-difference gradient checks."""
    model = DenoiserModel(DenoiserConfig(channels=1, dim=3, blocks=1), seed=7)
    assert model.parameter_count() <= 200
    return model


@pytest.fixture
def toy_model() -> DenoiserModel:
    return DenoiserModel(DenoiserConfig(channels=1, dim=16, blocks=1), seed=3)


def finite_difference_grads(loss_fn, model: DenoiserModel, h: float = 1e-5) -> dict[str, torch.Tensor]:
    """Central finite differences of a seeded scalar loss over all unfrozen parameters."""
    grads = {}
    with torch.no_grad():
        for name, param in model.named_parameters():
            if not param.requires_grad:
                continue
            grad = torch.zeros_like(param)
            flat, gflat = param.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                up = loss_fn()
                flat[i] = original - h
                down = loss_fn()
                flat[i] = original
                gflat[i] = (up - down) / (2.0 * h)
            grads[name] = grad
    return grads


def relative_grad_error(analytic: dict[str, torch.Tensor], numeric: dict[str, torch.Tensor]) -> float:
    """L2 relative error over the concatenation of all gradient entries."""
    assert set(analytic) == set(numeric)
    a = torch.cat([analytic[k].reshape(-1) for k in sorted(analytic)])
    n = torch.cat([numeric[k].reshape(-1) for k in sorted(numeric)])
    return float(torch.linalg.vector_norm(a - n) / torch.linalg.vector_norm(n))
