"""Model checkpoints and human-readable key-value configs.

Checkpoint layout: a 12-byte header (magic, format version, parameter
count), then one length-prefixed record per parameter: name length,
utf-8 name, rank, dims, float32 data. Parameter names carry their group
("spatial.", "temporal.", "token_table."), so the file alone is enough
to rebuild the groups. Hyperparameters travel separately in an INI-style
sidecar so they stay diffable by eye.
"""

from __future__ import annotations

import configparser
import struct
from pathlib import Path

import numpy as np
import torch

from .denoiser import DenoiserConfig, DenoiserModel
from .diffusion import NoiseSchedule

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "read_parameters",
    "save_model",
    "load_model",
    "write_kv_config",
    "read_kv_config",
]

CKPT_MAGIC = b"MFCK"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")


def save_checkpoint(model: DenoiserModel, path: str | Path) -> None:
    """Write every parameter as a (name, shape, float32 data) record."""
    params = dict(model.named_parameters())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(params)))
        for name, param in params.items():
            encoded = name.encode("utf-8")
            fh.write(_U32.pack(len(encoded)))
            fh.write(encoded)
            data = param.detach().cpu().numpy().astype("<f4")
            fh.write(_U32.pack(data.ndim))
            for dim in data.shape:
                fh.write(_U32.pack(dim))
            fh.write(data.tobytes())


def read_parameters(path: str | Path) -> dict[str, np.ndarray]:
    """Read raw checkpoint records without needing a model."""
    data = Path(path).read_bytes()
    if len(data) < _CKPT_HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, count = _CKPT_HEADER.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")

    offset = _CKPT_HEADER.size
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = _U32.unpack_from(data, offset)
        offset += _U32.size
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = _U32.unpack_from(data, offset)
        offset += _U32.size
        shape = []
        for _ in range(ndim):
            (dim,) = _U32.unpack_from(data, offset)
            offset += _U32.size
            shape.append(dim)
        numel = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(data, dtype="<f4", count=numel, offset=offset).reshape(shape)
        offset += 4 * numel
        params[name] = values
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return params


def load_checkpoint(path: str | Path, model: DenoiserModel) -> DenoiserModel:
    """Load checkpoint parameters into an existing model (strict match)."""
    stored = read_parameters(path)
    current = dict(model.named_parameters())
    for name in stored:
        if name.startswith("token_table.") and name not in current:
            model.ensure_token(name.split(".", 1)[1])
    current = dict(model.named_parameters())
    missing = sorted(set(current) - set(stored))
    extra = sorted(set(stored) - set(current))
    if missing or extra:
        raise ValueError(f"{path}: parameter mismatch (missing={missing}, extra={extra})")
    with torch.no_grad():
        for name, values in stored.items():
            param = current[name]
            if tuple(param.shape) != values.shape:
                raise ValueError(
                    f"{path}: {name} has shape {values.shape}, model expects {tuple(param.shape)}"
                )
            param.copy_(torch.as_tensor(values.astype(np.float64), dtype=param.dtype))
    return model


def save_model(model: DenoiserModel, sched: NoiseSchedule, path: str | Path) -> None:
    """Checkpoint plus an INI sidecar describing model and schedule."""
    path = Path(path)
    save_checkpoint(model, path)
    cfg = {
        "model": {
            "channels": model.config.channels,
            "dim": model.config.dim,
            "blocks": model.config.blocks,
            "tokens": " ".join(sorted(model.token_table.keys())),
        },
        "schedule": {
            "timesteps": sched.T,
            "beta_start": repr(float(sched.betas[0])),
            "beta_end": repr(float(sched.betas[-1])),
        },
    }
    write_kv_config(cfg, path.with_suffix(path.suffix + ".cfg"))


def load_model(path: str | Path, dtype=torch.float64) -> tuple[DenoiserModel, NoiseSchedule]:
    """Rebuild a model and its schedule from a checkpoint and its sidecar."""
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".cfg")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing checkpoint sidecar {sidecar}")
    cfg = read_kv_config(sidecar)
    model_cfg = cfg["model"]
    tokens = tuple(model_cfg.get("tokens", "").split())
    model = DenoiserModel(
        DenoiserConfig(
            channels=int(model_cfg["channels"]),
            dim=int(model_cfg["dim"]),
            blocks=int(model_cfg["blocks"]),
            tokens=tokens,
        ),
        dtype=dtype,
    )
    load_checkpoint(path, model)
    sched_cfg = cfg["schedule"]
    sched = NoiseSchedule.linear(
        timesteps=int(sched_cfg["timesteps"]),
        beta_start=float(sched_cfg["beta_start"]),
        beta_end=float(sched_cfg["beta_end"]),
    )
    return model, sched


def write_kv_config(sections: dict[str, dict], path: str | Path) -> None:
    parser = configparser.ConfigParser()
    for section, values in sections.items():
        parser[section] = {k: str(v) for k, v in values.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def read_kv_config(path: str | Path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise FileNotFoundError(path)
    return {section: dict(parser[section]) for section in parser.sections()}
