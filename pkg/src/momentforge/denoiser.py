"""Toy noise-prediction network with separate spatial and temporal groups.

Each block applies per-frame spatial self-attention, cross-attention from
spatial positions to the prompt tokens, and then temporal attention across
the frame axis. Parameters partition exactly into three named groups --
``spatial.*``, ``temporal.*`` and ``token_table.*`` -- which is what the
two-stage editor's freeze contracts operate on. The temporal output
projection starts at zero so a freshly appended temporal layer passes
frames through untouched.

There is no pretrained text encoder at this scale: ordinary words map to
fixed embeddings seeded from a hash of the word, and only bracketed
instance tokens (``[v]``) live in the learnable token table.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

__all__ = [
    "DenoiserConfig",
    "DenoiserModel",
    "PromptEmbedding",
    "UnknownTokenError",
    "is_instance_token",
    "hashed_word_embedding",
]


class UnknownTokenError(KeyError):
    """An instance-style token that has never been trained into the model."""


def is_instance_token(word: str) -> bool:
    """Instance tokens are bracketed, e.g. ``[v]``; everything else is a plain word."""
    return len(word) > 2 and word.startswith("[") and word.endswith("]")


def hashed_word_embedding(word: str, dim: int) -> np.ndarray:
    """Deterministic fixed embedding for a plain word."""
    seed = int.from_bytes(hashlib.sha256(word.encode()).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.standard_normal(dim) / math.sqrt(dim)


@dataclass
class PromptEmbedding:
    """An encoded text prompt: its tokens and a snapshot of their vectors.

    `vector` is a detached (tokens, dim) snapshot taken at encoding time;
    the model re-resolves learnable tokens live on every forward pass so
    training updates flow into the instance embedding.
    """

    tokens: list[str]
    source_text: str
    vector: torch.Tensor

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("prompt must contain at least one token")
        if not torch.isfinite(self.vector).all():
            raise ValueError("prompt embedding contains non-finite values")


@dataclass
class DenoiserConfig:
    channels: int = 1
    dim: int = 16
    blocks: int = 1
    tokens: tuple[str, ...] = ("[v]",)
    timestep_scale: float = 1.0  # multiplies t before the sinusoidal embedding


def _sinusoid(position: float, dim: int, dtype) -> torch.Tensor:
    """Fixed transformer-style sinusoidal features of a scalar position."""
    half = (dim + 1) // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = position * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])[:dim]
    return torch.as_tensor(emb, dtype=dtype)


_POSITION_CACHE: dict[tuple[int, int, torch.dtype], torch.Tensor] = {}


def _position_table(length: int, dim: int, dtype) -> torch.Tensor:
    key = (length, dim, dtype)
    if key not in _POSITION_CACHE:
        half = (dim + 1) // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
        angles = np.arange(length)[:, None] * freqs[None, :]
        table = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)[:, :dim]
        _POSITION_CACHE[key] = torch.as_tensor(table, dtype=dtype)
    return _POSITION_CACHE[key]


def _attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


class DenoiserModel(nn.Module):
    """Noise predictor over (frames, channels, height, width) latents."""

    def __init__(self, config: DenoiserConfig | None = None, seed: int = 0, dtype=torch.float64):
        super().__init__()
        self.config = config or DenoiserConfig()
        self.dtype = dtype
        c, d = self.config.channels, self.config.dim
        gen = torch.Generator().manual_seed(seed)

        def mat(rows, cols, scale):
            return nn.Parameter(torch.randn(rows, cols, generator=gen, dtype=dtype) * scale)

        spatial: dict[str, nn.Parameter] = {
            "in_w": mat(c, d, 1.0 / math.sqrt(c)),
            "in_b": nn.Parameter(torch.zeros(d, dtype=dtype)),
            "time_w": mat(d, d, 1.0 / math.sqrt(d)),
            "out_w": mat(d, c, 1.0 / math.sqrt(d)),
            "out_b": nn.Parameter(torch.zeros(c, dtype=dtype)),
        }
        temporal: dict[str, nn.Parameter] = {}
        for b in range(self.config.blocks):
            for kind in ("self", "cross"):
                for name in ("q", "k", "v", "o"):
                    spatial[f"b{b}_{kind}_{name}"] = mat(d, d, 1.0 / math.sqrt(d))
            for name in ("q", "k", "v"):
                temporal[f"b{b}_{name}"] = mat(d, d, 1.0 / math.sqrt(d))
            temporal[f"b{b}_o"] = nn.Parameter(torch.zeros(d, d, dtype=dtype))

        self.spatial = nn.ParameterDict(spatial)
        self.temporal = nn.ParameterDict(temporal)
        self.token_table = nn.ParameterDict()
        for token in self.config.tokens:
            self.ensure_token(token)
        self._word_cache: dict[str, torch.Tensor] = {}

    # -- parameter groups ---------------------------------------------------

    def spatial_params(self) -> dict[str, torch.Tensor]:
        return {f"spatial.{k}": v for k, v in self.spatial.items()}

    def temporal_params(self) -> dict[str, torch.Tensor]:
        return {f"temporal.{k}": v for k, v in self.temporal.items()}

    def token_params(self) -> dict[str, torch.Tensor]:
        return {f"token_table.{k}": v for k, v in self.token_table.items()}

    def trainable_params(self) -> dict[str, torch.Tensor]:
        return {name: p for name, p in self.named_parameters() if p.requires_grad}

    def set_trainable(self, spatial: bool, temporal: bool, tokens: bool) -> None:
        """Flip which parameter groups receive gradients and updates."""
        for p in self.spatial.values():
            p.requires_grad_(spatial)
        for p in self.temporal.values():
            p.requires_grad_(temporal)
        for p in self.token_table.values():
            p.requires_grad_(tokens)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- text ----------------------------------------------------------------

    def ensure_token(self, token: str) -> None:
        """Create a learnable embedding for an instance token if absent.

        New tokens start at the same hash-seeded vector a plain word would
        get, so an untrained token behaves like an ordinary word.
        """
        if not is_instance_token(token):
            raise ValueError(f"{token!r} is not an instance token (expected bracketed form)")
        if token not in self.token_table:
            init = hashed_word_embedding(token, self.config.dim)
            self.token_table[token] = nn.Parameter(torch.as_tensor(init, dtype=self.dtype))

    def _word_vector(self, word: str) -> torch.Tensor:
        if word not in self._word_cache:
            self._word_cache[word] = torch.as_tensor(
                hashed_word_embedding(word, self.config.dim), dtype=self.dtype
            )
        return self._word_cache[word]

    def tokenize(self, text: str) -> list[str]:
        tokens = [w if is_instance_token(w) else w.lower() for w in text.split()]
        if not tokens:
            raise ValueError("prompt text is empty")
        return tokens

    def resolve_prompt_tokens(self, tokens: list[str]) -> torch.Tensor:
        """Live (tokens, dim) embedding matrix; learnable entries stay in the graph."""
        rows = []
        for tok in tokens:
            if is_instance_token(tok):
                if tok not in self.token_table:
                    raise UnknownTokenError(f"instance token {tok!r} is not in the token table")
                rows.append(self.token_table[tok])
            else:
                rows.append(self._word_vector(tok))
        return torch.stack(rows)

    def encode_prompt(self, text: str) -> PromptEmbedding:
        tokens = self.tokenize(text)
        with torch.no_grad():
            snapshot = self.resolve_prompt_tokens(tokens).clone()
        return PromptEmbedding(tokens=tokens, source_text=text, vector=snapshot)

    # -- forward ---------------------------------------------------------------

    def forward(self, z: torch.Tensor, t: int, prompt: PromptEmbedding) -> torch.Tensor:
        if z.ndim != 4:
            raise ValueError(f"latent must be 4-D (frames, channels, h, w), got {tuple(z.shape)}")
        f, c, h, w = z.shape
        if c != self.config.channels:
            raise ValueError(f"latent has {c} channels, model expects {self.config.channels}")
        d = self.config.dim
        sp = self.spatial

        x = z.reshape(f, c, h * w).transpose(1, 2).to(self.dtype)  # (F, S, d_in)
        x = x @ sp["in_w"] + sp["in_b"]
        x = x + _position_table(h * w, d, self.dtype)
        t_emb = _sinusoid(t * self.config.timestep_scale, d, self.dtype) @ sp["time_w"]
        x = x + t_emb

        p_tokens = self.resolve_prompt_tokens(prompt.tokens)  # (n_tok, d)
        frame_pos = _position_table(f, d, self.dtype)

        for b in range(self.config.blocks):
            x = x + _attend(
                x @ sp[f"b{b}_self_q"], x @ sp[f"b{b}_self_k"], x @ sp[f"b{b}_self_v"]
            ) @ sp[f"b{b}_self_o"]
            x = x + _attend(
                x @ sp[f"b{b}_cross_q"],
                p_tokens @ sp[f"b{b}_cross_k"],
                p_tokens @ sp[f"b{b}_cross_v"],
            ) @ sp[f"b{b}_cross_o"]
            y = x.transpose(0, 1)  # (S, F, d): attend over the frame axis
            keyed = y + frame_pos
            y = y + _attend(
                keyed @ self.temporal[f"b{b}_q"],
                keyed @ self.temporal[f"b{b}_k"],
                y @ self.temporal[f"b{b}_v"],
            ) @ self.temporal[f"b{b}_o"]
            x = y.transpose(0, 1)

        out = x @ sp["out_w"] + sp["out_b"]  # (F, S, C)
        return out.transpose(1, 2).reshape(f, c, h, w)
