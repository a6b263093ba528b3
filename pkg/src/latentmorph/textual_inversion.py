"""Per-endpoint conditioning embeddings optimized from a shared prompt."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Tuple

import torch

from .errors import NumericalError, ValidationError
from .schedule import LatentState

COMMON_PROMPT = "An image of {}"


@dataclass(frozen=True)
class EmbeddingVector:
    """A conditioning tensor (tokens x dim) treated as one optimizable vector."""

    values: torch.Tensor
    origin: str = "initial"

    def __post_init__(self):
        if self.origin not in ("initial", "optimized", "interpolated", "null"):
            raise ValidationError(f"unknown embedding origin {self.origin!r}")
        if not torch.isfinite(self.values).all():
            raise NumericalError("embedding has non-finite entries")

    @property
    def shape(self):
        return tuple(self.values.shape)


@dataclass(frozen=True)
class InversionConfig:
    learning_rate: float = 0.002
    steps: int = 2500
    seed: int = 0
    weight_decay: float = 0.01

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 0:
            raise ValidationError(f"steps must be >= 0, got {self.steps}")


def _values(e):
    return e.values if isinstance(e, EmbeddingVector) else e


def init_common_embedding(token: str, backend) -> Tuple[EmbeddingVector, EmbeddingVector]:
    """Encode ``"An image of {token}"`` twice, as independent copies."""
    if not token or not token.strip():
        raise ValidationError("token must be a non-empty string")
    encoded = backend.encode_text(COMMON_PROMPT.format(token.strip()))
    return EmbeddingVector(encoded.detach().clone()), EmbeddingVector(encoded.detach().clone())


def dpm_loss(x_0: LatentState, e, t: int, noise: torch.Tensor, model) -> torch.Tensor:
    """Squared error of the noise prediction at one ``(t, noise)`` draw.

    Differentiable in ``e`` (and in any attached adapter parameters). ``x_0`` may
    carry a leading batch dimension, in which case the per-sample losses are summed.
    """
    T = model.schedule.T
    if not 1 <= int(t) <= T:
        raise ValidationError(f"t must lie in [1, {T}], got {t}")
    x0 = x_0.tensor if isinstance(x_0, LatentState) else x_0
    if noise.shape != x0.shape:
        raise ValidationError("noise must be shaped like x_0")
    x_t = model.schedule.add_noise(x0, noise, int(t))
    pred = model.predict_noise(x_t, int(t), _values(e))
    if not torch.isfinite(pred).all():
        raise NumericalError(f"model produced non-finite noise prediction at t={t}")
    return ((pred - noise) ** 2).sum()


def probe_dpm_loss(x_0: LatentState, e, model, seed: int = 0, samples: int = 64) -> float:
    """Mean :func:`dpm_loss` over a fixed, seeded batch of ``(t, noise)`` draws."""
    gen = torch.Generator().manual_seed(seed)
    x0 = x_0.tensor if isinstance(x_0, LatentState) else x_0
    ts = torch.randint(1, model.schedule.T + 1, (samples,), generator=gen)
    total = 0.0
    with torch.no_grad():
        for t in ts.tolist():
            noise = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            total += float(dpm_loss(x0, e, t, noise, model))
    return total / samples


def step_loss(x0, e, t, noise, model, step: int, what: str) -> torch.Tensor:
    """:func:`dpm_loss` for optimizer iteration ``step``; failures carry the step index."""
    try:
        loss = dpm_loss(x0, e, t, noise, model)
    except NumericalError as exc:
        raise NumericalError(f"{what} failed: {exc}", step=step) from exc
    if not math.isfinite(loss.item()):
        raise NumericalError(f"{what} loss is not finite", step=step)
    return loss


def _draw(gen, model, shape, dtype):
    t = int(torch.randint(1, model.schedule.T + 1, (1,), generator=gen))
    return t, torch.randn(shape, generator=gen, dtype=dtype)


def optimize_embedding(x_0: LatentState, e_init: EmbeddingVector, config: InversionConfig, model) -> EmbeddingVector:
    """Minimize the expected DPM loss over ``e`` with the model frozen."""
    return optimize_embedding_pair(x_0, None, e_init, config, model)[0]


def optimize_embedding_pair(x0_a, x0_b, e_init, config: InversionConfig, model):
    """Invert both endpoints from one shared initialization.

    Each step draws one ``(t, noise)`` and updates both embeddings with it, the
    first endpoint then the second. ``x0_b=None`` inverts a single image.
    Returns a tuple with one :class:`EmbeddingVector` per image.
    """
    images = [x for x in (x0_a, x0_b) if x is not None]
    if config.steps == 0:
        return tuple(replace(e_init) for _ in images)
    before = model.parameter_checksum()
    params = [_values(e_init).detach().clone().requires_grad_(True) for _ in images]
    opts = [torch.optim.AdamW([p], lr=config.learning_rate, weight_decay=config.weight_decay) for p in params]
    gen = torch.Generator().manual_seed(config.seed)
    x0s = [x.tensor if isinstance(x, LatentState) else x for x in images]
    for step in range(config.steps):
        t, noise = _draw(gen, model, x0s[0].shape, x0s[0].dtype)
        for x0, p, opt in zip(x0s, params, opts):
            loss = step_loss(x0, p, t, noise, model, step, "textual inversion")
            opt.zero_grad()
            loss.backward()
            opt.step()
    if model.parameter_checksum() != before:
        raise RuntimeError("model weights changed during textual inversion")
    return tuple(EmbeddingVector(p.detach(), "optimized") for p in params)
