"""Classifier-free guidance and the sampling-time quality boosts."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import torch

from .errors import ValidationError


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance-scale range. ``schedule_kind`` is ``"constant"`` or ``"convex"``."""

    w_min: float = 1.5
    w_max: float = 2.0
    schedule_kind: str = "convex"

    def __post_init__(self):
        errors = []
        if not (math.isfinite(self.w_min) and math.isfinite(self.w_max)):
            errors.append("guidance scales must be finite")
        if self.w_min < 1:
            errors.append(f"w_min must be >= 1, got {self.w_min}")
        if self.w_max < self.w_min:
            errors.append(f"w_max ({self.w_max}) must be >= w_min ({self.w_min})")
        if self.schedule_kind not in ("constant", "convex"):
            errors.append(f"unknown schedule_kind {self.schedule_kind!r}")
        elif self.schedule_kind == "constant" and self.w_min != self.w_max:
            errors.append("constant guidance requires w_min == w_max")
        if errors:
            raise ValidationError("; ".join(errors), errors)

    @classmethod
    def constant(cls, w: float) -> "GuidanceConfig":
        return cls(w, w, "constant")

    def scale_at(self, alpha: float) -> float:
        if self.schedule_kind == "constant":
            if not 0.0 <= alpha <= 1.0:
                raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
            return self.w_max
        return convex_cfg_schedule(alpha, self)


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float) -> torch.Tensor:
    """``w * eps_cond + (1 - w) * eps_uncond``."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValidationError(
            f"conditional/unconditional shapes differ: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}"
        )
    if not math.isfinite(w):
        raise ValidationError(f"guidance scale must be finite, got {w}")
    if w == 1:
        return eps_cond
    return w * eps_cond + (1 - w) * eps_uncond


def convex_cfg_schedule(alpha: float, config: GuidanceConfig) -> float:
    """Guidance scale equal to ``w_min`` at the endpoints and ``w_max`` at alpha=0.5."""
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    return config.w_max - 2.0 * (config.w_max - config.w_min) * abs(alpha - 0.5)


@dataclass(frozen=True)
class SigmaBoostPlan:
    """Per-step stochasticity, in sampling order (first entry leaves t = T).

    Entries are fractions of the ancestral sigma; see
    :func:`latentmorph.schedule.denoise_trajectory`.
    """

    sigmas: Tuple[float, ...]
    deterministic_prefix: int

    def __post_init__(self):
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        if any(not 0.0 <= s <= 1.0 for s in self.sigmas):
            raise ValidationError("sigma plan entries must lie in [0, 1]")
        if not 0 <= self.deterministic_prefix <= len(self.sigmas):
            raise ValidationError("deterministic_prefix outside the plan")
        if any(self.sigmas[: self.deterministic_prefix]):
            raise ValidationError("deterministic prefix entries must be 0")

    def __len__(self):
        return len(self.sigmas)

    def __iter__(self):
        return iter(self.sigmas)

    def __getitem__(self, i):
        return self.sigmas[i]


def sigma_boost_plan(steps: int, deterministic_prefix: int) -> SigmaBoostPlan:
    """Deterministic for the first ``deterministic_prefix`` steps, fully stochastic after."""
    if steps < 0 or deterministic_prefix < 0:
        raise ValidationError("step counts must be non-negative")
    if deterministic_prefix > steps:
        raise ValidationError(f"prefix {deterministic_prefix} exceeds step count {steps}")
    sigmas = [0.0] * deterministic_prefix + [1.0] * (steps - deterministic_prefix)
    return SigmaBoostPlan(tuple(sigmas), deterministic_prefix)
