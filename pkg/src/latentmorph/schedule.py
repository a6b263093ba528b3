"""Noise schedule, DDIM stepping and probability-flow ODE inversion.

Notation: ``betas[t]`` is the *cumulative* signal coefficient, i.e.
``q(x_t | x_0) = N(sqrt(betas[t]) * x_0, (1 - betas[t]) * I)``. Many codebases
call this quantity ``alphas_cumprod``; here ``betas[0] == 1`` is clean data and
``betas[T]`` is close to pure noise.

Latent tensors are ``torch.Tensor``; schedule coefficients are applied as
Python floats so the tensor dtype is preserved (float64 inputs stay float64).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import NumericalError, ValidationError

Predictor = Callable[["LatentState"], torch.Tensor]

DEFAULT_TRAIN_STEPS = 1000
DEFAULT_INFERENCE_STEPS = 16


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``betas[0..T]``."""

    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        if betas.ndim != 1 or betas.size < 2:
            raise ValidationError("betas must be a 1-D sequence of length T+1 >= 2")
        if not np.all(np.isfinite(betas)) or np.any(betas <= 0) or np.any(betas > 1):
            raise ValidationError("every beta must be finite and in (0, 1]")
        if np.any(np.diff(betas) >= 0):
            raise ValidationError("betas must be strictly decreasing in t")
        if not betas[0] > 0.999:
            raise ValidationError(f"betas[0] must be in (0.999, 1], got {betas[0]}")
        if not betas[-1] < 0.05:
            raise ValidationError(f"betas[T] must be in (0, 0.05), got {betas[-1]}")

    @property
    def T(self) -> int:
        return self.betas.size - 1

    @classmethod
    def scaled_linear(cls, T=DEFAULT_TRAIN_STEPS, beta_start=0.00085, beta_end=0.012):
        """The latent-diffusion default: per-step variances linear in sqrt space."""
        per_step = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T) ** 2
        cumulative = np.cumprod(1.0 - per_step)
        return cls(np.concatenate([[1.0], cumulative]))

    def grid(self, steps=DEFAULT_INFERENCE_STEPS) -> np.ndarray:
        """Uniformly subsampled timesteps ``0 = t_0 < ... < t_steps = T``."""
        if steps < 1 or steps > self.T:
            raise ValidationError(f"steps must be in [1, {self.T}], got {steps}")
        return np.round(np.linspace(0, self.T, steps + 1)).astype(int)

    def ddpm_sigma(self, t: int, t_prev: int) -> float:
        """Stochastic-sampler standard deviation for the jump ``t -> t_prev``.

        This is the largest "ancestral" noise level; it always satisfies
        ``sigma**2 <= 1 - betas[t_prev]``.
        """
        b_t, b_p = self.betas[t], self.betas[t_prev]
        value = (1.0 - b_p) / (1.0 - b_t) * (1.0 - b_t / b_p)
        return math.sqrt(max(value, 0.0))

    def add_noise(self, x0: torch.Tensor, noise: torch.Tensor, t: int) -> torch.Tensor:
        b = float(self.betas[t])
        return math.sqrt(b) * x0 + math.sqrt(1.0 - b) * noise


@dataclass(frozen=True)
class LatentState:
    """A latent tensor tagged with its diffusion timestep."""

    tensor: torch.Tensor
    t: int

    def __post_init__(self):
        if not torch.is_tensor(self.tensor):
            object.__setattr__(self, "tensor", torch.as_tensor(self.tensor))
        if self.t < 0:
            raise ValidationError(f"timestep must be non-negative, got {self.t}")
        if not torch.isfinite(self.tensor).all():
            raise NumericalError(f"latent at t={self.t} has non-finite entries")

    def check(self, schedule: NoiseSchedule) -> "LatentState":
        if self.t > schedule.T:
            raise ValidationError(f"timestep {self.t} outside schedule [0, {schedule.T}]")
        return self


def _check_eps(eps_hat, x, step=None):
    if eps_hat.shape != x.shape:
        raise ValidationError(f"noise prediction shape {tuple(eps_hat.shape)} != latent {tuple(x.shape)}")
    if not torch.isfinite(eps_hat).all():
        raise NumericalError("noise prediction has non-finite entries", step=step)


def ddim_reverse_step(
    x_t: LatentState,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    sigma_t: float = 0.0,
    noise: Optional[torch.Tensor] = None,
    t_prev: Optional[int] = None,
) -> LatentState:
    """One reverse (denoising) DDIM jump from ``x_t.t`` to ``t_prev``.

    ``t_prev`` defaults to ``t - 1``; any smaller timestep is allowed, which is how
    the subsampled inference grid is walked.
    """
    x_t.check(schedule)
    t = x_t.t
    t_prev = t - 1 if t_prev is None else t_prev
    if t < 1 or not 0 <= t_prev < t:
        raise ValidationError(f"reverse step needs 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    _check_eps(eps_hat, x_t.tensor)
    if not math.isfinite(sigma_t) or sigma_t < 0:
        raise ValidationError(f"sigma_t must be finite and >= 0, got {sigma_t}")
    if sigma_t > 0 and noise is None:
        raise ValidationError("noise is required when sigma_t > 0")

    b_t = float(schedule.betas[t])
    b_p = float(schedule.betas[t_prev])
    radicand = 1.0 - b_p - sigma_t**2
    if radicand < -1e-12:
        raise NumericalError(
            f"sigma_t={sigma_t} violates the schedule at t_prev={t_prev} (1 - beta - sigma^2 = {radicand})"
        )
    radicand = max(radicand, 0.0)

    x0_hat = (x_t.tensor - math.sqrt(1.0 - b_t) * eps_hat) / math.sqrt(b_t)
    out = math.sqrt(b_p) * x0_hat + math.sqrt(radicand) * eps_hat
    if sigma_t > 0:
        if noise.shape != x_t.tensor.shape:
            raise ValidationError("noise must match the latent shape")
        out = out + sigma_t * noise
    return LatentState(out, t_prev)


def ode_inversion_step(
    x_t: LatentState,
    eps_hat: torch.Tensor,
    schedule: NoiseSchedule,
    t_next: Optional[int] = None,
) -> LatentState:
    """One forward probability-flow ODE jump from ``x_t.t`` to ``t_next``.

    Uses the scaled variables ``x / sqrt(beta)`` and ``sqrt((1 - beta) / beta)``;
    with a fixed ``eps_hat`` this is the exact algebraic inverse of
    :func:`ddim_reverse_step` at ``sigma_t = 0``.
    """
    x_t.check(schedule)
    t = x_t.t
    t_next = t + 1 if t_next is None else t_next
    if t >= schedule.T or not t < t_next <= schedule.T:
        raise ValidationError(f"inversion step needs t < t_next <= T, got t={t}, t_next={t_next}")
    _check_eps(eps_hat, x_t.tensor)

    b_t = float(schedule.betas[t])
    b_n = float(schedule.betas[t_next])
    ratio = math.sqrt((1.0 - b_n) / b_n) - math.sqrt((1.0 - b_t) / b_t)
    scaled = x_t.tensor / math.sqrt(b_t) + ratio * eps_hat
    return LatentState(scaled * math.sqrt(b_n), t_next)


def _resolve_grid(schedule, timesteps, steps):
    if timesteps is None:
        return schedule.grid(steps)
    grid = np.asarray(timesteps, dtype=int)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValidationError("timesteps must be a strictly increasing sequence of length >= 2")
    if grid[0] < 0 or grid[-1] > schedule.T:
        raise ValidationError("timesteps outside schedule bounds")
    return grid


def _predict(predict, state, step):
    try:
        eps = predict(state)
    except NumericalError as exc:
        if exc.step is None:
            raise NumericalError(str(exc), step=step) from exc
        raise
    if not torch.isfinite(eps).all():
        raise NumericalError("guidance callback returned non-finite values", step=step)
    return eps


def denoise_trajectory(
    x_T: LatentState,
    predict: Predictor,
    schedule: NoiseSchedule,
    sigma_plan: Optional[Sequence[float]] = None,
    seed: int = 0,
    timesteps: Optional[Sequence[int]] = None,
) -> LatentState:
    """Integrate from ``x_T`` down to ``t = 0`` with DDIM steps.

    ``sigma_plan[k]`` is the stochasticity of the k-th step *in sampling order*
    (first entry = the step leaving ``T``), expressed as a fraction ``eta`` in
    ``[0, 1]`` of the ancestral sigma returned by :meth:`NoiseSchedule.ddpm_sigma`.
    All random draws come from a generator seeded with ``seed``.
    """
    steps = len(sigma_plan) if sigma_plan is not None else DEFAULT_INFERENCE_STEPS
    grid = _resolve_grid(schedule, timesteps, steps)
    if sigma_plan is None:
        sigma_plan = [0.0] * (grid.size - 1)
    if len(sigma_plan) != grid.size - 1:
        raise ValidationError(f"sigma_plan has {len(sigma_plan)} entries for {grid.size - 1} steps")
    if x_T.t != grid[-1]:
        raise ValidationError(f"x_T is at t={x_T.t}, trajectory starts at t={grid[-1]}")

    gen = torch.Generator().manual_seed(int(seed))
    state = x_T.check(schedule)
    for k, (t, t_prev) in enumerate(zip(grid[:0:-1], grid[-2::-1])):
        eta = float(sigma_plan[k])
        if not 0.0 <= eta <= 1.0:
            raise ValidationError(f"sigma_plan entries must lie in [0, 1], got {eta} at step {k}")
        eps = _predict(predict, state, k)
        sigma = eta * schedule.ddpm_sigma(int(t), int(t_prev))
        noise = None
        if sigma > 0:
            noise = torch.randn(state.tensor.shape, generator=gen, dtype=state.tensor.dtype)
        try:
            state = ddim_reverse_step(state, eps, schedule, sigma, noise, t_prev=int(t_prev))
        except NumericalError as exc:
            raise NumericalError(str(exc), step=k) from exc
    return state


def invert_trajectory(
    x_0: LatentState,
    predict: Predictor,
    schedule: NoiseSchedule,
    steps: int = DEFAULT_INFERENCE_STEPS,
    timesteps: Optional[Sequence[int]] = None,
    fixed_point_iters: int = 0,
) -> LatentState:
    """Map a clean latent to its terminal state by integrating the ODE forward.

    With ``fixed_point_iters = 0`` each step uses the prediction at the current
    point, ``eps(x_t, t)``. A positive value re-solves ``eps_hat = eps(x_next, t_next)``
    by fixed-point iteration, so every inversion step becomes the exact inverse of
    the deterministic reverse step that will later be taken from ``x_next``. That
    removes most of the roundtrip error at coarse step counts, at
    ``fixed_point_iters + 1`` predictor calls per step.
    """
    if fixed_point_iters < 0:
        raise ValidationError("fixed_point_iters must be >= 0")
    grid = _resolve_grid(schedule, timesteps, steps)
    if x_0.t != grid[0]:
        raise ValidationError(f"x_0 is at t={x_0.t}, inversion starts at t={grid[0]}")
    state = x_0.check(schedule)
    for k, t_next in enumerate(grid[1:]):
        eps = _predict(predict, state, k)
        for _ in range(fixed_point_iters):
            guess = ode_inversion_step(state, eps, schedule, t_next=int(t_next))
            eps = _predict(predict, guess, k)
        state = ode_inversion_step(state, eps, schedule, t_next=int(t_next))
    return state
