"""Interpolation of embeddings and terminal latents, frame generation, and the
perceptually-uniform search over the interpolation parameter."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .adaptation import AdapterSet, make_predictor
from .errors import SearchError, ValidationError
from .guidance import GuidanceConfig, convex_cfg_schedule
from .schedule import LatentState, NoiseSchedule, denoise_trajectory
from .textual_inversion import EmbeddingVector

SLERP_LINEAR_THRESHOLD = 1e-4
ANTIPODAL_THRESHOLD = 1e-4
MAX_BISECTIONS = 40
ALPHA_QUANTUM = 1e-6


def _check_alpha(alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")


def lerp_embedding(e0: EmbeddingVector, e1: EmbeddingVector, alpha: float) -> EmbeddingVector:
    _check_alpha(alpha)
    if e0.shape != e1.shape:
        raise ValidationError(f"embedding shapes differ: {e0.shape} vs {e1.shape}")
    return EmbeddingVector((1.0 - alpha) * e0.values + alpha * e1.values, "interpolated")


def slerp_latent(x0_T: LatentState, x1_T: LatentState, alpha: float) -> LatentState:
    """Great-circle interpolation of two terminal latents.

    Falls back to linear interpolation when the angle is below 1e-4 rad, where
    the two agree to second order. Near-antipodal pairs have no unique great
    circle and are rejected.
    """
    _check_alpha(alpha)
    if x0_T.t != x1_T.t:
        raise ValidationError(f"endpoints at different timesteps: {x0_T.t} vs {x1_T.t}")
    a, b = x0_T.tensor, x1_T.tensor
    if a.shape != b.shape:
        raise ValidationError(f"latent shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = float(a.norm()), float(b.norm())
    if na == 0 or nb == 0:
        raise ValidationError("slerp is undefined for a zero latent")
    cos = float((a.double() * b.double()).sum()) / (na * nb)
    omega = math.acos(min(1.0, max(-1.0, cos)))
    if math.pi - omega < ANTIPODAL_THRESHOLD:
        raise ValidationError(f"endpoints are near-antipodal (omega={omega:.6f}); the slerp path is undefined")
    if omega < SLERP_LINEAR_THRESHOLD:
        return LatentState((1.0 - alpha) * a + alpha * b, x0_T.t)
    s = math.sin(omega)
    out = (math.sin((1.0 - alpha) * omega) / s) * a + (math.sin(alpha * omega) / s) * b
    return LatentState(out, x0_T.t)


@dataclass(frozen=True)
class MorphSpec:
    alpha_start: float = 0.0
    alpha_end: float = 1.0
    delta_lpips: float = 0.2
    eps_tol: float = 0.02
    max_frames: int = 64

    def __post_init__(self):
        errors = []
        if not 0.0 <= self.alpha_start < self.alpha_end <= 1.0:
            errors.append(f"need 0 <= alpha_start < alpha_end <= 1, got {self.alpha_start}, {self.alpha_end}")
        if not self.delta_lpips > 0:
            errors.append(f"delta_lpips must be > 0, got {self.delta_lpips}")
        if not 0 < self.eps_tol < self.delta_lpips:
            errors.append(f"eps_tol must lie in (0, delta_lpips), got {self.eps_tol}")
        if self.max_frames < 2:
            errors.append(f"max_frames must be >= 2, got {self.max_frames}")
        if errors:
            raise ValidationError("; ".join(errors), errors)


@dataclass
class MorphSequence:
    frames: List[np.ndarray]
    alphas: List[float]
    hop_distances: List[float]
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not len(self.frames) == len(self.alphas) == len(self.hop_distances) + 1:
            raise ValidationError("need |frames| == |alphas| == |hop_distances| + 1")
        if any(b <= a for a, b in zip(self.alphas[:-1], self.alphas[1:])):
            raise ValidationError("alphas must be strictly increasing")

    def __len__(self):
        return len(self.frames)

    def reversed(self) -> "MorphSequence":
        """Same path walked backwards, with alphas mirrored to stay increasing."""
        return MorphSequence(
            self.frames[::-1], [1.0 - a for a in self.alphas[::-1]], self.hop_distances[::-1], dict(self.provenance)
        )


class FrameCache:
    """Memoizes ``frame_fn`` on alpha rounded to a 1e-6 grid. Thread-safe."""

    def __init__(self, frame_fn: Callable[[float], np.ndarray], quantum: float = ALPHA_QUANTUM):
        self.frame_fn = frame_fn
        self.quantum = quantum
        self.frames: Dict[int, np.ndarray] = {}
        self.calls = 0
        self._lock = threading.Lock()

    def key(self, alpha: float) -> int:
        return int(round(alpha / self.quantum))

    def __call__(self, alpha: float) -> np.ndarray:
        k = self.key(alpha)
        with self._lock:
            if k not in self.frames:
                self.calls += 1
                self.frames[k] = self.frame_fn(alpha)
            return self.frames[k]


@dataclass
class SearchResult:
    alphas: List[float]
    frames: List[np.ndarray]
    hop_distances: List[float]


def perceptual_uniform_search(spec: MorphSpec, frame_fn, metric) -> SearchResult:
    """Pick alphas so consecutive frames sit ``delta_lpips`` apart under ``metric``.

    Each new alpha is found by bisecting between the current alpha and
    ``alpha_end`` until the distance from the current frame is within
    ``eps_tol`` of the target. Stops once the current frame is within
    ``delta_lpips`` of the end frame, which is then appended.
    """
    frame = frame_fn if isinstance(frame_fn, FrameCache) else FrameCache(frame_fn)
    delta, tol = spec.delta_lpips, spec.eps_tol
    cur, end = spec.alpha_start, spec.alpha_end
    alphas, hops = [cur], []

    while True:
        d_end = float(metric(frame(cur), frame(end)))
        if d_end <= delta:
            break
        if len(alphas) + 1 >= spec.max_frames:
            raise SearchError(f"exceeded max_frames={spec.max_frames} before reaching alpha_end", bracket=(cur, end))
        lo, hi = cur, end
        mid = 0.5 * (lo + hi)
        d = float(metric(frame(cur), frame(mid)))
        n = 0
        while abs(d - delta) > tol:
            if n == MAX_BISECTIONS:
                raise SearchError(
                    f"no alpha in [{lo:.9f}, {hi:.9f}] reached distance {delta}±{tol} from alpha={cur:.9f} "
                    f"after {MAX_BISECTIONS} bisections (last distance {d:.6f}); the metric may not be monotone",
                    bracket=(lo, hi),
                )
            if d > delta:
                hi = mid
            else:
                lo = mid
            mid = 0.5 * (lo + hi)
            d = float(metric(frame(cur), frame(mid)))
            n += 1
        if mid <= cur:
            raise SearchError(f"search stalled at alpha={cur}", bracket=(lo, hi))
        alphas.append(mid)
        hops.append(d)
        cur = mid

    alphas.append(end)
    hops.append(d_end)
    return SearchResult(alphas, [frame(a) for a in alphas], hops)


def perceptual_uniform_alphas(spec: MorphSpec, frame_fn, metric) -> List[float]:
    return perceptual_uniform_search(spec, frame_fn, metric).alphas


@dataclass
class FrameContext:
    """Everything needed to render a frame once both phases are done."""

    model: object
    e0: EmbeddingVector
    e1: EmbeddingVector
    x0_T: LatentState
    x1_T: LatentState
    adapters: Optional[AdapterSet]
    guidance: GuidanceConfig
    schedule: NoiseSchedule
    sigma_plan: Sequence[float]
    seed: int = 0


def generate_frame(alpha: float, context: FrameContext) -> np.ndarray:
    """Render the image at ``alpha``; deterministic given ``context.seed``."""
    e = lerp_embedding(context.e0, context.e1, alpha)
    x_T = slerp_latent(context.x0_T, context.x1_T, alpha)
    w = convex_cfg_schedule(alpha, context.guidance)
    predict = make_predictor(context.model, e, w, context.adapters)
    x_0 = denoise_trajectory(x_T, predict, context.schedule, list(context.sigma_plan), seed=context.seed)
    return context.model.decode_latent(x_0)


def uniform_path(frame_fn, n: int) -> List[np.ndarray]:
    """Frames at ``n`` evenly spaced alphas over [0, 1]."""
    if n < 2:
        raise ValidationError("a path needs at least 2 frames")
    return [frame_fn(float(a)) for a in np.linspace(0.0, 1.0, n)]
