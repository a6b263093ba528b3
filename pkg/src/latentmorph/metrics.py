"""Directness, smoothness and realism diagnostics for morph sequences.

Every function takes the perceptual distance as a callback ``metric(a, b)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .errors import ValidationError

Metric = Callable[[np.ndarray, np.ndarray], float]


@dataclass(frozen=True)
class PathMetricsReport:
    total_lpips: float
    max_lpips: Optional[float]
    ppl: Optional[float]
    endpoint_error: Optional[Tuple[float, float]]
    fid: Optional[float]
    frame_count: int

    def to_dict(self):
        out = asdict(self)
        if self.endpoint_error is not None:
            out["endpoint_error"] = list(self.endpoint_error)
        return out


def _frames(seq):
    return seq.frames if hasattr(seq, "frames") else list(seq)


def hop_distances(seq, metric: Metric):
    frames = _frames(seq)
    return [float(metric(a, b)) for a, b in zip(frames[:-1], frames[1:])]


def total_lpips(seq, metric: Metric) -> float:
    """Sum of distances between consecutive frames."""
    frames = _frames(seq)
    if len(frames) < 2:
        raise ValidationError("total path length needs at least 2 frames")
    return math.fsum(hop_distances(frames, metric))


def max_lpips(seq, metric: Metric) -> float:
    """Largest distance from an interior frame to its nearer endpoint."""
    frames = _frames(seq)
    if len(frames) < 3:
        raise ValidationError("max distance to endpoints needs at least one interior frame")
    first, last = frames[0], frames[-1]
    return max(min(float(metric(f, first)), float(metric(f, last))) for f in frames[1:-1])


def ppl_uniform(generator, metric: Metric, epsilon: float = 1 / 50, samples: int = 200, seed: int = 0):
    """Monte-Carlo ``E_alpha[d(x(alpha), x(alpha + eps)) / eps**2]`` with ``alpha ~ U(0, 1)``.

    Draws with ``alpha + eps > 1`` are redrawn. Returns ``(mean, standard_error)``.
    """
    if not 0 < epsilon < 1:
        raise ValidationError(f"epsilon must lie in (0, 1), got {epsilon}")
    if samples < 1:
        raise ValidationError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    values = []
    while len(values) < samples:
        alpha = float(rng.uniform())
        if alpha + epsilon > 1:
            continue
        values.append(float(metric(generator(alpha), generator(alpha + epsilon))) / epsilon**2)
    values = np.asarray(values)
    stderr = float(values.std(ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    return float(values.mean()), stderr


def endpoint_error(seq, originals, metric: Metric) -> Tuple[float, float]:
    """``(mean, max)`` distance between the first/last frames and the input images."""
    frames = _frames(seq)
    if len(frames) < 2:
        raise ValidationError("sequence endpoints missing")
    d = [float(metric(frames[0], originals[0])), float(metric(frames[-1], originals[1]))]
    return (d[0] + d[1]) / 2.0, max(d)


def fit_gaussian(features) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValidationError("features must be a (n >= 2, dim) array")
    return x.mean(axis=0), np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    """``|mu1 - mu2|^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2})``."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    cov1, cov2 = np.atleast_2d(cov1), np.atleast_2d(cov2)
    covmean, _ = linalg.sqrtm(cov1 @ cov2, disp=False)
    if not np.isfinite(covmean).all():
        offset = np.eye(cov1.shape[0]) * 1e-6
        covmean = linalg.sqrtm((cov1 + offset) @ (cov2 + offset))
    covmean = np.real(covmean)
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(covmean))
    return max(value, 0.0)


def _load_dir(path):
    from PIL import Image

    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if not files:
        raise ValidationError(f"no images in {path}")
    return [np.asarray(Image.open(p), dtype=np.float64) / 127.5 - 1.0 for p in files]


def fid_hook(real_dir, generated_dir, extractor=None) -> Optional[float]:
    """Fréchet distance between feature fits of two image folders.

    ``extractor`` maps a list of images to an ``(n, dim)`` array. Without one
    the metric is unavailable and ``None`` is returned.
    """
    if extractor is None:
        return None
    real = extractor(_load_dir(real_dir))
    fake = extractor(_load_dir(generated_dir))
    return frechet_distance(*fit_gaussian(real), *fit_gaussian(fake))


def path_report(seq, metric: Metric, originals=None, generator=None, fid=None, ppl_samples=200, seed=0):
    frames = _frames(seq)
    return PathMetricsReport(
        total_lpips=total_lpips(frames, metric),
        max_lpips=max_lpips(frames, metric) if len(frames) >= 3 else None,
        ppl=ppl_uniform(generator, metric, samples=ppl_samples, seed=seed)[0] if generator is not None else None,
        endpoint_error=endpoint_error(frames, originals, metric) if originals is not None else None,
        fid=fid,
        frame_count=len(frames),
    )
