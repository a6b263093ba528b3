"""Estimator wrapping the whole morphing procedure.

``fit`` takes the two endpoint images and runs, in order: embedding inversion,
path-diversity rank selection, low-rank adaptation, and latent inversion.
``transform`` renders frames at given alphas; ``morph`` runs the
perceptually-uniform search and returns a :class:`MorphSequence`.
"""

from __future__ import annotations

import contextlib
import time
from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_alphas, check_image_pair
from .adaptation import AdapterSet, adapt_conditional, adapt_unconditional, heuristic_rank, make_predictor, rppd
from .backends.base import DenoiserBackend
from .errors import MorphError, PhaseError, ValidationError
from .guidance import GuidanceConfig, sigma_boost_plan
from .interpolation import (
    FrameCache,
    FrameContext,
    MorphSequence,
    MorphSpec,
    generate_frame,
    perceptual_uniform_search,
    uniform_path,
)
from .schedule import invert_trajectory
from .textual_inversion import InversionConfig, init_common_embedding, optimize_embedding_pair

PHASES = ("textual_inversion", "rank_selection", "adaptation", "latent_inversion", "sampling")


@contextlib.contextmanager
def _phase(name, timings):
    start = time.perf_counter()
    try:
        yield
    except PhaseError:
        raise
    except (MorphError, ValueError, RuntimeError, ArithmeticError) as exc:
        raise PhaseError(name, exc) from exc
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


class ImageMorpher(TransformerMixin, BaseEstimator):
    """Morph between two images with a text-conditioned latent diffusion backend.

    ``backend`` is a :class:`DenoiserBackend` or a name understood by
    :func:`latentmorph.backends.load_backend`. ``rank`` is ``"auto"`` to pick the
    conditional adapter rank from the baseline path diversity, or an integer.
    ``inv_steps=None`` takes the backend's default embedding-inversion budget.
    """

    def __init__(
        self,
        backend="toy",
        token="shape",
        inv_steps=None,
        inv_lr=0.002,
        rank="auto",
        uncond_rank=2,
        adapt_steps=150,
        uncond_steps=15,
        adapt_lr=0.001,
        rppd_frames=9,
        adaptation=True,
        cfg_min=1.5,
        cfg_max=2.0,
        steps=16,
        sigma_boost=None,
        inversion_refinements=3,
        delta=0.2,
        tol=0.02,
        max_frames=64,
        seed=0,
        toy_seed=0,
        toy_epochs=60,
        checkpoint="",
        dtype="float32",
    ):
        self.backend = backend
        self.token = token
        self.inv_steps = inv_steps
        self.inv_lr = inv_lr
        self.rank = rank
        self.uncond_rank = uncond_rank
        self.adapt_steps = adapt_steps
        self.uncond_steps = uncond_steps
        self.adapt_lr = adapt_lr
        self.rppd_frames = rppd_frames
        self.adaptation = adaptation
        self.cfg_min = cfg_min
        self.cfg_max = cfg_max
        self.steps = steps
        self.sigma_boost = sigma_boost
        self.inversion_refinements = inversion_refinements
        self.delta = delta
        self.tol = tol
        self.max_frames = max_frames
        self.seed = seed
        self.toy_seed = toy_seed
        self.toy_epochs = toy_epochs
        self.checkpoint = checkpoint
        self.dtype = dtype

    @classmethod
    def from_config(cls, config, backend=None) -> "ImageMorpher":
        names = cls._get_param_names()
        params = {k: v for k, v in config.to_dict().items() if k in names}
        if backend is not None:
            params["backend"] = backend
        return cls(**params)

    def _resolve_backend(self) -> DenoiserBackend:
        if isinstance(self.backend, DenoiserBackend):
            return self.backend
        from .backends import load_backend

        return load_backend(
            self.backend, seed=self.toy_seed, epochs=self.toy_epochs, checkpoint=self.checkpoint, dtype=self.dtype
        )

    def _guidance(self):
        return GuidanceConfig(w_min=self.cfg_min, w_max=self.cfg_max)

    def _sigma_plan(self):
        if self.sigma_boost is None:
            return [0.0] * self.steps
        return list(sigma_boost_plan(self.steps, self.sigma_boost))

    def _context(self, e0, e1, adapters, x_a, x_b):
        def invert(x0, e):
            predict = make_predictor(self.backend_, e, 1.0, adapters)
            return invert_trajectory(
                x0, predict, self.backend_.schedule, self.steps, fixed_point_iters=self.inversion_refinements
            )

        return FrameContext(
            model=self.backend_,
            e0=e0,
            e1=e1,
            x0_T=invert(x_a, e0),
            x1_T=invert(x_b, e1),
            adapters=adapters,
            guidance=self._guidance(),
            schedule=self.backend_.schedule,
            sigma_plan=self._sigma_plan(),
            seed=self.seed,
        )

    def _max_rank(self):
        return min(min(shape) // 4 for shape in self.backend_.adapter_targets().values())

    def fit(self, X, y=None):
        """``X`` holds the two endpoint images, each ``image_shape`` in [-1, 1]."""
        timings = {}
        self.phase_seconds_ = timings
        with _phase("setup", timings):
            backend = self._resolve_backend()
            self.backend_ = backend
            img_a, img_b = check_image_pair(X, backend.image_shape)
            self.images_ = (img_a, img_b)
            x_a, x_b = backend.encode_image(img_a), backend.encode_image(img_b)
            self._guidance()
            self.metric_ = backend.perceptual_distance
            torch.manual_seed(self.seed)

        with _phase("textual_inversion", timings):
            e_init, _ = init_common_embedding(self.token, backend)
            steps = backend.default_inversion_steps if self.inv_steps is None else self.inv_steps
            config = InversionConfig(learning_rate=self.inv_lr, steps=steps, seed=self.seed)
            e0, e1 = optimize_embedding_pair(x_a, x_b, e_init, config, backend)
            self.embeddings_ = (e0, e1)

        self.gamma_ = None
        self.rank_ = None
        self.rank_source_ = "disabled"
        if self.adaptation:
            with _phase("rank_selection", timings):
                if self.rank == "auto":
                    baseline = FrameCache(lambda a, ctx=self._context(e0, e1, None, x_a, x_b): generate_frame(a, ctx))
                    self.gamma_ = rppd(uniform_path(baseline, self.rppd_frames), self.metric_)
                    proposed = heuristic_rank(self.gamma_)
                    self.rank_ = min(proposed, self._max_rank())
                    self.rank_source_ = "heuristic" if self.rank_ == proposed else f"heuristic clamped from {proposed}"
                else:
                    self.rank_ = int(self.rank)
                    self.rank_source_ = "override"

            with _phase("adaptation", timings):
                cond = adapt_conditional(
                    backend, ((x_a, e0), (x_b, e1)), self.rank_, self.adapt_steps, self.adapt_lr, self.seed
                )
                uncond = adapt_unconditional(
                    backend, x_a, x_b, self.uncond_rank, self.uncond_steps, self.adapt_lr, self.seed
                )
                self.adapters_ = AdapterSet(cond, uncond, sorted(cond))
        else:
            self.adapters_ = None

        with _phase("latent_inversion", timings):
            self.context_ = self._context(e0, e1, self.adapters_, x_a, x_b)
            self.frames_ = FrameCache(lambda a: generate_frame(a, self.context_))
        return self

    def transform(self, X):
        """Render one frame per alpha in ``X``; returns ``(n, *image_shape)``."""
        check_is_fitted(self, "context_")
        alphas = check_alphas(X)
        with _phase("sampling", self.phase_seconds_):
            return np.stack([self.frames_(float(a)) for a in alphas])

    def morph(self) -> MorphSequence:
        """Frames spaced ``delta`` apart in the backend's perceptual metric."""
        check_is_fitted(self, "context_")
        with _phase("sampling", self.phase_seconds_):
            spec = MorphSpec(delta_lpips=self.delta, eps_tol=self.tol, max_frames=self.max_frames)
            result = perceptual_uniform_search(spec, self.frames_, self.metric_)
        return MorphSequence(result.frames, result.alphas, result.hop_distances, self.provenance())

    def uniform_frames(self, n: int):
        check_is_fitted(self, "context_")
        return uniform_path(self.frames_, n)

    def provenance(self) -> dict:
        check_is_fitted(self, "context_")
        params = self.get_params()
        if not isinstance(params["backend"], str):
            params["backend"] = type(params["backend"]).__name__
        return {
            "params": params,
            "seed": self.seed,
            "gamma": self.gamma_,
            "rank": self.rank_,
            "rank_source": self.rank_source_,
            "backend_checksum": self.backend_.parameter_checksum(),
        }
