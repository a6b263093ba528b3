"""Model-facing interface used by every algorithm module."""

from __future__ import annotations

import abc
import contextlib
import hashlib
from typing import Callable, Dict, Iterator, Mapping, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ValidationError
from ..schedule import LatentState, NoiseSchedule

BRANCHES = ("conditional", "unconditional")


class DenoiserBackend(abc.ABC):
    """A text-conditioned noise predictor plus its text encoder and latent codec.

    Implementations must be deterministic: the same inputs and attached adapters
    always give the same prediction.
    """

    schedule: NoiseSchedule
    #: decode(encode(image)) error bound, in the backend's perceptual metric
    codec_tolerance: float = 0.0
    #: embedding-inversion steps used when a run does not set them
    default_inversion_steps: int = 2500

    @property
    @abc.abstractmethod
    def latent_shape(self) -> Tuple[int, ...]: ...

    @property
    def image_shape(self) -> Tuple[int, ...]:
        """``(channels, height, width)`` of images in [-1, 1] accepted by :meth:`encode_image`."""
        return self.latent_shape

    @abc.abstractmethod
    def predict_noise(self, x_t: torch.Tensor, t: int, e: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def encode_text(self, prompt: str) -> torch.Tensor: ...

    @abc.abstractmethod
    def encode_image(self, image: np.ndarray) -> LatentState: ...

    @abc.abstractmethod
    def decode_latent(self, latent: LatentState) -> np.ndarray: ...

    @abc.abstractmethod
    def adapter_targets(self) -> Dict[str, Tuple[int, int]]:
        """Adaptable matrix ids mapped to ``(d_out, d_in)``."""

    @abc.abstractmethod
    def parameter_checksum(self) -> str: ...

    @abc.abstractmethod
    def attach_adapters(self, deltas: Mapping[str, object], branch: str):
        """Context manager routing predictions through ``theta + delta`` for one branch."""

    @abc.abstractmethod
    def perceptual_distance(self, a: np.ndarray, b: np.ndarray) -> float: ...

    def null_embedding(self) -> torch.Tensor:
        return self.encode_text("")

    @property
    def active_branch(self) -> Optional[str]:
        return None


class TorchModuleBackend(DenoiserBackend):
    """Shared plumbing for backends wrapping a ``torch.nn.Module`` denoiser.

    Low-rank deltas are applied with forward hooks on the targeted ``nn.Linear``
    layers, so base weights are never written to.
    """

    module: nn.Module

    def __init__(self):
        self._active_branch: Optional[str] = None

    def _linear_layers(self) -> Dict[str, nn.Linear]:
        raise NotImplementedError

    def adapter_targets(self):
        return {name: tuple(layer.weight.shape) for name, layer in self._linear_layers().items()}

    def parameter_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, tensor in sorted(self.module.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    @property
    def active_branch(self):
        return self._active_branch

    @contextlib.contextmanager
    def attach_adapters(self, deltas, branch) -> Iterator["TorchModuleBackend"]:
        if branch not in BRANCHES:
            raise ValidationError(f"branch must be one of {BRANCHES}, got {branch!r}")
        layers = self._linear_layers()
        unknown = sorted(set(deltas) - set(layers))
        if unknown:
            raise ValidationError(f"unknown adapter target ids: {unknown}")
        if self._active_branch is not None:
            raise RuntimeError(
                f"mixed adapter application: {branch!r} requested while {self._active_branch!r} is attached"
            )
        handles = [layers[name].register_forward_hook(_delta_hook(delta)) for name, delta in deltas.items()]
        self._active_branch = branch
        try:
            yield self
        finally:
            for handle in handles:
                handle.remove()
            self._active_branch = None


def _delta_hook(delta) -> Callable:
    def hook(module, inputs, output):
        x = inputs[0]
        down = delta.down.to(x.device, x.dtype)
        up = delta.up.to(x.device, x.dtype)
        return output + delta.scale * F.linear(F.linear(x, down), up)

    return hook
