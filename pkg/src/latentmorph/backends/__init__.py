import torch

from .base import BRANCHES, DenoiserBackend, TorchModuleBackend
from .toy import ToyBackend, load_or_train_toy, make_toy_images, proxy_distance, train_toy_denoiser
from ..errors import ValidationError


def load_backend(name, seed=0, epochs=None, checkpoint="", dtype="float32", device="cpu") -> DenoiserBackend:
    """Backend by name: ``"toy"`` (trained and cached on first use) or ``"external"``."""
    if name == "toy":
        from .toy import DEFAULT_EPOCHS

        backend = load_or_train_toy(seed=seed, epochs=DEFAULT_EPOCHS if epochs is None else epochs)
        return backend if dtype == "float32" else backend.astype(getattr(torch, dtype))
    if name == "external":
        from .external import external_checkpoint_adapter

        return external_checkpoint_adapter(checkpoint, dtype=dtype, device=device)
    raise ValidationError(f"unknown backend {name!r}; expected 'toy' or 'external'")


__all__ = [
    "BRANCHES",
    "DenoiserBackend",
    "TorchModuleBackend",
    "ToyBackend",
    "load_backend",
    "load_or_train_toy",
    "make_toy_images",
    "proxy_distance",
    "train_toy_denoiser",
]
