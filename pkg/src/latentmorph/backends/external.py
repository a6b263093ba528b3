"""Adapter over a pretrained latent text-to-image checkpoint in diffusers layout.

The checkpoint directory must contain ``unet``, ``vae``, ``text_encoder`` and
``tokenizer`` subfolders. Relative paths are resolved against the directory in
``$LATENTMORPH_CHECKPOINT_ROOT`` when set. Nothing is downloaded.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..config import CHECKPOINT_ENV
from ..errors import BackendCapabilityError, ValidationError
from ..schedule import LatentState, NoiseSchedule
from .base import TorchModuleBackend
from .toy import proxy_distance

REQUIRED_PARTS = ("unet", "vae", "text_encoder", "tokenizer")
ATTENTION_PROJECTIONS = ("to_q", "to_k", "to_v", "to_out.0")
DTYPES = {"float32": torch.float32, "float64": torch.float64, "float16": torch.float16, "bfloat16": torch.bfloat16}


def resolve_checkpoint(path) -> Path:
    p = Path(os.path.expanduser(str(path)))
    root = os.environ.get(CHECKPOINT_ENV)
    if not p.is_absolute() and root:
        p = Path(root) / p
    return p


def _schedule_from(folder: Path) -> NoiseSchedule:
    cfg_path = folder / "scheduler" / "scheduler_config.json"
    if not cfg_path.is_file():
        return NoiseSchedule.scaled_linear()
    cfg = json.loads(cfg_path.read_text())
    kind = cfg.get("beta_schedule", "scaled_linear")
    T = int(cfg.get("num_train_timesteps", 1000))
    start, end = float(cfg.get("beta_start", 0.00085)), float(cfg.get("beta_end", 0.012))
    if kind == "scaled_linear":
        return NoiseSchedule.scaled_linear(T, start, end)
    if kind == "linear":
        per_step = np.linspace(start, end, T)
        return NoiseSchedule(np.concatenate([[1.0], np.cumprod(1.0 - per_step)]))
    raise BackendCapabilityError(f"unsupported beta_schedule {kind!r} in {cfg_path}")


class ExternalCheckpointBackend(TorchModuleBackend):
    """Noise predictor, text encoder and VAE codec from a diffusers checkpoint.

    Timestep ``t`` here indexes ``betas`` with ``betas[0] = 1``; the network's own
    timestep index is ``t - 1``.
    """

    codec_tolerance = 0.15

    def __init__(self, path, dtype="float32", device="cpu", perceptual=None):
        super().__init__()
        folder = resolve_checkpoint(path)
        if not folder.exists():
            raise BackendCapabilityError(f"checkpoint not found: {folder}")
        missing = [part for part in REQUIRED_PARTS if not (folder / part).is_dir()]
        if missing:
            raise BackendCapabilityError(f"checkpoint {folder} is missing components: {', '.join(missing)}")
        if dtype not in DTYPES:
            raise ValidationError(f"unsupported dtype {dtype!r}")
        try:
            from diffusers import AutoencoderKL, UNet2DConditionModel
            from transformers import AutoTokenizer, CLIPTextModel
        except ImportError as exc:
            raise BackendCapabilityError(f"external backend needs the 'diffusers' extra: {exc}") from exc

        self.path = folder
        self.device = torch.device(device)
        torch_dtype = DTYPES[dtype]
        try:
            self.unet = UNet2DConditionModel.from_pretrained(folder, subfolder="unet", torch_dtype=torch_dtype)
            self.vae = AutoencoderKL.from_pretrained(folder, subfolder="vae", torch_dtype=torch_dtype)
            self.text_encoder = CLIPTextModel.from_pretrained(folder, subfolder="text_encoder", torch_dtype=torch_dtype)
            self.tokenizer = AutoTokenizer.from_pretrained(folder / "tokenizer")
        except (OSError, ValueError, KeyError, RuntimeError) as exc:
            raise BackendCapabilityError(f"incompatible checkpoint at {folder}: {exc}") from exc
        for m in (self.unet, self.vae, self.text_encoder):
            m.to(self.device).eval().requires_grad_(False)
        self.schedule = _schedule_from(folder)
        self._perceptual = perceptual
        self._vae_factor = 2 ** (len(self.vae.config.block_out_channels) - 1)
        self._scaling = float(getattr(self.vae.config, "scaling_factor", 0.18215))

    @property
    def dtype(self):
        return self.unet.dtype

    @property
    def latent_shape(self):
        s = self.unet.config.sample_size
        return (self.unet.config.in_channels, s, s)

    @property
    def image_shape(self):
        s = self.unet.config.sample_size * self._vae_factor
        return (self.vae.config.in_channels, s, s)

    @property
    def module(self):
        return self.unet

    def _linear_layers(self):
        layers = {}
        for name, mod in self.unet.named_modules():
            if isinstance(mod, torch.nn.Linear) and any(name.endswith("." + p) for p in ATTENTION_PROJECTIONS):
                layers[name] = mod
        return layers

    def predict_noise(self, x_t, t, e):
        single = x_t.dim() == len(self.latent_shape)
        x = (x_t.unsqueeze(0) if single else x_t).to(self.device, self.dtype)
        ctx = e.unsqueeze(0) if e.dim() == 2 else e
        ctx = ctx.to(self.device, self.dtype).expand(x.shape[0], -1, -1)
        step = torch.full((x.shape[0],), max(int(t) - 1, 0), device=self.device)
        out = self.unet(x, step, encoder_hidden_states=ctx).sample.to(x_t.dtype).cpu()
        return out[0] if single else out

    def encode_text(self, prompt):
        ids = self.tokenizer(
            prompt, padding="max_length", max_length=self.tokenizer.model_max_length, truncation=True, return_tensors="pt"
        ).input_ids.to(self.device)
        with torch.no_grad():
            return self.text_encoder(ids)[0][0].cpu()

    def encode_image(self, image):
        arr = np.asarray(image, dtype=np.float32)
        if arr.shape != self.image_shape:
            raise ValidationError(f"images must be {self.image_shape}, got {arr.shape}")
        x = torch.from_numpy(arr)[None].to(self.device, self.dtype)
        with torch.no_grad():
            z = self.vae.encode(x).latent_dist.mean * self._scaling
        return LatentState(z[0].float().cpu(), 0)

    def decode_latent(self, latent):
        z = latent.tensor[None].to(self.device, self.dtype) / self._scaling
        with torch.no_grad():
            img = self.vae.decode(z).sample[0]
        return np.clip(img.double().cpu().numpy(), -1.0, 1.0)

    def perceptual_distance(self, a, b):
        """The injected perceptual network if one was given, else the pooled-L1 proxy."""
        if self._perceptual is not None:
            return float(self._perceptual(a, b))
        return proxy_distance(a, b)


def external_checkpoint_adapter(path, dtype="float32", device="cpu", perceptual=None) -> ExternalCheckpointBackend:
    return ExternalCheckpointBackend(path, dtype=dtype, device=device, perceptual=perceptual)
