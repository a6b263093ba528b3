"""Desk-scale test double: synthetic shapes, a tiny cross-attention denoiser,
a hash-based text encoder and a pooled-L1 perceptual proxy.

Latents are the images themselves (identity codec), 1x16x16 in [-1, 1].
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..errors import NumericalError, ValidationError
from ..schedule import LatentState, NoiseSchedule
from .base import TorchModuleBackend

logger = logging.getLogger(__name__)

IMAGE_SIZE = 16
TOKEN_COUNT = 8
EMBED_DIM = 64
CLASSES = ("circle", "square")
PROMPT_TEMPLATE = "An image of {}"
DEFAULT_EPOCHS = 60
CACHE_ENV = "LATENTMORPH_CACHE"


# --------------------------------------------------------------------- data


def _render(kind, cx, cy, size, intensity, supersample=4):
    n = IMAGE_SIZE * supersample
    coords = (np.arange(n) + 0.5) / supersample
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    if kind == "circle":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= size**2
    else:
        mask = (np.abs(xx - cx) <= size) & (np.abs(yy - cy) <= size)
    cover = mask.reshape(IMAGE_SIZE, supersample, IMAGE_SIZE, supersample).mean(axis=(1, 3))
    return -1.0 + cover * (intensity + 1.0)


def make_toy_images(n: int, seed: int, kinds: Optional[Sequence[str]] = None):
    """Return ``(images, labels)``: ``images`` is ``(n, 1, 16, 16)`` float32 in [-1, 1].

    Classes alternate unless ``kinds`` pins them. Shapes are anti-aliased discs
    and axis-aligned squares with random centre, size and brightness.
    """
    rng = np.random.default_rng(seed)
    images = np.empty((n, 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    labels = []
    for i in range(n):
        kind = kinds[i % len(kinds)] if kinds else CLASSES[i % 2]
        size = rng.uniform(2.5, 5.0)
        cx, cy = rng.uniform(size + 0.5, IMAGE_SIZE - size - 0.5, size=2)
        intensity = rng.uniform(0.4, 1.0)
        images[i, 0] = _render(kind, cx, cy, size, intensity)
        labels.append(kind)
    return images, labels


def proxy_distance(a, b) -> float:
    """Mean absolute difference after 2x2 average pooling, scaled to [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    if h % 2 or w % 2:
        raise ValidationError("proxy metric needs even image sides")

    def pool(x):
        return x.reshape(*x.shape[:-2], h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    return float(np.mean(np.abs(pool(a) - pool(b))) / 2.0)


# ------------------------------------------------------------------ encoder


def _word_vector(word: str) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(word.encode()).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(EMBED_DIM) / math.sqrt(EMBED_DIM)


def encode_prompt(prompt: str) -> torch.Tensor:
    """Seeded hash embedding: one vector per word, padded to ``TOKEN_COUNT``."""
    words = prompt.lower().split()[:TOKEN_COUNT]
    rows = [_word_vector(w) for w in words]
    rows += [_word_vector("<pad>")] * (TOKEN_COUNT - len(rows))
    out = np.stack(rows)
    # a little positional signal so word order matters
    out += 0.1 * np.sin(np.arange(TOKEN_COUNT)[:, None] * np.linspace(0.1, 1.0, EMBED_DIM)[None, :])
    return torch.tensor(out, dtype=torch.float32)


# -------------------------------------------------------------------- model


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = (t / T * 1000.0)[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class CrossAttention(nn.Module):
    def __init__(self, dim, context_dim, heads=4):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(context_dim, dim)
        self.to_v = nn.Linear(context_dim, dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, h, context):
        b, dim = h.shape
        d = dim // self.heads
        q = self.to_q(h).view(b, self.heads, 1, d)
        k = self.to_k(context).view(b, -1, self.heads, d).transpose(1, 2)
        v = self.to_v(context).view(b, -1, self.heads, d).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        return self.to_out((attn @ v).reshape(b, dim))


class Block(nn.Module):
    def __init__(self, dim, context_dim):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, context_dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))

    def forward(self, h, context):
        h = h + self.attn(self.norm1(h), context)
        return h + self.mlp(self.norm2(h))


class ToyDenoiser(nn.Module):
    def __init__(self, T, hidden=256, depth=2, time_dim=64):
        super().__init__()
        self.T = T
        self.time_dim = time_dim
        n = IMAGE_SIZE * IMAGE_SIZE
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.proj_in = nn.Linear(n, hidden)
        self.blocks = nn.ModuleList(Block(hidden, EMBED_DIM) for _ in range(depth))
        self.norm_out = nn.LayerNorm(hidden)
        self.proj_out = nn.Linear(hidden, n)

    def forward(self, x, t, context):
        b = x.shape[0]
        temb = self.time_mlp(timestep_embedding(t.to(x.dtype), self.time_dim, self.T))
        h = self.proj_in(x.reshape(b, -1)) + temb
        for block in self.blocks:
            h = block(h, context) + temb
        return self.proj_out(F.silu(self.norm_out(h))).reshape(x.shape)



# ------------------------------------------------------------------ backend


@dataclass(eq=False)
class ToyBackend(TorchModuleBackend):
    """Backend over a :class:`ToyDenoiser`. Read-only after construction."""

    module: ToyDenoiser
    schedule: NoiseSchedule
    metadata: dict = field(default_factory=dict)
    codec_tolerance: float = 0.0
    default_inversion_steps = 200

    def __post_init__(self):
        TorchModuleBackend.__init__(self)
        self.module.eval()
        for p in self.module.parameters():
            p.requires_grad_(False)

    @property
    def dtype(self):
        return next(self.module.parameters()).dtype

    @property
    def latent_shape(self):
        return (1, IMAGE_SIZE, IMAGE_SIZE)

    def _linear_layers(self):
        layers = {}
        for i, block in enumerate(self.module.blocks):
            for name in ("to_q", "to_k", "to_v", "to_out"):
                layers[f"blocks.{i}.attn.{name}"] = getattr(block.attn, name)
        return layers

    def predict_noise(self, x_t, t, e):
        single = x_t.dim() == len(self.latent_shape)
        x = x_t.unsqueeze(0) if single else x_t
        ctx = e.unsqueeze(0) if e.dim() == 2 else e
        ctx = ctx.to(x.dtype).expand(x.shape[0], -1, -1)
        tt = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(x.shape[0])
        out = self.module(x, tt, ctx)
        return out[0] if single else out

    def encode_text(self, prompt):
        return encode_prompt(prompt).to(self.dtype)

    def encode_image(self, image):
        arr = np.asarray(image, dtype=np.float64)
        if arr.shape == self.latent_shape[1:]:
            arr = arr[None]
        if arr.shape != self.latent_shape:
            raise ValidationError(f"toy images must be {self.latent_shape}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("image has non-finite pixels")
        return LatentState(torch.tensor(arr, dtype=self.dtype), 0)

    def decode_latent(self, latent):
        return np.clip(latent.tensor.detach().cpu().numpy().astype(np.float64), -1.0, 1.0)

    def perceptual_distance(self, a, b):
        return proxy_distance(a, b)

    def astype(self, dtype) -> "ToyBackend":
        """Copy with the denoiser cast to ``dtype`` (e.g. float64 for gradient checks)."""
        module = copy.deepcopy(self.module).to(dtype)
        return ToyBackend(module, self.schedule, dict(self.metadata))


def probe_loss(backend: ToyBackend, images, prompts, seed=1234, samples=256) -> float:
    """Mean DPM loss over a fixed batch of ``(t, noise)`` draws."""
    gen = torch.Generator().manual_seed(seed)
    x0 = torch.as_tensor(images, dtype=backend.dtype)
    idx = torch.randint(0, x0.shape[0], (samples,), generator=gen)
    t = torch.randint(1, backend.schedule.T + 1, (samples,), generator=gen)
    noise = torch.randn((samples,) + x0.shape[1:], generator=gen, dtype=x0.dtype)
    ctx = torch.stack([encode_prompt(prompts[i]) for i in idx.tolist()]).to(x0.dtype)
    b = torch.as_tensor(backend.schedule.betas, dtype=x0.dtype)[t].view(-1, 1, 1, 1)
    xt = b.sqrt() * x0[idx] + (1 - b).sqrt() * noise
    with torch.no_grad():
        pred = backend.module(xt, t.to(x0.dtype), ctx)
    return float(((pred - noise) ** 2).sum(dim=(1, 2, 3)).mean())


def train_toy_denoiser(
    seed: int = 0,
    epochs: int = DEFAULT_EPOCHS,
    n_images: int = 2048,
    batch_size: int = 128,
    lr: float = 2e-3,
    null_prob: float = 0.15,
    schedule: Optional[NoiseSchedule] = None,
) -> ToyBackend:
    """Train the toy denoiser from scratch on the synthetic shapes corpus.

    ``metadata`` records the seed, per-epoch probe losses and whether the model is
    untrained (``epochs == 0``). Raises :class:`NumericalError` if training diverges.
    """
    if epochs < 0:
        raise ValidationError("epochs must be >= 0")
    schedule = schedule or NoiseSchedule.scaled_linear()
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    module = ToyDenoiser(schedule.T)
    images, labels = make_toy_images(n_images, seed)
    prompts = [PROMPT_TEMPLATE.format(k) for k in labels]
    probe_imgs, probe_labels = make_toy_images(64, seed + 10_000)
    probe_prompts = [PROMPT_TEMPLATE.format(k) for k in probe_labels]

    backend = ToyBackend(module, schedule)
    initial = probe_loss(backend, probe_imgs, probe_prompts)
    history = [initial]
    if epochs:
        x_all = torch.tensor(images)
        cond = torch.stack([encode_prompt(p) for p in prompts])
        null = encode_prompt("")
        betas = torch.tensor(schedule.betas, dtype=torch.float32)
        opt = torch.optim.AdamW(module.parameters(), lr=lr, weight_decay=0.0)
        steps_per_epoch = n_images // batch_size
        sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=epochs * steps_per_epoch)
        start = time.perf_counter()
        for epoch in range(epochs):
            perm = torch.randperm(n_images, generator=gen)
            module.train().requires_grad_(True)
            for s in range(steps_per_epoch):
                idx = perm[s * batch_size : (s + 1) * batch_size]
                x0 = x_all[idx]
                ctx = cond[idx].clone()
                drop = torch.rand(len(idx), generator=gen) < null_prob
                ctx[drop] = null
                t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
                noise = torch.randn(x0.shape, generator=gen)
                b = betas[t].view(-1, 1, 1, 1)
                xt = b.sqrt() * x0 + (1 - b).sqrt() * noise
                loss = ((module(xt, t.float(), ctx) - noise) ** 2).sum(dim=(1, 2, 3)).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
            backend = ToyBackend(module, schedule)
            history.append(probe_loss(backend, probe_imgs, probe_prompts))
            logger.debug("epoch %d probe loss %.3f", epoch, history[-1])
            if not math.isfinite(history[-1]):
                raise NumericalError("toy training produced non-finite loss", step=epoch)
        logger.info("toy denoiser trained in %.1fs", time.perf_counter() - start)
        if history[-1] > initial:
            raise NumericalError(f"toy training diverged: probe loss {initial:.3f} -> {history[-1]:.3f}")
    backend.metadata = {
        "seed": seed,
        "epochs": epochs,
        "untrained": epochs == 0,
        "probe_loss_history": history,
    }
    return backend


def default_cache_dir() -> Path:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else Path.home() / ".cache" / "latentmorph"


def load_or_train_toy(seed=0, epochs=DEFAULT_EPOCHS, cache_dir=None) -> ToyBackend:
    """Train once per ``(seed, epochs)`` and cache weights under a seed-keyed directory."""
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    folder = cache / f"toy-seed{seed}-epochs{epochs}"
    weights, meta = folder / "denoiser.pt", folder / "metadata.json"
    schedule = NoiseSchedule.scaled_linear()
    if weights.exists() and meta.exists():
        module = ToyDenoiser(schedule.T)
        module.load_state_dict(torch.load(weights, weights_only=True))
        return ToyBackend(module, schedule, json.loads(meta.read_text()))
    backend = train_toy_denoiser(seed=seed, epochs=epochs, schedule=schedule)
    folder.mkdir(parents=True, exist_ok=True)
    tmp = folder / "denoiser.pt.tmp"
    torch.save(backend.module.state_dict(), tmp)
    tmp.replace(weights)
    meta.write_text(json.dumps(backend.metadata, indent=2))
    return backend
