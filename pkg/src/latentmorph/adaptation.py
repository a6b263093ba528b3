"""Low-rank adaptation of the conditional and unconditional branches.

The conditional deltas are fitted to the two endpoints under their optimized
embeddings; a separate low-rank set is fitted under the null embedding so that
classifier-free guidance is not biased by the conditional fit.
"""

from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch

from .errors import DegeneratePairError, ValidationError
from .guidance import cfg_combine
from .schedule import LatentState
from .textual_inversion import EmbeddingVector, step_loss

Metric = Callable[[np.ndarray, np.ndarray], float]


@dataclass
class LowRankDelta:
    """``delta_W = scale * up @ down`` for one ``(d_out, d_in)`` weight matrix."""

    down: torch.Tensor
    up: torch.Tensor
    scale: float

    def __post_init__(self):
        r, d_in = self.down.shape
        d_out, r2 = self.up.shape
        if r != r2:
            raise ValidationError(f"factor ranks disagree: down has {r}, up has {r2}")
        check_rank_bound(r, d_out, d_in)

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def shape(self):
        return (self.up.shape[0], self.down.shape[1])

    def delta(self) -> torch.Tensor:
        return self.scale * (self.up @ self.down)

    @classmethod
    def zeros(cls, d_out, d_in, rank, generator=None, dtype=torch.float32) -> "LowRankDelta":
        """Gaussian ``down``, zero ``up``: the adapted layer starts equal to the base layer."""
        check_rank_bound(rank, d_out, d_in)
        down = torch.randn((rank, d_in), generator=generator, dtype=dtype) / math.sqrt(d_in)
        return cls(down, torch.zeros((d_out, rank), dtype=dtype), 1.0 / rank)


def check_rank_bound(rank, d_out, d_in):
    if rank < 1:
        raise ValidationError(f"rank must be >= 1, got {rank}")
    bound = min(d_out, d_in) // 4
    if rank > bound:
        raise ValidationError(f"rank {rank} exceeds the bottleneck bound min({d_out}, {d_in})/4 = {bound}")


@dataclass
class AdapterSet:
    conditional: Dict[str, LowRankDelta] = field(default_factory=dict)
    unconditional: Dict[str, LowRankDelta] = field(default_factory=dict)
    targets: List[str] = field(default_factory=list)

    def __post_init__(self):
        for name, group in (("conditional", self.conditional), ("unconditional", self.unconditional)):
            if group and sorted(group) != sorted(self.targets):
                raise ValidationError(f"{name} adapters must cover exactly the target list")

    def save(self, path) -> None:
        """Write one ``.npz`` archive keyed ``<branch>/<target>/{down,up}`` plus metadata."""
        arrays, meta = {}, {"targets": self.targets, "branches": {}}
        for branch in ("conditional", "unconditional"):
            group = getattr(self, branch)
            meta["branches"][branch] = {
                name: {"shape": list(d.shape), "rank": d.rank, "scale": d.scale} for name, d in group.items()
            }
            for name, d in group.items():
                arrays[f"{branch}/{name}/down"] = d.down.detach().cpu().numpy()
                arrays[f"{branch}/{name}/up"] = d.up.detach().cpu().numpy()
        arrays["__metadata__"] = np.array(json.dumps(meta, sort_keys=True))
        write_npz(path, arrays)

    @classmethod
    def load(cls, path) -> "AdapterSet":
        with np.load(path) as data:
            meta = json.loads(str(data["__metadata__"]))
            groups = {}
            for branch, entries in meta["branches"].items():
                groups[branch] = {
                    name: LowRankDelta(
                        torch.from_numpy(data[f"{branch}/{name}/down"]),
                        torch.from_numpy(data[f"{branch}/{name}/up"]),
                        info["scale"],
                    )
                    for name, info in entries.items()
                }
        return cls(groups.get("conditional", {}), groups.get("unconditional", {}), meta["targets"])


def write_npz(path, arrays: Mapping[str, np.ndarray]) -> None:
    """``np.savez`` layout with fixed entry timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


@dataclass(frozen=True)
class RankPolicy:
    gamma: float
    override: Optional[int] = None

    @property
    def selected_rank(self) -> int:
        return self.override if self.override is not None else heuristic_rank(self.gamma)


def rppd(path: Sequence[np.ndarray], metric: Metric) -> float:
    """Relative perceptual path diversity of a uniformly sampled path.

    Mean consecutive distance divided by the endpoint distance; 1/(N-1) for a
    path that is straight in the metric, larger the more it wanders.
    """
    n = len(path)
    if n < 3:
        raise ValidationError(f"rPPD needs at least 3 frames, got {n}")
    endpoint = float(metric(path[0], path[-1]))
    if endpoint <= 0:
        raise DegeneratePairError("endpoint images are perceptually identical; rPPD is undefined")
    hops = sum(float(metric(a, b)) for a, b in zip(path[:-1], path[1:]))
    return hops / ((n - 1) * endpoint)


def heuristic_rank(gamma: float) -> int:
    """``2 ** max(0, floor(18 * gamma - 6))``."""
    if not gamma >= 0:
        raise ValidationError(f"gamma must be >= 0, got {gamma}")
    return 2 ** max(0, math.floor(18 * gamma - 6))


def _init_group(model, rank, seed, targets):
    all_targets = model.adapter_targets()
    targets = list(all_targets) if targets is None else list(targets)
    unknown = sorted(set(targets) - set(all_targets))
    if unknown:
        raise ValidationError(f"unknown adapter target ids: {unknown}")
    gen = torch.Generator().manual_seed(seed)
    dtype = getattr(model, "dtype", torch.float32)
    return {name: LowRankDelta.zeros(*all_targets[name], rank, gen, dtype) for name in targets}


def _fit(model, group, branch, images, embeddings, steps, lr, seed):
    before = model.parameter_checksum()
    params = []
    for d in group.values():
        d.down.requires_grad_(True)
        d.up.requires_grad_(True)
        params += [d.down, d.up]
    opt = torch.optim.Adam(params, lr=lr)
    gen = torch.Generator().manual_seed(seed + 1)
    x0s = [x.tensor if isinstance(x, LatentState) else x for x in images]
    with model.attach_adapters(group, branch):
        for step in range(steps):
            t = int(torch.randint(1, model.schedule.T + 1, (1,), generator=gen))
            noise = torch.randn(x0s[0].shape, generator=gen, dtype=x0s[0].dtype)
            loss = sum(step_loss(x0, e, t, noise, model, step, f"{branch} adaptation") for x0, e in zip(x0s, embeddings))
            opt.zero_grad()
            loss.backward()
            opt.step()
    for d in group.values():
        d.down = d.down.detach()
        d.up = d.up.detach()
    if model.parameter_checksum() != before:
        raise RuntimeError("base weights changed during adaptation")
    return group


def adapt_conditional(model, pair, rank, steps=150, lr=1e-3, seed=0, targets=None) -> Dict[str, LowRankDelta]:
    """Fit rank-``rank`` deltas to both endpoints under their own embeddings.

    ``pair`` is ``((x0_a, e_a), (x0_b, e_b))``. Returns target id -> delta.
    """
    (xa, ea), (xb, eb) = pair
    group = _init_group(model, rank, seed, targets)
    return _fit(model, group, "conditional", [xa, xb], [ea, eb], steps, lr, seed)


def adapt_unconditional(model, x0_a, x0_b, rank=2, steps=15, lr=1e-3, seed=0, targets=None):
    """Fit a separate low-rank set to both endpoints under the null embedding."""
    null = EmbeddingVector(model.null_embedding(), "null")
    group = _init_group(model, rank, seed + 7919, targets)
    return _fit(model, group, "unconditional", [x0_a, x0_b], [null, null], steps, lr, seed + 7919)


def adapted_predict(x_t: LatentState, t: Optional[int], e, w: float, adapters: Optional[AdapterSet], model):
    """``w * eps_{theta+d_cond}(x_t, e) + (1 - w) * eps_{theta+d_uncond}(x_t, null)``.

    Each branch sees only its own deltas. ``adapters=None`` is the unadapted model.
    ``t`` defaults to ``x_t.t``.
    """
    t = x_t.t if t is None else t
    values = e.values if isinstance(e, EmbeddingVector) else e
    cond = adapters.conditional if adapters is not None else {}
    uncond = adapters.unconditional if adapters is not None else {}
    with torch.no_grad():
        with model.attach_adapters(cond, "conditional"):
            eps_c = model.predict_noise(x_t.tensor, t, values)
        if w == 1:
            return eps_c
        with model.attach_adapters(uncond, "unconditional"):
            eps_u = model.predict_noise(x_t.tensor, t, model.null_embedding())
    return cfg_combine(eps_c, eps_u, w)


def make_predictor(model, e, w: float, adapters: Optional[AdapterSet] = None):
    """Guidance callback ``LatentState -> eps`` for the trajectory runners."""

    def predict(state: LatentState) -> torch.Tensor:
        return adapted_predict(state, None, e, w, adapters, model)

    return predict
