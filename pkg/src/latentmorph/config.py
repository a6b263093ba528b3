"""Run configuration: a flat ``key = value`` file with CLI overrides.

Precedence is CLI flag > config file > built-in default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Union

from .errors import ValidationError

CHECKPOINT_ENV = "LATENTMORPH_CHECKPOINT_ROOT"
BACKENDS = ("toy", "external")
MANIFEST_NAME = "manifest.json"
TIMINGS_NAME = "timings.json"


@dataclass(frozen=True)
class RunConfig:
    backend: str = "toy"
    checkpoint: str = ""
    dtype: str = "float32"
    token: str = "shape"
    img_a: str = ""
    img_b: str = ""
    out: str = "morph_out"
    # phase 1
    inv_steps: Optional[int] = None
    inv_lr: float = 0.002
    # phase 2
    rank: str = "auto"
    uncond_rank: int = 2
    adapt_steps: int = 150
    uncond_steps: int = 15
    adapt_lr: float = 0.001
    rppd_frames: int = 9
    adaptation: bool = True
    # sampling
    cfg_min: float = 1.5
    cfg_max: float = 2.0
    steps: int = 16
    sigma_boost: Optional[int] = None
    inversion_refinements: int = 3
    delta: float = 0.2
    tol: float = 0.02
    max_frames: int = 64
    ppl_samples: int = 50
    seed: int = 0
    toy_seed: int = 0
    toy_epochs: int = 60
    sheet_columns: int = 8

    def validate(self) -> "RunConfig":
        """Collect every violation, then raise once."""
        errors = []
        if self.backend not in BACKENDS:
            errors.append(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.dtype not in ("float32", "float64", "float16", "bfloat16"):
            errors.append(f"unsupported dtype {self.dtype!r}")
        if not self.token.strip():
            errors.append("token must be non-empty")
        if self.rank != "auto":
            try:
                if int(self.rank) < 1:
                    errors.append(f"rank must be 'auto' or a positive integer, got {self.rank!r}")
            except ValueError:
                errors.append(f"rank must be 'auto' or a positive integer, got {self.rank!r}")
        if self.inv_steps is not None and self.inv_steps < 0:
            errors.append(f"inv_steps must be >= 0, got {self.inv_steps}")
        for name in ("adapt_steps", "uncond_steps", "inversion_refinements", "toy_seed", "toy_epochs", "ppl_samples"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("inv_lr", "adapt_lr", "delta", "tol"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be > 0, got {getattr(self, name)}")
        if self.uncond_rank < 1:
            errors.append(f"uncond_rank must be >= 1, got {self.uncond_rank}")
        if self.rppd_frames < 3:
            errors.append(f"rppd_frames must be >= 3, got {self.rppd_frames}")
        if self.steps < 1:
            errors.append(f"steps must be >= 1, got {self.steps}")
        if self.sigma_boost is not None and not 0 <= self.sigma_boost <= self.steps:
            errors.append(f"sigma_boost must lie in [0, steps={self.steps}], got {self.sigma_boost}")
        if self.cfg_min > self.cfg_max:
            errors.append(f"cfg_min {self.cfg_min} exceeds cfg_max {self.cfg_max}")
        if self.cfg_min < 1:
            errors.append(f"cfg_min must be >= 1, got {self.cfg_min}")
        if self.delta > 0 and not self.tol < self.delta:
            errors.append(f"tol {self.tol} must be smaller than delta {self.delta}")
        if self.max_frames < 2:
            errors.append(f"max_frames must be >= 2, got {self.max_frames}")
        if self.sheet_columns < 1:
            errors.append(f"sheet_columns must be >= 1, got {self.sheet_columns}")
        if errors:
            raise ValidationError("invalid configuration:\n  " + "\n  ".join(errors), errors)
        return self

    @property
    def rank_override(self) -> Optional[int]:
        return None if self.rank == "auto" else int(self.rank)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        return hashlib.sha256(render(self).encode()).hexdigest()


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, text: str):
    kind = _TYPES[key]
    text = text.strip()
    if kind == "bool":
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {text!r}")
        return text.lower() in ("true", "1", "yes")
    if kind == "int":
        return int(text)
    if kind == "Optional[int]":
        return None if text.lower() in ("none", "") else int(text)
    if kind == "float":
        return float(text)
    return text


def render(config: RunConfig) -> str:
    return "".join(f"{f.name} = {_format(getattr(config, f.name))}\n" for f in fields(RunConfig))


def parse(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Read ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values, errors = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            errors.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _coerce(key, value)
        except ValueError as exc:
            errors.append(f"line {lineno}: {key}: {exc}")
    if errors:
        raise ValidationError("invalid configuration file:\n  " + "\n  ".join(errors), errors)
    return dataclasses.replace(base or RunConfig(), **values)


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file not found: {p}", [f"config file not found: {p}"])
    return parse(p.read_text())


def resolve(file: Optional[str], overrides: Dict) -> RunConfig:
    """Defaults, then the file, then every override that is not ``None``."""
    config = load(file) if file else RunConfig()
    set_values = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(config, **set_values)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    config: Dict
    alphas: List[float]
    hop_distances: List[float]
    metrics: Dict
    phase_seconds: Dict[str, float]
    artifacts: Dict[str, str]
    provenance: Dict = field(default_factory=dict)

    def to_json(self) -> str:
        """Everything except wall times, so identical runs give identical bytes."""
        data = dataclasses.asdict(self)
        data.pop("phase_seconds")
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    def write(self, directory) -> None:
        """``manifest.json`` plus the wall times in ``timings.json`` beside it."""
        directory = Path(directory)
        (directory / MANIFEST_NAME).write_text(self.to_json())
        (directory / TIMINGS_NAME).write_text(json.dumps(self.phase_seconds, indent=2) + "\n")

    @classmethod
    def read(cls, directory) -> "RunManifest":
        directory = Path(directory)
        path = directory / MANIFEST_NAME
        try:
            data = json.loads(path.read_text())
            timings = directory / TIMINGS_NAME
            data["phase_seconds"] = json.loads(timings.read_text()) if timings.is_file() else {}
            manifest = cls(**data)
            manifest.alphas = [float(a) for a in manifest.alphas]
            manifest.hop_distances = [float(d) for d in manifest.hop_distances]
            return manifest
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as exc:
            raise ValidationError(f"manifest {path} is unreadable or corrupt: {exc}") from exc

    def verify(self, root) -> None:
        """Raise if any recorded artifact is missing or its hash changed."""
        problems = []
        root = Path(root)
        for name, digest in self.artifacts.items():
            p = root / name
            if not p.is_file():
                problems.append(f"missing artifact {name}")
            elif sha256_file(p) != digest:
                problems.append(f"hash mismatch for {name}")
        if len(self.hop_distances) != len(self.alphas) - 1:
            problems.append("hop_distances does not match alphas")
        if problems:
            raise ValidationError("manifest integrity check failed:\n  " + "\n  ".join(problems), problems)
