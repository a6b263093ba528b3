"""End-to-end runs, on-disk layout of a morph sequence, and contact sheets."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from ._validation import check_file, read_image, write_image
from .adaptation import write_npz
from .config import MANIFEST_NAME, RunConfig, RunManifest, sha256_file
from .errors import PhaseError, ValidationError
from .interpolation import MorphSequence
from .metrics import PathMetricsReport, endpoint_error, max_lpips, ppl_uniform, total_lpips
from .morpher import ImageMorpher

FRAMES_ARRAY = "frames.npy"
INPUTS_ARRAY = "inputs.npy"
ADAPTERS_ARCHIVE = "adapters.npz"
EMBEDDINGS_ARCHIVE = "embeddings.npz"
SHEET_NAME = "contact_sheet.png"
FAILURE_NAME = "failure.json"


def frame_name(index: int, alpha: float) -> str:
    return f"frame_{index:04}_{alpha:.6}.png"


def _persist_partial(out: Path, morpher: ImageMorpher, error: PhaseError):
    """Keep whatever the failed run produced, plus a record of the failure."""
    out.mkdir(parents=True, exist_ok=True)
    if hasattr(morpher, "embeddings_"):
        e0, e1 = morpher.embeddings_
        write_npz(out / EMBEDDINGS_ARCHIVE, {"e0": e0.values.numpy(), "e1": e1.values.numpy()})
    if getattr(morpher, "adapters_", None) is not None:
        morpher.adapters_.save(out / ADAPTERS_ARCHIVE)
    record = {"phase": error.phase, "error": str(error.cause), "type": type(error.cause).__name__}
    (out / FAILURE_NAME).write_text(json.dumps(record, indent=2) + "\n")


def sequence_report(frames, metric, originals=None, ppl=None) -> PathMetricsReport:
    return PathMetricsReport(
        total_lpips=total_lpips(frames, metric),
        max_lpips=max_lpips(frames, metric) if len(frames) >= 3 else None,
        ppl=ppl,
        endpoint_error=endpoint_error(frames, originals, metric) if originals is not None else None,
        fid=None,
        frame_count=len(frames),
    )


def run_pipeline(img_a, img_b, token: str, config: Optional[RunConfig] = None, backend=None, out=None):
    """Fit on the two images and return the perceptually-uniform sequence.

    With ``out`` set, frames, adapters, manifest and a contact sheet are written
    there; a failing phase leaves its partial artifacts and ``failure.json``.
    Returns ``(sequence, morpher)``.
    """
    config = (config or RunConfig()).replace(token=token).validate()
    morpher = ImageMorpher.from_config(config, backend)
    out = Path(out) if out is not None else None
    try:
        morpher.fit([img_a, img_b])
        seq = morpher.morph()
    except PhaseError as exc:
        if out is not None:
            _persist_partial(out, morpher, exc)
        raise
    if out is not None:
        write_run(out, seq, morpher, config, morpher.images_)
    return seq, morpher


def write_run(out, seq: MorphSequence, morpher: ImageMorpher, config: RunConfig, originals) -> RunManifest:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for stale in out.glob("frame_*.png"):
        stale.unlink()
    names = []
    for i, (frame, alpha) in enumerate(zip(seq.frames, seq.alphas)):
        names.append(frame_name(i, alpha))
        write_image(out / names[-1], frame)
    np.save(out / FRAMES_ARRAY, np.stack(seq.frames))
    np.save(out / INPUTS_ARRAY, np.stack([np.asarray(o, dtype=np.float64) for o in originals]))
    e0, e1 = morpher.embeddings_
    write_npz(out / EMBEDDINGS_ARCHIVE, {"e0": e0.values.numpy(), "e1": e1.values.numpy()})
    files = names + [FRAMES_ARRAY, INPUTS_ARRAY, EMBEDDINGS_ARCHIVE]
    if morpher.adapters_ is not None:
        morpher.adapters_.save(out / ADAPTERS_ARCHIVE)
        files.append(ADAPTERS_ARCHIVE)
    contact_sheet_from_frames(seq.frames, seq.alphas, config.sheet_columns).save(out / SHEET_NAME)
    files.append(SHEET_NAME)

    metric = morpher.metric_
    ppl = None
    if config.ppl_samples > 0:
        ppl = ppl_uniform(morpher.frames_, metric, samples=config.ppl_samples, seed=config.seed)[0]
    report = sequence_report(seq.frames, metric, originals, ppl)

    snapshot = config.to_dict()
    snapshot.pop("out")
    provenance = dict(seq.provenance)
    provenance.pop("params", None)
    provenance["inputs"] = {
        name: sha256_file(config_path) if config_path and Path(config_path).is_file() else None
        for name, config_path in (("img_a", config.img_a), ("img_b", config.img_b))
    }
    provenance["version"] = __version__
    manifest = RunManifest(
        config=snapshot,
        alphas=[float(a) for a in seq.alphas],
        hop_distances=[float(d) for d in seq.hop_distances],
        metrics=report.to_dict(),
        phase_seconds={k: round(v, 6) for k, v in morpher.phase_seconds_.items()},
        artifacts={name: sha256_file(out / name) for name in files},
        provenance=provenance,
    )
    manifest.write(out)
    return manifest


def load_sequence(directory):
    """Read a run directory back as ``(manifest, frames, originals)``; hashes are verified."""
    directory = Path(directory)
    if not (directory / MANIFEST_NAME).is_file():
        raise ValidationError(f"no {MANIFEST_NAME} in {directory}")
    manifest = RunManifest.read(directory)
    manifest.verify(directory)
    frames = np.load(directory / FRAMES_ARRAY)
    if len(frames) != len(manifest.alphas):
        raise ValidationError(f"manifest lists {len(manifest.alphas)} frames, {FRAMES_ARRAY} holds {len(frames)}")
    originals = np.load(directory / INPUTS_ARRAY) if (directory / INPUTS_ARRAY).is_file() else None
    return manifest, list(frames), originals


def contact_sheet_from_frames(frames: Sequence[np.ndarray], alphas: Sequence[float], columns: int = 8, tile: int = 96):
    """Row-major grid of frames, each labelled with its alpha."""
    from PIL import Image, ImageDraw

    from ._validation import to_uint8

    if len(frames) == 0:
        raise ValidationError("contact sheet needs at least one frame")
    if columns < 1:
        raise ValidationError("columns must be >= 1")
    cols = min(columns, len(frames))
    rows = math.ceil(len(frames) / cols)
    label_h = 14
    first = Image.fromarray(to_uint8(frames[0]))
    scale = max(1, tile // max(first.size))
    w, h = first.size[0] * scale, first.size[1] * scale
    sheet = Image.new("RGB", (cols * w, rows * (h + label_h)), "white")
    draw = ImageDraw.Draw(sheet)
    for i, (frame, alpha) in enumerate(zip(frames, alphas)):
        r, c = divmod(i, cols)
        img = Image.fromarray(to_uint8(frame)).convert("RGB").resize((w, h), Image.Resampling.NEAREST)
        x, y = c * w, r * (h + label_h)
        sheet.paste(img, (x, y))
        draw.text((x + 2, y + h + 1), f"a={alpha:.4f}", fill="black")
    return sheet


def contact_sheet(seq_dir, columns: int = 8):
    """Contact sheet of a run directory; alphas come from the manifest when present."""
    from PIL import Image

    from ._validation import from_uint8

    directory = Path(seq_dir)
    paths = sorted(directory.glob("frame_*.png")) if directory.is_dir() else []
    if not paths:
        raise ValidationError(f"no frames found in {seq_dir}")
    alphas = None
    if (directory / MANIFEST_NAME).is_file():
        alphas = RunManifest.read(directory).alphas
        if len(alphas) != len(paths):
            alphas = None
    if alphas is None:
        alphas = [float(p.stem.split("_", 2)[2]) for p in paths]
    frames = [from_uint8(np.asarray(Image.open(p))) for p in paths]
    return contact_sheet_from_frames(frames, alphas, columns)


def load_inputs(config: RunConfig, shape):
    """Both endpoint images; every missing path is reported at once."""
    missing = [f"image not found: {p or '<unset>'}" for p in (config.img_a, config.img_b) if not p or not Path(p).is_file()]
    if missing:
        raise ValidationError("\n  ".join(missing), missing)
    return read_image(config.img_a, shape), read_image(config.img_b, shape)
