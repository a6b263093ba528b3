"""``morph`` command line: run, invert, metrics, sheet.

Exit codes: 0 success, 2 invalid input or config, 3 backend capability,
4 numerical failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import importlib
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfg
from .errors import MorphError, ValidationError

RUN_FLAGS = {
    # flag: (config key, type[, help])
    "--backend": ("backend", str, "'toy' (default) or 'external'"),
    "--checkpoint": ("checkpoint", str, 'diffusers-layout checkpoint; relative paths resolve under $LATENTMORPH_CHECKPOINT_ROOT'),
    "--dtype": ("dtype", str, 'float32, float64, float16 or bfloat16'),
    "--img-a": ("img_a", str, 'first endpoint image'),
    "--img-b": ("img_b", str, 'second endpoint image'),
    "--token": ("token", str, "word in the shared starting prompt 'An image of {token}'"),
    "--out": ("out", str, 'output directory'),
    "--delta": ("delta", float, 'target perceptual distance between neighbouring frames'),
    "--tol": ("tol", float, 'allowed deviation of each hop from delta'),
    "--max-frames": ("max_frames", int, 'upper bound on the number of frames'),
    "--seed": ("seed", int),
    "--cfg-min": ("cfg_min", float, 'guidance scale at the endpoints'),
    "--cfg-max": ("cfg_max", float, 'guidance scale at alpha=0.5'),
    "--sigma-boost": ("sigma_boost", int, 'deterministic sampling steps before noise is injected; unset means fully deterministic'),
    "--steps": ("steps", int, 'sampling / inversion steps'),
    "--inv-steps": ("inv_steps", int, 'textual inversion optimizer steps (backend default when unset)'),
    "--inv-lr": ("inv_lr", float),
    "--rank": ("rank", str, "'auto' or a fixed adapter rank"),
    "--uncond-rank": ("uncond_rank", int),
    "--adapt-steps": ("adapt_steps", int),
    "--uncond-steps": ("uncond_steps", int),
    "--adapt-lr": ("adapt_lr", float),
    "--rppd-frames": ("rppd_frames", int, "frames used to measure the pair's perceptual spread"),
    "--refinements": ("inversion_refinements", int, 'fixed-point iterations per inversion step'),
    "--ppl-samples": ("ppl_samples", int, 'perceptual path length samples; 0 skips it'),
    "--toy-seed": ("toy_seed", int),
    "--toy-epochs": ("toy_epochs", int),
    "--columns": ("sheet_columns", int, 'contact sheet columns'),
}


def _add_run_flags(p, flags):
    for flag in flags:
        key, kind, *text = RUN_FLAGS[flag]
        p.add_argument(flag, dest=key, type=kind, default=None, help=text[0] if text else None)
    p.add_argument("--config", default=None, help="key = value file; CLI flags override it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morph", description="Perceptually-uniform diffusion image morphing.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="morph between two images")
    _add_run_flags(run, RUN_FLAGS)
    run.add_argument("--no-adaptation", dest="adaptation", action="store_const", const=False, default=None)
    run.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")

    inv = sub.add_parser("invert", help="embedding and latent inversion of one image")
    _add_run_flags(
        inv,
        ["--backend", "--checkpoint", "--dtype", "--token", "--out", "--seed", "--steps", "--inv-steps",
         "--inv-lr", "--refinements", "--toy-seed", "--toy-epochs"],
    )
    inv.add_argument("--img", required=True)

    met = sub.add_parser("metrics", help="path metrics of a finished run")
    met.add_argument("--seq", required=True)
    met.add_argument("--real", default=None, help="folder of real images for the Frechet distance")
    met.add_argument("--extractor", default=None, help="'module:function' mapping a list of images to features")
    met.add_argument("--json", default=None, help="also write the report here")

    sheet = sub.add_parser("sheet", help="contact sheet of a run's frames")
    sheet.add_argument("--seq", required=True)
    sheet.add_argument("--columns", type=int, default=8)
    sheet.add_argument("--output", default=None)
    return parser


def _resolve(args) -> cfg.RunConfig:
    overrides = {key: getattr(args, key) for key, *_ in RUN_FLAGS.values() if hasattr(args, key)}
    if hasattr(args, "adaptation"):
        overrides["adaptation"] = args.adaptation
    return cfg.resolve(args.config, overrides)


def _run(args) -> int:
    from .backends import load_backend
    from .pipeline import load_inputs, run_pipeline

    config = _resolve(args)
    if args.dump_config:
        sys.stdout.write(cfg.render(config))
        return 0
    errors = []
    try:
        config.validate()
    except ValidationError as exc:
        errors += exc.errors
    for p in (config.img_a, config.img_b):
        if not p or not Path(p).is_file():
            errors.append(f"image not found: {p or '<unset>'}")
    if errors:
        raise ValidationError("invalid run:\n  " + "\n  ".join(errors), errors)

    backend = load_backend(
        config.backend, seed=config.toy_seed, epochs=config.toy_epochs, checkpoint=config.checkpoint, dtype=config.dtype
    )
    img_a, img_b = load_inputs(config, backend.image_shape)
    seq, morpher = run_pipeline(img_a, img_b, config.token, config, backend=backend, out=config.out)
    print(f"{len(seq)} frames, rank {morpher.rank_} ({morpher.rank_source_}), written to {config.out}")
    return 0


def _invert(args) -> int:
    import torch

    from ._validation import read_image, write_image
    from .adaptation import make_predictor
    from .backends import load_backend
    from .schedule import denoise_trajectory, invert_trajectory
    from .textual_inversion import InversionConfig, init_common_embedding, optimize_embedding

    config = _resolve(args)
    config.validate()
    backend = load_backend(
        config.backend, seed=config.toy_seed, epochs=config.toy_epochs, checkpoint=config.checkpoint, dtype=config.dtype
    )
    image = read_image(args.img, backend.image_shape)
    x0 = backend.encode_image(image)
    e_init, _ = init_common_embedding(config.token, backend)
    steps = backend.default_inversion_steps if config.inv_steps is None else config.inv_steps
    e = optimize_embedding(x0, e_init, InversionConfig(config.inv_lr, steps, config.seed), backend)
    predict = make_predictor(backend, e, 1.0)
    x_T = invert_trajectory(x0, predict, backend.schedule, config.steps, fixed_point_iters=config.inversion_refinements)
    recon = denoise_trajectory(x_T, predict, backend.schedule, [0.0] * config.steps)

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "latent_T.npy", x_T.tensor.numpy())
    np.save(out / "embedding.npy", e.values.numpy())
    decoded = backend.decode_latent(recon)
    write_image(out / "reconstruction.png", decoded)
    rel = float(torch.linalg.norm(recon.tensor - x0.tensor) / torch.linalg.norm(x0.tensor))
    summary = {
        "image": str(args.img),
        "relative_l2": rel,
        "perceptual_error": backend.perceptual_distance(decoded, image),
        "config": {k: v for k, v in config.to_dict().items() if k != "out"},
    }
    (out / "inversion.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps({k: summary[k] for k in ("relative_l2", "perceptual_error")}))
    return 0


def _load_extractor(target):
    if target is None:
        return None
    module, _, name = target.partition(":")
    try:
        return getattr(importlib.import_module(module), name)
    except (ImportError, AttributeError) as exc:
        raise ValidationError(f"cannot load extractor {target!r}: {exc}") from exc


def metrics_report(seq_dir, real=None, extractor=None) -> dict:
    """Recompute the path metrics of a run directory from its stored frames."""
    from .backends.toy import proxy_distance
    from .metrics import fid_hook
    from .pipeline import load_sequence, sequence_report

    manifest, frames, originals = load_sequence(seq_dir)
    report = sequence_report(frames, proxy_distance, originals, manifest.metrics.get("ppl")).to_dict()
    recorded = float(np.sum(manifest.hop_distances))
    if abs(report["total_lpips"] - recorded) > 1e-6:
        raise ValidationError(
            f"stored frames give total {report['total_lpips']:.9f}, manifest hop sum is {recorded:.9f}"
        )
    if real is not None:
        report["fid"] = fid_hook(real, seq_dir, extractor)
        if report["fid"] is None:
            report["fid_status"] = "unavailable: no feature extractor supplied"
    return report


def _metrics(args) -> int:
    report = metrics_report(args.seq, args.real, _load_extractor(args.extractor))
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.json:
        Path(args.json).write_text(text + "\n")
    print(text)
    return 0


def _sheet(args) -> int:
    from .pipeline import SHEET_NAME, contact_sheet

    image = contact_sheet(args.seq, args.columns)
    target = Path(args.output) if args.output else Path(args.seq) / SHEET_NAME
    image.save(target)
    print(target)
    return 0


COMMANDS = {"run": _run, "invert": _invert, "metrics": _metrics, "sheet": _sheet}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except MorphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
