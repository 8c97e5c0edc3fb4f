"""Command-line interface: train, harmonize, eval, attnmap.

Exit codes: 0 success, 2 usage/config problems, 3 numeric failure. Heavy
imports stay inside ``main`` so ``HARMONY_THREADS`` can cap BLAS worker
threads before numpy initializes.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="harmonizer",
        description="Region-matching image harmonization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True, help="key = value config file")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None, help="output directory (default: config out_dir)")

    p_harm = sub.add_parser("harmonize", help="harmonize one composite image")
    p_harm.add_argument("--checkpoint", required=True)
    p_harm.add_argument("--composite", required=True, help="composite image (PNG)")
    p_harm.add_argument("--mask", required=True, help="foreground mask (PNG)")
    p_harm.add_argument("--out", required=True, help="output image path")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True, help="JSON-lines dataset manifest")
    p_eval.add_argument("--out", default=None, help="directory for JSON/CSV/figure reports")
    p_eval.add_argument("--quantize-metrics", action="store_true",
                        help="quantize to 8-bit before scoring")

    p_attn = sub.add_parser("attnmap", help="render attention heatmaps")
    p_attn.add_argument("--checkpoint", required=True)
    p_attn.add_argument("--composite", required=True)
    p_attn.add_argument("--mask", required=True)
    p_attn.add_argument("--out", required=True, help="output directory")
    p_attn.add_argument("--fg-pixel", default=None, metavar="Y,X",
                        help="also render the deep-fusion attention row for this pixel")

    p_synth = sub.add_parser("synth", help="write a synthetic dataset with a manifest")
    p_synth.add_argument("--out", required=True, help="dataset directory")
    p_synth.add_argument("--count", type=int, default=8)
    p_synth.add_argument("--size", type=int, default=64)
    p_synth.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    from .errors import (
        CheckpointError,
        ConfigError,
        DecodeError,
        EmptyPatchSetError,
        EmptyRegionError,
        EvaluationError,
        NonFiniteGradientError,
        ValidationError,
    )

    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "harmonize": cmd_harmonize,
        "eval": cmd_eval,
        "attnmap": cmd_attnmap,
        "synth": cmd_synth,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ValidationError, CheckpointError, DecodeError,
            EmptyRegionError, EmptyPatchSetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteGradientError, EvaluationError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    threads = os.environ.get("HARMONY_THREADS", "")
    if threads.isdigit() and int(threads) > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    sys.exit(main(sys.argv[1:]))


# ---------------------------------------------------------------------------
# shared helpers


def _load_model(checkpoint_path):
    from .checkpoint import load_checkpoint, restore_params
    from .config import RunConfig
    from .generator import Generator

    text, arrays = load_checkpoint(checkpoint_path)
    cfg = RunConfig.from_text(text)
    gen = Generator(cfg.to_generator_config())
    restore_params(gen.params, arrays)
    return gen, cfg


def _load_pair(composite_path, mask_path):
    from .data import load_image, load_mask
    from .errors import ValidationError

    composite = load_image(composite_path)
    mask = load_mask(mask_path)
    if composite.shape[:2] != mask.shape:
        raise ValidationError(
            f"composite {composite.shape[:2]} and mask {mask.shape} sizes differ"
        )
    return composite, mask


def _network_inputs(gen, composite, mask):
    from .data import bilinear_resize, nearest_resize, to_chw
    import numpy as np

    size = gen.config.input_size
    comp_net = bilinear_resize(composite, size, size)
    mask_net = nearest_resize(mask, size, size)
    batch = to_chw(np.clip(comp_net, 0.0, 1.0)).astype(np.float32)[None]
    mask_b = mask_net.astype(np.float32)[None, None]
    return comp_net, mask_net, batch, mask_b


def _metric_value(value):
    import math

    return "inf" if isinstance(value, float) and math.isinf(value) else value


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from .config import RunConfig
    from .report import save_loss_curve
    from .training import train

    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = Path(args.out) if args.out else Path(cfg.out_dir)
    result = train(cfg, out_dir)
    save_loss_curve(result.records, out_dir / "loss_curve.png")
    if result.records:
        last = result.records[-1]
        print(
            f"epoch {last['epoch']}: loss {last['loss']:.6f} "
            f"psnr {last['psnr']} mse {last['mse']:.3f} fmse {last['fmse']:.3f}"
        )
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")
    if result.halted:
        print(f"numeric failure: {result.halt_reason}", file=sys.stderr)
        return 3
    return 0


def cmd_harmonize(args) -> int:
    import numpy as np

    from .data import bilinear_resize, save_image, to_hw3
    from .tensor import no_grad

    gen, cfg = _load_model(args.checkpoint)
    composite, mask = _load_pair(args.composite, args.mask)
    h, w = mask.shape
    size = gen.config.input_size
    _, _, batch, mask_b = _network_inputs(gen, composite, mask)
    with no_grad():
        out = gen.forward(batch, mask_b)
    if (h, w) == (size, size):
        result = to_hw3(out.output.data[0].astype(np.float64))
    else:
        # run the net at its native size, re-project the prediction, and
        # compose at full resolution so the background stays bit-exact
        mask3 = mask[..., None]
        if gen.config.compose_mode == "residual":
            residual = bilinear_resize(to_hw3(out.residual.data[0].astype(np.float64)), h, w)
            result = composite + residual * mask3
        else:
            predicted = bilinear_resize(to_hw3(out.residual.data[0].astype(np.float64)), h, w)
            result = composite * (1.0 - mask3) + predicted * mask3
    save_image(args.out, result)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    import csv
    import json

    from .data import load_manifest, resize_sample
    from .errors import ValidationError
    from .report import save_metrics_figure
    from .training import evaluate_model

    gen, cfg = _load_model(args.checkpoint)
    ranges = {
        "gain": (cfg.pert_gain_min, cfg.pert_gain_max),
        "bias": (cfg.pert_bias_min, cfg.pert_bias_max),
        "gamma": (cfg.pert_gamma_min, cfg.pert_gamma_max),
        "saturation": (cfg.pert_sat_min, cfg.pert_sat_max),
    }
    samples = load_manifest(args.manifest, ranges)
    if not samples:
        raise ValidationError(f"manifest {args.manifest} lists no samples")
    samples = [resize_sample(s, gen.config.input_size) for s in samples]
    quantize = args.quantize_metrics or cfg.quantize_metrics
    aggregate, per_sample = evaluate_model(gen, samples, cfg.batch_size, quantize)

    header = f"{'sample':<16}{'psnr':>10}{'mse':>12}{'fmse':>12}"
    print(header)
    print("-" * len(header))
    for sample, report in zip(samples, per_sample):
        psnr = "inf" if report.psnr == float("inf") else f"{report.psnr:.2f}"
        print(f"{sample.name:<16}{psnr:>10}{report.mse:>12.3f}{report.fmse:>12.3f}")
    agg_psnr = "inf" if aggregate.psnr == float("inf") else f"{aggregate.psnr:.2f}"
    print("-" * len(header))
    print(f"{'aggregate':<16}{agg_psnr:>10}{aggregate.mse:>12.3f}{aggregate.fmse:>12.3f}")

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "samples": [
                {"name": s.name, **r.to_dict()} for s, r in zip(samples, per_sample)
            ],
            "aggregate": aggregate.to_dict(),
        }
        (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2) + "\n")
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "psnr", "mse", "fmse"])
            for s, r in zip(samples, per_sample):
                writer.writerow([s.name, _metric_value(r.psnr), r.mse, r.fmse])
            writer.writerow(["aggregate", _metric_value(aggregate.psnr),
                             aggregate.mse, aggregate.fmse])
        save_metrics_figure(
            [s.name for s in samples],
            [r.psnr for r in per_sample],
            [r.fmse for r in per_sample],
            out_dir / "psnr_per_sample.png",
        )
        print(f"reports in {out_dir}")
    return 0


def cmd_attnmap(args) -> int:
    import numpy as np

    from .data import nearest_resize, save_image
    from .errors import ValidationError
    from .patch_transfer import contribution_map
    from .report import save_heatmap_overlay
    from .tensor import no_grad

    gen, cfg = _load_model(args.checkpoint)
    if gen.transfer is None:
        raise ValidationError("this checkpoint has no patch-transfer stage to visualize")
    composite, mask = _load_pair(args.composite, args.mask)
    size = gen.config.input_size
    comp_net, mask_net, batch, mask_b = _network_inputs(gen, composite, mask)
    with no_grad():
        out = gen.forward(batch, mask_b)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    res = gen.config.transfer_layer
    heat = contribution_map(out.transfer_attention[0], out.transfer_patches[0], (res, res))
    # only background pixels contribute; keep that exact at image resolution
    heat_img = nearest_resize(heat, size, size) * (1.0 - mask_net)
    save_image(out_dir / "contribution.png", heat_img)
    save_heatmap_overlay(comp_net, heat_img, out_dir / "contribution_overlay.png",
                         title="background contribution")
    print(f"wrote {out_dir / 'contribution.png'}")

    if args.fg_pixel is not None:
        try:
            y, x = (int(tok) for tok in args.fg_pixel.split(","))
        except ValueError as exc:
            raise ValidationError(f"--fg-pixel wants 'y,x', got {args.fg_pixel!r}") from exc
        if not gen.config.fusion_layers:
            raise ValidationError("this checkpoint has no location-fusion stage")
        fres = min(gen.config.fusion_layers)
        module = gen.fusion[fres]
        split = module.last_indices[0]
        attn = module.last_attention[0]
        if split is None or attn is None:
            raise ValidationError("no fusion attention recorded (degenerate mask)")
        if not (0 <= y < size and 0 <= x < size):
            raise ValidationError(f"pixel ({y}, {x}) outside the {size}x{size} frame")
        token = (y * fres // size) * fres + (x * fres // size)
        rows = np.flatnonzero(split.fg_index == token)
        if len(rows) == 0:
            raise ValidationError(
                f"pixel ({y}, {x}) is not foreground at the {fres}x{fres} fusion layer"
            )
        flat = np.zeros(fres * fres)
        flat[split.bg_index] = attn[rows[0]]
        if flat.max() > 0:
            flat = flat / flat.max()
        pixel_heat = nearest_resize(flat.reshape(fres, fres), size, size)
        save_image(out_dir / "fusion_pixel.png", pixel_heat)
        save_heatmap_overlay(comp_net, pixel_heat, out_dir / "fusion_pixel_overlay.png",
                             title=f"background attention for ({y}, {x})")
        print(f"wrote {out_dir / 'fusion_pixel.png'}")
    return 0


def cmd_synth(args) -> int:
    from .data import write_synthetic_dataset
    from .errors import ValidationError

    if args.count < 1 or args.size < 8:
        raise ValidationError("synth needs count >= 1 and size >= 8")
    manifest = write_synthetic_dataset(args.out, args.count, args.size, args.seed)
    print(f"wrote {args.count} samples, manifest: {manifest}")
    return 0


if __name__ == "__main__":
    entry()
