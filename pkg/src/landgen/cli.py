"""Single executable exposing the full pipeline as subcommands.

Every run writes a ``run.json`` echo of the fully resolved configuration
beside its outputs, and all file outputs are written atomically (temp
file then rename). Exit codes: 0 success, 1 usage error, 2 data or
format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import formats
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    FormatError,
    InfeasibleWindowError,
    LandgenError,
    NumericalError,
    PaletteMismatchError,
)
from .model import DESK_CONFIG, ModelConfig, ModelParameters, build_model, model_from_store
from .raster import (
    DEFAULT_PALETTE,
    DEVELOPED_CLASSES,
    MASK_FAMILIES,
    CategoricalRaster,
    PixelMask,
    SynthParams,
    coarsen_majority,
    extract_windows,
    mask_all_missing,
    synth_landscape,
)
from .sampling import SampleRequest, sample_with_trace, score
from .sccar import hmc_fit, load_draws, predictive_inpaint, save_draws
from .stats import GridSpec, STATISTICS, coverage, grid_to_csv, rbf_interpolate
from .tiling import plan_tiles, probability_map, run_plan
from .training import train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _write_run_json(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    payload = {"command": command, "config": resolved}
    formats.atomic_write_text(out_dir / "run.json", json.dumps(payload, indent=2, default=str))


def _load_model(path: str) -> ModelParameters:
    store, config, _ = load_checkpoint(path)
    return model_from_store(store, config)


def _load_raster_dir(path: str) -> list[tuple[str, CategoricalRaster]]:
    files = sorted(Path(path).glob("*.cras"))
    if not files:
        raise FormatError(f"no .cras files in {path}")
    return [(f.stem, formats.read_raster_file(f)) for f in files]


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _mask_for(kind: str, h: int, w: int) -> PixelMask:
    if kind not in MASK_FAMILIES:
        raise _UsageError(f"unknown mask kind {kind!r}; choose from {sorted(MASK_FAMILIES)}")
    return MASK_FAMILIES[kind](h, w)


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    out = Path(args.out)
    params = SynthParams(
        smooth_radius=args.smooth_radius,
        smooth_passes=args.smooth_passes,
        road_probability=args.road_prob,
        water_probability=args.water_prob,
    )
    for i in range(args.count):
        r = synth_landscape(args.height, args.width, args.classes, args.seed + i, params)
        formats.write_raster_file(out / f"synth_{i:05d}.cras", r)
    _write_run_json(out, "synth", args)
    return EXIT_OK


def _cmd_prepare(args) -> int:
    out = Path(args.out)
    raster = formats.read_raster_file(args.source)
    if args.coarsen > 1:
        raster = coarsen_majority(raster, args.coarsen)
    manifest, windows = extract_windows(
        raster,
        window=args.window,
        count=args.count,
        water_class=args.water_class,
        water_limit=args.water_limit,
        seed=args.seed,
        source_id=Path(args.source).stem,
    )
    for i, w in enumerate(windows):
        formats.write_raster_file(out / f"win_{i:05d}.cras", w)
    formats.atomic_write_text(out / "manifest.json", formats.manifest_to_json(manifest))
    _write_run_json(out, "prepare", args)
    return EXIT_OK


def _cmd_train(args) -> int:
    rasters = [r for _, r in _load_raster_dir(args.data)]
    first = rasters[0]
    config = ModelConfig(
        image_size=first.height,
        num_classes=first.palette_K,
        gated_blocks=args.gated_blocks,
        filters=args.filters,
        kernel_size=args.kernel,
        aux_blocks=args.aux_blocks,
        aux_filters=args.aux_filters,
        se_reduction=args.se_reduction,
    )
    params = build_model(config, seed=args.seed)
    if args.heldout:
        heldout = [r for _, r in _load_raster_dir(args.heldout)]
    else:
        n_held = max(1, int(len(rasters) * args.heldout_frac))
        order = np.random.default_rng(args.seed).permutation(len(rasters))
        heldout = [rasters[i] for i in order[:n_held]]
        rasters = [rasters[i] for i in order[n_held:]]
    result, adam = train(
        params,
        rasters,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        heldout=heldout,
        stop_below_heldout_bits=args.stop_below_bits,
        log_path=args.log,
    )
    ckpt = Path(args.checkpoint)
    save_checkpoint(ckpt, params.store, config.to_dict(), adam)
    _write_run_json(ckpt.parent, "train", args)
    return EXIT_OK


def _emit_completions(args, out: Path, image, mask, params) -> int:
    t0 = time.monotonic()
    req = SampleRequest(
        params=params,
        image=image,
        mask=mask,
        temperature=args.temp,
        seed=args.seed,
        count=args.count,
        orientation=args.orientation,
    )
    completions, nats = sample_with_trace(req)
    for i, r in enumerate(completions):
        formats.write_raster_file(out / f"completion_{i:03d}.cras", r)
    sidecar = {
        "seed": args.seed,
        "temperature": args.temp,
        "clamp_count": int(mask.observed.sum()),
        "nats": nats,
        "wall_seconds": time.monotonic() - t0,
    }
    formats.atomic_write_text(out / "completions.json", json.dumps(sidecar, indent=2))
    return EXIT_OK


def _cmd_sample(args) -> int:
    out = Path(args.out)
    params = _load_model(args.checkpoint)
    size = params.config.image_size
    image = CategoricalRaster(
        np.zeros((size, size), dtype=np.uint8), params.config.num_classes
    )
    code = _emit_completions(args, out, image, mask_all_missing(size, size), params)
    _write_run_json(out, "sample", args)
    return code


def _cmd_inpaint(args) -> int:
    out = Path(args.out)
    params = _load_model(args.checkpoint)
    image = formats.read_raster_file(args.raster)
    mask = formats.read_mask_file(args.mask)
    code = _emit_completions(args, out, image, mask, params)
    _write_run_json(out, "inpaint", args)
    return code


def _cmd_tile_infill(args) -> int:
    out = Path(args.out)
    params = _load_model(args.checkpoint)
    image = formats.read_raster_file(args.raster)
    mask = formats.read_mask_file(args.mask)
    plan = plan_tiles(mask, params.config.image_size, args.margin)
    completions = []
    for i in range(args.count):
        filled = run_plan(
            plan, params, image, mask,
            temperature=args.temp, seed=args.seed + i, flips=not args.no_flips,
        )
        formats.write_raster_file(out / f"completion_{i:03d}.cras", filled)
        completions.append(filled)
    class_set = {c for c in _parse_ints(args.classes_of_interest) if c < image.palette_K}
    pmap = probability_map(completions, class_set, mask)
    formats.atomic_write_text(out / "probability_map.csv", grid_to_csv(pmap))
    formats.atomic_write_bytes(out / "probability_map.ppm", formats.heatmap_ppm(pmap))
    _write_run_json(out, "tile-infill", args)
    return EXIT_OK


def _cmd_stats(args) -> int:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["id", "entropy", "adjacency", "patch_count", "modal_proportion"])
    for path in args.raster:
        r = formats.read_raster_file(path)
        w.writerow(
            [Path(path).stem]
            + [f"{STATISTICS[s](r):.6g}" for s in ("entropy", "adjacency", "patch_count", "modal_proportion")]
        )
    if args.out:
        formats.atomic_write_text(args.out, buf.getvalue())
        _write_run_json(Path(args.out).parent, "stats", args)
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def _cmd_calibrate(args) -> int:
    params = _load_model(args.checkpoint)
    truths = []
    for _, r in _load_raster_dir(args.images):
        truths.append((r, _mask_for(args.mask_kind, r.height, r.width)))

    def sampler_fn(image, mask, count, temperature, seed):
        req = SampleRequest(
            params=params, image=image, mask=mask,
            temperature=temperature, seed=seed, count=count,
        )
        return sample_with_trace(req)[0]

    report = coverage(
        truths,
        sampler_fn,
        samples_per_image=args.samples,
        percentiles=_parse_ints(args.percentiles),
        temperatures=_parse_floats(args.temps),
        seed=args.seed,
    )
    formats.atomic_write_text(args.out, report.to_csv())
    _write_run_json(Path(args.out).parent, "calibrate", args)
    return EXIT_OK


def _cmd_score(args) -> int:
    params = _load_model(args.checkpoint)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["id", "nats", "bits_per_dim"])
    for name, r in _load_raster_dir(args.images):
        s = score(params, r)
        w.writerow([name, f"{s.nats:.6f}", f"{s.bits_per_dim:.6f}"])
    formats.atomic_write_text(args.out, buf.getvalue())
    _write_run_json(Path(args.out).parent, "score", args)
    return EXIT_OK


def _cmd_likelihood_map(args) -> int:
    params = _load_model(args.checkpoint)
    coords = {}
    with open(args.coords, newline="") as f:
        for row in csv.DictReader(f):
            coords[row["id"]] = (float(row["x"]), float(row["y"]))
    points = []
    scores_buf = io.StringIO()
    w = csv.writer(scores_buf)
    w.writerow(["id", "x", "y", "nats", "bits_per_dim"])
    for name, r in _load_raster_dir(args.images):
        if name not in coords:
            raise FormatError(f"no coordinates for image {name!r}")
        x, y = coords[name]
        s = score(params, r)
        points.append((x, y, s.nats))
        w.writerow([name, x, y, f"{s.nats:.6f}", f"{s.bits_per_dim:.6f}"])
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    pad_x = 0.05 * (max(xs) - min(xs) or 1.0)
    pad_y = 0.05 * (max(ys) - min(ys) or 1.0)
    grid = GridSpec(
        min(xs) - pad_x, max(xs) + pad_x, args.grid_nx,
        min(ys) - pad_y, max(ys) + pad_y, args.grid_ny,
    )
    surface = rbf_interpolate(points, grid, args.length_scale)
    prefix = Path(args.out)
    formats.atomic_write_text(prefix.with_suffix(".csv"), grid_to_csv(surface))
    formats.atomic_write_bytes(prefix.with_suffix(".ppm"), formats.heatmap_ppm(surface))
    formats.atomic_write_text(prefix.parent / (prefix.stem + "_scores.csv"), scores_buf.getvalue())
    _write_run_json(prefix.parent, "likelihood-map", args)
    return EXIT_OK


def _cmd_sccar_fit(args) -> int:
    raster = formats.read_raster_file(args.raster)
    mask = formats.read_mask_file(args.mask)
    fit = hmc_fit(
        raster,
        mask,
        chains=args.chains,
        tune=args.tune,
        draws=args.draws,
        target_accept=args.target_accept,
        seed=args.seed,
        leapfrog_steps=args.leapfrog,
    )
    save_draws(args.draws_out, fit)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["parameter", "rhat", "ess_proxy", "mean", "sd"])
    for name, rhat, e, mean, sd in fit.diagnostics_rows():
        w.writerow([name, f"{rhat:.4f}", f"{e:.1f}", f"{mean:.6f}", f"{sd:.6f}"])
    formats.atomic_write_text(args.diagnostics, buf.getvalue())
    _write_run_json(Path(args.draws_out).parent, "sccar-fit", args)
    return EXIT_OK


def _cmd_sccar_inpaint(args) -> int:
    out = Path(args.out)
    fit = load_draws(args.draws)
    raster = formats.read_raster_file(args.raster)
    mask = formats.read_mask_file(args.mask)
    completions = predictive_inpaint(fit, raster, mask, args.count, seed=args.seed)
    for i, r in enumerate(completions):
        formats.write_raster_file(out / f"completion_{i:03d}.cras", r)
    _write_run_json(out, "sccar-inpaint", args)
    return EXIT_OK


def _cmd_export_ppm(args) -> int:
    raster = formats.read_raster_file(args.raster)
    if raster.palette_K > DEFAULT_PALETTE.num_classes:
        raise PaletteMismatchError(
            f"no default palette for K={raster.palette_K} (> {DEFAULT_PALETTE.num_classes})"
        )
    palette = (
        DEFAULT_PALETTE
        if raster.palette_K == DEFAULT_PALETTE.num_classes
        else DEFAULT_PALETTE.truncated(raster.palette_K)
    )
    formats.atomic_write_bytes(args.out, formats.export_ppm(raster, palette))
    _write_run_json(Path(args.out).parent, "export-ppm", args)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser assembly
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="landgen", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, **kwargs):
        sp = sub.add_parser(name, **kwargs)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--workers", type=int, default=1,
                        help="parallelism hint; results are independent of it")
        return sp

    sp = add("synth", _cmd_synth, help="generate synthetic landscape rasters")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--height", type=int, default=16)
    sp.add_argument("--width", type=int, default=16)
    sp.add_argument("--classes", type=int, default=5)
    sp.add_argument("--smooth-radius", type=int, default=2)
    sp.add_argument("--smooth-passes", type=int, default=2)
    sp.add_argument("--road-prob", type=float, default=0.35)
    sp.add_argument("--water-prob", type=float, default=0.3)

    sp = add("prepare", _cmd_prepare, help="coarsen and window a source raster")
    sp.add_argument("--source", required=True)
    sp.add_argument("--coarsen", type=int, default=1)
    sp.add_argument("--window", type=int, default=16)
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--water-class", type=int, default=0)
    sp.add_argument("--water-limit", type=float, default=0.5)
    sp.add_argument("--out", required=True)

    sp = add("train", _cmd_train, help="train the pixel-constrained model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--heldout", default=None)
    sp.add_argument("--heldout-frac", type=float, default=0.1)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--lr", type=float, default=5e-4)
    sp.add_argument("--gated-blocks", type=int, default=DESK_CONFIG.gated_blocks)
    sp.add_argument("--filters", type=int, default=DESK_CONFIG.filters)
    sp.add_argument("--kernel", type=int, default=DESK_CONFIG.kernel_size)
    sp.add_argument("--aux-blocks", type=int, default=DESK_CONFIG.aux_blocks)
    sp.add_argument("--aux-filters", type=int, default=DESK_CONFIG.aux_filters)
    sp.add_argument("--se-reduction", type=int, default=DESK_CONFIG.se_reduction)
    sp.add_argument("--stop-below-bits", type=float, default=None)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--log", required=True)

    for name, fn, needs_input in (
        ("sample", _cmd_sample, False),
        ("inpaint", _cmd_inpaint, True),
    ):
        sp = add(name, fn, help=f"{name} with a trained model")
        sp.add_argument("--checkpoint", required=True)
        if needs_input:
            sp.add_argument("--raster", required=True)
            sp.add_argument("--mask", required=True)
        sp.add_argument("--count", type=int, default=1)
        sp.add_argument("--temp", type=float, default=1.0)
        sp.add_argument("--orientation", choices=("identity", "random-flips"), default="identity")
        sp.add_argument("--out", required=True)

    sp = add("tile-infill", _cmd_tile_infill, help="sequential infill of large holes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--raster", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--count", type=int, default=25)
    sp.add_argument("--temp", type=float, default=1.0)
    sp.add_argument("--margin", type=int, default=11)
    sp.add_argument("--no-flips", action="store_true")
    sp.add_argument("--classes-of-interest", default=",".join(str(c) for c in sorted(DEVELOPED_CLASSES)))
    sp.add_argument("--out", required=True)

    sp = add("stats", _cmd_stats, help="landscape summary statistics")
    sp.add_argument("--raster", nargs="+", required=True)
    sp.add_argument("--out", default=None)

    sp = add("calibrate", _cmd_calibrate, help="predictive-interval coverage table")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--samples", type=int, default=100)
    sp.add_argument("--temps", default="0.25,0.5,1.0,1.1,1.25,1.5")
    sp.add_argument("--percentiles", default="50,90,95")
    sp.add_argument("--mask-kind", default="bottom", choices=sorted(MASK_FAMILIES))
    sp.add_argument("--out", required=True)

    sp = add("score", _cmd_score, help="log-likelihood scores for a directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--out", required=True)

    sp = add("likelihood-map", _cmd_likelihood_map, help="RBF-interpolated score surface")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--coords", required=True, help="CSV with columns id,x,y")
    sp.add_argument("--length-scale", type=float, default=1.0)
    sp.add_argument("--grid-nx", type=int, default=50)
    sp.add_argument("--grid-ny", type=int, default=50)
    sp.add_argument("--out", required=True, help="output prefix")

    sp = add("sccar-fit", _cmd_sccar_fit, help="fit the spatial CAR benchmark via HMC")
    sp.add_argument("--raster", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--chains", type=int, default=4)
    sp.add_argument("--tune", type=int, default=2000)
    sp.add_argument("--draws", type=int, default=2000)
    sp.add_argument("--target-accept", type=float, default=0.9)
    sp.add_argument("--leapfrog", type=int, default=32)
    sp.add_argument("--draws-out", required=True)
    sp.add_argument("--diagnostics", required=True)

    sp = add("sccar-inpaint", _cmd_sccar_inpaint, help="posterior-predictive completions")
    sp.add_argument("--draws", required=True)
    sp.add_argument("--raster", required=True)
    sp.add_argument("--mask", required=True)
    sp.add_argument("--count", type=int, default=25)
    sp.add_argument("--out", required=True)

    sp = add("export-ppm", _cmd_export_ppm, help="render a raster to a P6 image")
    sp.add_argument("--raster", required=True)
    sp.add_argument("--out", required=True)

    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (
        FormatError,
        PaletteMismatchError,
        InfeasibleWindowError,
        LandgenError,
        ValueError,
        KeyError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
