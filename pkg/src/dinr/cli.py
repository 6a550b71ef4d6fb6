"""``dinr`` command line: pretrain, reconstruct, sweep, metrics.

Exit codes: 0 success, 1 configuration error, 2 one or more cells failed.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import math
import re
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import io, tomo
from .config import ConfigError, ExperimentSpec, dump_config, load_config, measurement_seed
from .diffusion import DenoiserModel, make_schedule, pretrain
from .metrics import MetricReport, RoiSpec, evaluate, fmt_db, propose_anchor, \
    roi_psnr_sweep, write_reports, write_roi_csv
from .nnkit.layers import ConvSpec
from .phantom import PhantomConfig, ellipse_dataset, microstructure_phantom
from .solver import ReconResult, reconstruct

log = logging.getLogger("dinr")

EXIT_OK, EXIT_CONFIG, EXIT_CELL = 0, 1, 2
DIFFUSION_METHODS = ("dinr", "dd3ip")


# ---------------------------------------------------------------- helpers

def _out_dir(spec: ExperimentSpec, args) -> Path:
    out = Path(args.out or spec.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _weights_path(spec: ExperimentSpec, out: Path) -> Path:
    return Path(spec.weights) if spec.weights else out / "denoiser.dinrw"


def _snapshot(spec: ExperimentSpec, out: Path) -> None:
    (out / "config.yaml").write_text(dump_config(spec))


def simulate(spec: ExperimentSpec, views: int) -> tuple[tomo.Sinogram, tomo.Volume]:
    """Noisy parallel-beam sinogram of the configured phantom at ``views`` views."""
    truth = microstructure_phantom(spec.phantom.build())
    geom = tomo.parallel_geometry(views, spec.phantom.image_size)
    y = tomo.project(truth, geom)
    sigma = spec.experiment.noise * float(np.abs(y.data).max())
    if sigma > 0:
        rng = np.random.default_rng(measurement_seed(spec.seed, views))
        y = tomo.Sinogram(geom, y.data + sigma * rng.standard_normal(y.data.shape))
    return y, truth


def _cells(spec: ExperimentSpec):
    """(views, sinogram, truth) per view count; a loaded sinogram gives one cell without truth."""
    if spec.experiment.sinogram:
        y = io.load_sinogram(spec.experiment.sinogram)
        yield y.geometry.n_views, y, None
        return
    for v in sorted(set(spec.experiment.views)):
        y, truth = simulate(spec, v)
        yield v, y, truth


def _roi(spec: ExperimentSpec, truth: tomo.Volume) -> RoiSpec:
    base = RoiSpec.scaled_for(truth.shape[-2:])
    anchor = spec.experiment.roi_anchor
    if anchor is None:
        anchor = propose_anchor(truth.data, base.anchor[2], base.anchor[3])
    return RoiSpec.scaled_for(truth.shape[-2:], tuple(anchor))


def _report(method: str, views: int, x: np.ndarray, truth, roi) -> MetricReport:
    if truth is None:
        nan = float("nan")
        return MetricReport(method, views, nan, nan)
    return evaluate(method, views, x, truth, roi)


def _write_cell(cell_dir: Path, res: ReconResult) -> None:
    cell_dir.mkdir(parents=True, exist_ok=True)
    io.save_volume(cell_dir / "x0.dinrt", res.x0)
    io.save_png(cell_dir / "x0.png", res.x0.data)
    if res.log:
        io.write_log_csv(cell_dir / "log.csv", res.log)
    io.write_kv(cell_dir / "recon.txt", {**res.config, "rho": res.rho,
                                         "wall_time_s": round(res.wall_time, 3)})


def _load_denoiser(spec: ExperimentSpec, out: Path, methods) -> DenoiserModel | None:
    if not any(m in DIFFUSION_METHODS for m in methods):
        return None
    path = _weights_path(spec, out)
    if not path.exists():
        raise ConfigError(f"denoiser weights {path} not found; run `dinr pretrain` first")
    return DenoiserModel.load(path)


def _sorted(reports):
    return sorted(reports, key=lambda r: (r.views, r.method))


# ---------------------------------------------------------------- verbs

def cmd_pretrain(spec: ExperimentSpec, args) -> int:
    out = _out_dir(spec, args)
    p = spec.pretrain
    _snapshot(spec, out)
    data = ellipse_dataset(PhantomConfig(image_size=p.image_size), p.n_images, p.seed)
    model = DenoiserModel.create(ConvSpec(channels=tuple(p.channels)),
                                 make_schedule(p.timesteps, p.schedule), seed=p.seed)
    model, losses = pretrain(model, data, p.epochs, p.lr, p.seed, p.batch_size, p.crop)
    path = _weights_path(spec, out)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.save(path)
    with open(out / "pretrain_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(losses, 1):
            w.writerow([i, f"{loss:.8g}"])
            print(f"epoch {i:4d}  loss {loss:.6f}")
    print(f"weights written to {path}")
    return EXIT_OK


def cmd_reconstruct(spec: ExperimentSpec, args) -> int:
    out = _out_dir(spec, args)
    methods = spec.experiment.methods
    denoiser = _load_denoiser(spec, out, methods)
    _snapshot(spec, out)
    reports, failures = [], []
    for views, y, truth in _cells(spec):
        if truth is not None:
            io.save_png(out / "truth.png", truth.data)
        roi = _roi(spec, truth) if truth is not None else None
        sweeps = {}
        for method in sorted(methods):
            tag = f"v{views:03d}_{method}"
            try:
                cfg = spec.recon_config(method, views)
                t0 = time.perf_counter()
                res = reconstruct(y, cfg, denoiser, truth)
                _write_cell(out / "cells" / tag, res)
                rep = _report(method, views, res.x0.data, truth, roi)
                reports.append(rep)
                if roi is not None:
                    sweeps[method] = roi_psnr_sweep(np.clip(res.x0.data, 0, 1), truth.data, roi)
                print(f"{tag:<14} psnr {fmt_db(rep.psnr):>8}  ssim {rep.ssim:.4f}  "
                      f"({time.perf_counter() - t0:.1f}s)", flush=True)
            except Exception as exc:  # a failed cell must not stop the grid
                failures.append(f"{tag}: {type(exc).__name__}: {exc}")
                log.error("cell %s failed: %s", tag, exc)
                log.debug("%s", traceback.format_exc())
        if sweeps:
            write_roi_csv(out / f"roi_v{views:03d}.csv", sweeps)
            (out / "roi_scale.txt").write_text(
                f"scale={roi.scale!r}\nanchor={','.join(map(str, roi.anchor))}\n"
                f"crop_sizes={','.join(map(str, roi.sizes))}\n")
    write_reports(out / "summary.csv", _sorted(reports))
    if failures:
        (out / "errors.txt").write_text("\n".join(failures) + "\n")
        print(f"{len(failures)} cell(s) failed; see {out / 'errors.txt'}", file=sys.stderr)
        return EXIT_CELL
    return EXIT_OK


def cmd_sweep(spec: ExperimentSpec, args) -> int:
    if spec.sweep is None:
        raise ConfigError("sweep: section is required for the sweep verb")
    sw = spec.sweep
    if not sw.values:
        raise ConfigError("sweep.values: at least one value is required")
    out = _out_dir(spec, args)
    denoiser = _load_denoiser(spec, out, [sw.method])
    _snapshot(spec, out)
    y, truth = simulate(spec, sw.views)
    rows, failed = [], False
    for value in sw.values:
        try:
            cfg = spec.recon_config(sw.method, sw.views, **{sw.param: value})
            res = reconstruct(y, cfg, denoiser, truth)
            rep = evaluate(sw.method, sw.views, res.x0.data, truth)
            rows.append((value, rep.psnr, rep.ssim))
        except Exception as exc:
            log.error("sweep value %s failed: %s", value, exc)
            rows.append((value, float("nan"), float("nan")))
            failed = True
    finite = [r for r in rows if not math.isnan(r[1])]
    best = max(finite, key=lambda r: r[1])[0] if finite else None
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([sw.param, "psnr", "ssim", "best"])
        for value, p, s in rows:
            w.writerow([repr(value), fmt_db(p), f"{s:.4f}", "*" if value == best else ""])
            print(f"{sw.param}={value!r:<10} psnr {fmt_db(p):>8}{'  <- best' if value == best else ''}")
    return EXIT_CELL if failed else EXIT_OK


_CELL_RE = re.compile(r"^v(\d+)_(\w+)$")


def cmd_metrics(spec: ExperimentSpec, args) -> int:
    out = Path(args.out or spec.out)
    cells = out / "cells"
    if not cells.is_dir():
        raise ConfigError(f"{cells} does not exist; run `dinr reconstruct` first")
    truth = microstructure_phantom(spec.phantom.build())
    roi = _roi(spec, truth)
    reports = []
    for d in sorted(cells.iterdir()):
        m = _CELL_RE.match(d.name)
        if not m or not (d / "x0.dinrt").exists():
            continue
        x = io.load_volume(d / "x0.dinrt")
        reports.append(evaluate(m.group(2), int(m.group(1)), x.data, truth, roi))
    write_reports(out / "summary.csv", _sorted(reports))
    for r in _sorted(reports):
        print(",".join(r.row()))
    return EXIT_OK


VERBS = {"pretrain": cmd_pretrain, "reconstruct": cmd_reconstruct, "sweep": cmd_sweep,
         "metrics": cmd_metrics}


def _common(suppress: bool) -> argparse.ArgumentParser:
    # subcommand copies use SUPPRESS so flags given before the verb survive
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="YAML experiment config", **kw)
    p.add_argument("--seed", type=int, help="master seed (overrides the config)", **kw)
    p.add_argument("--out", type=Path, help="output directory (overrides the config)", **kw)
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS for bit-reproducible results", **kw)
    p.add_argument("--threads", type=int, help="BLAS thread limit", **kw)
    p.add_argument("-v", "--verbose", action="store_true", **kw)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dinr", parents=[_common(False)],
                                     description="Sparse-view CT reconstruction experiments.")
    sub = parser.add_subparsers(dest="verb", required=True)
    common = _common(True)
    sub.add_parser("pretrain", parents=[common], help="train the denoiser on ellipse images")
    sub.add_parser("reconstruct", parents=[common], help="run the (views x methods) grid")
    sub.add_parser("sweep", parents=[common], help="sweep omega or rho_ratio on one cell")
    sub.add_parser("metrics", parents=[common], help="recompute reports from saved volumes")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = load_config(args.config) if args.config else ExperimentSpec()
        if args.seed is not None:
            spec = spec.model_copy(update={"seed": args.seed})
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        limit = 1 if args.deterministic else args.threads
        ctx = contextlib.nullcontext()
        if limit is not None:
            from threadpoolctl import threadpool_limits
            ctx = threadpool_limits(limits=limit)
        with ctx:
            return VERBS[args.verb](spec, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
