"""Command-line entry point: ``radar-distill <command> ...``.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numerical
failure.
"""

import argparse
import dataclasses
import json
import math
import os
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import heads
from . import learnable_sp as lsp
from .colormap import VIRIDIS
from .config import RunConfig
from .errors import FormatError, NumericalError
from .fmcw_sim import (RADAR_CONFIG_NAME, DatasetManifest, azimuth_grid, doppler_velocities,
                       rasterize_labels, read_radar_config, scene_from_record, synth_dataset)
from .teacher import (CfarConfig, build_rad, default_windows, detect_from_rad, detect_targets,
                      range_azimuth_mask, teacher_batch)
from .tensor import make_rng, tensor_read, tensor_write
from .trainer import distill, init_ablation, rae

RUN_CONFIG_NAME = "run_config.json"
WORKERS_ENV = "RADAR_DISTILL_WORKERS"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class UsageError(Exception):
    pass


class DigestMismatch(ValueError):
    pass


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def resolve_workers(flag):
    """Worker count: ``RADAR_DISTILL_WORKERS`` wins over ``--workers``; default all cores."""
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    elif flag is not None:
        n = flag
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("worker count must be >= 1")
    return n


def load_run_config(config_path, manifest_path=None):
    """``--config`` if given; else ``run_config.json`` beside the manifest; else defaults.

    In the last case a ``radar_config.json`` beside the manifest still
    supplies the radar section.
    """
    if config_path:
        if not os.path.exists(config_path):
            raise UsageError(f"config file not found: {config_path}")
        return RunConfig.load(config_path)
    if manifest_path:
        root = os.path.dirname(os.path.abspath(manifest_path))
        if os.path.exists(os.path.join(root, RUN_CONFIG_NAME)):
            return RunConfig.load(os.path.join(root, RUN_CONFIG_NAME))
        if os.path.exists(os.path.join(root, RADAR_CONFIG_NAME)):
            return RunConfig(radar=read_radar_config(os.path.join(root, RADAR_CONFIG_NAME)))
    return RunConfig()


def _read_manifest(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    return DatasetManifest.read(path)


def _write_json(path, obj):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")


def _manifest_digest(manifest):
    digests = {rec.get("cfg_digest") for rec in manifest.records}
    if len(digests) > 1:
        raise DigestMismatch(f"manifest mixes config digests: {sorted(map(str, digests))}")
    return digests.pop() if digests else None


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args):
    cfg = load_run_config(args.config)
    digest = cfg.digest()
    ds = cfg.dataset
    manifest = synth_dataset(args.scenes, cfg.radar, ds.target_count_range, args.seed, args.out,
                             cfg_digest=digest, amplitude_range=ds.amplitude_range,
                             on_grid=ds.on_grid, min_separation_bins=ds.min_separation_bins,
                             grid_jitter=ds.grid_jitter)
    n_r, n_b = cfg.radar.n_samples, cfg.radar.n_azimuth_bins
    if manifest.records:
        os.makedirs(os.path.join(args.out, "labels"), exist_ok=True)
    for rec in manifest.records:
        maps = rasterize_labels(scene_from_record(rec), cfg.radar, n_r, n_b, cfg.head.seg_radius)
        stacked = np.concatenate([maps.y_cls[..., None], maps.y_reg, maps.y_seg[..., None]], axis=-1)
        rel = os.path.join("labels", f"scene_{rec['scene_id']:06d}.rten")
        tensor_write(manifest.resolve(rel), stacked)
        rec["label_path"] = rel
    manifest.write()
    cfg.write(os.path.join(args.out, RUN_CONFIG_NAME))
    _log(f"wrote {len(manifest.records)} scenes to {manifest.path}")
    return EXIT_OK


def _single_target_agreement(manifest, cfg, windows):
    """Fraction of single-target scenes whose MUSIC and FFT RAD peaks share an azimuth cell (+-1)."""
    n_single = n_agree = 0
    for rec in manifest.records:
        if len(rec["targets"]) != 1 or not rec.get("rad_path"):
            continue
        adc = tensor_read(manifest.resolve(rec["adc_path"]))
        music = tensor_read(manifest.resolve(rec["rad_path"]))
        fft = build_rad(adc, cfg.radar.n_azimuth_bins, "fft", windows)
        r, d, _ = np.unravel_index(np.argmax(fft), fft.shape)
        b_fft = int(np.argmax(fft[r, d]))
        b_music = int(np.argmax(music[r, d]))
        n_single += 1
        n_agree += abs(b_fft - b_music) <= 1
    return {"n_single_target": n_single, "n_within_one_cell": n_agree,
            "fraction": n_agree / n_single if n_single else None}


def cmd_teacher(args):
    cfg = load_run_config(args.config, args.manifest)
    manifest = _read_manifest(args.manifest)
    aoa = args.aoa or cfg.teacher.aoa
    windows = default_windows(cfg.radar.n_samples, cfg.radar.n_chirps, cfg.teacher.window)
    out = teacher_batch(manifest, cfg.radar.n_azimuth_bins, aoa, args.out, windows,
                        cfg.teacher.n_sources, cfg.radar.element_spacing_wavelengths,
                        workers=resolve_workers(args.workers))
    cfg.write(os.path.join(args.out, RUN_CONFIG_NAME))
    failed = [r["scene_id"] for r in out.records if not r.get("rad_path")]
    if aoa == "music":
        report = _single_target_agreement(out, cfg, windows)
        report["config_digest"] = cfg.digest()
        _write_json(os.path.join(args.out, "music_agreement.json"), report)
        _log(f"MUSIC vs FFT azimuth agreement on single-target scenes: {report['fraction']}")
    _log(f"wrote {len(out.records) - len(failed)} RAD tensors to {out.root}")
    if failed:
        _log(f"{len(failed)} scenes failed: {failed[:10]}")
        return EXIT_DATA
    return EXIT_OK


def _scheme(args, cfg):
    variant = args.scheme or cfg.init.variant
    gamma = cfg.init.gamma if args.gamma is None else args.gamma
    seed = cfg.init.seed if args.seed is None else args.seed
    return lsp.InitScheme(variant, gamma, seed)


def _train_cfg(args, cfg):
    train = cfg.train
    if getattr(args, "max_steps", None) is not None:
        train = dataclasses.replace(train, max_steps=args.max_steps)
    return train


def cmd_distill(args):
    cfg = load_run_config(args.config, args.manifest)
    manifest = _read_manifest(args.manifest)
    res = distill(manifest, _scheme(args, cfg), _train_cfg(args, cfg), args.out,
                  radar_cfg=cfg.radar, cfg_digest=cfg.digest(), resume=args.resume,
                  window_kind=cfg.teacher.window, log=_log)
    cfg.write(os.path.join(args.out, RUN_CONFIG_NAME))
    if res.history.records:
        last = res.history.records[-1]
        _log(f"final held-out mean RAE {last['mean_rae']:.5g}, max RAE {last['max_rae']:.5g}")
    _log(f"best checkpoint: {res.checkpoint}")
    return EXIT_OK


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_ablate(args):
    cfg = load_run_config(args.config, args.manifest)
    manifest = _read_manifest(args.manifest)
    gamma = cfg.init.gamma if args.gamma is None else args.gamma
    seed = cfg.init.seed if args.seed is None else args.seed
    schemes = [lsp.InitScheme(s.strip(), gamma, seed) for s in args.schemes.split(",") if s.strip()]
    if not schemes and not args.gammas:
        raise UsageError("give at least one scheme or gamma")
    rows = init_ablation(manifest, schemes, _train_cfg(args, cfg), args.out, radar_cfg=cfg.radar,
                         gammas=args.gammas or (), log=_log if args.verbose else None)
    cfg.write(os.path.join(args.out, RUN_CONFIG_NAME))
    for row in rows:
        _log(f"{row['scheme']:>15} gamma={row['gamma']!s:>5}  {row['status']}  "
             f"final mean RAE {row.get('final_mean_rae', math.nan):.4g}")
    return EXIT_OK


def _rad_detections(rad, cfar, range_bin_m, spacing):
    grid = azimuth_grid(rad.shape[2], spacing)
    return [{"range_m": r * range_bin_m, "azimuth_rad": math.asin(max(-1.0, min(1.0, grid[b]))),
             "score": 1.0} for r, _, b in detect_from_rad(rad, cfar)]


def cmd_eval(args):
    cfg = load_run_config(args.config, args.manifest)
    manifest = _read_manifest(args.manifest)
    man_digest = _manifest_digest(manifest)
    teacher_ref = args.checkpoint == "teacher"
    if teacher_ref:
        params, ck_digest = None, man_digest
    else:
        params, meta = lsp.params_load(args.checkpoint)
        ck_digest = meta.get("cfg_digest")
    if ck_digest != man_digest:
        if not args.force:
            raise DigestMismatch(f"checkpoint config digest {ck_digest} does not match manifest "
                                 f"digest {man_digest}; pass --force to evaluate anyway")
        _log("warning: config digest mismatch ignored (--force)")
    recs = sorted((r for r in manifest.records if r.get("rad_path")), key=lambda r: r["scene_id"])
    if not recs:
        raise ValueError("manifest has no scenes with teacher RAD")
    rads = np.stack([tensor_read(manifest.resolve(r["rad_path"])) for r in recs])
    if teacher_ref:
        preds = rads
    else:
        adcs = np.stack([tensor_read(manifest.resolve(r["adc_path"])) for r in recs])
        preds = np.concatenate([lsp.forward(params, adcs[i:i + 16])[0]
                                for i in range(0, len(adcs), 16)])
    _, mean_rae, max_rae = rae(rads, preds, cfg.train.rae_eps)
    dr = cfg.radar.max_range_m / rads.shape[1]
    spacing = cfg.radar.element_spacing_wavelengths
    dets = [_rad_detections(p, cfg.cfar, dr, spacing) for p in preds]
    gts = [_rad_detections(t, cfg.cfar, dr, spacing) for t in rads]
    tol = {"range_m": cfg.head.range_tolerance_bins * dr,
           "azimuth_rad": cfg.head.azimuth_tolerance_rad}
    scores = heads.score_detections(dets, gts, tol, cfg.head.thresholds)
    masks_p = [range_azimuth_mask(p, cfg.cfar) for p in preds]
    masks_t = [range_azimuth_mask(t, cfg.cfar) for t in rads]
    report = {
        "config_digest": man_digest,
        "checkpoint": "teacher" if teacher_ref else os.path.abspath(args.checkpoint),
        "n_frames": len(recs),
        "mean_rae": mean_rae,
        "max_rae": max_rae,
        "rae_eps": cfg.train.rae_eps,
        "reference": "classic detections on teacher RAD",
        "ap": scores["ap"], "ar": scores["ar"], "f1": scores["f1"],
        "re_m": scores["re_m"], "ae_rad": scores["ae_rad"],
        "miou": heads.miou(masks_p, masks_t),
        "thresholds": list(cfg.head.thresholds),
        "tolerances": tol,
    }
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    heads.write_report(args.report, report)
    heads.write_threshold_csv(_threshold_csv_path(args.report), scores["per_threshold"])
    _log(f"mean RAE {mean_rae:.5g}  F1 {report['f1']:.4f}  mIOU {report['miou']:.4f}")
    return EXIT_OK


def _threshold_csv_path(report_path):
    stem, _ = os.path.splitext(report_path)
    return stem + "_thresholds.csv"


def cmd_detect(args):
    cfg = load_run_config(args.config, args.manifest)
    manifest = _read_manifest(args.manifest)
    g, t = cfg.cfar.per_axis()
    cfar = CfarConfig(tuple(args.cfar_guard) if args.cfar_guard else g,
                      tuple(args.cfar_train) if args.cfar_train else t,
                      args.cfar_scale if args.cfar_scale is not None else cfg.cfar.scale_factor)
    aoa = args.aoa or cfg.teacher.aoa
    radar = cfg.radar
    windows = default_windows(radar.n_samples, radar.n_chirps, cfg.teacher.window)
    velocities = doppler_velocities(radar)
    digest = _manifest_digest(manifest)

    def job(rec):
        adc = tensor_read(manifest.resolve(rec["adc_path"]))
        found = detect_targets(adc, cfar, radar.n_azimuth_bins, windows, aoa,
                               cfg.teacher.n_sources, radar.element_spacing_wavelengths)
        return {"scene_id": rec["scene_id"], "cfg_digest": digest, "detections": [
            {"range_bin": d.range_bin, "doppler_bin": d.doppler_bin, "azimuth_bin": d.azimuth_bin,
             "range_m": d.range_bin * radar.range_bin_m,
             "velocity_mps": float(velocities[d.doppler_bin]),
             "azimuth_rad": d.azimuth_rad,
             "snr": d.snr_estimate if math.isfinite(d.snr_estimate) else None}
            for d in found]}

    workers = resolve_workers(args.workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            frames = list(pool.map(job, manifest.records))
    else:
        frames = [job(r) for r in manifest.records]
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for fr in frames:
            fh.write(json.dumps(fr, sort_keys=True, separators=(",", ":")) + "\n")
    _log(f"{sum(len(f['detections']) for f in frames)} detections in {len(frames)} frames")
    return EXIT_OK


def run_bench(params, batch, iters, warmup=1, seed=0):
    """Time student forward passes on random ADC batches."""
    n, m, a, _ = params.dims
    rng = make_rng(seed, 7)
    adc = rng.standard_normal((batch, n, m, a)) + 1j * rng.standard_normal((batch, n, m, a))
    for _ in range(warmup):
        lsp.forward(params, adc)
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        lsp.forward(params, adc)
        times.append(time.perf_counter() - t0)
    per_batch = statistics.median(times)
    return {"batch": batch, "iters": iters, "warmup": warmup,
            "ms_per_batch": 1000.0 * per_batch,
            "ms_per_sample": 1000.0 * per_batch / batch,
            "samples_per_sec": batch / per_batch,
            "timing": "median over iterations"}


def cmd_bench(args):
    if args.batch < 1 or args.iters < 1:
        raise UsageError("--batch and --iters must be >= 1")
    params, meta = lsp.params_load(args.checkpoint)
    report = run_bench(params, args.batch, args.iters, args.warmup)
    report["cfg_digest"] = meta.get("cfg_digest")
    if args.report:
        _write_json(args.report, report)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def render_heatmap(tensor, axis=None, collapse="sum"):
    """Collapse a tensor to 2-d and map it to RGB ``uint8`` with the viridis table.

    Complex input is converted to magnitude first. 3-d input is collapsed
    along ``axis`` (default 1, the Doppler axis of RD/RAD tensors). Values
    are shifted so the minimum is at most 0, then scaled by the maximum. An
    all-zero tensor renders black.
    """
    x = np.asarray(tensor)
    if np.iscomplexobj(x):
        x = np.abs(x)
    x = x.astype(np.float64)
    if x.ndim == 3:
        ax = 1 if axis is None else axis
        x = x.sum(axis=ax) if collapse == "sum" else x.max(axis=ax)
    elif x.ndim == 1:
        x = x[None, :]
    elif x.ndim != 2:
        raise ValueError(f"can only plot 1-3 dimensional tensors, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("tensor has non-finite values")
    if not np.any(x):
        return np.zeros(x.shape + (3,), dtype=np.uint8)
    v = x - min(0.0, float(x.min()))
    peak = float(v.max())
    idx = np.zeros(v.shape, dtype=np.int64) if peak == 0 else \
        np.clip(np.round(255.0 * v / peak), 0, 255).astype(np.int64)
    return np.asarray(VIRIDIS, dtype=np.uint8)[idx]


def write_ppm(path, rgb):
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def cmd_plot(args):
    rgb = render_heatmap(tensor_read(args.tensor), args.axis, args.axis_collapse)
    write_ppm(args.out, rgb)
    _log(f"wrote {rgb.shape[1]}x{rgb.shape[0]} image to {args.out}")
    return EXIT_OK


def cmd_finetune(args):
    cfg = load_run_config(args.config, args.manifest)
    manifest = _read_manifest(args.manifest)
    hcfg = cfg.head_config()
    if args.unfreeze_sp:
        hcfg = dataclasses.replace(hcfg, unfreeze_sp=True)
    steps = hcfg.steps if args.steps is None else args.steps
    res = heads.finetune_toy_head(args.checkpoint, manifest, cfg.radar, hcfg, steps, log=_log)
    os.makedirs(args.out, exist_ok=True)
    digest = cfg.digest()
    heads.head_save(os.path.join(args.out, "head"), res.head,
                    {"cfg_digest": digest, "steps": steps, "head": hcfg.to_dict()})
    if hcfg.unfreeze_sp:
        lsp.params_save(os.path.join(args.out, "sp"), res.sp_params, {"cfg_digest": digest})
    heads.write_head_history(os.path.join(args.out, "history.csv"), res.history)
    report = {k: v for k, v in res.report.items() if k != "per_threshold"}
    report["config_digest"] = digest
    heads.write_report(os.path.join(args.out, "report.json"), report)
    heads.write_threshold_csv(os.path.join(args.out, "report_thresholds.csv"),
                              res.report["per_threshold"])
    cfg.write(os.path.join(args.out, RUN_CONFIG_NAME))
    _log(f"held-out F1 {report['f1']:.4f}  mIOU {report['miou']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="radar-distill",
                                description="Synthetic FMCW radar, classic SP teacher and "
                                            "distillation into a learnable SP module.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_manifest=True):
        if needs_manifest:
            sp.add_argument("--manifest", required=True, help="manifest.jsonl path")
        sp.add_argument("--config", help="run config JSON (default: run_config.json beside "
                                         "the manifest)")

    s = sub.add_parser("simulate", help="synthesize ADC cubes, labels and a manifest")
    s.add_argument("--config", required=True, help="run config JSON")
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("teacher", help="pseudo-label ADC cubes with teacher RAD tensors")
    common(s)
    s.add_argument("--aoa", choices=("fft", "music"))
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_teacher)

    s = sub.add_parser("distill", help="train the learnable SP module on teacher RAD")
    common(s)
    s.add_argument("--scheme", choices=lsp.VARIANTS + ("exact_dft", "perturbed_dft"))
    s.add_argument("--gamma", type=float)
    s.add_argument("--seed", type=int, help="initialization seed")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--resume", help="checkpoint directory to continue from")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("ablate", help="compare initialization schemes at equal budget")
    common(s)
    s.add_argument("--schemes", default="exact,perturbed,random")
    s.add_argument("--gammas", type=_float_list, default=[])
    s.add_argument("--gamma", type=float, help="gamma for the perturbed entry of --schemes")
    s.add_argument("--seed", type=int)
    s.add_argument("--max-steps", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("eval", help="RAE and classic-detection agreement against the teacher")
    common(s)
    s.add_argument("--checkpoint", required=True, help="checkpoint directory, or 'teacher'")
    s.add_argument("--report", required=True, help="report JSON path")
    s.add_argument("--force", action="store_true", help="ignore a config digest mismatch")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("detect", help="classic CFAR + AOA detections per frame")
    common(s)
    s.add_argument("--cfar-guard", type=int, nargs=2, metavar=("RANGE", "DOPPLER"))
    s.add_argument("--cfar-train", type=int, nargs=2, metavar=("RANGE", "DOPPLER"))
    s.add_argument("--cfar-scale", type=float)
    s.add_argument("--aoa", choices=("fft", "music"))
    s.add_argument("--out", required=True, help="detections JSON-lines path")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("bench", help="time student forward passes")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--report")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("plot", help="render a tensor as a PPM heatmap")
    s.add_argument("--tensor", required=True)
    s.add_argument("--axis-collapse", choices=("sum", "max"), default="sum")
    s.add_argument("--axis", type=int, help="axis to collapse for 3-d tensors (default 1)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("finetune", help="train the toy detection/segmentation head")
    common(s)
    s.add_argument("--checkpoint", required=True, help="distilled SP checkpoint")
    s.add_argument("--steps", type=int)
    s.add_argument("--unfreeze-sp", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        _log(f"error: {exc}")
        return EXIT_USAGE
    except NumericalError as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERICAL
    except (FormatError, ValueError, OSError, KeyError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
