"""``despeckle`` command line: corrupt, train, denoise, evaluate, schedule.

``train`` and ``evaluate`` read a flat JSON config; every config key can also
be given as a ``--key value`` flag, which overrides the file. Unknown keys are
errors. ``DESPECKLE_SEED`` is used when neither the file nor a flag sets
``seed``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines, imagecore, metrics, sddpm, speckle
from .errors import ConfigError, DespeckleError, EmptyDataset, EmptyInputDir, MissingExternalCsv
from .imagecore import AugmentParams
from .nn import SgdConfig

log = logging.getLogger("despeckle")

REPORT_COLUMNS = ["method", "alpha", "mean_psnr", "mean_ssim", "n_images", "wall_time_s"]
PAPER_ALPHAS = [0.0771, 0.2015, 0.3756, 0.5]
METHODS = ("sddpm", "srad", "nlmeans", "lee", "external")
_REQUIRED = object()

TRAIN_KEYS = {
    "dataset_dir": None,
    "synthetic_count": 4,
    "synthetic_size": 32,
    "output_dir": _REQUIRED,
    "epochs": _REQUIRED,
    "T": _REQUIRED,
    "alpha_min": _REQUIRED,
    "alpha_max": _REQUIRED,
    "patch_size": _REQUIRED,
    "batch_size": 16,
    "patches_per_epoch": None,
    "initial_lr": 0.05,
    "decay_factor": 10.0,
    "decay_every": 20,
    "seed": None,
    "val_fraction": 0.1,
    "workers": 1,
    "arch": "unet",
    "channels": [16, 32, 32],
    "schedule_kind": "linear",
    "rotation_set": [0, 90, 180, 270],
    "noise_means": [0.0, 0.05],
    "noise_variances": [0.0, 0.001],
    "floor": imagecore.DEFAULT_FLOOR,
}

EVAL_KEYS = {
    "dataset_dir": None,
    "synthetic_count": 20,
    "synthetic_size": 64,
    "synthetic_seed": 1000,
    "output_dir": _REQUIRED,
    "methods": _REQUIRED,
    "alpha_levels": PAPER_ALPHAS,
    "seed": None,
    "checkpoint": None,
    "external_csv": None,
    "workers": 1,
    "timing": True,
    "ssim_window": "gaussian",
    "srad_iterations": 100,
    "srad_dt": 0.05,
    "srad_rho": 1.0,
    "srad_q0": 1.0,
    "nlm_patch_radius": 2,
    "nlm_search_radius": 7,
    "nlm_h": 0.1,
    "nlm_sigma": 0.0,
    "lee_window_radius": 3,
    "lee_noise_variance": None,  # None: use alpha**2 of the level being tested
}


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def _env_seed():
    raw = os.environ.get("DESPECKLE_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError("seed", f"DESPECKLE_SEED must be an integer, got {raw!r}") from None


def normalize_config(raw: dict, schema: dict) -> dict:
    """Fill defaults, reject unknown or missing keys and resolve the seed."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(unknown[0], f"unknown config key {unknown[0]!r}")
    out = {}
    for key, default in schema.items():
        if key in raw:
            out[key] = raw[key]
        elif default is _REQUIRED:
            raise ConfigError(key, f"missing required config key {key!r}")
        else:
            out[key] = default
    if out.get("seed") is None:
        out["seed"] = _env_seed()
    return out


def read_config(path, schema: dict, overrides: dict | None = None) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"config {path} is not valid JSON: {exc}") from exc
    if overrides:
        raw = {**raw, **overrides}
    return normalize_config(raw, schema)


def serialize_config(config: dict) -> str:
    return json.dumps(config, sort_keys=True, indent=2)


def build_train_config(flat: dict) -> sddpm.TrainConfig:
    """Turn a normalized flat train config into a :class:`TrainConfig`."""
    try:
        return sddpm.TrainConfig(
            epochs=int(flat["epochs"]),
            T=int(flat["T"]),
            alpha_min=float(flat["alpha_min"]),
            alpha_max=float(flat["alpha_max"]),
            patch_size=int(flat["patch_size"]),
            batch_size=int(flat["batch_size"]),
            patches_per_epoch=None if flat["patches_per_epoch"] is None else int(flat["patches_per_epoch"]),
            sgd=SgdConfig(float(flat["initial_lr"]), float(flat["decay_factor"]), int(flat["decay_every"])),
            seed=int(flat["seed"]),
            augment=AugmentParams(tuple(flat["rotation_set"]), tuple(flat["noise_means"]),
                                  tuple(flat["noise_variances"])),
            val_fraction=float(flat["val_fraction"]),
            workers=int(flat["workers"]),
            arch=flat["arch"],
            channels=tuple(flat["channels"]),
            schedule_kind=flat["schedule_kind"],
            floor=float(flat["floor"]),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("<train>", f"invalid training config: {exc}") from exc


def flatten_train_config(config: sddpm.TrainConfig, extras: dict) -> dict:
    """Inverse of :func:`build_train_config`; ``extras`` holds the harness-only keys."""
    flat = {
        "epochs": config.epochs, "T": config.T, "alpha_min": config.alpha_min,
        "alpha_max": config.alpha_max, "patch_size": config.patch_size, "batch_size": config.batch_size,
        "patches_per_epoch": config.patches_per_epoch, "initial_lr": config.sgd.initial_lr,
        "decay_factor": config.sgd.decay_factor, "decay_every": config.sgd.decay_every,
        "seed": config.seed, "val_fraction": config.val_fraction, "workers": config.workers,
        "arch": config.arch, "channels": list(config.channels), "schedule_kind": config.schedule_kind,
        "rotation_set": list(config.augment.rotation_set), "noise_means": list(config.augment.noise_means),
        "noise_variances": list(config.augment.noise_variances), "floor": config.floor,
    }
    flat.update({k: extras[k] for k in ("dataset_dir", "synthetic_count", "synthetic_size", "output_dir")})
    return flat


def _load_dataset(flat: dict, count_key="synthetic_count", size_key="synthetic_size", seed=0):
    if flat["dataset_dir"]:
        files = imagecore.list_images(flat["dataset_dir"])
        if not files:
            raise EmptyDataset(f"no PGM/PNG images in {flat['dataset_dir']}")
        return [f.name for f in files], [imagecore.load_image(f) for f in files]
    count, size = int(flat[count_key]), int(flat[size_key])
    if count < 1:
        raise EmptyDataset("synthetic_count must be >= 1 when no dataset_dir is given")
    images = imagecore.synthetic_dataset(count, size, seed=seed)
    return [f"synthetic_{i:04d}" for i in range(count)], images


def image_seed(seed: int, *indices: int) -> int:
    """Per-item seed derived from a run seed and item indices."""
    return int(np.random.SeedSequence([seed, *indices]).generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

def _fmt(x, digits=6):
    if isinstance(x, float) and math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    if isinstance(x, float):
        return f"{x:.{digits}f}"
    return str(x)


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != REPORT_COLUMNS:
            raise ConfigError("external_csv", f"{path} must have columns {','.join(REPORT_COLUMNS)}")
        return list(reader)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_schedule(alpha_min: float, alpha_max: float, T: int, out_path) -> None:
    """Write the linear schedule as CSV ``t,alpha_t,delta`` (10 significant digits)."""
    sched = speckle.linear_schedule(alpha_min, alpha_max, T)
    rows = [[t, f"{sched.alpha(t):.10g}", f"{sched.delta:.10g}"] for t in range(1, sched.T + 1)]
    _write_csv(out_path, ["t", "alpha_t", "delta"], rows)


def _output_name(path: Path) -> str:
    return path.name if path.suffix.lower() == ".pgm" else path.stem + ".pgm"


def cmd_corrupt(input_dir, output_dir, alpha: float, kernel: str = "multiplicative", seed: int = 0) -> int:
    """Corrupt every image in ``input_dir``; returns the number written."""
    if kernel not in ("multiplicative", "log"):
        raise ConfigError("kernel", f"kernel must be 'multiplicative' or 'log', got {kernel!r}")
    try:
        files = imagecore.list_images(input_dir)
    except OSError as exc:
        raise EmptyInputDir(f"cannot list {input_dir}: {exc}") from exc
    if not files:
        raise EmptyInputDir(f"no PGM/PNG images in {input_dir}")
    out = imagecore.ensure_dir(output_dir)
    corrupt = speckle.corrupt_multiplicative if kernel == "multiplicative" else speckle.corrupt_log
    rows = []
    for i, f in enumerate(files):
        noisy = corrupt(imagecore.load_image(f), alpha, seed=image_seed(seed, i))
        name = _output_name(f)
        imagecore.save_image(noisy, out / name)
        rows.append([name, f"{alpha:.10g}", kernel, seed])
    _write_csv(out / "manifest.csv", ["filename", "alpha", "kernel", "seed"], rows)
    return len(rows)


def cmd_train(config_path, overrides: dict | None = None) -> Path:
    """Train per the config; writes ``model.npz`` and ``loss_trace.csv``."""
    flat = read_config(config_path, TRAIN_KEYS, overrides)
    config = build_train_config(flat)
    _, images = _load_dataset(flat, seed=config.seed)
    out = imagecore.ensure_dir(flat["output_dir"])
    model, trace = sddpm.train(images, config)
    ckpt = sddpm.save_checkpoint(model, out / "model.npz")
    _write_csv(out / "loss_trace.csv", ["epoch", "train_loss", "val_loss", "lr"],
               [[r.epoch, f"{r.train_loss:.10g}", f"{r.val_loss:.10g}", f"{r.lr:.10g}"] for r in trace])
    (out / "config.json").write_text(serialize_config(flatten_train_config(config, flat)) + "\n")
    print(f"final train loss {trace[-1].train_loss:.6g}, val loss {trace[-1].val_loss:.6g}")
    return ckpt


def make_denoiser(method: str, method_config: dict | None = None, model=None):
    """Callable ``(noisy, alpha) -> denoised`` for a method name.

    ``alpha`` is only used by ``lee`` when its noise variance is not fixed.
    """
    cfg = dict(method_config or {})
    try:
        if method == "sddpm":
            if model is None:
                raise ConfigError("checkpoint", "method 'sddpm' needs a checkpoint")
            return lambda img, alpha=None: sddpm.denoise(model, img)
        if method == "srad":
            sc = baselines.SradConfig(**cfg)
            return lambda img, alpha=None: np.clip(
                baselines.srad(imagecore.clamp_floor(img), sc), 0.0, 1.0)
        if method == "nlmeans":
            nc = baselines.NlmConfig(**cfg)
            return lambda img, alpha=None: baselines.nlmeans(img, nc)
        if method == "lee":
            radius = cfg.pop("window_radius", 3)
            fixed = cfg.pop("noise_variance_estimate", None)
            if cfg:
                raise ConfigError(next(iter(cfg)), f"unknown lee option {next(iter(cfg))!r}")

            def run(img, alpha=None):
                nv = fixed if fixed is not None else (alpha ** 2 if alpha is not None else 0.04)
                return baselines.lee(img, baselines.LeeConfig(radius, nv))
            return run
    except TypeError as exc:
        raise ConfigError(method, f"invalid options for {method}: {exc}") from exc
    raise ConfigError("method", f"unknown method {method!r}")


def cmd_denoise(checkpoint, input_dir, output_dir, method: str = "sddpm", method_config: dict | None = None,
                expect_T=None, expect_alpha_min=None, expect_alpha_max=None) -> int:
    """Denoise every image in ``input_dir``; logs per-image and total wall time."""
    model = None
    if method == "sddpm":
        if checkpoint is None:
            raise ConfigError("checkpoint", "method 'sddpm' needs --checkpoint")
        model = sddpm.load_checkpoint(checkpoint, expect_T, expect_alpha_min, expect_alpha_max)
    run = make_denoiser(method, method_config, model)
    files = imagecore.list_images(input_dir)
    if not files:
        raise EmptyInputDir(f"no PGM/PNG images in {input_dir}")
    out = imagecore.ensure_dir(output_dir)
    rows = []
    start = time.perf_counter()
    for f in files:
        img = imagecore.load_image(f)
        t0 = time.perf_counter()
        result = run(img)
        elapsed = time.perf_counter() - t0
        imagecore.save_image(result, out / _output_name(f))
        log.info("denoised %s in %.4f s", f.name, elapsed)
        rows.append([_output_name(f), f"{elapsed:.6f}"])
    total = time.perf_counter() - start
    log.info("denoised %d images in %.4f s (%.4f s per image)", len(files), total, total / len(files))
    rows.append(["__total__", f"{total:.6f}"])
    _write_csv(out / "timings.csv", ["filename", "seconds"], rows)
    return len(files)


def _method_options(flat: dict, method: str) -> dict:
    if method == "srad":
        return {"iterations": int(flat["srad_iterations"]), "dt": float(flat["srad_dt"]),
                "rho": float(flat["srad_rho"]), "q0": float(flat["srad_q0"])}
    if method == "nlmeans":
        return {"patch_radius": int(flat["nlm_patch_radius"]), "search_radius": int(flat["nlm_search_radius"]),
                "h": float(flat["nlm_h"]), "sigma": float(flat["nlm_sigma"])}
    if method == "lee":
        nv = flat["lee_noise_variance"]
        return {"window_radius": int(flat["lee_window_radius"]),
                "noise_variance_estimate": None if nv is None else float(nv)}
    return {}


def _validate_eval(flat: dict):
    methods = flat["methods"]
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    if not methods or any(m not in METHODS for m in methods):
        raise ConfigError("methods", f"methods must be a non-empty subset of {METHODS}")
    alphas = [float(a) for a in flat["alpha_levels"]]
    if not alphas or any(not 0 < a < 1 for a in alphas):
        raise ConfigError("alpha_levels", "alpha_levels must be non-empty and inside (0, 1)")
    if "sddpm" in methods and not flat["checkpoint"]:
        raise ConfigError("checkpoint", "method 'sddpm' needs a checkpoint")
    if "external" in methods:
        if not flat["external_csv"]:
            raise MissingExternalCsv("method 'external' needs external_csv")
        if not Path(flat["external_csv"]).is_file():
            raise MissingExternalCsv(f"external_csv {flat['external_csv']} not found")
    if flat["ssim_window"] not in ("gaussian", "uniform"):
        raise ConfigError("ssim_window", "ssim_window must be 'gaussian' or 'uniform'")
    return sorted(set(methods)), alphas


def evaluate(flat: dict):
    """Run the method x alpha grid; returns ``(report_rows, gap_rows, probe_rows)``."""
    methods, alphas = _validate_eval(flat)
    seed = int(flat["seed"])
    names, clean = _load_dataset(flat, seed=int(flat["synthetic_seed"]))
    ssim_cfg = metrics.SsimConfig() if flat["ssim_window"] == "gaussian" else metrics.UNIFORM_8
    model = sddpm.load_checkpoint(flat["checkpoint"]) if "sddpm" in methods else None
    workers = int(flat["workers"])
    timing = bool(flat["timing"])

    noisy = {}
    gap_rows = []
    for ai, alpha in enumerate(alphas):
        diffs, p_mult, p_log = [], [], []
        for ii, img in enumerate(clean):
            s = image_seed(seed, ai, ii)
            mult = speckle.corrupt_multiplicative(img, alpha, seed=s)
            logk = speckle.corrupt_log(img, alpha, seed=s)
            noisy[ai, ii] = mult
            diffs.append(float(np.mean(np.abs(mult - logk))))
            p_mult.append(metrics.psnr(img, mult))
            p_log.append(metrics.psnr(img, logk))
        gap_rows.append([f"{alpha:.6g}", _fmt(float(np.mean(diffs)), 8),
                         _fmt(float(np.mean(p_mult))), _fmt(float(np.mean(p_log)))])

    rows = []
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for method in methods:
            if method == "external":
                continue
            run = make_denoiser(method, _method_options(flat, method), model)
            for ai, alpha in enumerate(alphas):
                def one(ii, run=run, ai=ai, alpha=alpha):
                    out = run(noisy[ai, ii], alpha)
                    return metrics.psnr(clean[ii], out), metrics.ssim(clean[ii], out, ssim_cfg)
                t0 = time.perf_counter()
                scores = list(pool.map(one, range(len(clean)))) if pool else [one(i) for i in range(len(clean))]
                wall = time.perf_counter() - t0 if timing else 0.0
                rows.append([method, alpha, float(np.mean([p for p, _ in scores])),
                             float(np.mean([s for _, s in scores])), len(clean), wall])
    finally:
        if pool is not None:
            pool.shutdown()

    out_rows = [[m, f"{a:.6g}", _fmt(p), _fmt(s), n, _fmt(w)] for m, a, p, s, n, w in rows]
    if "external" in methods:
        for r in read_report(flat["external_csv"]):
            out_rows.append([r[c] for c in REPORT_COLUMNS])
    out_rows.sort(key=lambda r: (r[0], float(r[1])))

    probe_rows = []
    if "srad" in methods or "sddpm" in methods:
        probe_clean = imagecore.two_region_image(64)
        probe_noisy = speckle.corrupt_multiplicative(probe_clean, 0.45, seed=image_seed(seed, 999))
        for method in [m for m in methods if m in ("srad", "sddpm")]:
            out = make_denoiser(method, _method_options(flat, method), model)(probe_noisy, 0.45)
            probe_rows.append([method, "0.45", baselines.reverse_speckle_count(out, probe_clean)])
    return out_rows, gap_rows, probe_rows


def cmd_evaluate(config_path, overrides: dict | None = None) -> Path:
    """Write ``report.csv`` (method x alpha PSNR/SSIM grid) plus side reports."""
    flat = read_config(config_path, EVAL_KEYS, overrides)
    rows, gap_rows, probe_rows = evaluate(flat)
    out = imagecore.ensure_dir(flat["output_dir"])
    report = out / "report.csv"
    _write_csv(report, REPORT_COLUMNS, rows)
    _write_csv(out / "kernel_gap.csv", ["alpha", "mean_abs_diff", "psnr_multiplicative", "psnr_log"], gap_rows)
    if probe_rows:
        _write_csv(out / "reverse_speckle.csv", ["method", "alpha", "bright_pixels"], probe_rows)
    return report


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _add_config_flags(parser, schema):
    for key in schema:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=f"override_{key}", type=_parse_value,
                            default=argparse.SUPPRESS, metavar="VALUE")


def _overrides(args) -> dict:
    return {k[len("override_"):]: v for k, v in vars(args).items() if k.startswith("override_")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="despeckle", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-image timings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="dump a linear noise schedule as CSV")
    p.add_argument("--alpha-min", type=float, default=0.005)
    p.add_argument("--alpha-max", type=float, default=0.5)
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--out", required=True)

    p = sub.add_parser("corrupt", help="apply speckle to a directory of images")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--kernel", choices=["multiplicative", "log"], default="multiplicative")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train", help="train a denoiser from a JSON config")
    p.add_argument("--config", required=True)
    _add_config_flags(p, TRAIN_KEYS)

    p = sub.add_parser("denoise", help="denoise a directory of images")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--method", choices=[m for m in METHODS if m != "external"], default="sddpm")
    p.add_argument("--checkpoint")
    p.add_argument("--method-config", help="JSON object of method options, or a path to one")
    p.add_argument("--T", type=int)
    p.add_argument("--alpha-min", type=float)
    p.add_argument("--alpha-max", type=float)

    p = sub.add_parser("evaluate", help="PSNR/SSIM grid over methods and noise levels")
    p.add_argument("--config", required=True)
    _add_config_flags(p, EVAL_KEYS)
    return parser


def _method_config_arg(value):
    if value is None:
        return None
    if Path(value).is_file():
        value = Path(value).read_text()
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError as exc:
        raise ConfigError("method_config", f"--method-config is not valid JSON: {exc}") from exc
    if not isinstance(parsed, dict):
        raise ConfigError("method_config", "--method-config must be a JSON object")
    return parsed


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "schedule":
            cmd_schedule(args.alpha_min, args.alpha_max, args.T, args.out)
        elif args.command == "corrupt":
            seed = args.seed if args.seed is not None else _env_seed()
            n = cmd_corrupt(args.input_dir, args.output_dir, args.alpha, args.kernel, seed)
            print(f"wrote {n} images")
        elif args.command == "train":
            print(cmd_train(args.config, _overrides(args)))
        elif args.command == "denoise":
            n = cmd_denoise(args.checkpoint, args.input_dir, args.output_dir, args.method,
                            _method_config_arg(args.method_config), args.T, args.alpha_min, args.alpha_max)
            print(f"wrote {n} images")
        elif args.command == "evaluate":
            print(cmd_evaluate(args.config, _overrides(args)))
    except DespeckleError as exc:
        print(f"despeckle {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
