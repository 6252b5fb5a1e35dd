"""Command-line entry point: ``bounded {synth,features,train,classify,eval,bench}``.

Option values resolve as command-line flag, then the ``--config`` JSON file,
then built-in defaults. Every command writes a JSON run manifest next to its
main output. Outputs are written through a temp file and renamed, so a failed
command never leaves a partial file behind.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import THRESHOLD_PRESETS, CaConfig, ca_classify
from .features import (DEFAULT_SCALES, ScaleConfig, extract_features, parse_mask,
                       parse_scales, read_features, write_features)
from .io import (CLASS_NAMES, PointCloud, PointCloudFormatError, atomic_write_bytes, read_cloud,
                 write_classified_ply, write_ply)
from .knn import THREADS_ENV, build_index, default_threads
from .metrics import evaluate_cloud, median_report, write_pr_csv, write_report_json
from .net import (ModelFileError, TrainConfig, TrainingError, classify, config_dict, load_model,
                  save_model, train, write_log_csv)
from .synth import PROFILES, SceneSpec, compose, generate_suite, sample_validation

log = logging.getLogger("bounded")

PROFILE_ALIASES = {"default": "default-like", "defaultpp": "defaultpp-like"}
CLOUD_SUFFIXES = (".ply", ".xyz")


class UsageError(Exception):
    pass


# defaults per command; argparse defaults stay None so the config file can fill gaps
DEFAULTS = {
    "synth": {"profile": "defaultpp-like", "seed": 0, "density": 400.0},
    "features": {"scales": ",".join(map(str, DEFAULT_SCALES)), "mask": "full", "threads": None},
    "train": {"iters": 3000, "runs": 5, "seed": 0, "batch_size": 16384, "two_class": False,
              "scales": ",".join(map(str, DEFAULT_SCALES)), "mask": "full", "threads": None,
              "lr": 0.001, "gamma": 2.0, "dropout": 0.5, "log_every": 100},
    "classify": {"threads": None, "ascii": False},
    "eval": {"baseline": None, "threshold": THRESHOLD_PRESETS["default"], "k": 64, "threads": None},
    "bench": {"points": 1_000_000, "repeats": 3, "seed": 0, "threads": None,
              "scales": ",".join(map(str, DEFAULT_SCALES))},
}


def _resolve(args, command):
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = cfg.get(command, cfg)
        unknown = set(cfg) - set(DEFAULTS[command]) - set(vars(args))
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
    defaults = DEFAULTS[command]
    for key in list(defaults) + [k for k in cfg if k not in defaults]:
        if getattr(args, key, None) is None:
            setattr(args, key, cfg.get(key, defaults.get(key)))
    if getattr(args, "threads", "unset") is None:
        args.threads = default_threads()
    return args


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _snapshot(args) -> dict:
    skip = {"func", "config", "verbose"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        out[k] = [str(x) for x in v] if isinstance(v, list) else (str(v) if isinstance(v, Path) else v)
    return out


def write_manifest(path, command, args, inputs, timings, seed=None, extra=None) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": _snapshot(args),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "seed": seed,
        "timings": {k: round(float(v), 6) for k, v in timings.items()},
    }
    if extra:
        manifest.update(extra)
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _manifest_path(output) -> Path:
    output = Path(output)
    return output / "manifest.json" if output.is_dir() else output.with_name(output.name + ".manifest.json")


def _scale_config(args) -> ScaleConfig:
    try:
        scales = parse_scales(args.scales) if isinstance(args.scales, str) else tuple(args.scales)
        return ScaleConfig(scales, parse_mask(args.mask))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _cloud_files(directory) -> list:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in CLOUD_SUFFIXES)
    if not files:
        raise UsageError(f"no .ply or .xyz clouds in {directory}")
    return files


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    args.profile = PROFILE_ALIASES.get(args.profile, args.profile)
    if args.profile not in PROFILES:
        raise UsageError(f"unknown profile {args.profile!r}; choose from {sorted(PROFILES + tuple(PROFILE_ALIASES))}")
    out = Path(args.out)
    t0 = time.perf_counter()
    suite = generate_suite(args.profile, args.seed, density=args.density)
    t1 = time.perf_counter()
    clouds = {}
    for group, items in (("train", suite.train), ("eval", suite.evaluation)):
        for name, cloud in items:
            write_ply(cloud, out / group / f"{name}.ply")
            clouds[name] = {
                "group": group,
                "file": f"{group}/{name}.ply",
                "class_counts": np.bincount(cloud.labels, minlength=3)[:3].tolist(),
                "specs": [s.to_dict() for s in suite.specs[name]],
            }
    for (name, _), mask in zip(suite.train, suite.validation):
        clouds[name]["validation"] = np.flatnonzero(mask).tolist()
    dataset = {"profile": suite.profile, "seed": suite.seed, "density": args.density, "clouds": clouds,
               "pooled_train_counts": suite.pooled_counts().tolist()}
    atomic_write_bytes(out / "dataset.json", (json.dumps(dataset, indent=1, sort_keys=True) + "\n").encode())
    t2 = time.perf_counter()
    write_manifest(out / "manifest.json", "synth", args, [], {"generate": t1 - t0, "write": t2 - t1},
                   seed=args.seed)
    print(f"wrote {len(clouds)} clouds to {out} (train counts per class: {dataset['pooled_train_counts']})")
    return 0


# --------------------------------------------------------------------------
# features
# --------------------------------------------------------------------------

def cmd_features(args) -> int:
    config = _scale_config(args)
    t0 = time.perf_counter()
    cloud = read_cloud(args.cloud)
    t1 = time.perf_counter()
    if len(cloud) < config.max_scale:
        raise UsageError(f"{args.cloud} has {len(cloud)} points, fewer than the largest scale {config.max_scale}")
    index = build_index(cloud, threads=args.threads)
    t2 = time.perf_counter()
    feats = extract_features(cloud, config, index=index, threads=args.threads, dtype=np.float32)
    t3 = time.perf_counter()
    write_features(args.out, feats, config.scales, config.feature_mask)
    t4 = time.perf_counter()
    timings = {"read": t1 - t0, "index": t2 - t1, "features": t3 - t2, "write": t4 - t3}
    rate = len(cloud) / max(t3 - t1, 1e-12)
    write_manifest(_manifest_path(args.out), "features", args, [args.cloud], timings,
                   extra={"points": len(cloud), "points_per_second": rate})
    print(f"{len(cloud)} points, {len(config.scales)} scales: {rate:,.0f} points/s "
          f"(index {t2 - t1:.2f} s, features {t3 - t2:.2f} s)")
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def _labeled(cloud: PointCloud, path) -> PointCloud:
    if not cloud.has_labels:
        raise UsageError(f"{path} carries no per-point labels")
    return cloud


def _training_inputs(args, config: ScaleConfig):
    """Clouds, their features and validation masks for ``train``."""
    inputs = []
    if args.dataset:
        root = Path(args.dataset)
        try:
            meta = json.loads((root / "dataset.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"{root} is not a synth dataset: {exc}") from exc
        entries = [(name, e) for name, e in sorted(meta["clouds"].items()) if e["group"] == "train"]
        paths = [root / e["file"] for _, e in entries]
        clouds = [_labeled(read_cloud(p), p) for p in paths]
        masks = []
        for cloud, (_, e) in zip(clouds, entries):
            m = np.zeros(len(cloud), dtype=bool)
            m[np.asarray(e.get("validation", []), dtype=np.int64)] = True
            masks.append(m)
        inputs.extend(paths)
        feature_files = []
    else:
        if not args.cloud:
            raise UsageError("train needs --dataset or at least one --cloud")
        paths = [Path(p) for p in args.cloud]
        clouds = [_labeled(read_cloud(p), p) for p in paths]
        rng = np.random.default_rng(np.random.SeedSequence([int(args.seed), 7]))
        masks = sample_validation(rng, [c.labels for c in clouds])
        inputs.extend(paths)
        feature_files = [Path(p) for p in (args.features or [])]
        if feature_files and len(feature_files) != len(paths):
            raise UsageError("give one --features file per --cloud, or none")
    feats = []
    t0 = time.perf_counter()
    if feature_files:
        for cloud, fpath in zip(clouds, feature_files):
            ff = read_features(fpath)
            if len(ff.features) != len(cloud):
                raise UsageError(f"{fpath} has {len(ff.features)} rows; its cloud has {len(cloud)} points")
            if ff.scales != config.scales or ff.feature_mask != config.feature_mask:
                config = ScaleConfig(ff.scales, ff.feature_mask)
            feats.append(ff.features)
        inputs.extend(feature_files)
    else:
        for cloud in clouds:
            feats.append(extract_features(cloud, config, threads=args.threads, dtype=np.float32))
    return clouds, feats, masks, config, inputs, time.perf_counter() - t0


def cmd_train(args) -> int:
    config = _scale_config(args)
    clouds, feats, masks, config, inputs, t_features = _training_inputs(args, config)
    x = np.concatenate([f[~m] for f, m in zip(feats, masks)])
    y = np.concatenate([c.labels[~m] for c, m in zip(clouds, masks)])
    vx = np.concatenate([f[m] for f, m in zip(feats, masks)])
    vy = np.concatenate([c.labels[m] for c, m in zip(clouds, masks)])
    if len(vx) == 0:
        raise UsageError("validation selection is empty")
    tc = TrainConfig(lr=args.lr, batch_size=args.batch_size, iterations=args.iters, gamma=args.gamma,
                     dropout_p=args.dropout, runs=args.runs, seed=args.seed, two_class=args.two_class,
                     log_every=args.log_every)
    t0 = time.perf_counter()
    result = train(x, y, vx, vy, tc, scales=config.scales, feature_mask=config.feature_mask)
    t1 = time.perf_counter()
    out = Path(args.out)
    save_model(result.model, out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    write_log_csv(log_path, result.log)
    runs = [{"seed": r.seed, "final_val_loss": r.val_loss, "failed": r.failed} for r in result.runs]
    write_manifest(_manifest_path(out), "train", args, inputs, {"preprocessing": t_features, "training": t1 - t0},
                   seed=args.seed, extra={"train_config": config_dict(tc), "runs": runs,
                                          "best_run": result.best_run, "log": str(log_path),
                                          "pool_counts": np.bincount(y, minlength=3)[:3].tolist()})
    print(f"best run {result.best_run}: validation loss {result.runs[result.best_run].val_loss:.6f}; "
          f"model -> {out}, log -> {log_path}")
    return 0


# --------------------------------------------------------------------------
# classify / eval
# --------------------------------------------------------------------------

def _predict(model, cloud, feature_path, threads):
    """Predictions and a (preprocessing, classification) timing split."""
    t0 = time.perf_counter()
    if feature_path:
        ff = read_features(feature_path)
        if ff.scales != tuple(model.scales) or ff.feature_mask != model.feature_mask:
            raise UsageError(f"{feature_path} was computed with scales {ff.scales} / mask {ff.feature_mask:#x}; "
                             f"the model expects {tuple(model.scales)} / {model.feature_mask:#x}")
        feats = ff.features
        if len(feats) != len(cloud):
            raise UsageError(f"{feature_path} has {len(feats)} rows; the cloud has {len(cloud)} points")
    else:
        cfg = ScaleConfig(tuple(model.scales), model.feature_mask)
        if len(cloud) < cfg.max_scale:
            raise UsageError(f"cloud has {len(cloud)} points, fewer than the largest scale {cfg.max_scale}")
        feats = extract_features(cloud, cfg, threads=threads, dtype=np.float32)
    t1 = time.perf_counter()
    pred, probs = classify(model, feats)
    t2 = time.perf_counter()
    return pred.astype(np.uint8), probs, {"preprocessing": t1 - t0, "classification": t2 - t1}


def _load_model(path):
    try:
        return load_model(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def cmd_classify(args) -> int:
    model = _load_model(args.model)
    cloud = read_cloud(args.cloud)
    pred, probs, timings = _predict(model, cloud, args.features, args.threads)
    out = Path(args.out)
    write_classified_ply(cloud, pred, out, binary=not args.ascii)
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".labels.csv")
    header = "index,label," + ",".join(f"p_{CLASS_NAMES[c]}" for c in range(probs.shape[1]))
    rows = [header] + [f"{i},{p}," + ",".join(repr(float(v)) for v in pr)
                       for i, (p, pr) in enumerate(zip(pred.tolist(), probs))]
    atomic_write_bytes(csv_path, ("\n".join(rows) + "\n").encode("ascii"))
    inputs = [args.model, args.cloud] + ([args.features] if args.features else [])
    counts = np.bincount(pred, minlength=3)[:3].tolist()
    write_manifest(_manifest_path(out), "classify", args, inputs, timings, extra={"predicted_counts": counts})
    print(f"{len(cloud)} points -> {counts} (non-edge, sharp-edge, boundary); "
          f"preprocessing {timings['preprocessing']:.2f} s, classification {timings['classification']:.3f} s")
    return 0


def cmd_eval(args) -> int:
    files = [Path(p) for p in (args.cloud or [])]
    if args.eval_dir:
        files += _cloud_files(args.eval_dir)
    if not files:
        raise UsageError("eval needs --eval-dir or at least one --cloud")
    if args.baseline is None and not args.model:
        raise UsageError("eval needs --model or --baseline ca")
    if args.baseline not in (None, "ca"):
        raise UsageError(f"unknown baseline {args.baseline!r}")
    model = _load_model(args.model) if args.baseline is None else None
    ca = CaConfig(args.k, args.threshold) if args.baseline == "ca" else None
    per_cloud = {}
    timings = {"preprocessing": 0.0, "classification": 0.0}
    for path in files:
        cloud = read_cloud(path)
        if not cloud.has_labels:
            raise UsageError(f"evaluation cloud {path} carries no labels")
        if model is not None:
            pred, _, t = _predict(model, cloud, None, args.threads)
            for k in timings:
                timings[k] += t[k]
            labels = np.where(cloud.labels == 2, 0, cloud.labels) if model.two_class else cloud.labels
        else:
            t0 = time.perf_counter()
            pred = ca_classify(cloud, ca, index=build_index(cloud, threads=args.threads))
            timings["classification"] += time.perf_counter() - t0
            labels = cloud.labels
        per_cloud[path.stem] = evaluate_cloud(pred, labels, classes=(1, 2))
    report = {"clouds": per_cloud, "medians": {}, "medians_where_present": {}}
    pr_rows = []
    for cls in (1, 2):
        name = CLASS_NAMES[cls]
        report["medians"][name] = median_report([s[cls] for s in per_cloud.values()])
        present = [s[cls] for s in per_cloud.values() if s[cls]["support"] > 0]
        report["medians_where_present"][name] = median_report(present) if present else None
        pr_rows += [(c, name, s[cls]["precision"], s[cls]["recall"]) for c, s in per_cloud.items()]
    out = Path(args.out)
    write_report_json(out, report)
    pr_path = Path(args.pr_csv) if args.pr_csv else out.with_suffix(".pr.csv")
    write_pr_csv(pr_path, pr_rows)
    inputs = files + ([Path(args.model)] if model is not None else [])
    write_manifest(_manifest_path(out), "eval", args, inputs, timings)
    sharp = report["medians"]["sharp-edge"]
    print(f"{len(files)} clouds; sharp-edge median precision {sharp['precision']:.3f} "
          f"recall {sharp['recall']:.3f} f1 {sharp['f1']:.3f}; report -> {out}")
    return 0


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

def _bench_cloud(n_points: int, seed: int) -> PointCloud:
    """Closed boxes tiled until the cloud holds about ``n_points`` points."""
    density = 400.0
    area_per_box = 6 * 3.0 ** 2
    count = max(1, int(round(n_points / (area_per_box * density))))
    specs = [SceneSpec("box", density=density, size=(3.0, 3.0, 3.0), noise=0.05) for _ in range(count)]
    return compose(specs, seed)


def cmd_bench(args) -> int:
    config = _scale_config(argparse.Namespace(scales=args.scales, mask="full"))
    if args.cloud:
        cloud = read_cloud(args.cloud)
        inputs = [args.cloud]
    else:
        cloud = _bench_cloud(args.points, args.seed)
        inputs = []
    model = _load_model(args.model) if args.model else None
    phases = {"index": [], "features": [], "inference": [], "total": []}
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        index = build_index(cloud, threads=args.threads)
        t1 = time.perf_counter()
        feats = extract_features(cloud, config, index=index, threads=args.threads, dtype=np.float32)
        t2 = time.perf_counter()
        if model is not None:
            classify(model, feats)
        t3 = time.perf_counter()
        for k, v in zip(phases, (t1 - t0, t2 - t1, t3 - t2, t3 - t0)):
            phases[k].append(v)
    med = {k: float(np.median(v)) for k, v in phases.items()}
    report = {"points": len(cloud), "scales": list(config.scales), "threads": args.threads,
              "repeats": args.repeats, "median_seconds": med, "all_seconds": phases,
              "points_per_second": len(cloud) / max(med["index"] + med["features"], 1e-12)}
    out = Path(args.out) if args.out else None
    if out is not None:
        atomic_write_bytes(out, (json.dumps(report, indent=2) + "\n").encode())
        write_manifest(_manifest_path(out), "bench", args, inputs, med, seed=args.seed)
    print(f"{len(cloud)} points: index {med['index']:.2f} s, features {med['features']:.2f} s, "
          f"inference {med['inference']:.2f} s (median of {args.repeats}); "
          f"{report['points_per_second']:,.0f} points/s preprocessing")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bounded", description="Point cloud edge and boundary classification.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, threads=True):
        sp.add_argument("--config", help="JSON file with option values (flags take precedence)")
        if threads:
            sp.add_argument("--threads", type=_positive_int,
                            help=f"worker threads (default: ${THREADS_ENV} or the CPU count)")

    s = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    common(s, threads=False)
    s.add_argument("--profile", help="default-like (no boundaries) or defaultpp-like")
    s.add_argument("--seed", type=int)
    s.add_argument("--density", type=float, help="points per unit area")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("features", help="compute multi-scale features for a cloud")
    common(f)
    f.add_argument("--cloud", required=True)
    f.add_argument("--out", required=True, help="feature file (BNDF)")
    f.add_argument("--scales", help="comma-separated neighborhood sizes, descending")
    f.add_argument("--mask", help="feature mask: a preset name or an integer bitfield")
    f.set_defaults(func=cmd_features)

    t = sub.add_parser("train", help="train a classifier")
    common(t)
    t.add_argument("--dataset", help="directory written by `bounded synth`")
    t.add_argument("--cloud", action="append", help="labeled training cloud (repeatable)")
    t.add_argument("--features", action="append", help="precomputed features, one per --cloud")
    t.add_argument("--out", required=True, help="model file (BNDM)")
    t.add_argument("--log", help="training log CSV (default: next to the model)")
    t.add_argument("--iters", type=_positive_int, help="iterations per run (3000 or 8000 in the reference setups)")
    t.add_argument("--runs", type=_positive_int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=_positive_int)
    t.add_argument("--lr", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--dropout", type=float)
    t.add_argument("--log-every", type=_positive_int)
    t.add_argument("--2c", dest="two_class", action="store_const", const=True,
                   help="two classes only: boundary points count as non-edge")
    t.add_argument("--scales")
    t.add_argument("--mask")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("classify", help="classify a cloud with a trained model")
    common(c)
    c.add_argument("--model", required=True)
    c.add_argument("--cloud", required=True)
    c.add_argument("--features", help="precomputed features for the cloud")
    c.add_argument("--out", required=True, help="colored PLY output")
    c.add_argument("--csv", help="per-point label CSV (default: next to the PLY)")
    c.add_argument("--ascii", action="store_const", const=True, help="write an ascii PLY")
    c.set_defaults(func=cmd_classify)

    e = sub.add_parser("eval", help="score a model or the CA baseline on labeled clouds")
    common(e)
    e.add_argument("--model")
    e.add_argument("--eval-dir")
    e.add_argument("--cloud", action="append")
    e.add_argument("--baseline", help="'ca' for the covariance-analysis baseline")
    e.add_argument("--threshold", type=float,
                   help="CA threshold (presets: 0.025 for hand-labeled scans, 0.08 for CAD models)")
    e.add_argument("--k", type=_positive_int, help="CA neighborhood size")
    e.add_argument("--out", required=True, help="JSON report")
    e.add_argument("--pr-csv", help="per-cloud precision/recall CSV")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time index build, feature extraction and inference")
    common(b)
    b.add_argument("--cloud", help="cloud to time (default: a synthetic cloud)")
    b.add_argument("--points", type=_positive_int, help="size of the synthetic cloud")
    b.add_argument("--model", help="also time inference with this model")
    b.add_argument("--repeats", type=_positive_int)
    b.add_argument("--seed", type=int)
    b.add_argument("--scales")
    b.add_argument("--out", help="JSON report")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _resolve(args, args.command)
        return args.func(args)
    except UsageError as exc:
        parser.exit(2, f"bounded {args.command}: error: {exc}\n")
    except (PointCloudFormatError, ModelFileError, TrainingError, ValueError, FileNotFoundError) as exc:
        print(f"bounded {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
