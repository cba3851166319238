"""Command-line interface: simulate / train / track / baseline / benchmark /
import-eval. All configs are JSON documents validated against the schemas in
``SCHEMAS``; every command is deterministic given its config and seed."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import baselines, bench, synth, tracker
from .distill import TrainConfig, TrainingDiverged, train
from .ltsr import read_ltsr, write_ltsr
from .nn import ArchDescriptor, CHANNEL_SETS, ConvNet
from .report import MetricsTable, emit_report, write_rows_csv

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

_OPTICS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "wavelength": _NUM, "medium_index": _NUM, "pixel_pitch": _NUM,
        "band_limit": _NUM, "oil_index": _NUM,
    },
}

_SETUP_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "optics": _OPTICS_SCHEMA, "radius_um": _NUM, "n_particle": _NUM,
        "noise_snr": _NUM,
    },
}

_THRESHOLDS_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "additionalProperties": False,
        "required": ["experiment", "metric"],
        "properties": {
            "experiment": {"type": "string"}, "condition": {"type": "string"},
            "metric": {"type": "string"}, "max": _NUM, "min": _NUM,
        },
    },
}

SCHEMAS = {
    "simulate.shapes": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "canvas": _PAIR, "n_frames": _INT, "n_particles": _INT,
            "shape": {"enum": list(synth.SHAPES)}, "snr": _NUM,
            "min_separation": _NUM, "seed": _INT,
        },
    },
    "simulate.holo": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "canvas": _PAIR, "n_frames": _INT, "n_particles": _INT,
            "radius_um": _NUM, "n_particle": _NUM, "z_range": _PAIR,
            "noise_snr": _NUM, "min_separation": _NUM, "seed": _INT,
            "optics": _OPTICS_SCHEMA,
        },
    },
    "simulate.brownian": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "diffusion": _NUM, "frame_interval": _NUM, "n_frames": _INT,
            "n_traces": _INT, "localization_noise": _NUM, "seed": _INT,
        },
    },
    "train": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "batch_size": _INT, "n_batches": _INT, "learning_rate": _NUM,
            "translation_bound": _NUM, "rotate": {"type": "boolean"},
            "mirror": {"type": "boolean"}, "dz_range": _PAIR,
            "log_s_range": _PAIR, "dropout_rate": _NUM, "eps": _NUM,
            "lambda_disagree": _NUM, "lambda_consist": _NUM, "seed": _INT,
            "normalize": {"enum": ["standard", "center", "none"]},
            "optics": _OPTICS_SCHEMA,
        },
    },
    "benchmark.rmse": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "shapes": {"type": "array", "items": {"enum": list(synth.SHAPES)}},
            "snrs": {"type": "array", "items": _NUM}, "n_images": _INT,
            "train_snr": _NUM, "n_batches": _INT, "canvas": _INT,
            "position_jitter": _NUM, "seed": _INT,
            "thresholds": _THRESHOLDS_SCHEMA,
        },
    },
    "benchmark.discriminate": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "shapes": {"type": "array", "items": {"enum": list(synth.SHAPES)}},
            "n_images": _INT, "snr": _NUM, "n_batches": _INT, "canvas": _INT,
            "position_jitter": _NUM, "seed": _INT,
            "thresholds": _THRESHOLDS_SCHEMA,
        },
    },
    "benchmark.detect": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "particle_counts": {"type": "array", "items": _INT},
            "separations": {"type": "array", "items": _NUM},
            "n_frames": _INT, "n_empty_frames": _INT, "snr": _NUM,
            "canvas": _INT, "match_radius": _NUM, "alpha": _NUM,
            "quantile": _NUM, "calibration_quantile": _NUM,
            "min_distance": _NUM, "n_batches": _INT,
            "seed": _INT, "thresholds": _THRESHOLDS_SCHEMA,
        },
    },
    "benchmark.axial": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "setup": _SETUP_SCHEMA, "n_batches": _INT, "crop_size": _INT,
            "dz_train": _PAIR, "z_eval": _PAIR, "z_band": _NUM,
            "n_z_steps": _INT, "n_images_per_z": _INT, "canvas": _INT,
            "diffusion": _NUM, "frame_interval": _NUM, "n_traces": _INT,
            "trace_length": _INT, "localization_noise": _NUM,
            "movie_particles": _INT, "movie_frames": _INT, "seed": _INT,
            "thresholds": _THRESHOLDS_SCHEMA,
        },
    },
    "benchmark.polarizability": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "setup": _SETUP_SCHEMA, "n_batches": _INT, "crop_size": _INT,
            "dz_train": _PAIR, "canvas": _INT,
            "radii": {"type": "array", "items": _NUM},
            "indices": {"type": "array", "items": _NUM},
            "n_images_per_cell": _INT, "n_calibration": _INT,
            "low_signal_alpha": _NUM,
            "bidispersed_radii": _PAIR, "n_bidispersed": _INT, "seed": _INT,
            "thresholds": _THRESHOLDS_SCHEMA,
        },
    },
}

GT_HEADER = ("frame", "id", "x", "y", "z", "polarizability")
DETECTIONS_HEADER = ("frame", "x_px", "y_px", "z_um", "polarizability_um3", "score")
TRACKS_HEADER = ("track_id", "frame", "x", "y", "z", "polarizability")


class CliError(RuntimeError):
    pass


def _load_config(path, schema_key):
    with open(path) as fh:
        cfg = json.load(fh)
    try:
        import jsonschema

        jsonschema.validate(cfg, SCHEMAS[schema_key])
    except ImportError:  # pragma: no cover - jsonschema is a test/CLI extra
        if not isinstance(cfg, dict):
            raise CliError(f"{path}: config must be a JSON object")
        extra = set(cfg) - set(SCHEMAS[schema_key]["properties"])
        if extra:
            raise CliError(f"{path}: unknown config keys {sorted(extra)}")
    except Exception as err:
        raise CliError(f"{path}: invalid config: {err}") from err
    return cfg


def _tuplify(value):
    return tuple(value) if isinstance(value, list) else value


def _build_setup(data):
    data = dict(data or {})
    optics = data.pop("optics", None)
    setup = bench.HoloSetup(**data)
    if optics is not None:
        setup.optics = synth.OpticsConfig(**optics)
    return setup


# -- simulate ----------------------------------------------------------------


def _cmd_simulate(args):
    cfg = _load_config(args.config, f"simulate.{args.kind}")
    os.makedirs(args.out, exist_ok=True)
    gt_rows = []
    if args.kind == "shapes":
        canvas = tuple(int(v) for v in cfg.get("canvas", (128, 128)))
        n_frames = int(cfg.get("n_frames", 1))
        n = int(cfg.get("n_particles", 10))
        shape = cfg.get("shape", "sphere")
        snr = float(cfg.get("snr", 10.0))
        sep = float(cfg.get("min_separation", 10.0))
        rng = np.random.default_rng(int(cfg.get("seed", 0)))
        frames = np.empty((n_frames,) + canvas, dtype=np.float32)
        for fi in range(n_frames):
            pts = bench.scatter_positions(rng, n, canvas[0], margin=12.0, min_sep=sep)
            specs = [
                synth.default_spec(shape, p, orientation=rng.uniform(0, 2 * np.pi))
                for p in pts
            ]
            img = synth.render_frame(specs, canvas)
            frames[fi] = synth.add_noise(img, snr, seed=rng.integers(2**31))
            for pid, p in enumerate(pts):
                gt_rows.append((fi, pid, p[0], p[1], float("nan"), float("nan")))
    elif args.kind == "holo":
        canvas = tuple(int(v) for v in cfg.get("canvas", (128, 128)))
        n_frames = int(cfg.get("n_frames", 1))
        n = int(cfg.get("n_particles", 5))
        setup = bench.HoloSetup(
            radius_um=float(cfg.get("radius_um", 0.228)),
            n_particle=float(cfg.get("n_particle", 1.58)),
            noise_snr=float(cfg.get("noise_snr", 20.0)),
        )
        if "optics" in cfg:
            setup.optics = synth.OpticsConfig(**cfg["optics"])
        z_lo, z_hi = cfg.get("z_range", (-2.0, 2.0))
        sep = float(cfg.get("min_separation", 20.0))
        rng = np.random.default_rng(int(cfg.get("seed", 0)))
        alpha = setup.reference_alpha()
        pitch = setup.optics.pixel_pitch
        frames = np.empty((n_frames,) + canvas + (2,), dtype=np.float32)
        for fi in range(n_frames):
            pts = bench.scatter_positions(rng, n, canvas[0], margin=16.0, min_sep=sep)
            total = None
            for pid, p in enumerate(pts):
                z = rng.uniform(z_lo, z_hi)
                fld = synth.simulate_hologram(
                    setup.radius_um, setup.n_particle,
                    (p[0] * pitch, p[1] * pitch, z), setup.optics, canvas,
                )
                scattered = fld.data - 1.0
                total = scattered if total is None else total + scattered
                gt_rows.append((fi, pid, p[0], p[1], z, alpha))
            channels = np.stack([(1.0 + total).real, total.imag], axis=-1)
            if np.isfinite(setup.noise_snr):
                peak = np.abs(total).max()
                channels = channels + rng.normal(
                    0.0, peak / setup.noise_snr / max(n, 1), channels.shape
                )
            frames[fi] = channels
    else:  # brownian
        bcfg = synth.BrownianConfig(**{k: cfg[k] for k in cfg})
        traces = synth.simulate_brownian_traces(bcfg)
        frames = traces.astype(np.float32)
        for tid in range(traces.shape[0]):
            for fi in range(traces.shape[1]):
                gt_rows.append(
                    (fi, tid, traces[tid, fi, 0], traces[tid, fi, 1],
                     traces[tid, fi, 2], float("nan"))
                )
    write_ltsr(os.path.join(args.out, "frames.ltsr"), frames)
    gt_rows.sort(key=lambda r: (r[0], r[1]))
    write_rows_csv(
        os.path.join(args.out, "ground_truth.csv"), GT_HEADER,
        [(int(f), int(i), float(x), float(y), float(z), float(a))
         for f, i, x, y, z, a in gt_rows],
    )
    print(f"wrote {frames.shape[0]} frames to {args.out}")
    return 0


# -- train -------------------------------------------------------------------


def _cmd_train(args):
    cfg = _load_config(args.config, "train") if args.config else {}
    optics = None
    if "optics" in cfg:
        optics = synth.OpticsConfig(**cfg.pop("optics"))
    normalize = cfg.pop("normalize", "center")
    for key in ("dz_range", "log_s_range"):
        if key in cfg:
            cfg[key] = _tuplify(cfg[key])
    crop = read_ltsr(args.crop)
    if crop.ndim == 2:
        crop = crop[..., None]
    if crop.ndim != 3:
        raise CliError(f"{args.crop}: crop must be (H, W) or (H, W, C)")
    desc = ArchDescriptor(
        in_channels=crop.shape[-1], channels=args.channels, normalize=normalize
    )
    tcfg = TrainConfig(**cfg)
    try:
        result = train(
            crop, tcfg, desc=desc, optics=optics,
            progress=lambda s, d, c: print(
                f"step {s}: disagreement={d:.4f} consistency={c:.4f}", flush=True
            ),
        )
    except TrainingDiverged as err:
        dump = args.out + ".diverged.ltsr"
        if err.batch is not None:
            write_ltsr(dump, np.asarray(err.batch, dtype=np.float32))
        print(f"error: {err} (offending batch dumped to {dump})", file=sys.stderr)
        return 1
    result.model.save(args.out)
    write_rows_csv(
        args.out + ".loss.csv", ("step", "disagreement", "consistency"),
        [(int(s), float(d), float(c)) for s, d, c in result.loss_curve],
    )
    print(f"saved checkpoint to {args.out}")
    return 0


# -- frame IO ----------------------------------------------------------------


def _load_frames(path):
    """A directory of .ltsr files (sorted) or one stack file (F,H,W[,C])."""
    if os.path.isdir(path):
        names = sorted(f for f in os.listdir(path) if f.endswith(".ltsr"))
        if not names:
            raise CliError(f"{path}: no .ltsr files")
        return [read_ltsr(os.path.join(path, n)) for n in names]
    arr = read_ltsr(path)
    if arr.ndim == 2:
        return [arr]
    if arr.ndim in (3, 4):
        return list(arr)
    raise CliError(f"{path}: expected 2-4 dims, got {arr.ndim}")


# -- track -------------------------------------------------------------------


def _cmd_track(args):
    model = ConvNet.load(args.ckpt)
    frames = _load_frames(args.frames)
    optics = None
    if args.optics:
        with open(args.optics) as fh:
            optics = synth.OpticsConfig(**json.load(fh))
    calib = None
    if args.calibration:
        with open(args.calibration) as fh:
            calib = json.load(fh)
    os.makedirs(args.out, exist_ok=True)

    bundles = []
    scores = []
    for img in frames:
        if img.ndim == 2:
            img = img[..., None]
        bundle, _ = model.forward(img)
        w = bundle.weights()[0]
        c = tracker.cluster_metric(bundle.feature_maps()[0])
        bundles.append((bundle, w))
        scores.append(tracker.detection_score(w, c, args.alpha))
    threshold = float(
        np.quantile(np.concatenate([s.ravel() for s in scores]), args.quantile)
    )
    per_frame = []
    det_rows = []
    for fi, ((bundle, w), score) in enumerate(zip(bundles, scores)):
        seeds = tracker.detect(score, args.quantile, args.min_dist, threshold=threshold)
        dets = []
        for seed in seeds:
            det = tracker.refine(seed, bundle, w)
            det.frame = fi
            if det.z is not None and optics is not None:
                det.z = tracker.correct_axial(det.z, optics)
            if det.sigma is not None and calib is not None:
                det.polarizability = float(tracker.calibrate_polarizability(
                    det.sigma, calib["radius_um"], calib["n_particle"],
                    calib["n_medium"], calib["sigma_ref"],
                ))
            dets.append(det)
        per_frame.append(dets)
        for d in dets:
            det_rows.append((
                fi, d.x, d.y,
                float("nan") if d.z is None else d.z,
                float("nan") if d.polarizability is None else d.polarizability,
                d.score,
            ))
    write_rows_csv(os.path.join(args.out, "detections.csv"), DETECTIONS_HEADER,
                   [(int(f),) + tuple(float(v) for v in r)
                    for f, *r in det_rows])

    tracks = tracker.link_tracks(per_frame, max_dist=args.max_link_dist)
    track_rows = []
    tid = 0
    for tr in tracks:
        if len(tr.detections) < args.min_track_length:
            continue
        for d in tr.detections:
            track_rows.append((
                tid, d.frame, d.x, d.y,
                float("nan") if d.z is None else d.z,
                float("nan") if d.polarizability is None else d.polarizability,
            ))
        tid += 1
    write_rows_csv(os.path.join(args.out, "tracks.csv"), TRACKS_HEADER,
                   [(int(t), int(f)) + tuple(float(v) for v in r)
                    for t, f, *r in track_rows])
    print(f"{len(det_rows)} detections, {tid} tracks -> {args.out}")
    return 0


# -- baseline ----------------------------------------------------------------


def _cmd_baseline(args):
    frames = _load_frames(args.frames)
    localize = (baselines.centroid_localize if args.method == "centroid"
                else baselines.radial_center_localize)
    rows = []
    for fi, img in enumerate(frames):
        if img.ndim == 3:
            if img.shape[-1] != 1:
                raise CliError("baselines need single-channel intensity frames")
            img = img[..., 0]
        x, y = localize(np.asarray(img, dtype=float))
        rows.append((fi, float(x), float(y)))
    write_rows_csv(args.out, ("frame", "x_px", "y_px"), rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


# -- benchmark ---------------------------------------------------------------

_EXPERIMENTS = {
    "rmse": (bench.RmseConfig, bench.run_rmse_experiment,
             ("shapes", "snrs")),
    "discriminate": (bench.DiscriminationConfig, bench.run_discrimination_experiment,
                     ("shapes",)),
    "detect": (bench.DetectionConfig, bench.run_detection_experiment,
               ("particle_counts", "separations")),
    "axial": (bench.AxialConfig, bench.run_axial_experiment,
              ("dz_train", "z_eval")),
    "polarizability": (bench.PolarizabilityConfig, bench.run_polarizability_experiment,
                       ("dz_train", "radii", "indices", "bidispersed_radii")),
}


def check_thresholds(table: MetricsTable, thresholds):
    """Return a list of human-readable violation strings."""
    violations = []
    for th in thresholds or []:
        vals = [
            r["value"] for r in table.rows
            if r["experiment"] == th["experiment"]
            and r["metric"] == th["metric"]
            and (("condition" not in th) or r["condition"] == th["condition"])
        ]
        if not vals:
            violations.append(f"no rows matched threshold {th}")
            continue
        for v in vals:
            if "max" in th and v > th["max"]:
                violations.append(f"{th['experiment']}/{th['metric']}: {v} > {th['max']}")
            if "min" in th and v < th["min"]:
                violations.append(f"{th['experiment']}/{th['metric']}: {v} < {th['min']}")
    return violations


def _cmd_benchmark(args):
    cfg = _load_config(args.config, f"benchmark.{args.kind}") if args.config else {}
    thresholds = cfg.pop("thresholds", None)
    cls, runner, tuple_keys = _EXPERIMENTS[args.kind]
    for key in tuple_keys:
        if key in cfg:
            cfg[key] = _tuplify(cfg[key])
    if "setup" in cfg:
        cfg["setup"] = _build_setup(cfg["setup"])
    table, plots = runner(cls(**cfg))
    emit_report({args.kind: table}, args.out, plots)
    violations = check_thresholds(table, thresholds)
    for v in violations:
        print(f"THRESHOLD VIOLATED: {v}", file=sys.stderr)
    print(f"report written to {args.out}")
    return 1 if violations else 0


# -- import (external data evaluation) ---------------------------------------


def _cmd_import(args):
    model = ConvNet.load(args.ckpt)
    frames = _load_frames(args.frames)
    truth = {}
    with open(args.truth) as fh:
        import csv as _csv

        for row in _csv.DictReader(fh):
            truth.setdefault(int(float(row["frame"])), []).append(
                (float(row["x"]), float(row["y"]))
            )
    table = MetricsTable()
    tp = fp = fn = 0
    sq = []
    for fi, img in enumerate(frames):
        if img.ndim == 2:
            img = img[..., None]
        dets = tracker.detect_particles(
            model, img, alpha=args.alpha, quantile=args.quantile,
            min_distance=args.min_dist, frame=fi,
        )
        pred = [(d.x, d.y) for d in dets]
        gt = truth.get(fi, [])
        stats = bench.match_detections(pred, gt, args.match_radius)
        tp += stats["TP"]
        fp += stats["FP"]
        fn += stats["FN"]
        if pred and gt:
            cost = np.hypot(
                np.subtract.outer([p[0] for p in pred], [q[0] for q in gt]),
                np.subtract.outer([p[1] for p in pred], [q[1] for q in gt]),
            )
            from scipy.optimize import linear_sum_assignment

            rows, cols = linear_sum_assignment(cost)
            sq.extend(cost[r, c] ** 2 for r, c in zip(rows, cols)
                      if cost[r, c] <= args.match_radius)
    table.add("import", "all", "TPR", tp / max(tp + fn, 1), n=len(frames))
    table.add("import", "all", "FDR", fp / max(tp + fp, 1), n=len(frames))
    if sq:
        table.add("import", "matched", "rmse_px", math.sqrt(float(np.mean(sq))), n=len(sq))
    emit_report({"import": table}, args.out)
    print(f"TPR={tp / max(tp + fn, 1):.4f} FDR={fp / max(tp + fp, 1):.4f} -> {args.out}")
    return 0


# -- entry point -------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="equitrack")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate synthetic data")
    s.add_argument("kind", choices=["shapes", "holo", "brownian"])
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_simulate)

    t = sub.add_parser("train", help="train a model on one crop")
    t.add_argument("--crop", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--channels", choices=list(CHANNEL_SETS), default="xy")
    t.set_defaults(func=_cmd_train)

    tr = sub.add_parser("track", help="detect and link particles")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--frames", required=True)
    tr.add_argument("--alpha", type=float, default=0.1)
    tr.add_argument("--quantile", type=float, default=0.99)
    tr.add_argument("--min-dist", type=float, default=5.0)
    tr.add_argument("--max-link-dist", type=float, default=5.0)
    tr.add_argument("--min-track-length", type=int, default=1)
    tr.add_argument("--optics", help="JSON optics file for axial correction")
    tr.add_argument("--calibration", help="JSON polarizability calibration file")
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=_cmd_track)

    b = sub.add_parser("baseline", help="classical localization per frame")
    b.add_argument("--method", choices=["centroid", "radial"], required=True)
    b.add_argument("--frames", required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=_cmd_baseline)

    bm = sub.add_parser("benchmark", help="run a benchmark experiment")
    bm.add_argument("kind", choices=list(_EXPERIMENTS))
    bm.add_argument("--config")
    bm.add_argument("--out", required=True)
    bm.set_defaults(func=_cmd_benchmark)

    im = sub.add_parser("import", help="evaluate a model on external frames")
    im.add_argument("--frames", required=True)
    im.add_argument("--truth", required=True)
    im.add_argument("--ckpt", required=True)
    im.add_argument("--match-radius", type=float, default=3.0)
    im.add_argument("--alpha", type=float, default=0.1)
    im.add_argument("--quantile", type=float, default=0.99)
    im.add_argument("--min-dist", type=float, default=5.0)
    im.add_argument("--out", required=True)
    im.set_defaults(func=_cmd_import)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
