#!/usr/bin/env python3
"""End-to-end demo: simulate frames, train on one crop, detect and track.

Writes everything under --out (default demo_run/). Use --full for a
production-length training (about 7 minutes on one CPU core); the default is
a quick smoke-scale run whose detections are rough."""

import argparse
import json
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

import numpy as np  # noqa: E402

from equitrack import synth  # noqa: E402
from equitrack.cli import main  # noqa: E402
from equitrack.ltsr import write_ltsr  # noqa: E402


def run():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo_run")
    ap.add_argument("--full", action="store_true", help="5000-batch training")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    sim_cfg = out / "simulate.json"
    sim_cfg.write_text(json.dumps({
        "canvas": [128, 128], "n_frames": 5, "n_particles": 8,
        "shape": "sphere", "snr": 10.0, "min_separation": 14.0,
        "seed": args.seed,
    }))
    rc = main(["simulate", "shapes", "--config", str(sim_cfg),
               "--out", str(out / "data")])
    if rc:
        return rc

    crop = synth.render_particle(
        synth.default_spec("sphere", (15.5, 15.5)), (32, 32)
    )
    crop = synth.add_noise(crop, 10.0, seed=args.seed + 7919)
    write_ltsr(out / "crop.ltsr", crop.astype(np.float32))

    train_cfg = out / "train.json"
    train_cfg.write_text(json.dumps({
        "n_batches": 5000 if args.full else 200, "seed": args.seed,
    }))
    rc = main(["train", "--crop", str(out / "crop.ltsr"),
               "--config", str(train_cfg), "--out", str(out / "model.ckpt")])
    if rc:
        return rc

    rc = main(["track", "--ckpt", str(out / "model.ckpt"),
               "--frames", str(out / "data" / "frames.ltsr"),
               "--min-dist", "7", "--out", str(out / "tracking")])
    if rc:
        return rc

    rc = main(["import", "--frames", str(out / "data" / "frames.ltsr"),
               "--truth", str(out / "data" / "ground_truth.csv"),
               "--ckpt", str(out / "model.ckpt"),
               "--out", str(out / "evaluation")])
    print(f"demo artifacts under {out}/")
    return rc


if __name__ == "__main__":
    sys.exit(run())
