#!/usr/bin/env python3
"""Train every benchmark model and cache the checkpoints.

Produces the checkpoints used by the paper-scale experiments and the
acceptance tests: one localization model per shape (5000 mini-batches on a
single SNR-10 crop), the axial (xyz) hologram model, and the polarizability
(xyzs) hologram model. Skips checkpoints that already exist.
"""

import argparse
import json
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from equitrack import bench  # noqa: E402
from equitrack.synth import SHAPES  # noqa: E402


def train_all(out_dir, seed=0, shapes=SHAPES, holo=True, log=print):
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for shape in shapes:
        path = out_dir / f"{shape}_s{seed}.ckpt"
        if path.exists():
            log(f"{path.name}: cached")
            continue
        t0 = time.time()
        result = bench.train_shape_model(shape, seed=seed)
        dt = time.time() - t0
        result.model.save(path)
        path.with_suffix(".meta.json").write_text(
            json.dumps({"train_seconds": dt}))
        log(f"{path.name}: trained in {dt:.0f}s "
            f"(final loss {result.loss_curve[-1, 1:].sum():.4f})")
    if not holo:
        return
    setup = bench.HoloSetup()
    jobs = [
        ("axial", dict(channels="xyz", n_batches=15000, dz_range=(-6.0, 6.0))),
        ("polar", dict(channels="xyzs", n_batches=5000, dz_range=(-3.0, 3.0))),
    ]
    for name, kwargs in jobs:
        path = out_dir / f"{name}_s{seed}.ckpt"
        if path.exists():
            log(f"{path.name}: cached")
            continue
        t0 = time.time()
        result = bench.train_hologram_model(setup, seed=seed, **kwargs)
        dt = time.time() - t0
        result.model.save(path)
        path.with_suffix(".meta.json").write_text(
            json.dumps({"train_seconds": dt}))
        log(f"{path.name}: trained in {dt:.0f}s "
            f"(final loss {result.loss_curve[-1, 1:].sum():.4f})")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="tests/.cache")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-holo", action="store_true",
                    help="skip the two hologram models")
    args = ap.parse_args()
    train_all(args.out, seed=args.seed, holo=not args.no_holo)
