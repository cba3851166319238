#!/usr/bin/env python3
"""Run one of the paper-scale benchmark experiments with its stock config.

Equivalent to `equitrack benchmark <kind> --config scripts/configs/<kind>.json
--out results/<kind>`, with optional downscaling for smoke runs. Exits nonzero
if any threshold in the config is violated."""

import argparse
import json
import pathlib
import sys
import tempfile

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from equitrack.cli import main  # noqa: E402

CONFIG_DIR = pathlib.Path(__file__).resolve().parent / "configs"
KINDS = ("rmse", "discriminate", "detect", "axial", "polarizability")


def run():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("kind", choices=KINDS)
    ap.add_argument("--out", default=None, help="output directory (default results/<kind>)")
    ap.add_argument("--seed", type=int, default=None, help="override config seed")
    ap.add_argument("--smoke", action="store_true",
                    help="tiny sizes for a quick end-to-end check (thresholds dropped)")
    args = ap.parse_args()

    cfg = json.loads((CONFIG_DIR / f"{args.kind}.json").read_text())
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.smoke:
        cfg.pop("thresholds", None)
        small = {
            "n_images": 5, "n_batches": 20, "n_images_per_cell": 2,
            "n_calibration": 3, "n_frames": 1, "n_empty_frames": 2,
            "n_z_steps": 3, "n_images_per_z": 2, "n_traces": 50,
            "trace_length": 20, "n_bidispersed": 3,
        }
        for key, value in small.items():
            if key in cfg:
                cfg[key] = value
        if "shapes" in cfg:
            cfg["shapes"] = cfg["shapes"][:1]
        if "snrs" in cfg:
            cfg["snrs"] = [10]
        if "particle_counts" in cfg:
            cfg["particle_counts"] = [5]
            cfg["separations"] = [14.0]

    out = args.out or f"results/{args.kind}"
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(cfg, fh)
        cfg_path = fh.name
    return main(["benchmark", args.kind, "--config", cfg_path, "--out", out])


if __name__ == "__main__":
    sys.exit(run())
