import csv
import json

import numpy as np
import pytest

from equitrack import synth
from equitrack.cli import SCHEMAS, check_thresholds, main
from equitrack.ltsr import read_ltsr, write_ltsr
from equitrack.nn import ConvNet
from equitrack.report import MetricsTable


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture()
def shapes_dir(tmp_path):
    cfg = write_json(tmp_path / "sim.json", {
        "canvas": [64, 64], "n_frames": 2, "n_particles": 3,
        "shape": "sphere", "snr": 10.0, "min_separation": 12.0, "seed": 1,
    })
    out = tmp_path / "sim"
    assert main(["simulate", "shapes", "--config", cfg, "--out", str(out)]) == 0
    return out


@pytest.fixture()
def tiny_ckpt(tmp_path):
    img = synth.render_particle(synth.default_spec("sphere", (15.5, 15.5)), (32, 32))
    crop = synth.add_noise(img, 10.0, seed=0).astype(np.float32)
    write_ltsr(tmp_path / "crop.ltsr", crop)
    cfg = write_json(tmp_path / "train.json", {"n_batches": 2, "seed": 0})
    out = tmp_path / "model.ckpt"
    rc = main(["train", "--crop", str(tmp_path / "crop.ltsr"),
               "--config", cfg, "--out", str(out)])
    assert rc == 0
    return out


class TestSimulate:
    def test_shapes_outputs(self, shapes_dir):
        frames = read_ltsr(shapes_dir / "frames.ltsr")
        assert frames.shape == (2, 64, 64)
        rows = read_csv(shapes_dir / "ground_truth.csv")
        assert rows[0] == ["frame", "id", "x", "y", "z", "polarizability"]
        assert len(rows) == 1 + 2 * 3

    def test_shapes_deterministic(self, tmp_path):
        cfg = write_json(tmp_path / "c.json", {
            "canvas": [64, 64], "n_frames": 1, "n_particles": 2,
            "shape": "point", "snr": 10.0, "min_separation": 15.0, "seed": 7,
        })
        for d in ("a", "b"):
            assert main(["simulate", "shapes", "--config", cfg,
                         "--out", str(tmp_path / d)]) == 0
        for name in ("frames.ltsr", "ground_truth.csv"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_holo_outputs(self, tmp_path):
        cfg = write_json(tmp_path / "h.json", {
            "canvas": [64, 64], "n_frames": 1, "n_particles": 2,
            "z_range": [-1.0, 1.0], "min_separation": 20.0, "seed": 0,
        })
        out = tmp_path / "holo"
        assert main(["simulate", "holo", "--config", cfg, "--out", str(out)]) == 0
        frames = read_ltsr(out / "frames.ltsr")
        assert frames.shape == (1, 64, 64, 2)
        rows = read_csv(out / "ground_truth.csv")
        assert len(rows) == 3
        # z and polarizability populated
        assert rows[1][4] != "nan" and rows[1][5] != "nan"

    def test_brownian_outputs(self, tmp_path):
        cfg = write_json(tmp_path / "b.json", {
            "diffusion": 0.5, "frame_interval": 0.1, "n_frames": 5,
            "n_traces": 2, "seed": 0,
        })
        out = tmp_path / "br"
        assert main(["simulate", "brownian", "--config", cfg, "--out", str(out)]) == 0
        traces = read_ltsr(out / "frames.ltsr")
        assert traces.shape == (2, 5, 3)

    def test_unknown_key_rejected(self, tmp_path):
        cfg = write_json(tmp_path / "bad.json", {"not_a_key": 1})
        assert main(["simulate", "shapes", "--config", cfg,
                     "--out", str(tmp_path / "x")]) == 2

    def test_bad_shape_rejected(self, tmp_path):
        cfg = write_json(tmp_path / "bad.json", {"shape": "cube"})
        assert main(["simulate", "shapes", "--config", cfg,
                     "--out", str(tmp_path / "x")]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "shapes", "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "x")]) == 2


class TestTrain:
    def test_checkpoint_and_loss_curve(self, tiny_ckpt):
        model = ConvNet.load(tiny_ckpt)
        assert model.step == 2
        rows = read_csv(str(tiny_ckpt) + ".loss.csv")
        assert rows[0] == ["step", "disagreement", "consistency"]
        assert len(rows) == 3

    def test_bad_hyperparameter_rejected(self, tmp_path):
        write_ltsr(tmp_path / "c.ltsr", np.zeros((32, 32), dtype=np.float32))
        cfg = write_json(tmp_path / "t.json", {"batch_size": 1})
        assert main(["train", "--crop", str(tmp_path / "c.ltsr"),
                     "--config", cfg, "--out", str(tmp_path / "m.ckpt")]) == 2


class TestTrackAndBaseline:
    def test_track_outputs(self, tmp_path, shapes_dir, tiny_ckpt):
        out = tmp_path / "trk"
        rc = main(["track", "--ckpt", str(tiny_ckpt),
                   "--frames", str(shapes_dir / "frames.ltsr"), "--out", str(out)])
        assert rc == 0
        dets = read_csv(out / "detections.csv")
        assert dets[0] == ["frame", "x_px", "y_px", "z_um",
                           "polarizability_um3", "score"]
        tracks = read_csv(out / "tracks.csv")
        assert tracks[0] == ["track_id", "frame", "x", "y", "z", "polarizability"]

    def test_baseline_localizes_spot(self, tmp_path):
        img = synth.render_particle(synth.default_spec("sphere", (20.25, 12.5)),
                                    (40, 40)).astype(np.float32)
        write_ltsr(tmp_path / "f.ltsr", img[None])
        out = tmp_path / "base.csv"
        rc = main(["baseline", "--method", "radial",
                   "--frames", str(tmp_path / "f.ltsr"), "--out", str(out)])
        assert rc == 0
        rows = read_csv(out)
        assert rows[0] == ["frame", "x_px", "y_px"]
        assert float(rows[1][1]) == pytest.approx(20.25, abs=0.1)
        assert float(rows[1][2]) == pytest.approx(12.5, abs=0.1)

    def test_baseline_rejects_multichannel(self, tmp_path):
        write_ltsr(tmp_path / "f.ltsr", np.zeros((1, 16, 16, 2), dtype=np.float32))
        assert main(["baseline", "--method", "centroid",
                     "--frames", str(tmp_path / "f.ltsr"),
                     "--out", str(tmp_path / "o.csv")]) == 2


class TestImport:
    def test_import_report(self, tmp_path, shapes_dir, tiny_ckpt):
        truth = shapes_dir / "ground_truth.csv"
        out = tmp_path / "imp"
        rc = main(["import", "--frames", str(shapes_dir / "frames.ltsr"),
                   "--truth", str(truth), "--ckpt", str(tiny_ckpt),
                   "--out", str(out)])
        assert rc == 0
        doc = json.loads((out / "import.json").read_text())
        metrics = {r["metric"] for r in doc["rows"]}
        assert {"TPR", "FDR"} <= metrics


class TestBenchmarkCommand:
    BASE = {
        "shapes": ["sphere"], "snrs": [10.0], "n_images": 3,
        "n_batches": 3, "seed": 0,
    }

    def test_report_and_rerun_byte_identical(self, tmp_path):
        cfg = write_json(tmp_path / "b.json", self.BASE)
        for d in ("r1", "r2"):
            assert main(["benchmark", "rmse", "--config", cfg,
                         "--out", str(tmp_path / d)]) == 0
        for name in ("rmse.csv", "rmse.json", "rmse_sphere.svg"):
            a = (tmp_path / "r1" / name).read_bytes()
            assert a == (tmp_path / "r2" / name).read_bytes() and a

    def test_threshold_violation_sets_exit_code(self, tmp_path):
        doc = dict(self.BASE)
        doc["thresholds"] = [
            {"experiment": "rmse", "metric": "rmse_px", "max": 1e-9}
        ]
        cfg = write_json(tmp_path / "b.json", doc)
        assert main(["benchmark", "rmse", "--config", cfg,
                     "--out", str(tmp_path / "r")]) == 1

    def test_threshold_pass_exit_zero(self, tmp_path):
        doc = dict(self.BASE)
        doc["thresholds"] = [
            {"experiment": "rmse", "metric": "rmse_px", "max": 1e9}
        ]
        cfg = write_json(tmp_path / "b.json", doc)
        assert main(["benchmark", "rmse", "--config", cfg,
                     "--out", str(tmp_path / "r")]) == 0


class TestCheckThresholds:
    def make_table(self):
        t = MetricsTable()
        t.add("detection", "sep=10/n=30", "TPR", 0.97)
        t.add("detection", "sep=10/n=30", "FDR", 0.02)
        return t

    def test_min_violation(self):
        out = check_thresholds(self.make_table(), [
            {"experiment": "detection", "metric": "TPR", "min": 0.99}
        ])
        assert len(out) == 1 and "0.97" in out[0]

    def test_max_pass(self):
        out = check_thresholds(self.make_table(), [
            {"experiment": "detection", "metric": "FDR", "max": 0.05}
        ])
        assert out == []

    def test_unmatched_threshold_reported(self):
        out = check_thresholds(self.make_table(), [
            {"experiment": "nope", "metric": "TPR", "min": 0.5}
        ])
        assert len(out) == 1 and "no rows" in out[0]

    def test_condition_filter(self):
        out = check_thresholds(self.make_table(), [
            {"experiment": "detection", "condition": "sep=10/n=30",
             "metric": "TPR", "min": 0.5},
            {"experiment": "detection", "condition": "other",
             "metric": "TPR", "min": 0.5},
        ])
        assert len(out) == 1


class TestSchemas:
    def test_all_schemas_are_valid_jsonschema(self):
        jsonschema = pytest.importorskip("jsonschema")
        for key, schema in SCHEMAS.items():
            jsonschema.Draft202012Validator.check_schema(schema)
