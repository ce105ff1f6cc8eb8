import csv
import json
import struct

import numpy as np
import pytest

from phasebind import cli, data, modelio, synchrony


def run(*argv):
    return cli.dispatch([str(a) for a in argv])


def file_hashes(d):
    return {p.name: cli.blob_hash(p) for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    d = {"root": root}
    assert run("gen-data", "--kind", "bars", "--count", 300, "--side", 12, "--n-bars", 3,
               "--seed", 7, "--out-dir", root / "data") == 0
    d["data"] = root / "data" / "bars.pbimg"
    assert run("train", "--data", d["data"], "--layers", "7:3", "--epochs", 3,
               "--out-dir", root / "train") == 0
    d["model"] = root / "train" / "model.pbm"
    assert run("synch", "--model", d["model"], "--data", d["data"], "--indices", "0-3",
               "--iters", 20, "--trajectory", "--record-stride", 10, "--out-dir", root / "synch") == 0
    d["states"] = root / "synch" / "states.npz"
    return d


class TestGenData:
    def test_bars(self, tmp_path):
        assert run("gen-data", "--kind", "bars", "--count", 100, "--seed", 7, "--out-dir", tmp_path) == 0
        ds = data.load_dataset(tmp_path / "bars.pbimg")
        assert len(ds) == 100 and ds.shape == (20, 20)
        assert (tmp_path / "bars.pbimg.truth").exists()
        assert (tmp_path / "preview.png").exists()
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["seed"] == 7 and m["command"] == "gen-data"
        assert "bars.pbimg" in m["outputs"]

    def test_deterministic(self, tmp_path):
        for sub in ("a", "b"):
            run("gen-data", "--kind", "corners", "--count", 20, "--seed", 3, "--out-dir", tmp_path / sub)
        assert (tmp_path / "a" / "corners.pbimg").read_bytes() == (tmp_path / "b" / "corners.pbimg").read_bytes()

    def test_mnist_plus_shape_needs_digits(self, tmp_path, capsys):
        assert run("gen-data", "--kind", "mnist_plus_shape", "--count", 5, "--out-dir", tmp_path) == 1
        assert "--mnist" in capsys.readouterr().err


def write_idx(path, images):
    images = np.asarray(images, np.uint8)
    path.write_bytes(struct.pack(">IIII", 0x803, *images.shape) + images.tobytes())


def test_fetch_mnist_and_compose(tmp_path):
    rng = np.random.default_rng(0)
    imgs = np.zeros((12, 28, 28), np.uint8)
    for i in range(12):
        r, c = rng.integers(4, 14, 2)
        imgs[i, r:r + 12, c:c + 3] = 200
    write_idx(tmp_path / "imgs-idx3-ubyte", imgs)
    (tmp_path / "labels-idx1-ubyte").write_bytes(struct.pack(">II", 0x801, 12) + bytes(range(12)))
    assert run("fetch-mnist", "--images", tmp_path / "imgs-idx3-ubyte", "--labels",
               tmp_path / "labels-idx1-ubyte", "--out-dir", tmp_path / "m") == 0
    digits = data.load_dataset(tmp_path / "m" / "mnist.pbimg")
    assert digits.images.shape == (12, 28, 28) and digits.images.sum() == 12 * 36
    assert run("gen-data", "--kind", "mnist_plus_shape", "--count", 30, "--mnist",
               tmp_path / "m" / "mnist.pbimg", "--out-dir", tmp_path / "mps") == 0
    assert len(data.load_dataset(tmp_path / "mps" / "mnist_plus_shape.pbimg")) == 30


class TestPipeline:
    def test_train_outputs(self, pipeline):
        t = pipeline["root"] / "train"
        model = modelio.load_model(t / "model.pbm")
        assert model.sizes == [144, 108]
        lines = (t / "train-layer0.log").read_text().splitlines()
        assert len(lines) == 3 and lines[0].startswith("epoch=1 recon_err=")
        assert (t / "training.png").exists()

    def test_synch_outputs(self, pipeline):
        s = pipeline["root"] / "synch"
        states, extra = synchrony.load_states(s / "states.npz")
        assert states.visible.rates.shape == (4, 144)
        np.testing.assert_array_equal(extra["image_ids"], [0, 1, 2, 3])
        ds = data.load_dataset(pipeline["data"])
        np.testing.assert_array_equal(states.visible.rates, ds.flat(float)[:4])
        assert (s / "phase_img00002_layer0.png").exists() and (s / "phase_img00002_layer1.png").exists()
        man, traj = synchrony.read_trajectory(s / "trajectory_img00001.bin")
        assert traj.steps == [0, 10, 20] and man["image_id"] == 1
        rows = list(csv.DictReader(open(s / "drift.csv")))
        assert len(rows) == 4 * 20

    def test_segment(self, pipeline, tmp_path):
        assert run("segment", "--states", pipeline["states"], "--k", 7, "--out-dir", tmp_path) == 0
        labels = np.loadtxt(tmp_path / "labels_img00000.csv", delimiter=",", dtype=int)
        img = data.load_dataset(pipeline["data"]).images[0]
        assert labels.shape == (12, 12)
        np.testing.assert_array_equal(labels > 0, img > 0)
        for name in ("labels_img00000.png", "phase_img00000.png", "hist_img00000.csv",
                     "hist_img00000.png", "peakmasks_img00000.npy", "peaks.csv"):
            assert (tmp_path / name).exists()
        hist = list(csv.DictReader(open(tmp_path / "hist_img00000.csv")))
        assert sum(int(r["count"]) for r in hist) == img.sum()

    def test_decode(self, pipeline, tmp_path):
        assert run("decode", "--model", pipeline["model"], "--states", pipeline["states"], "--k", 3,
                   "--out-dir", tmp_path) == 0
        dec = np.load(tmp_path / "decoded_img00000.npy")
        assert dec.shape == (2, 144) and np.all((dec >= 0) & (dec <= 1))
        assert (tmp_path / "decoded_img00003.png").exists()

    def test_metrics(self, pipeline, tmp_path):
        assert run("metrics", "--states", pipeline["states"], "--truth", pipeline["data"],
                   "--out-dir", tmp_path) == 0
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "image_id,object_id,R,mean_phase,n_pixels"
        assert len(lines) == 1 + 4 * 6
        assert (tmp_path / "summary.csv").read_text().startswith("image_id,n_peaks,mean_R")

    def test_sample(self, pipeline, tmp_path):
        assert run("sample", "--model", pipeline["model"], "--steps", 40, "--interval", 10,
                   "--out-dir", tmp_path) == 0
        assert np.load(tmp_path / "samples.npy").shape == (4, 144)
        assert (tmp_path / "samples.png").exists()

    def test_inputs_not_mutated(self, pipeline, tmp_path):
        before = {k: cli.blob_hash(pipeline[k]) for k in ("data", "model", "states")}
        run("synch", "--model", pipeline["model"], "--data", pipeline["data"], "--indices", "0",
            "--iters", 3, "--out-dir", tmp_path / "s")
        run("segment", "--states", pipeline["states"], "--k", 4, "--out-dir", tmp_path / "g")
        run("decode", "--model", pipeline["model"], "--states", pipeline["states"], "--k", 2,
            "--out-dir", tmp_path / "d")
        assert before == {k: cli.blob_hash(pipeline[k]) for k in ("data", "model", "states")}

    def test_manifest_inputs(self, pipeline):
        m = json.loads((pipeline["root"] / "synch" / "manifest.json").read_text())
        assert m["inputs"]["model"]["blob"] == cli.blob_hash(pipeline["model"])
        assert m["config"]["iters"] == 20 and m["config"]["mode"] == "det"


class TestReproducibility:
    @pytest.mark.parametrize("mode", ["det", "stoch"])
    def test_synch_bitwise(self, pipeline, tmp_path, mode):
        for sub in ("a", "b"):
            assert run("synch", "--model", pipeline["model"], "--data", pipeline["data"], "--indices", "0-2",
                       "--iters", 10, "--mode", mode, "--seed", 5, "--out-dir", tmp_path / sub) == 0
        a, b = file_hashes(tmp_path / "a"), file_hashes(tmp_path / "b")
        a.pop("manifest.json"), b.pop("manifest.json")
        assert a == b

    def test_workers_match_serial(self, pipeline, tmp_path):
        for sub, w in (("one", 1), ("two", 2)):
            assert run("synch", "--model", pipeline["model"], "--data", pipeline["data"], "--indices", "0-3",
                       "--iters", 10, "--workers", w, "--out-dir", tmp_path / sub) == 0
        a, b = file_hashes(tmp_path / "one"), file_hashes(tmp_path / "two")
        assert a.pop("states.npz") == b.pop("states.npz")

    def test_replay_from_manifest(self, pipeline, tmp_path):
        first = tmp_path / "first"
        assert run("train", "--data", pipeline["data"], "--layers", "7:3", "--epochs", 2, "--seed", 4,
                   "--out-dir", first) == 0
        assert run("train", "--config", first / "manifest.json", "--out-dir", tmp_path / "again") == 0
        assert (first / "model.pbm").read_bytes() == (tmp_path / "again" / "model.pbm").read_bytes()


class TestConfig:
    def test_config_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"kind": "three_shapes", "count": 5, "seed": 2}))
        assert run("gen-data", "--config", cfg, "--out-dir", tmp_path / "o") == 0
        assert len(data.load_dataset(tmp_path / "o" / "three_shapes.pbimg")) == 5

    def test_flags_override_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"kind": "bars", "count": 5}))
        assert run("gen-data", "--config", cfg, "--count", 3, "--out-dir", tmp_path / "o") == 0
        assert len(data.load_dataset(tmp_path / "o" / "bars.pbimg")) == 3

    @pytest.mark.parametrize("content", ['{"kind": "bars", "colour": 3}', '{"kind": "circles"}',
                                         "[1, 2]", "not json"])
    def test_bad_config(self, tmp_path, content, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(content)
        assert run("gen-data", "--config", cfg, "--out-dir", tmp_path / "o") != 0
        assert "error" in capsys.readouterr().err

    def test_manifest_for_other_command(self, pipeline, tmp_path):
        assert run("gen-data", "--config", pipeline["root"] / "train" / "manifest.json",
                   "--out-dir", tmp_path) != 0

    def test_missing_input(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope.pbimg", "--out-dir", tmp_path) == 2

    def test_bad_indices(self, pipeline, tmp_path):
        assert run("synch", "--model", pipeline["model"], "--data", pipeline["data"], "--indices", "999",
                   "--out-dir", tmp_path) != 0

    def test_bad_k(self, pipeline, tmp_path):
        assert run("segment", "--states", pipeline["states"], "--k", 1, "--out-dir", tmp_path) == 1

    def test_unknown_flag(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            run("gen-data", "--kind", "bars", "--colour", "red")
        assert e.value.code != 0


def test_plot_response(tmp_path):
    assert run("plot-response", "--points", 5, "--out-dir", tmp_path) == 0
    lines = (tmp_path / "response.csv").read_text().splitlines()
    assert lines[0] == "delta_phi,mixed,sync_only"
    assert len(lines) == 6
    assert [float(x) for x in lines[1].split(",")] == [0.0, 2.0, 2.0]
    assert (tmp_path / "response.png").exists()
