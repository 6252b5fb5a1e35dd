import json

import numpy as np
import pytest

from bounded import cli
from bounded.features import NAMED_MASKS, read_features
from bounded.io import CLASS_COLORS, PointCloud, read_ply, write_ply, write_xyz
from bounded.net import load_model
from bounded.synth import SceneSpec, generate

FAST_TRAIN = ["--iters", "20", "--runs", "2", "--batch-size", "256", "--scales", "32,16", "--log-every", "10"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def _manifest(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d"
    assert run("synth", "--profile", "defaultpp", "--seed", 7, "--density", 100, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def model(dataset, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "m.bndm"
    assert run("train", "--dataset", dataset, "--out", path, "--seed", 3, *FAST_TRAIN) == 0
    return path


def test_synth_layout_and_determinism(dataset, tmp_path):
    meta = json.loads((dataset / "dataset.json").read_text())
    assert meta["profile"] == "defaultpp-like" and meta["seed"] == 7
    assert {e["group"] for e in meta["clouds"].values()} == {"train", "eval"}
    for e in meta["clouds"].values():
        cloud = read_ply(dataset / e["file"])
        assert np.bincount(cloud.labels, minlength=3).tolist() == e["class_counts"]
    again = tmp_path / "again"
    assert run("synth", "--profile", "defaultpp", "--seed", 7, "--density", 100, "--out", again) == 0
    for f in sorted(p.relative_to(dataset) for p in dataset.rglob("*") if p.is_file()):
        if f.name == "manifest.json":
            a, b = _manifest(dataset / f), _manifest(again / f)
            a.pop("timings"), b.pop("timings")
            a["config"].pop("out"), b["config"].pop("out")
            assert a == b
        else:
            assert (dataset / f).read_bytes() == (again / f).read_bytes(), f
    m = _manifest(dataset / "manifest.json")
    assert m["command"] == "synth" and m["seed"] == 7 and all(v >= 0 for v in m["timings"].values())


def test_unknown_profile_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("synth", "--profile", "abc", "--out", tmp_path / "x")
    assert exc.value.code == 2
    assert not (tmp_path / "x").exists()


def _small_cloud(tmp_path, n_side=20):
    cloud = generate(SceneSpec("box", density=n_side ** 2, size=(1.0,)), seed=0)
    path = tmp_path / "box.ply"
    write_ply(cloud, path)
    return cloud, path


def test_features_scales_and_mask(tmp_path):
    cloud, path = _small_cloud(tmp_path)
    out = tmp_path / "f.bndf"
    assert run("features", "--cloud", path, "--out", out, "--scales", "128,32", "--mask", "no-sigma") == 0
    ff = read_features(out)
    assert ff.features.shape == (len(cloud), 2, 12)
    assert ff.scales == (128, 32) and ff.feature_mask == NAMED_MASKS["no-sigma"]
    m = _manifest(tmp_path / "f.bndf.manifest.json")
    assert m["points_per_second"] > 0 and m["inputs"][str(path)]
    assert run("features", "--cloud", path, "--out", tmp_path / "g.bndf") == 0
    assert read_features(tmp_path / "g.bndf").features.shape == (len(cloud), 4, 12)


def test_features_errors(tmp_path):
    _, path = _small_cloud(tmp_path)
    with pytest.raises(SystemExit) as exc:
        run("features", "--cloud", path, "--out", tmp_path / "f.bndf", "--scales", "32,64")
    assert exc.value.code == 2
    tiny = tmp_path / "tiny.xyz"
    write_xyz(PointCloud(np.random.default_rng(0).random((50, 3))), tiny)
    with pytest.raises(SystemExit):
        run("features", "--cloud", tiny, "--out", tmp_path / "t.bndf")
    assert not (tmp_path / "t.bndf").exists()
    bad = tmp_path / "bad.ply"
    bad.write_bytes(b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nend_header\n1\n")
    assert run("features", "--cloud", bad, "--out", tmp_path / "b.bndf", "--scales", "4") == 1


def test_threads_do_not_change_features(tmp_path):
    _, path = _small_cloud(tmp_path)
    run("features", "--cloud", path, "--out", tmp_path / "a.bndf", "--scales", "32,16", "--threads", 1)
    run("features", "--cloud", path, "--out", tmp_path / "b.bndf", "--scales", "32,16", "--threads", 3)
    assert (tmp_path / "a.bndf").read_bytes() == (tmp_path / "b.bndf").read_bytes()


def test_train_outputs_and_reproducibility(dataset, model, tmp_path):
    m = load_model(model)
    assert m.scales == (32, 16) and not m.two_class
    log = model.with_suffix(".log.csv").read_text().splitlines()
    assert log[0] == "iteration,train_loss,val_loss" and len(log) == 3
    man = _manifest(model.with_name("m.bndm.manifest.json"))
    assert man["seed"] == 3 and len(man["runs"]) == 2 and man["train_config"]["iterations"] == 20
    again = tmp_path / "m.bndm"
    assert run("train", "--dataset", dataset, "--out", again, "--seed", 3, *FAST_TRAIN) == 0
    assert again.read_bytes() == model.read_bytes()
    assert again.with_suffix(".log.csv").read_bytes() == model.with_suffix(".log.csv").read_bytes()


def test_train_from_clouds_and_features_two_class(tmp_path, dataset):
    clouds = sorted((dataset / "train").glob("*.ply"))[:1]
    feats = tmp_path / "f.bndf"
    run("features", "--cloud", clouds[0], "--out", feats, "--scales", "32,16")
    out = tmp_path / "m2.bndm"
    assert run("train", "--cloud", clouds[0], "--features", feats, "--out", out, "--2c", *FAST_TRAIN) == 0
    assert load_model(out).two_class


def test_train_requires_labels(tmp_path):
    path = tmp_path / "u.xyz"
    write_xyz(PointCloud(np.random.default_rng(0).random((300, 3))), path)
    with pytest.raises(SystemExit) as exc:
        run("train", "--cloud", path, "--out", tmp_path / "m.bndm", *FAST_TRAIN)
    assert exc.value.code == 2
    assert not (tmp_path / "m.bndm").exists()


def test_config_precedence(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"iters": 10, "runs": 1, "seed": 9, "batch_size": 128,
                                         "scales": "32,16", "log_every": 5}}))
    out = tmp_path / "m.bndm"
    assert run("train", "--dataset", dataset, "--out", out, "--config", cfg, "--iters", 15) == 0
    man = _manifest(tmp_path / "m.bndm.manifest.json")
    assert man["train_config"]["iterations"] == 15      # flag beats file
    assert man["train_config"]["runs"] == 1 and man["seed"] == 9   # file beats default
    assert man["train_config"]["gamma"] == 2.0          # default fills the rest
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit):
        run("train", "--dataset", dataset, "--out", out, "--config", cfg)


def test_thread_env_default(monkeypatch, tmp_path):
    monkeypatch.setenv("BOUNDED_THREADS", "2")
    _, path = _small_cloud(tmp_path)
    run("features", "--cloud", path, "--out", tmp_path / "f.bndf", "--scales", "16")
    assert _manifest(tmp_path / "f.bndf.manifest.json")["config"]["threads"] == 2


def test_classify_outputs(dataset, model, tmp_path):
    cloud_path = dataset / "eval" / "eval_0.ply"
    out = tmp_path / "c.ply"
    assert run("classify", "--model", model, "--cloud", cloud_path, "--out", out) == 0
    colored = read_ply(out)
    csv_rows = out.with_suffix(".labels.csv").read_text().splitlines()
    assert csv_rows[0] == "index,label,p_non-edge,p_sharp-edge,p_boundary"
    pred = np.array([int(r.split(",")[1]) for r in csv_rows[1:]])
    np.testing.assert_array_equal(colored.labels, pred)
    header = out.read_bytes().split(b"end_header")[0]
    assert b"property uchar red" in header
    man = _manifest(tmp_path / "c.ply.manifest.json")
    assert set(man["timings"]) == {"preprocessing", "classification"}
    # precomputed features take the same path
    feats = tmp_path / "e.bndf"
    run("features", "--cloud", cloud_path, "--out", feats, "--scales", "32,16")
    out2 = tmp_path / "c2.ply"
    assert run("classify", "--model", model, "--cloud", cloud_path, "--features", feats, "--out", out2) == 0
    assert out2.with_suffix(".labels.csv").read_bytes() == out.with_suffix(".labels.csv").read_bytes()


def test_classified_colors(tmp_path, model):
    cloud = generate(SceneSpec("open-disk", radius=1.0), seed=0)
    path = tmp_path / "disk.ply"
    write_ply(cloud, path)
    out = tmp_path / "o.ply"
    run("classify", "--model", model, "--cloud", path, "--out", out, "--ascii")
    lines = out.read_text().split("end_header\n")[1].splitlines()
    for line in lines[:200]:
        vals = line.split()
        assert [int(v) for v in vals[3:6]] == CLASS_COLORS[int(vals[6])].tolist()


def test_missing_model_is_explicit(tmp_path, dataset):
    with pytest.raises(SystemExit) as exc:
        run("classify", "--model", tmp_path / "nope.bndm", "--cloud", dataset / "eval" / "eval_0.ply",
            "--out", tmp_path / "o.ply")
    assert exc.value.code == 2
    (tmp_path / "junk.bndm").write_bytes(b"BNDMjunk")
    assert run("classify", "--model", tmp_path / "junk.bndm", "--cloud", dataset / "eval" / "eval_0.ply",
               "--out", tmp_path / "o.ply") == 1
    assert not (tmp_path / "o.ply").exists()


def test_eval_model_report(dataset, model, tmp_path):
    out = tmp_path / "r.json"
    assert run("eval", "--model", model, "--eval-dir", dataset / "eval", "--out", out) == 0
    rep = json.loads(out.read_text())
    assert set(rep["clouds"]) == {"eval_0", "eval_1", "eval_2", "eval_3"}
    assert set(rep["medians"]) == {"sharp-edge", "boundary"}
    pr = out.with_suffix(".pr.csv").read_text().splitlines()
    assert pr[0] == "cloud,class,precision,recall" and len(pr) == 9


def test_eval_perfect_predictions_give_unit_medians(dataset, model, tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "_predict", lambda m, cloud, f, t: (cloud.labels.copy(), None,
                                                                {"preprocessing": 0.0, "classification": 0.0}))
    out = tmp_path / "r.json"
    run("eval", "--model", model, "--eval-dir", dataset / "eval", "--out", out)
    rep = json.loads(out.read_text())
    for cls in ("sharp-edge", "boundary"):
        assert all(v == 1 for k, v in rep["medians"][cls].items())


def test_eval_ca_threshold_sweep(dataset, tmp_path):
    prec = []
    for t in (0.025, 0.08):
        out = tmp_path / f"ca{t}.json"
        assert run("eval", "--baseline", "ca", "--threshold", t, "--eval-dir", dataset / "eval", "--out", out) == 0
        rep = json.loads(out.read_text())
        prec.append(rep["medians"]["sharp-edge"])
        assert all(s["2"]["tp"] == 0 and s["2"]["fp"] == 0 for s in rep["clouds"].values())
    assert prec[1]["precision"] >= prec[0]["precision"]
    assert prec[1]["recall"] <= prec[0]["recall"]


def test_eval_errors(tmp_path, model):
    path = tmp_path / "u.xyz"
    write_xyz(PointCloud(np.random.default_rng(0).random((300, 3))), path)
    with pytest.raises(SystemExit) as exc:
        run("eval", "--model", model, "--cloud", path, "--out", tmp_path / "r.json")
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        run("eval", "--cloud", path, "--out", tmp_path / "r.json")
    assert not (tmp_path / "r.json").exists()


def test_bench_report(tmp_path, model):
    out = tmp_path / "b.json"
    assert run("bench", "--points", 20000, "--repeats", 2, "--scales", "32,16", "--model", model, "--out", out) == 0
    rep = json.loads(out.read_text())
    med = rep["median_seconds"]
    assert rep["points"] > 15000 and rep["points_per_second"] > 0
    assert med["index"] + med["features"] + med["inference"] <= med["total"] + 1e-9
    for i in range(2):
        parts = sum(rep["all_seconds"][k][i] for k in ("index", "features", "inference"))
        assert parts <= rep["all_seconds"]["total"][i] + 1e-9
