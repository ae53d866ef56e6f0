import csv
import hashlib
import io
import json
import shutil

import pytest

from conceptlrp.cli import main, read_config, ConfigError


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def run_twice(argv, out):
    """Run a command twice into the same directory; return both tree digests."""
    assert main(argv) == 0
    first = digest(out)
    shutil.rmtree(out)
    assert main(argv) == 0
    return first, digest(out)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--n", "12", "--seed", "0", "--out", str(root / "data")]) == 0
    assert main(["gen-data", "--n", "12", "--seed", "2", "--min-cars", "1", "--max-cars", "1",
                 "--out", str(root / "cars")]) == 0
    assert main(["build-model", "--arch", "toy-pid", "--out", str(root / "pid")]) == 0
    assert main(["build-model", "--arch", "toy-det", "--out", str(root / "det")]) == 0
    return root


# ---- determinism of every command


def test_gen_data_deterministic(ws):
    out = ws / "gd"
    a, b = run_twice(["gen-data", "--n", "4", "--seed", "3", "--out", str(out)], out)
    assert a == b
    assert len(list((out / "images").glob("*.png"))) == 4 and (out / "manifest.json").is_file()


def test_build_model_deterministic(ws):
    out = ws / "bm"
    a, b = run_twice(["build-model", "--arch", "toy-det", "--weights", "random", "--seed", "4", "--out", str(out)],
                     out)
    assert a == b


def test_train_deterministic(ws):
    out = ws / "tr"
    assert main(["build-model", "--weights", "random", "--out", str(ws / "pid_rand")]) == 0
    a, b = run_twice(["train", "--model", str(ws / "pid_rand"), "--data", str(ws / "data"), "--epochs", "1",
                      "--out", str(out)], out)
    assert a == b
    hist = json.loads((out / "history.json").read_text())
    assert hist["status"] == "ok" and len(hist["loss_history"]) == 1


def test_explain_bundle(ws):
    out = ws / "ex"
    a, b = run_twice(["explain", "--model", str(ws / "pid"), "--data", str(ws / "data"), "--index", "1",
                      "--out", str(out)], out)
    assert a == b
    bundle = json.loads((out / "explanation.json").read_text())
    assert list(bundle["concepts"]) == ["head2"]
    assert bundle["config"]["seed"] == 0 and bundle["seeds"] == {"seed": 0}
    led = bundle["conservation"]
    assert abs(led["seed_total"] - led["input_total"] - led["absorbed_total"]) <= 1e-9 * abs(led["seed_total"])
    assert led["max_node_residual"] < 1e-9 and led["flagged_nodes"] == []
    assert bundle["explained_scalar"] == pytest.approx(led["seed_total"])
    head2 = bundle["concepts"]["head2"]
    assert len(head2["top_concepts"]) == 3 and all((out / f).is_file() for f in head2["heatmaps"])
    assert (out / "heatmap.png").is_file()


def test_explain_detector_default_layer(ws):
    out = ws / "exd"
    assert main(["explain", "--model", str(ws / "det"), "--data", str(ws / "cars"), "--out", str(out)]) == 0
    bundle = json.loads((out / "explanation.json").read_text())
    assert list(bundle["concepts"]) == ["c3"] and bundle["target"]["head"] == "objectness"


def test_prototypes_fit_and_assign(ws):
    fit = ws / "pf"
    a, b = run_twice(["prototypes", "fit", "--model", str(ws / "det"), "--data", str(ws / "cars"), "--layer", "c3",
                      "--k", "3", "--out", str(fit)], fit)
    assert a == b
    store = json.loads((fit / "prototypes.json").read_text())
    assert sum(p["coverage"] for p in store["summary"]["prototypes"]) == pytest.approx(100, abs=0.1)
    asg = ws / "pa"
    a, b = run_twice(["prototypes", "assign", "--store", str(fit), "--model", str(ws / "det"), "--data",
                      str(ws / "cars"), "--index", "0-2", "--out", str(asg)], asg)
    assert a == b
    res = json.loads((asg / "assignment.json").read_text())["results"]
    assert len(res) == 3
    r = res[0]
    assert 0 <= r["component"] < 3 and abs(sum(r["responsibilities"]) - 1) < 1e-12
    assert isinstance(r["outlier"], bool) and 0 <= r["percentile"] <= 100
    assert len(r["diff"]["entries"]) == 8


def test_prototypes_k_larger_than_n(ws, tmp_path):
    rc = main(["prototypes", "fit", "--model", str(ws / "det"), "--data", str(ws / "cars"), "--layer", "c3",
               "--k", "50", "--out", str(tmp_path)])
    assert rc == 2


def _eval(ws, out, seed, methods="lrp,activation,random"):
    return ["eval-perturb", "--model", str(ws / "pid"), "--data", str(ws / "data"), "--methods", methods,
            "--n", "3", "--seed", str(seed), "--out", str(out)]


def test_eval_perturb_artifacts(ws):
    out = ws / "ev"
    a, b = run_twice(_eval(ws, out, 0), out)
    assert a == b
    rep = json.loads((out / "bench_report.json").read_text())
    layers = rep["layers"]
    assert layers == ["head1", "head2"]
    for layer in layers:
        assert sorted(r["method"] for r in rep["results"] if r["layer"] == layer) == ["activation", "lrp", "random"]
    rows = list(csv.DictReader(io.StringIO((out / "curves.csv").read_text())))
    assert set(rows[0]) == {"sample", "layer", "method", "direction", "step", "logit"}
    assert (out / "bench_chart.png").read_bytes()[:4] == b"\x89PNG"


def test_eval_seed_changes_only_random(ws):
    a, b = ws / "ev_s0", ws / "ev_s1"
    assert main(_eval(ws, a, 0)) == 0 and main(_eval(ws, b, 1)) == 0
    ra = {(r["method"], r["layer"]): r for r in json.loads((a / "bench_report.json").read_text())["results"]}
    rb = {(r["method"], r["layer"]): r for r in json.loads((b / "bench_report.json").read_text())["results"]}
    for key in ra:
        assert (ra[key] == rb[key]) == (key[0] != "random"), key


# ---- exit codes and configuration


def test_usage_errors(ws, tmp_path, capsys):
    assert main(["gen-data", "--n", "2"]) == 2  # missing --out
    assert main(["gen-data", "--out", str(tmp_path)]) == 2  # missing --n
    assert main([]) == 2
    assert main(["--help"]) == 0
    assert main(["explain", "--model", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    assert main(_eval(ws, tmp_path / "e", 0, methods="lrp,saliency")) == 2
    assert "valid methods" in capsys.readouterr().err


def test_target_resolution_failure_exit_3(ws, tmp_path):
    # the road class is absent from a blank image
    from PIL import Image
    import numpy as np
    img = tmp_path / "blank.png"
    Image.fromarray(np.full((64, 64, 3), [77, 128, 56], dtype=np.uint8)).save(img)
    rc = main(["explain", "--model", str(ws / "pid"), "--image", str(img), "--class", "2", "--out",
               str(tmp_path / "o")])
    assert rc == 3


def test_config_file_and_precedence(ws, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# dataset\nn = 2\nseed = 9\nout = {tmp_path / 'from_cfg'}\n")
    assert read_config(cfg) == {"n": "2", "seed": "9", "out": str(tmp_path / "from_cfg")}
    assert main(["gen-data", "--config", str(cfg)]) == 0
    man = json.loads((tmp_path / "from_cfg" / "manifest.json").read_text())
    assert man["n"] == 2 and man["seed"] == 9
    assert main(["gen-data", "--config", str(cfg), "--seed", "1", "--out", str(tmp_path / "flag")]) == 0
    man = json.loads((tmp_path / "flag" / "manifest.json").read_text())
    assert man["seed"] == 1 and man["n"] == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("colour = red\n")
    assert main(["gen-data", "--config", str(bad), "--n", "1", "--out", str(tmp_path)]) == 2
    with pytest.raises(ConfigError):
        read_config(tmp_path / "nope.cfg")
