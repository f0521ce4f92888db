import csv
import io
import json

import numpy as np
import pytest

from mindreading import archsim
from mindreading.cli import main
from mindreading.eegnet import Model, eegnet_spec
from mindreading.formats import eeg_to_csv, net_to_dict, save_weights
from mindreading.logmac import quantize_model


def small_net():
    return eegnet_spec(conv_channels=(2,), height=10, width=11, fc1=5, lstm_hidden=3, time_steps=2, fc2=4, classes=6)


@pytest.fixture
def files(tmp_path):
    net = small_net()
    model = Model.random(net, 11, scale=1.5)
    (tmp_path / "net.json").write_text(json.dumps(net_to_dict(net)))
    save_weights(model, tmp_path / "w.bin")
    save_weights(quantize_model(model), tmp_path / "q.bin")
    samples = np.random.default_rng(4).normal(0, 40, (5, 64))
    (tmp_path / "eeg.csv").write_text(eeg_to_csv(samples))
    return tmp_path


def run(*argv):
    return main([str(a) for a in argv])


def test_quantize_deterministic(files):
    for name in ("a.bin", "b.bin"):
        assert run("quantize", "--net", files / "net.json", "--weights", files / "w.bin", "--out", files / name) == 0
    assert (files / "a.bin").read_bytes() == (files / "b.bin").read_bytes()
    assert (files / "a.bin.summary.json").read_bytes() == (files / "b.bin.summary.json").read_bytes()
    summary = json.loads((files / "a.bin.summary.json").read_text())
    assert summary["weight_window"] == [-4, 0]
    assert len(summary["layers"]) == len(small_net().layers)
    manifest = json.loads((files / "a.bin.manifest.json").read_text())
    assert "timestamp" in manifest and str(files / "a.bin") in manifest["outputs"]


@pytest.mark.parametrize("mode, weights", [("float", "w.bin"), ("ulq", "q.bin"), ("p2qnn", "q.bin")])
def test_infer_deterministic(files, mode, weights, capsys):
    outs = []
    for name in ("r1.json", "r2.json"):
        assert run("infer", "--net", files / "net.json", "--weights", files / weights, "--input", files / "eeg.csv",
                   "--mode", mode, "--out", files / name) == 0
        outs.append((files / name).read_bytes())
    assert outs[0] == outs[1]
    res = json.loads(outs[0])
    assert len(res["scores"]) == 6 and abs(sum(res["scores"]) - 1) < 1e-9
    assert res["label"] == int(np.argmax(res["scores"]))
    assert ("quant_stats" in res) == (mode != "float")


def test_infer_mode_mismatch(files, capsys):
    rc = run("infer", "--net", files / "net.json", "--weights", files / "w.bin", "--input", files / "eeg.csv",
             "--mode", "ulq")
    assert rc == 4
    rc = run("infer", "--net", files / "net.json", "--weights", files / "q.bin", "--input", files / "eeg.csv")
    assert rc == 4
    assert run("quantize", "--net", files / "net.json", "--weights", files / "q.bin", "--out", files / "x") == 4


def test_infer_missing_files(files, capsys):
    base = ["infer", "--net", files / "net.json", "--weights", files / "w.bin"]
    assert run(*base, "--input", files / "nope.csv") == 2
    assert "--input" in capsys.readouterr().err
    assert run(*base, "--input", files / "eeg.csv", "--map", files / "nomap.csv") == 2
    assert "--map" in capsys.readouterr().err
    assert run("infer", "--net", files / "missing.json", "--input", files / "eeg.csv") == 2


def test_infer_bad_eeg(files, capsys):
    (files / "bad.csv").write_text("timestamp,a\n0,1\n")
    assert run("infer", "--net", files / "net.json", "--weights", files / "w.bin", "--input", files / "bad.csv") == 2


def test_unwritable_output(files, capsys):
    out = files / "no_such_dir" / "x.json"
    assert run("simulate", "--config", "mindreading", "--out", out) == 3
    assert "cannot write" in capsys.readouterr().err


def test_zero_weights_uniform(files, capsys):
    save_weights(Model.zeros(small_net()), files / "z.bin")
    assert run("infer", "--net", files / "net.json", "--weights", files / "z.bin", "--input", files / "eeg.csv",
               "--format", "csv") == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert [float(v) for v in rows[1][2:]] == pytest.approx([1 / 6] * 6, abs=1e-15)


def test_simulate_deterministic(tmp_path):
    for name in ("s1.json", "s2.json"):
        assert run("simulate", "--config", "mindreading", "--out", tmp_path / name) == 0
    a = (tmp_path / "s1.json").read_bytes()
    assert a == (tmp_path / "s2.json").read_bytes()
    rep = json.loads(a)
    assert rep["macs_per_inference"] == 33_997_760


def test_simulate_formats(capsys):
    assert run("simulate", "--config", "mindreading-b", "--format", "csv") == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 1 and int(rows[0]["initiation_interval"]) == 3
    assert run("simulate", "--config", "mindreading", "--format", "text") == 0
    assert "IPS" in capsys.readouterr().out


def test_simulate_config_errors(tmp_path, capsys):
    assert run("simulate", "--config", "unknown-box") == 2
    assert run("simulate") == 2
    p = tmp_path / "bad.ini"
    p.write_text("[config]\nname = x\n[component:a]\nclass = laser\n")
    assert run("simulate", "--config", p) == 2
    assert "laser" in capsys.readouterr().err


@pytest.mark.parametrize("fmt", ["json", "ini"])
def test_dump_config_round_trip(tmp_path, fmt):
    p = tmp_path / f"c.{fmt}"
    assert run("simulate", "--config", "holylight-a-custom", "--dump-config", fmt, "--out", p) == 0
    assert archsim.load_config(str(p)) == archsim.builtin("holylight-a-custom")
    q = tmp_path / "r.json"
    assert run("simulate", "--config", p, "--out", q) == 0
    assert json.loads(q.read_text())["power_mw"] == pytest.approx(57.71)


def test_compare_csv(capsys):
    assert run("compare", "holylight-a-custom", "mindreading", "--format", "csv") == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    sources = {r["source"] for r in rows}
    assert sources == {"simulated", "published"}
    assert run("compare", "mindreading") == 2


def test_gates(capsys):
    assert run("gates", "--n-random", "1000", "--format", "json") == 0
    res = json.loads(capsys.readouterr().out)
    assert all(v["failures"] == 0 for v in res.values())
