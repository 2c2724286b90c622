import filecmp
import json
import os
import re
import shutil
import subprocess

import numpy as np
import pytest

import oraclesage as osg

CLI = os.environ.get("ORACLESAGE_CLI") or shutil.which("oraclesage")

SMALL_CONFIG = """\
patch_size = 16
d = 8
encoder_blocks = 3
encoder_heads = 2
adapter_layers = 1
adapter_heads = 2
ffn_hidden = 16
pyramid_levels = 2
max_regions = 3
spatial_heads = 2
T = 2
heads = 2
edge_dim = 4
batch = 4
phase1_epochs = 2
phase2_epochs = 1
phase3_epochs = 1
"""

needs_cli = pytest.mark.skipif(CLI is None, reason="command-line binary not available")


def run_cli(*args):
    return subprocess.run([CLI, *map(str, args)], capture_output=True, text=True, timeout=600)


def dot_counts(text):
    nodes = re.findall(r"^\s+([vcs]\d+) \[shape=", text, re.M)
    edges = re.findall(r"^\s+([vcs]\d+) -> ([vcs]\d+) \[label=\"(\w+)", text, re.M)
    return nodes, edges


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    osg.synth(str(out), chars=4, imgs=10, seed=3)
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus):
    if CLI is None:
        pytest.skip("command-line binary not available")
    work = tmp_path_factory.mktemp("run")
    cfg = work / "small.cfg"
    cfg.write_text(SMALL_CONFIG)
    res = run_cli("train", "--config", cfg, "--data", corpus, "--out", work / "out", "--quiet")
    assert res.returncode == 0, res.stderr
    return work / "out"


def test_ops_gradcheck():
    names = osg.op_names()
    assert len(names) > 10
    for name in names[:5]:
        r = osg.gradcheck_op(name)
        assert r["passed"], r
        assert r["checked"] > 0
    with pytest.raises(osg.ConfigError):
        osg.gradcheck_op("no-such-op")


def test_config_round_trip():
    text = osg.default_config()
    assert osg.normalize_config(text) == text
    assert "d = 32" in osg.normalize_config("d = 32\n")
    with pytest.raises(osg.ConfigError, match="width"):
        osg.normalize_config("width = 3\n")


def test_synth_is_deterministic(tmp_path, corpus):
    osg.synth(str(tmp_path / "again"), chars=4, imgs=10, seed=3)
    cmp = filecmp.dircmp(corpus, tmp_path / "again")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    records = json.loads((corpus / "annotations.json").read_text())["records"]
    assert len(records) == 4


def test_pgm_round_trip(tmp_path, corpus):
    img = osg.read_pgm(str(next((corpus / "images").rglob("*.pgm"))))
    assert img.shape == (64, 64)
    assert img.min() >= 0.0 and img.max() <= 1.0 and img.max() > 0.0
    rng = np.random.default_rng(0)
    x = rng.random((64, 64))
    for ascii_ in (False, True):
        osg.write_pgm(str(tmp_path / "x.pgm"), x, ascii=ascii_)
        assert np.max(np.abs(osg.read_pgm(str(tmp_path / "x.pgm")) - x)) <= 0.5 / 255 + 1e-12
    (tmp_path / "bad.pgm").write_bytes(b"P5\n64 64\n255\n\x00\x01")
    with pytest.raises(osg.DataError):
        osg.read_pgm(str(tmp_path / "bad.pgm"))


def test_predictor(trained, corpus):
    p = osg.Predictor(str(trained / "model.osg"))
    assert len(p.characters) == 4
    img = osg.read_pgm(str(next((corpus / "images").rglob("*.pgm"))))
    out = p.predict(img, top=10)
    probs = [q for _, q in out["top"]]
    assert len(probs) == 4
    assert probs == sorted(probs, reverse=True)
    assert abs(sum(probs) - 1.0) < 1e-9
    assert p.predict(img) == out
    for comp in out["components"]:
        x0, y0, x1, y1 = comp["box"]
        assert 0.0 <= x0 <= x1 <= 1.0 and 0.0 <= y0 <= y1 <= 1.0
    nodes, edges = dot_counts(p.graph_dot(img))
    assert len(nodes) == len(set(nodes))
    assert all(s in nodes and d in nodes and s != d for s, d, _ in edges)
    with pytest.raises(osg.DataError):
        p.predict(np.zeros((32, 32)))

    m = osg.evaluate(str(trained / "model.osg"), str(corpus))
    assert m["count"] == 40
    assert m["top1"] <= m["top10"] <= m["top_all"] == 1.0


@needs_cli
def test_cli_train_outputs(trained):
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["characters"] == 4
    assert 0.0 <= summary["train"]["top1"] <= summary["train"]["top10"] <= 1.0
    lines = (trained / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1 + 4
    assert (trained / "model.osg.json").exists()
    assert "d = 8" in (trained / "config.txt").read_text()


@needs_cli
def test_cli_infer_and_graph_export(trained, corpus, tmp_path):
    image = next((corpus / "images").rglob("*.pgm"))
    res = run_cli("infer", "--model", trained / "model.osg", "--image", image, "--export-graph", tmp_path / "g.dot")
    assert res.returncode == 0, res.stderr
    reported = re.search(r"graph: (\d+) nodes, (\d+) edges", res.stdout)
    nodes, edges = dot_counts((tmp_path / "g.dot").read_text())
    assert (len(nodes), len(edges)) == (int(reported[1]), int(reported[2]))

    bad = tmp_path / "bad.pgm"
    bad.write_text("P2\n64 64\n255\n1 2 3\n")
    res = run_cli("infer", "--model", trained / "model.osg", "--image", bad)
    assert res.returncode == 2
    assert "error" in res.stderr


@needs_cli
def test_cli_exit_codes(tmp_path):
    assert run_cli("config").returncode == 0
    assert run_cli("no-such-command").returncode == 2

    res = run_cli("synth", "--out", tmp_path / "huge", "--chars", 1000000)
    assert res.returncode == 2

    cfg = tmp_path / "typo.cfg"
    cfg.write_text("widht = 3\n")
    res = run_cli("train", "--config", cfg, "--data", tmp_path, "--out", tmp_path / "o")
    assert res.returncode == 2
    assert "widht" in res.stderr

    assert run_cli("gradcheck", "--op", "softmax").returncode == 0
    assert run_cli("gradcheck", "--op", "softmax", "--inject-fault", 0.01).returncode == 1
