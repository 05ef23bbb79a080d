import csv
import hashlib
import json

import numpy as np
import pytest

from sourceloc.calibration import CalibrationLibrary, SourceModel, save_library
from sourceloc.cli import main
from sourceloc.network import save_nodes, synthetic_nodes

from conftest import make_nodes, write_nodes_csv


@pytest.fixture
def nodes_csv(tmp_path):
    path = tmp_path / "nodes.csv"
    save_nodes(synthetic_nodes(8, seed=1), path)
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_netstats(tmp_path, nodes_csv):
    out = tmp_path / "ns"
    assert main(["netstats", "--nodes", str(nodes_csv), "--out", str(out), "--n-perm", "5"]) == 0
    assert (out / "gravity_summary.csv").exists() and (out / "smallworld.txt").exists()
    rows = _rows(out / "gravity_summary.csv")
    assert len(rows) == 8
    assert sum(float(r["in_strength"]) for r in rows) == pytest.approx(8.0)
    m = _manifest(out)
    assert m["command"] == "netstats" and m["master_seed"] == 0
    assert m["inputs"]["nodes"]["sha256"] == hashlib.sha256(nodes_csv.read_bytes()).hexdigest()
    first = (out / "smallworld.txt").read_bytes()
    assert main(["netstats", "--nodes", str(nodes_csv), "--out", str(out), "--n-perm", "5"]) == 0
    assert (out / "smallworld.txt").read_bytes() == first


def test_malformed_csv_exit_code(tmp_path, capsys):
    bad = write_nodes_csv(tmp_path / "bad.csv", ["0,a,-29.0,30.0,1000,0.5,0.5", "1,b,-29.1,30.1,zero,0.1,0.9"])
    assert main(["netstats", "--nodes", str(bad), "--out", str(tmp_path / "o")]) != 0
    err = capsys.readouterr().err
    assert "bad.csv:3:" in err


def test_unknown_config_key(tmp_path, nodes_csv, capsys):
    cfg = tmp_path / "p.cfg"
    cfg.write_text("betamax = 0\n")
    assert main(["simulate", "--nodes", str(nodes_csv), "--config", str(cfg), "--source", "0",
                 "--out", str(tmp_path / "o")]) == 2
    assert "unknown parameter" in capsys.readouterr().err


def test_simulate_without_exposure(tmp_path):
    nodes = tmp_path / "nodes.csv"
    save_nodes(make_nodes([2600, 5000, 8000]), nodes)
    cfg = tmp_path / "p.cfg"
    cfg.write_text("beta_max = 0\n")
    out = tmp_path / "sim"
    assert main(["simulate", "--nodes", str(nodes), "--config", str(cfg), "--source", "0",
                 "--seed", "4", "--out", str(out)]) == 0
    days = {int(r["observer_id"]): int(r["day"]) for r in _rows(out / "arrivals.csv")}
    assert days == {0: 1, 1: -1, 2: -1}
    traj = _rows(out / "trajectory.csv")
    assert len(traj) == 1001 * 3
    assert len({r["t"] for r in traj}) == 1001


def test_simulate_seed_reproducible(tmp_path, nodes_csv):
    files = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["simulate", "--nodes", str(nodes_csv), "--source", "2", "--seed", "9",
                     "--observers", "1,3,5", "--out", str(out)]) == 0
        files.append(((out / "arrivals.csv").read_bytes(), (out / "trajectory.csv").read_bytes()))
    assert files[0] == files[1]
    assert files[0][0].decode().splitlines()[0] == "observer_id,day"


def _calibrate(nodes_csv, out, *extra):
    return main(["calibrate", "--nodes", str(nodes_csv), "--observers", "1,4", "--n-train", "12",
                 "--seed", "2", "--out", str(out), *extra])


def test_calibrate_subset_and_resume(tmp_path, nodes_csv):
    part = tmp_path / "lib"
    assert _calibrate(nodes_csv, part, "--sources", "3") == 0
    rows = _rows(part / "models.csv")
    assert {r["source_id"] for r in rows} == {"3"}
    assert all(int(r["n_used"]) + int(r["n_censored"]) == 12 for r in rows)
    before = [r for r in rows]
    assert _calibrate(nodes_csv, part) == 0
    resumed = _rows(part / "models.csv")
    assert [r for r in resumed if r["source_id"] == "3"] == before
    fresh = tmp_path / "fresh"
    assert _calibrate(nodes_csv, fresh) == 0
    assert (part / "models.csv").read_bytes() == (fresh / "models.csv").read_bytes()
    assert len(resumed) == 8 * 2


def test_calibrate_keep_replicates(tmp_path, nodes_csv):
    out = tmp_path / "lib"
    assert _calibrate(nodes_csv, out, "--sources", "0,5", "--keep-replicates", "--jobs", "2") == 0
    reps = _rows(out / "replicates.csv")
    assert len(reps) == 2 * 12 * 2


@pytest.fixture
def toy(tmp_path):
    """Four identical source models, so the posterior equals the prior."""
    nodes = tmp_path / "nodes.csv"
    save_nodes(make_nodes([1000, 2000, 3000, 4000]), nodes)
    models = {s: SourceModel(s, np.array([3.0, 6.0]), np.array([1.0, 2.0]), 10, 0) for s in range(4)}
    save_library(CalibrationLibrary(models, (1, 2)), tmp_path / "lib")
    (tmp_path / "arr.csv").write_text("observer_id,day\n1,4\n2,5\n")
    (tmp_path / "prior.csv").write_text("node_id,weight\n0,0.5\n1,0.3\n2,0.15\n3,0.05\n")
    return tmp_path


def _infer(toy, out, *extra):
    return main(["infer", "--nodes", str(toy / "nodes.csv"), "--library", str(toy / "lib"),
                 "--arrivals", str(toy / "arr.csv"), "--out", str(toy / out), *extra])


def test_infer_toy_region(toy):
    assert _infer(toy, "o", "--prior", f"custom:{toy / 'prior.csv'}", "--alpha", "0.3") == 0
    post = [float(r["posterior"]) for r in _rows(toy / "o" / "posterior.csv")]
    np.testing.assert_allclose(post, [0.5, 0.3, 0.15, 0.05], rtol=1e-12)
    lines = (toy / "o" / "hpd.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:lines.index("")]] == ["0", "1"]
    alpha, tau, mass, size = lines[-1].split(",")
    assert float(tau) == pytest.approx(0.15) and size == "2"


def test_infer_prior_flag_reweights(toy):
    for name, prior in (("u", "uniform"), ("r", "r0")):
        assert _infer(toy, name, "--prior", prior) == 0
    u = _rows(toy / "u" / "posterior.csv")
    r = _rows(toy / "r" / "posterior.csv")
    assert [a["loglik"] for a in u] == [b["loglik"] for b in r]
    pu = np.array([float(a["posterior"]) for a in u])
    w = np.array([float(b["prior"]) for b in r])
    np.testing.assert_allclose([float(b["posterior"]) for b in r], pu * w / np.sum(pu * w), rtol=1e-12)


def test_infer_censored_input(toy, capsys):
    (toy / "arr.csv").write_text("observer_id,day\n1,4\n2,-1\n")
    assert _infer(toy, "o") == 2
    assert "inference requires all observers infected" in capsys.readouterr().err


def test_infer_flags(toy):
    assert _infer(toy, "c", "--time-mode", "centered", "--logdet", "off") == 0
    assert _infer(toy, "p", "--baseline", "pinto", "--mean-delay", "0.5", "--delay-var", "1.0") == 0
    notes = (toy / "p" / "baseline.txt").read_text()
    assert "mean_delay = 0.5" in notes
    assert _manifest(toy / "p")["inputs"]["arrivals"]["path"].endswith("arr.csv")


def test_experiment_command(tmp_path, nodes_csv):
    cfg = tmp_path / "e.cfg"
    cfg.write_text("n_observers = 3\nn_train = 10\nn_test = 4\nsources = random:3\nbaseline = pinto\n")
    outs = []
    for jobs in ("1", "2"):
        out = tmp_path / f"x{jobs}"
        assert main(["experiment", "--nodes", str(nodes_csv), "--experiment", str(cfg), "--seed", "5",
                     "--jobs", jobs, "--out", str(out)]) == 0
        outs.append(out)
    for f in ("cases.csv", "cases_pinto.csv", "summary.csv"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    rows = _rows(outs[0] / "cases.csv")
    assert len(rows) == 3 * 4
    assert list(rows[0]) == ["source", "replicate", "map", "in_region", "region_size", "rank", "dist_km"]
    assert _manifest(outs[0])["master_seed"] == 5


def test_synth_nodes(tmp_path):
    out = tmp_path / "n.csv"
    assert main(["synth-nodes", "--n", "5", "--seed", "2", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 6
