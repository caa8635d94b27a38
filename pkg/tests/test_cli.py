import csv
import json

import pytest
import yaml

from polychain import io
from polychain.cli import main

CONFIG = {
    "build": {"n_cups": 2, "dp_max": 12},
    "encoder": {"hidden": 8, "layers": 2},
    "pretrain": {"epochs": 2, "batch_size": 16},
    "finetune": {"epochs": 3, "warmup": 1, "batch_size": 4, "lr": 1e-3, "n_quantiles": 50},
}


def run(capsys, *argv):
    rc = main(list(argv))
    out, err = capsys.readouterr()
    return rc, (json.loads(out.strip().splitlines()[-1]) if rc == 0 else json.loads(err.strip().splitlines()[-1]))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.yaml").write_text(yaml.safe_dump(CONFIG))
    return d


def test_pipeline(workdir, capsys):
    d, cfg = workdir, str(workdir / "cfg.yaml")
    rc, res = run(capsys, "synth", "--n-polymers", "20", "--n-corpus", "40", "--out", str(d), "--seed", "3")
    assert rc == 0 and (d / "dataset.csv").exists() and (d / "corpus.txt").exists()

    rc, res = run(capsys, "build", "--dataset", str(d / "dataset.csv"), "--config", cfg, "--out", str(d))
    assert rc == 0 and res["graphs"] == 40
    cache = io.GraphCache(d / "graphs.pchg")
    assert len(cache) == 40

    rc, res = run(capsys, "pretrain", "--corpus", str(d / "corpus.txt"), "--config", cfg, "--out", str(d / "enc"))
    assert rc == 0 and (d / "enc" / "encoder.ckpt").exists()

    for ssl, sub in (("off", "plain"), ("on", "ssl")):
        extra = ["--encoder", str(d / "enc" / "encoder.ckpt")] if ssl == "on" else []
        rc, res = run(capsys, "train", "--cache", str(d / "graphs.pchg"), "--dataset", str(d / "dataset.csv"),
                      "--config", cfg, "--only-folds", "0,1", "--seeds", "0", "--ssl", ssl, "--out", str(d / sub),
                      *extra)
        assert rc == 0 and res["n_runs"] == 2, res
        assert (d / sub / "fold0-seed0-rank0.ckpt").exists()
    assert json.loads((d / "ssl" / "summary.json").read_text())["ssl"] == "Yes"

    rc, res = run(capsys, "evaluate", "--run-dir", str(d / "plain"), "--cache", str(d / "graphs.pchg"),
                  "--dataset", str(d / "dataset.csv"), "--mc-passes", "3", "--out", str(d / "eval"))
    assert rc == 0 and (d / "eval" / "predictions.csv").exists()

    rc, res = run(capsys, "sweep", "--checkpoint", str(d / "plain" / "fold0-seed0-rank0.ckpt"),
                  "--psmiles", "[*]CC([*])c1ccccc1", "--grid", "3", "--config", cfg, "--out", str(d / "sw"))
    assert rc == 0 and res["cells"] == 9
    with open(d / "sw" / "sweep.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 9


def test_repeat_unit_and_topology(workdir, capsys):
    d = workdir
    rows = (d / "dataset.csv").read_text().splitlines()
    (d / "two.csv").write_text("\n".join(rows[:3]) + "\n")
    rc, res = run(capsys, "build", "--dataset", str(d / "two.csv"), "--construction", "repeat-unit",
                  "--features", "topology-only", "--out", str(d / "ru"))
    assert rc == 0 and res["graphs"] == 2
    g = io.GraphCache(d / "ru" / "graphs.pchg")[0]
    assert (g.x == 1).all()


def test_error_records(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    good = (tmp_path / "x")
    main(["synth", "--n-polymers", "4", "--n-corpus", "0", "--out", str(good)])
    capsys.readouterr()
    lines = (good / "dataset.csv").read_text().splitlines()
    header = lines[0].split(",")
    cells = lines[2].split(",")
    cells[header.index("mn_g_mol")] = "abc"
    lines[2] = ",".join(cells)
    bad.write_text("\n".join(lines) + "\n")
    rc, rec = run(capsys, "build", "--dataset", str(bad), "--out", str(tmp_path))
    assert rc == 2 and rec["line"] == 3 and rec["path"].endswith("bad.csv")
    rc, rec = run(capsys, "build", "--dataset", str(tmp_path / "missing.csv"), "--out", str(tmp_path))
    assert rc == 2 and "error" in rec
    (tmp_path / "c.yaml").write_text("build: {n_cups: [1\n")
    rc, rec = run(capsys, "build", "--dataset", str(bad), "--config", str(tmp_path / "c.yaml"))
    assert rc == 2 and rec["error"] == "DatasetError"
