import json
from pathlib import Path

import numpy as np
import pytest

from corrforge import cli

CONFIG = """
[run]
work_dir = "work"

[synth]
family = "ellipsoid_bump"
count = 4
resolution = 162

[sdf]
spacing = 2.0

[patches]
n_pairs = 16

[train]
max_epochs = 1
batch_pairs = 8

[optimize]
particles = 8
iterations = 5
init_iterations = 5

[evaluate]
max_modes = 2
n_draws = 20
variants = { xyz = "work/optimize/xyz" }
"""


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture()
def config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(CONFIG)
    return path


def test_config_errors_are_all_listed(capsys, config):
    code, _, err = run(capsys, "optimize", "--config", str(config), "mode=bad", "particles=7", "train.momentum=2",
                       "bogus=1", "--threads", "0")
    assert code == cli.EXIT_CONFIG
    report = json.loads(err)
    assert report["error"] == "config" and report["subcommand"] == "optimize"
    text = " ".join(report["violations"])
    for needle in ("optimize.bogus", "optimize.mode", "power of two", "momentum", "run.threads"):
        assert needle in text
    assert len(report["violations"]) == 5


def test_type_errors(capsys, config):
    code, _, err = run(capsys, "sdf", "--config", str(config), "spacing=\"wide\"", "synth.count=1")
    assert code == cli.EXIT_CONFIG
    violations = json.loads(err)["violations"]
    assert any("sdf.spacing must be float" in v for v in violations)
    assert any("count must be >= 2" in v for v in violations)


def test_missing_config_and_bad_usage(capsys, tmp_path):
    code, _, err = run(capsys, "sdf", "--config", str(tmp_path / "absent.toml"))
    assert code == cli.EXIT_CONFIG and "does not exist" in json.loads(err)["message"]
    code, _, err = run(capsys, "frobnicate", "--config", "x.toml")
    assert code == cli.EXIT_CONFIG and json.loads(err)["error"] == "usage"
    bad = tmp_path / "bad.toml"
    bad.write_text("[run\n")
    code, _, err = run(capsys, "sdf", "--config", str(bad))
    assert code == cli.EXIT_CONFIG and "not valid TOML" in json.loads(err)["message"]


def test_missing_input_reported(capsys, config):
    code, _, err = run(capsys, "sdf", "--config", str(config), "input=nowhere")
    assert code == cli.EXIT_CONFIG
    assert "nowhere" in json.loads(err)["violations"][0]


def test_override_parsing():
    raw = {}
    assert cli.apply_overrides(raw, ["spacing=0.5", "synth.ranges.axis_x=[1, 2]", "family=flange"], "sdf") == []
    assert raw == {"sdf": {"spacing": 0.5, "family": "flange"}, "synth": {"ranges": {"axis_x": [1, 2]}}}
    assert cli.apply_overrides({}, ["novalue"], "sdf") == ["override 'novalue' is not key=value"]


def test_defaults_resolve_against_config_dir(tmp_path):
    cfg, errors = cli.resolve_config({}, tmp_path)
    assert errors == []
    assert cfg["sdf"]["output"] == str(tmp_path / "work" / "sdf")
    assert cfg["optimize"]["output"] == str(tmp_path / "work" / "optimize" / "xyz")
    assert cfg["train"]["max_epochs"] == 200 and cfg["train"]["patience"] == 10


def test_pipeline_end_to_end(capsys, config):
    work = config.parent / "work"
    for stage in ("synth", "sdf", "patches", "train", "features", "optimize", "evaluate", "report"):
        code, out, err = run(capsys, stage, "--config", str(config), "--seed", "3")
        assert code == 0, err
        assert json.loads(out)["status"] == "ok"
    manifest = json.loads((work / "sdf" / "manifest.json").read_text())
    assert manifest["subcommand"] == "sdf" and manifest["seed"] == 3 and manifest["version"]
    assert manifest["config"]["sdf"]["spacing"] == 2.0
    assert len(manifest["inputs"]) == 4 and all(len(h) == 64 for h in manifest["inputs"].values())
    assert set(manifest["outputs"]) >= {"shape_000.sdf", "shape_000.json"}
    particles = sorted((work / "optimize" / "xyz").glob("shape_*.particles"))
    assert len(particles) == 4
    assert len(particles[0].read_text().splitlines()) == 8
    with open(work / "metrics" / "metrics_xyz.csv") as fh:
        assert fh.readline().strip() == "k,cumulative_variance_pct,generalization_mm,specificity_mm"
    dat = (work / "report" / "compactness.dat").read_text().splitlines()
    assert dat[0] == "# k xyz" and len(dat) == 3
    ff = np.fromfile(work / "features" / "shape_000.f32", dtype="<f4")
    assert ff.size == 162 * 10

    # a rerun with the same seed reproduces the artifacts byte for byte
    first = {p.name: p.read_bytes() for p in (work / "optimize" / "xyz").iterdir()}
    code, _, err = run(capsys, "optimize", "--config", str(config), "--seed", "3")
    assert code == 0, err
    assert {p.name: p.read_bytes() for p in (work / "optimize" / "xyz").iterdir()} == first

    code, _, err = run(capsys, "optimize", "--config", str(config), "mode=fea")
    assert code == 0, err
    assert json.loads((work / "optimize" / "fea" / "particles.json").read_text())["row_length"] == 8 * 13


def test_runtime_error_becomes_json(capsys, config, tmp_path):
    ens = tmp_path / "work" / "ensemble"
    ens.mkdir(parents=True)
    (ens / "shape_000.obj").write_text("v 0 0 0\nf 1 2 3\n")
    code, _, err = run(capsys, "sdf", "--config", str(config))
    assert code == cli.EXIT_RUNTIME
    report = json.loads(err)
    assert report["subcommand"] == "sdf" and report["error"] != "config"
