import json
import subprocess
import sys

import pytest

from certkit import cli
from certkit.config import ConfigError, recipe_defaults, resolve, set_dotted

TINY = ["data.n_train=6", "data.n_test=5", "data.horizon=1.0", "train.epochs=2",
        "train.batch_size=50", "grid.resolution=[8,8]", "constants.n_starts=5",
        "constants.n_probe=200", "constants.kl_pairs=5", "constants.n_envelope=5", "model.hidden=6"]


def run(*args):
    return cli.main([str(a) for a in args])


def sets(items):
    out = []
    for it in items:
        out += ["--set", it]
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> train -> eval on a tiny pendulum config, run twice."""
    roots = []
    for name in ("a", "b"):
        root = tmp_path_factory.mktemp(name)
        assert run("generate", "--out", root / "data", *sets(TINY)) == 0
        assert run("train", "--data", root / "data" / "train.ds", "--out", root / "model",
                   *sets(TINY)) == 0
        assert run("eval", "--model", root / "model" / "model.ckpt", "--data",
                   root / "data" / "test.ds", "--out", root / "eval", *sets(TINY)) == 0
        roots.append(root)
    return roots


def test_artifacts_byte_identical(pipeline):
    a, b = pipeline
    files = ["data/train.ds", "data/test.ds", "data/config.json", "model/model.ckpt",
             "model/train_report.json", "eval/eval.json"]
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    assert (a / "model" / "timing.json").exists()


def test_config_echo_and_report_contents(pipeline):
    root = pipeline[0]
    cfg = json.loads((root / "eval" / "config.json").read_text())
    assert cfg["data"]["n_train"] == 6 and cfg["recipe"] == "pendulum"
    rep = json.loads((root / "model" / "train_report.json").read_text())
    assert len(rep["loss_curve"]) == 2
    ev = json.loads((root / "eval" / "eval.json").read_text())
    assert ev["lyap"]["violation"]["n"] == 5
    assert ev["lyap"]["bound"]["delta"] == 0.01


def test_eval_zero_violations_closed_form(tmp_path):
    # a quadratic certificate on a strongly stable linear system never violates
    base = TINY + ['system={"name": "linear", "params": {"A": [[-1, 0], [0, -1]]}}',
                   "model.kind=quadratic", "train.epochs=0", "data.n_test=40"]
    assert run("generate", "--out", tmp_path, *sets(base)) == 0
    assert run("train", "--data", tmp_path / "train.ds", "--out", tmp_path, *sets(base)) == 0
    assert run("eval", "--model", tmp_path / "model.ckpt", "--data", tmp_path / "test.ds",
               "--out", tmp_path, *sets(base)) == 0
    ev = json.loads((tmp_path / "eval.json").read_text())
    assert ev["lyap"]["violation"]["k"] == 0
    assert ev["lyap"]["bound"]["eps"] == pytest.approx(1 - 0.01 ** (1 / 40), abs=1e-11)
    assert "rcp" in ev and ev["rcp"]["inputs"]["d"] == 4


def test_grid_radius_adapt(pipeline, tmp_path):
    root = pipeline[0]
    model = root / "model" / "model.ckpt"
    assert run("grid", "--model", model, "--out", tmp_path, *sets(TINY)) == 0
    lines = (tmp_path / "grid.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,residual,violates" and len(lines) == 65
    summary = json.loads((tmp_path / "grid_summary.json").read_text())
    assert summary["n_points"] == 64
    assert run("radius", "--model", model, "--data", root / "data" / "test.ds", "--out", tmp_path,
               *sets(TINY)) == 0
    rad = json.loads((tmp_path / "radius.json").read_text())
    assert "r_eps" in rad and rad["eps"] > 0
    adapt = TINY + ["adapt.t_final=1.0", "adapt.kappa=[1.0]"]
    assert run("adapt", "--model", model, "--out", tmp_path, *sets(adapt)) == 0
    assert (tmp_path / "adapt_kappa1_seed0.csv").exists()
    assert (tmp_path / "open_kappa1_seed0.csv").exists()
    rows = json.loads((tmp_path / "adapt_summary.json").read_text())
    assert rows[0]["kappa"] == 1.0


def test_reproduce_vdp_tiny(tmp_path):
    over = ["data.n_train=4", "data.n_test=4", "data.horizon=0.5", "train.epochs=1",
            "grid.resolution=[6,6]", "seeds=[0,1]", "loss.constraints_per_traj=5",
            "eval.constraints_per_traj=5"]
    assert run("reproduce", "vdp", "--out", tmp_path, *sets(over)) == 0
    res = json.loads((tmp_path / "results.json").read_text())
    assert [r["seed"] for r in res["per_seed"]] == [0, 1]
    assert "grid_fraction" in res["percentiles"]
    assert (tmp_path / "percentiles.csv").read_text().startswith("quantity,p10,p50,p90\n")
    assert (tmp_path / "seed_1" / "grid.csv").exists()
    assert json.loads((tmp_path / "config.json").read_text())["recipe"] == "vdp"


def test_reproduce_pendulum_tiny_with_threads(tmp_path):
    over = TINY + ["seeds=[0,1]"]
    assert run("reproduce", "pendulum", "--out", tmp_path, "--threads", 2, *sets(over)) == 0
    assert (tmp_path / "radius.json").exists()
    assert (tmp_path / "seed_0" / "grid.csv").exists()


def test_unknown_key_exit_code(capsys):
    assert run("generate", "--set", "loss.margn=1") == 1
    assert "margn" in capsys.readouterr().err


def test_bad_config_file(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"loss": {"margn": 1}}')
    assert run("generate", "--config", tmp_path / "c.json", "--out", tmp_path) == 1
    assert "loss.margn" in capsys.readouterr().err
    (tmp_path / "d.json").write_text("{not json")
    assert run("generate", "--config", tmp_path / "d.json", "--out", tmp_path) == 1


def test_missing_input_file(tmp_path):
    assert run("train", "--data", tmp_path / "nope.ds", "--out", tmp_path) == 1


def test_divergence_exit_code(tmp_path, capsys):
    over = TINY + ['system={"name": "linear", "params": {"A": [[50, 0], [0, 50]]}}']
    assert run("generate", "--out", tmp_path, *sets(over)) == 2
    assert "numerical failure" in capsys.readouterr().err


def test_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "certkit.cli", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0
    for sub in ("generate", "train", "eval", "grid", "radius", "adapt", "reproduce"):
        assert sub in out.stdout


# -- configuration ---------------------------------------------------------------

def test_set_dotted_parsing():
    cfg = {}
    set_dotted(cfg, "train.lr=0.5")
    set_dotted(cfg, "train.schedule=cosine")
    set_dotted(cfg, "grid.box=[[0,1],[0,1]]")
    assert cfg == {"train": {"lr": 0.5, "schedule": "cosine"}, "grid": {"box": [[0, 1], [0, 1]]}}
    with pytest.raises(ConfigError):
        set_dotted(cfg, "train.lr")


def test_resolve_type_errors_and_recipes():
    with pytest.raises(ConfigError, match="train.lr"):
        resolve({"train": {"lr": "fast"}})
    with pytest.raises(ConfigError):
        resolve({"recipe": "minitaur"})
    cfg = resolve({"recipe": "vdp"}, ["train.epochs=3"])
    assert cfg["train"]["epochs"] == 3 and cfg["model"]["kind"] == "polynomial_metric"
    assert recipe_defaults("pendulum")["seeds"] == list(range(30))
    assert recipe_defaults("gradflow6d")["grid"] is None


def test_reproduce_recipe_mismatch(tmp_path):
    (tmp_path / "c.json").write_text('{"recipe": "vdp"}')
    assert run("reproduce", "pendulum", "--config", tmp_path / "c.json", "--out", tmp_path) == 1
