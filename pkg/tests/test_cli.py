import csv
import filecmp
import json
import os
import shutil

import numpy as np
import pytest

from voxrecon import cli
from voxrecon.config import ConfigError, SCHEMA, parse_config
from voxrecon.pgm import read_pgm

SMALL = """
simulate.count = 120
simulate.test_count = 10
simulate.height = 16
simulate.width = 16
simulate.n_voxels = 200
simulate.n_informative = 150
simulate.noise_sigma = 0.0
network.pool = 4
train.sparsity_k = 64
train.residual_tol = 1e-9
train.max_iterations = 200
invert.items = 4
invert.max_iterations = 300
evaluate.permutations = 50
"""


def write_cfg(tmp, text, name="run.cfg"):
    path = os.path.join(tmp, name)
    with open(path, "w") as fh:
        fh.write(text)
    return path


def run(*args):
    return cli.main(list(args))


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = str(tmp_path_factory.mktemp("pipe"))
    cfg = write_cfg(tmp, f"paths.output = {tmp}/out\ntrain.solvers = romp,l1_admm\n" + SMALL)
    for cmd in ("simulate", "features", "train", "invert", "evaluate"):
        assert run(cmd, "--config", cfg) == 0, cmd
    return tmp, cfg


# -- config --------------------------------------------------------------------

def test_config_defaults_and_types():
    cfg = parse_config("paths.output = /x\nfeatures.layers = 0, 2\ninvert.scale_learning_rate = no\n")
    assert cfg["features.layers"] == (0, 2)
    assert cfg["invert.scale_learning_rate"] is False
    assert cfg["train.solvers"] == ("romp",)
    assert set(cfg.values) == set(SCHEMA)


@pytest.mark.parametrize("text,needle", [
    ("simulate.count = 5\n", "paths.output"),
    ("paths.output = x\nsimulate.cont = 5\n", "simulate.cont"),
    ("paths.output = x\nsimulate.count = five\n", "simulate.count"),
    ("paths.output = x\npaths.output = y\n", "paths.output"),
    ("paths.output\n", "section.key"),
])
def test_config_errors_name_the_key(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_exit_code_config(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "simulate.count = 3\n")
    assert run("simulate", "--config", cfg) == 2
    assert "paths.output" in capsys.readouterr().err
    assert run("simulate", "--config", str(tmp_path / "missing.cfg")) == 2


def test_exit_code_data(tmp_path):
    cfg = write_cfg(tmp_path, f"paths.output = {tmp_path}/out\n")
    assert run("train", "--config", cfg) == 3


# -- pipeline ------------------------------------------------------------------------

def test_pipeline_outputs(pipeline):
    tmp, _ = pipeline
    out = os.path.join(tmp, "out")
    for rel in ("corpus/manifest.csv", "data/voxels.npy", "data/truth.csv", "models/layer_2_romp.cavd",
                "models/layer_2_l1_admm.cavd", "recon/item_0003.pgm", "recon/item_0003_loss.csv"):
        assert os.path.exists(os.path.join(out, rel)), rel
    train = read_rows(os.path.join(out, "reports/training.csv"))
    assert [r["solver"] for r in train] == ["romp", "l1_admm"]
    assert float(train[0]["mean_r"]) >= 0.99  # noiseless
    with open(os.path.join(out, "models/layer_2_l1_admm.cavd.json")) as fh:
        prov = json.load(fh)
    assert prov["solver"]["solver"] == "l1_admm" and prov["train_rows"] == 110
    assert not filecmp.cmp(os.path.join(out, "models/layer_2_romp.cavd"),
                           os.path.join(out, "models/layer_2_l1_admm.cavd"), shallow=False)


def test_report_headers(pipeline):
    out = os.path.join(pipeline[0], "out", "reports")
    heads = {}
    for name in ("cwssim", "summary", "areas", "solver_comparison", "accuracy_layer_2_romp", "training"):
        with open(os.path.join(out, name + ".csv")) as fh:
            heads[name] = fh.readline().strip()
    assert heads["cwssim"] == "pair_id,cwssim"
    assert heads["summary"] == "n,mean,sd,chance_mean,chance_sd,chance_percentile,t,p"
    assert heads["areas"] == "layer,area,proportion"
    assert heads["accuracy_layer_2_romp"] == "feature_index,r"
    assert heads["solver_comparison"].startswith("layer,solver_a,solver_b,mean_r_a,mean_r_b,t,")
    with open(os.path.join(pipeline[0], "out", "recon", "item_0000_loss.csv")) as fh:
        assert fh.readline().strip() == "iteration,total,feature,alpha,tv"


def test_existing_output_needs_force(pipeline):
    _, cfg = pipeline
    assert run("simulate", "--config", cfg) == 3


def test_simulate_replayable(pipeline, tmp_path):
    tmp, _ = pipeline
    cfg = write_cfg(tmp_path, f"paths.output = {tmp_path}/out\ntrain.solvers = romp,l1_admm\n" + SMALL)
    assert run("simulate", "--config", cfg) == 0
    for sub in ("corpus", "data"):
        a, b = os.path.join(tmp, "out", sub), os.path.join(tmp_path, "out", sub)
        names = sorted(os.listdir(a))
        assert names == sorted(os.listdir(b))
        match, mismatch, errors = filecmp.cmpfiles(a, b, names, shallow=False)
        assert not mismatch and not errors


def test_seed_override_changes_corpus(tmp_path):
    cfg = write_cfg(tmp_path, f"paths.output = {tmp_path}/out\n" + SMALL)
    assert run("simulate", "--config", cfg, "--seed", "1") == 0
    a = read_pgm(tmp_path / "out/corpus/stim_0000.pgm")
    assert run("simulate", "--config", cfg, "--seed", "2", "--force") == 0
    assert not np.array_equal(a, read_pgm(tmp_path / "out/corpus/stim_0000.pgm"))


def test_train_from_files_is_replayable(pipeline, tmp_path):
    tmp, _ = pipeline
    out = str(tmp_path / "out")
    for sub in ("corpus", "data", "features"):
        shutil.copytree(os.path.join(tmp, "out", sub), os.path.join(out, sub))
    cfg = write_cfg(tmp_path, f"paths.output = {out}\n" + SMALL)
    assert run("train", "--config", cfg) == 0
    assert filecmp.cmp(os.path.join(tmp, "out/models/layer_2_romp.cavd"),
                       os.path.join(out, "models/layer_2_romp.cavd"), shallow=False)
    assert run("invert", "--config", cfg) == 0
    for i in range(4):
        assert filecmp.cmp(os.path.join(tmp, f"out/recon/item_{i:04d}.pgm"),
                           os.path.join(out, f"recon/item_{i:04d}.pgm"), shallow=False)


def _evaluate_with(pipeline, tmp_path, order):
    tmp, _ = pipeline
    out = str(tmp_path / "out")
    for sub in ("corpus", "data", "features", "models"):
        shutil.copytree(os.path.join(tmp, "out", sub), os.path.join(out, sub))
    os.makedirs(os.path.join(out, "recon"))
    for i, j in enumerate(order):
        shutil.copy(os.path.join(out, "corpus", f"stim_{110 + j:04d}.pgm"), os.path.join(out, "recon", f"item_{i:04d}.pgm"))
    cfg = write_cfg(tmp_path, f"paths.output = {out}\n" + SMALL.replace("50\n", "200\n"))
    assert run("evaluate", "--config", cfg) == 0
    return read_rows(os.path.join(out, "reports", "summary.csv"))[0]


def test_evaluate_matched_stimuli(pipeline, tmp_path):
    row = _evaluate_with(pipeline, tmp_path, range(10))
    assert float(row["mean"]) == pytest.approx(1.0, abs=1e-12)
    assert float(row["p"]) < 1e-5


def test_evaluate_shuffled_is_chance(pipeline, tmp_path):
    order = [3, 7, 0, 9, 5, 1, 8, 2, 6, 4]
    row = _evaluate_with(pipeline, tmp_path, order)
    assert float(row["p"]) > 0.05


def test_evaluate_count_mismatch(pipeline, tmp_path):
    tmp, _ = pipeline
    out = str(tmp_path / "out")
    for sub in ("corpus", "data"):
        shutil.copytree(os.path.join(tmp, "out", sub), os.path.join(out, sub))
    os.makedirs(os.path.join(out, "recon"))
    shutil.copy(os.path.join(out, "corpus", "stim_0000.pgm"), os.path.join(out, "recon", "item_0042.pgm"))
    cfg = write_cfg(tmp_path, f"paths.output = {out}\n" + SMALL)
    assert run("evaluate", "--config", cfg) == 3


def test_identity_network_smoke(tmp_path):
    spec = tmp_path / "identity.json"
    spec.write_text(json.dumps({"input_shape": [1, 8, 8], "layers": []}))
    cfg = write_cfg(tmp_path, f"""
paths.output = {tmp_path}/out
paths.network_spec = {spec}
simulate.count = 310
simulate.test_count = 10
simulate.height = 8
simulate.width = 8
simulate.layer = -1
simulate.n_voxels = 200
simulate.n_informative = 200
simulate.noise_sigma = 0
features.layers = -1
train.sparsity_k = 64
train.residual_tol = 1e-12
invert.layer = -1
invert.items = 3
invert.lambda_alpha = 0
invert.lambda_tv = 0
invert.loss_tol = 1e-14
invert.max_iterations = 3000
""")
    for cmd in ("simulate", "features", "train", "invert"):
        assert run(cmd, "--config", cfg) == 0, cmd
    for i in range(3):
        rec = read_pgm(tmp_path / f"out/recon/item_{i:04d}.pgm")
        stim = read_pgm(tmp_path / f"out/corpus/stim_{300 + i:04d}.pgm")
        assert np.max(np.abs(rec - stim)) < 1e-3
