"""Command-line pipeline: simulate, features, train, invert, evaluate.

Stages talk only through files under ``paths.output``::

    corpus/    stim_XXXX.pgm, manifest.csv
    data/      voxels.npy, truth.csv, areas.csv, network.json, weights.cavw, split.json
    features/  layer_L.npy
    models/    layer_L_SOLVER.cavd (+ .json provenance)
    recon/     item_XXXX.pgm, item_XXXX_loss.csv, failures.csv
    reports/   training.csv, accuracy_layer_L_SOLVER.csv, cwssim.csv, summary.csv,
               areas.csv, trend.csv, solver_comparison.csv

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import math
import os
import shutil
import sys

import numpy as np

from . import convnet as cn
from . import decoder as dc
from . import metrics as mt
from . import synth
from .config import ConfigError, PipelineConfig, load_config
from .inversion import InversionConfig, InversionDiverged, invert
from .pgm import read_pgm, write_pgm
from .sparse import SolverConfig

log = logging.getLogger("voxrecon")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


def _dir(cfg: PipelineConfig, name: str) -> str:
    return os.path.join(cfg["paths.output"], name)


def _fresh_dir(path: str, force: bool) -> None:
    if os.path.exists(path):
        if not force:
            raise DataError(f"{path} exists; pass --force to overwrite")
        shutil.rmtree(path)
    os.makedirs(path)


def _need(path: str) -> str:
    if not os.path.exists(path):
        raise DataError(f"missing input {path}; run the earlier stage first")
    return path


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- network ---------------------------------------------------------------------

def _build_network(cfg: PipelineConfig) -> cn.Network:
    shape = (1, cfg["simulate.height"], cfg["simulate.width"])
    if cfg["paths.network_spec"]:
        shape, specs = cn.load_network_spec(_need(cfg["paths.network_spec"]))
    else:
        specs = cn.toy_specs(cfg["network.kernels"], cfg["network.pool"])
    if tuple(shape) != (1, cfg["simulate.height"], cfg["simulate.width"]):
        raise ConfigError(f"network input {shape} does not match simulate.height/width")
    if cfg["paths.weights"]:
        return cn.build_network(shape, specs, weight_init="from_file", path=_need(cfg["paths.weights"]))
    return cn.build_network(shape, specs, seed=cfg["run.seed"])


def _load_stage_network(cfg: PipelineConfig) -> cn.Network:
    data = _dir(cfg, "data")
    shape, specs = cn.load_network_spec(_need(os.path.join(data, "network.json")))
    return cn.build_network(shape, specs, weight_init="from_file", path=_need(os.path.join(data, "weights.cavw")))


def _read_corpus(cfg: PipelineConfig) -> list[np.ndarray]:
    paths = sorted(glob.glob(os.path.join(_need(_dir(cfg, "corpus")), "stim_*.pgm")))
    if not paths:
        raise DataError("corpus is empty")
    return [read_pgm(p) for p in paths]


def _split(cfg: PipelineConfig) -> tuple[int, int]:
    with open(_need(os.path.join(_dir(cfg, "data"), "split.json"))) as fh:
        s = json.load(fh)
    return s["train"], s["test"]


# -- stages ------------------------------------------------------------------------

def cmd_simulate(cfg: PipelineConfig, force: bool = False) -> None:
    seed = cfg["run.seed"]
    count, test = cfg["simulate.count"], cfg["simulate.test_count"]
    if not 0 < test < count:
        raise ConfigError("simulate.test_count must lie in (0, simulate.count)")
    net = _build_network(cfg)
    corpus, data = _dir(cfg, "corpus"), _dir(cfg, "data")
    _fresh_dir(corpus, force)
    _fresh_dir(data, force)
    images = synth.generate_stimuli(count, cfg["simulate.height"], cfg["simulate.width"], seed)
    names = synth.write_corpus(corpus, images, seed)
    # responses come from the stored 8-bit images so later stages see the same inputs
    images = [read_pgm(os.path.join(corpus, n)) for n in names]
    n_vox = cfg["simulate.n_voxels"]
    n_inf = cfg["simulate.n_informative"]
    truth_cfg = synth.TruthConfig(n_vox, None if n_inf < 0 else n_inf, cfg["simulate.support_size"],
                                  cfg["simulate.noise_sigma"], seed)
    feat_layers = list(cfg["features.layers"])
    try:
        amap, prefs = synth.make_area_map(n_vox, cfg["simulate.area_proportions"], len(feat_layers),
                                          cfg["simulate.area_gradient"], seed)
    except ValueError as exc:
        raise ConfigError(f"simulate.area_proportions: {exc}") from exc
    # with a gradient each voxel encodes its preferred layer, otherwise simulate.layer
    layers = np.array(feat_layers)[prefs] if cfg["simulate.area_gradient"] > 0 else cfg["simulate.layer"]
    X, truth = synth.simulate_voxels(images, net, layers, truth_cfg, areas=amap)
    np.save(os.path.join(data, "voxels.npy"), X)
    truth.to_csv(os.path.join(data, "truth.csv"))
    _write_csv(os.path.join(data, "areas.csv"), ["voxel", "area"],
               [(e.voxel, e.area) for e in truth.encodings])
    with open(os.path.join(data, "network.json"), "w") as fh:
        fh.write(cn.specs_to_json(net.input_shape, net.layers))
    cn.save_weights(net, os.path.join(data, "weights.cavw"))
    with open(os.path.join(data, "split.json"), "w") as fh:
        json.dump({"train": count - test, "test": test, "seed": seed}, fh, sort_keys=True)
    log.info("simulated %d stimuli, %d voxels", count, n_vox)


def cmd_features(cfg: PipelineConfig, force: bool = False) -> None:
    net = _load_stage_network(cfg)
    images = _read_corpus(cfg)
    out = _dir(cfg, "features")
    _fresh_dir(out, force)
    for layer in cfg["features.layers"]:
        try:
            F = synth.feature_matrix(net, images, layer)
        except IndexError as exc:
            raise ConfigError(f"features.layers: {exc}") from exc
        np.save(os.path.join(out, f"layer_{layer}.npy"), F)
        log.info("layer %d: %d features", layer, F.shape[1])


def _solver_config(cfg: PipelineConfig, solver: str) -> SolverConfig:
    try:
        return SolverConfig(solver=solver, sparsity_k=cfg["train.sparsity_k"],
                            residual_tol=cfg["train.residual_tol"], max_iterations=cfg["train.max_iterations"],
                            rho=cfg["train.rho"], delta=cfg["train.delta"])
    except ValueError as exc:
        raise ConfigError(f"train.*: {exc}") from exc


def cmd_train(cfg: PipelineConfig, force: bool = False) -> None:
    X = np.load(_need(os.path.join(_dir(cfg, "data"), "voxels.npy")))
    n_train, _ = _split(cfg)
    models, reports = _dir(cfg, "models"), _dir(cfg, "reports")
    _fresh_dir(models, force)
    os.makedirs(reports, exist_ok=True)
    rows = []
    for layer in cfg["features.layers"]:
        F = np.load(_need(os.path.join(_dir(cfg, "features"), f"layer_{layer}.npy")))
        if F.shape[0] != X.shape[0]:
            raise DataError(f"layer {layer}: {F.shape[0]} feature rows vs {X.shape[0]} design rows")
        if F.shape[1] == 0:
            log.warning("layer %d has no features; skipped", layer)
            continue
        for solver in cfg["train.solvers"]:
            scfg = _solver_config(cfg, solver)
            model = dc.train_layer_decoder(X[:n_train], F[:n_train], scfg, layer, cfg["train.workers"])
            path = os.path.join(models, f"layer_{layer}_{solver}.cavd")
            dc.save_model(model, path, {"train_rows": n_train, "seed": cfg["run.seed"]})
            try:
                rep = dc.evaluate_accuracy(model, X[n_train:], F[n_train:])
            except ValueError as exc:
                log.warning("layer %d (%s): %s", layer, solver, exc)
                continue
            dc.write_accuracy_csv(os.path.join(reports, f"accuracy_layer_{layer}_{solver}.csv"), rep)
            if model.nonconverged:
                log.warning("layer %d (%s): %d of %d decoders did not converge",
                            layer, solver, model.nonconverged, model.feature_dim)
            rows.append((layer, solver, _fmt(rep.mean_r), rep.valid_count, _fmt(rep.t_statistic),
                         _fmt(rep.p_value), model.nonconverged))
            log.info("layer %d (%s): mean r %.4f over %d features", layer, solver, rep.mean_r, rep.valid_count)
    _write_csv(os.path.join(reports, "training.csv"),
               ["layer", "solver", "mean_r", "valid_count", "t", "p", "nonconverged"], rows)


def _inversion_config(cfg: PipelineConfig, init_seed: int) -> InversionConfig:
    s = cfg.section("invert")
    try:
        return InversionConfig(alpha=s["alpha"], lambda_alpha=s["lambda_alpha"], lambda_tv=s["lambda_tv"],
                               tv_beta=s["tv_beta"], learning_rate=s["learning_rate"],
                               scale_learning_rate=s["scale_learning_rate"], momentum=s["momentum"],
                               max_iterations=s["max_iterations"], loss_tol=s["loss_tol"],
                               init=s["init"], seed=init_seed)
    except ValueError as exc:
        raise ConfigError(f"invert.*: {exc}") from exc


def cmd_invert(cfg: PipelineConfig, force: bool = False) -> None:
    net = _load_stage_network(cfg)
    X = np.load(_need(os.path.join(_dir(cfg, "data"), "voxels.npy")))
    n_train, n_test = _split(cfg)
    layer = cfg["invert.layer"]
    model = dc.load_model(_need(os.path.join(_dir(cfg, "models"), f"layer_{layer}_{cfg['invert.solver']}.cavd")))
    out = _dir(cfg, "recon")
    _fresh_dir(out, force)
    failures = []
    for i in range(min(cfg["invert.items"], n_test)):
        target = dc.predict_features(model, X[n_train + i])
        icfg = _inversion_config(cfg, cfg["run.seed"] * 100003 + i)
        try:
            res = invert(net, layer, target, icfg)
        except InversionDiverged as exc:
            log.warning("item %d diverged at iteration %d", i, exc.iteration)
            failures.append((i, exc.iteration, str(exc)))
            continue
        write_pgm(os.path.join(out, f"item_{i:04d}.pgm"), res.image)
        _write_csv(os.path.join(out, f"item_{i:04d}_loss.csv"), ["iteration", "total", "feature", "alpha", "tv"],
                   [(k + 1, *map(_fmt, row)) for k, row in enumerate(res.loss_trajectory)])
    _write_csv(os.path.join(out, "failures.csv"), ["item", "iteration", "message"], failures)
    log.info("inverted %d items, %d diverged", min(cfg["invert.items"], n_test), len(failures))


def _cwssim_params(cfg: PipelineConfig) -> mt.CwssimParams:
    s = cfg.section("cwssim")
    try:
        return mt.CwssimParams(levels=s["levels"], orientations=s["orientations"], window=s["window"], K=s["K"])
    except ValueError as exc:
        raise ConfigError(f"cwssim.*: {exc}") from exc


def _chance_test(matched: np.ndarray, chance_mean: float) -> tuple[float, float]:
    """One-sided test of matched scores above the chance mean."""
    try:
        res = mt.one_sample_ttest(matched, chance_mean)
        return res.t, res.p_one_sided
    except mt.ZeroVarianceError:
        d = float(matched.mean() - chance_mean)
        if d == 0:
            return math.nan, math.nan
        return math.copysign(math.inf, d), 0.0 if d > 0 else 1.0


def cmd_evaluate(cfg: PipelineConfig, force: bool = False) -> None:
    reports = _dir(cfg, "reports")
    os.makedirs(reports, exist_ok=True)
    n_train, n_test = _split(cfg)
    recon_paths = sorted(glob.glob(os.path.join(_need(_dir(cfg, "recon")), "item_*.pgm")))
    if not recon_paths:
        raise DataError("no reconstructions found")
    items = [int(os.path.basename(p)[5:9]) for p in recon_paths]
    if max(items) >= n_test:
        raise DataError(f"{len(items)} reconstructions but only {n_test} test items")
    stim_dir = _need(_dir(cfg, "corpus"))
    stimuli = [read_pgm(os.path.join(stim_dir, f"stim_{n_train + i:04d}.pgm")) for i in items]
    recons = [read_pgm(p) for p in recon_paths]
    params = _cwssim_params(cfg)
    M = mt.cwssim_matrix(recons, stimuli, params)
    matched = np.diag(M).copy()
    _write_csv(os.path.join(reports, "cwssim.csv"), ["pair_id", "cwssim"],
               [(i, _fmt(s)) for i, s in zip(items, matched)])
    if len(items) >= 2:
        base = mt.chance_baseline(recons, stimuli, cfg["evaluate.permutations"], cfg["run.seed"], params, matrix=M)
        t, p = _chance_test(matched, base.mean)
        chance = (base.mean, base.sd, base.percentile(float(matched.mean())))
    else:
        t = p = math.nan
        chance = (math.nan, math.nan, math.nan)
    sd = matched.std(ddof=1) if matched.size > 1 else math.nan
    _write_csv(os.path.join(reports, "summary.csv"),
               ["n", "mean", "sd", "chance_mean", "chance_sd", "chance_percentile", "t", "p"],
               [(matched.size, _fmt(matched.mean()), _fmt(sd), *map(_fmt, chance), _fmt(t), _fmt(p))])
    log.info("CW-SSIM mean %.4f vs chance %.4f (p=%.3g)", matched.mean(), chance[0], p)
    _evaluate_areas(cfg, reports)
    _evaluate_solvers(cfg, reports, n_train)


def _layer_models(cfg: PipelineConfig) -> dict[tuple[int, str], str]:
    found = {}
    for layer in cfg["features.layers"]:
        for solver in ("romp", "l1_admm"):
            p = os.path.join(_dir(cfg, "models"), f"layer_{layer}_{solver}.cavd")
            if os.path.exists(p):
                found[(layer, solver)] = p
    return found


def _evaluate_areas(cfg: PipelineConfig, reports: str) -> None:
    area_path = os.path.join(_dir(cfg, "data"), "areas.csv")
    models = _layer_models(cfg)
    solver = cfg["invert.solver"]
    layers = [L for L in cfg["features.layers"] if (L, solver) in models]
    if not os.path.exists(area_path) or not layers:
        return
    with open(area_path, newline="") as fh:
        amap = dc.AreaMap(tuple(r["area"] for r in csv.DictReader(fh)))
    rows, series = [], {}
    for L in layers:
        model = dc.load_model(models[(L, solver)])
        count = min(cfg["evaluate.significant"], model.n_voxels)
        sig = [(v, f) for v, f in dc.select_significant_voxels(model, count) if f > 0]
        if not sig:
            continue
        contrib = dc.area_contributions(sig, amap)
        for a in dc.AREAS:
            if a in amap.counts():
                series.setdefault(a, []).append(contrib.get(a, 0.0))
                rows.append((L, a, _fmt(contrib.get(a, 0.0))))
    _write_csv(os.path.join(reports, "areas.csv"), ["layer", "area", "proportion"], rows)
    trend = []
    for a, s in series.items():
        if len(s) >= 3:
            r = dc.mann_kendall_trend(s)
            trend.append((a, r.S, _fmt(r.variance), _fmt(r.z), _fmt(r.p_two_sided), r.direction))
    if trend:
        _write_csv(os.path.join(reports, "trend.csv"), ["area", "S", "variance", "z", "p", "direction"], trend)


def _evaluate_solvers(cfg: PipelineConfig, reports: str, n_train: int) -> None:
    models = _layer_models(cfg)
    X = np.load(_need(os.path.join(_dir(cfg, "data"), "voxels.npy")))
    rows = []
    for L in cfg["features.layers"]:
        if (L, "romp") not in models or (L, "l1_admm") not in models:
            continue
        F = np.load(_need(os.path.join(_dir(cfg, "features"), f"layer_{L}.npy")))
        ra = dc.evaluate_accuracy(dc.load_model(models[(L, "romp")]), X[n_train:], F[n_train:]).per_feature_r
        rb = dc.evaluate_accuracy(dc.load_model(models[(L, "l1_admm")]), X[n_train:], F[n_train:]).per_feature_r
        ok = ~(np.isnan(ra) | np.isnan(rb))
        try:
            res = mt.paired_ttest(ra[ok], rb[ok])
            t, p, p1 = res.t, res.p_two_sided, res.p_one_sided
        except (mt.ZeroVarianceError, ValueError):
            t = p = p1 = math.nan
        rows.append((L, "romp", "l1_admm", _fmt(np.mean(ra[ok])), _fmt(np.mean(rb[ok])), _fmt(t), _fmt(p), _fmt(p1)))
    if rows:
        _write_csv(os.path.join(reports, "solver_comparison.csv"),
                   ["layer", "solver_a", "solver_b", "mean_r_a", "mean_r_b", "t", "p_two_sided", "p_a_greater"],
                   rows)


COMMANDS = {
    "simulate": cmd_simulate,
    "features": cmd_features,
    "train": cmd_train,
    "invert": cmd_invert,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="voxrecon", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="flat section.key = value file")
    parser.add_argument("--force", action="store_true", help="overwrite this stage's outputs")
    parser.add_argument("--seed", type=int, default=None, help="override run.seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config).with_seed(args.seed)
        COMMANDS[args.command](cfg, force=args.force)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
