"""Per-feature sparse decoders from voxel responses to network features.

A :class:`DecoderModel` holds one :class:`~voxrecon.sparse.SparseWeights`
per feature of a layer. Around it sit the voxel-level analyses: ranking
voxels by how often they are used, the visual-area make-up of the top
ranks, and the Mann-Kendall test for monotone trends across layers.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from .convnet import FeatureVector
from .metrics import ZeroVarianceError, one_sample_ttest, pearson
from .sparse import (DECODER_CONFIG, DesignMatrixError, SolverConfig, SparseWeights,
                     check_design_matrix, solve)

__all__ = [
    "AREAS", "AreaMap", "DecoderModel", "AccuracyReport", "MannKendallResult", "ModelFileError",
    "train_layer_decoder", "predict_features", "evaluate_accuracy", "voxel_frequencies",
    "select_significant_voxels", "area_contributions", "mann_kendall_trend",
    "save_model", "load_model", "write_accuracy_csv", "write_area_csv",
]

AREAS = ("V1", "V2", "V3", "V4", "other")


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class AreaMap:
    """Visual-area label of every voxel, indexed by voxel number."""

    labels: tuple[str, ...]

    def __post_init__(self):
        labels = tuple(str(x) for x in self.labels)
        bad = sorted(set(labels) - set(AREAS))
        if bad:
            raise ValueError(f"unknown area labels {bad}; expected one of {AREAS}")
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, voxel: int) -> str:
        if not 0 <= voxel < len(self.labels):
            raise KeyError(f"voxel {voxel} has no area label")
        return self.labels[voxel]

    def counts(self) -> dict[str, int]:
        c = Counter(self.labels)
        return {a: c[a] for a in AREAS if c[a]}


@dataclass(frozen=True)
class DecoderModel:
    """Sparse decoders for every feature of one layer.

    ``n_columns`` is the design-matrix width (voxels plus intercept).
    ``degenerate`` marks models trained on a single sample, which are
    intercept-only by construction.
    """

    layer_index: int
    feature_dim: int
    n_columns: int
    weights: tuple[SparseWeights, ...]
    config: SolverConfig = DECODER_CONFIG
    degenerate: bool = False

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(self.weights))
        if len(self.weights) != self.feature_dim:
            raise ValueError(f"{len(self.weights)} decoders for {self.feature_dim} features")
        for j, w in enumerate(self.weights):
            if w.dim != self.n_columns:
                raise ValueError(f"feature {j}: weight length {w.dim} != {self.n_columns}")

    @property
    def n_voxels(self) -> int:
        return self.n_columns - 1

    @property
    def nonconverged(self) -> int:
        return sum(not w.converged for w in self.weights)

    def coefficient_matrix(self) -> np.ndarray:
        """Dense ``n_columns x D`` matrix, so that ``X @ W`` predicts all features."""
        W = np.zeros((self.n_columns, self.feature_dim))
        for j, w in enumerate(self.weights):
            W[w.indices, j] = w.coefficients
        return W

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_columns:
            raise ValueError(f"row length {X.shape[-1]} != {self.n_columns}")
        return X @ self.coefficient_matrix()


def _intercept_only(n_columns: int, value: float) -> SparseWeights:
    if value == 0.0:
        return SparseWeights(n_columns, [], [])
    return SparseWeights(n_columns, [n_columns - 1], [value])


def train_layer_decoder(X, F, cfg: SolverConfig = DECODER_CONFIG, layer_index: int = 0,
                        workers: int = 1) -> DecoderModel:
    """Fit ``F[:, j] ~ X w_j`` independently for every feature ``j``.

    Constant feature columns get an intercept-only model. With a single
    sample every model is intercept-only and the result is flagged
    ``degenerate``. ``workers > 1`` fans the features out over threads;
    the output does not depend on scheduling.
    """
    X = check_design_matrix(X)
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if F.ndim != 2 or F.shape[0] != X.shape[0]:
        raise DesignMatrixError(f"feature matrix {F.shape} does not match {X.shape[0]} samples")
    m, n_cols = X.shape
    D = F.shape[1]
    if D < 1:
        raise ValueError("feature matrix has no columns")
    degenerate = m == 1

    def fit(j):
        col = F[:, j]
        if degenerate or np.all(col == col[0]):
            return _intercept_only(n_cols, float(col[0]))
        try:
            return solve(X, col, cfg)
        except DesignMatrixError as exc:
            raise DesignMatrixError(f"feature {j}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            weights = list(pool.map(fit, range(D)))
    else:
        weights = [fit(j) for j in range(D)]
    return DecoderModel(layer_index, D, n_cols, tuple(weights), cfg, degenerate)


def predict_features(model: DecoderModel, x_row) -> FeatureVector:
    """Feature vector predicted from one design-matrix row (last entry 1)."""
    x = np.asarray(x_row, dtype=np.float64).ravel()
    if x.size != model.n_columns:
        raise ValueError(f"row length {x.size} != {model.n_columns}")
    if x[-1] != 1.0:
        raise DesignMatrixError("last entry of a design-matrix row must be 1")
    return FeatureVector(model.layer_index, model.predict(x))


@dataclass(frozen=True)
class AccuracyReport:
    """Per-feature Pearson r on held-out data.

    Undefined correlations (constant actual or predicted column) are
    ``nan`` and left out of ``mean_r``. The t-test is of the defined r's
    against zero; it is ``nan`` with fewer than two of them, and
    ``t = +/-inf, p = 0`` when they are all equal and nonzero.
    """

    per_feature_r: np.ndarray
    mean_r: float
    valid_count: int
    t_statistic: float
    p_value: float


def evaluate_accuracy(model: DecoderModel, X_test, F_test) -> AccuracyReport:
    X_test = check_design_matrix(X_test)
    F_test = np.asarray(F_test, dtype=np.float64)
    if F_test.ndim == 1:
        F_test = F_test[:, None]
    if F_test.shape != (X_test.shape[0], model.feature_dim):
        raise ValueError(f"test features {F_test.shape} vs expected {(X_test.shape[0], model.feature_dim)}")
    P = model.predict(X_test)
    r = np.array([pearson(P[:, j], F_test[:, j]) for j in range(model.feature_dim)])
    valid = r[~np.isnan(r)]
    if valid.size == 0:
        raise ValueError("no feature has a defined correlation")
    mean_r = float(valid.mean())
    t, p = math.nan, math.nan
    if valid.size >= 2:
        try:
            res = one_sample_ttest(valid, 0.0)
            t, p = res.t, res.p_two_sided
        except ZeroVarianceError:
            if mean_r != 0.0:
                t, p = math.copysign(math.inf, mean_r), 0.0
    return AccuracyReport(r, mean_r, int(valid.size), t, p)


def voxel_frequencies(models: DecoderModel | Sequence[DecoderModel]) -> np.ndarray:
    """How many feature decoders use each voxel; the intercept is not a voxel.

    A sequence of models pools their counts (e.g. conv, rectifier and pool
    stages of one named layer).
    """
    models = [models] if isinstance(models, DecoderModel) else list(models)
    n = models[0].n_voxels
    freq = np.zeros(n, dtype=np.int64)
    for model in models:
        if model.n_voxels != n:
            raise ValueError("pooled models must share the design matrix")
        for w in model.weights:
            freq[w.voxel_support] += 1
    return freq


def select_significant_voxels(models: DecoderModel | Sequence[DecoderModel],
                              count: int = 300) -> list[tuple[int, int]]:
    """The ``count`` most used voxels as ``(voxel, frequency)``, ties by index."""
    freq = voxel_frequencies(models)
    if not 0 <= count <= freq.size:
        raise ValueError(f"count {count} outside [0, {freq.size}]")
    order = np.lexsort((np.arange(freq.size), -freq))[:count]
    return [(int(v), int(freq[v])) for v in order]


def area_contributions(significant, areas: AreaMap) -> dict[str, float]:
    """Share of each area among the given voxels.

    ``significant`` may hold voxel numbers or ``(voxel, frequency)`` pairs.
    """
    voxels = [v[0] if isinstance(v, (tuple, list)) else int(v) for v in significant]
    if not voxels:
        raise ValueError("no voxels given")
    c = Counter(areas[v] for v in voxels)
    return {a: c[a] / len(voxels) for a in AREAS if c[a]}


class MannKendallResult(NamedTuple):
    S: int
    variance: float
    z: float
    p_two_sided: float
    direction: str


def mann_kendall_trend(series) -> MannKendallResult:
    """Mann-Kendall monotone trend test, normal approximation with tie correction."""
    x = np.asarray(series, dtype=np.float64).ravel()
    n = x.size
    if n < 3:
        raise ValueError("Mann-Kendall needs at least 3 values")
    if not np.all(np.isfinite(x)):
        raise ValueError("series must be finite")
    i, j = np.triu_indices(n, 1)
    S = int(np.sign(x[j] - x[i]).sum())
    _, t = np.unique(x, return_counts=True)
    var = (n * (n - 1) * (2 * n + 5) - np.sum(t * (t - 1) * (2 * t + 5))) / 18.0
    if S == 0 or var == 0:
        return MannKendallResult(S, float(var), 0.0, 1.0, "none")
    z = (S - math.copysign(1, S)) / math.sqrt(var)
    p = float(min(1.0, 2.0 * stats.norm.sf(abs(z))))
    return MannKendallResult(S, float(var), float(z), p, "increasing" if S > 0 else "decreasing")


# -- model files -----------------------------------------------------------
#
# Little-endian. "CAVD", u32 version, i32 layer_index, u32 D, u32 n (voxels),
# then per feature: u32 s, s x (u32 voxel index, f64 coefficient), f64 intercept.

_MAGIC = b"CAVD"
_VERSION = 1


def save_model(model: DecoderModel, path, provenance: dict | None = None) -> None:
    """Write the binary model and a JSON sidecar (``path + '.json'``) with provenance."""
    parts = [_MAGIC, struct.pack("<IiII", _VERSION, model.layer_index, model.feature_dim, model.n_voxels)]
    for w in model.weights:
        sup = w.voxel_support
        parts.append(struct.pack("<I", sup.size))
        rec = np.empty(sup.size, dtype=[("i", "<u4"), ("c", "<f8")])
        rec["i"] = sup
        rec["c"] = w.coefficients[:sup.size]
        parts.append(rec.tobytes())
        parts.append(struct.pack("<d", w.intercept))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))
    side = {
        "format": "CAVD", "version": _VERSION, "layer_index": model.layer_index,
        "solver": asdict(model.config), "degenerate": model.degenerate,
        "nonconverged": model.nonconverged,
        "converged": [bool(w.converged) for w in model.weights],
        "iterations": [int(w.iterations) for w in model.weights],
    }
    side.update(provenance or {})
    with open(f"{path}.json", "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def load_model(path) -> DecoderModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise ModelFileError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 20:
        raise ModelFileError(f"{path}: truncated header")
    version, layer, D, n = struct.unpack_from("<IiII", buf, 4)
    if version != _VERSION:
        raise ModelFileError(f"{path}: unsupported version {version}")
    pos = 20
    weights = []
    rec_t = np.dtype([("i", "<u4"), ("c", "<f8")])
    for j in range(D):
        if pos + 4 > len(buf):
            raise ModelFileError(f"{path}: truncated at feature {j}")
        (s,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        end = pos + s * rec_t.itemsize + 8
        if end > len(buf):
            raise ModelFileError(f"{path}: truncated at feature {j}")
        rec = np.frombuffer(buf, dtype=rec_t, count=s, offset=pos)
        (b,) = struct.unpack_from("<d", buf, end - 8)
        pos = end
        idx = rec["i"].astype(np.int64)
        coef = rec["c"].astype(np.float64)
        if b != 0.0:
            idx = np.append(idx, n)
            coef = np.append(coef, b)
        weights.append(SparseWeights(n + 1, idx, coef))
    if pos != len(buf):
        raise ModelFileError(f"{path}: {len(buf) - pos} trailing bytes")
    cfg = DECODER_CONFIG
    degenerate = False
    try:
        with open(f"{path}.json") as fh:
            side = json.load(fh)
        cfg = SolverConfig(**side["solver"])
        degenerate = bool(side.get("degenerate", False))
        conv = side.get("converged")
        its = side.get("iterations")
        if conv is not None and len(conv) == D:
            weights = [SparseWeights(w.dim, w.indices, w.coefficients, converged=c, iterations=i)
                       for w, c, i in zip(weights, conv, its)]
    except FileNotFoundError:
        pass
    return DecoderModel(layer, D, n + 1, tuple(weights), cfg, degenerate)


def write_accuracy_csv(path, report: AccuracyReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature_index", "r"])
        for j, r in enumerate(report.per_feature_r):
            w.writerow([j, repr(float(r))])


def write_area_csv(path, contributions: dict[str, float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["area", "proportion"])
        for a, p in contributions.items():
            w.writerow([a, repr(float(p))])
