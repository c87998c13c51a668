"""Synthetic stimuli and voxel responses with a planted ground truth.

Stimuli are Gabor composites over 1/f noise. Voxels either encode a sparse
linear combination of one layer's features (informative) or follow an
unrelated seeded signal (nuisance). Everything is a pure function of its
seed, so corpora can be regenerated instead of shipped.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .convnet import Network, convolution, forward, fully_connected, maxpool, rectifier
from .decoder import AREAS, AreaMap
from .pgm import write_pgm
from .sparse import design_matrix

__all__ = [
    "generate_stimuli", "stimulus_parameters", "write_corpus", "feature_matrix",
    "TruthConfig", "VoxelEncoding", "SimulationTruth", "simulate_voxels",
    "apportion", "make_area_map", "trend_specs",
]

MIN_SIZE = 8


def stimulus_parameters(index: int, height: int, width: int, seed: int) -> dict:
    """Patch parameters of stimulus ``index``; drawn from ``default_rng([seed, index])``."""
    rng = np.random.default_rng([seed, index])
    n = int(rng.integers(3, 9))
    size = min(height, width)
    patches = []
    for _ in range(n):
        patches.append({
            "cx": float(rng.uniform(0, width - 1)),
            "cy": float(rng.uniform(0, height - 1)),
            "theta": float(rng.uniform(0, np.pi)),
            "freq": float(rng.uniform(0.05, 0.25)),
            "sigma": float(rng.uniform(size / 10, size / 4)),
            "amp": float(rng.uniform(-1, 1)),
            "phase": float(rng.uniform(0, 2 * np.pi)),
        })
    return {"index": index, "seed": seed, "patches": patches, "noise_seed": int(rng.integers(2**31))}


def _render(params: dict, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.zeros((height, width))
    for p in params["patches"]:
        dx, dy = xx - p["cx"], yy - p["cy"]
        env = np.exp(-(dx * dx + dy * dy) / (2 * p["sigma"] ** 2))
        u = dx * np.cos(p["theta"]) + dy * np.sin(p["theta"])
        img += p["amp"] * env * np.cos(2 * np.pi * p["freq"] * u + p["phase"])
    # 1/f noise: white spectrum scaled by inverse radial frequency
    rng = np.random.default_rng(params["noise_seed"])
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    f = np.hypot(fy, fx)
    f[0, 0] = np.inf
    spec = np.fft.rfft2(rng.standard_normal((height, width))) / f
    noise = np.fft.irfft2(spec, s=(height, width))
    noise *= 0.05 / (noise.std() or 1.0)
    return np.clip(0.5 + 0.3 * img + noise, 0.0, 1.0)


def generate_stimuli(count: int, height: int = 32, width: int = 32, seed: int = 0) -> list[np.ndarray]:
    """``count`` grayscale images in [0, 1], each deterministic in ``(seed, index)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if height < MIN_SIZE or width < MIN_SIZE:
        raise ValueError(f"stimuli must be at least {MIN_SIZE}x{MIN_SIZE}")
    return [_render(stimulus_parameters(i, height, width, seed), height, width) for i in range(count)]


def write_corpus(directory, images: Sequence[np.ndarray], seed: int) -> list[str]:
    """Write ``stim_XXXX.pgm`` files and ``manifest.csv`` (index, seed, file, patches)."""
    os.makedirs(directory, exist_ok=True)
    names = []
    h, w = np.shape(images[0])[-2:]
    with open(os.path.join(directory, "manifest.csv"), "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["index", "seed", "file", "n_patches", "patches"])
        for i, img in enumerate(images):
            name = f"stim_{i:04d}.pgm"
            write_pgm(os.path.join(directory, name), img)
            params = stimulus_parameters(i, h, w, seed)
            out.writerow([i, seed, name, len(params["patches"]),
                          json.dumps(params["patches"], sort_keys=True)])
            names.append(name)
    return names


def feature_matrix(net: Network, images: Sequence[np.ndarray], layer_index: int) -> np.ndarray:
    """Stack the flattened layer-``layer_index`` activations of ``images`` as rows."""
    net._check_index(layer_index)
    rows = []
    for img in images:
        x = np.asarray(img, dtype=np.float64).reshape(net.input_shape)
        rows.append(x.ravel() if layer_index == -1 else forward(net, x, upto=layer_index)[-1].ravel())
    return np.array(rows)


@dataclass(frozen=True)
class TruthConfig:
    """Planting parameters.

    ``noise_sigma`` is relative to each voxel's noiseless response sd.
    ``n_informative`` defaults to every voxel. ``unit_coefficients`` plants
    all coefficients as 1 instead of standard normal draws. ``noise_seed``
    (default ``seed``) drives only the additive noise, so two noise seeds
    share the noiseless responses.
    """

    n_voxels: int = 400
    n_informative: int | None = None
    support_size: int = 3
    noise_sigma: float = 0.1
    seed: int = 0
    unit_coefficients: bool = False
    noise_seed: int | None = None

    def __post_init__(self):
        if self.n_voxels < 1 or self.support_size < 1 or self.noise_sigma < 0:
            raise ValueError("need n_voxels >= 1, support_size >= 1, noise_sigma >= 0")
        if self.n_informative is not None and not 0 <= self.n_informative <= self.n_voxels:
            raise ValueError("n_informative must lie in [0, n_voxels]")


@dataclass(frozen=True)
class VoxelEncoding:
    voxel: int
    area: str
    layer_index: int | None  # None for nuisance voxels
    support: np.ndarray = field(repr=False)
    coefficients: np.ndarray = field(repr=False)

    @property
    def informative(self) -> bool:
        return self.layer_index is not None


@dataclass(frozen=True)
class SimulationTruth:
    n_voxels: int
    encodings: tuple[VoxelEncoding, ...]
    noise_sigma: float
    seed: int
    layer_index: int | None

    @property
    def informative_voxels(self) -> np.ndarray:
        return np.array([e.voxel for e in self.encodings if e.informative], dtype=np.int64)

    def area_map(self) -> AreaMap:
        return AreaMap(tuple(e.area for e in self.encodings))

    def to_csv(self, path) -> None:
        """Columns: voxel, area, layer, support, coefficients, sigma (lists ';'-joined)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["voxel", "area", "layer", "support", "coefficients", "sigma"])
            for e in self.encodings:
                w.writerow([e.voxel, e.area, "" if e.layer_index is None else e.layer_index,
                            ";".join(str(int(i)) for i in e.support),
                            ";".join(repr(float(c)) for c in e.coefficients),
                            repr(float(self.noise_sigma))])

    @classmethod
    def from_csv(cls, path, seed: int = 0) -> "SimulationTruth":
        encs = []
        sigma = 0.0
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                sup = np.array([int(s) for s in row["support"].split(";") if s], dtype=np.int64)
                coef = np.array([float(s) for s in row["coefficients"].split(";") if s])
                layer = int(row["layer"]) if row["layer"] else None
                encs.append(VoxelEncoding(int(row["voxel"]), row["area"], layer, sup, coef))
                sigma = float(row["sigma"])
        layers = {e.layer_index for e in encs if e.informative}
        return cls(len(encs), tuple(encs), sigma, seed, layers.pop() if len(layers) == 1 else None)


def simulate_voxels(stimuli: Sequence[np.ndarray], net: Network, layer_index, cfg: TruthConfig = TruthConfig(),
                    areas: AreaMap | None = None) -> tuple[np.ndarray, SimulationTruth]:
    """Voxel responses to ``stimuli`` as a design matrix, plus the planted truth.

    ``layer_index`` is one layer for all informative voxels or a per-voxel
    sequence of layers. Informative voxel ``v`` responds with
    ``sum_j c_vj * phi(stimulus)[j]`` over a random ``support_size``
    feature subset with standard normal ``c_vj``; the subset is drawn from
    features that vary over ``stimuli`` when there are enough of them. Nuisance voxels follow an
    iid standard normal signal. Noise is ``N(0, (noise_sigma * sd_v)^2)``
    where ``sd_v`` is the sd of the voxel's noiseless response.
    """
    n = cfg.n_voxels
    per_voxel = not np.isscalar(layer_index)
    layers = np.asarray(layer_index, dtype=np.int64) if per_voxel else np.full(n, int(layer_index))
    if layers.shape != (n,):
        raise ValueError(f"need one layer per voxel ({n}), got {layers.shape}")
    for ell in np.unique(layers):
        net._check_index(int(ell))
    if areas is not None and len(areas) != n:
        raise ValueError(f"area map covers {len(areas)} voxels, need {n}")
    rng = np.random.default_rng(cfg.seed)
    n_inf = n if cfg.n_informative is None else cfg.n_informative
    informative = np.zeros(n, dtype=bool)
    informative[rng.permutation(n)[:n_inf]] = True

    feats = {int(ell): feature_matrix(net, stimuli, int(ell)) for ell in np.unique(layers[informative])}
    live = {ell: np.flatnonzero(np.ptp(F, axis=0) > 0) for ell, F in feats.items()}
    m = len(stimuli)
    clean = np.zeros((m, n))
    encs = []
    for v in range(n):
        area = areas[v] if areas is not None else "other"
        if informative[v]:
            F = feats[int(layers[v])]
            D = F.shape[1]
            if cfg.support_size > D:
                raise ValueError(f"support size {cfg.support_size} exceeds layer dimension {D}")
            # prefer features that vary over the corpus; dead units would make a silent voxel
            pool = live[int(layers[v])]
            if pool.size < cfg.support_size:
                pool = np.arange(D)
            sup = np.sort(rng.choice(pool, cfg.support_size, replace=False))
            coef = rng.standard_normal(cfg.support_size)
            if cfg.unit_coefficients:
                coef = np.ones(cfg.support_size)
            clean[:, v] = F[:, sup] @ coef
            encs.append(VoxelEncoding(v, area, int(layers[v]), sup, coef))
        else:
            clean[:, v] = rng.standard_normal(m)
            encs.append(VoxelEncoding(v, area, None, np.zeros(0, np.int64), np.zeros(0)))
    noise_rng = np.random.default_rng([cfg.seed if cfg.noise_seed is None else cfg.noise_seed, 1])
    noise = noise_rng.standard_normal((m, n)) * (cfg.noise_sigma * clean.std(axis=0))
    truth = SimulationTruth(n, tuple(encs), cfg.noise_sigma, cfg.seed, None if per_voxel else int(layer_index))
    return design_matrix(clean + noise), truth


def apportion(n: int, proportions: dict[str, float]) -> dict[str, int]:
    """Largest-remainder counts summing to ``n``; ties go to the earlier key."""
    keys = list(proportions)
    p = np.array([proportions[k] for k in keys], dtype=np.float64)
    if np.any(p < 0) or not np.isclose(p.sum(), 1.0):
        raise ValueError("proportions must be nonnegative and sum to 1")
    quota = n * p
    counts = np.floor(quota + 1e-9).astype(int)
    rem = quota - counts
    order = sorted(range(len(keys)), key=lambda i: (-round(rem[i], 9), i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return {k: int(c) for k, c in zip(keys, counts)}


def make_area_map(n_voxels: int, proportions: dict[str, float], n_layers: int = 1,
                  gradient: float = 0.0, seed: int = 0) -> tuple[AreaMap, np.ndarray]:
    """Area labels plus a preferred layer per voxel.

    Label counts follow :func:`apportion` and are placed by a seeded
    shuffle. Area rank ``r`` (V1=0 .. V4=3) sits at depth ``r / 3``; a
    voxel picks layer ``l`` with probability proportional to
    ``exp(-gradient * (l / (n_layers - 1) - r / 3)^2)``, so ``gradient = 0``
    is uniform and large values tie early areas to early layers. "other"
    voxels always pick uniformly.
    """
    counts = apportion(n_voxels, proportions)
    labels = [a for a in counts for _ in range(counts[a])]
    rng = np.random.default_rng(seed)
    labels = [labels[i] for i in rng.permutation(n_voxels)]
    amap = AreaMap(tuple(labels))
    depth = np.linspace(0.0, 1.0, n_layers) if n_layers > 1 else np.zeros(1)
    prefs = np.empty(n_voxels, dtype=np.int64)
    for v, a in enumerate(labels):
        if a == "other":
            logits = np.zeros(n_layers)
        else:
            logits = -gradient * (depth - AREAS.index(a) / 3.0) ** 2
        w = np.exp(logits - logits.max())
        prefs[v] = rng.choice(n_layers, p=w / w.sum())
    return amap, prefs


def trend_specs():
    """A shallow stack with small layers (32x32 input) for layer-trend simulations."""
    return [convolution(2, 4, stride=4), rectifier(), maxpool(2, 2),
            fully_connected(32), rectifier(), fully_connected(32), rectifier(), fully_connected(32)]
