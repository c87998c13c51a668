"""Flat ``section.key = value`` pipeline configuration with a closed schema.

Blank lines and lines starting with ``#`` are ignored. Every key must be
listed in :data:`SCHEMA`; unknown keys, malformed values and missing
required keys raise :class:`ConfigError` naming the key.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

__all__ = ["ConfigError", "SCHEMA", "PipelineConfig", "parse_config", "load_config"]


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _proportions(s: str) -> dict[str, float]:
    out = {}
    for part in _strs(s):
        k, _, v = part.partition(":")
        out[k.strip()] = float(v)
    return out


_REQUIRED = object()

# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "paths.output": (str, _REQUIRED),
    "paths.network_spec": (str, ""),
    "paths.weights": (str, ""),
    "run.seed": (int, 0),
    "network.kernels": (int, 4),
    "network.pool": (int, 4),
    "simulate.count": (int, 200),
    "simulate.test_count": (int, 20),
    "simulate.height": (int, 32),
    "simulate.width": (int, 32),
    "simulate.layer": (int, 2),
    "simulate.n_voxels": (int, 768),
    "simulate.n_informative": (int, 512),
    "simulate.support_size": (int, 3),
    "simulate.noise_sigma": (float, 0.1),
    "simulate.area_proportions": (_proportions, {"V1": 0.3, "V2": 0.3, "V3": 0.25, "V4": 0.15}),
    "simulate.area_gradient": (float, 0.0),
    "features.layers": (_ints, (2,)),
    "train.solvers": (_strs, ("romp",)),
    "train.sparsity_k": (int, 32),
    "train.residual_tol": (float, 1e-6),
    "train.max_iterations": (int, 20000),
    "train.rho": (float, 1.0),
    "train.delta": (float, 0.05),
    "train.workers": (int, 1),
    "invert.layer": (int, 2),
    "invert.solver": (str, "romp"),
    "invert.items": (int, 10),
    "invert.alpha": (float, 6.0),
    "invert.lambda_alpha": (float, 1e-5),
    "invert.lambda_tv": (float, 1e-3),
    "invert.tv_beta": (float, 2.0),
    "invert.learning_rate": (float, 0.05),
    "invert.scale_learning_rate": (_bool, True),
    "invert.momentum": (float, 0.9),
    "invert.max_iterations": (int, 1000),
    "invert.loss_tol": (float, 1e-4),
    "invert.init": (str, "seeded_noise"),
    "cwssim.levels": (int, 3),
    "cwssim.orientations": (int, 4),
    "cwssim.window": (int, 7),
    "cwssim.K": (float, 0.03),
    "evaluate.permutations": (int, 200),
    "evaluate.significant": (int, 300),
}


@dataclass(frozen=True)
class PipelineConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    def with_seed(self, seed: int | None) -> "PipelineConfig":
        if seed is None:
            return self
        return PipelineConfig({**self.values, "run.seed": int(seed)})


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value.strip()
    values = {}
    for key, (parse, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from exc
        elif default is _REQUIRED:
            raise ConfigError(f"{source}: missing required key {key!r}")
        else:
            values[key] = default
    return PipelineConfig(values)


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
