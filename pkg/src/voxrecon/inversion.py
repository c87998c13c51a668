"""Reconstruct an image whose network features match a target vector.

The objective is::

    E(x) = ||phi(x) - phi0||^2 / ||phi0||^2
           + lambda_alpha * sum |x - mean(x)|^alpha
           + lambda_tv * sum_pixels (dh^2 + dv^2)^(beta / 2)

minimized by heavy-ball momentum gradient descent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .convnet import FeatureVector, Network, backward_to_input, forward

__all__ = [
    "InversionConfig", "ReconstructionResult", "InversionDiverged",
    "feature_loss", "alpha_norm", "tv_norm", "objective", "invert",
]


class InversionDiverged(FloatingPointError):
    """The objective became non-finite; ``last_image`` is the last finite iterate."""

    def __init__(self, message, last_image, iteration):
        super().__init__(message)
        self.last_image = last_image
        self.iteration = iteration


@dataclass(frozen=True)
class InversionConfig:
    alpha: float = 6.0
    lambda_alpha: float = 1e-5
    lambda_tv: float = 1e-4
    tv_beta: float = 2.0
    learning_rate: float = 0.05
    scale_learning_rate: bool = True
    momentum: float = 0.9
    max_iterations: int = 2000
    loss_tol: float = 1e-4
    window: int = 50
    init: str = "seeded_noise"
    init_image: np.ndarray | None = field(default=None, repr=False, compare=False)
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 1 or self.tv_beta < 1:
            raise ValueError("alpha and tv_beta must be >= 1")
        if self.lambda_alpha < 0 or self.lambda_tv < 0:
            raise ValueError("regularization weights must be >= 0")
        if self.learning_rate <= 0 or not (0 <= self.momentum < 1):
            raise ValueError("need learning_rate > 0 and 0 <= momentum < 1")
        if self.init not in ("zeros", "seeded_noise", "provided"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.init == "provided" and self.init_image is None:
            raise ValueError("init='provided' needs init_image")


@dataclass
class ReconstructionResult:
    image: np.ndarray
    loss_trajectory: np.ndarray  # rows: total, feature, alpha, tv
    iterations_run: int
    converged: bool

    @property
    def final_loss(self) -> float:
        return float(self.loss_trajectory[-1, 0]) if len(self.loss_trajectory) else float("nan")


def feature_loss(net: Network, layer_index: int, x, target) -> tuple[float, np.ndarray]:
    """Normalized squared feature distance and its gradient with respect to ``x``."""
    phi0 = target.values if isinstance(target, FeatureVector) else np.asarray(target, dtype=np.float64).ravel()
    if layer_index == -1:
        phi = np.asarray(x, dtype=np.float64).ravel()
    else:
        net._check_index(layer_index)
        phi = forward(net, x, upto=layer_index)[-1].ravel()
    if phi.size != phi0.size:
        raise ValueError(f"target dimension {phi0.size} does not match layer size {phi.size}")
    norm2 = float(phi0 @ phi0) or 1.0
    diff = phi - phi0
    loss = float(diff @ diff) / norm2
    grad = backward_to_input(net, layer_index, 2.0 * diff / norm2, x)
    return loss, grad


def alpha_norm(x, alpha: float = 6.0) -> tuple[float, np.ndarray]:
    """``sum |z|^alpha`` of the mean-subtracted image ``z`` and its gradient."""
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    z = x - x.mean()
    a = np.abs(z)
    value = float(np.sum(a ** alpha))
    g = alpha * a ** (alpha - 1.0) * np.sign(z)
    # adjoint of mean subtraction
    return value, g - g.mean()


def tv_norm(x, beta: float = 2.0) -> tuple[float, np.ndarray]:
    """Total variation ``sum (dh^2 + dv^2)^(beta/2)`` with forward differences.

    Differences that would cross the image border count as zero, so a 1x1
    image has value 0. Works on ``(H, W)`` or ``(C, H, W)`` arrays.
    """
    if beta < 1:
        raise ValueError("beta must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    dh = np.zeros_like(x)
    dv = np.zeros_like(x)
    dh[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    dv[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    s = dh * dh + dv * dv
    value = float(np.sum(s ** (beta / 2.0)))
    if beta == 2.0:
        coef = 2.0 * np.ones_like(s)
    else:
        safe = np.where(s > 0, s, 1.0)
        coef = np.where(s > 0, beta * safe ** (beta / 2.0 - 1.0), 0.0)
    gh = coef * dh
    gv = coef * dv
    grad = np.zeros_like(x)
    grad[..., :, :-1] -= gh[..., :, :-1]
    grad[..., :, 1:] += gh[..., :, :-1]
    grad[..., :-1, :] -= gv[..., :-1, :]
    grad[..., 1:, :] += gv[..., :-1, :]
    return value, grad


def objective(net: Network, layer_index: int, x, target, cfg: InversionConfig):
    """Return ``(total, feature, alpha, tv, gradient)`` at ``x``."""
    f, gf = feature_loss(net, layer_index, x, target)
    ra, ga = alpha_norm(x, cfg.alpha)
    rt, gt = tv_norm(x, cfg.tv_beta)
    total = f + cfg.lambda_alpha * ra + cfg.lambda_tv * rt
    grad = gf + cfg.lambda_alpha * ga + cfg.lambda_tv * gt
    return total, f, ra, rt, grad


def _initial_image(net: Network, cfg: InversionConfig) -> np.ndarray:
    if cfg.init == "zeros":
        return np.zeros(net.input_shape)
    if cfg.init == "provided":
        img = np.array(cfg.init_image, dtype=np.float64)
        if img.shape != net.input_shape:
            raise ValueError(f"init_image shape {img.shape} != {net.input_shape}")
        return img
    return np.random.default_rng(cfg.seed).random(net.input_shape)


def invert(net: Network, layer_index: int, target, cfg: InversionConfig = InversionConfig()) -> ReconstructionResult:
    """Minimize the reconstruction objective from ``cfg.init`` by momentum descent.

    With ``scale_learning_rate`` the step is ``learning_rate * ||phi0||^2``,
    which undoes the normalization of the feature term. Stops when the mean
    total loss over the last ``cfg.window`` iterations is less than
    ``loss_tol`` (relative) below the mean over the window before, or after
    ``max_iterations``. The returned image is the last iterate.
    """
    phi0 = target.values if isinstance(target, FeatureVector) else np.asarray(target, dtype=np.float64).ravel()
    eta = cfg.learning_rate
    if cfg.scale_learning_rate:
        eta *= float(phi0 @ phi0) or 1.0
    x = _initial_image(net, cfg)
    v = np.zeros_like(x)
    rows = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        total, f, ra, rt, grad = objective(net, layer_index, x, target, cfg)
        if not (np.isfinite(total) and np.all(np.isfinite(grad))):
            raise InversionDiverged(f"objective became non-finite at iteration {it}", x, it)
        rows.append((total, f, ra, rt))
        if total == 0.0:
            converged = True
            break
        w = cfg.window
        if it >= 2 * w:
            # window means, since heavy-ball iterates oscillate
            old = sum(r[0] for r in rows[-2 * w:-w]) / w
            new = sum(r[0] for r in rows[-w:]) / w
            if (old - new) < cfg.loss_tol * old:
                converged = True
                break
        v = cfg.momentum * v - eta * grad
        x = x + v
    return ReconstructionResult(x, np.array(rows, dtype=np.float64).reshape(-1, 4), it, converged)
