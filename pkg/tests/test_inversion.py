import numpy as np
import pytest

from voxrecon import convnet as cn
from voxrecon.inversion import (InversionConfig, InversionDiverged, alpha_norm, feature_loss,
                                invert, objective, tv_norm)


def fd_rel_error(f, x, rng, probes=10, h=1e-5):
    """Directional central differences of scalar ``f`` against its analytic gradient."""
    _, g = f(x)
    worst = 0.0
    for _ in range(probes):
        d = rng.standard_normal(x.shape)
        num = (f(x + h * d)[0] - f(x - h * d)[0]) / (2 * h)
        ana = float(np.sum(g * d))
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    return worst


@pytest.fixture
def toy():
    return cn.build_network((1, 16, 16), cn.toy_specs(), seed=1)


def test_feature_loss_at_target_is_zero(toy):
    x = np.random.default_rng(0).random((1, 16, 16))
    target = cn.extract_features(toy, x, 2)
    loss, grad = feature_loss(toy, 2, x, target)
    assert loss == 0.0 and np.all(grad == 0)


def test_feature_loss_identity_zero_target():
    net = cn.build_network((1, 4, 5), [])
    x = np.random.default_rng(1).standard_normal((1, 4, 5))
    loss, grad = feature_loss(net, -1, x, np.zeros(20))
    assert loss == pytest.approx(np.sum(x ** 2), rel=1e-14)
    np.testing.assert_allclose(grad, 2 * x, rtol=1e-14)


def test_feature_loss_gradient(toy):
    rng = np.random.default_rng(2)
    target = cn.extract_features(toy, rng.random((1, 16, 16)), 2)
    x = rng.random((1, 16, 16))
    assert fd_rel_error(lambda z: feature_loss(toy, 2, z, target), x, rng) < 1e-6


def test_feature_loss_bad_layer(toy):
    with pytest.raises(IndexError):
        feature_loss(toy, 5, np.zeros((1, 16, 16)), np.zeros(4))


def test_alpha_norm_constant():
    v, g = alpha_norm(np.full((3, 3), 0.7), 6)
    assert v == 0 and np.all(g == 0)


def test_alpha_norm_single_deviation():
    c = 1.7
    v, _ = alpha_norm(np.array([0.0, 0.0, 0.0, c]), 2)
    assert v == pytest.approx(3 * (c / 4) ** 2 + (3 * c / 4) ** 2, rel=1e-14)
    assert v == pytest.approx(0.75 * c * c, rel=1e-14)


def test_alpha_norm_gradient():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 8, 8))
    assert fd_rel_error(lambda z: alpha_norm(z, 6), x, rng) < 1e-6


def test_tv_constant_and_hand_value():
    assert tv_norm(np.full((1, 4, 4), 0.3))[0] == 0
    img = np.array([[[0.0, 1.0], [0.0, 1.0]]])
    assert tv_norm(img, 2)[0] == 2.0


def test_tv_single_pixel():
    v, g = tv_norm(np.array([[[3.0]]]), 2)
    assert v == 0 and np.all(g == 0)


@pytest.mark.parametrize("beta", [2.0, 1.5, 1.0])
def test_tv_gradient(beta):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 6, 7))
    assert fd_rel_error(lambda z: tv_norm(z, beta), x, rng) < 1e-6


def test_full_objective_gradient(toy):
    rng = np.random.default_rng(5)
    for _ in range(5):
        cfg = InversionConfig(lambda_alpha=rng.uniform(0, 1e-2), lambda_tv=rng.uniform(0, 1e-1))
        target = cn.extract_features(toy, rng.random((1, 16, 16)), 2)
        x = rng.random((1, 16, 16))
        f = lambda z: (objective(toy, 2, z, target, cfg)[0], objective(toy, 2, z, target, cfg)[4])
        assert fd_rel_error(f, x, rng, probes=4) < 1e-5


def test_invert_identity_recovers_image():
    net = cn.build_network((1, 16, 16), [])
    x0 = np.random.default_rng(10).random((1, 16, 16))
    cfg = InversionConfig(lambda_alpha=0, lambda_tv=0, seed=3, loss_tol=1e-12)
    res = invert(net, -1, x0.ravel(), cfg)
    assert res.final_loss < 1e-10
    assert np.max(np.abs(res.image - x0)) < 1e-4


def test_invert_stationary_start(toy):
    x0 = np.random.default_rng(11).random((1, 16, 16))
    target = cn.extract_features(toy, x0, 2)
    cfg = InversionConfig(lambda_alpha=0, lambda_tv=0, init="provided", init_image=x0, max_iterations=20)
    res = invert(toy, 2, target, cfg)
    assert np.array_equal(res.image, x0)
    assert res.final_loss == 0.0


def test_invert_toy_reduces_feature_loss(toy):
    x0 = np.random.default_rng(12).random((1, 16, 16))
    target = cn.extract_features(toy, x0, 2)
    cfg = InversionConfig(lambda_alpha=1e-7, lambda_tv=1e-6, max_iterations=2000, loss_tol=1e-6)
    res = invert(toy, 2, target, cfg)
    assert res.iterations_run <= 2000
    assert res.loss_trajectory[-1, 1] <= 0.01 * res.loss_trajectory[0, 1]


def test_objective_decomposition(toy):
    x0 = np.random.default_rng(13).random((1, 16, 16))
    target = cn.extract_features(toy, x0, 2)
    cfg = InversionConfig(lambda_alpha=1e-3, lambda_tv=1e-2, max_iterations=60)
    traj = invert(toy, 2, target, cfg).loss_trajectory
    recomputed = traj[:, 1] + cfg.lambda_alpha * traj[:, 2] + cfg.lambda_tv * traj[:, 3]
    assert np.max(np.abs(traj[:, 0] - recomputed)) <= 1e-12


def test_monotone_without_momentum():
    net = cn.build_network((1, 8, 8), [])
    x0 = np.random.default_rng(14).random((1, 8, 8))
    cfg = InversionConfig(lambda_alpha=0, lambda_tv=0, momentum=0.0, learning_rate=0.1, max_iterations=100)
    traj = invert(net, -1, x0.ravel(), cfg).loss_trajectory[:, 0]
    assert np.all(np.diff(traj) <= 0)


def test_seed_determinism(toy):
    target = cn.extract_features(toy, np.random.default_rng(15).random((1, 16, 16)), 2)
    cfg = InversionConfig(max_iterations=50, seed=7)
    a = invert(toy, 2, target, cfg)
    b = invert(toy, 2, target, cfg)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.loss_trajectory.tobytes() == b.loss_trajectory.tobytes()


def test_large_tv_weight_smooths(toy):
    target = cn.extract_features(toy, np.random.default_rng(16).random((1, 16, 16)), 2)
    cfg = InversionConfig(lambda_tv=1.0, max_iterations=300, learning_rate=0.01, scale_learning_rate=False,
                          seed=2)
    init = np.random.default_rng(2).random((1, 16, 16))
    res = invert(toy, 2, target, cfg)
    assert tv_norm(res.image)[0] < tv_norm(init)[0]


def test_divergence_reports_last_finite_iterate():
    net = cn.build_network((1, 8, 8), [])
    x0 = np.random.default_rng(17).random((1, 8, 8))
    cfg = InversionConfig(lambda_alpha=0, lambda_tv=0, learning_rate=50.0, momentum=0.0, max_iterations=5000)
    with pytest.raises(InversionDiverged) as exc:
        invert(net, -1, x0.ravel(), cfg)
    assert np.all(np.isfinite(exc.value.last_image))


def test_config_validation():
    with pytest.raises(ValueError):
        InversionConfig(momentum=1.0)
    with pytest.raises(ValueError):
        InversionConfig(init="provided")
    with pytest.raises(ValueError):
        InversionConfig(alpha=0.5)
