import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from embinv import operators as O
from embinv.embedding import StaticEmbedding, init_timed
from embinv.potential import PotentialParams, init_potential, l1_surrogate_gap, scaled_identity_potential
from embinv.solvers import (
    DivergenceError,
    Network,
    Problem,
    SolverSpec,
    backtracked_steps,
    eunet_forward,
    ista_l1,
    langevin_sample,
    map_gd,
    objective_zmape,
    optenet_forward,
    proximal_forward,
    soft_threshold,
    softplus,
    softplus_inv,
)


def _zero_potential(k):
    return PotentialParams([np.eye(k)], [np.zeros(k)], np.zeros(k))


def _random_potential(seed, k, depth=2, width=6, bias=0.3):
    rng = np.random.default_rng(seed)
    p = init_potential(rng, k, depth=depth, width=width)
    p.biases = [bias * rng.standard_normal(b.shape) for b in p.biases]
    return p


# -- objective -------------------------------------------------------------


def test_objective_zero_at_exact_fit():
    E = np.eye(3)
    z = np.array([1.0, 2.0, 3.0])
    assert objective_zmape(z, O.Identity(3), E, z, None) == 0.0


def test_objective_with_l1_potential():
    rng = np.random.default_rng(0)
    A, E = O.DenseOperator(rng.standard_normal((3, 4))), rng.standard_normal((4, 6))
    z, b = rng.standard_normal(6), rng.standard_normal(3)
    data = objective_zmape(z, A, E, b, None)
    full = objective_zmape(z, A, E, b, scaled_identity_potential(100.0, 6))
    gap = abs(full - data - 100.0 * np.abs(z).sum())
    assert gap == pytest.approx(l1_surrogate_gap(100.0, z), abs=1e-9)
    assert gap <= 6 * math.log(2)


def test_objective_quadratic_scaling():
    A, E = O.Identity(2), np.eye(2)
    z = np.array([0.3, -0.2])
    r = np.array([1.0, 2.0])
    assert objective_zmape(z, A, E, z - 2 * r, None) == pytest.approx(4 * objective_zmape(z, A, E, z - r, None), rel=1e-14)


# -- unrolled forward passes ----------------------------------------------------


def test_optenet_one_step_recovery():
    b = np.array([0.5, -1.5, 2.0])
    spec = SolverSpec("optenet", layers=1, step_sizes=[1.0], init_policy="zeros")
    xhat, zs = optenet_forward(b, O.Identity(3), np.eye(3), _zero_potential(3), spec)
    np.testing.assert_allclose(zs[1], b, rtol=1e-14)
    np.testing.assert_allclose(xhat, b, rtol=1e-14)


def test_optenet_converges_to_least_squares():
    rng = np.random.default_rng(3)
    M = rng.standard_normal((4, 8))
    b = rng.standard_normal(4)
    h = 1.0 / np.linalg.norm(M, 2) ** 2
    J = 10_000
    spec = SolverSpec("optenet", layers=J, step_sizes=[h] * J, init_policy="zeros")
    xhat, _ = optenet_forward(b, O.DenseOperator(M), np.eye(8), _zero_potential(8), spec)
    # from z0 = 0 the iteration stays in range(M^T): minimum-norm solution
    ref = M.T @ np.linalg.solve(M @ M.T, b)
    assert np.linalg.norm(xhat - ref) <= 1e-6


def test_optenet_small_steps_descend():
    rng = np.random.default_rng(5)
    A = O.DenseOperator(rng.standard_normal((3, 4)))
    E = rng.standard_normal((4, 8)) / math.sqrt(8)
    p = _random_potential(1, 8, bias=0.0)
    b = rng.standard_normal(3)
    spec = SolverSpec("optenet", layers=12, step_sizes=[0.02] * 12, phi_time=0.0)
    _, zs = optenet_forward(b, A, E, p, spec)
    f = [objective_zmape(z, A, E, b, p, 0.0) for z in zs]
    assert all(b_ <= a for a, b_ in zip(f, f[1:]))


def test_eunet_tied_layers_reproduce_optenet():
    rng = np.random.default_rng(7)
    A = O.DenseOperator(rng.standard_normal((2, 3)))
    E = rng.standard_normal((3, 6))
    p = _random_potential(2, 6)
    b = rng.standard_normal((4, 2))
    hs = [0.1, 0.05, 0.2]
    x1, z1 = optenet_forward(b, A, E, p, SolverSpec("optenet", layers=3, step_sizes=hs))
    x2, z2 = eunet_forward(b, A, StaticEmbedding(E), [p] * 3, SolverSpec("eunet", layers=3, step_sizes=hs))
    assert np.array_equal(x1, x2)
    for a, c in zip(z1, z2):
        assert np.array_equal(a, c)


def test_eunet_scalar_recursion():
    b = np.array([2.0, -1.0])
    hs = [0.3, 0.5, 0.1, 0.7]
    spec = SolverSpec("eunet", layers=4, step_sizes=hs, init_policy="zeros")
    xhat, _ = eunet_forward(b, O.Identity(2), [np.eye(2)] * 4, [_zero_potential(2)] * 4, spec)
    expected = (1 - np.prod([1 - h for h in hs])) * b
    np.testing.assert_allclose(xhat, expected, rtol=1e-14)


def test_eunet_step_doubling():
    # forward Euler: halving h and doubling J halves the error
    rng = np.random.default_rng(11)
    A = O.DenseOperator(rng.standard_normal((2, 3)) / 2)
    emb = init_timed(rng, (3, 5), hidden=3)
    pot = _random_potential(4, 5, width=4, bias=0.2)
    b = rng.standard_normal(2)
    T = 2.0
    finals = []
    for J in (8, 16, 32, 64):
        spec = SolverSpec("eunet", layers=J, step_sizes=[T / J] * J, init_policy="zeros")
        finals.append(eunet_forward(b, A, emb, pot, spec)[0])
    d = [np.linalg.norm(finals[i + 1] - finals[i]) for i in range(3)]
    ratios = [d[i] / d[i + 1] for i in range(2)]
    assert all(1.8 < r < 2.2 for r in ratios)


def test_proximal_is_eunet_with_identity_embedding():
    rng = np.random.default_rng(13)
    A = O.DenseOperator(rng.standard_normal((2, 3)))
    pots = [_random_potential(20 + j, 3) for j in range(3)]
    b = rng.standard_normal((2, 2))
    hs = [0.2, 0.1, 0.3]
    x1, _ = proximal_forward(b, A, pots, SolverSpec("proximal", layers=3, step_sizes=hs))
    x2, _ = eunet_forward(b, A, [np.eye(3)] * 3, pots, SolverSpec("eunet", layers=3, step_sizes=hs))
    np.testing.assert_allclose(x1, x2, rtol=1e-13, atol=1e-14)


def test_proximal_landweber():
    b = np.array([1.0, 4.0])
    hs = [0.5, 0.5]
    x, xs = proximal_forward(b, O.Identity(2), _zero_potential(2), SolverSpec("proximal", layers=2, step_sizes=hs, init_policy="zeros"))
    np.testing.assert_allclose(x, 0.75 * b, rtol=1e-14)


@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_zero_potential_update_is_linear(seed, a, c):
    rng = np.random.default_rng(seed)
    A = O.DenseOperator(rng.standard_normal((2, 3)))
    E = rng.standard_normal((3, 5))
    spec = SolverSpec("optenet", layers=4, step_sizes=[0.05] * 4)
    b1, b2 = rng.standard_normal((2, 2))

    def run(b):
        return optenet_forward(b, A, E, _zero_potential(5), spec)[1][-1]

    lhs = run(a * b1 + c * b2)
    rhs = a * run(b1) + c * run(b2)
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * max(1.0, np.linalg.norm(rhs))


def test_divergence_reports_layer():
    b = np.array([1e3, 1e3])
    spec = SolverSpec("optenet", layers=12, step_sizes=[50.0] * 12, init_policy="zeros")
    with pytest.raises(DivergenceError) as info:
        optenet_forward(b, O.Identity(2), np.eye(2), _zero_potential(2), spec)
    assert 1 <= info.value.layer <= 12


def test_step_sizes_positive_through_softplus():
    h = np.array([1e-8, 0.1, 1.0, 50.0])
    np.testing.assert_allclose(softplus(softplus_inv(h)), h, rtol=1e-8)
    assert np.all(softplus(np.array([-800.0, 0.0, 800.0])) >= 0)
    with pytest.raises(ValueError):
        SolverSpec("eunet", layers=2, step_sizes=[0.1, -0.1])
    with pytest.raises(ValueError):
        SolverSpec("eunet", layers=0)


def test_network_shapes():
    prob = Problem(O.Summation(2), (2,))
    for variant in ("optenet", "eunet", "proximal"):
        net = Network.init(SolverSpec(variant, layers=3, embedding_dim=6, potential_width=4, potential_depth=2), prob, seed=0)
        out = net.predict(np.ones((5, 1)))
        assert out.shape == (5, 2)
        assert net.step_sizes().shape == (3,)
        assert net.layer_objectives(np.ones((5, 1))).shape == (3,)


def test_backtracked_descent():
    rng = np.random.default_rng(0)
    A = O.DenseOperator(rng.standard_normal((3, 4)))
    E = rng.standard_normal((4, 10)) / math.sqrt(10)
    p = _random_potential(8, 10, bias=0.5)
    hs, trace = backtracked_steps(rng.standard_normal(3), A, E, p, 16)
    assert np.all(hs > 0)
    assert np.all(np.diff(trace) <= 0)


# -- ISTA --------------------------------------------------------------------


def test_soft_threshold_examples():
    assert soft_threshold(3.0, 1.0) == 2.0
    assert soft_threshold(-0.5, 1.0) == 0.0


def test_ista_identity_one_step():
    b = np.array([3.0, -0.5, 1.5])
    _, z, _ = ista_l1(b, O.Identity(3), np.eye(3), 1.0, 1)
    np.testing.assert_allclose(z, soft_threshold(b, 1.0), atol=1e-12)


def test_ista_without_penalty_is_least_squares():
    rng = np.random.default_rng(2)
    M = rng.standard_normal((4, 8))
    b = rng.standard_normal(4)
    x, z, hist = ista_l1(b, O.DenseOperator(M), np.eye(8), 0.0, 20_000)
    ref = M.T @ np.linalg.solve(M @ M.T, b)
    assert np.linalg.norm(z - ref) <= 1e-6


@given(st.integers(0, 10_000), st.floats(0.0, 2.0))
def test_ista_objective_non_increasing(seed, gamma):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((3, 6))
    _, _, hist = ista_l1(rng.standard_normal(3), O.DenseOperator(M), np.eye(6), gamma, 200)
    assert np.all(np.diff(hist) <= 1e-12 * max(1.0, hist[0]))


def test_ista_rejects_bad_arguments():
    with pytest.raises(ValueError):
        ista_l1(np.ones(2), O.Identity(2), np.eye(2), -1.0, 5)
    with pytest.raises(ValueError):
        ista_l1(np.ones(2), O.Identity(2), np.eye(2), 1.0, 0)


# -- MAP gradient descent and Langevin -------------------------------------------


def test_map_gd_one_step():
    b = np.array([1.0, -2.0])
    traj = map_gd(b, O.Identity(2), lambda x: 0.0 * x, 1.0, 1, np.zeros(2))
    np.testing.assert_array_equal(traj[1], b)


def test_map_gd_quadratic_closed_form():
    # R = lam/2 |x|^2 gives the affine recursion x <- (1 - a(1 + lam)) x + a b
    lam, a = 0.5, 0.2
    b = np.array([1.0, 3.0])
    traj = map_gd(b, O.Identity(2), lambda x: lam * x, a, 30, np.zeros(2))
    x = np.zeros(2)
    for k in range(30):
        x = (1 - a * (1 + lam)) * x + a * b
        np.testing.assert_allclose(traj[k + 1], x, rtol=1e-14)


def test_map_gd_basin_capture():
    mu, gamma = 1.0, 0.1

    def r(x):
        return 4 * x * (x * x - mu * mu) / gamma

    traj = map_gd([0.9], O.Identity(1), r, 1e-3, 3000, np.array([-1.0]), data_weight=2.0)
    assert traj[-1, 0] < 0


def test_map_gd_divergence():
    with pytest.raises(DivergenceError):
        map_gd([1.0], O.Identity(1), lambda x: 0 * x, 5.0, 100, np.zeros(1))
    with pytest.raises(ValueError):
        map_gd([1.0], O.Identity(1), lambda x: 0 * x, 0.0, 10, np.zeros(1))


def test_langevin_small_step_tracks_descent():
    b = np.array([1.0])
    x0 = np.array([3.0])
    s = langevin_sample(b, O.Identity(1), lambda x: x, 1e-12, 20, 0, x0, burn_in=0.0, thin=1)
    d = map_gd(b, O.Identity(1), lambda x: x, 1e-12, 20, x0)
    np.testing.assert_allclose(s[:, 0], d[1:, 0], atol=1e-5)


def test_langevin_gaussian_posterior():
    # prior N(0, 1/lam), likelihood N(b; x, 1/w): posterior N(w b / (w + lam), 1 / (w + lam))
    lam, w, b = 2.0, 4.0, np.array([1.5, -0.5])
    chains = np.zeros((8, 2))
    s = langevin_sample(b, O.Identity(2), lambda x: lam * x, 1e-3, 100_000, 3, chains, data_weight=w).reshape(-1, 2)
    mean = w * b / (w + lam)
    var = 1.0 / (w + lam)
    np.testing.assert_allclose(s.mean(axis=0), mean, rtol=0.05)
    np.testing.assert_allclose(np.cov(s.T), var * np.eye(2), atol=0.05 * var)


def test_langevin_deterministic_per_seed():
    args = ([0.0], O.Identity(1), lambda x: x, 1e-2, 200, 5, np.zeros(1))
    assert np.array_equal(langevin_sample(*args), langevin_sample(*args))
    assert not np.array_equal(langevin_sample(*args), langevin_sample([0.0], O.Identity(1), lambda x: x, 1e-2, 200, 6, np.zeros(1)))
