"""Analytic demos: descent on the double well with and without the ring
lift, and Langevin sampling of the duathlon posterior."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from . import datagen, operators
from .solvers import langevin_sample, map_gd


@dataclass
class DoublewellReport:
    x_global: float
    minima: list[float]
    fraction_1d: float
    fraction_2d: float
    starts: np.ndarray  # (trials, 2): x0, y0
    final_1d: np.ndarray
    final_2d: np.ndarray  # (trials, 2)
    grid_1d: list[tuple] = field(repr=False)
    grid_2d: list[tuple] = field(repr=False)

    def summary(self) -> dict:
        return {
            "x_global": self.x_global,
            "minima": self.minima,
            "trials": int(len(self.starts)),
            "fraction_1d": self.fraction_1d,
            "fraction_2d": self.fraction_2d,
        }


def local_minima_1d(f, lo: float, hi: float, points: int = 40001) -> list[float]:
    xs = np.linspace(lo, hi, points)
    v = f(xs[:, None])
    inner = np.flatnonzero((v[1:-1] < v[:-2]) & (v[1:-1] <= v[2:])) + 1
    return [float(xs[i]) for i in inner]


def symmetric_starts(trials: int, scale: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Signed starts +-u with u ~ U(0, 2 scale) and a transverse y0 ~ N(0, scale^2)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng([seed, 0xD0])
    u = rng.uniform(0.0, 2.0 * scale, (trials + 1) // 2)
    x0 = np.stack([u, -u], axis=1).reshape(-1)[:trials]
    y0 = scale * rng.standard_normal(trials)
    return x0, y0


def doublewell_demo(mu: float = 1.0, gamma: float = 0.1, sigma: float = 0.5, b: float = 0.9, trials: int = 200, seed: int = 0, alpha: float = 1e-3, iters: int = 2000, grid_points: int = 81) -> DoublewellReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    f1, f2 = datagen.doublewell_problem(mu, gamma, sigma, b)
    r1, r2 = datagen.doublewell_prior_grads(mu, gamma)
    span = 3.0 * mu
    minima = local_minima_1d(f1.value, -span, span)
    x_global = min(minima, key=lambda m: float(f1.value(np.array([m]))))

    x0, y0 = symmetric_starts(trials, mu, seed)
    w = 1.0 / sigma
    xf = map_gd([b], operators.Identity(1), r1, alpha, iters, x0[:, None], data_weight=w)[-1, :, 0]
    lift = operators.DenseOperator(np.array([[1.0, 0.0]]))
    zf = map_gd([b], lift, r2, alpha, iters, np.stack([x0, y0], axis=1), data_weight=w)[-1]

    mins = np.array(minima)
    nearest = mins[np.argmin(np.abs(xf[:, None] - mins[None, :]), axis=1)]
    frac1 = float(np.mean(nearest == x_global))
    frac2 = float(np.mean(np.sign(zf[:, 0]) == np.sign(x_global)))

    def prior1(x):
        return (x - mu) ** 2 * (x + mu) ** 2 / gamma

    g = np.linspace(-2 * mu, 2 * mu, grid_points)
    grid_1d = [(float(x), float(prior1(x)), float(f1.value(np.array([x])))) for x in g]
    Z1, Z2 = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([Z1.ravel(), Z2.ravel()], axis=1)
    ring = (np.sum(pts * pts, axis=1) - mu * mu) ** 2 / gamma
    obj = f2.value(pts)
    grid_2d = [(float(p[0]), float(p[1]), float(r), float(o)) for p, r, o in zip(pts, ring, obj)]
    return DoublewellReport(float(x_global), minima, frac1, frac2, np.stack([x0, y0], axis=1), xf, zf, grid_1d, grid_2d)


# -- duathlon posterior --------------------------------------------------------


def count_clusters(points, radius: float, min_fraction: float = 0.01, max_points: int = 2000) -> int:
    """Single-linkage clusters at the given radius.  Points are thinned evenly
    to ``max_points``; clusters holding less than ``min_fraction`` of the
    points are treated as stray tail samples."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, np.shape(points)[-1])
    if len(p) == 0:
        return 0
    if len(p) == 1:
        return 1
    if len(p) > max_points:
        p = p[np.linspace(0, len(p) - 1, max_points).astype(int)]
    labels = fcluster(linkage(p, method="single"), t=radius, criterion="distance")
    sizes = np.bincount(labels)[1:]
    return int(np.sum(sizes >= max(1, math.ceil(min_fraction * len(p)))))


def consistent_components(b: float, means, cov_scale: float, k: float = 3.0) -> list[int]:
    """Mixture components whose mean lies within k standard deviations of the
    line x1 + x2 = b."""
    means = np.asarray(means, dtype=np.float64)
    dist = np.abs(means.sum(axis=1) - b) / math.sqrt(2.0)
    return [int(i) for i in np.flatnonzero(dist <= k * cov_scale)]


def posterior_mixture(b: float, means, cov_scale: float, likelihood_sigma: float):
    """Closed-form posterior of the isotropic mixture under b = x1 + x2 + N(0, sigma^2).

    Returns (weights, means, covariance); the covariance is shared.
    """
    means = np.asarray(means, dtype=np.float64)
    a = np.ones(means.shape[1])
    s2, e2 = cov_scale**2, likelihood_sigma**2
    cov = np.linalg.inv(np.eye(len(a)) / s2 + np.outer(a, a) / e2)
    post_means = (means / s2 + a * b / e2) @ cov
    var_b = e2 + s2 * float(a @ a)
    logw = -0.5 * (means @ a - b) ** 2 / var_b
    w = np.exp(logw - logw.max())
    return w / w.sum(), post_means, cov


def duathlon_posterior(b: float, means, cov_scale: float, likelihood_sigma: float, alpha: float, steps: int, chains: int, seed: int, burn_in: float = 0.5, thin: int = 10) -> np.ndarray:
    """Langevin samples of p(x | b) with the exact mixture prior.

    Modes along the data line are separated by barriers of tens of nats, so
    the chains do not hop between them and their initial allocation fixes
    the mode occupancy.  Chains therefore start at draws from the
    closed-form posterior.  Returns (kept, chains, 2).
    """
    w, pm, cov = posterior_mixture(b, means, cov_scale, likelihood_sigma)
    rng = np.random.default_rng([seed, 0x1A])
    comp = rng.choice(len(w), size=chains, p=w)
    x0 = pm[comp] + rng.multivariate_normal(np.zeros(pm.shape[1]), cov, size=chains, method="cholesky")
    gmm = datagen.GaussianMixture(means, cov_scale)
    return langevin_sample([b], operators.Summation(2), gmm.grad, alpha, steps, seed, x0, data_weight=1.0 / likelihood_sigma**2, burn_in=burn_in, thin=thin)


def data_line(b: float, lo: float, hi: float, points: int = 101) -> list[tuple[float, float]]:
    return [(float(t), float(b - t)) for t in np.linspace(lo, hi, points)]
