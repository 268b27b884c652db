"""Gaussian-process regression over configuration coordinates and the exact
expected-hypervolume-improvement acquisition for one Gaussian objective.

Inputs are normalized ladder ranks in [0, 1]^N; targets are calibration losses.
The kernel is an isotropic RBF with signal variance, shared lengthscale and a
noise term; targets are standardized internally. Because the storage objective
of a candidate is known exactly, EHVI reduces to a one-dimensional Gaussian
integral over the loss axis, evaluated in closed form piece by piece over the
front's staircase.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import ndtr

from .errors import NumericError

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _npdf(x):
    return np.exp(-0.5 * x * x) / _SQRT_2PI


@dataclass
class GPModel:
    train_X: np.ndarray
    train_y: np.ndarray          # raw targets
    sigma_f: float
    lengthscale: float
    sigma_n: float
    y_mean: float
    y_std: float
    chol: tuple                  # cho_factor of K + sigma_n^2 I
    alpha: np.ndarray            # (K + sigma_n^2 I)^-1 y_standardized

    def hyperparams(self) -> dict:
        return {"sigma_f": self.sigma_f, "lengthscale": self.lengthscale, "sigma_n": self.sigma_n}


def _sqdist(A, B):
    return np.sum(A**2, axis=1)[:, None] + np.sum(B**2, axis=1)[None, :] - 2.0 * A @ B.T


def _kernel(A, B, sigma_f, ell):
    return sigma_f**2 * np.exp(-0.5 * np.maximum(_sqdist(A, B), 0.0) / ell**2)


def _chol_with_jitter(K):
    jitter = 0.0
    while True:
        try:
            return cho_factor(K + jitter * np.eye(len(K)), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter = 1e-8 if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-4:
                raise NumericError("kernel matrix not positive definite within jitter cap")


def _log_marginal_and_grad(D2, y, log_params, fixed_noise):
    """Log marginal likelihood and its gradient w.r.t. log(sigma_f, ell, sigma_n)."""
    sf, ell, sn = np.exp(log_params)
    if fixed_noise is not None:
        sn = fixed_noise
    m = len(y)
    Kf = sf**2 * np.exp(-0.5 * D2 / ell**2)
    K = Kf + sn**2 * np.eye(m)
    try:
        c, low = cho_factor(K, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf, np.zeros(3)
    alpha = cho_solve((c, low), y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(c))) - 0.5 * m * np.log(2.0 * np.pi)

    Kinv = cho_solve((c, low), np.eye(m))
    A = np.outer(alpha, alpha) - Kinv
    dK_dlogsf = 2.0 * Kf
    dK_dlogell = Kf * (D2 / ell**2)
    dK_dlogsn = 2.0 * sn**2 * np.eye(m)
    grad = np.array([
        0.5 * np.sum(A * dK_dlogsf),
        0.5 * np.sum(A * dK_dlogell),
        0.0 if fixed_noise is not None else 0.5 * np.sum(A * dK_dlogsn),
    ])
    return lml, grad


_LOG_BOUNDS = (np.log([1e-3, 1e-3, 1e-6]), np.log([1e2, 1e2, 1e1]))
_STARTS = [
    (1.0, 0.3, 0.1),
    (1.0, 1.0, 0.01),
    (0.5, 0.1, 0.1),
    (2.0, 2.0, 0.1),
    (1.0, 0.05, 0.3),
]


def gp_fit(X, y, fixed_noise: float | None = None, hyperparams: dict | None = None,
           n_starts: int = 5, n_steps: int = 100) -> GPModel:
    """Fit the GP; hyperparameters chosen by multi-start gradient ascent on the
    log marginal likelihood unless given explicitly.

    `fixed_noise` pins sigma_n (in standardized-target units) while still
    optimizing the other two; `hyperparams` skips optimization entirely.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if len(X) < 1 or len(X) != len(y):
        raise ValueError("need at least one (x, y) pair with matching lengths")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")

    y_mean = float(np.mean(y))
    y_std = float(np.std(y))
    if y_std == 0.0:
        y_std = 1.0
    ys = (y - y_mean) / y_std

    if hyperparams is not None:
        sf, ell, sn = hyperparams["sigma_f"], hyperparams["lengthscale"], hyperparams["sigma_n"]
    else:
        D2 = np.maximum(_sqdist(X, X), 0.0)
        best_lml, best = -np.inf, None
        for sf0, ell0, sn0 in _STARTS[:n_starts]:
            lp = np.log([sf0, ell0, sn0 if fixed_noise is None else fixed_noise])
            m1 = np.zeros(3)
            v1 = np.zeros(3)
            for t in range(1, n_steps + 1):
                lml, grad = _log_marginal_and_grad(D2, ys, lp, fixed_noise)
                if not np.isfinite(lml):
                    break
                m1 = 0.9 * m1 + 0.1 * grad
                v1 = 0.999 * v1 + 0.001 * grad**2
                lp = lp + 0.05 * (m1 / (1 - 0.9**t)) / (np.sqrt(v1 / (1 - 0.999**t)) + 1e-8)
                lp = np.clip(lp, *_LOG_BOUNDS)
            lml, _ = _log_marginal_and_grad(D2, ys, lp, fixed_noise)
            if lml > best_lml:
                best_lml, best = lml, np.exp(lp)
        if best is None:
            raise NumericError("GP hyperparameter search failed at every start")
        sf, ell, sn = best
        if fixed_noise is not None:
            sn = fixed_noise

    K = _kernel(X, X, sf, ell) + sn**2 * np.eye(len(X))
    chol, _ = _chol_with_jitter(K)
    alpha = cho_solve(chol, ys)
    return GPModel(train_X=X, train_y=y, sigma_f=float(sf), lengthscale=float(ell),
                   sigma_n=float(sn), y_mean=y_mean, y_std=y_std, chol=chol, alpha=alpha)


def gp_predict(model: GPModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at one point or a batch of points.

    Returns scalars for a single point, arrays for a batch. Variance is clamped
    at zero from below.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    Xq = np.atleast_2d(x)
    Ks = _kernel(Xq, model.train_X, model.sigma_f, model.lengthscale)
    mu = Ks @ model.alpha * model.y_std + model.y_mean
    v = cho_solve(model.chol, Ks.T)
    var = (model.sigma_f**2 - np.sum(Ks * v.T, axis=1)) * model.y_std**2
    var = np.where(var > 0.0, var, 0.0)
    if single:
        return float(mu[0]), float(var[0])
    return mu, var


def ehvi(mu: float, var: float, f2_known: float, front, ref=(1.0, 1.0)) -> float:
    """Exact expected hypervolume improvement of a candidate with Gaussian loss.

    The candidate's storage coordinate f2_known is deterministic; its loss is
    Normal(mu, var). `front` is the current non-dominated set (minimization,
    normalized). The marginal dominated area as a function of the loss value z
    is piecewise linear, so the expectation is a sum of Gaussian partial
    moments; returns 0 when the candidate cannot improve the front.
    """
    if var < 0.0:
        raise ValueError("variance must be non-negative")
    r1, r2 = ref
    c = f2_known
    if c >= r2:
        return 0.0

    pts = sorted((float(p[0]), float(p[1])) for p in front)
    # walk the staircase: segment heights of the un-dominated strip above f2 = c
    breaks: list[float] = []       # x positions where the height changes
    heights: list[float] = []      # height on (prev_break, break]
    h = r2 - c
    b_cap = r1
    for x_k, y_k in pts:
        if x_k >= b_cap:
            break
        nh = max(0.0, min(y_k, r2) - c)
        if nh >= h:
            continue
        breaks.append(x_k)
        heights.append(h)
        h = nh
        if h == 0.0:
            b_cap = x_k
            break
    if h > 0.0:
        breaks.append(b_cap)
        heights.append(h)
    if not breaks:
        return 0.0

    # accumulated area A(z) at each breakpoint, right to left; A(breaks[-1]) = 0
    area_at = np.zeros(len(breaks))
    for j in range(len(breaks) - 2, -1, -1):
        area_at[j] = area_at[j + 1] + heights[j + 1] * (breaks[j + 1] - breaks[j])

    if var == 0.0:
        z = mu
        if z >= breaks[-1]:
            return 0.0
        j = int(np.searchsorted(breaks, z, side="left"))
        return float(area_at[j] + heights[j] * (breaks[j] - z))

    sigma = np.sqrt(var)
    total = 0.0
    prev_cdf, prev_pdf = 0.0, 0.0
    for j, a in enumerate(breaks):
        beta = (a - mu) / sigma
        cdf, pdf = ndtr(beta), _npdf(beta)
        dcdf = cdf - prev_cdf
        # E[(a - z) 1{prev < z <= a}] = (a - mu) dcdf + sigma (pdf - prev_pdf)
        total += area_at[j] * dcdf + heights[j] * ((a - mu) * dcdf + sigma * (pdf - prev_pdf))
        prev_cdf, prev_pdf = cdf, pdf
    return float(max(total, 0.0))
