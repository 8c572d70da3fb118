"""Variational distribution parameterizations and closed-form divergences.

Each network weight gets an independent Gaussian posterior N(mu, sigma^2)
with sigma = softplus(rho), so the unconstrained pair (mu, rho) is the
trainable object. The sparse variant gates every coordinate with a Bernoulli
inclusion variable of probability lambda, giving a Bernoulli-Gaussian
(spike-and-slab) distribution per coordinate.

All operations are pure functions; parameter objects are treated as
immutable values and never mutated in place.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import rng

# Inclusion probabilities are clamped to this open interval before any
# logit or KL evaluation; the Bernoulli KL diverges at the boundary.
LAMBDA_EPS = 1e-6

_BIG = 30.0  # switch point for softplus/softplus-inverse asymptotic branches


def softplus(x):
    """log(1 + exp(x)), overflow-safe, strictly positive for finite input."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return out if out.ndim else float(out)


def softplus_inv(s):
    """Inverse of softplus: log(exp(s) - 1) for s > 0.

    Uses expm1 for small s and the asymptote s + log(1 - exp(-s)) above
    s = 30 where exp(s) would overflow.
    """
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise ValueError("softplus_inv requires strictly positive input")
    small = np.log(np.expm1(np.minimum(s, _BIG)))
    big = s + np.log1p(-np.exp(-s))
    out = np.where(s > _BIG, big, small)
    return out if out.ndim else float(out)


def log_softplus(x):
    """log(softplus(x)), stable for very negative x where softplus(x) ~ exp(x)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x < -_BIG, x, np.log(softplus(np.maximum(x, -_BIG))))
    return out if out.ndim else float(out)


def clamp_lambda(lam, eps: float = LAMBDA_EPS) -> np.ndarray:
    """Clamp inclusion probabilities into the open interval [eps, 1-eps]."""
    return np.clip(np.asarray(lam, dtype=np.float64), eps, 1.0 - eps)


def _as_vector(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class VariationalParams:
    """Mean-field Gaussian parameters, one (mu, rho) pair per coordinate."""

    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu", _as_vector(self.mu, "mu"))
        object.__setattr__(self, "rho", _as_vector(self.rho, "rho"))
        if self.mu.shape != self.rho.shape:
            raise ValueError(
                f"mu and rho length mismatch: {self.mu.shape} vs {self.rho.shape}"
            )

    @property
    def size(self) -> int:
        return self.mu.size

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)


@dataclass(frozen=True)
class SparseVariationalParams:
    """Gaussian parameters plus a per-coordinate inclusion probability.

    The inclusion field is called ``lam`` because ``lambda`` is reserved in
    Python; it is kept strictly inside (0, 1) by clamping at construction.
    """

    base: VariationalParams
    lam: np.ndarray

    def __post_init__(self):
        lam = _as_vector(self.lam, "lam")
        if lam.shape != self.base.mu.shape:
            raise ValueError(
                f"lam length mismatch: {lam.shape} vs {self.base.mu.shape}"
            )
        if np.any(lam <= 0.0) or np.any(lam >= 1.0):
            raise ValueError("lam must lie strictly inside (0, 1); clamp upstream")
        object.__setattr__(self, "lam", lam)

    @property
    def size(self) -> int:
        return self.base.size

    @property
    def mu(self) -> np.ndarray:
        return self.base.mu

    @property
    def rho(self) -> np.ndarray:
        return self.base.rho

    @property
    def sigma(self) -> np.ndarray:
        return self.base.sigma


@dataclass(frozen=True)
class NoiseDraw:
    """External noise for one Monte Carlo sample.

    g holds standard-normal draws, one per coordinate; u holds uniform (0,1)
    draws and is present only when the Gumbel-softmax relaxation needs them.
    """

    g: np.ndarray
    u: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "g", _as_vector(self.g, "g"))
        if self.u is not None:
            u = _as_vector(self.u, "u")
            if u.shape != self.g.shape:
                raise ValueError(f"u length mismatch: {u.shape} vs {self.g.shape}")
            object.__setattr__(self, "u", u)


def _check_same_size(a, b, what: str) -> None:
    if a.size != b.size:
        raise ValueError(f"{what}: length mismatch {a.size} vs {b.size}")


def sample_gaussian(v: VariationalParams, noise: NoiseDraw) -> np.ndarray:
    """Reparameterized draw: theta_m = mu_m + softplus(rho_m) * g_m."""
    if noise.g.size != v.size:
        raise ValueError(f"noise length {noise.g.size} != parameter count {v.size}")
    return v.mu + v.sigma * noise.g


def sample_spike_slab(
    v: SparseVariationalParams, gamma: np.ndarray, noise: NoiseDraw
) -> np.ndarray:
    """Gated draw: theta_m = gamma_m * (mu_m + softplus(rho_m) * g_m)."""
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.size != v.size or noise.g.size != v.size:
        raise ValueError(
            f"length mismatch: gamma {gamma.size}, noise {noise.g.size}, params {v.size}"
        )
    return gamma * (v.base.mu + v.base.sigma * noise.g)


def gumbel_softmax(lam, tau: float, u):
    """Continuous relaxation of a Bernoulli(lam) draw at temperature tau.

    eta = logit(lam) + logit(u); returns sigmoid(eta / tau) in (0, 1),
    differentiable in lam. Low temperatures concentrate the output near
    {0, 1}, recovering the hard Bernoulli in distribution.
    """
    lam = np.asarray(lam, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if np.any(lam <= 0.0) or np.any(lam >= 1.0):
        raise ValueError("lam must lie strictly inside (0, 1)")
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("u must lie strictly inside (0, 1)")
    eta = np.log(lam) - np.log1p(-lam) + np.log(u) - np.log1p(-u)
    out = expit(eta / tau)
    return out if out.ndim else float(out)


def _kl_gaussian_terms(q: VariationalParams, w: VariationalParams) -> np.ndarray:
    """Per-coordinate Gaussian KL: log(sw^2/sq^2) + (sq^2 + dmu^2)/sw^2 - 1."""
    sq = q.sigma
    sw = w.sigma
    dmu = q.mu - w.mu
    log_ratio = 2.0 * (log_softplus(w.rho) - log_softplus(q.rho))
    return log_ratio + (sq**2 + dmu**2) / sw**2 - 1.0


def kl_gaussian(q: VariationalParams, w: VariationalParams) -> float:
    """Closed-form KL(q || w) between factorized Gaussians, in nats."""
    _check_same_size(q.mu, w.mu, "kl_gaussian")
    return float(0.5 * np.sum(_kl_gaussian_terms(q, w)))


def kl_gaussian_grads(
    q: VariationalParams, w: VariationalParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of kl_gaussian: (d_mu_q, d_rho_q, d_mu_w, d_rho_w)."""
    _check_same_size(q.mu, w.mu, "kl_gaussian_grads")
    sq = q.sigma
    sw = w.sigma
    dmu = q.mu - w.mu
    d_mu_q = dmu / sw**2
    d_rho_q = (-1.0 / sq + sq / sw**2) * expit(q.rho)
    d_mu_w = -d_mu_q
    d_rho_w = (1.0 / sw - (sq**2 + dmu**2) / sw**3) * expit(w.rho)
    return d_mu_q, d_rho_q, d_mu_w, d_rho_w


def _check_open_unit(lam: np.ndarray, name: str) -> None:
    if np.any(lam <= 0.0) or np.any(lam >= 1.0):
        raise ValueError(f"{name} must lie strictly inside (0, 1); clamp upstream")


def kl_bernoulli_gaussian_upper(
    q: SparseVariationalParams, w: SparseVariationalParams
) -> float:
    """Upper bound on KL between Bernoulli-Gaussian distributions.

    Sum of the exact Bernoulli KL on the gates plus the Gaussian KL of each
    slab weighted by the posterior inclusion probability.
    """
    _check_same_size(q.lam, w.lam, "kl_bernoulli_gaussian_upper")
    _check_open_unit(q.lam, "q.lam")
    _check_open_unit(w.lam, "w.lam")
    lq, lw = q.lam, w.lam
    bern = lq * (np.log(lq) - np.log(lw)) + (1.0 - lq) * (
        np.log1p(-lq) - np.log1p(-lw)
    )
    gauss = 0.5 * lq * _kl_gaussian_terms(q.base, w.base)
    return float(np.sum(bern) + np.sum(gauss))


def kl_bernoulli_gaussian_grads(
    q: SparseVariationalParams, w: SparseVariationalParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of the KL upper bound.

    Returns (d_mu_q, d_rho_q, d_lam_q, d_mu_w, d_rho_w, d_lam_w).
    """
    _check_same_size(q.lam, w.lam, "kl_bernoulli_gaussian_grads")
    _check_open_unit(q.lam, "q.lam")
    _check_open_unit(w.lam, "w.lam")
    lq, lw = q.lam, w.lam
    d_mu_q, d_rho_q, d_mu_w, d_rho_w = kl_gaussian_grads(q.base, w.base)
    gauss_terms = _kl_gaussian_terms(q.base, w.base)
    d_lam_q = (
        np.log(lq) - np.log(lw) - np.log1p(-lq) + np.log1p(-lw) + 0.5 * gauss_terms
    )
    d_lam_w = -lq / lw + (1.0 - lq) / (1.0 - lw)
    return (
        lq * d_mu_q,
        lq * d_rho_q,
        d_lam_q,
        lq * d_mu_w,
        lq * d_rho_w,
        d_lam_w,
    )


def optimal_global(clients: list[VariationalParams]) -> VariationalParams:
    """Closed-form minimizer of the average KL(q_i || w) over clients.

    mu_w is the coordinate-wise mean of the client means; sigma_w^2 is the
    mean of sigma_i^2 + (mu_i - mu_w)^2. This is the optimality oracle for
    the server objective, not the aggregation rule used by the round loop.
    """
    if not clients:
        raise ValueError("optimal_global requires a non-empty client list")
    size = clients[0].size
    for c in clients:
        if c.size != size:
            raise ValueError(f"client length mismatch: {c.size} vs {size}")
    mus = np.stack([c.mu for c in clients])
    sig2 = np.stack([c.sigma**2 for c in clients])
    mu_w = mus.mean(axis=0)
    var_w = (sig2 + (mus - mu_w) ** 2).mean(axis=0)
    return VariationalParams(mu=mu_w, rho=softplus_inv(np.sqrt(var_w)))


def mc_kl_estimate(
    q: VariationalParams, w: VariationalParams, n_samples: int, seed: int
) -> float:
    """Monte Carlo estimate of KL(q || w) from n_samples draws of q.

    Averages log q(theta) - log w(theta) over reparameterized draws from a
    counter-based generator, so the estimate is reproducible bit-for-bit for
    a given seed.
    """
    _check_same_size(q.mu, w.mu, "mc_kl_estimate")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    gen = rng.stream(seed)
    sq = q.sigma
    sw = w.sigma
    log_sq = log_softplus(q.rho)
    log_sw = log_softplus(w.rho)
    const = np.sum(log_sw - log_sq)
    total = 0.0
    done = 0
    chunk = max(1, min(n_samples, 1 << 16))
    while done < n_samples:
        m = min(chunk, n_samples - done)
        z = gen.standard_normal((m, q.size))
        theta = q.mu + sq * z
        # log q - log w per draw; the -0.5*log(2*pi) terms cancel.
        vals = const - 0.5 * np.sum(
            z**2 - ((theta - w.mu) / sw) ** 2, axis=1
        )
        total += float(vals.sum())
        done += m
    return total / n_samples
