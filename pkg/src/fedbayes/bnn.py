"""Fully-connected Bayesian neural network and its variational objectives.

The network is an MLP with ReLU hidden activations and a linear output
layer. Weights are flattened into a single coordinate vector in a fixed
order (layer by layer, weight matrix row-major, then bias); that order is
part of the wire contract so server-side averaging stays aligned.

Gradients of the stochastic objectives are computed exactly by
backpropagation through the reparameterization theta = mu + softplus(rho)*g,
with closed-form gradients for the KL regularizers. The sparse objective
gates each coordinate through a Gumbel-softmax relaxation; the forward pass
uses the hard 0/1 gate while the backward pass for the inclusion
probabilities flows through the relaxation (straight-through). A fully
differentiable soft-gate mode is available for finite-difference
verification.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp, softmax

from . import rng
from .variational import (
    LAMBDA_EPS,
    NoiseDraw,
    SparseVariationalParams,
    VariationalParams,
    clamp_lambda,
    kl_bernoulli_gaussian_grads,
    kl_bernoulli_gaussian_upper,
    kl_gaussian,
    kl_gaussian_grads,
)

ACTIVATIONS = ("relu",)
TASKS = ("classification", "regression")
KINDS = ("pfedbayes", "sfedbayes")
TARGETS = ("personal", "localized_global")
GATES = ("hard", "soft")

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class NetworkShape:
    """Layer widths plus task; shared by every party in a federation.

    layer_widths is [r_0, r_1, ..., r_{L+1}] with L >= 1 hidden layers.
    For classification the last width is the number of classes; for
    regression noise_sigma is the observation noise standard deviation.
    """

    layer_widths: tuple[int, ...]
    activation: str = "relu"
    task: str = "classification"
    noise_sigma: float = 1.0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ValueError(
                f"need at least one hidden layer, got widths {widths}"
            )
        if any(w < 1 for w in widths):
            raise ValueError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation: {self.activation!r}")
        if self.task not in TASKS:
            raise ValueError(f"unsupported task: {self.task!r}")
        if self.task == "regression" and self.noise_sigma <= 0.0:
            raise ValueError(f"noise_sigma must be positive, got {self.noise_sigma}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def num_classes(self) -> int:
        if self.task != "classification":
            raise ValueError("num_classes is defined only for classification")
        return self.layer_widths[-1]

    @property
    def param_count(self) -> int:
        widths = self.layer_widths
        return sum(widths[j] * widths[j + 1] + widths[j + 1] for j in range(self.num_layers))


@dataclass(frozen=True)
class Batch:
    """A minibatch of inputs and targets.

    targets holds class indices (classification) or a b x r_out real matrix
    (regression).
    """

    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim != 2:
            raise ValueError(f"inputs must be 2-D, got shape {x.shape}")
        object.__setattr__(self, "inputs", x)
        y = np.asarray(self.targets)
        if y.ndim == 1:
            y = y.astype(np.int64)
        else:
            y = y.astype(np.float64)
        if y.shape[0] != x.shape[0]:
            raise ValueError(
                f"targets rows {y.shape[0]} != inputs rows {x.shape[0]}"
            )
        object.__setattr__(self, "targets", y)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class Gradient:
    """Flat gradient carrier aligned with the parameter flattening order."""

    d_mu: np.ndarray
    d_rho: np.ndarray
    d_lambda: np.ndarray | None = None

    def __post_init__(self):
        for name in ("d_mu", "d_rho", "d_lambda"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, arr)


def unpack_params(shape: NetworkShape, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat coordinate vector into per-layer (W, b) views.

    W_j has shape (r_{j-1}, r_j) and is read row-major, followed by b_j.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (shape.param_count,):
        raise ValueError(
            f"parameter vector has {theta.size} coordinates, shape needs {shape.param_count}"
        )
    widths = shape.layer_widths
    layers = []
    pos = 0
    for j in range(shape.num_layers):
        fan_in, fan_out = widths[j], widths[j + 1]
        w = theta[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = theta[pos : pos + fan_out]
        pos += fan_out
        layers.append((w, b))
    return layers


def _check_inputs(shape: NetworkShape, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != shape.layer_widths[0]:
        raise ValueError(
            f"inputs must have shape (batch, {shape.layer_widths[0]}), got {x.shape}"
        )
    return x


def forward(shape: NetworkShape, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the network at weights theta; ReLU between layers, linear head."""
    x = _check_inputs(shape, x)
    h = x
    last = shape.num_layers - 1
    for j, (w, b) in enumerate(unpack_params(shape, theta)):
        z = h @ w + b
        h = z if j == last else np.maximum(z, 0.0)
    return h


def _forward_cached(shape, theta, x):
    """Forward pass retaining pre-activations for backpropagation."""
    layers = unpack_params(shape, theta)
    last = len(layers) - 1
    h = x
    inputs, preacts = [], []
    for j, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        h = z if j == last else np.maximum(z, 0.0)
    return h, layers, inputs, preacts


def backprop_theta(
    shape: NetworkShape, theta: np.ndarray, x: np.ndarray, d_out: np.ndarray
) -> np.ndarray:
    """Gradient of sum(outputs * d_out) with respect to the flat weights."""
    x = _check_inputs(shape, x)
    _, layers, inputs, preacts = _forward_cached(shape, theta, x)
    d_z = np.asarray(d_out, dtype=np.float64)
    grads: list[np.ndarray] = [None] * len(layers)
    for j in range(len(layers) - 1, -1, -1):
        w, _ = layers[j]
        d_w = inputs[j].T @ d_z
        d_b = d_z.sum(axis=0)
        grads[j] = np.concatenate([d_w.ravel(), d_b])
        if j > 0:
            d_h = d_z @ w.T
            d_z = d_h * (preacts[j - 1] > 0.0)
    return np.concatenate(grads)


def log_likelihood(shape: NetworkShape, outputs: np.ndarray, batch: Batch) -> float:
    """Total log-likelihood of the batch targets given network outputs.

    Regression uses the Gaussian noise model with std noise_sigma;
    classification uses the categorical log-softmax, numerically stabilized.
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.shape != (batch.size, shape.layer_widths[-1]):
        raise ValueError(
            f"outputs shape {outputs.shape} != ({batch.size}, {shape.layer_widths[-1]})"
        )
    if shape.task == "regression":
        s2 = shape.noise_sigma**2
        resid = batch.targets - outputs
        r_out = shape.layer_widths[-1]
        return float(
            -np.sum(resid**2) / (2.0 * s2)
            - batch.size * 0.5 * r_out * (LOG_2PI + np.log(s2))
        )
    _check_class_targets(shape, batch)
    lse = logsumexp(outputs, axis=1)
    picked = outputs[np.arange(batch.size), batch.targets]
    return float(np.sum(picked - lse))


def _check_class_targets(shape: NetworkShape, batch: Batch) -> None:
    t = batch.targets
    if t.ndim != 1:
        raise ValueError("classification targets must be 1-D class indices")
    if t.size and (t.min() < 0 or t.max() >= shape.num_classes):
        raise ValueError(
            f"class indices must lie in [0, {shape.num_classes}), got"
            f" [{t.min()}, {t.max()}]"
        )


def d_log_likelihood(shape: NetworkShape, outputs: np.ndarray, batch: Batch) -> np.ndarray:
    """Gradient of log_likelihood with respect to the network outputs."""
    if shape.task == "regression":
        return (batch.targets - outputs) / shape.noise_sigma**2
    _check_class_targets(shape, batch)
    probs = softmax(outputs, axis=1)
    grad = -probs
    grad[np.arange(batch.size), batch.targets] += 1.0
    return grad


def _check_noise(noise: list[NoiseDraw], a: int, size: int, need_u: bool) -> None:
    if a < 1:
        raise ValueError(f"Monte Carlo sample size a must be >= 1, got {a}")
    if len(noise) != a:
        raise ValueError(f"got {len(noise)} noise draws, expected a = {a}")
    for nd in noise:
        if nd.g.size != size:
            raise ValueError(f"noise length {nd.g.size} != parameter count {size}")
        if need_u:
            if nd.u is None:
                raise ValueError("sparse objective needs uniform draws in every NoiseDraw")
            if np.any(nd.u <= 0.0) or np.any(nd.u >= 1.0):
                raise ValueError("uniform draws must lie strictly inside (0, 1)")


def _check_scales(n: int, batch: Batch, zeta: float) -> None:
    if n < batch.size:
        raise ValueError(f"dataset size n = {n} smaller than minibatch b = {batch.size}")
    if zeta < 1.0:
        raise ValueError(f"zeta must be >= 1, got {zeta}")


def _mc_likelihood_term(
    shape: NetworkShape,
    params,
    batch: Batch,
    n: int,
    a: int,
    noise: list[NoiseDraw],
    tau: float | None,
    gate: str,
    want_grad: bool,
):
    """Monte Carlo likelihood term of the client objective and its gradients.

    Returns (value, d_mu, d_rho, d_lam); gradient slots are None when
    want_grad is false, and d_lam is None for dense parameters.
    """
    sparse = isinstance(params, SparseVariationalParams)
    scale = -(n / batch.size) / a
    mu = params.mu
    sigma = params.sigma
    if sparse:
        if gate not in GATES:
            raise ValueError(f"unknown gate mode: {gate!r}")
        if tau is None or tau <= 0.0:
            raise ValueError(f"tau must be positive, got {tau}")
        lam_c = clamp_lambda(params.lam)
        logit_lam = np.log(lam_c) - np.log1p(-lam_c)
        # Clamp-saturated coordinates have zero derivative through the clamp.
        interior = (params.lam > LAMBDA_EPS) & (params.lam < 1.0 - LAMBDA_EPS)

    value = 0.0
    d_mu = np.zeros_like(mu) if want_grad else None
    d_rho = np.zeros_like(mu) if want_grad else None
    d_lam = np.zeros_like(mu) if want_grad and sparse else None
    sig_rho = expit(params.rho) if want_grad else None

    for draw in noise:
        slab = mu + sigma * draw.g
        if sparse:
            g_soft = expit((logit_lam + np.log(draw.u) - np.log1p(-draw.u)) / tau)
            gate_val = (g_soft > 0.5).astype(np.float64) if gate == "hard" else g_soft
            theta = gate_val * slab
        else:
            theta = slab
        outputs, layers, inputs, preacts = _forward_cached(shape, theta, batch.inputs)
        value += scale * log_likelihood(shape, outputs, batch)
        if not want_grad:
            continue
        d_out = scale * d_log_likelihood(shape, outputs, batch)
        d_theta = _backprop_from_cache(layers, inputs, preacts, d_out)
        if sparse:
            d_mu += d_theta * gate_val
            d_rho += d_theta * gate_val * draw.g * sig_rho
            d_gate = g_soft * (1.0 - g_soft) / (tau * lam_c * (1.0 - lam_c))
            d_lam += d_theta * slab * d_gate * interior
        else:
            d_mu += d_theta
            d_rho += d_theta * draw.g * sig_rho
    return value, d_mu, d_rho, d_lam


def _backprop_from_cache(layers, inputs, preacts, d_out):
    d_z = d_out
    grads: list[np.ndarray] = [None] * len(layers)
    for j in range(len(layers) - 1, -1, -1):
        w, _ = layers[j]
        grads[j] = np.concatenate([(inputs[j].T @ d_z).ravel(), d_z.sum(axis=0)])
        if j > 0:
            d_z = (d_z @ w.T) * (preacts[j - 1] > 0.0)
    return np.concatenate(grads)


def objective_pfedbayes(
    shape: NetworkShape,
    v: VariationalParams,
    w: VariationalParams,
    batch: Batch,
    n: int,
    a: int,
    zeta: float,
    noise: list[NoiseDraw],
) -> float:
    """Stochastic personal objective: scaled Monte Carlo negative
    log-likelihood plus zeta times the Gaussian KL to the localized global
    parameters."""
    _check_scales(n, batch, zeta)
    _check_noise(noise, a, v.size, need_u=False)
    nll, _, _, _ = _mc_likelihood_term(shape, v, batch, n, a, noise, None, "hard", False)
    return nll + zeta * kl_gaussian(v, w)


def objective_sfedbayes(
    shape: NetworkShape,
    v: SparseVariationalParams,
    w: SparseVariationalParams,
    batch: Batch,
    n: int,
    a: int,
    zeta: float,
    tau: float,
    noise: list[NoiseDraw],
    gate: str = "hard",
) -> float:
    """Sparse personal objective: gated Monte Carlo likelihood term plus
    zeta times the Bernoulli-Gaussian KL upper bound.

    gate="hard" thresholds the relaxed inclusion variables at 0.5 (training
    behavior); gate="soft" keeps the relaxation in the forward pass, making
    the value differentiable in lambda for finite-difference checks.
    """
    _check_scales(n, batch, zeta)
    _check_noise(noise, a, v.size, need_u=True)
    nll, _, _, _ = _mc_likelihood_term(shape, v, batch, n, a, noise, tau, gate, False)
    return nll + zeta * kl_bernoulli_gaussian_upper(v, w)


def grad_objective(
    kind: str,
    target: str,
    shape: NetworkShape,
    v,
    w,
    batch: Batch,
    n: int,
    a: int,
    zeta: float,
    tau: float | None,
    noise: list[NoiseDraw],
    gate: str = "hard",
) -> Gradient:
    """Exact gradient of the selected objective for the selected side.

    target="personal" differentiates the full stochastic objective with
    respect to v (the other side held fixed); target="localized_global"
    differentiates KL(v || w) with respect to w, which carries no
    likelihood dependence. Sparse lambda gradients follow the
    straight-through rule: hard gate in the value, relaxed gate in the
    backward path (soft mode uses the relaxed gate in both).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown objective kind: {kind!r}")
    if target not in TARGETS:
        raise ValueError(f"unknown gradient target: {target!r}")
    sparse = kind == "sfedbayes"
    if sparse and not isinstance(v, SparseVariationalParams):
        raise ValueError("sfedbayes gradients need SparseVariationalParams")
    if not sparse and isinstance(v, SparseVariationalParams):
        raise ValueError("pfedbayes gradients need dense VariationalParams")
    _check_scales(n, batch, zeta)

    if target == "localized_global":
        if sparse:
            _, _, _, d_mu_w, d_rho_w, d_lam_w = kl_bernoulli_gaussian_grads(v, w)
            return Gradient(d_mu_w, d_rho_w, d_lam_w)
        d_mu_w, d_rho_w = kl_gaussian_grads(v, w)[2:]
        return Gradient(d_mu_w, d_rho_w)

    _check_noise(noise, a, v.size, need_u=sparse)
    if sparse:
        _, d_mu, d_rho, d_lam = _mc_likelihood_term(
            shape, v, batch, n, a, noise, tau, gate, True
        )
        d_mu_q, d_rho_q, d_lam_q = kl_bernoulli_gaussian_grads(v, w)[:3]
        return Gradient(
            d_mu + zeta * d_mu_q, d_rho + zeta * d_rho_q, d_lam + zeta * d_lam_q
        )
    _, d_mu, d_rho, _ = _mc_likelihood_term(shape, v, batch, n, a, noise, None, "hard", True)
    d_mu_q, d_rho_q = kl_gaussian_grads(v, w)[:2]
    return Gradient(d_mu + zeta * d_mu_q, d_rho + zeta * d_rho_q)


def finite_diff_grad(objective, point: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function of one flat vector.

    The caller freezes all other inputs (noise included) inside the closure
    so both evaluations see identical randomness.
    """
    if h <= 0.0:
        raise ValueError(f"step size h must be positive, got {h}")
    point = np.asarray(point, dtype=np.float64)
    grad = np.empty_like(point)
    for m in range(point.size):
        bumped = point.copy()
        bumped[m] = point[m] + h
        up = objective(bumped)
        bumped[m] = point[m] - h
        down = objective(bumped)
        grad[m] = (up - down) / (2.0 * h)
    return grad


def predictive(
    v,
    shape: NetworkShape,
    x: np.ndarray,
    n_samples: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo posterior predictive for classification.

    Averages softmax outputs over n_samples weight draws and returns the
    averaged per-row distribution together with its entropy in nats, the
    per-input uncertainty score.
    """
    if shape.task != "classification":
        raise ValueError(f"predictive is defined for classification, not {shape.task!r}")
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    x = _check_inputs(shape, x)
    sparse = isinstance(v, SparseVariationalParams)
    gen = rng.stream(seed, rng.PREDICT)
    mu, sigma = v.mu, v.sigma
    if sparse:
        lam_c = clamp_lambda(v.lam)
        logit_lam = np.log(lam_c) - np.log1p(-lam_c)
    probs = np.zeros((x.shape[0], shape.num_classes))
    for _ in range(n_samples):
        g = gen.standard_normal(v.size)
        theta = mu + sigma * g
        if sparse:
            u = np.clip(gen.random(v.size), 1e-12, 1.0 - 1e-12)
            g_soft = expit((logit_lam + np.log(u) - np.log1p(-u)) / 0.5)
            theta = theta * (g_soft > 0.5)
        probs += softmax(forward(shape, theta, x), axis=1)
    probs /= n_samples
    plogp = np.where(probs > 0.0, probs * np.log(np.clip(probs, 1e-300, None)), 0.0)
    entropy = -plogp.sum(axis=1)
    return probs, entropy


def init_variational(shape: NetworkShape, rho_init: float, gen: np.random.Generator) -> VariationalParams:
    """Fresh dense variational parameters: per-layer uniform mean init with
    bound 1/sqrt(fan_in), constant rho."""
    return VariationalParams(_init_mu(shape, gen), np.full(shape.param_count, float(rho_init)))


def init_sparse(
    shape: NetworkShape,
    rho_init: float,
    lambda_init: float,
    gen: np.random.Generator,
) -> SparseVariationalParams:
    """Fresh sparse variational parameters with constant inclusion probability."""
    base = init_variational(shape, rho_init, gen)
    lam = clamp_lambda(np.full(shape.param_count, float(lambda_init)))
    return SparseVariationalParams(base, lam)


def init_point(shape: NetworkShape, gen: np.random.Generator) -> np.ndarray:
    """Fresh deterministic weight vector with the same mean init scheme."""
    return _init_mu(shape, gen)


def _init_mu(shape: NetworkShape, gen: np.random.Generator) -> np.ndarray:
    widths = shape.layer_widths
    parts = []
    for j in range(shape.num_layers):
        fan_in, fan_out = widths[j], widths[j + 1]
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(gen.uniform(-bound, bound, fan_in * fan_out))
        parts.append(gen.uniform(-bound, bound, fan_out))
    return np.concatenate(parts)
