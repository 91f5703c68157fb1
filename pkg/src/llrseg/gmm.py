"""Diagonal-covariance Gaussian mixtures fitted with Sinkhorn EM.

Mixture weights are held uniform per class and never re-estimated. Every
density evaluation goes through a max-subtracted log-sum-exp so finite
inputs never produce -inf.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateCovariance, InsufficientSamples, InvalidCost

VAR_FLOOR = 1e-6
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GmmHead:
    """Per-class mixture parameters: means, diagonal variances, weights."""

    means: np.ndarray      # [K, C, d]
    variances: np.ndarray  # [K, C, d]
    weights: np.ndarray    # [K, C], each row sums to 1

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        variances = np.asarray(self.variances, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if means.ndim != 3 or means.shape != variances.shape:
            raise ValueError(f"bad GMM shapes {means.shape} vs {variances.shape}")
        if weights.shape != means.shape[:2]:
            raise ValueError(f"weights shape {weights.shape} vs {means.shape[:2]}")
        if np.any(variances < VAR_FLOOR):
            raise DegenerateCovariance(
                f"variance below floor {VAR_FLOOR}: min={variances.min()}"
            )
        if np.max(np.abs(weights.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("per-class mixture weights must sum to 1")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)
        object.__setattr__(self, "weights", weights)

    @property
    def classes(self) -> int:
        return self.means.shape[0]

    @property
    def components(self) -> int:
        return self.means.shape[1]

    @property
    def dim(self) -> int:
        return self.means.shape[2]

    def parameter_count(self) -> int:
        return self.means.size + self.variances.size + self.weights.size


def uniform_weights(classes: int, components: int) -> np.ndarray:
    return np.full((classes, components), 1.0 / components)


def gaussian_log_density(x, mu, var) -> float:
    """log N(x; mu, diag(var)) for a single d-vector."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < VAR_FLOOR):
        raise DegenerateCovariance(f"variance below floor: min={var.min()}")
    d = x.shape[-1]
    z = (x - mu) ** 2 / var
    return float(-0.5 * (d * LOG_2PI + np.log(var).sum() + z.sum()))


def gaussian_log_density_batch(x: np.ndarray, mu, var) -> np.ndarray:
    """Vectorized log N over rows of x [N, d]."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < VAR_FLOOR):
        raise DegenerateCovariance(f"variance below floor: min={var.min()}")
    d = x.shape[1]
    z = ((x - mu) ** 2 / var).sum(axis=1)
    return -0.5 * (d * LOG_2PI + np.log(var).sum() + z)


def component_log_densities(x: np.ndarray, head: GmmHead, k: int) -> np.ndarray:
    """[N, C] matrix of per-component log densities for class k (no weights)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((x.shape[0], head.components))
    for c in range(head.components):
        out[:, c] = gaussian_log_density_batch(x, head.means[k, c], head.variances[k, c])
    return out


def gmm_log_density(x, head: GmmHead, k: int) -> float:
    """log sum_c pi_kc N_c(x) via max-subtracted log-sum-exp."""
    if not 0 <= k < head.classes:
        raise IndexError(f"class {k} out of range [0, {head.classes})")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    comp = component_log_densities(x, head, k)[0] + np.log(head.weights[k])
    return float(logsumexp(comp))


def gmm_log_density_batch(x: np.ndarray, head: GmmHead, k: int) -> np.ndarray:
    comp = component_log_densities(x, head, k) + np.log(head.weights[k])
    return logsumexp(comp, axis=1)


def gmm_all_log_densities(x: np.ndarray, head: GmmHead) -> np.ndarray:
    """[N, K] class log densities for a batch of feature vectors."""
    out = np.empty((x.shape[0], head.classes))
    for k in range(head.classes):
        out[:, k] = gmm_log_density_batch(x, head, k)
    return out


def gmm_all_log_densities_with_grad(x: np.ndarray, head: GmmHead):
    """Class log densities plus a closure for reverse-mode gradients.

    Returns (logdens [N, K], backward) where backward(d_logdens) yields
    (dx [N, d], dmeans [K, C, d], dvars [K, C, d]).
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    kk, cc = head.classes, head.components
    logdens = np.empty((n, kk))
    resp = np.empty((n, kk, cc))
    for k in range(kk):
        comp = component_log_densities(x, head, k) + np.log(head.weights[k])
        m = comp.max(axis=1, keepdims=True)
        e = np.exp(comp - m)
        s = e.sum(axis=1, keepdims=True)
        logdens[:, k] = (m + np.log(s))[:, 0]
        resp[:, k, :] = e / s

    def backward(d_logdens: np.ndarray):
        dx = np.zeros_like(x)
        dmeans = np.zeros_like(head.means)
        dvars = np.zeros_like(head.variances)
        for k in range(kk):
            for c in range(cc):
                coeff = d_logdens[:, k] * resp[:, k, c]  # [N]
                diff = x - head.means[k, c]
                inv = 1.0 / head.variances[k, c]
                g = diff * inv  # d logN / d mu per-coordinate, sign-flipped for x
                dx += coeff[:, None] * (-g)
                dmeans[k, c] = coeff @ g
                dvars[k, c] = coeff @ (0.5 * (diff**2 * inv**2 - inv))
        return dx, dmeans, dvars

    return logdens, backward


# ---------------------------------------------------------------------------
# Sinkhorn assignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SinkhornPlan:
    """Balanced assignment of N features to C components, total mass 1."""

    matrix: np.ndarray  # [N, C], non-negative, sums to 1
    iterations: int
    epsilon: float

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def components(self) -> int:
        return self.matrix.shape[1]

    def marginal_residual(self) -> float:
        """L1 distance of row/column sums from the (1/N, 1/C) marginals."""
        n, c = self.matrix.shape
        row = np.abs(self.matrix.sum(axis=1) - 1.0 / n).sum()
        col = np.abs(self.matrix.sum(axis=0) - 1.0 / c).sum()
        return float(row + col)


def sinkhorn_assign(component_logliks: np.ndarray, epsilon: float, iters: int) -> SinkhornPlan:
    """Entropic balanced assignment from exp(logliks / epsilon).

    Alternating row/column scalings (in the log domain) toward uniform
    marginals 1/N per row and 1/C per column. iters=0 only normalizes the
    total mass.
    """
    ll = np.asarray(component_logliks, dtype=np.float64)
    if ll.ndim != 2:
        raise InvalidCost(f"expected 2-d log-likelihoods, got shape {ll.shape}")
    if not np.isfinite(ll).all():
        raise InvalidCost("non-finite log-likelihood entries")
    n, c = ll.shape
    if n < c or c < 1:
        raise InvalidCost(f"need N >= C >= 1, got N={n}, C={c}")
    if epsilon <= 0:
        raise InvalidCost(f"epsilon must be positive, got {epsilon}")

    log_k = ll / epsilon
    log_a = -np.log(n)  # row marginal
    log_b = -np.log(c)  # column marginal
    u = np.zeros(n)
    v = np.zeros(c)
    for _ in range(iters):
        u = log_a - logsumexp(log_k + v[None, :], axis=1)
        v = log_b - logsumexp(log_k + u[:, None], axis=0)
    log_p = log_k + u[:, None] + v[None, :]
    log_p -= logsumexp(log_p)  # exact unit total mass
    return SinkhornPlan(matrix=np.exp(log_p), iterations=iters, epsilon=float(epsilon))


def em_update(
    head: GmmHead,
    k: int,
    features: np.ndarray,
    plan: SinkhornPlan,
    momentum: float,
    counters: dict | None = None,
) -> GmmHead:
    """One M-step for class k: plan-weighted moments blended by momentum.

    Components with total plan mass below 1e-12 are left unchanged and
    counted under counters["empty_components"]. Weights stay uniform.
    """
    x = np.asarray(features, dtype=np.float64)
    if plan.matrix.shape != (x.shape[0], head.components):
        raise ValueError(
            f"plan shape {plan.matrix.shape} vs ({x.shape[0]}, {head.components})"
        )
    means = head.means.copy()
    variances = head.variances.copy()
    for c in range(head.components):
        mass = plan.matrix[:, c].sum()
        if mass < 1e-12:
            if counters is not None:
                counters["empty_components"] = counters.get("empty_components", 0) + 1
            continue
        w = plan.matrix[:, c] / mass
        mu_new = w @ x
        var_new = w @ (x - mu_new) ** 2
        means[k, c] = momentum * means[k, c] + (1.0 - momentum) * mu_new
        variances[k, c] = momentum * variances[k, c] + (1.0 - momentum) * var_new
    variances = np.maximum(variances, VAR_FLOOR)
    return GmmHead(means=means, variances=variances, weights=head.weights)


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

@dataclass
class GmmFitConfig:
    components: int = 5
    epsilon: float = 0.1
    sinkhorn_iters: int = 10
    em_rounds: int = 20
    momentum: float = 0.99
    seed: int = 0


@dataclass
class GmmFitResult:
    head: GmmHead
    avg_loglik: list  # per EM round, mean over all features
    counters: dict = field(default_factory=dict)


def init_head(features_by_class, components: int, rng: np.random.Generator) -> GmmHead:
    """Seeded init: component means are distinct sampled features, variances
    the per-class diagonal sample variance."""
    kk = len(features_by_class)
    d = np.asarray(features_by_class[0]).shape[1]
    means = np.empty((kk, components, d))
    variances = np.empty((kk, components, d))
    for k, feats in enumerate(features_by_class):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[0] < components:
            raise InsufficientSamples(k)
        idx = rng.choice(feats.shape[0], size=components, replace=False)
        means[k] = feats[idx]
        variances[k] = np.maximum(feats.var(axis=0), VAR_FLOOR)
    return GmmHead(means=means, variances=variances,
                   weights=uniform_weights(kk, components))


def fit_gmm(features_by_class, config: GmmFitConfig) -> GmmFitResult:
    """Sinkhorn-EM fit of one GMM per class. Deterministic for a fixed seed."""
    rng = np.random.default_rng(config.seed)
    head = init_head(features_by_class, config.components, rng)
    counters: dict = {}
    history = []
    for _ in range(config.em_rounds):
        for k, feats in enumerate(features_by_class):
            feats = np.asarray(feats, dtype=np.float64)
            comp_ll = component_log_densities(feats, head, k)
            plan = sinkhorn_assign(comp_ll, config.epsilon, config.sinkhorn_iters)
            head = em_update(head, k, feats, plan, config.momentum, counters)
        total = 0.0
        count = 0
        for k, feats in enumerate(features_by_class):
            ll = gmm_log_density_batch(np.asarray(feats, dtype=np.float64), head, k)
            total += ll.sum()
            count += ll.shape[0]
        history.append(total / count)
    return GmmFitResult(head=head, avg_loglik=history, counters=counters)
