"""Exact Gaussian-process regression and committee combination.

Each node fits an exact GP on its shard; a committee merges the per-node
predictive distributions by multiplying precisions. Four rules are
implemented: product of experts (poe), its generalized weighting (gpoe), and
the prior-corrected variants (bcm, gbcm).

The kernel's ``noise`` field is a *variance*: the fitted matrix is
K + noise_variance * I.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.spatial.distance import cdist

from .data import Partition
from .errors import FactorizationError

COMBINATION_KINDS = ("poe", "gpoe", "bcm", "gbcm")

# Exact interpolation drives the latent variance to zero (or a hair below,
# in floating point); keep predictions valid without disturbing anything
# above 1e-15 relative.
_VAR_FLOOR_REL = 1e-15


@dataclass(frozen=True)
class Kernel:
    """Squared-exponential kernel with a constant prior mean.

    k(x, x') = signal_variance * exp(-||x - x'||^2 / (2 lengthscale^2)),
    so k(x, x) = signal_variance.
    """

    lengthscale: float
    signal_variance: float
    noise_variance: float = 0.0
    mean: float = 0.0

    def __post_init__(self):
        if not (self.lengthscale > 0 and np.isfinite(self.lengthscale)):
            raise ValueError("lengthscale must be > 0")
        if not (self.signal_variance > 0 and np.isfinite(self.signal_variance)):
            raise ValueError("signal_variance must be > 0")
        if not (self.noise_variance >= 0 and np.isfinite(self.noise_variance)):
            raise ValueError("noise_variance must be >= 0")

    def __call__(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        sq = cdist(np.atleast_2d(a), np.atleast_2d(b), "sqeuclidean")
        return self.signal_variance * np.exp(-0.5 * sq / self.lengthscale**2)


@dataclass(frozen=True)
class GPModel:
    """A fitted GP: training data, kernel, and the Cholesky machinery."""

    x: np.ndarray
    y: np.ndarray
    kernel: Kernel
    chol: np.ndarray
    alpha: np.ndarray


@dataclass(frozen=True)
class ExpertPrediction:
    """Predictive mean and latent-function variance at one input."""

    mu: float
    var: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and np.isfinite(self.var) and self.var > 0):
            raise ValueError(f"invalid prediction (mu={self.mu}, var={self.var})")


@dataclass(frozen=True)
class CombinationRule:
    """How to merge expert predictions.

    ``betas`` weight gpoe/gbcm contributions (default 1/M each);
    ``prior_var`` is the sigma_0^2 of the bcm/gbcm prior correction,
    defaulting to the experts' shared signal variance when combined through
    :func:`committee_predict`.
    """

    kind: str
    betas: np.ndarray | None = None
    prior_var: float | None = None

    def __post_init__(self):
        if self.kind not in COMBINATION_KINDS:
            raise ValueError(f"unknown combination rule {self.kind!r}")
        if self.betas is not None:
            b = np.asarray(self.betas, dtype=np.float64)
            if b.ndim != 1 or not np.all(b > 0) or not np.isfinite(b).all():
                raise ValueError("betas must be a 1-D vector of positive reals")
            b = b.copy()
            b.flags.writeable = False
            object.__setattr__(self, "betas", b)
        if self.prior_var is not None and not (
            self.prior_var > 0 and np.isfinite(self.prior_var)
        ):
            raise ValueError("prior_var must be > 0")


def _named_pivot_failure(a: np.ndarray) -> FactorizationError:
    # Rerun the factorization by hand to name the offending pivot; scipy
    # only reports the failing order.
    n = a.shape[0]
    l = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - l[j, :j] @ l[j, :j]
        if d <= 0:
            return FactorizationError(
                f"kernel matrix not positive definite: pivot {d:.6e} at index {j}"
            )
        l[j, j] = np.sqrt(d)
        l[j + 1:, j] = (a[j + 1:, j] - l[j + 1:, :j] @ l[j, :j]) / l[j, j]
    return FactorizationError("kernel matrix not positive definite")


def gp_fit(x: np.ndarray, y: np.ndarray, kernel: Kernel) -> GPModel:
    """Factorize K + noise*I and precompute alpha = (K + noise*I)^-1 (y - mu0).

    One jitter retry (1e-10 * signal_variance on the diagonal) is attempted
    before failing with the smallest offending pivot named.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y disagree on the number of rows")
    if x.shape[0] < 1:
        raise ValueError("need at least one training point")
    k = kernel(x, x) + kernel.noise_variance * np.eye(x.shape[0])
    try:
        c, lower = cho_factor(k, lower=True)
    except np.linalg.LinAlgError:
        jitter = _VAR_FLOOR_REL * 1e5 * kernel.signal_variance  # 1e-10 * s^2
        try:
            c, lower = cho_factor(k + jitter * np.eye(x.shape[0]), lower=True)
        except np.linalg.LinAlgError:
            raise _named_pivot_failure(k) from None
    alpha = cho_solve((c, lower), y - kernel.mean)
    return GPModel(x.copy(), y.copy(), kernel, np.tril(c), alpha)


def gp_predict(model: GPModel, x_star) -> ExpertPrediction:
    """Posterior mean and latent variance at a single input."""
    mu, var = gp_predict_batch(model, np.atleast_2d(np.asarray(x_star, dtype=np.float64)))
    return ExpertPrediction(float(mu[0]), float(var[0]))


def gp_predict_batch(model: GPModel, xs: np.ndarray):
    """Vectorized posterior over rows of ``xs``; returns (mu, var) arrays."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[1] != model.x.shape[1]:
        raise ValueError(
            f"query dim {xs.shape[1]} does not match training dim {model.x.shape[1]}"
        )
    k_star = model.kernel(model.x, xs)
    mu = model.kernel.mean + k_star.T @ model.alpha
    v = solve_triangular(model.chol, k_star, lower=True)
    var = model.kernel.signal_variance - np.einsum("ij,ij->j", v, v)
    floor = model.kernel.signal_variance * _VAR_FLOOR_REL
    return mu, np.maximum(var, floor)


def log_marginal_likelihood(model: GPModel) -> float:
    """Gaussian evidence of the fit, constant term included."""
    r = model.y - model.kernel.mean
    n = r.size
    return float(
        -0.5 * r @ model.alpha
        - np.sum(np.log(np.diag(model.chol)))
        - 0.5 * n * np.log(2.0 * np.pi)
    )


def fit_experts(partition: Partition, kernel_grid) -> tuple[list[GPModel], Kernel]:
    """One GP per shard, sharing the kernel that maximizes the summed evidence.

    Grid points that fail to factorize on any shard are skipped; ties break
    toward smaller lengthscale, then smaller signal variance. Raises when
    every grid point fails.
    """
    kernels = list(kernel_grid)
    if not kernels:
        raise ValueError("empty kernel grid")
    for shard in partition.shards:
        if not shard.has_labels:
            raise ValueError("expert fitting requires labels")
        if shard.n_points < 1:
            raise ValueError("empty shard")
    scored = []
    for kernel in kernels:
        try:
            models = [gp_fit(s.points, s.labels, kernel) for s in partition.shards]
        except FactorizationError:
            continue
        total = sum(log_marginal_likelihood(m) for m in models)
        scored.append((total, kernel, models))
    if not scored:
        raise FactorizationError("every kernel in the grid failed to factorize")
    _, best_kernel, best_models = min(
        scored, key=lambda s: (-s[0], s[1].lengthscale, s[1].signal_variance)
    )
    return best_models, best_kernel


def combine(predictions, rule: CombinationRule) -> ExpertPrediction:
    """Merge expert predictions under a zero prior mean.

    poe:  prec = sum_k prec_k
    gpoe: prec = sum_k beta_k prec_k        (warns when sum beta != 1)
    bcm:  prec = sum_k prec_k + (1 - M) / prior_var
    gbcm: prec = sum_k beta_k prec_k + (1 - sum beta) / prior_var

    and mean = var * sum_k (beta_k) prec_k mu_k in all cases.
    """
    preds = list(predictions)
    if not preds:
        raise ValueError("need at least one prediction")
    m = len(preds)
    prec = np.array([1.0 / p.var for p in preds])
    mus = np.array([p.mu for p in preds])
    if rule.kind in ("gpoe", "gbcm"):
        betas = rule.betas if rule.betas is not None else np.full(m, 1.0 / m)
        if betas.shape != (m,):
            raise ValueError(f"expected {m} betas, got {betas.shape}")
    else:
        betas = np.ones(m)
    if rule.kind == "gpoe" and abs(float(betas.sum()) - 1.0) > 1e-9:
        warnings.warn(
            f"gpoe betas sum to {float(betas.sum()):.6g}, not 1; "
            "the combined variance is uncalibrated",
            stacklevel=2,
        )
    total_prec = float(betas @ prec)
    if rule.kind in ("bcm", "gbcm"):
        if rule.prior_var is None:
            raise ValueError(f"{rule.kind} requires prior_var")
        total_prec += (1.0 - float(betas.sum())) / rule.prior_var
    if not (total_prec > 0 and np.isfinite(total_prec)):
        raise ValueError(f"inconsistent committee precision {total_prec:.6g}")
    var = 1.0 / total_prec
    mu = var * float((betas * prec) @ mus)
    return ExpertPrediction(mu, var)


def committee_predict(models, rule: CombinationRule, x_star) -> ExpertPrediction:
    """Predict with every expert at ``x_star`` and combine.

    Experts must share a kernel. A nonzero prior mean is handled by
    combining the centered predictions and adding the mean back; bcm/gbcm
    default ``prior_var`` to the shared signal variance (the experts' common
    prior), which is what makes the committee fall back to the prior far
    from all data.
    """
    models = list(models)
    if not models:
        raise ValueError("empty committee")
    kernel = models[0].kernel
    if any(m.kernel != kernel for m in models[1:]):
        raise ValueError("experts disagree on the kernel")
    rule_eff = rule
    if rule.kind in ("bcm", "gbcm") and rule.prior_var is None:
        rule_eff = CombinationRule(rule.kind, rule.betas, kernel.signal_variance)
    preds = []
    for model in models:
        p = gp_predict(model, x_star)
        preds.append(ExpertPrediction(p.mu - kernel.mean, p.var))
    out = combine(preds, rule_eff)
    return ExpertPrediction(out.mu + kernel.mean, out.var)
