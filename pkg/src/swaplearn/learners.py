"""Node-local objectives and update steps.

A parameter vector bundles the linear weights with a trailing intercept; the
design matrix gains a column of ones in the same position. All updates are
pure functions: repeated calls with identical inputs return identical bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import Dataset
from .errors import RankDeficiencyError

LOSS_KINDS = ("squared", "logistic")
REGULARIZERS = ("none", "l1", "l2")
UPDATE_MODES = ("deterministic-full-gradient", "stochastic-minibatch")


@dataclass(frozen=True, eq=False)
class Theta:
    """Flat parameter vector: weights first, intercept last."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64)
        if v.ndim != 1 or v.size < 2:
            raise ValueError("theta must be a 1-D vector of length dim+1")
        if not np.isfinite(v).all():
            raise ValueError("theta contains non-finite values")
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)

    @classmethod
    def from_parts(cls, weights, intercept) -> "Theta":
        return cls(np.concatenate([np.asarray(weights, dtype=np.float64).ravel(),
                                   [float(intercept)]]))

    @classmethod
    def zeros(cls, dim: int) -> "Theta":
        return cls(np.zeros(dim + 1))

    @property
    def weights(self) -> np.ndarray:
        return self.vector[:-1]

    @property
    def intercept(self) -> float:
        return float(self.vector[-1])

    @property
    def dim(self) -> int:
        return self.vector.size - 1

    def __eq__(self, other):
        if not isinstance(other, Theta):
            return NotImplemented
        return np.array_equal(self.vector, other.vector)


@dataclass(frozen=True)
class Objective:
    """Loss plus optional weight penalty (the intercept is never penalized)."""

    loss_kind: str = "squared"
    regularizer: str = "none"
    lam: float = 0.0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss_kind!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.regularizer != "none" and self.lam == 0:
            raise ValueError("regularizer given but lam is 0")


@dataclass(frozen=True)
class UpdatePolicy:
    """Shape of one local update: step size, epochs, batching, and seed."""

    step_size: float
    epochs: int = 1
    batch_size: int | None = None
    mode: str = "deterministic-full-gradient"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in UPDATE_MODES:
            raise ValueError(f"unknown update mode {self.mode!r}")
        if not (self.step_size > 0 and np.isfinite(self.step_size)):
            raise ValueError("step_size must be positive and finite")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode == "stochastic-minibatch":
            if self.batch_size is None or self.batch_size < 1:
                raise ValueError("stochastic-minibatch requires batch_size >= 1")
        elif self.batch_size is not None:
            raise ValueError("batch_size only applies to stochastic-minibatch")


def design_matrix(dataset: Dataset) -> np.ndarray:
    """Feature rows with a trailing ones column for the intercept."""
    return np.hstack([dataset.points, np.ones((dataset.n_points, 1))])


def _require_labels(dataset, objective):
    if not dataset.has_labels:
        raise ValueError("objective evaluation requires labels")
    y = np.asarray(dataset.labels, dtype=np.float64)
    if objective.loss_kind == "logistic" and not np.all(np.abs(y) == 1.0):
        raise ValueError("logistic loss requires labels in {-1, +1}")
    return y


def _data_loss(objective, x, y, v):
    z = x @ v
    if objective.loss_kind == "squared":
        r = z - y
        return 0.5 * float(r @ r)
    return float(np.sum(np.logaddexp(0.0, -y * z)))


def _smooth_gradient(objective, x, y, v):
    z = x @ v
    if objective.loss_kind == "squared":
        g = x.T @ (z - y)
    else:
        # d/dz log(1+e^{-yz}) = -y * sigmoid(-yz)
        from scipy.special import expit

        g = x.T @ (-y * expit(-y * z))
    if objective.regularizer == "l2":
        g = g.copy()
        g[:-1] += objective.lam * v[:-1]
    return g


def loss(objective: Objective, theta: Theta, dataset: Dataset) -> float:
    """Full objective value over a dataset (data term plus penalty)."""
    y = _require_labels(dataset, objective)
    value = _data_loss(objective, design_matrix(dataset), y, theta.vector)
    if objective.regularizer == "l1":
        value += objective.lam * float(np.abs(theta.weights).sum())
    elif objective.regularizer == "l2":
        value += objective.lam * 0.5 * float(theta.weights @ theta.weights)
    return value


def gradient(objective: Objective, theta: Theta, dataset: Dataset,
             batch_indices=None) -> np.ndarray:
    """Gradient of the smooth part (data term, plus l2 penalty if present).

    The l1 penalty is nonsmooth and handled by :func:`prox_l1`, never here.
    """
    y = _require_labels(dataset, objective)
    x = design_matrix(dataset)
    if batch_indices is not None:
        idx = np.asarray(batch_indices)
        if idx.size == 0:
            raise ValueError("empty batch")
        x, y = x[idx], y[idx]
    return _smooth_gradient(objective, x, y, theta.vector)


def prox_l1(v: np.ndarray, t: float) -> np.ndarray:
    """Soft-threshold every entry: sign(v) * max(|v| - t, 0).

    Operates on raw vectors. The update step applies this to the weight block
    only, so the intercept is never shrunk.
    """
    if t < 0:
        raise ValueError("threshold must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def power_iteration(m: np.ndarray, max_iters: int = 8, tol: float = 1e-6) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    v = np.ones(m.shape[0]) / np.sqrt(m.shape[0])
    lam = 0.0
    for _ in range(max_iters):
        w = m @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        prev, lam = lam, float(v @ (m @ v))
        if abs(lam - prev) <= tol * max(abs(lam), 1.0):
            break
    return lam


def default_step_size(objective: Objective, dataset: Dataset) -> float:
    """0.5 / L where L bounds the smooth-part curvature.

    Squared loss: L = lambda_max(X^T X); logistic caps the per-row curvature
    at 1/4. An l2 penalty adds its lam.
    """
    x = design_matrix(dataset)
    top = power_iteration(x.T @ x)
    if objective.loss_kind == "logistic":
        top *= 0.25
    if objective.regularizer == "l2":
        top += objective.lam
    if top <= 0:
        raise ValueError("cannot estimate a step size for a zero design")
    return 0.5 / top


def _minibatches(n, batch_size, perm):
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def local_update(objective: Objective, dataset: Dataset, policy: UpdatePolicy,
                 theta: Theta) -> Theta:
    """One local pass: proximal (sub)gradient steps over the shard.

    Deterministic-full-gradient performs ``epochs`` full steps; stochastic
    minibatching reshuffles each epoch from ``policy.seed`` (without
    replacement, trailing short batch kept). With an l1 penalty every step
    soft-thresholds the weight block by step*lam and passes the intercept
    through.
    """
    y = _require_labels(dataset, objective)
    x = design_matrix(dataset)
    if theta.dim != dataset.dim:
        raise ValueError(f"theta dim {theta.dim} does not match data dim {dataset.dim}")
    v = theta.vector.copy()
    step = policy.step_size
    stochastic = policy.mode == "stochastic-minibatch"
    rng = np.random.default_rng(policy.seed) if stochastic else None
    for _ in range(policy.epochs):
        if stochastic:
            perm = rng.permutation(dataset.n_points)
            batches = _minibatches(dataset.n_points, policy.batch_size, perm)
        else:
            batches = [slice(None)]
        for idx in batches:
            g = _smooth_gradient(objective, x[idx], y[idx], v)
            v = v - step * g
            if objective.regularizer == "l1":
                v[:-1] = prox_l1(v[:-1], step * objective.lam)
    return Theta(v)


@dataclass(frozen=True)
class Learner:
    """A node: its objective, its shard, and its update policy."""

    objective: Objective
    dataset: Dataset
    policy: UpdatePolicy

    def update(self, theta: Theta) -> Theta:
        return local_update(self.objective, self.dataset, self.policy, theta)


def solve_penalized_normal_equations(dataset: Dataset, lam: float = 0.0) -> Theta:
    """Exact ridge/least-squares fit: (X^T X + lam*D) theta = X^T y.

    D is the identity with a zero in the intercept slot. Raises
    :class:`RankDeficiencyError` when the system is not positive definite.
    """
    if not dataset.has_labels:
        raise ValueError("fit requires labels")
    x = design_matrix(dataset)
    a = x.T @ x
    if lam > 0:
        a = a + lam * np.diag(np.r_[np.ones(dataset.dim), 0.0])
    b = x.T @ np.asarray(dataset.labels, dtype=np.float64)
    try:
        c = cho_factor(a, lower=True)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"normal equations not positive definite: {exc}") from None
    return Theta(cho_solve(c, b))


def centralized_oracle(objective: Objective, dataset: Dataset,
                       policy: UpdatePolicy | None = None, method: str = "auto",
                       tol: float = 1e-12, max_iters: int = 200_000) -> Theta:
    """Minimizer of the full objective on one machine.

    ``closed-form`` is available for squared loss with no penalty or l2;
    ``iterative`` runs full proximal gradient steps until the l-inf change
    drops below ``tol``. ``auto`` prefers the closed form when it exists.
    """
    if method not in ("auto", "closed-form", "iterative"):
        raise ValueError(f"unknown method {method!r}")
    closed_ok = objective.loss_kind == "squared" and objective.regularizer != "l1"
    if method == "closed-form" and not closed_ok:
        raise ValueError("no closed form for this objective")
    if method in ("auto", "closed-form") and closed_ok:
        lam = objective.lam if objective.regularizer == "l2" else 0.0
        return solve_penalized_normal_equations(dataset, lam)
    y = _require_labels(dataset, objective)
    x = design_matrix(dataset)
    step = policy.step_size if policy is not None else default_step_size(objective, dataset)
    v = np.zeros(dataset.dim + 1)
    for _ in range(max_iters):
        g = _smooth_gradient(objective, x, y, v)
        nxt = v - step * g
        if objective.regularizer == "l1":
            nxt[:-1] = prox_l1(nxt[:-1], step * objective.lam)
        if float(np.max(np.abs(nxt - v))) <= tol:
            v = nxt
            break
        v = nxt
    return Theta(v)
