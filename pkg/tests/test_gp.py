import warnings

import numpy as np
import pytest

from swaplearn import (
    CombinationRule,
    ExpertPrediction,
    FactorizationError,
    Kernel,
    SplitSpec,
    combine,
    committee_predict,
    fit_experts,
    gp_fit,
    gp_predict,
    gp_predict_batch,
    log_marginal_likelihood,
    partition,
)
from swaplearn.data import Dataset
from swaplearn.gp import _named_pivot_failure


def _training_set(n=30, dim=2, seed=0, kernel=None):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=(n, dim))
    y = np.sin(x[:, 0]) + 0.5 * np.cos(2.0 * x.sum(axis=1)) + 0.05 * rng.normal(size=n)
    return x, y


def _dense_reference(x, y, kernel, xs):
    # everything through explicit inverses and determinants
    k = kernel(x, x) + kernel.noise_variance * np.eye(len(x))
    k_inv = np.linalg.inv(k)
    k_star = kernel(x, xs)
    r = y - kernel.mean
    mu = kernel.mean + k_star.T @ k_inv @ r
    var = kernel.signal_variance - np.einsum("ij,ji->i", k_star.T, k_inv @ k_star)
    sign, logdet = np.linalg.slogdet(k)
    assert sign > 0
    lml = -0.5 * r @ k_inv @ r - 0.5 * logdet - 0.5 * len(x) * np.log(2 * np.pi)
    return mu, var, lml


def test_single_point_fit_is_exact():
    kernel = Kernel(1.0, 1.0, noise_variance=0.0)
    model = gp_fit(np.array([[0.0]]), np.array([2.0]), kernel)
    assert model.alpha.tolist() == [2.0]
    p = gp_predict(model, [0.0])
    assert p.mu == pytest.approx(2.0)
    zero = gp_fit(np.array([[0.0]]), np.array([0.0]), kernel)
    assert log_marginal_likelihood(zero) == pytest.approx(-0.5 * np.log(2 * np.pi))


def test_fit_solves_the_training_system():
    x, y = _training_set(25)
    kernel = Kernel(0.8, 1.3, noise_variance=0.05)
    model = gp_fit(x, y, kernel)
    k = kernel(x, x) + 0.05 * np.eye(25)
    assert np.allclose(k @ model.alpha, y - kernel.mean, atol=1e-9)


@pytest.mark.parametrize("mean", [0.0, 2.5])
def test_predictions_match_dense_inverse(mean):
    x, y = _training_set(30)
    kernel = Kernel(0.9, 1.1, noise_variance=0.1, mean=mean)
    model = gp_fit(x, y, kernel)
    xs = np.random.default_rng(5).uniform(-2.5, 2.5, size=(12, 2))
    mu, var = gp_predict_batch(model, xs)
    mu_ref, var_ref, lml_ref = _dense_reference(x, y, kernel, xs)
    assert np.allclose(mu, mu_ref, atol=1e-8)
    assert np.allclose(var, var_ref, atol=1e-8)
    assert log_marginal_likelihood(model) == pytest.approx(lml_ref, abs=1e-8)


def test_lml_is_permutation_invariant():
    x, y = _training_set(20, seed=3)
    kernel = Kernel(1.2, 0.9, noise_variance=0.2)
    baseline = log_marginal_likelihood(gp_fit(x, y, kernel))
    perm = np.random.default_rng(1).permutation(20)
    shuffled = log_marginal_likelihood(gp_fit(x[perm], y[perm], kernel))
    assert shuffled == pytest.approx(baseline, abs=1e-10)


def test_near_interpolation_with_tiny_noise():
    x, y = _training_set(20, seed=7)
    model = gp_fit(x, y, Kernel(1.0, 1.0, noise_variance=1e-6))
    mu, _ = gp_predict_batch(model, x)
    assert np.max(np.abs(mu - y)) < 1e-2


def test_far_field_returns_to_prior():
    x, y = _training_set(15, seed=2)
    kernel = Kernel(0.5, 1.7, noise_variance=0.1, mean=3.0)
    model = gp_fit(x, y, kernel)
    p = gp_predict(model, [50.0, -50.0])
    assert p.mu == pytest.approx(3.0, abs=1e-6)
    assert p.var == pytest.approx(1.7, abs=1e-6)


def test_variance_never_exceeds_signal_and_stays_positive():
    x, y = _training_set(40, seed=9)
    kernel = Kernel(0.7, 2.0, noise_variance=0.0)
    model = gp_fit(x, y, kernel)  # exercises the jitter-free duplicate-safe path
    xs = np.vstack([x, np.random.default_rng(0).uniform(-3, 3, size=(50, 2))])
    _, var = gp_predict_batch(model, xs)
    assert np.all(var > 0)
    assert np.all(var <= 2.0 + 1e-9)


def test_duplicate_points_survive_via_jitter():
    x = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    y = np.array([1.0, 1.0, -1.0])
    model = gp_fit(x, y, Kernel(1.0, 1.0, noise_variance=0.0))
    p = gp_predict(model, [0.0, 0.0])
    assert p.mu == pytest.approx(1.0, abs=1e-3)


def test_factorization_failure_names_the_pivot():
    bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # indefinite
    err = _named_pivot_failure(bad)
    assert isinstance(err, FactorizationError)
    assert "pivot" in str(err) and "index 1" in str(err)


def test_kernel_validation():
    with pytest.raises(ValueError):
        Kernel(0.0, 1.0)
    with pytest.raises(ValueError):
        Kernel(1.0, -1.0)
    with pytest.raises(ValueError):
        Kernel(1.0, 1.0, noise_variance=-0.1)
    with pytest.raises(ValueError):
        ExpertPrediction(0.0, 0.0)
    with pytest.raises(ValueError):
        CombinationRule("median")
    with pytest.raises(ValueError):
        CombinationRule("gpoe", betas=[0.5, -0.5])


def test_poe_of_identical_experts_sharpens():
    p = ExpertPrediction(1.0, 2.0)
    out = combine([p, p], CombinationRule("poe"))
    assert out.mu == pytest.approx(1.0)
    assert out.var == pytest.approx(1.0)


def test_single_expert_passes_through_every_rule():
    p = ExpertPrediction(0.7, 1.3)
    for rule in (CombinationRule("poe"),
                 CombinationRule("gpoe", betas=[1.0]),
                 CombinationRule("bcm", prior_var=5.0),
                 CombinationRule("gbcm", betas=[1.0], prior_var=5.0)):
        out = combine([p], rule)
        assert out.mu == pytest.approx(0.7, rel=1e-12)
        assert out.var == pytest.approx(1.3, rel=1e-12)


def test_rule_identities_on_random_committees():
    rng = np.random.default_rng(11)
    for _ in range(50):
        m = int(rng.integers(2, 6))
        preds = [ExpertPrediction(float(rng.normal()), float(rng.uniform(0.1, 3.0)))
                 for _ in range(m)]
        prior = float(rng.uniform(0.5, 4.0))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            poe = combine(preds, CombinationRule("poe"))
            gpoe_unit = combine(preds, CombinationRule("gpoe", betas=np.ones(m)))
            bcm = combine(preds, CombinationRule("bcm", prior_var=prior))
            gbcm_unit = combine(preds, CombinationRule("gbcm", betas=np.ones(m),
                                                       prior_var=prior))
        assert poe.mu == pytest.approx(gpoe_unit.mu, rel=1e-12)
        assert poe.var == pytest.approx(gpoe_unit.var, rel=1e-12)
        assert bcm.mu == pytest.approx(gbcm_unit.mu, rel=1e-12)
        assert bcm.var == pytest.approx(gbcm_unit.var, rel=1e-12)

        betas = rng.uniform(0.2, 1.0, size=m)
        betas = betas / betas.sum()
        gpoe = combine(preds, CombinationRule("gpoe", betas=betas))
        gbcm = combine(preds, CombinationRule("gbcm", betas=betas, prior_var=prior))
        assert gpoe.mu == pytest.approx(gbcm.mu, rel=1e-12)
        assert gpoe.var == pytest.approx(gbcm.var, rel=1e-12)


def test_combination_is_permutation_invariant():
    rng = np.random.default_rng(4)
    preds = [ExpertPrediction(float(rng.normal()), float(rng.uniform(0.2, 2.0)))
             for _ in range(5)]
    rule = CombinationRule("bcm", prior_var=2.0)
    fwd = combine(preds, rule)
    rev = combine(preds[::-1], rule)
    assert fwd.mu == pytest.approx(rev.mu, rel=1e-12)
    assert fwd.var == pytest.approx(rev.var, rel=1e-12)


def test_gpoe_warns_when_betas_do_not_sum_to_one():
    preds = [ExpertPrediction(0.0, 1.0), ExpertPrediction(0.0, 1.0)]
    with pytest.warns(UserWarning, match="betas sum"):
        combine(preds, CombinationRule("gpoe", betas=[1.0, 1.0]))


def test_inconsistent_precision_is_rejected():
    # one overconfident beta with a tight prior drives the precision negative
    preds = [ExpertPrediction(0.5, 10.0)]
    rule = CombinationRule("gbcm", betas=[3.0], prior_var=0.1)
    with pytest.raises(ValueError, match="precision"):
        combine(preds, rule)
    with pytest.raises(ValueError):
        combine([], CombinationRule("poe"))
    with pytest.raises(ValueError):
        combine(preds, CombinationRule("bcm"))  # prior_var missing


def test_fit_experts_prefers_generating_kernel():
    rng = np.random.default_rng(21)
    x = rng.uniform(-3, 3, size=(120, 1))
    true_kernel = Kernel(1.0, 1.0, noise_variance=0.05)
    k = true_kernel(x, x) + 0.05 * np.eye(120)
    y = np.linalg.cholesky(k) @ rng.normal(size=120)
    ds = Dataset(x, labels=y)
    part = partition(ds, SplitSpec("shuffled-iid", 3, seed=0))
    grid = [Kernel(ell, s2, noise_variance=0.05)
            for ell in (0.05, 1.0, 20.0) for s2 in (0.1, 1.0, 10.0)]
    models, best = fit_experts(part, grid)
    assert len(models) == 3
    # selection agrees with independently summed evidence
    totals = {k_: sum(log_marginal_likelihood(gp_fit(s.points, s.labels, k_))
                      for s in part.shards) for k_ in grid}
    assert totals[best] == pytest.approx(max(totals.values()))
    assert best.lengthscale == 1.0


def test_fit_experts_breaks_ties_toward_smaller_lengthscale():
    # with a single training point the evidence ignores the lengthscale
    ds = Dataset(np.array([[0.0]]), labels=np.array([0.3]))
    part = partition(ds, SplitSpec("contiguous", 1))
    grid = [Kernel(3.0, 1.0, noise_variance=0.1), Kernel(1.0, 1.0, noise_variance=0.1)]
    _, best = fit_experts(part, grid)
    assert best.lengthscale == 1.0
    with pytest.raises(ValueError):
        fit_experts(part, [])


def test_committee_predict_requires_shared_kernel():
    x, y = _training_set(20, seed=6)
    a = gp_fit(x[:10], y[:10], Kernel(1.0, 1.0, noise_variance=0.1))
    b = gp_fit(x[10:], y[10:], Kernel(2.0, 1.0, noise_variance=0.1))
    with pytest.raises(ValueError, match="kernel"):
        committee_predict([a, b], CombinationRule("poe"), x[0])
    with pytest.raises(ValueError):
        committee_predict([], CombinationRule("poe"), x[0])


def test_committee_far_field_falls_back_to_prior():
    kernel = Kernel(0.5, 1.5, noise_variance=0.05, mean=1.0)
    rng = np.random.default_rng(13)
    models = []
    for shard_seed in range(3):
        x = rng.uniform(-1, 1, size=(15, 2))
        y = kernel.mean + 0.3 * rng.normal(size=15)
        models.append(gp_fit(x, y, kernel))
    far = [40.0, 40.0]
    for rule in (CombinationRule("bcm"),
                 CombinationRule("gbcm", betas=np.full(3, 1.0 / 3.0))):
        out = committee_predict(models, rule, far)
        assert out.mu == pytest.approx(kernel.mean, abs=1e-6)
        assert out.var == pytest.approx(kernel.signal_variance, rel=1e-6)
