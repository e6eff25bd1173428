import numpy as np
import pytest

from swaplearn import (
    Learner,
    Objective,
    RankDeficiencyError,
    Theta,
    UpdatePolicy,
    centralized_oracle,
    default_step_size,
    design_matrix,
    generate_regression,
    gradient,
    local_update,
    loss,
    power_iteration,
    prox_l1,
    solve_penalized_normal_equations,
)
from swaplearn.data import Dataset

FULL = "deterministic-full-gradient"
MINI = "stochastic-minibatch"


def _toy(n=30, dim=3, seed=1, sigma=0.2):
    return generate_regression(n, dim, np.linspace(-1, 1, dim), 0.5,
                               noise_sigma=sigma, seed=seed)


def _sign_dataset(n=40, dim=3, seed=2):
    base = _toy(n, dim, seed)
    labels = np.where(base.labels >= np.mean(base.labels), 1.0, -1.0)
    return Dataset(base.points, labels=labels)


def test_theta_accessors():
    th = Theta.from_parts([1.0, 2.0], 3.0)
    assert th.dim == 2
    assert np.array_equal(th.weights, [1.0, 2.0])
    assert th.intercept == 3.0
    assert th == Theta(np.array([1.0, 2.0, 3.0]))
    assert th != Theta.zeros(2)
    with pytest.raises(ValueError):
        Theta(np.array([np.inf, 0.0]))
    with pytest.raises(ValueError):
        Theta(np.array([1.0]))  # weights plus intercept needs length >= 2
    with pytest.raises(ValueError):
        th.vector[0] = 9.0


def test_prox_l1_worked_examples():
    assert prox_l1(np.array([2.0, -3.0]), 1.0).tolist() == [1.0, -2.0]
    assert prox_l1(np.array([0.5]), 1.0).tolist() == [0.0]
    v = np.random.default_rng(0).normal(size=7)
    assert np.array_equal(prox_l1(v, 0.0), v)
    out = prox_l1(v, 0.3)
    assert np.all(np.abs(out) <= np.abs(v))
    assert np.all(out * v >= 0.0)
    with pytest.raises(ValueError):
        prox_l1(v, -0.1)


def _numeric_gradient(objective, dataset, theta, eps=1e-6):
    v = theta.vector
    g = np.zeros_like(v)
    for i in range(v.size):
        plus, minus = v.copy(), v.copy()
        plus[i] += eps
        minus[i] -= eps
        g[i] = (loss(objective, Theta(plus), dataset)
                - loss(objective, Theta(minus), dataset)) / (2.0 * eps)
    return g


@pytest.mark.parametrize("loss_kind,reg,lam", [
    ("squared", "none", 0.0),
    ("squared", "l2", 0.3),
    ("logistic", "none", 0.0),
    ("logistic", "l2", 0.05),
])
def test_gradient_matches_central_differences(loss_kind, reg, lam):
    ds = _sign_dataset() if loss_kind == "logistic" else _toy()
    obj = Objective(loss_kind, reg, lam) if reg != "none" else Objective(loss_kind)
    rng = np.random.default_rng(42)
    for _ in range(5):
        th = Theta(rng.normal(scale=0.8, size=ds.dim + 1))
        got = gradient(obj, th, ds)
        want = _numeric_gradient(obj, ds, th)
        assert np.allclose(got, want, rtol=1e-5, atol=1e-6)


def test_l1_penalty_stays_out_of_gradient():
    # the nonsmooth term is handled by the prox, so the gradient is the data term
    ds = _toy()
    th = Theta(np.random.default_rng(3).normal(size=ds.dim + 1))
    plain = gradient(Objective("squared"), th, ds)
    with_l1 = gradient(Objective("squared", "l1", 0.7), th, ds)
    assert np.array_equal(plain, with_l1)
    # but the loss value includes it, on the weights only
    diff = (loss(Objective("squared", "l1", 0.7), th, ds)
            - loss(Objective("squared"), th, ds))
    assert np.isclose(diff, 0.7 * np.abs(th.weights).sum())


def test_squared_loss_hand_value():
    ds = Dataset(np.array([[1.0, 0.0], [0.0, 1.0]]), labels=np.array([2.0, 0.0]))
    th = Theta.from_parts([1.0, 1.0], 0.0)
    # residuals: (1 - 2, 1 - 0) -> 0.5 * (1 + 1) = 1
    assert loss(Objective("squared"), th, ds) == pytest.approx(1.0)


def test_batch_gradient_sums_selected_rows():
    ds = _toy(12, 2)
    th = Theta.from_parts([0.3, -0.2], 0.1)
    obj = Objective("squared")
    idx = np.array([0, 5, 7])
    sub = Dataset(ds.points[idx], labels=ds.labels[idx])
    assert np.allclose(gradient(obj, th, ds, batch_indices=idx),
                       gradient(obj, th, sub))
    with pytest.raises(ValueError):
        gradient(obj, th, ds, batch_indices=np.array([], dtype=np.int64))


def test_logistic_labels_must_be_signs():
    pts = np.ones((4, 2))
    bad = Dataset(pts, labels=np.array([0.0, 1.0, 1.0, 0.0]))
    with pytest.raises(ValueError):
        loss(Objective("logistic"), Theta.zeros(2), bad)
    unlabeled = Dataset(pts)
    with pytest.raises(ValueError):
        gradient(Objective("squared"), Theta.zeros(2), unlabeled)


def test_design_matrix_appends_intercept_column():
    ds = _toy(5, 2)
    xt = design_matrix(ds)
    assert xt.shape == (5, 3)
    assert np.array_equal(xt[:, :2], ds.points)
    assert np.array_equal(xt[:, 2], np.ones(5))


def test_power_iteration_matches_dense_eigenvalue():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(6, 6))
    m = a.T @ a
    exact = float(np.linalg.eigvalsh(m)[-1])
    assert power_iteration(m, max_iters=500, tol=1e-14) == pytest.approx(exact, rel=1e-10)
    # the short default budget still lands close enough to set a step size
    assert power_iteration(m) == pytest.approx(exact, rel=0.05)


def test_default_step_size_scales_with_penalty():
    ds = _toy()
    s_plain = default_step_size(Objective("squared"), ds)
    s_ridge = default_step_size(Objective("squared", "l2", 2.0), ds)
    assert s_ridge < s_plain
    s_logit = default_step_size(Objective("logistic"), _sign_dataset())
    assert s_logit > 0.0


def test_full_gradient_update_is_one_explicit_step():
    ds = _toy()
    obj = Objective("squared", "l2", 0.1)
    policy = UpdatePolicy(step_size=0.01)
    th = Theta(np.random.default_rng(5).normal(size=ds.dim + 1))
    got = local_update(obj, ds, policy, th)
    want = th.vector - 0.01 * gradient(obj, th, ds)
    assert np.array_equal(got.vector, want)


def test_multi_epoch_full_update_composes():
    ds = _toy()
    obj = Objective("squared")
    one = UpdatePolicy(step_size=0.02, epochs=1)
    three = UpdatePolicy(step_size=0.02, epochs=3)
    stepped = Theta.zeros(ds.dim)
    for _ in range(3):
        stepped = local_update(obj, ds, one, stepped)
    assert np.array_equal(local_update(obj, ds, three, Theta.zeros(ds.dim)).vector,
                          stepped.vector)


def test_minibatch_update_is_reproducible():
    ds = _toy(64, 4)
    obj = Objective("squared", "l2", 0.01)
    policy = UpdatePolicy(step_size=0.005, epochs=2, mode=MINI, batch_size=16, seed=9)
    th = Theta.zeros(ds.dim)
    a = local_update(obj, ds, policy, th)
    b = local_update(obj, ds, policy, th)
    assert np.array_equal(a.vector, b.vector)
    other = UpdatePolicy(step_size=0.005, epochs=2, mode=MINI, batch_size=16, seed=10)
    assert not np.array_equal(local_update(obj, ds, other, th).vector, a.vector)


def test_single_batch_epoch_equals_full_gradient_step():
    # batch covering every row: same step as full mode, up to summation order
    ds = _toy(32, 3)
    obj = Objective("squared")
    mini = UpdatePolicy(step_size=0.01, mode=MINI, batch_size=32, seed=0)
    full = UpdatePolicy(step_size=0.01)
    th = Theta(np.random.default_rng(1).normal(size=4))
    assert np.allclose(local_update(obj, ds, mini, th).vector,
                       local_update(obj, ds, full, th).vector,
                       rtol=0.0, atol=1e-12)


def test_l1_update_shrinks_weights_but_not_intercept():
    # start at the least-squares optimum so the smooth gradient vanishes and
    # the step reduces to the shrinkage operator
    ds = generate_regression(50, 2, [1.5, -2.0], 0.8, noise_sigma=0.0, seed=6)
    opt = solve_penalized_normal_equations(ds, 0.0)
    policy = UpdatePolicy(step_size=0.1)
    out = local_update(Objective("squared", "l1", 0.5), ds, policy, opt)
    assert np.allclose(out.weights, opt.weights - 0.1 * 0.5 * np.sign(opt.weights))
    assert out.intercept == pytest.approx(opt.intercept, abs=1e-12)


def test_normal_equations_solve_least_squares():
    ds = _toy(40, 3, sigma=0.5)
    th = solve_penalized_normal_equations(ds, 0.0)
    xt = design_matrix(ds)
    ref, *_ = np.linalg.lstsq(xt, ds.labels, rcond=None)
    assert np.allclose(th.vector, ref, atol=1e-10)
    # ridge leaves the intercept unpenalized: residual of the stationarity system
    lam = 0.7
    th = solve_penalized_normal_equations(ds, lam)
    grad = xt.T @ (xt @ th.vector - ds.labels)
    grad[:-1] += lam * th.weights
    assert np.max(np.abs(grad)) < 1e-9


def test_normal_equations_reject_rank_deficiency():
    pts = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])  # second column dependent
    ds = Dataset(pts, labels=np.array([1.0, 2.0, 3.0]))
    with pytest.raises(RankDeficiencyError):
        solve_penalized_normal_equations(ds, 0.0)


def test_oracle_closed_form_and_iterative_agree():
    ds = _toy(60, 3, sigma=0.3)
    for obj in (Objective("squared"), Objective("squared", "l2", 0.2)):
        closed = centralized_oracle(obj, ds, method="closed-form")
        iterative = centralized_oracle(obj, ds, method="iterative")
        assert np.max(np.abs(closed.vector - iterative.vector)) < 1e-6


def test_oracle_l1_satisfies_optimality_conditions():
    ds = _toy(60, 3, sigma=0.3)
    lam = 0.4
    th = centralized_oracle(Objective("squared", "l1", lam), ds)
    g = gradient(Objective("squared"), th, ds)
    for j, w in enumerate(th.weights):
        if w != 0.0:
            assert g[j] + lam * np.sign(w) == pytest.approx(0.0, abs=1e-6)
        else:
            assert abs(g[j]) <= lam + 1e-6
    assert g[-1] == pytest.approx(0.0, abs=1e-6)


def test_oracle_logistic_reaches_stationarity():
    ds = _sign_dataset(80, 2, seed=4)
    obj = Objective("logistic", "l2", 0.1)
    th = centralized_oracle(obj, ds)
    assert np.max(np.abs(gradient(obj, th, ds))) < 1e-8


def test_learner_wraps_local_update():
    ds = _toy()
    obj = Objective("squared")
    policy = UpdatePolicy(step_size=0.01)
    learner = Learner(obj, ds, policy)
    th = Theta.zeros(ds.dim)
    assert np.array_equal(learner.update(th).vector,
                          local_update(obj, ds, policy, th).vector)


def test_policy_validation():
    with pytest.raises(ValueError):
        UpdatePolicy(step_size=0.0)
    with pytest.raises(ValueError):
        UpdatePolicy(step_size=0.1, epochs=0)
    with pytest.raises(ValueError):
        UpdatePolicy(step_size=0.1, mode=MINI)  # needs batch_size
    with pytest.raises(ValueError):
        UpdatePolicy(step_size=0.1, batch_size=4)  # only for minibatch mode
    with pytest.raises(ValueError):
        Objective("squared", "l2", 0.0)  # penalty needs a positive weight
    with pytest.raises(ValueError):
        Objective("huber")
