import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from errors import NumericalError
from mvn import MvnProblem, block_mvncdf, mvncdf, prioritized_cholesky, read_problem


def test_univariate_is_exact():
    result = mvncdf(MvnProblem(cov=[[1.0]], upper=[0.0]))
    assert result.prob == 0.5
    assert result.error == 0.0


def test_independent_pair():
    result = mvncdf(MvnProblem(cov=np.eye(2), upper=[0.0, 0.0]), target_abs_error=1e-6)
    assert result.prob == pytest.approx(0.25, abs=1e-5)
    assert result.error <= 1e-6 or result.points == 65536


def test_correlated_orthant():
    cov = np.array([[1.0, 0.5], [0.5, 1.0]])
    result = mvncdf(MvnProblem(cov=cov, upper=[0.0, 0.0]), target_abs_error=1e-6)
    assert result.prob == pytest.approx(1.0 / 3.0, abs=1e-5)


def test_matches_scipy_in_higher_dimension():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((5, 5))
    cov = a @ a.T + 5 * np.eye(5)
    upper = rng.uniform(-1.0, 2.0, 5)
    ours = mvncdf(MvnProblem(cov=cov, upper=upper), target_abs_error=1e-5)
    reference = multivariate_normal(mean=np.zeros(5), cov=cov).cdf(upper)
    assert ours.prob == pytest.approx(reference, abs=1e-4)


def test_singular_covariance():
    # second variable duplicates the first
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    result = mvncdf(MvnProblem(cov=cov, upper=[0.0, 1.0]))
    assert result.prob == pytest.approx(0.5, abs=1e-6)


def test_reproducible_for_a_seed():
    problem = MvnProblem(cov=[[2.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 1.5]], upper=[0.1, -0.2, 0.4])
    a = mvncdf(problem, seed=4)
    b = mvncdf(problem, seed=4)
    assert (a.prob, a.error, a.points) == (b.prob, b.error, b.points)


def test_pinned_point_count():
    problem = MvnProblem(cov=np.eye(3), upper=[0.0, 0.0, 0.0])
    result = mvncdf(problem, target_abs_error=1e-15, min_points=512, max_points=512)
    assert result.points == 512


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        MvnProblem(cov=[[1.0, 0.2], [0.3, 1.0]], upper=[0.0, 0.0])
    with pytest.raises(ValueError):
        MvnProblem(cov=np.eye(3), upper=[0.0, 0.0])
    with pytest.raises(NumericalError):
        mvncdf(MvnProblem(cov=[[1.0, 2.0], [2.0, 1.0]], upper=[0.0, 0.0]))
    with pytest.raises(ValueError):
        mvncdf(MvnProblem(cov=np.eye(2), upper=[0.0, 0.0]), target_abs_error=0.0)


def test_prioritization_puts_least_likely_first():
    cov = np.eye(3)
    _, u, order = prioritized_cholesky(cov, np.array([2.0, -1.0, 0.5]))
    assert order[0] == 1
    assert u[0] == pytest.approx(-1.0)


def test_block_product():
    blocks = [MvnProblem(cov=[[1.0]], upper=[0.0]), MvnProblem(cov=[[4.0]], upper=[0.0])]
    result = block_mvncdf(blocks)
    assert result.prob == pytest.approx(0.25)
    assert result.error == 0.0
    assert block_mvncdf([]).prob == 1.0


def test_block_workers_do_not_change_result():
    cov = np.array([[1.0, 0.4], [0.4, 1.0]])
    blocks = [MvnProblem(cov=cov, upper=[0.2, 0.1]), MvnProblem(cov=cov, upper=[-0.3, 0.5])]
    a = block_mvncdf(blocks, seed=2, workers=1)
    b = block_mvncdf(blocks, seed=2, workers=2)
    assert a.prob == b.prob


def test_read_problem(tmp_path):
    path = tmp_path / "problem.txt"
    path.write_text("# two variables\n1.0 0.5 0.0\n0.5 1.0 0.0\n", encoding="utf-8")
    problem = read_problem(path)
    assert problem.dim == 2
    assert problem.upper.tolist() == [0.0, 0.0]
    assert math.isclose(mvncdf(problem, target_abs_error=1e-6).prob, 1 / 3, abs_tol=1e-5)

    path.write_text("1.0 0.5\n0.5 1.0\n", encoding="utf-8")
    with pytest.raises(ValueError):
        read_problem(path)


def test_three_dimensional_orthant_runs_on_scrambled_sobol():
    result = mvncdf(MvnProblem(cov=np.eye(3), upper=[0.0, 0.0, 0.0]), target_abs_error=1e-6, seed=7)
    assert result.points >= 256
    assert result.prob == pytest.approx(0.125, abs=1e-5)


def _correlated_problem():
    cov = np.array([[1.5, 0.4, 0.2, 0.1], [0.4, 1.0, 0.3, 0.0], [0.2, 0.3, 2.0, 0.5], [0.1, 0.0, 0.5, 1.2]])
    return cov, np.array([0.3, -0.2, 0.8, 0.1])


def test_monotone_in_every_bound():
    cov, upper = _correlated_problem()
    base = mvncdf(MvnProblem(cov=cov, upper=upper), target_abs_error=1e-6, seed=3).prob
    for i in range(4):
        raised = upper.copy()
        raised[i] += 0.5
        assert mvncdf(MvnProblem(cov=cov, upper=raised), target_abs_error=1e-6, seed=3).prob > base


def test_invariant_under_variable_permutation():
    cov, upper = _correlated_problem()
    perm = np.array([2, 0, 3, 1])
    a = mvncdf(MvnProblem(cov=cov, upper=upper), target_abs_error=1e-6)
    b = mvncdf(MvnProblem(cov=cov[np.ix_(perm, perm)], upper=upper[perm]), target_abs_error=1e-6)
    assert a.prob == pytest.approx(b.prob, abs=1e-4)
