"""Multivariate normal CDF P{Z <= u}, Z ~ N(0, C), by randomized quasi-Monte Carlo.

Separation of variables in the Genz manner: a Cholesky factor computed with
variable prioritization turns the orthant probability into an integral over
the unit cube of a product of univariate normal CDFs, which is estimated with
independently scrambled Sobol point sets. The spread of the per-scramble
estimates gives the error bound.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

from errors import NumericalError

logger = logging.getLogger(__name__)

DEFAULT_TARGET_ERROR = 1e-7
DEFAULT_MIN_POINTS = 2 ** 8
DEFAULT_MAX_POINTS = 2 ** 16
RANDOMIZATIONS = 8
SINGULAR_TOL = 1e-10
PSD_TOL = 1e-10


@dataclass(frozen=True)
class MvnProblem:
    cov: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        p = upper.size
        if p < 1:
            raise ValueError("MVN problem needs at least one dimension")
        if cov.shape != (p, p):
            raise ValueError(f"covariance shape {cov.shape} does not match {p} bounds")
        scale = max(1.0, float(np.abs(cov).max()))
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ValueError("covariance matrix is not symmetric")
        if (np.diag(cov) < 0).any():
            raise ValueError("covariance matrix has a negative variance")
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self) -> int:
        return self.upper.size


@dataclass(frozen=True)
class MvnResult:
    prob: float
    error: float
    points: int


def _check_psd(cov: np.ndarray) -> None:
    eig = np.linalg.eigvalsh(cov)
    if eig[0] < -PSD_TOL * max(1.0, abs(eig[-1])):
        raise NumericalError(f"covariance matrix is not positive semidefinite (min eigenvalue {eig[0]:.3e})")


def _truncated_mean(b: float) -> float:
    """E[Z | Z <= b] for a standard normal Z."""
    mass = ndtr(b)
    if mass < 1e-300:
        return b
    return -math.exp(-0.5 * b * b) / (math.sqrt(2.0 * math.pi) * mass)


def prioritized_cholesky(cov: np.ndarray, upper: np.ndarray, tol: float = SINGULAR_TOL):
    """Cholesky factor of the standardized covariance with the least likely variable first.

    Returns (L, u, order): L lower triangular, u the standardized and permuted
    bounds. A zero diagonal in L marks a direction that is a deterministic
    function of the earlier ones.
    """
    p = upper.size
    scale = np.sqrt(np.maximum(np.diag(cov), 0.0))
    scale[scale == 0.0] = 1.0
    c = cov / scale / scale[:, None]
    u = upper / scale
    order = np.arange(p)
    chol = np.zeros((p, p))
    y = np.zeros(p)

    for k in range(p):
        best, best_mass = k, math.inf
        for i in range(k, p):
            var = c[i, i] - chol[i, :k] @ chol[i, :k]
            if var > tol:
                mass = ndtr((u[i] - chol[i, :k] @ y[:k]) / math.sqrt(var))
                if mass < best_mass:
                    best, best_mass = i, mass
        if best != k:
            c[[k, best]] = c[[best, k]]
            c[:, [k, best]] = c[:, [best, k]]
            chol[[k, best], :k] = chol[[best, k], :k]
            u[[k, best]] = u[[best, k]]
            order[[k, best]] = order[[best, k]]

        var = c[k, k] - chol[k, :k] @ chol[k, :k]
        if var > tol * (k + 1):
            lk = math.sqrt(var)
            chol[k, k] = lk
            chol[k + 1:, k] = (c[k + 1:, k] - chol[k + 1:, :k] @ chol[k, :k]) / lk
            y[k] = _truncated_mean((u[k] - chol[k, :k] @ y[:k]) / lk)
        else:
            chol[k:, k] = 0.0
            y[k] = 0.0
    return chol, u, order


def _integrand(chol: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    p = u.size
    n_points = w.shape[0]
    y = np.zeros((p, n_points))
    value = np.ones(n_points)
    for i in range(p):
        s = chol[i, :i] @ y[:i] if i else np.zeros(n_points)
        if chol[i, i] > 0:
            e = ndtr((u[i] - s) / chol[i, i])
        else:
            e = (s <= u[i] + SINGULAR_TOL * max(1.0, abs(u[i]))).astype(float)
        value *= e
        if i + 1 < p and chol[i, i] > 0:
            y[i] = ndtri(np.clip(w[:, i] * e, 1e-300, 1.0 - 1e-16))
    return value


def _scramble_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(count)


def mvncdf(problem: MvnProblem, target_abs_error: float = DEFAULT_TARGET_ERROR, seed: int = 0,
           min_points: int = DEFAULT_MIN_POINTS, max_points: int = DEFAULT_MAX_POINTS,
           randomizations: int = RANDOMIZATIONS) -> MvnResult:
    """Orthant-style MVN probability with a 3-standard-error bound.

    The point count per scramble doubles from `min_points` until the bound
    meets `target_abs_error` or `max_points` is reached. Pass equal min and max
    to pin the point set, e.g. for finite differences under common random numbers.
    """
    if target_abs_error <= 0:
        raise ValueError(f"target_abs_error must be positive, got {target_abs_error}")
    if randomizations < 2:
        raise ValueError("at least two randomizations are needed for an error estimate")
    cov, upper = problem.cov, problem.upper

    if problem.dim == 1:
        sd = math.sqrt(cov[0, 0])
        if sd == 0:
            return MvnResult(prob=float(upper[0] >= 0), error=0.0, points=0)
        return MvnResult(prob=float(ndtr(upper[0] / sd)), error=0.0, points=0)

    _check_psd(cov)
    chol, u, _ = prioritized_cholesky(cov, upper.copy())
    if (u == -np.inf).any():
        return MvnResult(prob=0.0, error=0.0, points=0)

    seeds = _scramble_seeds(seed, randomizations)
    dim = problem.dim - 1
    n_points = 1 << int(math.ceil(math.log2(max(min_points, 2))))
    cap = max(n_points, max_points)
    while True:
        m = int(math.log2(n_points))
        # a fresh Generator per scramble keeps every doubling on the same randomizations
        estimates = np.array([
            _integrand(chol, u, qmc.Sobol(d=dim, scramble=True, rng=np.random.default_rng(s)).random_base2(m)).mean()
            for s in seeds
        ])
        prob = float(estimates.mean())
        error = float(3.0 * estimates.std(ddof=1) / math.sqrt(randomizations))
        if error <= target_abs_error or n_points >= cap:
            break
        n_points *= 2
    if error > target_abs_error:
        logger.debug("mvncdf p=%d stopped at %d points with error %.2e > target %.2e",
                     problem.dim, n_points, error, target_abs_error)
    return MvnResult(prob=min(max(prob, 0.0), 1.0), error=error, points=n_points)


@dataclass(frozen=True)
class BlockResult:
    prob: float
    error: float
    blocks: list[MvnResult]


def block_mvncdf(blocks: list[MvnProblem], target_abs_error: float = DEFAULT_TARGET_ERROR, seed: int = 0,
                 workers: int = 1, points: list[int] | None = None, **kwargs) -> BlockResult:
    """Product of independent block probabilities with a product error bound.

    `points`, when given, pins the per-block point count (one entry per block).
    """
    if not blocks:
        return BlockResult(prob=1.0, error=0.0, blocks=[])
    block_seeds = [int(s.generate_state(1)[0]) for s in _scramble_seeds(seed, len(blocks))]

    def run(i):
        extra = dict(kwargs)
        if points is not None and points[i]:
            extra.update(min_points=points[i], max_points=points[i])
        return mvncdf(blocks[i], target_abs_error=target_abs_error, seed=block_seeds[i], **extra)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, range(len(blocks))))
    else:
        results = [run(i) for i in range(len(blocks))]

    probs = np.array([r.prob for r in results])
    errors = np.array([r.error for r in results])
    prob = float(np.prod(probs))
    upper = float(np.prod(np.minimum(probs + errors, 1.0)))
    lower = float(np.prod(np.maximum(probs - errors, 0.0)))
    return BlockResult(prob=prob, error=max(upper - prob, prob - lower), blocks=results)


def read_problem(path: str | Path) -> MvnProblem:
    """Whitespace-separated matrix text; each row is a covariance row followed by its upper bound."""
    text = Path(path).read_text(encoding="utf-8")
    rows = [line.split() for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]
    try:
        data = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if data.ndim != 2 or data.shape[1] != data.shape[0] + 1:
        raise ValueError(f"{path}: expected p rows of p+1 numbers, got shape {data.shape}")
    return MvnProblem(cov=data[:, :-1], upper=data[:, -1])
