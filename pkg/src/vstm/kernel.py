"""Shared log densities, constrained-support transforms, and RNG streams.

Conventions: vectors are 1-D numpy arrays of float64; a simplex vector has
nonnegative entries summing to one; a Cholesky correlation factor is lower
triangular with unit-norm rows and a positive diagonal, so L @ L.T is a
correlation matrix. Additive-log-ratio (alr) coordinates use the last
category as reference: alr(theta) = log(theta[:-1] / theta[-1]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class RngStream:
    """Named pseudorandom stream: identical (seed, stream) pairs replay
    identical draw sequences, distinct streams are independent."""

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        )

    def child(self, k: int) -> "RngStream":
        # deterministic derivation; collision-free for the shallow trees used here
        return RngStream(self.seed, self.stream * 100_003 + k + 1)


# ----------------------------------------------------------------- checks


def check_simplex(theta: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.size == 0:
        raise ValueError("simplex vector must be 1-D and nonempty")
    if np.any(theta < -tol) or abs(theta.sum() - 1.0) > tol:
        raise ValueError("entries must be nonnegative and sum to 1")
    return theta


def check_cholesky_correlation(L: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    m = L.shape[0]
    if L.ndim != 2 or L.shape != (m, m):
        raise ValueError("factor must be square")
    if m == 0:
        return L
    if np.any(np.triu(L, 1) != 0):
        raise ValueError("factor must be lower triangular")
    if np.any(np.diag(L) <= 0):
        raise ValueError("diagonal must be positive")
    if np.max(np.abs((L * L).sum(axis=1) - 1.0)) > tol:
        raise ValueError("rows must have unit norm")
    return L


# ---------------------------------------------------------------- densities


def normal_logpdf(x: np.ndarray, mean: np.ndarray, sd: np.ndarray) -> float:
    """Sum of independent normal log densities over coordinates."""
    x, mean, sd = (np.asarray(a, dtype=float) for a in (x, mean, sd))
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    z = (x - mean) / sd
    return float(-0.5 * x.size * LOG_2PI - np.log(sd).sum() - 0.5 * np.dot(z, z))


def studentt_logpdf(x, df: float, loc, scale):
    """Student-t log density; x and scale broadcast elementwise.

    Returns a float for scalar input, else an array of elementwise values.
    """
    if df <= 0:
        raise ValueError("df must be positive")
    x = np.asarray(x, dtype=float)
    scale_arr = np.asarray(scale, dtype=float)
    if np.any(scale_arr <= 0):
        raise ValueError("scale must be positive")
    norm = (
        math.lgamma((df + 1.0) / 2.0)
        - math.lgamma(df / 2.0)
        - 0.5 * math.log(df * math.pi)
        - np.log(scale_arr)
    )
    z = (x - loc) / scale_arr
    out = norm - 0.5 * (df + 1.0) * np.log1p(z * z / df)
    return float(out) if out.ndim == 0 else out


def halfnormal_logpdf(x, scale: float = 1.0):
    """Half-normal log density on [0, inf), elementwise."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    x = np.asarray(x, dtype=float)
    out = np.where(
        x >= 0,
        0.5 * math.log(2.0 / math.pi) - math.log(scale) - 0.5 * (x / scale) ** 2,
        -np.inf,
    )
    return float(out) if out.ndim == 0 else out


def mvn_logpdf_chol(
    x: np.ndarray, mean: np.ndarray, sigma: np.ndarray, chol_corr: np.ndarray
):
    """Multivariate normal log density with covariance diag(sigma) C diag(sigma),
    C = chol_corr @ chol_corr.T. Accepts a single vector or a matrix of rows."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    rows = x[None, :] if single else x
    m = rows.shape[1]
    if m == 0:
        out = np.zeros(rows.shape[0])
        return float(out[0]) if single else out
    u = (rows - mean) / sigma
    v = solve_triangular(chol_corr, u.T, lower=True)
    quad = (v * v).sum(axis=0)
    const = -0.5 * m * LOG_2PI - np.log(sigma).sum() - np.log(np.diag(chol_corr)).sum()
    out = const - 0.5 * quad
    return float(out[0]) if single else out


def logistic_normal_logpdf(
    theta: np.ndarray, mu: np.ndarray, sigma: np.ndarray, chol: np.ndarray
) -> float:
    """Logistic-normal log density on the simplex: the normal density of
    alr(theta) minus the alr-softmax log Jacobian."""
    theta = check_simplex(theta)
    zeta = alr(theta)
    return mvn_logpdf_chol(zeta, mu, sigma, chol) - alr_softmax_log_jacobian(zeta)


def lkj_logdensity(chol: np.ndarray, eta: float) -> float:
    """LKJ log density expressed on the Cholesky factor of the correlation,
    up to a constant: sum over rows k >= 2 of (m - k + 2 eta - 2) log L_kk."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    L = check_cholesky_correlation(chol)
    m = L.shape[0]
    if m <= 1:
        return 0.0
    k = np.arange(2, m + 1)
    coef = m - k + 2.0 * eta - 2.0
    return float(np.dot(coef, np.log(np.diag(L)[1:])))


# --------------------------------------------------------------- transforms


def alr_softmax(zeta: np.ndarray) -> np.ndarray:
    """Map unconstrained alr coordinates to the simplex: softmax of
    [zeta, 0], reference category last."""
    zeta = np.asarray(zeta, dtype=float)
    x = np.append(zeta, 0.0)
    x = x - x.max()  # constant shift, exact
    e = np.exp(x)
    return e / e.sum()


def alr(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    return np.log(theta[:-1]) - math.log(theta[-1])


def alr_softmax_log_jacobian(zeta: np.ndarray) -> float:
    """log |det d theta / d zeta| of the alr-softmax map, which equals
    the sum of log theta_k over all K coordinates."""
    zeta = np.asarray(zeta, dtype=float)
    x = np.append(zeta, 0.0)
    m = x.max()
    lse = m + math.log(np.exp(x - m).sum())
    return float(x.sum() - x.size * lse)


def positive_transform(u: float) -> tuple[float, float]:
    """exp with its log Jacobian; the Jacobian of exp at u is exp(u)."""
    return math.exp(u), float(u)


def _log1m_tanh_sq(y: np.ndarray) -> np.ndarray:
    # log(1 - tanh(y)^2), stable for large |y|
    return 2.0 * (math.log(2.0) - y - np.logaddexp(0.0, -2.0 * y))


def cpc_to_cholesky(y: np.ndarray, dim: int | None = None) -> tuple[np.ndarray, float]:
    """Map unconstrained canonical partial correlations to a Cholesky
    correlation factor.

    y holds the strictly lower triangle in row-major order; tanh maps each
    entry to (-1, 1) and row entries are scaled so every row has unit norm:
    L[i, j] = z[i, j] * prod_{j' < j} sqrt(1 - z[i, j']^2) and the diagonal
    absorbs the remainder. The returned log Jacobian covers both stages.
    `dim` disambiguates the empty-input sizes 0 and 1.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ValueError("y must be 1-D")
    if dim is None:
        m = int(round((1.0 + math.sqrt(1.0 + 8.0 * y.size)) / 2.0))
        if y.size == 0:
            m = 1
    else:
        m = dim
    if m * (m - 1) // 2 != y.size:
        raise ValueError("y length does not match a triangle")
    if m <= 1:
        return np.eye(m), 0.0
    rows, cols = np.tril_indices(m, -1)
    Z = np.zeros((m, m))
    Z[rows, cols] = np.tanh(y)
    A = np.zeros((m, m))
    A[rows, cols] = _log1m_tanh_sq(y)
    excl = np.cumsum(A, axis=1) - A  # exclusive prefix sums per row
    L = Z * np.exp(0.5 * excl)
    np.fill_diagonal(L, np.exp(0.5 * A.sum(axis=1)))
    log_jac = float(A[rows, cols].sum() + 0.5 * excl[rows, cols].sum())
    return L, log_jac


def sample_lkj_cholesky(m: int, eta: float, rng: np.random.Generator) -> np.ndarray:
    """Draw the Cholesky factor of an LKJ(eta) correlation via the onion
    construction (marginal beta draw per added dimension)."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    if m <= 1:
        return np.eye(m)
    beta = eta + (m - 2) / 2.0
    r12 = 2.0 * rng.beta(beta, beta) - 1.0
    R = np.array([[1.0, r12], [r12, 1.0]])
    for k in range(2, m):
        beta -= 0.5
        y = rng.beta(k / 2.0, beta)
        u = rng.standard_normal(k)
        u /= np.linalg.norm(u)
        w = math.sqrt(y) * u
        z = np.linalg.cholesky(R) @ w
        R = np.block([[R, z[:, None]], [z[None, :], np.ones((1, 1))]])
    return np.linalg.cholesky(R)
