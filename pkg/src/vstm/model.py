"""Generative model: embeddings as topic-weighted mixtures of prototype
vectors with logistic-normal mixed memberships whose mean depends on
covariates.

z_i ~ normal(theta_i' B, I), theta_i ~ logistic-normal(x_i Gamma, Sigma_theta)
with Sigma_theta = diag(sigma) Omega diag(sigma). Local state is kept in
unconstrained alr coordinates zeta_i = alr(theta_i).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernel as K


@dataclass
class ModelSpec:
    """Dimensions and hyperparameters. k = 1 is allowed and degenerates
    every simplex/correlation block to empty arrays."""

    k: int
    d: int
    p: int
    nu_gamma: float = 5.0
    sigma_gamma: float = 2.5
    nu_beta: float = 5.0
    sigma_beta: float = 1.0
    eta_theta: float = 1.0
    sd_scale: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.k < 1 or self.d < 1 or self.p < 1:
            raise ValueError("k, d, p must be positive")
        for name in ("nu_gamma", "sigma_gamma", "nu_beta", "sigma_beta", "eta_theta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.sd_scale is None:
            self.sd_scale = np.ones(self.d)
        self.sd_scale = np.asarray(self.sd_scale, dtype=float)
        if self.sd_scale.shape != (self.d,) or np.any(self.sd_scale <= 0):
            raise ValueError("sd_scale must be a positive vector of length d")

    @property
    def n_cpc(self) -> int:
        m = self.k - 1
        return m * (m - 1) // 2


@dataclass
class GlobalParams:
    """Constrained global parameters: prototypes, prevalence coefficients,
    and the membership covariance split into scales and a correlation factor."""

    beta: np.ndarray        # (k, d)
    gamma: np.ndarray       # (p, k-1)
    sigma_theta: np.ndarray  # (k-1,)
    chol_omega: np.ndarray  # (k-1, k-1) Cholesky correlation factor

    def validate(self, spec: ModelSpec) -> "GlobalParams":
        m = spec.k - 1
        if self.beta.shape != (spec.k, spec.d):
            raise ValueError("beta shape mismatch")
        if self.gamma.shape != (spec.p, m):
            raise ValueError("gamma shape mismatch")
        if self.sigma_theta.shape != (m,) or np.any(self.sigma_theta <= 0):
            raise ValueError("sigma_theta must be positive with length k-1")
        K.check_cholesky_correlation(self.chol_omega)
        if self.chol_omega.shape != (m, m):
            raise ValueError("chol_omega shape mismatch")
        return self


def log_likelihood(z: np.ndarray, theta: np.ndarray, beta: np.ndarray) -> float:
    """Log density of one embedding given its memberships: identity
    residual covariance, so the quadratic term is a plain sum of squares."""
    z = np.asarray(z, dtype=float)
    resid = z - np.asarray(theta, dtype=float) @ np.asarray(beta, dtype=float)
    return float(-0.5 * z.size * K.LOG_2PI - 0.5 * np.dot(resid, resid))


def _log_likelihood_rows(Z: np.ndarray, Theta: np.ndarray, beta: np.ndarray) -> np.ndarray:
    resid = Z - Theta @ beta
    return -0.5 * Z.shape[1] * K.LOG_2PI - 0.5 * (resid * resid).sum(axis=1)


def log_prior_globals(params: GlobalParams, spec: ModelSpec) -> float:
    """Student-t priors on beta (scale stretched per embedding dimension)
    and gamma, half-normal on the membership scales, LKJ on the correlation."""
    total = float(
        np.sum(
            K.studentt_logpdf(
                params.beta, spec.nu_beta, 0.0, spec.sigma_beta * spec.sd_scale[None, :]
            )
        )
    )
    if spec.k > 1:
        total += float(
            np.sum(K.studentt_logpdf(params.gamma, spec.nu_gamma, 0.0, spec.sigma_gamma))
        )
        total += float(np.sum(K.halfnormal_logpdf(params.sigma_theta)))
        total += K.lkj_logdensity(params.chol_omega, spec.eta_theta)
    return total


def local_logprior_unconstrained(
    zeta: np.ndarray, x: np.ndarray, params: GlobalParams
) -> float:
    """Prior of one image's membership state in alr coordinates: plain
    multivariate normal, no Jacobian term."""
    mu = np.asarray(x, dtype=float) @ params.gamma
    return K.mvn_logpdf_chol(
        np.asarray(zeta, dtype=float), mu, params.sigma_theta, params.chol_omega
    )


def _local_logprior_rows(
    zetas: np.ndarray, X: np.ndarray, params: GlobalParams
) -> np.ndarray:
    if zetas.shape[1] == 0:
        return np.zeros(zetas.shape[0])
    mu = X @ params.gamma
    return K.mvn_logpdf_chol(zetas - mu, np.zeros(zetas.shape[1]), params.sigma_theta, params.chol_omega)


def _softmax_rows(zetas: np.ndarray) -> np.ndarray:
    n = zetas.shape[0]
    x = np.hstack([zetas, np.zeros((n, 1))])
    x -= x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


def log_joint(
    Z: np.ndarray,
    X: np.ndarray,
    zetas: np.ndarray,
    params: GlobalParams,
    spec: ModelSpec,
    scale: float = 1.0,
) -> float:
    """Scaled data terms (likelihood + local prior over the batch) plus the
    unscaled global prior. scale is N over batch size for minibatches."""
    Z, X, zetas = (np.asarray(a, dtype=float) for a in (Z, X, zetas))
    if Z.shape[0] != X.shape[0] or Z.shape[0] != zetas.shape[0]:
        raise ValueError("batch row counts disagree")
    total = log_prior_globals(params, spec)
    if Z.shape[0] == 0:
        return total
    Theta = _softmax_rows(zetas)
    data = float(_log_likelihood_rows(Z, Theta, params.beta).sum())
    data += float(_local_logprior_rows(zetas, X, params).sum())
    return scale * data + total
