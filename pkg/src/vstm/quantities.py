"""Post-fit estimands.

Covariate-conditional predicted proportions, the topic correlation graph with
a modularity partition, first-principal-component summaries of the local
membership locations, and per-image topic listings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernel as K
from .inference import VariationalState, posterior_mean_globals
from .model import GlobalParams, ModelSpec, _softmax_rows
from .util import ValidationError


def posterior_means(
    state: VariationalState,
    spec: ModelSpec | None = None,
    n_draws: int = 4096,
    rng: K.RngStream | None = None,
) -> GlobalParams:
    """Point estimates of the global blocks; see posterior_mean_globals.
    The model shape can be read off the state, so spec is optional."""
    if spec is None:
        k, d = state.params["beta.loc"].shape
        p = state.params["gamma.loc"].shape[0]
        spec = ModelSpec(k=k, d=d, p=p)
    return posterior_mean_globals(state, spec, n_draws=n_draws, rng=rng)


# ------------------------------------------------------------- predictions


@dataclass
class PredictionRequest:
    """Named covariate profiles to predict at; rows follow the fitted
    design's column order."""

    profiles: list[tuple[str, np.ndarray]]
    mc_draws: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.mc_draws < 1:
            raise ValidationError("mc_draws must be positive")
        self.profiles = [
            (str(name), np.asarray(x, dtype=float).ravel()) for name, x in self.profiles
        ]
        if not self.profiles:
            raise ValidationError("need at least one profile")


@dataclass
class PredictedProportions:
    profile: str
    mean: np.ndarray  # (K,)
    mc_se: np.ndarray  # (K,)


def predict_topic_proportions(
    request: PredictionRequest, params: GlobalParams
) -> list[PredictedProportions]:
    """Marginal expected memberships at each profile: average
    alr_softmax(x Γ̂ + ε) over ε ~ normal(0, Σ̂_θ). One ε set is shared across
    profiles (common random numbers), so contrasts between profiles are
    smoother than the per-profile standard errors suggest."""
    p, m = params.gamma.shape
    for name, x in request.profiles:
        if x.shape != (p,):
            raise ValidationError(f"profile {name!r} has {x.size} entries, design has {p}")
    if m == 0:
        return [
            PredictedProportions(name, np.ones(1), np.zeros(1))
            for name, _ in request.profiles
        ]
    gen = K.RngStream(request.seed).generator()
    s = request.mc_draws
    scaled = params.sigma_theta[:, None] * params.chol_omega
    eps = gen.standard_normal((s, m)) @ scaled.T
    out = []
    for name, x in request.profiles:
        theta = _softmax_rows(x @ params.gamma + eps)
        mean = theta.mean(axis=0)
        if s > 1:
            se = theta.std(axis=0, ddof=1) / np.sqrt(s)
        else:
            se = np.zeros(m + 1)
        out.append(PredictedProportions(name, mean, se))
    return out


# ------------------------------------------------------------------ graph


@dataclass
class TopicGraph:
    """Correlation graph over the K-1 topics that carry alr coordinates
    (the reference topic has no correlation row)."""

    nodes: list[int]
    labels: list[str]
    edges: list[tuple[int, int, float]]  # i < j, weight = Ω̂_ij
    communities: list[int]


def _greedy_modularity(m: int, edges: list[tuple[int, int, float]]) -> list[int]:
    """Agglomerative modularity maximization: repeatedly merge the connected
    community pair with the largest gain until no merge helps. Deterministic
    (first best pair in index order wins ties)."""
    comm_of = list(range(m))
    if not edges:
        return comm_of
    two_w = 2.0 * sum(w for _, _, w in edges)
    e = np.zeros((m, m))  # normalized weight between communities
    for i, j, w in edges:
        e[i, j] += w / two_w
        e[j, i] += w / two_w
    a = e.sum(axis=1)
    active = list(range(m))
    while len(active) > 1:
        best, best_gain = None, 1e-12
        for ii in range(len(active)):
            for jj in range(ii + 1, len(active)):
                ci, cj = active[ii], active[jj]
                if e[ci, cj] <= 0.0:
                    continue
                gain = 2.0 * (e[ci, cj] - a[ci] * a[cj])
                if gain > best_gain:
                    best, best_gain = (ci, cj), gain
        if best is None:
            break
        ci, cj = best
        for d in active:
            if d in (ci, cj):
                continue
            e[ci, d] += e[cj, d]
            e[d, ci] = e[ci, d]
        e[ci, ci] += e[cj, cj] + 2.0 * e[ci, cj]
        e[ci, cj] = e[cj, ci] = 0.0
        a[ci] += a[cj]
        active.remove(cj)
        comm_of = [ci if c == cj else c for c in comm_of]
    relabel: dict[int, int] = {}
    return [relabel.setdefault(c, len(relabel)) for c in comm_of]


def topic_correlation_graph(
    params: GlobalParams, threshold: float = 0.1
) -> TopicGraph:
    """Edges where the correlation exceeds the threshold, communities from
    greedy modularity on that positive-edge graph."""
    m = params.chol_omega.shape[0]
    omega = params.chol_omega @ params.chol_omega.T
    edges = [
        (i, j, float(omega[i, j]))
        for i in range(m)
        for j in range(i + 1, m)
        if omega[i, j] > threshold
    ]
    return TopicGraph(
        nodes=list(range(m)),
        labels=[f"topic_{i}" for i in range(m)],
        edges=edges,
        communities=_greedy_modularity(m, edges),
    )


# -------------------------------------------------------------------- PCA


def principal_component_scores(
    lambda_theta: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, float]:
    """First principal component of the column-centered local membership
    locations: per-image scores, unit-norm loadings (largest-magnitude entry
    made positive), and the share of variance explained."""
    lam = np.asarray(lambda_theta, dtype=float)
    if lam.ndim != 2 or lam.shape[0] < 2 or lam.shape[1] < 1:
        raise ValidationError("need at least two rows and one column")
    centered = lam - lam.mean(axis=0)
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    total = float((svals ** 2).sum())
    if total <= 0.0:
        raise ValidationError("memberships carry no variation")
    loadings = vt[0]
    if loadings[np.argmax(np.abs(loadings))] < 0:
        loadings = -loadings
    return centered @ loadings, loadings, float(svals[0] ** 2) / total


# --------------------------------------------------------------- listings


def top_images(theta: np.ndarray, k: int, n: int) -> np.ndarray:
    """Indices of the n images with the largest membership in topic k,
    ties broken by ascending image index; n is clamped to the corpus."""
    theta = np.asarray(theta, dtype=float)
    if not 0 <= k < theta.shape[1]:
        raise ValidationError(f"topic {k} out of range")
    if n < 1:
        raise ValidationError("count must be positive")
    order = np.argsort(-theta[:, k], kind="stable")
    return order[: min(n, theta.shape[0])]


@dataclass
class MixedImage:
    image: int
    topics: np.ndarray  # top five, proportion descending
    proportions: np.ndarray


def mixed_images(theta: np.ndarray, floor: float = 0.2) -> list[MixedImage]:
    """Images whose memberships put at least `floor` weight on two or more
    topics, each with its top five topics."""
    if not 0.0 < floor <= 0.5:
        raise ValidationError("floor must lie in (0, 0.5]")
    theta = np.asarray(theta, dtype=float)
    hits = np.flatnonzero((theta >= floor).sum(axis=1) >= 2)
    out = []
    for i in hits:
        order = np.argsort(-theta[i], kind="stable")[:5]
        out.append(MixedImage(int(i), order, theta[i, order]))
    return out
