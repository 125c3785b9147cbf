"""Doubly stochastic variational inference for the embedding topic model.

Mean-field Gaussians over every unconstrained block (prototypes, prevalence
coefficients, log membership scales, partial-correlation coordinates, and
per-image alr memberships), reparameterized draws, minibatch-scaled ELBO,
and bias-corrected Adam ascent. Gradients come from the in-repo tape; the
per-image block can be replaced by an amortizing MLP that maps (z_i, x_i)
to its variational location and scale.
"""

from __future__ import annotations

import math
import struct
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernel as K
from . import tape as T
from .model import GlobalParams, ModelSpec
from .util import ValidationError, array_digest

GLOBAL_BLOCKS = ("beta", "gamma", "log_sigma", "cpc")
_INIT_RHO = math.log(0.1)


class DivergenceError(RuntimeError):
    """Non-finite objective; carries the last state with a finite ELBO."""

    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


@dataclass
class FitConfig:
    iterations: int = 25_000
    batch_size: int | None = None  # None means full batch
    mc_samples: int = 1
    learning_rate: float = 0.005
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    amortized: bool = False
    amortizer_width: int = 256
    amortizer_depth: int = 1
    elbo_eval_every: int = 50
    theta_draws: int = 256

    def __post_init__(self):
        if self.iterations < 1 or self.mc_samples < 1 or self.elbo_eval_every < 1:
            raise ValidationError("iterations, mc_samples, elbo_eval_every must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValidationError("adam betas must lie in [0, 1)")
        if self.amortizer_width < 1 or self.amortizer_depth < 1:
            raise ValidationError("amortizer width and depth must be positive")
        if self.theta_draws < 1:
            raise ValidationError("theta_draws must be positive")


@dataclass
class VariationalState:
    """Flat parameter table. Gaussian blocks appear as '<name>.loc' and
    '<name>.log_scale'; amortizer weights as 'amort.W<i>' / 'amort.b<i>'
    plus 'amort.Wout' / 'amort.bout'. Exactly one of the zeta block or the
    amortizer is present."""

    params: dict[str, np.ndarray]
    n: int
    amortized: bool

    def validate(self, spec: ModelSpec) -> "VariationalState":
        m = spec.k - 1
        shapes = global_block_shapes(spec)
        for name, shape in shapes.items():
            for suffix in (".loc", ".log_scale"):
                if self.params[name + suffix].shape != shape:
                    raise ValidationError(f"block {name}{suffix} has wrong shape")
        has_zeta = "zeta.loc" in self.params
        has_amort = any(k.startswith("amort.") for k in self.params)
        if has_zeta == has_amort:
            raise ValidationError("state needs exactly one of zeta block or amortizer")
        if has_zeta and self.params["zeta.loc"].shape != (self.n, m):
            raise ValidationError("zeta block has wrong shape")
        return self

    def copy(self) -> "VariationalState":
        return VariationalState(
            {k: v.copy() for k, v in self.params.items()}, self.n, self.amortized
        )


def global_block_shapes(spec: ModelSpec) -> dict[str, tuple]:
    m = spec.k - 1
    return {
        "beta": (spec.k, spec.d),
        "gamma": (spec.p, m),
        "log_sigma": (m,),
        "cpc": (spec.n_cpc,),
    }


def _kmeanspp_rows(Z: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    """k distinct data rows, each next pick weighted by squared distance to
    the closest already-chosen row."""
    n = Z.shape[0]
    chosen = [int(gen.integers(n))]
    d2 = ((Z - Z[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            i = int(gen.choice(n, p=d2 / total))
        else:
            pool = np.setdiff1d(np.arange(n), np.array(chosen))
            i = int(gen.choice(pool))
        chosen.append(i)
        d2 = np.minimum(d2, ((Z - Z[i]) ** 2).sum(axis=1))
    return Z[chosen].astype(float).copy()


def _kmeans_rows(
    Z: np.ndarray, k: int, gen: np.random.Generator, iters: int = 30
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd refinement of the k-means++ seeds. Raw data rows are mixtures,
    so seeding alone leaves duplicate prototypes near the dominant mode and
    the optimizer tends to stay in that basin; refined centroids plus the
    returned hard labels give it one close to the generative structure."""
    centers = _kmeanspp_rows(Z, k, gen)
    sq = (Z * Z).sum(axis=1)
    labels = np.zeros(Z.shape[0], dtype=int)
    for _ in range(iters):
        d2 = sq[:, None] - 2.0 * (Z @ centers.T) + (centers * centers).sum(axis=1)[None]
        labels = d2.argmin(axis=1)
        new = centers.copy()  # an emptied cluster keeps its previous center
        for j in range(k):
            sel = labels == j
            if sel.any():
                new[j] = Z[sel].mean(axis=0)
        done = np.allclose(new, centers)
        centers = new
        if done:
            break
    return centers, labels


def init_state(
    Z: np.ndarray, X: np.ndarray, spec: ModelSpec, config: FitConfig, rng: K.RngStream
) -> VariationalState:
    n = Z.shape[0]
    m = spec.k - 1
    params: dict[str, np.ndarray] = {}
    centers, labels = _kmeans_rows(Z, spec.k, rng.child(0).generator())
    params["beta.loc"] = centers
    params["beta.log_scale"] = np.full((spec.k, spec.d), _INIT_RHO)
    for i, name in enumerate(("gamma", "log_sigma", "cpc"), start=1):
        shape = global_block_shapes(spec)[name]
        gen = rng.child(i).generator()
        params[f"{name}.loc"] = 0.1 * gen.standard_normal(shape)
        params[f"{name}.log_scale"] = np.full(shape, _INIT_RHO)
    gen = rng.child(4).generator()
    if config.amortized:
        fan_in = spec.d + spec.p
        for layer in range(config.amortizer_depth):
            w = gen.standard_normal((fan_in, config.amortizer_width))
            params[f"amort.W{layer}"] = w * math.sqrt(2.0 / fan_in)
            params[f"amort.b{layer}"] = np.zeros(config.amortizer_width)
            fan_in = config.amortizer_width
        # zero output layer: every image starts at loc 0, scale 1
        params["amort.Wout"] = np.zeros((fan_in, 2 * m))
        params["amort.bout"] = np.zeros(2 * m)
    else:
        # soft warm start from the cluster labels: 0.6 on the own cluster
        # keeps memberships mobile while breaking the uniform symmetry
        resp = np.full((n, spec.k), 0.4 / max(spec.k - 1, 1))
        resp[np.arange(n), labels] = 0.6
        zeta0 = np.log(resp[:, :m] / resp[:, -1:])
        params["zeta.loc"] = zeta0 + 0.1 * gen.standard_normal((n, m))
        params["zeta.log_scale"] = np.full((n, m), _INIT_RHO)
    return VariationalState(params, n, config.amortized).validate(spec)


# ------------------------------------------------------------- amortizer


def _amort_depth(params: dict[str, np.ndarray]) -> int:
    depth = 0
    while f"amort.W{depth}" in params:
        depth += 1
    return depth


def amortize_forward(
    state: VariationalState, Z: np.ndarray, X: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """MLP from (z_i, x_i) to the per-image variational (location, scale);
    the second half of the output passes through exp so scales are positive."""
    p = state.params
    a = np.hstack([Z, X])
    for layer in range(_amort_depth(p)):
        a = np.maximum(a @ p[f"amort.W{layer}"] + p[f"amort.b{layer}"], 0.0)
    out = a @ p["amort.Wout"] + p["amort.bout"]
    m = out.shape[1] // 2
    return out[:, :m], np.exp(out[:, m:])


def _amort_graph(leaves, Zb, Xb):
    a = None
    h = np.hstack([Zb, Xb])
    depth = _amort_depth({k: v.value for k, v in leaves.items()})
    for layer in range(depth):
        pre = T.matmul(h if a is None else a, leaves[f"amort.W{layer}"]) + leaves[f"amort.b{layer}"]
        a = T.relu(pre)
    out = T.matmul(a, leaves["amort.Wout"]) + leaves["amort.bout"]
    m = out.value.shape[1] // 2
    lam = T.getitem(out, (slice(None), slice(0, m)))
    lognu = T.getitem(out, (slice(None), slice(m, 2 * m)))
    return lam, lognu


# ----------------------------------------------------------- sampling


@dataclass
class ParamDraw:
    globals_: GlobalParams
    zeta: np.ndarray | None
    unconstrained: dict[str, np.ndarray]
    log_jac: float


def draw_eps(
    state: VariationalState,
    spec: ModelSpec,
    n_rows: int,
    s: int,
    gen: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Standard-normal innovations for every block, leading axis of size s.
    Draw order is fixed so streams replay identically."""
    m = spec.k - 1
    eps = {}
    for name, shape in global_block_shapes(spec).items():
        eps[name] = gen.standard_normal((s, *shape))
    eps["zeta"] = gen.standard_normal((s, n_rows, m))
    return eps


def sample_variational(
    state: VariationalState,
    spec: ModelSpec,
    eps: dict[str, np.ndarray],
    inputs: tuple[np.ndarray, np.ndarray] | None = None,
) -> ParamDraw:
    """One reparameterized draw pushed through the constrained transforms.
    eps arrays here carry no leading sample axis."""
    m = spec.k - 1
    p = state.params
    unc = {}
    for name in GLOBAL_BLOCKS:
        unc[name] = p[f"{name}.loc"] + np.exp(p[f"{name}.log_scale"]) * eps[name]
    sigma = np.exp(unc["log_sigma"])
    chol, lj_cpc = K.cpc_to_cholesky(unc["cpc"], dim=m)
    globals_ = GlobalParams(
        beta=unc["beta"], gamma=unc["gamma"], sigma_theta=sigma, chol_omega=chol
    )
    zeta = None
    if "zeta" in eps and eps["zeta"] is not None:
        if state.amortized:
            if inputs is None:
                raise ValidationError("amortized draw needs (Z, X) inputs")
            lam, nu = amortize_forward(state, *inputs)
        else:
            lam = p["zeta.loc"]
            nu = np.exp(p["zeta.log_scale"])
        zeta = lam + nu * eps["zeta"]
    log_jac = float(unc["log_sigma"].sum()) + lj_cpc
    return ParamDraw(globals_, zeta, unc, log_jac)


# ------------------------------------------------------------ elbo graph


def _studentt_sum_var(x, df, scale):
    """Tape Student-t log density summed over entries; scale broadcasts."""
    xv = T.val(x)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), xv.shape)
    const = xv.size * (
        math.lgamma((df + 1.0) / 2.0) - math.lgamma(df / 2.0) - 0.5 * math.log(df * math.pi)
    ) - float(np.log(scale).sum())
    z2 = (x / scale) ** 2 * (1.0 / df)
    return T.tsum(T.tlog(z2 + 1.0)) * (-0.5 * (df + 1.0)) + const


def _negq_gaussian(rho_var, eps_s) -> T.Var:
    # minus the Gaussian log density of its own reparameterized draw
    const = 0.5 * eps_s.size * K.LOG_2PI + 0.5 * float((eps_s * eps_s).sum())
    return T.tsum(rho_var) + const


def _elbo_graph(Zb, Xb, idx, state, spec, n_total, eps):
    """Reparameterized ELBO estimate as a tape graph; returns the scalar
    Var and the leaf table."""
    nb, d = Zb.shape
    m = spec.k - 1
    scale = n_total / nb
    s_draws = eps["beta"].shape[0]
    leaves = {name: T.Var(arr) for name, arr in state.params.items()}
    total = None
    for s in range(s_draws):
        draws = {}
        negq = None
        for name in GLOBAL_BLOCKS:
            loc, rho = leaves[f"{name}.loc"], leaves[f"{name}.log_scale"]
            e = eps[name][s]
            draws[name] = loc + T.texp(rho) * e
            term = _negq_gaussian(rho, e)
            negq = term if negq is None else negq + term
        beta_v = draws["beta"]
        u_sigma = draws["log_sigma"]
        sigma = T.texp(u_sigma)
        chain = T.cpc_chain(draws["cpc"], m)

        if state.amortized:
            lam, lognu = _amort_graph(leaves, Zb, Xb)
        else:
            lam = T.take_rows(leaves["zeta.loc"], idx)
            lognu = T.take_rows(leaves["zeta.log_scale"], idx)
        e_z = eps["zeta"][s]
        zrows = lam + T.texp(lognu) * e_z
        negq_local = _negq_gaussian(lognu, e_z)

        theta = T.softmax_rows_with_ref(zrows)
        resid = Zb - theta @ beta_v
        ll = T.tsum(resid * resid) * -0.5 - 0.5 * nb * d * K.LOG_2PI

        if m > 0:
            mu = T.matmul(Xb, draws["gamma"])
            u = (zrows - mu) / sigma
            v = T.tri_solve_lower(chain.L, T.transpose(u))
            lp_local = (
                T.tsum(v * v) * -0.5
                - float(nb) * (T.tsum(u_sigma) + T.tsum(chain.log_diag))
                - 0.5 * nb * m * K.LOG_2PI
            )
        else:
            lp_local = T.Var(np.zeros(()))

        prior = _studentt_sum_var(
            beta_v, spec.nu_beta, spec.sigma_beta * spec.sd_scale[None, :]
        )
        if m > 0:
            prior = prior + _studentt_sum_var(draws["gamma"], spec.nu_gamma, spec.sigma_gamma)
            prior = prior + (
                T.tsum(sigma * sigma) * -0.5 + 0.5 * m * math.log(2.0 / math.pi)
            )
            if m > 1:
                coef = spec.k - 1 - np.arange(2, m + 1) + 2.0 * spec.eta_theta - 2.0
                log_diag_tail = T.getitem(chain.log_diag, slice(1, None))
                prior = prior + T.tsum(log_diag_tail * coef)
        jac = T.tsum(u_sigma) + chain.log_jac
        elbo_s = (ll + lp_local + negq_local) * scale + prior + negq + jac
        total = elbo_s if total is None else total + elbo_s
    return total * (1.0 / s_draws), leaves


def elbo_with_eps(Zb, Xb, idx, state, spec, n_total, eps) -> float:
    """Deterministic estimator value for fixed innovations."""
    graph, _ = _elbo_graph(Zb, Xb, idx, state, spec, n_total, eps)
    return float(graph.value)


def elbo_estimate(Zb, Xb, idx, state, spec, config, n_total, rng: K.RngStream) -> float:
    gen = rng.generator()
    eps = draw_eps(state, spec, Zb.shape[0], config.mc_samples, gen)
    return elbo_with_eps(Zb, Xb, idx, state, spec, n_total, eps)


def _offending_block(state, spec, eps) -> str:
    p = state.params
    for name in GLOBAL_BLOCKS:
        draw = p[f"{name}.loc"] + np.exp(p[f"{name}.log_scale"]) * eps[name][0]
        if not np.all(np.isfinite(draw)):
            return name
        if name == "log_sigma" and not np.all(np.isfinite(np.exp(draw))):
            return name
    for key, arr in p.items():
        if not np.all(np.isfinite(arr)):
            return key.split(".")[0]
    return "objective"


def elbo_value_and_grad(
    Zb, Xb, idx, state, spec, n_total, eps
) -> tuple[float, dict[str, np.ndarray]]:
    """Estimator value plus gradients for every state array (zeros where a
    block is untouched by this batch)."""
    graph, leaves = _elbo_graph(Zb, Xb, idx, state, spec, n_total, eps)
    value = float(graph.value)
    if not math.isfinite(value):
        raise DivergenceError(
            f"non-finite ELBO (block {_offending_block(state, spec, eps)})"
        )
    T.backward(graph)
    grads = {
        name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in leaves.items()
    }
    return value, grads


# ------------------------------------------------------------------ adam


@dataclass
class AdamMoments:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamMoments":
        return cls(
            {k: np.zeros_like(v) for k, v in params.items()},
            {k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(
    state: VariationalState,
    grads: dict[str, np.ndarray],
    moments: AdamMoments,
    config: FitConfig,
    t: int,
) -> None:
    """Bias-corrected Adam ascent step, in place."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        m = moments.m[name]
        v = moments.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        state.params[name] += config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


# ------------------------------------------------------------------- fit


@dataclass
class FitResult:
    globals_: GlobalParams
    theta: np.ndarray
    lambda_theta: np.ndarray
    elbo_trace: np.ndarray
    manifest: dict
    state: VariationalState
    moments: AdamMoments = field(repr=False, default=None)  # type: ignore[assignment]


def _validate_fit_inputs(Z, X, spec, config, require_k_rows=True):
    Z = np.asarray(Z, dtype=float)
    X = np.asarray(X, dtype=float)
    if Z.ndim != 2 or X.ndim != 2 or Z.shape[0] != X.shape[0]:
        raise ValidationError("embeddings and design must be matrices with equal rows")
    if Z.shape[1] != spec.d or X.shape[1] != spec.p:
        raise ValidationError("column counts disagree with the model spec")
    if not (np.all(np.isfinite(Z)) and np.all(np.isfinite(X))):
        raise ValidationError("inputs must be finite")
    n = Z.shape[0]
    if n < 1:
        raise ValidationError("need at least one image")
    # k-means++ seeding needs k distinct rows; refits of held-out images don't.
    if require_k_rows and spec.k > n:
        raise ValidationError("more topics than images")
    batch = config.batch_size if config.batch_size is not None else n
    if batch > n:
        raise ValidationError("batch_size exceeds the number of images")
    return Z, X, n, batch


def _epoch_batches(n, batch, gen):
    perm = gen.permutation(n)
    for start in range(0, n, batch):
        yield perm[start:start + batch]


def _manifest(spec, config, rng, Z, X, wall_clock):
    cfg = asdict(config)
    model = {
        "k": spec.k, "d": spec.d, "p": spec.p,
        "nu_gamma": spec.nu_gamma, "sigma_gamma": spec.sigma_gamma,
        "nu_beta": spec.nu_beta, "sigma_beta": spec.sigma_beta,
        "eta_theta": spec.eta_theta,
        "sd_scale": [float(x) for x in spec.sd_scale],
    }
    return {
        "config": cfg,
        "model": model,
        "data": {
            "n_images": int(Z.shape[0]),
            "embedding_dim": int(Z.shape[1]),
            "design_columns": int(X.shape[1]),
            "embeddings_sha256": array_digest(Z),
            "design_sha256": array_digest(X),
        },
        "seed_stream": {"seed": rng.seed, "stream": rng.stream},
        "versions": {
            "vstm": __import__("vstm").__version__,
            "numpy": np.__version__,
            "python": "%d.%d.%d" % sys.version_info[:3],
        },
        "wall_clock_seconds": wall_clock,
    }


def fit(
    Z: np.ndarray,
    X: np.ndarray,
    spec: ModelSpec,
    config: FitConfig,
    rng: K.RngStream | None = None,
) -> FitResult:
    """Run the optimization from scratch. Embeddings are expected centered;
    identical (data, spec, config, rng) reproduce identical results bit for
    bit. Raises DivergenceError with the last finite state if the objective
    leaves the reals."""
    Z, X, n, batch = _validate_fit_inputs(Z, X, spec, config)
    rng = rng if rng is not None else K.RngStream(config.seed)
    started = time.perf_counter()
    state = init_state(Z, X, spec, config, rng.child(0))
    moments = AdamMoments.zeros_like(state.params)
    gen_shuffle = rng.child(1).generator()
    gen_eps = rng.child(2).generator()
    trace = []
    last_finite = state.copy()
    batches = iter(())
    step = 0
    while step < config.iterations:
        idx = next(batches, None)
        if idx is None or idx.size == 0:
            batches = _epoch_batches(n, batch, gen_shuffle)
            idx = next(batches)
        step += 1
        eps = draw_eps(state, spec, idx.size, config.mc_samples, gen_eps)
        try:
            value, grads = elbo_value_and_grad(Z[idx], X[idx], idx, state, spec, n, eps)
        except DivergenceError as err:
            raise DivergenceError(str(err), state=last_finite, step=step) from None
        last_finite = state.copy()
        adam_step(state, grads, moments, config, step)
        if step % config.elbo_eval_every == 0:
            trace.append(value)
    theta, lambda_theta = theta_posterior_mean(
        state, spec, Z, X, config.theta_draws, rng.child(3)
    )
    globals_hat = posterior_mean_globals(state, spec, rng=rng.child(4))
    manifest = _manifest(spec, config, rng, Z, X, time.perf_counter() - started)
    return FitResult(
        globals_=globals_hat,
        theta=theta,
        lambda_theta=lambda_theta,
        elbo_trace=np.asarray(trace),
        manifest=manifest,
        state=state,
        moments=moments,
    )


# --------------------------------------------------------------- refit


@dataclass
class RefitResult:
    theta: np.ndarray
    lambda_theta: np.ndarray
    state: VariationalState
    elbo_trace: np.ndarray


def _local_elbo_graph(Zb, Xb, idx, zloc, zrho, globals_, spec, n_total, eps):
    nb, d = Zb.shape
    m = spec.k - 1
    scale = n_total / nb
    s_draws = eps.shape[0]
    total = None
    for s in range(s_draws):
        lam = T.take_rows(zloc, idx)
        lognu = T.take_rows(zrho, idx)
        e_z = eps[s]
        zrows = lam + T.texp(lognu) * e_z
        theta = T.softmax_rows_with_ref(zrows)
        resid = Zb - theta @ globals_.beta
        ll = T.tsum(resid * resid) * -0.5 - 0.5 * nb * d * K.LOG_2PI
        if m > 0:
            mu = Xb @ globals_.gamma
            u = (zrows - mu) / globals_.sigma_theta
            v = T.tri_solve_lower(globals_.chol_omega, T.transpose(u))
            const = (
                -float(np.log(globals_.sigma_theta).sum())
                - float(np.log(np.diag(globals_.chol_omega)).sum())
                - 0.5 * m * K.LOG_2PI
            )
            lp = T.tsum(v * v) * -0.5 + nb * const
        else:
            lp = T.Var(np.zeros(()))
        negq = _negq_gaussian(lognu, e_z)
        term = (ll + lp + negq) * scale
        total = term if total is None else total + term
    return total * (1.0 / s_draws)


def refit_local(
    Z: np.ndarray,
    X: np.ndarray,
    globals_: GlobalParams,
    spec: ModelSpec,
    config: FitConfig,
    rng: K.RngStream | None = None,
) -> RefitResult:
    """Optimize only the per-image variational block for new images, all
    global parameters frozen at the provided point values."""
    Z, X, n, batch = _validate_fit_inputs(Z, X, spec, config, require_k_rows=False)
    globals_.validate(spec)
    rng = rng if rng is not None else K.RngStream(config.seed)
    m = spec.k - 1
    gen_init = rng.child(0).generator()
    zloc = 0.1 * gen_init.standard_normal((n, m))
    zrho = np.full((n, m), _INIT_RHO)
    trace: list[float] = []
    if m > 0:
        params = {"zeta.loc": zloc, "zeta.log_scale": zrho}
        moments = AdamMoments.zeros_like(params)
        gen_shuffle = rng.child(1).generator()
        gen_eps = rng.child(2).generator()
        batches = iter(())
        step = 0
        while step < config.iterations:
            idx = next(batches, None)
            if idx is None or idx.size == 0:
                batches = _epoch_batches(n, batch, gen_shuffle)
                idx = next(batches)
            step += 1
            eps = gen_eps.standard_normal((config.mc_samples, idx.size, m))
            leaves = {k: T.Var(v) for k, v in params.items()}
            graph = _local_elbo_graph(
                Z[idx], X[idx], idx, leaves["zeta.loc"], leaves["zeta.log_scale"],
                globals_, spec, n, eps,
            )
            value = float(graph.value)
            if not math.isfinite(value):
                raise DivergenceError("non-finite ELBO (block zeta)", step=step)
            T.backward(graph)
            grads = {
                k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
                for k, leaf in leaves.items()
            }
            state_view = VariationalState(params, n, False)
            adam_step(state_view, grads, moments, config, step)
            if step % config.elbo_eval_every == 0:
                trace.append(value)
    state = VariationalState(
        {"zeta.loc": zloc, "zeta.log_scale": zrho}, n, False
    )
    theta, lambda_theta = _theta_from_local(
        zloc, np.exp(zrho), config.theta_draws, rng.child(3).generator()
    )
    return RefitResult(theta, lambda_theta, state, np.asarray(trace))


# ------------------------------------------------------- posterior summaries


def _theta_from_local(lam, nu, n_draws, gen):
    n, m = lam.shape
    acc = np.zeros((n, m + 1))
    for _ in range(n_draws):
        zeta = lam + nu * gen.standard_normal((n, m))
        x = np.hstack([zeta, np.zeros((n, 1))])
        x -= x.max(axis=1, keepdims=True)
        e = np.exp(x)
        acc += e / e.sum(axis=1, keepdims=True)
    return acc / n_draws, lam.copy()


def theta_posterior_mean(
    state: VariationalState,
    spec: ModelSpec,
    Z: np.ndarray | None,
    X: np.ndarray | None,
    n_draws: int,
    rng: K.RngStream,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo mean of the simplex memberships under the per-image
    variational Gaussians."""
    if state.amortized:
        lam, nu = amortize_forward(state, Z, X)
    else:
        lam = state.params["zeta.loc"]
        nu = np.exp(state.params["zeta.log_scale"])
    return _theta_from_local(lam, nu, n_draws, rng.generator())


def posterior_mean_globals(
    state: VariationalState,
    spec: ModelSpec,
    n_draws: int = 4096,
    rng: K.RngStream | None = None,
) -> GlobalParams:
    """Posterior means of the global blocks. Identity-transformed blocks are
    their variational locations; scales and the correlation average Monte
    Carlo draws pushed through their transforms."""
    rng = rng if rng is not None else K.RngStream(0, 9)
    gen = rng.generator()
    p = state.params
    m = spec.k - 1
    beta = p["beta.loc"].copy()
    gamma = p["gamma.loc"].copy()
    if m == 0:
        return GlobalParams(beta, gamma, np.zeros(0), np.zeros((0, 0)))
    ls_eps = gen.standard_normal((n_draws, m))
    sigma = np.exp(p["log_sigma.loc"] + np.exp(p["log_sigma.log_scale"]) * ls_eps).mean(axis=0)
    cpc_eps = gen.standard_normal((n_draws, spec.n_cpc))
    omega = np.zeros((m, m))
    nu_cpc = np.exp(p["cpc.log_scale"])
    for s in range(n_draws):
        L, _ = K.cpc_to_cholesky(p["cpc.loc"] + nu_cpc * cpc_eps[s], dim=m)
        omega += L @ L.T
    omega /= n_draws
    chol = np.linalg.cholesky(omega)
    return GlobalParams(beta, gamma, sigma, chol)


# ------------------------------------------------------------- checkpoints


_CKPT_MAGIC = b"VSTMCKPT"
_CKPT_VERSION = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    state: VariationalState
    moments: AdamMoments
    step: int
    rng_states: dict


def save_checkpoint(
    path,
    spec: ModelSpec,
    state: VariationalState,
    moments: AdamMoments,
    step: int,
    rng_states: dict,
) -> None:
    """Single binary container: magic, u16 version, JSON header, raw
    little-endian float64 arrays in header order."""
    import json

    names = sorted(state.params)
    header = {
        "spec": {
            "k": spec.k, "d": spec.d, "p": spec.p,
            "nu_gamma": spec.nu_gamma, "sigma_gamma": spec.sigma_gamma,
            "nu_beta": spec.nu_beta, "sigma_beta": spec.sigma_beta,
            "eta_theta": spec.eta_theta, "sd_scale": [float(x) for x in spec.sd_scale],
        },
        "n": state.n,
        "amortized": state.amortized,
        "step": step,
        "rng": rng_states,
        "arrays": [
            {"name": kind + name, "shape": list(state.params[name].shape)}
            for name in names
            for kind in ("p:", "m:", "v:")
        ],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<H", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            for table in (state.params, moments.m, moments.v):
                fh.write(np.ascontiguousarray(table[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    import json

    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValidationError("not a checkpoint container")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != _CKPT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        spec = ModelSpec(**{**header["spec"], "sd_scale": np.asarray(header["spec"]["sd_scale"])})
        params: dict[str, np.ndarray] = {}
        m_table: dict[str, np.ndarray] = {}
        v_table: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            kind, name = entry["name"][:2], entry["name"][2:]
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValidationError("truncated checkpoint payload")
            arr = np.frombuffer(raw, dtype="<f8").astype(float).reshape(shape)
            {"p:": params, "m:": m_table, "v:": v_table}[kind][name] = arr
        if fh.read(1):
            raise ValidationError("trailing bytes after checkpoint payload")
    state = VariationalState(params, header["n"], header["amortized"]).validate(spec)
    return Checkpoint(
        spec=spec,
        state=state,
        moments=AdamMoments(m_table, v_table),
        step=header["step"],
        rng_states=header["rng"],
    )
