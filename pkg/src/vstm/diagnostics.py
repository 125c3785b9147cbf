"""Model-selection metrics and intrusion-task validation.

Held-out perplexity runs the full fit-on-complement / refit-locals-on-fold
loop. Coherence and exclusivity are embedding-space conventions: mean pairwise
cosine of a topic's top images, and one minus the nearest-topic cosine. The
intrusion pipeline generates balanced four-image tasks, ingests evaluator
responses, and scores them with a hierarchical Bayesian logistic regression
fit by the same variational machinery as the main model.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import kernel as K
from . import tape as T
from .inference import AdamMoments, FitConfig, VariationalState, adam_step, fit, refit_local
from .model import ModelSpec, GlobalParams, _log_likelihood_rows
from .quantities import top_images
from .util import ValidationError

# ---------------------------------------------------------------------- CV


@dataclass(frozen=True)
class CvPlan:
    n_folds: int
    assignment: np.ndarray  # per-image fold id in [0, n_folds)
    seed: int = 0


def make_cv_plan(n: int, n_folds: int = 5, seed: int = 0) -> CvPlan:
    """Balanced random fold assignment; every fold nonempty."""
    if n_folds < 2:
        raise ValidationError("need at least two folds")
    if n < n_folds:
        raise ValidationError("fewer images than folds")
    perm = K.RngStream(seed, 6).generator().permutation(n)
    assignment = np.empty(n, dtype=int)
    assignment[perm] = np.arange(n) % n_folds
    return CvPlan(n_folds, assignment, seed)


def perplexity_from_loglik(total_loglik: float, n: int, d: int) -> float:
    """exp of the negative held-out log likelihood per matrix element."""
    return math.exp(-total_loglik / (n * d))


@dataclass
class PerplexityResult:
    per_fold: np.ndarray
    mean: float
    plan: CvPlan


def _fold_perplexity(Zh, Xh, globals_, spec, config, rng) -> float:
    re = refit_local(Zh, Xh, globals_, spec, config, rng=rng)
    ll = float(_log_likelihood_rows(Zh, re.theta, globals_.beta).sum())
    return perplexity_from_loglik(ll, Zh.shape[0], Zh.shape[1])


def heldout_perplexity(
    Z: np.ndarray,
    X: np.ndarray,
    spec: ModelSpec,
    config: FitConfig,
    plan: CvPlan | None = None,
    refit_config: FitConfig | None = None,
    rng: K.RngStream | None = None,
) -> PerplexityResult:
    """For each fold: fit on the complement, freeze the global posterior
    means, refit the fold's local memberships, and score the fold's
    embeddings under the frozen globals."""
    Z = np.asarray(Z, dtype=float)
    X = np.asarray(X, dtype=float)
    if plan is None:
        plan = make_cv_plan(Z.shape[0], seed=config.seed)
    if plan.assignment.shape[0] != Z.shape[0]:
        raise ValidationError("plan does not cover the data")
    rng = rng if rng is not None else K.RngStream(plan.seed, 7)
    vals = []
    for f in range(plan.n_folds):
        hold = plan.assignment == f
        if hold.sum() < 1:
            raise ValidationError(f"fold {f} is empty")
        train_cfg = config
        if config.batch_size is not None:
            train_cfg = replace(config, batch_size=min(config.batch_size, int((~hold).sum())))
        fitted = fit(Z[~hold], X[~hold], spec, train_cfg, rng=rng.child(2 * f))
        fold_cfg = refit_config if refit_config is not None else config
        if fold_cfg.batch_size is not None:
            fold_cfg = replace(fold_cfg, batch_size=min(fold_cfg.batch_size, int(hold.sum())))
        vals.append(
            _fold_perplexity(
                Z[hold], X[hold], fitted.globals_, spec, fold_cfg, rng.child(2 * f + 1)
            )
        )
    per_fold = np.asarray(vals)
    return PerplexityResult(per_fold, float(per_fold.mean()), plan)


# ----------------------------------------------------- coherence metrics


def coherence(theta, embeddings, k: int, m: int = 20) -> float:
    """Mean pairwise cosine similarity between the raw embeddings of the
    topic's top images."""
    theta = np.asarray(theta, dtype=float)
    embeddings = np.asarray(embeddings, dtype=float)
    if (theta[:, k] > 0).sum() < 2:
        raise ValidationError(f"topic {k} touches fewer than two images")
    rows = embeddings[top_images(theta, k, m)]
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0):
        raise ValidationError("zero-norm embedding among top images")
    unit = rows / norms[:, None]
    cos = unit @ unit.T
    iu = np.triu_indices(rows.shape[0], 1)
    return float(cos[iu].mean())


def exclusivity(beta, k: int) -> float:
    """One minus the largest cosine similarity to any other topic."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape[0] < 2:
        raise ValidationError("need at least two topics")
    norms = np.linalg.norm(beta, axis=1)
    if np.any(norms == 0):
        raise ValidationError("zero-norm topic embedding")
    unit = beta / norms[:, None]
    cos = unit @ unit[k]
    cos[k] = -np.inf
    return float(1.0 - cos.max())


# ------------------------------------------------------- intrusion tasks


@dataclass(frozen=True)
class IntrusionTask:
    task_id: str
    model_id: str
    topic: int
    members: tuple[int, int, int]
    intruder: int
    intruder_topic: int
    order: tuple[int, int, int, int]  # display position -> item (0..2 member, 3 intruder)

    def intruder_position(self) -> int:
        """1-based display position of the intruder."""
        return self.order.index(3) + 1


@dataclass(frozen=True)
class IntrusionResponse:
    task_id: str
    evaluator: str
    model: str
    order_index: int  # 1..3
    chosen_position: int  # 1..4
    correct: bool


def intrusion_generate(
    models: list[tuple[str, np.ndarray]],
    tasks_per_model: int,
    rng: K.RngStream,
) -> list[IntrusionTask]:
    """Four-image tasks, balanced over topics within each model. Members come
    from the topic's top decile; the intruder from another topic's top decile,
    constrained to sit below the display topic's median so it does not happen
    to fit the topic anyway. Display order is a uniform permutation."""
    if tasks_per_model < 1:
        raise ValidationError("tasks_per_model must be positive")
    tasks = []
    for model_idx, (model_id, theta) in enumerate(models):
        theta = np.asarray(theta, dtype=float)
        n, kk = theta.shape
        if kk < 2:
            raise ValidationError("need at least two topics")
        gen = rng.child(model_idx).generator()
        decile = [np.flatnonzero(theta[:, k] >= np.quantile(theta[:, k], 0.9)) for k in range(kk)]
        median = [float(np.median(theta[:, k])) for k in range(kk)]
        for t in range(tasks_per_model):
            k = t % kk
            pool = decile[k]
            if pool.size < 3:
                raise ValidationError(f"model {model_id!r} topic {k} lacks candidates")
            members = tuple(int(i) for i in gen.choice(pool, size=3, replace=False))
            others = []
            for kj in range(kk):
                if kj == k:
                    continue
                cand = decile[kj][
                    (theta[decile[kj], k] < median[k])
                    & ~np.isin(decile[kj], members)
                ]
                if cand.size:
                    others.append((kj, cand))
            if not others:
                raise ValidationError(
                    f"model {model_id!r} topic {k} has no intruder candidates"
                )
            kj, cand = others[int(gen.integers(len(others)))]
            intruder = int(cand[int(gen.integers(cand.size))])
            order = tuple(int(x) for x in gen.permutation(4))
            tasks.append(
                IntrusionTask(
                    task_id=f"{model_id}:{t:04d}",
                    model_id=model_id,
                    topic=k,
                    members=members,
                    intruder=intruder,
                    intruder_topic=kj,
                    order=order,
                )
            )
    return tasks


def write_intrusion_tasks(tasks: list[IntrusionTask], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(
                json.dumps(
                    {
                        "task_id": t.task_id,
                        "model_id": t.model_id,
                        "topic": t.topic,
                        "members": list(t.members),
                        "intruder": t.intruder,
                        "intruder_topic": t.intruder_topic,
                        "order": list(t.order),
                    }
                )
                + "\n"
            )


def read_intrusion_tasks(path) -> list[IntrusionTask]:
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            tasks.append(
                IntrusionTask(
                    task_id=row["task_id"],
                    model_id=row["model_id"],
                    topic=int(row["topic"]),
                    members=tuple(int(i) for i in row["members"]),
                    intruder=int(row["intruder"]),
                    intruder_topic=int(row["intruder_topic"]),
                    order=tuple(int(i) for i in row["order"]),
                )
            )
    return tasks


_RESPONSE_HEADER = ["task_id", "evaluator", "model", "order_index", "chosen_position"]


def read_intrusion_responses(path, tasks: list[IntrusionTask]) -> list[IntrusionResponse]:
    """Responses as CSV; correctness is derived by matching each row's task."""
    by_id = {t.task_id: t for t in tasks}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _RESPONSE_HEADER:
            raise ValidationError(f"expected header {','.join(_RESPONSE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ValidationError(f"line {lineno}: expected 5 fields")
            task_id, evaluator, model, order_index, chosen = row
            task = by_id.get(task_id)
            if task is None:
                raise ValidationError(f"line {lineno}: unknown task {task_id!r}")
            if model != task.model_id:
                raise ValidationError(f"line {lineno}: model disagrees with task")
            order_index = int(order_index)
            chosen = int(chosen)
            if not 1 <= order_index <= 3:
                raise ValidationError(f"line {lineno}: order_index outside 1..3")
            if not 1 <= chosen <= 4:
                raise ValidationError(f"line {lineno}: chosen_position outside 1..4")
            out.append(
                IntrusionResponse(
                    task_id=task_id,
                    evaluator=evaluator,
                    model=model,
                    order_index=order_index,
                    chosen_position=chosen,
                    correct=chosen == task.intruder_position(),
                )
            )
    return out


# ----------------------------------------------------- intrusion scoring


@dataclass
class IntrusionFit:
    model_ids: list[str]
    evaluators: list[str]
    draws: dict[str, np.ndarray]  # alpha (S,), psi (S, M), sigma_kappa (S,)
    params: dict[str, np.ndarray]
    elbo_trace: np.ndarray


@dataclass
class IntrusionPrediction:
    model: str
    mean: float
    interval90: tuple[float, float]
    interval95: tuple[float, float]


def _intrusion_elbo(params, y, midx, jlidx, n_models, n_cells, eps):
    leaves = {k: T.Var(v) for k, v in params.items()}
    s_draws = eps["alpha"].shape[0]
    mm = n_models
    total = None
    for s in range(s_draws):
        draws = {}
        negq = 0.0
        for name in ("alpha", "psi", "log_sk", "kappa"):
            loc, rho = leaves[f"{name}.loc"], leaves[f"{name}.log_scale"]
            e = eps[name][s]
            draws[name] = loc + T.texp(rho) * e
            term = T.tsum(rho) + 0.5 * e.size * K.LOG_2PI + 0.5 * float((e * e).sum())
            negq = term + negq
        # last model's effect is minus the sum of the free ones
        psi_free = draws["psi"]
        psi_full = T.scatter(psi_free, (mm,), slice(0, mm - 1)) + T.scatter(
            -T.tsum(psi_free, keepdims=True), (mm,), slice(mm - 1, mm)
        )
        eta = draws["alpha"] + T.gather(psi_full, midx) + T.gather(draws["kappa"], jlidx)
        ll = T.tsum(y * eta - T.softplus(eta))
        sd = 2.5
        prior = T.tsum(draws["alpha"] * draws["alpha"]) * (-0.5 / sd ** 2) - (
            0.5 * K.LOG_2PI + math.log(sd)
        )
        prior = prior + T.tsum(psi_full * psi_full) * (-0.5 / sd ** 2) - mm * (
            0.5 * K.LOG_2PI + math.log(sd)
        )
        sk = T.texp(draws["log_sk"])
        kap = draws["kappa"]
        prior = (
            prior
            + T.tsum((kap / sk) ** 2) * -0.5
            - float(n_cells) * T.tsum(draws["log_sk"])
            - 0.5 * n_cells * K.LOG_2PI
        )
        prior = prior + T.tsum(sk * sk) * -0.5 + 0.5 * math.log(2.0 / math.pi)
        jac = T.tsum(draws["log_sk"])
        term = ll + prior + jac + negq
        total = term if total is None else total + term
    return total * (1.0 / s_draws), leaves


def intrusion_fit(
    responses: list[IntrusionResponse],
    rng: K.RngStream | None = None,
    iterations: int = 2000,
    learning_rate: float = 0.02,
    mc_samples: int = 2,
    n_draws: int = 4000,
) -> IntrusionFit:
    """Hierarchical logistic regression on correctness: a common intercept,
    per-model effects summing to zero, and a random intercept per
    (evaluator, order index) cell with a half-normal scale."""
    if not responses:
        raise ValidationError("no responses")
    model_ids = sorted({r.model for r in responses})
    evaluators = sorted({r.evaluator for r in responses})
    y = np.array([1.0 if r.correct else 0.0 for r in responses])
    if y.min() == y.max():
        warnings.warn(
            "responses are perfectly separated; estimates lean on the priors",
            UserWarning,
            stacklevel=2,
        )
    midx = np.array([model_ids.index(r.model) for r in responses])
    jlidx = np.array(
        [evaluators.index(r.evaluator) * 3 + (r.order_index - 1) for r in responses]
    )
    mm, n_cells = len(model_ids), len(evaluators) * 3
    rng = rng if rng is not None else K.RngStream(0, 11)
    shapes = {"alpha": (1,), "psi": (mm - 1,), "log_sk": (1,), "kappa": (n_cells,)}
    params: dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        params[f"{name}.loc"] = np.zeros(shape)
        params[f"{name}.log_scale"] = np.full(shape, math.log(0.1))
    moments = AdamMoments.zeros_like(params)
    config = FitConfig(iterations=iterations, learning_rate=learning_rate)
    state_view = VariationalState(params, len(responses), False)
    gen = rng.child(0).generator()
    trace = []
    for step in range(1, iterations + 1):
        eps = {name: gen.standard_normal((mc_samples, *shape)) for name, shape in shapes.items()}
        graph, leaves = _intrusion_elbo(params, y, midx, jlidx, mm, n_cells, eps)
        value = float(graph.value)
        if not math.isfinite(value):
            raise ValidationError("scoring objective left the reals")
        T.backward(graph)
        grads = {
            k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
            for k, leaf in leaves.items()
        }
        adam_step(state_view, grads, moments, config, step)
        if step % 50 == 0:
            trace.append(value)
    gen_draws = rng.child(1).generator()
    alpha = params["alpha.loc"] + np.exp(params["alpha.log_scale"]) * gen_draws.standard_normal(
        (n_draws, 1)
    )
    psi_free = params["psi.loc"] + np.exp(params["psi.log_scale"]) * gen_draws.standard_normal(
        (n_draws, mm - 1)
    )
    psi = np.hstack([psi_free, -psi_free.sum(axis=1, keepdims=True)])
    sigma_kappa = np.exp(
        params["log_sk.loc"]
        + np.exp(params["log_sk.log_scale"]) * gen_draws.standard_normal((n_draws, 1))
    )
    return IntrusionFit(
        model_ids=model_ids,
        evaluators=evaluators,
        draws={"alpha": alpha[:, 0], "psi": psi, "sigma_kappa": sigma_kappa[:, 0]},
        params=params,
        elbo_trace=np.asarray(trace),
    )


def intrusion_predict(fit: IntrusionFit, model_id: str) -> IntrusionPrediction:
    """Posterior proportion-correct for one model, random intercepts
    marginalized at zero."""
    if model_id not in fit.model_ids:
        raise ValidationError(f"unknown model {model_id!r}")
    j = fit.model_ids.index(model_id)
    p = 1.0 / (1.0 + np.exp(-(fit.draws["alpha"] + fit.draws["psi"][:, j])))
    return IntrusionPrediction(
        model=model_id,
        mean=float(p.mean()),
        interval90=(float(np.quantile(p, 0.05)), float(np.quantile(p, 0.95))),
        interval95=(float(np.quantile(p, 0.025)), float(np.quantile(p, 0.975))),
    )
