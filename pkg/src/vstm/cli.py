"""Command-line entry points.

Every command reads files, calls the library, and writes a result directory;
figures accompany the delimited output unless --no-figures. Exit codes:
0 success, 2 bad input, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import dataio as D
from . import diagnostics as G
from . import inference as inf
from . import kernel as K
from . import model as M
from . import quantities as Q
from .util import ValidationError, fmt_real

# defaults sized for real corpora; small ones get the batch clamped with a note
_DEFAULT_ITERATIONS = 25_000
_DEFAULT_BATCH = 5_280


def _add_fit_options(p: argparse.ArgumentParser, with_model: bool = True) -> None:
    p.add_argument("--iterations", type=int, default=_DEFAULT_ITERATIONS)
    p.add_argument("--batch-size", type=int, default=_DEFAULT_BATCH)
    p.add_argument("--learning-rate", type=float, default=0.005)
    p.add_argument("--mc-samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--elbo-every", type=int, default=50)
    p.add_argument("--theta-draws", type=int, default=256)
    if with_model:
        p.add_argument("--amortized", action="store_true")
        p.add_argument("--amortizer-width", type=int, default=256)
        p.add_argument("--amortizer-depth", type=int, default=1)
        p.add_argument("--sigma-gamma", type=float, default=2.5)
        p.add_argument("--nu-gamma", type=float, default=5.0)
        p.add_argument("--sigma-beta", type=float, default=1.0)
        p.add_argument("--nu-beta", type=float, default=5.0)
        p.add_argument("--eta-theta", type=float, default=1.0)


def _add_data_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--embeddings", required=True)
    p.add_argument("--covariates")
    p.add_argument("--formula", default="1")
    p.add_argument("--categorical", default="",
                   help="comma-separated columns forced categorical")


def build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(prog="vstm")
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the topic model")
    _add_data_options(p)
    p.add_argument("--k", type=int, required=True)
    _add_fit_options(p)
    p.add_argument("--out", required=True)
    p.add_argument("--graph-threshold", type=float, default=0.1)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("refit", help="refit local memberships for new images")
    p.add_argument("--fit-dir", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--covariates")
    _add_fit_options(p, with_model=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refit)

    p = sub.add_parser("diagnose", help="cross-validated model selection sweep")
    _add_data_options(p)
    p.add_argument("--k-list", required=True, help="comma-separated K values")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--coherence-top", type=int, default=20)
    _add_fit_options(p)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("predict", help="expected proportions for covariate profiles")
    p.add_argument("--fit-dir", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--draws", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("topics", help="top images, mixed images, graph, projection")
    p.add_argument("--fit-dir", required=True)
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--floor", type=float, default=0.2)
    p.add_argument("--graph-threshold", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_topics)

    p = sub.add_parser("intrusion", help="human validation tasks")
    isub = p.add_subparsers(dest="intrusion_command", required=True)
    pg = isub.add_parser("generate", help="emit intruder tasks as JSON lines")
    pg.add_argument("--fit-dir", action="append", default=[],
                    help="fit directory; model id is the directory name (repeatable)")
    pg.add_argument("--theta", action="append", default=[], metavar="NAME=PATH",
                    help="membership CSV with an explicit model id (repeatable)")
    pg.add_argument("--tasks", type=int, required=True, help="tasks per model")
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--out", required=True)
    pg.set_defaults(func=cmd_intrusion_generate)
    pf = isub.add_parser("fit", help="score evaluator responses")
    pf.add_argument("--tasks", required=True)
    pf.add_argument("--responses", required=True)
    pf.add_argument("--iterations", type=int, default=2000)
    pf.add_argument("--seed", type=int, default=0)
    pf.add_argument("--out", required=True)
    pf.add_argument("--no-figures", action="store_true")
    pf.set_defaults(func=cmd_intrusion_fit)

    p = sub.add_parser("synth", help="forward-simulate a corpus")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--p", type=int, default=1)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="dump container or fit metadata")
    p.add_argument("--embeddings")
    p.add_argument("--fit-dir")
    p.set_defaults(func=cmd_inspect)

    return root


# ------------------------------------------------------------- helpers


def _split_csv_arg(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _load_dataset(args):
    """Container + centering + design matrix for fit-style commands."""
    container = D.read_embeddings(args.embeddings)
    Zc, mean, sd_scale = D.center_embeddings(container)
    n = Zc.shape[0]
    encoder = None
    if args.covariates:
        table = D.read_covariates(args.covariates, categorical=_split_csv_arg(args.categorical))
        if table.ids is not None and container.ids is not None:
            table = table.align_to(container.ids)
        if table.n != n:
            raise ValidationError(f"{table.n} covariate rows for {n} images")
        X, names, encoder = D.build_design_matrix(table, args.formula, return_encoder=True)
    else:
        if args.formula.strip() != "1":
            raise ValidationError("a formula other than '1' needs --covariates")
        X, names = np.ones((n, 1)), ["(intercept)"]
    return container, Zc, mean, sd_scale, X, names, encoder


def _clamped_batch(requested: int | None, n: int) -> int | None:
    if requested is None or requested < n:
        return requested
    if requested > n:
        print(f"note: batch size {requested} exceeds the {n} available images;"
              " running full batch", file=sys.stderr)
    return None


def _fit_config(args, n: int) -> inf.FitConfig:
    return inf.FitConfig(
        iterations=args.iterations,
        batch_size=_clamped_batch(args.batch_size, n),
        mc_samples=args.mc_samples,
        learning_rate=args.learning_rate,
        seed=args.seed,
        amortized=getattr(args, "amortized", False),
        amortizer_width=getattr(args, "amortizer_width", 256),
        amortizer_depth=getattr(args, "amortizer_depth", 1),
        elbo_eval_every=args.elbo_every,
        theta_draws=args.theta_draws,
    )


def _model_spec(args, k: int, d: int, p: int, sd_scale) -> M.ModelSpec:
    return M.ModelSpec(
        k=k, d=d, p=p,
        nu_gamma=args.nu_gamma, sigma_gamma=args.sigma_gamma,
        nu_beta=args.nu_beta, sigma_beta=args.sigma_beta,
        eta_theta=args.eta_theta, sd_scale=sd_scale,
    )


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_matrix_csv(path):
    """Numeric CSV with optional leading id column. Returns (matrix, ids)."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError(f"{path}: empty file")
    header = rows[0]
    start = 1 if header and header[0] == "id" else 0
    ids = [r[0] for r in rows[1:]] if start else None
    try:
        mat = np.array([[float(v) for v in r[start:]] for r in rows[1:]], dtype=float)
    except ValueError:
        raise ValidationError(f"{path}: non-numeric cell") from None
    if mat.ndim != 2:
        mat = mat.reshape(len(rows) - 1, -1)
    return mat, ids


def _load_fit_dir(fit_dir):
    fdir = Path(fit_dir)
    manifest_path = fdir / "manifest.json"
    ckpt_path = fdir / "state.ckpt"
    if not manifest_path.exists() or not ckpt_path.exists():
        raise ValidationError(f"{fit_dir} is not a fit directory")
    manifest = json.loads(manifest_path.read_text())
    ck = inf.load_checkpoint(ckpt_path)
    return fdir, manifest, ck


def _read_center(fdir: Path):
    mat, _ = _read_matrix_csv(fdir / "center.csv")
    return mat[:, 1], mat[:, 2]  # dim index, mean, sd_scale


# ------------------------------------------------------------- commands


def cmd_fit(args) -> int:
    container, Zc, mean, sd_scale, X, names, encoder = _load_dataset(args)
    spec = _model_spec(args, args.k, Zc.shape[1], X.shape[1], sd_scale)
    config = _fit_config(args, Zc.shape[0])
    res = inf.fit(Zc, X, spec, config)
    out = Path(args.out)
    graph = Q.topic_correlation_graph(res.globals_, threshold=args.graph_threshold) \
        if spec.k >= 2 else None
    pca = Q.principal_component_scores(res.lambda_theta) \
        if spec.k >= 2 and Zc.shape[0] >= 2 else None
    D.write_results(
        res, out,
        ids=container.ids, design_names=names, center=(mean, sd_scale),
        encoder=encoder, graph=graph, pca=pca,
    )
    inf.save_checkpoint(out / "state.ckpt", spec, res.state, res.moments,
                        config.iterations, {"seed": config.seed})
    if not args.no_figures:
        from . import plots

        if len(res.elbo_trace):
            plots.elbo_trace(res.elbo_trace, config.elbo_eval_every, out / "elbo_trace.png")
        if graph is not None:
            plots.topic_graph(graph, out / "graph.png")
        if pca is not None:
            plots.pca_scores(pca[0], pca[2], out / "pca.png")
    tail = f" elbo={fmt_real(res.elbo_trace[-1])}" if len(res.elbo_trace) else ""
    print(f"fit: n={Zc.shape[0]} d={Zc.shape[1]} k={spec.k} p={spec.p}{tail} -> {out}")
    return 0


def cmd_refit(args) -> int:
    fdir, manifest, ck = _load_fit_dir(args.fit_dir)
    mean, sd_scale = _read_center(fdir)
    container = D.read_embeddings(args.embeddings)
    if container.embeddings.shape[1] != ck.spec.d:
        raise ValidationError(
            f"embeddings have D={container.embeddings.shape[1]}, fit used {ck.spec.d}"
        )
    Zc = np.asarray(container.embeddings, dtype=float) - mean
    n = Zc.shape[0]
    if "encoder" in manifest:
        if not args.covariates:
            raise ValidationError("this fit used covariates; pass --covariates")
        enc = D.DesignEncoder.from_dict(manifest["encoder"])
        table = D.read_covariates(args.covariates)
        if table.ids is not None and container.ids is not None:
            table = table.align_to(container.ids)
        if table.n != n:
            raise ValidationError(f"{table.n} covariate rows for {n} images")
        X, _ = enc.encode(table)
    else:
        X = np.ones((n, 1))
    globals_ = inf.posterior_mean_globals(ck.state, ck.spec)
    config = inf.FitConfig(
        iterations=args.iterations,
        batch_size=_clamped_batch(args.batch_size, n),
        mc_samples=args.mc_samples, learning_rate=args.learning_rate,
        seed=args.seed, elbo_eval_every=args.elbo_every,
        theta_draws=args.theta_draws,
    )
    re = inf.refit_local(Zc, X, globals_, ck.spec, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    id_head = ["id"] if container.ids is not None else []
    rid = (lambda i: [container.ids[i]]) if container.ids is not None else (lambda i: [])
    _write_csv(out / "theta.csv",
               id_head + [f"topic_{j}" for j in range(ck.spec.k)],
               (rid(i) + [fmt_real(v) for v in re.theta[i]] for i in range(n)))
    _write_csv(out / "lambda_theta.csv",
               id_head + [f"lambda_{j}" for j in range(ck.spec.k - 1)],
               (rid(i) + [fmt_real(v) for v in re.lambda_theta[i]] for i in range(n)))
    print(f"refit: n={n} k={ck.spec.k} -> {out}")
    return 0


def cmd_diagnose(args) -> int:
    container, Zc, mean, sd_scale, X, names, _ = _load_dataset(args)
    n = Zc.shape[0]
    try:
        k_list = [int(s) for s in _split_csv_arg(args.k_list)]
    except ValueError:
        raise ValidationError(f"bad --k-list {args.k_list!r}") from None
    if not k_list:
        raise ValidationError("empty --k-list")
    plan = G.make_cv_plan(n, args.folds, seed=args.seed)
    raw = np.asarray(container.embeddings, dtype=float)
    rows = []
    for k in k_list:
        spec = _model_spec(args, k, Zc.shape[1], X.shape[1], sd_scale)
        config = _fit_config(args, n)
        perp = G.heldout_perplexity(Zc, X, spec, config, plan)
        full = inf.fit(Zc, X, spec, config)
        coherence = [
            G.coherence(full.theta, raw, k=j, m=args.coherence_top) for j in range(k)
        ]
        exclusivity = (
            [G.exclusivity(full.globals_.beta, j) for j in range(k)] if k >= 2 else None
        )
        row = {
            "k": k,
            "perplexity_mean": perp.mean,
            "perplexity_sd": float(perp.per_fold.std(ddof=1)),
            "perplexity_per_fold": [float(v) for v in perp.per_fold],
            "coherence": coherence,
            "exclusivity": exclusivity,
            "coherence_mean": float(np.mean(coherence)),
            "exclusivity_mean": float(np.mean(exclusivity)) if exclusivity else None,
        }
        rows.append(row)
        excl = f" exclusivity={row['exclusivity_mean']:.3f}" if exclusivity else ""
        print(f"K={k}: perplexity={perp.mean:.4f}"
              f" coherence={row['coherence_mean']:.3f}{excl}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"folds": args.folds, "seed": args.seed, "k_sweep": rows}
    (out / "diagnostics.json").write_text(json.dumps(payload, indent=2) + "\n")
    if not args.no_figures:
        from . import plots

        plots.model_selection(rows, out / "model_selection.png")
    return 0


def cmd_predict(args) -> int:
    fdir, manifest, ck = _load_fit_dir(args.fit_dir)
    globals_ = inf.posterior_mean_globals(ck.state, ck.spec)
    table = D.read_covariates(args.profiles)
    if "encoder" in manifest:
        enc = D.DesignEncoder.from_dict(manifest["encoder"])
        Xp, _ = enc.encode(table)
    else:
        Xp = np.ones((table.n, 1))
    if Xp.shape[1] != ck.spec.p:
        raise ValidationError("profile design width disagrees with the fit")
    names = list(table.ids) if table.ids is not None \
        else [f"profile_{i}" for i in range(table.n)]
    req = Q.PredictionRequest(
        profiles=[(name, Xp[i]) for i, name in enumerate(names)],
        mc_draws=args.draws, seed=args.seed,
    )
    preds = Q.predict_topic_proportions(req, globals_)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "predictions.csv",
               ["profile", "topic", "mean", "mc_se"],
               ([p.profile, str(j), fmt_real(p.mean[j]), fmt_real(p.mc_se[j])]
                for p in preds for j in range(len(p.mean))))
    if not args.no_figures:
        from . import plots

        plots.predicted_proportions(preds, out / "predictions.png")
    for p in preds:
        top = int(np.argmax(p.mean))
        print(f"{p.profile}: top topic {top} ({p.mean[top]:.3f})")
    return 0


def cmd_topics(args) -> int:
    fdir, manifest, ck = _load_fit_dir(args.fit_dir)
    theta, ids = _read_matrix_csv(fdir / "theta.csv")
    lam, _ = _read_matrix_csv(fdir / "lambda_theta.csv")
    n, k = theta.shape
    label = (lambda i: ids[i]) if ids is not None else (lambda i: str(i))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    top_rows = []
    for j in range(k):
        for rank, i in enumerate(Q.top_images(theta, j, min(args.top, n)), start=1):
            top_rows.append([str(j), str(rank), label(i), fmt_real(theta[i, j])])
    _write_csv(out / "top_images.csv", ["topic", "rank", "id", "proportion"], top_rows)
    mixed = Q.mixed_images(theta, floor=args.floor)
    _write_csv(out / "mixed_images.csv",
               ["id", "topics", "proportions"],
               ([label(mi.image),
                 "|".join(str(t) for t in mi.topics),
                 "|".join(fmt_real(v) for v in mi.proportions)] for mi in mixed))
    graph = None
    if k >= 2:
        globals_ = inf.posterior_mean_globals(ck.state, ck.spec)
        graph = Q.topic_correlation_graph(globals_, threshold=args.graph_threshold)
        (out / "graph.json").write_text(json.dumps({
            "nodes": list(graph.nodes),
            "labels": list(graph.labels),
            "edges": [[int(a), int(b), float(w)] for a, b, w in graph.edges],
            "communities": list(graph.communities),
        }, indent=2) + "\n")
    pca = Q.principal_component_scores(lam) if k >= 2 and n >= 2 else None
    if pca is not None:
        _write_csv(out / "pca.csv", (["id"] if ids else []) + ["score"],
                   (([ids[i]] if ids else []) + [fmt_real(pca[0][i])] for i in range(n)))
    if not args.no_figures:
        from . import plots

        if graph is not None:
            plots.topic_graph(graph, out / "graph.png")
        if pca is not None:
            plots.pca_scores(pca[0], pca[2], out / "pca.png")
    print(f"topics: k={k} top={min(args.top, n)} mixed={len(mixed)} -> {out}")
    return 0


def cmd_intrusion_generate(args) -> int:
    models = []
    for fd in args.fit_dir:
        theta, _ = _read_matrix_csv(Path(fd) / "theta.csv")
        models.append((Path(fd).name, theta))
    for spec in args.theta:
        name, _, path = spec.partition("=")
        if not path:
            raise ValidationError(f"--theta wants NAME=PATH, got {spec!r}")
        theta, _ = _read_matrix_csv(path)
        models.append((name, theta))
    if not models:
        raise ValidationError("no models: pass --fit-dir or --theta")
    tasks = G.intrusion_generate(models, args.tasks, K.RngStream(args.seed, 13))
    G.write_intrusion_tasks(tasks, args.out)
    print(f"wrote {len(tasks)} tasks for {len(models)} model(s) -> {args.out}")
    return 0


def cmd_intrusion_fit(args) -> int:
    tasks = G.read_intrusion_tasks(args.tasks)
    responses = G.read_intrusion_responses(args.responses, tasks)
    fit = G.intrusion_fit(responses, rng=K.RngStream(args.seed, 11),
                          iterations=args.iterations)
    preds = [G.intrusion_predict(fit, m) for m in fit.model_ids]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "n_responses": len(responses),
        "n_evaluators": len(fit.evaluators),
        "sigma_kappa_mean": float(fit.draws["sigma_kappa"].mean()),
        "models": [
            {
                "model": p.model,
                "mean": p.mean,
                "interval90": list(p.interval90),
                "interval95": list(p.interval95),
            }
            for p in preds
        ],
    }
    (out / "intrusion.json").write_text(json.dumps(payload, indent=2) + "\n")
    if not args.no_figures:
        from . import plots

        plots.intrusion_summary(preds, out / "intrusion.png")
    for p in preds:
        print(f"{p.model}: {p.mean:.3f} [{p.interval95[0]:.3f}, {p.interval95[1]:.3f}]")
    return 0


def cmd_synth(args) -> int:
    spec = M.ModelSpec(k=args.k, d=args.d, p=args.p)
    rng = K.RngStream(args.seed, 20)
    x = None
    if args.p > 1:
        # intercept plus standard-normal numeric covariates
        gen = rng.child(3).generator()
        x = np.column_stack([np.ones(args.n)]
                            + [gen.standard_normal(args.n) for _ in range(args.p - 1)])
    Z, X, truth = D.synth_generate(spec, args.n, rng, x=x)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = [f"img_{i:06d}" for i in range(args.n)]
    D.write_embeddings(out / "embeddings.vstm", Z.astype("<f4"), ids=ids)
    if args.p > 1:
        _write_csv(out / "covariates.csv",
                   ["id"] + [f"x{j}" for j in range(1, args.p)],
                   ([ids[i]] + [fmt_real(v) for v in X[i, 1:]] for i in range(args.n)))
    g = truth.globals_
    _write_csv(out / "theta_true.csv",
               ["id"] + [f"topic_{j}" for j in range(args.k)],
               ([ids[i]] + [fmt_real(v) for v in truth.theta[i]] for i in range(args.n)))
    _write_csv(out / "beta_true.csv",
               ["topic"] + [f"dim_{j}" for j in range(args.d)],
               ([str(i)] + [fmt_real(v) for v in g.beta[i]] for i in range(args.k)))
    _write_csv(out / "gamma_true.csv",
               ["covariate"] + [f"topic_{j}" for j in range(args.k - 1)],
               ([f"x{i}"] + [fmt_real(v) for v in g.gamma[i]] for i in range(args.p)))
    (out / "synth.json").write_text(json.dumps({
        "k": args.k, "d": args.d, "p": args.p, "n": args.n,
        "seed": args.seed,
        "sigma_theta": [float(v) for v in g.sigma_theta],
    }, indent=2) + "\n")
    print(f"synth: n={args.n} d={args.d} k={args.k} -> {out}")
    return 0


def cmd_inspect(args) -> int:
    if bool(args.embeddings) == bool(args.fit_dir):
        raise ValidationError("pass exactly one of --embeddings or --fit-dir")
    if args.embeddings:
        c = D.read_embeddings(args.embeddings)
        info = {
            "n_images": int(c.embeddings.shape[0]),
            "embedding_dim": int(c.embeddings.shape[1]),
            "version": c.version,
            "has_ids": c.ids is not None,
            "first_ids": list(c.ids[:5]) if c.ids else None,
        }
    else:
        _, manifest, ck = _load_fit_dir(args.fit_dir)
        info = {
            "model": manifest.get("model", {}),
            "data": manifest.get("data", {}),
            "config": manifest.get("config", {}),
            "checkpoint_step": ck.step,
            "wall_clock_seconds": manifest.get("wall_clock_seconds"),
        }
    print(json.dumps(info, indent=2))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except inf.DivergenceError as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return 3
    except (ValidationError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
