"""Variational fitting: gradient/unbiasedness oracles, Adam algebra, and the
end-to-end fit/refit/checkpoint machinery on small problems.

Gradient checks difference the actual estimator with frozen innovations, so
they cover the whole graph (likelihood, priors, entropy, transforms, and the
amortizer) rather than isolated ops.
"""

import math

import numpy as np
import pytest

from vstm import inference as inf
from vstm import kernel as K
from vstm import model as M
from vstm.util import ValidationError


def make_problem(n=12, d=4, k=3, p=2, seed=7, amortized=False, **cfg):
    gen = np.random.default_rng(seed)
    Z = gen.standard_normal((n, d))
    X = np.hstack([np.ones((n, 1)), gen.standard_normal((n, p - 1))])
    spec = M.ModelSpec(k=k, d=d, p=p)
    config = inf.FitConfig(
        iterations=cfg.pop("iterations", 10),
        amortized=amortized,
        amortizer_width=cfg.pop("amortizer_width", 4),
        seed=seed,
        **cfg,
    )
    state = inf.init_state(Z, X, spec, config, K.RngStream(seed, 3))
    return Z, X, spec, config, state


def randomize_state(state, seed=11, scale=0.3):
    # move off the symmetric init so no gradient vanishes by accident
    gen = np.random.default_rng(seed)
    for name in state.params:
        state.params[name] = state.params[name] + scale * gen.standard_normal(
            state.params[name].shape
        )
    return state


def negq_reference(rho, eps):
    return float(rho.sum()) + 0.5 * eps.size * K.LOG_2PI + 0.5 * float((eps ** 2).sum())


def elbo_reference(Zb, Xb, idx, state, spec, n_total, eps):
    """Independent estimator: numpy transforms + the model module densities."""
    s_draws = eps["beta"].shape[0]
    total = 0.0
    scale = n_total / Zb.shape[0]
    for s in range(s_draws):
        eps_s = {name: eps[name][s] for name in inf.GLOBAL_BLOCKS}
        eps_s["zeta"] = None
        draw = inf.sample_variational(state, spec, eps_s)
        e_z = eps["zeta"][s]
        if state.amortized:
            lam, nu = inf.amortize_forward(state, Zb, Xb)
            rho_z = np.log(nu)
        else:
            lam = state.params["zeta.loc"][idx]
            rho_z = state.params["zeta.log_scale"][idx]
            nu = np.exp(rho_z)
        zeta_b = lam + nu * e_z
        value = M.log_joint(Zb, Xb, zeta_b, draw.globals_, spec, scale=scale)
        value += scale * negq_reference(rho_z, e_z)
        for name in inf.GLOBAL_BLOCKS:
            value += negq_reference(state.params[f"{name}.log_scale"], eps[name][s])
        value += draw.log_jac
        total += value
    return total / s_draws


# ---------------------------------------------------------------- state


def test_init_state_shapes_and_defaults():
    Z, X, spec, config, state = make_problem()
    assert state.params["beta.loc"].shape == (3, 4)
    assert state.params["gamma.loc"].shape == (2, 2)
    assert state.params["log_sigma.loc"].shape == (2,)
    assert state.params["cpc.loc"].shape == (1,)
    assert state.params["zeta.loc"].shape == (12, 2)
    for name in ("beta", "gamma", "log_sigma", "cpc", "zeta"):
        assert np.allclose(state.params[f"{name}.log_scale"], math.log(0.1))
    # prototypes start at refined cluster centers: distinct, inside the data
    # envelope, and reproducible from the stream
    rows = state.params["beta.loc"]
    assert len({tuple(r) for r in rows}) == 3
    assert np.all(rows >= Z.min(axis=0) - 1e-12) and np.all(rows <= Z.max(axis=0) + 1e-12)
    again = inf.init_state(Z, X, spec, config, K.RngStream(7, 3))
    assert np.array_equal(again.params["beta.loc"], rows)
    assert np.array_equal(again.params["zeta.loc"], state.params["zeta.loc"])


def test_init_state_amortized_starts_at_standard_normal():
    Z, X, spec, config, state = make_problem(amortized=True)
    assert "zeta.loc" not in state.params
    lam, nu = inf.amortize_forward(state, Z, X)
    assert np.all(lam == 0.0)
    assert np.all(nu == 1.0)


def test_state_validation_rejects_mixed_blocks():
    Z, X, spec, config, state = make_problem()
    state.params["amort.W0"] = np.zeros((6, 4))
    with pytest.raises(ValidationError):
        state.validate(spec)


def test_state_validation_rejects_bad_shape():
    Z, X, spec, config, state = make_problem()
    state.params["gamma.loc"] = np.zeros((3, 2))
    with pytest.raises(ValidationError):
        state.validate(spec)


def test_draw_eps_shapes_and_reproducibility():
    Z, X, spec, config, state = make_problem()
    e1 = inf.draw_eps(state, spec, 5, 2, K.RngStream(3).generator())
    e2 = inf.draw_eps(state, spec, 5, 2, K.RngStream(3).generator())
    assert e1["beta"].shape == (2, 3, 4)
    assert e1["zeta"].shape == (2, 5, 2)
    for name in e1:
        assert np.array_equal(e1[name], e2[name])


# ---------------------------------------------------------- amortizer


def test_amortizer_graph_matches_numpy_forward():
    Z, X, spec, config, state = make_problem(amortized=True)
    randomize_state(state, seed=5, scale=0.4)
    lam_np, nu_np = inf.amortize_forward(state, Z, X)
    from vstm import tape as T

    leaves = {k: T.Var(v) for k, v in state.params.items()}
    lam_g, lognu_g = inf._amort_graph(leaves, Z, X)
    np.testing.assert_allclose(lam_g.value, lam_np, rtol=1e-12)
    np.testing.assert_allclose(np.exp(lognu_g.value), nu_np, rtol=1e-12)


# ----------------------------------------------------- estimator parity


def test_elbo_matches_numpy_composition_full_batch():
    Z, X, spec, config, state = make_problem()
    randomize_state(state)
    idx = np.arange(12)
    eps = inf.draw_eps(state, spec, 12, 1, K.RngStream(1).generator())
    got = inf.elbo_with_eps(Z, X, idx, state, spec, 12, eps)
    want = elbo_reference(Z, X, idx, state, spec, 12, eps)
    assert got == pytest.approx(want, rel=1e-9)


def test_elbo_matches_numpy_composition_minibatch():
    Z, X, spec, config, state = make_problem()
    randomize_state(state, seed=2)
    idx = np.array([1, 4, 7, 9, 10])
    eps = inf.draw_eps(state, spec, idx.size, 3, K.RngStream(2).generator())
    got = inf.elbo_with_eps(Z[idx], X[idx], idx, state, spec, 12, eps)
    want = elbo_reference(Z[idx], X[idx], idx, state, spec, 12, eps)
    assert got == pytest.approx(want, rel=1e-9)


def test_elbo_matches_numpy_composition_amortized():
    Z, X, spec, config, state = make_problem(amortized=True)
    randomize_state(state, seed=3, scale=0.2)
    idx = np.arange(12)
    eps = inf.draw_eps(state, spec, 12, 2, K.RngStream(4).generator())
    got = inf.elbo_with_eps(Z, X, idx, state, spec, 12, eps)
    want = elbo_reference(Z, X, idx, state, spec, 12, eps)
    assert got == pytest.approx(want, rel=1e-9)


def test_elbo_k1_matches_numpy_composition():
    Z, X, spec, config, state = make_problem(k=1)
    randomize_state(state, seed=4)
    idx = np.arange(12)
    eps = inf.draw_eps(state, spec, 12, 1, K.RngStream(6).generator())
    got = inf.elbo_with_eps(Z, X, idx, state, spec, 12, eps)
    want = elbo_reference(Z, X, idx, state, spec, 12, eps)
    assert got == pytest.approx(want, rel=1e-9)


def test_elbo_is_pure():
    Z, X, spec, config, state = make_problem()
    before = {k: v.copy() for k, v in state.params.items()}
    idx = np.arange(12)
    eps = inf.draw_eps(state, spec, 12, 1, K.RngStream(8).generator())
    v1 = inf.elbo_with_eps(Z, X, idx, state, spec, 12, eps)
    v2 = inf.elbo_with_eps(Z, X, idx, state, spec, 12, eps)
    assert v1 == v2
    for k in before:
        assert np.array_equal(before[k], state.params[k])


def test_elbo_affine_in_total_count():
    # the data terms enter through scale = n_total / batch, linearly
    Z, X, spec, config, state = make_problem()
    idx = np.array([0, 3, 5])
    eps = inf.draw_eps(state, spec, 3, 1, K.RngStream(9).generator())
    f = lambda t: inf.elbo_with_eps(Z[idx], X[idx], idx, state, spec, t, eps)
    assert f(9) - f(6) == pytest.approx(f(6) - f(3), rel=1e-9)


def test_minibatch_enumeration_is_unbiased():
    from itertools import combinations

    Z, X, spec, config, state = make_problem(n=6, seed=13)
    randomize_state(state, seed=13)
    gen = K.RngStream(42).generator()
    eps_full = inf.draw_eps(state, spec, 6, 1, gen)
    full = inf.elbo_with_eps(Z, X, np.arange(6), state, spec, 6, eps_full)
    vals = []
    for subset in combinations(range(6), 3):
        idx = np.array(subset)
        eps = {name: eps_full[name] for name in inf.GLOBAL_BLOCKS}
        eps["zeta"] = eps_full["zeta"][:, idx, :]
        vals.append(inf.elbo_with_eps(Z[idx], X[idx], idx, state, spec, 6, eps))
    assert np.mean(vals) == pytest.approx(full, abs=1e-10)


def test_estimator_variance_shrinks_with_draws():
    Z, X, spec, config, state = make_problem(n=8, seed=21)
    idx = np.arange(8)

    def spread(s):
        vals = [
            inf.elbo_with_eps(
                Z, X, idx, state, spec, 8,
                inf.draw_eps(state, spec, 8, s, K.RngStream(100 + r).generator()),
            )
            for r in range(40)
        ]
        return np.var(vals)

    assert spread(16) < spread(1) / 4.0


# ------------------------------------------------------------ gradients


def fd_check_all_blocks(Z, X, idx, state, spec, n_total, eps, h=1e-5, tol=2e-5):
    _, grads = inf.elbo_value_and_grad(Z[idx], X[idx], idx, state, spec, n_total, eps)
    worst = 0.0
    for name, arr in state.params.items():
        g = grads[name]
        assert g.shape == arr.shape
        for pos in np.ndindex(*arr.shape) if arr.shape else [()]:
            keep = arr[pos]
            arr[pos] = keep + h
            up = inf.elbo_with_eps(Z[idx], X[idx], idx, state, spec, n_total, eps)
            arr[pos] = keep - h
            dn = inf.elbo_with_eps(Z[idx], X[idx], idx, state, spec, n_total, eps)
            arr[pos] = keep
            fd = (up - dn) / (2 * h)
            rel = abs(g[pos] - fd) / max(1.0, abs(fd))
            worst = max(worst, rel)
            assert rel < tol, f"{name}{pos}: tape {g[pos]:.8g} vs fd {fd:.8g}"
    return worst


def test_gradients_match_finite_differences():
    Z, X, spec, config, state = make_problem()
    randomize_state(state, seed=17)
    idx = np.arange(12)
    eps = inf.draw_eps(state, spec, 12, 2, K.RngStream(5).generator())
    fd_check_all_blocks(Z, X, idx, state, spec, 12, eps)


def test_gradients_match_finite_differences_minibatch():
    Z, X, spec, config, state = make_problem()
    randomize_state(state, seed=18)
    idx = np.array([2, 5, 8, 11])
    eps = inf.draw_eps(state, spec, 4, 1, K.RngStream(7).generator())
    fd_check_all_blocks(Z, X, idx, state, spec, 12, eps)


def test_gradients_match_finite_differences_amortized():
    Z, X, spec, config, state = make_problem(amortized=True)
    randomize_state(state, seed=19, scale=0.2)
    idx = np.arange(12)
    eps = inf.draw_eps(state, spec, 12, 1, K.RngStream(12).generator())
    fd_check_all_blocks(Z, X, idx, state, spec, 12, eps)


def test_gradients_match_finite_differences_k1():
    Z, X, spec, config, state = make_problem(k=1)
    randomize_state(state, seed=20)
    idx = np.arange(12)
    eps = inf.draw_eps(state, spec, 12, 1, K.RngStream(13).generator())
    fd_check_all_blocks(Z, X, idx, state, spec, 12, eps)


def test_out_of_batch_rows_get_zero_gradient():
    Z, X, spec, config, state = make_problem()
    idx = np.array([0, 4])
    eps = inf.draw_eps(state, spec, 2, 1, K.RngStream(14).generator())
    _, grads = inf.elbo_value_and_grad(Z[idx], X[idx], idx, state, spec, 12, eps)
    inside = np.zeros(12, dtype=bool)
    inside[idx] = True
    assert np.all(grads["zeta.loc"][~inside] == 0.0)
    assert np.all(grads["zeta.log_scale"][~inside] == 0.0)
    assert np.any(grads["zeta.loc"][inside] != 0.0)


# ----------------------------------------------------------------- adam


def test_adam_first_step_closed_form():
    params = {"w": np.array([1.0, -2.0, 0.5])}
    grads = {"w": np.array([0.3, -0.1, 2.0])}
    state = inf.VariationalState(params, 3, False)
    moments = inf.AdamMoments.zeros_like(params)
    config = inf.FitConfig(iterations=1, learning_rate=0.01)
    inf.adam_step(state, grads, moments, config, t=1)
    want = np.array([1.0, -2.0, 0.5]) + 0.01 * grads["w"] / (
        np.abs(grads["w"]) + config.adam_eps
    )
    np.testing.assert_allclose(state.params["w"], want, rtol=1e-12)


def test_adam_zero_gradient_is_a_fixed_point():
    params = {"w": np.array([3.0, -1.0])}
    state = inf.VariationalState(params, 2, False)
    moments = inf.AdamMoments.zeros_like(params)
    config = inf.FitConfig(iterations=1)
    for t in range(1, 5):
        inf.adam_step(state, {"w": np.zeros(2)}, moments, config, t)
    np.testing.assert_array_equal(state.params["w"], [3.0, -1.0])
    assert np.all(moments.m["w"] == 0.0) and np.all(moments.v["w"] == 0.0)


def test_adam_constant_gradient_step_approaches_lr():
    params = {"w": np.zeros(1)}
    state = inf.VariationalState(params, 1, False)
    moments = inf.AdamMoments.zeros_like(params)
    config = inf.FitConfig(iterations=1, learning_rate=0.02)
    prev = 0.0
    for t in range(1, 201):
        inf.adam_step(state, {"w": np.ones(1)}, moments, config, t)
        step = float(state.params["w"][0]) - prev
        prev = float(state.params["w"][0])
    assert step == pytest.approx(0.02, rel=0.05)


# ------------------------------------------------------------------ fit


def two_cluster_data(n=60, d=3, seed=0):
    gen = np.random.default_rng(seed)
    centers = np.array([[2.5, 0.0, 0.0], [-2.5, 0.5, 0.0]])
    labels = np.repeat([0, 1], n // 2)
    Z = centers[labels] + 0.3 * gen.standard_normal((n, d))
    Z = Z - Z.mean(axis=0)
    X = np.ones((n, 1))
    return Z, X, labels


def test_fit_recovers_two_clusters():
    Z, X, labels = two_cluster_data()
    spec = M.ModelSpec(k=2, d=3, p=1)
    config = inf.FitConfig(iterations=500, learning_rate=0.05, seed=1)
    res = inf.fit(Z, X, spec, config)
    # map each true center onto its closest prototype, injectively
    centers = np.stack([Z[labels == c].mean(axis=0) for c in (0, 1)])
    proto = res.globals_.beta
    assign = [int(np.argmin(((proto - c) ** 2).sum(axis=1))) for c in centers]
    assert sorted(assign) == [0, 1]
    for c, j in zip(centers, assign):
        assert np.linalg.norm(proto[j] - c) < 0.6
    # memberships side with the right prototype
    hard = res.theta.argmax(axis=1)
    for lab in (0, 1):
        rows = hard[labels == lab]
        assert np.mean(rows == assign[lab]) > 0.9
    assert np.all(res.theta >= 0) and np.allclose(res.theta.sum(axis=1), 1.0)


def test_fit_is_deterministic():
    Z, X, _ = two_cluster_data(n=20)
    spec = M.ModelSpec(k=2, d=3, p=1)
    config = inf.FitConfig(iterations=60, batch_size=8, seed=5)
    a = inf.fit(Z, X, spec, config)
    b = inf.fit(Z, X, spec, config)
    for name in a.state.params:
        assert np.array_equal(a.state.params[name], b.state.params[name]), name
    assert np.array_equal(a.elbo_trace, b.elbo_trace)
    assert np.array_equal(a.theta, b.theta)
    ma = {k: v for k, v in a.manifest.items() if k != "wall_clock_seconds"}
    mb = {k: v for k, v in b.manifest.items() if k != "wall_clock_seconds"}
    assert ma == mb


def test_fit_elbo_improves():
    Z, X, _ = two_cluster_data(n=40)
    spec = M.ModelSpec(k=2, d=3, p=1)
    config = inf.FitConfig(iterations=400, learning_rate=0.05, seed=2, elbo_eval_every=10)
    res = inf.fit(Z, X, spec, config)
    trace = res.elbo_trace
    assert np.all(np.isfinite(trace))
    assert np.mean(trace[-4:]) > trace[0]


def test_fit_single_topic():
    gen = np.random.default_rng(3)
    Z = gen.standard_normal((50, 3)) * 0.2 + np.array([1.0, -2.0, 0.5])
    X = np.ones((50, 1))
    spec = M.ModelSpec(k=1, d=3, p=1)
    config = inf.FitConfig(iterations=300, learning_rate=0.05, seed=3)
    res = inf.fit(Z, X, spec, config)
    assert res.theta.shape == (50, 1)
    np.testing.assert_array_equal(res.theta, np.ones((50, 1)))
    assert res.lambda_theta.shape == (50, 0)
    assert res.globals_.gamma.shape == (1, 0)
    assert res.globals_.sigma_theta.shape == (0,)
    np.testing.assert_allclose(res.globals_.beta[0], Z.mean(axis=0), atol=0.1)


def test_fit_amortized_runs_and_matches_direct_roughly():
    Z, X, labels = two_cluster_data(n=40)
    spec = M.ModelSpec(k=2, d=3, p=1)
    direct = inf.fit(Z, X, spec, inf.FitConfig(iterations=500, learning_rate=0.05, seed=4))
    amort = inf.fit(
        Z, X, spec,
        inf.FitConfig(
            iterations=800, learning_rate=0.02, seed=4,
            amortized=True, amortizer_width=16,
        ),
    )
    # same hard clustering up to topic relabeling
    da = direct.theta.argmax(axis=1)
    aa = amort.theta.argmax(axis=1)
    agree = np.mean(da == aa)
    assert max(agree, 1.0 - agree) > 0.9


def test_fit_divergence_carries_last_finite_state():
    Z, X, _ = two_cluster_data(n=20)
    spec = M.ModelSpec(k=2, d=3, p=1)
    config = inf.FitConfig(iterations=50, learning_rate=1e9, seed=6)
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(inf.DivergenceError) as err:
            inf.fit(Z, X, spec, config)
    assert err.value.state is not None
    assert isinstance(err.value.step, int)
    for arr in err.value.state.params.values():
        assert np.all(np.isfinite(arr))


def test_fit_input_validation():
    Z, X, _ = two_cluster_data(n=10)
    spec = M.ModelSpec(k=2, d=3, p=1)
    with pytest.raises(ValidationError):
        inf.fit(Z, X, spec, inf.FitConfig(iterations=5, batch_size=11))
    with pytest.raises(ValidationError):
        inf.fit(Z[:1], X[:1], spec, inf.FitConfig(iterations=5))
    with pytest.raises(ValidationError):
        inf.fit(Z[:, :2], X, spec, inf.FitConfig(iterations=5))
    bad = Z.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValidationError):
        inf.fit(bad, X, spec, inf.FitConfig(iterations=5))


def test_epoch_batches_partition_without_replacement():
    gen = np.random.default_rng(0)
    seen = np.concatenate(list(inf._epoch_batches(10, 4, gen)))
    assert sorted(seen.tolist()) == list(range(10))
    sizes = [b.size for b in inf._epoch_batches(10, 4, gen)]
    assert sizes == [4, 4, 2]


# ---------------------------------------------------------------- refit


def test_refit_reproduces_fit_memberships():
    Z, X, labels = two_cluster_data(n=40)
    spec = M.ModelSpec(k=2, d=3, p=1)
    fitted = inf.fit(Z, X, spec, inf.FitConfig(iterations=600, learning_rate=0.05, seed=8))
    re = inf.refit_local(
        Z, X, fitted.globals_, spec,
        inf.FitConfig(iterations=600, learning_rate=0.05, seed=9),
    )
    assert np.mean(np.abs(re.theta - fitted.theta)) < 0.05


def test_refit_leaves_globals_untouched():
    Z, X, _ = two_cluster_data(n=20)
    spec = M.ModelSpec(k=2, d=3, p=1)
    globals_ = M.GlobalParams(
        beta=np.array([[2.0, 0.0, 0.0], [-2.0, 0.0, 0.0]]),
        gamma=np.zeros((1, 1)),
        sigma_theta=np.ones(1),
        chol_omega=np.eye(1),
    )
    snap = {
        "beta": globals_.beta.copy(),
        "gamma": globals_.gamma.copy(),
        "sigma": globals_.sigma_theta.copy(),
        "chol": globals_.chol_omega.copy(),
    }
    inf.refit_local(Z, X, globals_, spec, inf.FitConfig(iterations=40, seed=1))
    assert np.array_equal(globals_.beta, snap["beta"])
    assert np.array_equal(globals_.gamma, snap["gamma"])
    assert np.array_equal(globals_.sigma_theta, snap["sigma"])
    assert np.array_equal(globals_.chol_omega, snap["chol"])


def test_refit_single_image():
    spec = M.ModelSpec(k=3, d=4, p=1)
    gen = np.random.default_rng(2)
    globals_ = M.GlobalParams(
        beta=3.0 * gen.standard_normal((3, 4)),
        gamma=np.zeros((1, 2)),
        sigma_theta=np.ones(2),
        chol_omega=np.eye(2),
    )
    z = globals_.beta[1][None, :] + 0.05 * gen.standard_normal((1, 4))
    re = inf.refit_local(z, np.ones((1, 1)), globals_, spec, inf.FitConfig(iterations=400, learning_rate=0.1, seed=3))
    assert re.theta.shape == (1, 3)
    assert re.theta.argmax() == 1
    assert re.theta[0, 1] > 0.6


# ------------------------------------------------- posterior summaries


def test_posterior_mean_globals_collapses_to_locations():
    Z, X, spec, config, state = make_problem()
    randomize_state(state, seed=31)
    for name in inf.GLOBAL_BLOCKS:
        state.params[f"{name}.log_scale"] = np.full_like(
            state.params[f"{name}.log_scale"], -20.0
        )
    hat = inf.posterior_mean_globals(state, spec, n_draws=64, rng=K.RngStream(0, 9))
    np.testing.assert_array_equal(hat.beta, state.params["beta.loc"])
    np.testing.assert_array_equal(hat.gamma, state.params["gamma.loc"])
    np.testing.assert_allclose(hat.sigma_theta, np.exp(state.params["log_sigma.loc"]), rtol=1e-6)
    L, _ = K.cpc_to_cholesky(state.params["cpc.loc"], dim=2)
    np.testing.assert_allclose(hat.chol_omega, L, rtol=1e-6, atol=1e-9)
    hat.validate(spec)


def test_posterior_mean_sigma_is_lognormal_mean():
    Z, X, spec, config, state = make_problem()
    mu, rho = 0.4, math.log(0.5)
    state.params["log_sigma.loc"] = np.full(2, mu)
    state.params["log_sigma.log_scale"] = np.full(2, rho)
    hat = inf.posterior_mean_globals(state, spec, n_draws=4096, rng=K.RngStream(1, 9))
    want = math.exp(mu + 0.25 ** 2 * 4 / 2)  # exp(mu + nu^2/2), nu = 0.5
    np.testing.assert_allclose(hat.sigma_theta, want, rtol=0.05)


def test_theta_posterior_mean_tiny_scale_is_softmax():
    Z, X, spec, config, state = make_problem()
    state.params["zeta.log_scale"] = np.full((12, 2), -20.0)
    theta, lam = inf.theta_posterior_mean(state, spec, Z, X, 32, K.RngStream(2, 4))
    want = M._softmax_rows(state.params["zeta.loc"])
    np.testing.assert_allclose(theta, want, rtol=1e-6, atol=1e-12)
    np.testing.assert_array_equal(lam, state.params["zeta.loc"])


# ------------------------------------------------------------ checkpoints


def test_checkpoint_roundtrip(tmp_path):
    Z, X, spec, config, state = make_problem()
    randomize_state(state, seed=41)
    moments = inf.AdamMoments.zeros_like(state.params)
    for k in moments.m:
        moments.m[k] = moments.m[k] + 0.5
        moments.v[k] = moments.v[k] + 2.0
    rng_states = {"shuffle": [1, 2], "eps": [3]}
    path = tmp_path / "run.ckpt"
    inf.save_checkpoint(path, spec, state, moments, 123, rng_states)
    ck = inf.load_checkpoint(path)
    assert ck.step == 123
    assert ck.rng_states == rng_states
    assert ck.spec.k == spec.k and ck.spec.d == spec.d and ck.spec.p == spec.p
    assert set(ck.state.params) == set(state.params)
    for name in state.params:
        np.testing.assert_array_equal(ck.state.params[name], state.params[name])
        np.testing.assert_array_equal(ck.moments.m[name], moments.m[name])
        np.testing.assert_array_equal(ck.moments.v[name], moments.v[name])
    assert ck.state.n == state.n and ck.state.amortized == state.amortized


def test_checkpoint_roundtrip_amortized(tmp_path):
    Z, X, spec, config, state = make_problem(amortized=True)
    moments = inf.AdamMoments.zeros_like(state.params)
    path = tmp_path / "run.ckpt"
    inf.save_checkpoint(path, spec, state, moments, 1, {})
    ck = inf.load_checkpoint(path)
    assert ck.state.amortized
    for name in state.params:
        np.testing.assert_array_equal(ck.state.params[name], state.params[name])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(ValidationError):
        inf.load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path):
    Z, X, spec, config, state = make_problem()
    moments = inf.AdamMoments.zeros_like(state.params)
    path = tmp_path / "run.ckpt"
    inf.save_checkpoint(path, spec, state, moments, 7, {})
    blob = path.read_bytes()
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(blob[:-16])
    with pytest.raises(ValidationError):
        inf.load_checkpoint(cut)
    padded = tmp_path / "pad.ckpt"
    padded.write_bytes(blob + b"\x00")
    with pytest.raises(ValidationError):
        inf.load_checkpoint(padded)


def test_resume_from_checkpoint_state_matches(tmp_path):
    # saving after fit and reloading reproduces the stored state exactly
    Z, X, _ = two_cluster_data(n=16)
    spec = M.ModelSpec(k=2, d=3, p=1)
    res = inf.fit(Z, X, spec, inf.FitConfig(iterations=30, seed=11))
    path = tmp_path / "fit.ckpt"
    inf.save_checkpoint(path, spec, res.state, res.moments, 30, {"seed": 11})
    ck = inf.load_checkpoint(path)
    for name in res.state.params:
        np.testing.assert_array_equal(ck.state.params[name], res.state.params[name])
