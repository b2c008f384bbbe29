"""Stepper tests: independent stencil oracle, lag bookkeeping, rollouts."""

import numpy as np
import pytest

from l96closure import autodiff as ad
from l96closure.dynamics import (
    ClosureModel,
    HistoryConfig,
    HistoryWindow,
    arch_for_variant,
    closure_eval_members,
    closure_eval_numpy,
    closure_eval_tape,
    dde_rk4_step,
    dual_chain_steps,
    ode_rk4_step,
    rollout,
    rollout_instantaneous,
    rollout_members,
)
from l96closure.errors import ConfigurationError, IntegrationBlowup
from l96closure.lorenz96 import FullState, TruthConfig, rk4_step, simulate_truth, truth_rhs
from l96closure.network import init_params, mlp_forward

K = 8
F = 15.0
HIST = HistoryConfig(n_h=2, delta_t=0.01)


def make_params(seed=0, n_h=2, width=6, layers=1):
    arch = arch_for_variant("history", n_h, layers, width)
    return init_params(arch, seed)


def stencil_oracle(states_by_offset, params, F, n_h, delta_t):
    """Independent transcription of the lagged RK4 step.

    `states_by_offset[d]` is the state at t - d*delta_t. Stage one sees the
    even offsets {2, 4, ..., 2 n_h}, the midpoint stages see the odd offsets
    {1, 3, ..., 2 n_h - 1}, and the final stage sees {0, 2, ..., 2 n_h - 2}.
    Everything below is written with explicit per-site loops.
    """

    def closure(features_per_site):
        out = np.empty(len(features_per_site))
        for k, feats in enumerate(features_per_site):
            h = np.asarray(feats, dtype=np.float64)
            layers = params.layers()
            for W, b in layers[:-1]:
                h = np.tanh(h @ W + b)
            W, b = layers[-1]
            out[k] = (h @ W + b)[0]
        return out

    def tendency(current, lag_offsets):
        n = len(current)
        adv = np.empty(n)
        for k in range(n):
            adv[k] = -current[(k - 1) % n] * (current[(k - 2) % n] - current[(k + 1) % n])
        feats = [
            [current[k]] + [states_by_offset[d][k] for d in lag_offsets]
            for k in range(n)
        ]
        return adv - current + F + closure(feats)

    step = 2.0 * delta_t
    x0 = states_by_offset[0]
    even = [2 * i for i in range(1, n_h + 1)]
    odd = [2 * i - 1 for i in range(1, n_h + 1)]
    shifted = [2 * i - 2 for i in range(1, n_h + 1)]
    r1 = step * tendency(x0, even)
    r2 = step * tendency(x0 + 0.5 * r1, odd)
    r3 = step * tendency(x0 + 0.5 * r2, odd)
    r4 = step * tendency(x0 + r3, shifted)
    return x0 + (r1 + 2.0 * r2 + 2.0 * r3 + r4) / 6.0


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("n_h", [1, 2, 3])
def test_dde_step_matches_independent_stencil(seed, n_h):
    hist = HistoryConfig(n_h=n_h, delta_t=0.01)
    params = make_params(seed=seed, n_h=n_h)
    rng = np.random.default_rng(100 + seed)
    window = [rng.normal(0.0, 3.0, size=K) for _ in range(2 * n_h + 1)]
    got = dde_rk4_step(window, closure_eval_numpy(params), F, hist)
    want = stencil_oracle(
        {d: window[d] for d in range(2 * n_h + 1)}, params, F, n_h, hist.delta_t
    )
    scale = max(np.max(np.abs(want)), 1.0)
    assert np.max(np.abs(got - want)) / scale < 1e-14


def test_stencil_never_touches_oldest_window_slot():
    """Poisoning slot 2 n_h + 1 with NaN must not change the step."""
    params = make_params(seed=3)
    rng = np.random.default_rng(7)
    clean = [rng.normal(size=K) for _ in range(HIST.window_len)]
    poisoned = [s.copy() for s in clean]
    poisoned[-1][:] = np.nan
    closure = closure_eval_numpy(params)
    a = dde_rk4_step(clean, closure, F, HIST)
    b = dde_rk4_step(poisoned, closure, F, HIST)
    assert np.all(np.isfinite(b))
    assert np.array_equal(a, b)


def test_dde_step_with_zero_closure_reduces_to_plain_rk4():
    """With P = 0 the lagged step equals classical RK4 on the slow ODE."""
    arch = arch_for_variant("history", HIST.n_h, 1, 6)
    zero = init_params(arch, 0)
    zero.flat[:] = 0.0
    rng = np.random.default_rng(11)
    window = [rng.normal(size=K) for _ in range(HIST.window_len)]

    def slow_rhs(X):
        return (
            -np.roll(X, 1) * (np.roll(X, 2) - np.roll(X, -1)) - X + F
        )

    got = dde_rk4_step(window, closure_eval_numpy(zero), F, HIST)
    want = rk4_step(slow_rhs, window[0], 2.0 * HIST.delta_t)
    assert np.allclose(got, want, rtol=1e-15, atol=1e-15)


def test_ode_step_with_zero_closure_reduces_to_plain_rk4():
    arch = arch_for_variant("instantaneous", HIST.n_h, 1, 6)
    zero = init_params(arch, 0)
    zero.flat[:] = 0.0
    rng = np.random.default_rng(12)
    x = rng.normal(size=K)

    def slow_rhs(X):
        return -np.roll(X, 1) * (np.roll(X, 2) - np.roll(X, -1)) - X + F

    got = ode_rk4_step(x, closure_eval_numpy(zero), F, HIST.delta_t)
    want = rk4_step(slow_rhs, x, HIST.delta_t)
    assert np.allclose(got, want, rtol=1e-15, atol=1e-15)


def test_uniform_fixed_point_preserved():
    """X = F with zero closure is an equilibrium of the slow system."""
    arch = arch_for_variant("history", HIST.n_h, 1, 6)
    zero = init_params(arch, 0)
    zero.flat[:] = 0.0
    window = [np.full(K, F) for _ in range(HIST.window_len)]
    out = dde_rk4_step(window, closure_eval_numpy(zero), F, HIST)
    assert np.array_equal(out, np.full(K, F))


def test_exact_coupling_reproduces_truth_slow_tendency():
    """advection - X + F + coupling equals the truth model's slow tendency."""
    cfg = TruthConfig(K=8, J=32, t_end=0.1, spinup=0.5)
    traj = simulate_truth(cfg)
    from l96closure.dynamics import advection

    for i in (0, 5, 10):
        X, Y = traj.X[i], traj.Y[i]
        d = truth_rhs(FullState(X=X, Y=Y), cfg)
        modeled = advection(X) - X + cfg.F + traj.coupling[i]
        assert np.allclose(modeled, d.X, rtol=0, atol=1e-12)


def test_tape_step_matches_numpy_step():
    params = make_params(seed=4)
    rng = np.random.default_rng(13)
    window = [rng.normal(size=K) for _ in range(HIST.window_len)]
    got_np = dde_rk4_step(window, closure_eval_numpy(params), F, HIST)
    theta = ad.leaf(params.flat)
    got_t = dde_rk4_step(
        [ad.constant(w) for w in window],
        closure_eval_tape(theta, params.arch), F, HIST,
    )
    assert np.array_equal(got_np, got_t.value)


def test_dual_chain_interleaving_against_manual_steps():
    """Chronology and window reuse of the two interleaved chains."""
    params = make_params(seed=5)
    closure = closure_eval_numpy(params)
    rng = np.random.default_rng(14)
    W0 = [rng.normal(size=K) for _ in range(HIST.window_len)]

    emitted, W_final = dual_chain_steps(W0, closure, F, HIST, n_macro=2)
    assert len(emitted) == 4

    # first macro step by hand
    even1 = dde_rk4_step(W0, closure, F, HIST)
    odd1 = dde_rk4_step(W0[1:], closure, F, HIST)
    assert np.array_equal(emitted[0], odd1)
    assert np.array_equal(emitted[1], even1)
    # second macro step uses the refreshed window
    W1 = [even1, odd1] + W0[:-2]
    even2 = dde_rk4_step(W1, closure, F, HIST)
    odd2 = dde_rk4_step(W1[1:], closure, F, HIST)
    assert np.array_equal(emitted[2], odd2)
    assert np.array_equal(emitted[3], even2)
    assert np.array_equal(np.stack(W_final), np.stack([even2, odd2] + W1[:-2]))


def test_dual_chain_perturbation_propagates_via_midpoints():
    """Perturbing an odd-offset entry changes the even chain's first step."""
    params = make_params(seed=6)
    closure = closure_eval_numpy(params)
    rng = np.random.default_rng(15)
    W0 = [rng.normal(size=K) for _ in range(HIST.window_len)]
    base = dde_rk4_step(W0, closure, F, HIST)
    W_pert = [w.copy() for w in W0]
    W_pert[1] += 1e-3  # offset delta_t feeds the midpoint stages
    pert = dde_rk4_step(W_pert, closure, F, HIST)
    assert not np.array_equal(base, pert)


def test_dual_chain_window_length_validation():
    params = make_params()
    with pytest.raises(ConfigurationError):
        dual_chain_steps([np.zeros(K)] * 3, closure_eval_numpy(params), F, HIST, 1)


def test_rollout_times_and_shapes():
    params = make_params(seed=7)
    rng = np.random.default_rng(16)
    init = HistoryWindow(
        states=rng.normal(size=(HIST.window_len, K)), t=1.0
    )
    for horizon in (1, 2, 5):
        res = rollout(init, params, F, HIST, horizon)
        assert res.states.shape == (horizon, K)
        assert res.closures.shape == (horizon, K)
        assert np.allclose(res.times, 1.0 + HIST.delta_t * np.arange(1, horizon + 1))


def test_rollout_closure_record_matches_direct_evaluation():
    """Recorded closures equal P evaluated on the merged lag sequence."""
    params = make_params(seed=8)
    rng = np.random.default_rng(17)
    init = HistoryWindow(states=rng.normal(size=(HIST.window_len, K)), t=0.0)
    horizon = 6
    res = rollout(init, params, F, HIST, horizon)
    merged = np.concatenate([init.states[::-1], res.states], axis=0)
    closure = closure_eval_numpy(params)
    for j in range(horizon):
        i = init.states.shape[0] + j
        lags = [merged[i - 2 * d] for d in range(HIST.n_h + 1)]
        assert np.allclose(res.closures[j], closure(lags), atol=1e-14)


def test_member_rollout_matches_single_rollouts():
    M = 3
    rng = np.random.default_rng(18)
    arch = arch_for_variant("history", HIST.n_h, 1, 6)
    thetas = np.stack([init_params(arch, s).flat for s in range(M)])
    init = HistoryWindow(states=rng.normal(size=(HIST.window_len, K)), t=0.0)
    res = rollout_members(init, thetas, arch, F, HIST, horizon=5)
    assert res.states.shape == (5, M, K)
    for m in range(M):
        from l96closure.network import ClosureParams

        single = rollout(init, ClosureParams(flat=thetas[m], arch=arch), F, HIST, 5)
        assert np.allclose(res.states[:, m], single.states, rtol=0, atol=1e-12)
        assert np.allclose(res.closures[:, m], single.closures, rtol=0, atol=1e-12)


def test_member_closure_eval_matches_scalar_eval():
    M = 4
    rng = np.random.default_rng(19)
    arch = arch_for_variant("history", 2, 1, 6)
    thetas = np.stack([init_params(arch, s).flat for s in range(M)])
    lags = [rng.normal(size=(M, K)) for _ in range(3)]
    out = closure_eval_members(thetas, arch)(lags)
    from l96closure.network import ClosureParams

    for m in range(M):
        params = ClosureParams(flat=thetas[m], arch=arch)
        single = closure_eval_numpy(params)([l[m] for l in lags])
        assert np.allclose(out[m], single, atol=1e-13)


def test_instantaneous_rollout_blowup_detection():
    arch = arch_for_variant("instantaneous", 2, 1, 6)
    params = init_params(arch, 0)
    params.flat[-1] = 1e8  # enormous output bias forces divergence
    with pytest.raises(IntegrationBlowup):
        rollout_instantaneous(np.zeros(K), 0.0, params, F, HIST, horizon=50)


def test_history_window_rejects_non_finite():
    bad = np.zeros((HIST.window_len, K))
    bad[0, 0] = np.inf
    with pytest.raises(ConfigurationError):
        HistoryWindow(states=bad, t=0.0)


def test_closure_model_variant_validation():
    arch = arch_for_variant("history", 2, 1, 6)
    with pytest.raises(ConfigurationError):
        ClosureModel(arch=arch, hist=HIST, F=F, variant="hybrid")
    with pytest.raises(ConfigurationError):
        arch_for_variant("hybrid", 2, 1, 6)
    assert arch_for_variant("history", 3, 1, 6).input_dim == 4
    assert arch_for_variant("instantaneous", 3, 1, 6).input_dim == 1
