import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from mfjump.drivers import InvalidInputError, make_driver_bundle
from mfjump.limit import (
    FlowApproximation,
    constant_flow,
    coupled_chaos_run,
    ensemble_noise_floor,
    picard_iterate,
    solve_limit,
)
from mfjump.models import AssumptionMeta, ModelSpec
from mfjump.particle import InitSampler
from mfjump.zoo import build

UNIF = InitSampler(kind="uniform", low=0.0, high=1.0)


def _reset_spec(lam0=None, reset_max=1.0, with_rate=None):
    """Pull-to-origin process whose main jump resets into [0, reset_max]."""
    rate = with_rate or (lambda x, m: np.full(x.shape[0], lam0))
    return ModelSpec(
        drift=lambda x, m: -x,
        diffusion=lambda x, m: np.zeros((x.shape[0], 1, 0)),
        rate=rate,
        main_jump=lambda x, m, h: reset_max * np.asarray(h, dtype=float).reshape(-1, 1) - x,
        collateral_jump=lambda xj, tg, m, h1, h2: np.zeros((tg.shape[0], 1)),
        dim=1,
        brownian_dim=0,
        class_tag="lipschitz",
        meta=AssumptionMeta(rate_global_bound=lam0),
        collateral_mean=None,
        main_jump_mean=lambda x, m: 0.5 * reset_max * np.ones_like(x) - x,
        exact_linear_ok=True,
    )


def test_picard_constant_rate_fixed_point():
    # constant rate: the flow's rate summary is exact immediately and the
    # second sweep reproduces the first pathwise, so its delta is zero
    lam0 = 1.3
    spec = _reset_spec(lam0=lam0)
    M, T, dt = 2000, 1.5, 0.05
    bundle = make_driver_bundle(4, 0, M)  # only for the initial sample shape
    flow0 = constant_flow(np.full((M, 1), 0.4), T, spec)
    flow1, d1 = picard_iterate(flow0, spec, M, T, dt, seed=4, initial_positions=np.full((M, 1), 0.4))
    flow2, d2 = picard_iterate(flow1, spec, M, T, dt, seed=4, initial_positions=np.full((M, 1), 0.4))
    assert np.allclose(flow1.lam_mean, lam0, atol=0)
    assert d1 > 0
    assert d2 == 0.0


def test_picard_no_jumps_collapses_to_decay():
    spec = _reset_spec(lam0=0.0)
    M, T, dt = 500, 2.0, 0.1
    x0 = np.full((M, 1), 1.0)
    flow0 = constant_flow(x0, T, spec)
    flow1, _ = picard_iterate(flow0, spec, M, T, dt, seed=1, initial_positions=x0)
    flow2, d2 = picard_iterate(flow1, spec, M, T, dt, seed=1, initial_positions=x0)
    assert d2 == 0.0
    decay = np.exp(-flow1.times)
    assert np.allclose(flow1.ensemble[:, :, 0], decay[:, None], rtol=1e-10)


def test_picard_contraction_neuronal():
    spec = build("neuronal", {})
    M, T, dt = 4000, 3.0, 0.05
    flow = solve_limit(spec, M, T, dt, seed=7, tol=1e-12, max_iter=5, init=UNIF)
    deltas = flow.meta["deltas"]
    assert len(deltas) >= 4
    ratios = [b / a for a, b in zip(deltas, deltas[1:]) if a > 0]
    assert all(r < 1.0 for r in ratios)


def test_picard_fixed_point_within_noise_floor():
    spec = build("neuronal", {})
    M, T, dt = 4000, 3.0, 0.05
    flow = solve_limit(spec, M, T, dt, seed=7, tol=1e-12, max_iter=6, init=UNIF)
    x0 = UNIF.sample(make_driver_bundle(7, 1 << 40, M), 1)
    _, delta = picard_iterate(flow, spec, M, T, dt, seed=7, initial_positions=x0,
                              trunc_c=flow.trunc_c)
    assert delta <= 2.0 * flow.meta["noise_floor"]


def test_solve_limit_vacuous_tolerance():
    spec = _reset_spec(lam0=1.0)
    flow = solve_limit(spec, 200, 1.0, 0.1, seed=2, tol=math.inf, max_iter=5,
                       init=InitSampler(kind="point", point=(0.2,)))
    assert flow.meta["converged"] is True
    assert len(flow.meta["deltas"]) == 1


def test_solve_limit_rejects_bad_tol():
    spec = _reset_spec(lam0=1.0)
    with pytest.raises(InvalidInputError):
        solve_limit(spec, 100, 1.0, 0.1, tol=0.0)


def test_solve_limit_ou_mean():
    # pure Ornstein-Uhlenbeck: ensemble mean at T matches x0 e^{-T}
    s0, x0, T = 0.5, 1.0, 1.0
    spec = ModelSpec(
        drift=lambda x, m: -x,
        diffusion=lambda x, m: np.broadcast_to(s0 * np.eye(1), (x.shape[0], 1, 1)),
        rate=lambda x, m: np.zeros(x.shape[0]),
        main_jump=lambda x, m, h: np.zeros_like(x),
        collateral_jump=lambda xj, tg, m, h1, h2: np.zeros((tg.shape[0], 1)),
        dim=1,
        brownian_dim=1,
        class_tag="lipschitz",
        meta=AssumptionMeta(rate_global_bound=0.0),
        main_jump_mean=lambda x, m: np.zeros_like(x),
    )
    M = 20_000
    flow = solve_limit(spec, M, T, 0.004, seed=10, tol=1e-9, max_iter=2,
                       init=InitSampler(kind="point", point=(x0,)))
    final = flow.ensemble[-1, :, 0]
    se = final.std(ddof=1) / np.sqrt(M)
    assert abs(final.mean() - x0 * np.exp(-T)) < 3 * se + 1e-3  # 1e-3 Euler-bias allowance


def test_solve_limit_stationary_mean_vs_master_equation():
    # reset process: dm/dt = -(1 + lam0) m + lam0 * ubar, so the stationary
    # mean is lam0 * ubar / (1 + lam0); the ODE oracle integrates the same
    # first-moment equation independently of the particle scheme
    lam0, u_max, T = 2.0, 1.0, 8.0
    ubar = u_max / 2
    spec = _reset_spec(lam0=lam0, reset_max=u_max)
    m_inf = lam0 * ubar / (1.0 + lam0)

    ode = solve_ivp(
        lambda t, y: -(1.0 + lam0) * y + lam0 * ubar, (0.0, T), [0.9],
        rtol=1e-10, atol=1e-12, dense_output=True,
    )
    assert abs(ode.y[0, -1] - m_inf) < 1e-6  # long horizon reached stationarity

    M = 20_000
    flow = solve_limit(spec, M, T, 0.05, seed=11, tol=1e-9, max_iter=3,
                       init=InitSampler(kind="point", point=(0.9,)))
    final = flow.ensemble[-1, :, 0]
    se = final.std(ddof=1) / np.sqrt(M)
    assert abs(final.mean() - ode.y[0, -1]) < 3 * se
    assert abs(final.mean() - m_inf) < 3 * se


def test_truncation_doubles_on_saturation():
    spec = build("neuronal", {})
    flow = solve_limit(spec, 500, 2.0, 0.1, seed=3, tol=1e-12, max_iter=4,
                       init=UNIF, trunc_factor=0.2)
    assert flow.meta["trunc_doublings"]


def test_flow_save_load_roundtrip(tmp_path):
    spec = build("neuronal", {})
    flow = solve_limit(spec, 300, 1.0, 0.1, seed=5, tol=1e-3, max_iter=3, init=UNIF)
    path = tmp_path / "flow.npz"
    flow.save(path)
    loaded = FlowApproximation.load(path)
    assert np.array_equal(loaded.times, flow.times)
    assert np.array_equal(loaded.ensemble, flow.ensemble)
    assert np.array_equal(loaded.lam_mean, flow.lam_mean)
    assert loaded.trunc_c == flow.trunc_c


def test_coupled_run_triangle_inequality_and_degeneracy():
    spec = build("lipschitz-demo", {})
    init = InitSampler(mean=(0.5,), std=0.5)
    flow = solve_limit(spec, 1024, 1.0, 0.05, seed=21, tol=5e-3, max_iter=6, init=init)
    s = coupled_chaos_run(spec, 64, 1.0, 0.05, make_driver_bundle(21, 3, 64), flow, init=init)
    assert np.all(s.sup_xlimit <= s.sup_xy + s.sup_ylimit + 1e-12)
    assert np.all(s.sup_xy >= 0) and s.sup_xy.max() > 0

    # collateral off: X and Y coincide exactly for every index
    spec0 = build("lipschitz-demo", {"collateral_amp": 0.0})
    flow0 = solve_limit(spec0, 1024, 1.0, 0.05, seed=21, tol=5e-3, max_iter=6, init=init)
    s0 = coupled_chaos_run(spec0, 64, 1.0, 0.05, make_driver_bundle(21, 3, 64), flow0, init=init)
    assert np.all(s0.sup_xy == 0.0)


def test_coupled_run_measure_free_dynamics_degenerates():
    # measure-independent coefficients with mean-zero collateral: the
    # intermediate system and the limit copies follow identical dynamics on
    # identical streams, so their distance vanishes exactly
    spec = build("lipschitz-demo", {"interaction": 0.0})
    init = InitSampler(mean=(0.5,), std=0.5)
    flow = solve_limit(spec, 256, 1.0, 0.05, seed=33, tol=1e-3, max_iter=4, init=init)
    s = coupled_chaos_run(spec, 32, 1.0, 0.05, make_driver_bundle(33, 0, 32), flow, init=init)
    assert np.all(s.sup_ylimit == 0.0)
    assert s.sup_xy.max() > 0  # collateral kicks still move the interacting system


def test_moment_bound_transfer_neuronal():
    # ensemble estimates of E[rate^p] settle: no positive trend on the
    # second half of the horizon
    spec = build("neuronal", {})
    flow = solve_limit(spec, 4000, 6.0, 0.05, seed=13, tol=1e-4, max_iter=6, init=UNIF)
    for p in (1, 4):
        vals = []
        for i, t in enumerate(flow.times):
            lam = spec.rate(flow.ensemble[i], flow.measure_for(float(t)))
            vals.append(float(np.mean(np.asarray(lam) ** p)))
        vals = np.asarray(vals)
        half = flow.times >= 3.0
        tc = flow.times[half] - flow.times[half].mean()
        slope = float(np.sum(tc * vals[half]) / np.sum(tc**2))
        resid = vals[half] - vals[half].mean() - slope * tc
        se = float(np.sqrt(resid.var(ddof=2) / np.sum(tc**2)))
        assert slope - 1.96 * se <= 0.0 or slope <= 0.02 * vals[half].mean()


def test_ensemble_noise_floor_positive():
    spec = build("neuronal", {})
    flow = solve_limit(spec, 1000, 1.0, 0.1, seed=17, tol=1e-3, max_iter=3, init=UNIF)
    floor = ensemble_noise_floor(flow)
    assert 0 < floor < 0.2
