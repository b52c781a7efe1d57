import numpy as np
import pytest
from scipy.stats import ks_2samp

from mfjump.drivers import InvalidInputError, make_driver_bundle
from mfjump.models import AssumptionMeta, ModelSpec, make_empirical
from mfjump.particle import (
    CoupledSimulator,
    GeneratorQuadratureError,
    InitSampler,
    NumericalBlowupError,
    RateBoundViolation,
    StepPolicy,
    SystemState,
    Observable,
    apply_jump,
    coordinate_function,
    generator_apply,
    simulate,
    simulate_coupled,
    single_step_weak_estimate,
    step_X,
    step_Y,
)
from mfjump.zoo import build


def _zero_collateral(xj, tg, m, h1, h2):
    return np.zeros((tg.shape[0], 1))


def _spec(drift, rate, main, collateral=_zero_collateral, dim=1, sigma=None,
          cap=None, collateral_mean=None, main_jump_mean=None, exact=False, **meta_kw):
    if sigma is None:
        diffusion = lambda x, m: np.zeros((x.shape[0], dim, 0))
        d1 = 0
    else:
        diffusion = lambda x, m: np.broadcast_to(sigma * np.eye(dim), (x.shape[0], dim, dim))
        d1 = dim
    return ModelSpec(
        drift=drift,
        diffusion=diffusion,
        rate=rate,
        main_jump=main,
        collateral_jump=collateral,
        dim=dim,
        brownian_dim=d1,
        class_tag="lipschitz",
        meta=AssumptionMeta(rate_global_bound=cap, **meta_kw),
        collateral_mean=collateral_mean,
        main_jump_mean=main_jump_mean,
        exact_linear_ok=exact,
    )


def test_step_x_euler_arithmetic():
    # null jumps: one Euler step of F(x) = -x from 1 gives 0.9 regardless of
    # how many candidate events were accepted
    spec = _spec(
        drift=lambda x, m: -x,
        rate=lambda x, m: np.full(x.shape[0], 5.0),
        main=lambda x, m, h: np.zeros_like(x),
        cap=5.0,
    )
    for seed in range(5):
        st = step_X(SystemState(t=0.0, positions=np.asarray([[1.0]])), spec, 0.1,
                    make_driver_bundle(seed, 0, 1))
        assert st.positions[0, 0] == pytest.approx(0.9, abs=0)


def test_forced_collateral_jump_shifts_by_theta_over_n():
    spec = _spec(
        drift=lambda x, m: np.zeros_like(x),
        rate=lambda x, m: np.zeros(x.shape[0]),
        main=lambda x, m, h: np.zeros_like(x),
        collateral=lambda xj, tg, m, h1, h2: np.ones((tg.shape[0], 1)),
        cap=0.0,
    )
    pos = np.asarray([[1.0], [2.0], [3.0], [4.0]])
    mu = make_empirical(pos)
    new, psi = apply_jump(spec, pos, jumper=0, measure=mu, h_main=0.5, h_collateral=np.full(4, 0.5))
    assert np.array_equal(psi, np.zeros(1))
    assert new[0, 0] == 1.0  # main jump is null
    assert np.allclose(new[1:, 0], pos[1:, 0] + 0.25)  # Theta / N with N = 4


def test_main_jump_uses_pre_jump_state_for_collateral():
    # collateral amplitude reads the jumper's pre-jump position
    spec = _spec(
        drift=lambda x, m: np.zeros_like(x),
        rate=lambda x, m: np.zeros(x.shape[0]),
        main=lambda x, m, h: -x,  # reset to zero
        collateral=lambda xj, tg, m, h1, h2: np.broadcast_to(xj, tg.shape).copy(),
        cap=0.0,
    )
    pos = np.asarray([[2.0], [0.0]])
    mu = make_empirical(pos)
    new, _ = apply_jump(spec, pos, 0, mu, 0.5, np.full(2, 0.5))
    assert new[0, 0] == 0.0
    assert new[1, 0] == pytest.approx(1.0)  # Theta(xj=2)/N=2


def test_compound_poisson_mean():
    # lambda = 2, psi = 0.3, no drift: E[X(T)] = x0 + 0.3 * 2 * T
    lam0, a, T = 2.0, 0.3, 1.0
    spec = _spec(
        drift=lambda x, m: np.zeros_like(x),
        rate=lambda x, m: np.full(x.shape[0], lam0),
        main=lambda x, m, h: np.full_like(x, a),
        cap=lam0,
    )
    vals = []
    for r in range(200):
        paths = simulate("X", spec, 4, T, 0.05, make_driver_bundle(77, r, 4),
                         initial_positions=np.zeros((4, 1)))
        vals.extend(paths.positions[-1, :, 0].tolist())
    vals = np.asarray(vals)
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    assert abs(vals.mean() - a * lam0 * T) < 3 * se


def test_step_y_equals_step_x_bitwise_when_no_collateral():
    spec = build("lipschitz-demo", {"collateral_amp": 0.0})
    x0 = np.asarray([[0.4], [-0.2], [1.1]])
    bx = make_driver_bundle(9, 0, 3)
    by = make_driver_bundle(9, 0, 3)
    sx = step_X(SystemState(t=0.0, positions=x0.copy()), spec, 0.25, bx)
    sy = step_Y(SystemState(t=0.0, positions=x0.copy()), spec, 0.25, by)
    assert sx.positions.tobytes() == sy.positions.tobytes()
    assert sx.jump_times == sy.jump_times


def test_y_collateral_drift_constant():
    # Theta with constant mark mean c and rate lambda0: collateral drift is
    # lambda0 * c per particle, independent of N
    lam0, cbar = 1.5, 0.7
    for n in (2, 5):
        spec = _spec(
            drift=lambda x, m: np.zeros_like(x),
            rate=lambda x, m: np.full(x.shape[0], lam0),
            main=lambda x, m, h: np.zeros_like(x),
            cap=lam0,
            collateral_mean=np.asarray([cbar]),
        )
        st = step_Y(SystemState(t=0.0, positions=np.zeros((n, 1))), spec, 0.1,
                    make_driver_bundle(n, 0, n))
        assert np.allclose(st.positions, 0.1 * lam0 * cbar, atol=1e-15)


def test_y_collateral_drift_state_dependent_rate():
    # N=2, lambda(x) = |x|, constant mark mean: the jumper-rate reading gives
    # drift (|Y1| + |Y2|) * theta_bar / 2 for both particles
    theta_bar = 0.4
    spec = _spec(
        drift=lambda x, m: np.zeros_like(x),
        rate=lambda x, m: np.abs(x[:, 0]),
        main=lambda x, m, h: np.zeros_like(x),
        cap=None,
        collateral_mean=np.asarray([theta_bar]),
    )
    y = np.asarray([[1.0], [-3.0]])
    # keep candidate bounds from seeing any accepted jumps: psi = 0 anyway
    st = step_Y(SystemState(t=0.0, positions=y.copy()), spec, 0.01,
                make_driver_bundle(4, 0, 2))
    expected = y + 0.01 * ((1.0 + 3.0) / 2.0) * theta_bar
    assert np.allclose(st.positions, expected, atol=1e-14)
    # the 'target' reading uses each particle's own rate instead
    st2 = step_Y(SystemState(t=0.0, positions=y.copy()), spec, 0.01,
                 make_driver_bundle(4, 0, 2), policy=StepPolicy(ysystem_rate_arg="target"))
    expected2 = y + 0.01 * np.abs(y) * theta_bar
    assert np.allclose(st2.positions, expected2, atol=1e-14)


def test_exact_integrator_ou_decay():
    spec = _spec(
        drift=lambda x, m: -x,
        rate=lambda x, m: np.zeros(x.shape[0]),
        main=lambda x, m, h: np.zeros_like(x),
        cap=0.0,
        exact=True,
    )
    x0 = np.full((3, 1), 1.7)
    paths = simulate("X", spec, 3, 4.0, 0.1, make_driver_bundle(1, 0, 3),
                     initial_positions=x0, scheme="exact")
    target = 1.7 * np.exp(-4.0)
    assert np.all(np.abs(paths.positions[-1] - target) / target < 1e-12)


def test_permutation_equivariance():
    spec = build("lipschitz-demo", {})
    n = 6
    perm = np.asarray([3, 0, 5, 1, 4, 2])
    x0 = np.linspace(-1.0, 1.0, n).reshape(n, 1)
    a = simulate("X", spec, n, 0.5, 0.05, make_driver_bundle(31, 0, n),
                 initial_positions=x0)
    b = simulate("X", spec, n, 0.5, 0.05,
                 make_driver_bundle(31, 0, n, particle_ids=perm),
                 initial_positions=x0[perm])
    # slot i of run b lives on the streams and start of particle perm[i]
    assert np.allclose(b.positions[:, :, :], a.positions[:, perm, :], rtol=0, atol=1e-10)


def test_exchangeability_ks_across_seeds():
    spec = build("lipschitz-demo", {})
    first, third = [], []
    for r in range(200):
        paths = simulate("X", spec, 4, 0.5, 0.05, make_driver_bundle(123, r, 4),
                         init=InitSampler(mean=(0.5,), std=0.5))
        first.append(paths.positions[-1, 0, 0])
        third.append(paths.positions[-1, 2, 0])
    assert ks_2samp(first, third).pvalue > 0.01


def test_jump_bookkeeping_counts_match():
    spec = build("lipschitz-demo", {})
    paths = simulate("X", spec, 16, 1.0, 0.05, make_driver_bundle(8, 0, 16),
                     init=InitSampler(mean=(0.5,), std=0.5))
    assert paths.jump_count == len(paths.jump_times) == len(paths.jump_particles)
    assert paths.jump_count > 0
    assert np.all(np.diff(paths.jump_times) >= 0)
    assert np.all(paths.jump_times <= 1.0 + 1e-12)


def test_path_record_grid_values_match_stepper():
    spec = build("lipschitz-demo", {})
    paths = simulate("X", spec, 5, 1.0, 0.1, make_driver_bundle(10, 0, 5),
                     init=InitSampler(mean=(0.5,), std=0.5))
    rec = paths.record(2)
    for gi, t in enumerate(paths.times):
        assert np.allclose(rec.eval(float(t)), paths.positions[gi, 2], atol=0)
    # cadlag: just after an own jump the record equals the post value
    own = paths.jump_particles == 2
    for t, post in zip(paths.jump_times[own], paths.jump_post[own]):
        assert np.allclose(rec.eval(float(t)), post, atol=0)


def test_rate_bound_violation_surfaces():
    # the declared global bound is a lie: the first candidate evaluation sees
    # rate 2 above bound 1, retries cannot fix it, and the error surfaces
    spec = _spec(
        drift=lambda x, m: np.zeros_like(x),
        rate=lambda x, m: np.full(x.shape[0], 2.0),
        main=lambda x, m, h: np.zeros_like(x),
        cap=1.0,
    )
    with pytest.raises(RateBoundViolation):
        simulate("X", spec, 2, 4.0, 0.5, make_driver_bundle(3, 0, 2),
                 initial_positions=np.zeros((2, 1)))


def test_rate_bound_retry_recovers():
    # outward main jumps push the rate above the start-of-sub-step envelope,
    # forcing halved retries; the run still completes with unbiased thinning
    spec = _spec(
        drift=lambda x, m: np.zeros_like(x),
        rate=lambda x, m: np.abs(x[:, 0]),
        main=lambda x, m, h: np.ones_like(x),
        cap=None,
    )
    policy = StepPolicy(bound_mult=1.0, bound_add=0.05, candidate_cap=8.0, max_retries=16)
    sim = CoupledSimulator(spec, make_driver_bundle(6, 0, 4), systems=("X",), policy=policy)
    sim.set_initial(np.full((4, 1), 1.0))
    for _ in range(10):
        sim.advance(0.5)
    assert sim.retry_count > 0
    assert sim.systems[0].jump_count > 0
    assert np.all(np.isfinite(sim.systems[0].pos))


def test_numerical_blowup_carries_state():
    spec = _spec(
        drift=lambda x, m: x**5,
        rate=lambda x, m: np.zeros(x.shape[0]),
        main=lambda x, m, h: np.zeros_like(x),
        cap=0.0,
    )
    with pytest.raises(NumericalBlowupError) as err, np.errstate(over="ignore", invalid="ignore"):
        simulate("X", spec, 2, 40.0, 1.0, make_driver_bundle(2, 0, 2),
                 initial_positions=np.full((2, 1), 3.0))
    assert err.value.positions.shape == (2, 1)
    assert err.value.system == "X"


def test_invalid_dt_rejected():
    spec = build("lipschitz-demo", {})
    with pytest.raises(InvalidInputError):
        step_X(SystemState(t=0.0, positions=np.zeros((1, 1))), spec, 0.0,
               make_driver_bundle(0, 0, 1))


# -- generator -------------------------------------------------------------


def test_generator_kills_constants():
    spec = build("lipschitz-demo", {})
    phi = Observable(
        value=lambda x: np.ones(np.asarray(x).shape[:-2]) if np.asarray(x).ndim > 2 else 1.0,
        grad=lambda x: np.zeros_like(np.asarray(x, dtype=np.float64)),
        is_linear=True,
    )
    x = np.asarray([[0.7], [-0.3]])
    assert generator_apply(spec, phi, x) == pytest.approx(0.0, abs=1e-12)


def test_generator_first_order_term():
    # no jumps: L phi = F . grad phi = -x_1 for phi the first coordinate
    spec = _spec(
        drift=lambda x, m: -x,
        rate=lambda x, m: np.zeros(x.shape[0]),
        main=lambda x, m, h: np.zeros_like(x),
        cap=0.0,
        main_jump_mean=lambda x, m: np.zeros_like(x),
    )
    phi = coordinate_function(0, 0)
    x = np.asarray([[1.3], [0.2]])
    assert generator_apply(spec, phi, x) == pytest.approx(-1.3, abs=1e-12)


def test_generator_constant_jump():
    # lambda = lam0, psi = a, Theta = 0: L x_1 = lam0 * a
    lam0, a = 1.7, 0.45
    spec = _spec(
        drift=lambda x, m: np.zeros_like(x),
        rate=lambda x, m: np.full(x.shape[0], lam0),
        main=lambda x, m, h: np.full_like(x, a),
        cap=lam0,
    )
    phi = coordinate_function(0, 0)
    x = np.asarray([[0.0], [2.0], [-1.0]])
    # Monte Carlo route (constant integrand -> zero variance, exact)
    assert generator_apply(spec, phi, x) == pytest.approx(lam0 * a, abs=1e-12)
    # closed-form route
    spec2 = _spec(
        drift=lambda x, m: np.zeros_like(x),
        rate=lambda x, m: np.full(x.shape[0], lam0),
        main=lambda x, m, h: np.full_like(x, a),
        cap=lam0,
        main_jump_mean=lambda x, m: np.full_like(x, a),
    )
    assert generator_apply(spec2, phi, x) == pytest.approx(lam0 * a, abs=1e-12)


def test_generator_diffusion_term():
    # pure diffusion, phi = x_1^2: L phi = sigma^2
    s0 = 0.6
    spec = _spec(
        drift=lambda x, m: np.zeros_like(x),
        rate=lambda x, m: np.zeros(x.shape[0]),
        main=lambda x, m, h: np.zeros_like(x),
        cap=0.0,
        sigma=s0,
    )

    def value(x):
        x = np.asarray(x)
        return x[..., 0, 0] ** 2

    def grad(x):
        g = np.zeros_like(np.asarray(x, dtype=np.float64))
        g[0, 0] = 2.0 * x[0, 0]
        return g

    def hess(x):
        h = np.zeros((x.shape[0], 1, 1))
        h[0, 0, 0] = 2.0
        return h

    phi = Observable(value=value, grad=grad, hess=hess)
    assert generator_apply(spec, phi, np.asarray([[0.9], [0.1]])) == pytest.approx(s0**2, abs=1e-12)


def test_generator_monte_carlo_matches_closed_form():
    spec = build("lipschitz-demo", {"sigma0": 0.0})
    x = np.asarray([[1.0], [-0.5]])
    closed = generator_apply(spec, coordinate_function(0, 0), x)
    # forcing the Monte Carlo route must agree within its tolerance gate
    phi_mc = Observable(
        value=coordinate_function(0, 0).value,
        grad=coordinate_function(0, 0).grad,
        is_linear=False,
    )
    mc = generator_apply(spec, phi_mc, x, mark_draws=1 << 14, rel_tol=2e-2)
    assert mc == pytest.approx(closed, rel=5e-2, abs=2e-2)


def test_generator_quadrature_gate():
    spec = build("lipschitz-demo", {"sigma0": 0.0})
    phi_mc = Observable(
        value=coordinate_function(0, 0).value,
        grad=coordinate_function(0, 0).grad,
        is_linear=False,
    )
    with pytest.raises(GeneratorQuadratureError) as err:
        generator_apply(spec, phi_mc, np.asarray([[1.0], [-0.5]]), mark_draws=8, rel_tol=1e-6, abs_tol=1e-9)
    assert np.isfinite(err.value.estimate)


# -- weak error -------------------------------------------------------------


def test_weak_kernel_matches_reference_stepper():
    spec = build("lipschitz-demo", {"sigma0": 0.0})
    x0 = np.asarray([[1.0], [-0.5]])
    phi = coordinate_function(0, 0)
    h = 2.0**-4
    pos = single_step_weak_estimate(spec, phi, x0, h, samples=64, seed=9,
                                    replica_base=1 << 41, return_positions=True)
    for r in (0, 1, 7, 33, 63):
        b = make_driver_bundle(9, (1 << 41) + r, 2)
        st = step_X(SystemState(t=0.0, positions=x0.copy()), spec, h, b)
        assert np.array_equal(st.positions, pos[r])


def test_weak_kernel_with_diffusion_matches_reference_stepper():
    spec = build("lipschitz-demo", {"sigma0": 0.4})
    x0 = np.asarray([[1.0], [-0.5]])
    phi = coordinate_function(0, 0)
    pos = single_step_weak_estimate(spec, phi, x0, 2.0**-5, samples=16, seed=4,
                                    replica_base=1 << 42, return_positions=True)
    for r in (0, 5, 15):
        b = make_driver_bundle(4, (1 << 42) + r, 2)
        st = step_X(SystemState(t=0.0, positions=x0.copy()), spec, 2.0**-5, b)
        assert np.allclose(st.positions, pos[r], rtol=0, atol=1e-15)


def test_weak_error_first_order_slope():
    from mfjump.metrics import fit_rate

    spec = build(
        "lipschitz-demo",
        {"sigma0": 0.0, "mean_reversion": 2.0, "interaction": 1.0,
         "rate_base": 2.0, "rate_slope": 1.0, "jump_scale": 0.6},
    )
    x0 = np.asarray([[1.0], [-0.5]])
    phi = coordinate_function(0, 0)
    L = generator_apply(spec, phi, x0)
    phi0 = float(phi.value(x0))
    hs = [2.0**-k for k in range(4, 8)]
    res, ses = [], []
    for h in hs:
        est = single_step_weak_estimate(spec, phi, x0, h, samples=1 << 18, seed=501)
        res.append(abs((est.mean - phi0) / h - L))
        ses.append(est.se / h)
    # every point must be resolved above its Monte Carlo error
    assert all(r > 2 * s for r, s in zip(res, ses))
    fit = fit_rate([1.0 / h for h in hs], res, ses)
    assert -fit.slope >= 0.8
