"""Time stepping of the interacting system, the intermediate system, and
index-coupled limit copies, all on shared drivers.

Scheme
------
Hybrid stepping: drift/diffusion advance by Euler using the start-of-step
empirical measure, while candidate Poisson events inside the step are
placed at their exact times and processed in time order (ties broken by
particle index).  The measure seen by jump evaluations is live: it updates
at every jump inside the step.  An accepted main jump of particle j moves
j by the main amplitude and every other particle by the collateral
amplitude over N, both evaluated at the pre-jump state.

For the pull-to-origin, diffusion-free class an exact integrator replaces
Euler: between events positions follow the closed-form exponential decay,
with any piecewise-constant drift (the intermediate system's absorbed
collateral term) folded in via an exponential integrator.

Thinning bounds are local per particle: a declared global rate bound when
the model has one, otherwise an affine envelope of the current rate.  If a
rate evaluation exceeds its bound the sub-step aborts and is retried with
a halved step, a bounded number of times; violations surface, they are
never silently absorbed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .drivers import (
    WEAK_TEST_REPLICA,
    DriverBundle,
    InvalidInputError,
    StreamKey,
    StreamState,
    collect_candidates,
    make_driver_bundle,
    marks_uniforms,
    marks_uniforms_batch,
    stream_keys,
)
from .models import EmpiricalMeasure, ModelSpec, make_empirical


class RateBoundViolation(RuntimeError):
    """A rate evaluation exceeded its thinning bound inside a sub-step."""


class NumericalBlowupError(RuntimeError):
    """Positions left the finite range; carries a state snapshot."""

    def __init__(self, t: float, positions: np.ndarray, system: str):
        super().__init__(f"non-finite positions in system {system} at t={t:.6g}")
        self.t = t
        self.positions = positions
        self.system = system


@dataclass(frozen=True)
class StepPolicy:
    """Knobs of the stepping scheme (all deterministic)."""

    bound_mult: float = 2.0
    bound_add: float = 1.0
    candidate_cap: float = 1.0  # expected candidates per particle per sub-step
    max_retries: int = 8
    ysystem_rate_arg: str = "jumper"  # jumper | target

    def __post_init__(self):
        if self.ysystem_rate_arg not in ("jumper", "target"):
            raise InvalidInputError("ysystem_rate_arg must be 'jumper' or 'target'")


@dataclass(frozen=True)
class InitSampler:
    """Initial-condition sampler, drawing from the per-particle init streams."""

    kind: str = "gauss"  # gauss | uniform | point
    mean: tuple = (0.0,)
    std: float = 1.0
    low: float = 0.0
    high: float = 1.0
    point: tuple = (0.0,)

    def sample(self, bundle: DriverBundle, dim: int) -> np.ndarray:
        n = bundle.n
        if self.kind == "point":
            x0 = np.asarray(self.point, dtype=np.float64)
            return np.tile(x0.reshape(1, dim), (n, 1))
        if self.kind == "uniform":
            u = np.column_stack([bundle.init.uniforms_all() for _ in range(dim)])
            return self.low + (self.high - self.low) * u
        if self.kind == "gauss":
            z = bundle.init.normals_block(dim)
            mean = np.asarray(self.mean, dtype=np.float64).reshape(1, dim)
            return mean + self.std * z
        raise InvalidInputError(f"unknown init kind {self.kind!r}")


def apply_jump(
    spec: ModelSpec,
    positions: np.ndarray,
    jumper: int,
    measure: EmpiricalMeasure,
    h_main: float,
    h_collateral: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """One main jump plus its simultaneous collateral kicks (pure).

    All amplitudes are evaluated at the pre-jump positions and measure.
    ``h_collateral is None`` means the jump has no collateral channel (the
    intermediate system and limit copies).  Returns (new_positions,
    main_amplitude).
    """
    n = positions.shape[0]
    xj = positions[jumper].copy()
    psi = spec.main_jump(xj[None, :], measure, np.asarray([h_main]))[0]
    out = positions.copy()
    if h_collateral is not None:
        theta = np.asarray(spec.collateral_jump(xj, positions, measure, h_main, h_collateral))
        if np.any(theta):
            delta = theta / n
            delta[jumper] = 0.0
            out += delta
    out[jumper] = xj + psi
    return out, psi


class _LiveSystem:
    """One process in a coupled set: positions plus measure bookkeeping."""

    def __init__(self, kind: str, spec: ModelSpec, positions: np.ndarray, flow=None):
        if kind not in ("X", "Y", "LIMIT"):
            raise InvalidInputError(f"unknown system kind {kind!r}")
        if kind == "LIMIT" and flow is None:
            raise InvalidInputError("LIMIT systems need a flow approximation")
        self.kind = kind
        self.spec = spec
        self.pos = np.array(positions, dtype=np.float64)
        self.flow = flow
        self._measure = EmpiricalMeasure(self.pos)
        self.jump_times: list[float] = []
        self.jump_particles: list[int] = []
        self.jump_pre: list[np.ndarray] = []
        self.jump_post: list[np.ndarray] = []

    @property
    def jump_count(self) -> int:
        return len(self.jump_times)

    def measure_now(self, t: float) -> EmpiricalMeasure:
        if self.kind == "LIMIT":
            return self.flow.measure_for(t)
        return self._measure

    def rates(self, t: float) -> np.ndarray:
        return np.asarray(self.spec.rate(self.pos, self.measure_now(t)), dtype=np.float64)

    def set_positions(self, new: np.ndarray) -> None:
        self.pos[:] = new
        self._measure.mark_dirty()

    def scale_shift(self, factor: float, g: np.ndarray | None, one_minus: float) -> None:
        self.pos *= factor
        if g is not None:
            self.pos += g * one_minus
        self._measure.mark_dirty()

    def snapshot(self) -> dict:
        return {"pos": self.pos.copy(), "nlog": len(self.jump_times)}

    def restore(self, snap: dict) -> None:
        self.pos[:] = snap["pos"]
        k = snap["nlog"]
        del self.jump_times[k:]
        del self.jump_particles[k:]
        del self.jump_pre[k:]
        del self.jump_post[k:]
        self._measure.mark_dirty()


def _collateral_drift_y(spec: ModelSpec, pos: np.ndarray, mu: EmpiricalMeasure, rate_arg: str) -> np.ndarray | None:
    kind = spec.collateral_mean_kind()
    if kind == "zero":
        return None
    lam = np.asarray(spec.rate(pos, mu), dtype=np.float64)
    if kind == "constant":
        ev = np.asarray(spec.collateral_mean, dtype=np.float64)
        if rate_arg == "jumper":
            return np.broadcast_to(float(lam.mean()) * ev, pos.shape).copy()
        return lam[:, None] * ev[None, :]
    cm = np.asarray(spec.collateral_mean(pos, pos, mu))  # (N, N, d)
    if rate_arg == "jumper":
        return np.mean(lam[:, None, None] * cm, axis=0)
    return lam[:, None] * np.mean(cm, axis=0)


def _collateral_drift_limit(spec: ModelSpec, pos: np.ndarray, flow, t: float) -> np.ndarray | None:
    kind = spec.collateral_mean_kind()
    if kind == "zero":
        return None
    if kind == "constant":
        ev = np.asarray(spec.collateral_mean, dtype=np.float64)
        return np.broadcast_to(flow.lam_mean_for(t) * ev, pos.shape).copy()
    mu = flow.quad_measure_for(t)
    lam = np.asarray(spec.rate(mu.points, mu), dtype=np.float64)
    cm = np.asarray(spec.collateral_mean(mu.points, pos, mu))  # (K, N, d)
    return np.mean(lam[:, None, None] * cm, axis=0)


class CoupledSimulator:
    """Steps one or more systems on a shared driver bundle.

    All listed systems consume identical drivers particle by particle:
    one Brownian block per sub-step, one candidate stream per particle
    under a shared thinning bound, and the same lazily drawn marks.  That
    is the synchronous coupling the distance estimators rely on.
    """

    PAIR_KEYS = {("X", "Y"): "xy", ("Y", "LIMIT"): "ylimit", ("X", "LIMIT"): "xlimit"}

    def __init__(
        self,
        spec: ModelSpec,
        drivers: DriverBundle,
        systems: tuple[str, ...] = ("X",),
        flow=None,
        policy: StepPolicy | None = None,
        scheme: str = "auto",
    ):
        self.spec = spec
        self.bundle = drivers
        self.policy = policy or StepPolicy()
        if scheme == "auto":
            scheme = "exact" if spec.exact_linear_ok else "euler"
        if scheme not in ("euler", "exact"):
            raise InvalidInputError(f"unknown scheme {scheme!r}")
        if scheme == "exact" and not spec.exact_linear_ok:
            raise InvalidInputError("exact integrator needs a pull-to-origin, diffusion-free model")
        self.scheme = scheme
        self.systems = [_LiveSystem(k, spec, np.zeros((drivers.n, spec.dim)), flow) for k in systems]
        self.t = 0.0
        self.retry_count = 0
        self.sup: dict[str, np.ndarray] = {}
        for (a, b), key in self.PAIR_KEYS.items():
            if a in systems and b in systems:
                self.sup[key] = np.zeros(drivers.n)

    def system(self, kind: str) -> _LiveSystem:
        for s in self.systems:
            if s.kind == kind:
                return s
        raise KeyError(kind)

    def set_initial(self, positions: np.ndarray) -> None:
        pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        if pos.shape != (self.bundle.n, self.spec.dim):
            raise InvalidInputError(f"initial positions must have shape {(self.bundle.n, self.spec.dim)}")
        for s in self.systems:
            s.set_positions(pos)

    # -- stepping ---------------------------------------------------------

    def _bounds(self, t: float) -> np.ndarray:
        """Per-particle thinning bounds valid at the current state.

        A rate already above its bound here is a declaration failure that
        halving cannot repair, so it raises immediately.
        """
        lam = self.systems[0].rates(t)
        for s in self.systems[1:]:
            lam = np.maximum(lam, s.rates(t))
        cap = self.spec.meta.rate_global_bound
        if cap is not None:
            bounds = np.full(self.bundle.n, float(cap))
        else:
            bounds = self.policy.bound_mult * lam + self.policy.bound_add
        over = lam > bounds * (1.0 + 1e-12) + 1e-12
        if np.any(over):
            j = int(np.flatnonzero(over)[0])
            raise RateBoundViolation(
                f"rate {lam[j]:.6g} already above bound {bounds[j]:.6g} for particle {j} "
                f"at t={t:.6g}; the declared rate bound does not hold"
            )
        return bounds

    def _snapshot(self) -> dict:
        return {
            "bundle": self.bundle.snapshot(),
            "systems": [s.snapshot() for s in self.systems],
            "sup": {k: v.copy() for k, v in self.sup.items()},
        }

    def _restore(self, snap: dict) -> None:
        self.bundle.restore(snap["bundle"])
        for s, ssnap in zip(self.systems, snap["systems"]):
            s.restore(ssnap)
        for k in self.sup:
            self.sup[k][:] = snap["sup"][k]

    def _update_sup(self) -> None:
        for (a, b), key in self.PAIR_KEYS.items():
            if key in self.sup:
                d = np.linalg.norm(self.system(a).pos - self.system(b).pos, axis=1)
                np.maximum(self.sup[key], d, out=self.sup[key])

    def advance(self, dt_out: float) -> None:
        """Advance all systems by one output cell of width dt_out."""
        end = self.t + dt_out
        while True:
            rem = end - self.t
            if rem <= 1e-12 * max(1.0, abs(end)):
                break
            bounds = self._bounds(self.t)
            rmax = float(bounds.max()) if bounds.size else 0.0
            nsub = 1
            if rmax > 0:
                nsub = max(1, int(math.ceil(rmax * rem / self.policy.candidate_cap)))
            h = rem / nsub
            retries = 0
            while True:
                snap = self._snapshot()
                try:
                    self._substep(self.t, h, bounds)
                    break
                except RateBoundViolation:
                    self._restore(snap)
                    retries += 1
                    self.retry_count += 1
                    if retries > self.policy.max_retries:
                        raise
                    h /= 2.0
            self.t += h
        self.t = end

    def _substep(self, t: float, h: float, bounds: np.ndarray) -> None:
        spec = self.spec
        n = self.bundle.n
        euler = self.scheme == "euler"

        # frozen start-of-sub-step drift/diffusion
        drifts: list[np.ndarray | None] = []
        diffs: list[np.ndarray | None] = []
        for s in self.systems:
            mu = s.measure_now(t)
            if s.kind == "Y":
                g = _collateral_drift_y(spec, s.pos, mu, self.policy.ysystem_rate_arg)
            elif s.kind == "LIMIT":
                g = _collateral_drift_limit(spec, s.pos, s.flow, t)
            else:
                g = None
            if euler:
                f = np.asarray(spec.drift(s.pos, mu), dtype=np.float64)
                drifts.append(f if g is None else f + g)
                diffs.append(
                    np.asarray(spec.diffusion(s.pos, mu), dtype=np.float64)
                    if spec.has_diffusion()
                    else None
                )
            else:
                drifts.append(g)
                diffs.append(None)

        dW = None
        if euler and spec.has_diffusion():
            dW = self.bundle.brownian.normals_block(spec.brownian_dim) * math.sqrt(h)

        times, jumpers, us, ks = collect_candidates(self.bundle, t, t + h, bounds)

        t_last = t
        for tau, j, u, k in zip(times, jumpers, us, ks):
            j = int(j)
            if not euler and tau > t_last:
                self._decay_all(tau - t_last, drifts)
                t_last = tau
                self._update_sup()  # left limits move in the exact scheme
            for s in self.systems:
                mu = s.measure_now(tau)
                lam_j = float(np.asarray(spec.rate(s.pos[j : j + 1], mu))[0])
                if lam_j > bounds[j] * (1.0 + 1e-12) + 1e-12:
                    raise RateBoundViolation(
                        f"rate {lam_j:.6g} above bound {bounds[j]:.6g} "
                        f"for particle {j} in system {s.kind} at t={tau:.6g}"
                    )
                if u <= lam_j:
                    # marks are addressed by particle id, so relabeling the
                    # bundle permutes trajectories exactly
                    pids = self.bundle.particle_ids
                    h_main = float(
                        marks_uniforms(int(self.bundle.marks_keys[j]), int(k), np.asarray([pids[j]]))[0]
                    )
                    if s.kind == "X":
                        h_coll = marks_uniforms(int(self.bundle.marks_keys[j]), int(k), pids)
                    else:
                        h_coll = None
                    new_pos, _psi = apply_jump(spec, s.pos, j, mu, h_main, h_coll)
                    s.jump_times.append(float(tau))
                    s.jump_particles.append(j)
                    s.jump_pre.append(s.pos[j].copy())
                    s.jump_post.append(new_pos[j].copy())
                    s.set_positions(new_pos)
            self._update_sup()

        if euler:
            for s, f, sig in zip(self.systems, drifts, diffs):
                s.pos += h * f
                if dW is not None and sig is not None and sig.shape[-1] > 0:
                    s.pos += np.einsum("nij,nj->ni", sig, dW)
                s._measure.mark_dirty()
        else:
            self._decay_all(t + h - t_last, drifts)

        for s in self.systems:
            if not np.all(np.isfinite(s.pos)):
                raise NumericalBlowupError(t + h, s.pos.copy(), s.kind)
        self._update_sup()

    def _decay_all(self, s_dt: float, drifts: list) -> None:
        if s_dt <= 0:
            return
        factor = math.exp(-s_dt)
        one_minus = 1.0 - factor
        for s, g in zip(self.systems, drifts):
            s.scale_shift(factor, g, one_minus)


@dataclass
class SystemState:
    """State of one system between public single-step calls."""

    t: float
    positions: np.ndarray
    jump_times: list = field(default_factory=list)
    jump_particles: list = field(default_factory=list)
    jump_pre: list = field(default_factory=list)
    jump_post: list = field(default_factory=list)

    @property
    def jump_count(self) -> int:
        return len(self.jump_times)


def _step_single(
    kind: str,
    state: SystemState,
    spec: ModelSpec,
    dt: float,
    drivers: DriverBundle,
    policy: StepPolicy | None = None,
    scheme: str = "euler",
    flow=None,
) -> SystemState:
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    sim = CoupledSimulator(spec, drivers, systems=(kind,), flow=flow, policy=policy, scheme=scheme)
    sim.t = state.t
    sim.set_initial(state.positions)
    sys = sim.systems[0]
    sys.jump_times = list(state.jump_times)
    sys.jump_particles = list(state.jump_particles)
    sys.jump_pre = list(state.jump_pre)
    sys.jump_post = list(state.jump_post)
    sim.advance(dt)
    return SystemState(
        t=sim.t,
        positions=sys.pos.copy(),
        jump_times=sys.jump_times,
        jump_particles=sys.jump_particles,
        jump_pre=sys.jump_pre,
        jump_post=sys.jump_post,
    )


def step_X(state: SystemState, spec: ModelSpec, dt: float, drivers: DriverBundle, **kw) -> SystemState:
    """One step of the interacting system (simultaneous collateral jumps)."""
    return _step_single("X", state, spec, dt, drivers, **kw)


def step_Y(state: SystemState, spec: ModelSpec, dt: float, drivers: DriverBundle, **kw) -> SystemState:
    """One step of the intermediate system (collateral jumps absorbed into drift)."""
    return _step_single("Y", state, spec, dt, drivers, **kw)


@dataclass
class PathRecord:
    """Cadlag path of one particle: grid knots plus exact own-jump times."""

    times: np.ndarray
    values: np.ndarray  # (G, d)
    jtimes: np.ndarray
    jpre: np.ndarray  # (E, d)
    jpost: np.ndarray  # (E, d)

    def __post_init__(self):
        knots = [(float(t), v, v) for t, v in zip(self.times, self.values)]
        knots += [
            (float(t), pre, post) for t, pre, post in zip(self.jtimes, self.jpre, self.jpost)
        ]
        knots.sort(key=lambda kv: kv[0])
        self._kt = np.asarray([k[0] for k in knots])
        self._kl = np.asarray([k[1] for k in knots])
        self._kr = np.asarray([k[2] for k in knots])

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    def jump_times(self) -> np.ndarray:
        return self.jtimes

    def _interp(self, t: float, i: int) -> np.ndarray:
        # linear between knot i's right value and knot i+1's left value
        t0, t1 = self._kt[i], self._kt[i + 1]
        if t1 <= t0:
            return self._kr[i]
        w = (t - t0) / (t1 - t0)
        return (1.0 - w) * self._kr[i] + w * self._kl[i + 1]

    def eval(self, t: float) -> np.ndarray:
        """Cadlag value (post-jump at jump times)."""
        i = int(np.searchsorted(self._kt, t, side="right")) - 1
        if i < 0:
            return self._kl[0]
        if i >= len(self._kt) - 1:
            return self._kr[-1]
        if self._kt[i] == t:
            return self._kr[i]
        return self._interp(t, i)

    def eval_left(self, t: float) -> np.ndarray:
        """Left limit (pre-jump at jump times)."""
        i = int(np.searchsorted(self._kt, t, side="left"))
        if i < len(self._kt) and self._kt[i] == t:
            return self._kl[i]
        i -= 1
        if i < 0:
            return self._kl[0]
        if i >= len(self._kt) - 1:
            return self._kr[-1]
        return self._interp(t, i)


@dataclass
class PathRecordSet:
    """Grid paths of all particles of one system plus its jump log."""

    times: np.ndarray  # (G,)
    positions: np.ndarray  # (G, N, d)
    jump_times: np.ndarray
    jump_particles: np.ndarray
    jump_pre: np.ndarray
    jump_post: np.ndarray

    @property
    def n_particles(self) -> int:
        return self.positions.shape[1]

    @property
    def jump_count(self) -> int:
        return len(self.jump_times)

    def record(self, i: int) -> PathRecord:
        sel = self.jump_particles == i
        return PathRecord(
            times=self.times,
            values=self.positions[:, i, :],
            jtimes=self.jump_times[sel],
            jpre=self.jump_pre[sel],
            jpost=self.jump_post[sel],
        )


def _pathset_from(sim_times: list, sim_positions: list, sys: _LiveSystem, dim: int) -> PathRecordSet:
    e = len(sys.jump_times)
    return PathRecordSet(
        times=np.asarray(sim_times),
        positions=np.asarray(sim_positions),
        jump_times=np.asarray(sys.jump_times),
        jump_particles=np.asarray(sys.jump_particles, dtype=np.int64),
        jump_pre=np.asarray(sys.jump_pre).reshape(e, dim),
        jump_post=np.asarray(sys.jump_post).reshape(e, dim),
    )


def output_grid(T: float, dt: float) -> tuple[int, float]:
    """Number of cells and effective dt; dt is nudged to divide T exactly."""
    if not (T > 0 and dt > 0):
        raise InvalidInputError("T and dt must be positive")
    n = max(1, int(round(T / dt)))
    return n, T / n


def simulate(
    system: str,
    spec: ModelSpec,
    N: int,
    T: float,
    dt: float,
    drivers: DriverBundle | None = None,
    *,
    seed: int = 0,
    replica: int = 0,
    init: InitSampler | None = None,
    initial_positions: np.ndarray | None = None,
    scheme: str = "auto",
    policy: StepPolicy | None = None,
) -> PathRecordSet:
    """Full path record of one system; deterministic given (args, seed).

    Exactly one of ``init``/``initial_positions`` decides the start; the
    default is a standard Gaussian sampled from the init streams.
    """
    bundle = drivers if drivers is not None else make_driver_bundle(seed, replica, N)
    if bundle.n != N:
        raise InvalidInputError("driver bundle size must match N")
    sim = CoupledSimulator(spec, bundle, systems=(system,), policy=policy, scheme=scheme)
    if initial_positions is not None:
        x0 = np.asarray(initial_positions, dtype=np.float64).reshape(N, spec.dim)
    else:
        x0 = (init or InitSampler(mean=tuple([0.0] * spec.dim))).sample(bundle, spec.dim)
    sim.set_initial(x0)
    ncells, dt_eff = output_grid(T, dt)
    times = [0.0]
    positions = [sim.systems[0].pos.copy()]
    for _ in range(ncells):
        sim.advance(dt_eff)
        times.append(sim.t)
        positions.append(sim.systems[0].pos.copy())
    return _pathset_from(times, positions, sim.systems[0], spec.dim)


def simulate_coupled(
    systems: tuple[str, ...],
    spec: ModelSpec,
    N: int,
    T: float,
    dt: float,
    drivers: DriverBundle,
    *,
    flow=None,
    init: InitSampler | None = None,
    initial_positions: np.ndarray | None = None,
    scheme: str = "auto",
    policy: StepPolicy | None = None,
    record_paths: bool = True,
) -> dict:
    """Run several systems in lockstep on one driver bundle.

    Returns a dict with per-system ``PathRecordSet`` (when recorded),
    per-pair running sup distances evaluated at every grid point and every
    event time, and per-system jump counts.
    """
    sim = CoupledSimulator(spec, drivers, systems=systems, flow=flow, policy=policy, scheme=scheme)
    if initial_positions is not None:
        x0 = np.asarray(initial_positions, dtype=np.float64).reshape(N, spec.dim)
    else:
        x0 = (init or InitSampler(mean=tuple([0.0] * spec.dim))).sample(drivers, spec.dim)
    sim.set_initial(x0)
    sim._update_sup()
    ncells, dt_eff = output_grid(T, dt)
    times = [0.0]
    positions = {k: [sim.system(k).pos.copy()] for k in systems} if record_paths else None
    for _ in range(ncells):
        sim.advance(dt_eff)
        times.append(sim.t)
        if record_paths:
            for k in systems:
                positions[k].append(sim.system(k).pos.copy())
    out = {
        "sup": {k: v.copy() for k, v in sim.sup.items()},
        "jump_counts": {k: sim.system(k).jump_count for k in systems},
    }
    if record_paths:
        out["paths"] = {k: _pathset_from(times, positions[k], sim.system(k), spec.dim) for k in systems}
    return out


# -- generator ------------------------------------------------------------


@dataclass(frozen=True)
class Observable:
    """Observable with declared derivatives for generator evaluation.

    ``value`` accepts batched states ``(..., N, d)`` and returns ``(...)``;
    ``grad``/``hess`` take a single state (N, d).
    """

    value: object
    grad: object
    hess: object = None
    is_linear: bool = False


class GeneratorQuadratureError(RuntimeError):
    def __init__(self, estimate: float, se: float):
        super().__init__(f"mark quadrature did not converge: estimate={estimate:.6g} se={se:.6g}")
        self.estimate = estimate
        self.se = se


def _jump_term_closed(spec: ModelSpec, grad: np.ndarray, x: np.ndarray, mu: EmpiricalMeasure, lam: np.ndarray) -> float:
    """Rate-weighted jump expectation for a linear observable, closed form.

    Particle i's event moves i by the mark mean of the main jump and every
    other particle by the collateral mark mean over n.
    """
    n = x.shape[0]
    psi_bar = np.asarray(spec.main_jump_mean(x, mu), dtype=np.float64)
    jump = float(np.sum(lam * np.sum(psi_bar * grad, axis=1)))
    if spec.collateral_mean_kind() == "constant":
        ev = np.asarray(spec.collateral_mean, dtype=np.float64)
        g_dot = grad @ ev  # (n,)
        jump += float(np.sum(lam * (np.sum(g_dot) - g_dot) / n))
    return jump


def coordinate_function(particle: int, coord: int = 0) -> Observable:
    """The linear observable x -> x[particle, coord]."""

    def value(x):
        return np.asarray(x)[..., particle, coord]

    def grad(x):
        g = np.zeros_like(np.asarray(x, dtype=np.float64))
        g[particle, coord] = 1.0
        return g

    return Observable(value=value, grad=grad, hess=None, is_linear=True)


def generator_apply(
    spec: ModelSpec,
    phi: Observable,
    x: np.ndarray,
    *,
    mark_draws: int = 4096,
    seed: int = 0,
    rel_tol: float = 5e-3,
    abs_tol: float = 1e-9,
) -> float:
    """Generator of the N-particle system applied to ``phi`` at state ``x``.

    Sum over particles of the drift term, the diffusion term, and the
    rate-weighted mark expectation of the jump displacement (main jump of
    the firing particle plus collateral over N on everyone else).  The
    mark expectation uses declared closed forms for linear observables and
    falls back to a deterministic Monte Carlo over marks otherwise; if the
    Monte Carlo standard error does not meet tolerance the call raises
    ``GeneratorQuadratureError`` with its estimate.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    mu = make_empirical(x)
    grad = np.asarray(phi.grad(x), dtype=np.float64)
    drift = np.asarray(spec.drift(x, mu), dtype=np.float64)
    total = float(np.sum(drift * grad))

    if spec.has_diffusion():
        if phi.hess is not None:
            sig = np.asarray(spec.diffusion(x, mu), dtype=np.float64)
            a = np.einsum("nij,nkj->nik", sig, sig)
            hess = np.asarray(phi.hess(x), dtype=np.float64)
            total += 0.5 * float(np.einsum("nik,nik->", a, hess))
        elif not phi.is_linear:
            raise InvalidInputError("diffusive models need phi.hess unless phi is linear")

    lam = np.asarray(spec.rate(x, mu), dtype=np.float64)

    closed = (
        phi.is_linear
        and spec.main_jump_mean is not None
        and spec.collateral_mean_kind() != "general"
    )
    if closed:
        return total + _jump_term_closed(spec, grad, x, mu, lam)

    # Monte Carlo over the product mark law, one stream per firing particle
    base = phi.value(x)
    jump = 0.0
    var = 0.0
    for i in range(n):
        stream = StreamState(StreamKey(seed, WEAK_TEST_REPLICA, i, "marks").hash64())
        hmat = stream.uniforms(mark_draws * n).reshape(mark_draws, n)
        hi = hmat[:, i]
        pert = np.broadcast_to(x, (mark_draws, n, d)).copy()
        psi = np.asarray(spec.main_jump(np.tile(x[i], (mark_draws, 1)), mu, hi))
        theta = np.zeros((mark_draws, n, d))
        for j in range(n):
            if j == i:
                continue
            theta[:, j, :] = np.asarray(
                spec.collateral_jump(np.tile(x[i], (mark_draws, 1)), np.tile(x[j], (mark_draws, 1)), mu, hi, hmat[:, j])
            )
        pert += theta / n
        pert[:, i, :] = x[i] + psi
        vals = np.asarray(phi.value(pert), dtype=np.float64) - base
        jump += lam[i] * float(vals.mean())
        var += (lam[i] ** 2) * float(vals.var(ddof=1)) / mark_draws if mark_draws > 1 else 0.0
    se = math.sqrt(var)
    estimate = total + jump
    if se > abs_tol + rel_tol * max(abs(estimate), 1.0):
        raise GeneratorQuadratureError(estimate, se)
    return estimate


# -- vectorized single-step weak-error estimator ---------------------------


class _MeanOnlyMeasure:
    """Measure stand-in exposing only a (possibly batched) mean.

    Used by the replicated single-step estimator; models whose
    coefficients touch anything beyond the mean fail loudly.
    """

    def __init__(self, mean: np.ndarray):
        self._mean = mean

    @property
    def mean(self) -> np.ndarray:
        return self._mean

    @property
    def points(self):
        raise NotImplementedError("replicated estimator supports mean-dependent coefficients only")

    def integrate(self, g):
        raise NotImplementedError("replicated estimator supports mean-dependent coefficients only")


@dataclass(frozen=True)
class WeakStepEstimate:
    h: float
    mean: float
    se: float
    samples: int


def single_step_weak_estimate(
    spec: ModelSpec,
    phi: Observable,
    x0: np.ndarray,
    h: float,
    samples: int,
    *,
    seed: int = 0,
    replica_base: int | None = None,
    chunk: int = 1 << 17,
    control_variate: bool = True,
    return_positions: bool = False,
) -> WeakStepEstimate | np.ndarray:
    """Monte Carlo estimate of E[phi(X_h)] from state x0, replicated.

    Vectorizes the one-step scheme over independent replicas; each replica
    is a full N-particle copy with its own streams, addressed exactly like
    a solo run with that replica id (validated against the reference
    stepper in the tests).  Requires a declared global rate bound and
    coefficients that use the measure only through its mean.

    With ``control_variate`` (linear phi and declared mark means only),
    the first-order jump and Brownian contributions evaluated at the
    frozen start state are subtracted sample by sample and their exact
    expectations added back, which removes the O(sqrt(lam h) + sigma
    sqrt(h)) noise and leaves only the second-order fluctuation.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n, d = x0.shape
    cap = spec.meta.rate_global_bound
    if cap is None:
        raise InvalidInputError("replicated estimator needs a declared global rate bound")
    if cap * h > 4.0:
        raise InvalidInputError("step too large for single-sub-step estimation")
    base = replica_base if replica_base is not None else (1 << 41)
    if control_variate and not (
        phi.is_linear and spec.main_jump_mean is not None and spec.collateral_mean_kind() != "general"
    ):
        raise InvalidInputError("control variates need a linear phi and declared mark means")

    mu0 = make_empirical(x0)
    lam0 = np.asarray(spec.rate(x0, mu0), dtype=np.float64)
    grad0 = np.asarray(phi.grad(x0), dtype=np.float64) if control_variate else None
    cv_mean = h * _jump_term_closed(spec, grad0, x0, mu0, lam0) if control_variate else 0.0
    gsig0 = None
    if control_variate and spec.has_diffusion():
        sig_x0 = np.asarray(spec.diffusion(x0, mu0), dtype=np.float64)
        gsig0 = np.einsum("nd,ndk->nk", grad0, sig_x0)  # (n, d1)

    from .drivers import _raw_from_counters, _uniform_from_raw  # noqa: PLC0415

    total = 0.0
    total_sq = 0.0
    done = 0
    while done < samples:
        m = min(chunk, samples - done)
        reps = np.repeat(np.arange(done, done + m, dtype=np.int64) + base, n)
        parts = np.tile(np.arange(n, dtype=np.int64), m)
        pkeys = stream_keys(seed, reps, parts, "poisson")
        mkeys = stream_keys(seed, reps, parts, "marks")
        pos = np.broadcast_to(x0, (m, n, d)).copy()
        mean = pos.mean(axis=1)  # (m, d)
        control = np.zeros(m)

        view0 = _MeanOnlyMeasure(np.repeat(mean, n, axis=0))
        drift0 = np.asarray(spec.drift(pos.reshape(m * n, d), view0), dtype=np.float64)
        sig0 = None
        if spec.has_diffusion():
            sig0 = np.asarray(spec.diffusion(pos.reshape(m * n, d), view0), dtype=np.float64)
            sig0 = np.broadcast_to(sig0, (m * n, d, spec.brownian_dim))

        # candidate collection: alternating (inter-arrival, level) uniforms
        ctr = np.zeros(m * n, dtype=np.uint64)
        cand_k = np.zeros(m * n, dtype=np.int64)
        acc_rep, acc_part, acc_time, acc_u, acc_idx = [], [], [], [], []

        def draw(keys, counters, idx):
            u = _uniform_from_raw(_raw_from_counters(keys[idx], counters[idx]))
            counters[idx] += np.uint64(1)
            return u

        cur = np.empty(m * n)
        idx = np.arange(m * n)
        w = draw(pkeys, ctr, idx)
        cur[:] = -np.log(w) / cap
        live = idx[cur <= h]
        while live.size:
            u = draw(pkeys, ctr, live) * cap
            acc_rep.append(live // n)
            acc_part.append(live % n)
            acc_time.append(cur[live].copy())
            acc_u.append(u)
            acc_idx.append(cand_k[live].copy())
            cand_k[live] += 1
            w = draw(pkeys, ctr, live)
            cur[live] = cur[live] - np.log(w) / cap
            live = live[cur[live] <= h]

        if acc_rep:
            crep = np.concatenate(acc_rep)
            cpart = np.concatenate(acc_part)
            ctime = np.concatenate(acc_time)
            cu = np.concatenate(acc_u)
            ck = np.concatenate(acc_idx)

            if control_variate:
                # frozen-state contribution of every candidate, exact mean h * L_jump
                keyrow = crep * n + cpart
                h_main0 = marks_uniforms_batch(mkeys[keyrow], ck, cpart)
                frozen_acc = cu <= lam0[cpart]
                contrib = np.zeros(len(crep))
                psi0 = np.asarray(spec.main_jump(x0[cpart], mu0, h_main0))
                contrib += np.einsum("ed,ed->e", psi0, grad0[cpart])
                for off in range(1, n):
                    tgt = (cpart + off) % n
                    h2 = marks_uniforms_batch(mkeys[keyrow], ck, tgt)
                    theta0 = np.asarray(spec.collateral_jump(x0[cpart], x0[tgt], mu0, h_main0, h2))
                    contrib += np.einsum("ed,ed->e", theta0, grad0[tgt]) / n
                np.add.at(control, crep, np.where(frozen_acc, contrib, 0.0))

            order = np.lexsort((cpart, ctime, crep))
            crep, cpart, ctime, cu, ck = (a[order] for a in (crep, cpart, ctime, cu, ck))
            new_block = np.concatenate(([True], crep[1:] != crep[:-1]))
            block_start = np.flatnonzero(new_block)
            block_id = np.cumsum(new_block) - 1
            seq = np.arange(len(crep)) - block_start[block_id]
            for r in range(int(seq.max()) + 1):
                sel = seq == r
                er, ep, eu, ek = crep[sel], cpart[sel], cu[sel], ck[sel]
                xp = pos[er, ep]  # (E, d)
                lam = np.asarray(spec.rate(xp, _MeanOnlyMeasure(mean[er])), dtype=np.float64)
                if np.any(lam > cap * (1.0 + 1e-12)):
                    raise RateBoundViolation("rate above declared global bound")
                acc = eu <= lam
                if not np.any(acc):
                    continue
                er, ep, ek, xp = er[acc], ep[acc], ek[acc], xp[acc]
                keyrow = er * n + ep
                h_main = marks_uniforms_batch(mkeys[keyrow], ek, ep)
                psi = np.asarray(spec.main_jump(xp, _MeanOnlyMeasure(mean[er]), h_main))
                for off in range(1, n):
                    tgt = (ep + off) % n
                    h2 = marks_uniforms_batch(mkeys[keyrow], ek, tgt)
                    theta = np.asarray(
                        spec.collateral_jump(xp, pos[er, tgt], _MeanOnlyMeasure(mean[er]), h_main, h2)
                    )
                    if np.any(theta):
                        pos[er, tgt] += theta / n
                pos[er, ep] = xp + psi
                upd = np.unique(er)
                mean[upd] = pos[upd].mean(axis=1)

        flat = pos.reshape(m * n, d)
        flat += h * drift0
        if sig0 is not None and spec.brownian_dim > 0:
            bkeys = stream_keys(seed, reps, parts, "brownian")
            bctr = np.broadcast_to(
                np.arange(spec.brownian_dim, dtype=np.uint64), (m * n, spec.brownian_dim)
            )
            raw = _raw_from_counters(bkeys[:, None], bctr)
            from scipy.special import ndtri  # noqa: PLC0415

            dw = ndtri(_uniform_from_raw(raw)) * math.sqrt(h)
            flat += np.einsum("nij,nj->ni", sig0, dw)
            if gsig0 is not None:
                control += np.einsum("nk,rnk->r", gsig0, dw.reshape(m, n, spec.brownian_dim))
        pos = flat.reshape(m, n, d)

        if return_positions:
            return pos

        vals = np.asarray(phi.value(pos), dtype=np.float64) - control
        total += float(vals.sum())
        total_sq += float((vals**2).sum())
        done += m

    mean_val = total / samples
    var = max(total_sq / samples - mean_val**2, 0.0) * samples / max(samples - 1, 1)
    return WeakStepEstimate(
        h=h, mean=mean_val + cv_mean, se=math.sqrt(var / samples), samples=samples
    )
