"""Coefficient model for all three system classes, plus assumption probing.

A model bundles the drift F, diffusion sigma, jump rate lambda, main-jump
amplitude psi and collateral amplitude Theta, all evaluated against finite
empirical measures.  Coefficients are batched: positions come in as
``(n, d)`` arrays and results broadcast accordingly.  Mark variables are
product-uniform on [0, 1] and materialized lazily, one coordinate per
touched particle.

Assumption checks are probabilistic probes, not proofs: sampled point /
measure pairs against the declared constants.  A "pass" means "no
violation found at this budget" and the report says so.
"""

from __future__ import annotations


from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .drivers import PROBE_REPLICA, InvalidInputError, StreamKey, StreamState
from .metrics import w1_assignment


class EmpiricalMeasure:
    """Uniform probability measure on n points in R^d.

    ``integrate(g)`` is the mean of g over the points; the mean vector is
    cached and recomputed on demand (steppers invalidate it after jumps).
    """

    __slots__ = ("points", "_mean", "_dirty")

    def __init__(self, points: np.ndarray):
        self.points = points
        self._mean = None
        self._dirty = True

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def mean(self) -> np.ndarray:
        if self._dirty or self._mean is None:
            self._mean = self.points.mean(axis=0)
            self._dirty = False
        return self._mean

    def mark_dirty(self) -> None:
        self._dirty = True

    def integrate(self, g: Callable) -> np.ndarray | float:
        vals = np.asarray(g(self.points))
        out = vals.mean(axis=0)
        return float(out) if np.ndim(out) == 0 else out


def make_empirical(points) -> EmpiricalMeasure:
    """Empirical measure of a nonempty list of finite points in R^d."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.size == 0:
        raise InvalidInputError("empirical measure needs at least one point")
    if not np.all(np.isfinite(pts)):
        raise InvalidInputError("empirical measure points must be finite")
    return EmpiricalMeasure(pts)


@dataclass(frozen=True)
class AssumptionMeta:
    """Declared constants the validator probes against.

    Only the fields relevant to the model class need to be set; unset
    fields make the corresponding check indeterminate.
    """

    lipschitz_drift: float | None = None
    lipschitz_diffusion: float | None = None
    lipschitz_jump_l1: float | None = None
    rate_gamma: float | None = None          # envelope b' <= gamma*b + c
    rate_c: float | None = None
    rate_h_bound: float | None = None        # sup of the bounded rate part
    rate_margin_factor: float = 5.0          # admissibility: factor*gamma*E||V|| < 1
    mean_collateral_norm: float | None = None  # E||V||
    mean_reset_norm: float | None = None       # E||U||
    rate_global_bound: float | None = None   # sup lambda if finite
    support_radius: float | None = None
    rate_radial: Callable[[np.ndarray], np.ndarray] | None = None  # b(r)
    potential_grad: Callable[[np.ndarray], np.ndarray] | None = None
    interaction: Callable[[np.ndarray, EmpiricalMeasure], np.ndarray] | None = None
    interaction_bound: float | None = None


@dataclass(frozen=True)
class ModelSpec:
    """One model instance: coefficients, dimensions, class tag, metadata.

    Coefficient contracts (all pure, shareable across workers):

    - ``drift(x, m) -> (n, d)`` for x of shape (n, d)
    - ``diffusion(x, m) -> (n, d, d1)`` (or broadcastable to it)
    - ``rate(x, m) -> (n,)`` nonnegative
    - ``main_jump(x, m, h1) -> (n, d)`` with h1 of shape (n,) or scalar
    - ``collateral_jump(xj, targets, m, h1, h2) -> (n, d)`` with xj the
      jumper's point (d,), h1 scalar or (n,), h2 of shape (n,)

    ``collateral_mean`` declares E over marks of the collateral amplitude:
    None means identically zero, an array means a constant vector, and a
    callable ``(jumpers (k, d), targets (n, d), m) -> (k, n, d)`` covers the
    general case.  ``main_jump_mean(x, m) -> (n, d)`` is the optional
    closed-form mark mean of the main jump.
    """

    drift: Callable
    diffusion: Callable
    rate: Callable
    main_jump: Callable
    collateral_jump: Callable
    dim: int
    brownian_dim: int
    class_tag: str
    meta: AssumptionMeta = field(default_factory=AssumptionMeta)
    collateral_mean: object = None
    main_jump_mean: Callable | None = None
    exact_linear_ok: bool = False

    def __post_init__(self):
        if self.class_tag not in ("lipschitz", "convex_potential", "superlinear_rate"):
            raise InvalidInputError(f"unknown class_tag {self.class_tag!r}")
        if self.class_tag == "superlinear_rate":
            g = self.meta.rate_gamma
            ev = self.meta.mean_collateral_norm
            if g is None or ev is None:
                raise InvalidInputError("superlinear_rate models must declare rate_gamma and E||V||")
            k = self.meta.rate_margin_factor
            if not k * g * ev < 1.0:
                raise InvalidInputError(
                    f"rate envelope inadmissible: {k:g} * gamma * E||V|| = {k * g * ev:.6g} >= 1"
                )

    def has_diffusion(self) -> bool:
        return self.brownian_dim > 0

    def collateral_mean_kind(self) -> str:
        if self.collateral_mean is None:
            return "zero"
        if callable(self.collateral_mean):
            return "general"
        return "constant"


@dataclass(frozen=True)
class ProbeConfig:
    budget: int = 200
    radius: float = 3.0
    measure_points: int = 8
    fd_step: float = 1e-5
    mark_draws: int = 64
    seed: int = 0
    rel_tol: float = 0.05


@dataclass(frozen=True)
class ConditionResult:
    name: str
    verdict: str  # pass | fail | indeterminate
    estimate: float | None = None
    declared: float | None = None
    witness: dict | None = None
    note: str = ""


@dataclass(frozen=True)
class AssumptionReport:
    model_class: str
    conditions: tuple[ConditionResult, ...]
    probe_budget: int

    @property
    def verdict(self) -> str:
        verdicts = [c.verdict for c in self.conditions]
        if "fail" in verdicts:
            return "fail"
        if "indeterminate" in verdicts:
            return "indeterminate"
        return "pass"

    def summary(self) -> str:
        lines = [f"model class: {self.model_class}  overall: {self.verdict}"]
        for c in self.conditions:
            line = f"  [{c.verdict:>13}] {c.name}"
            if c.estimate is not None:
                line += f"  estimate={c.estimate:.6g}"
            if c.declared is not None:
                line += f"  declared={c.declared:.6g}"
            if c.note:
                line += f"  ({c.note})"
            lines.append(line)
            if c.witness:
                lines.append(f"        witness: {c.witness}")
        return "\n".join(lines)


class _ProbeSampler:
    """Deterministic probe sequence, one independent channel per condition.

    Because every condition owns its own stream, the probes seen at budget
    B' <= B are a prefix of those seen at budget B for the same seed.
    """

    def __init__(self, dim: int, probe: ProbeConfig, channel: int = 0):
        self.dim = dim
        self.probe = probe
        self.stream = StreamState(StreamKey(probe.seed, PROBE_REPLICA, channel, "init").hash64())

    def point(self) -> np.ndarray:
        u = self.stream.uniforms(self.dim)
        return self.probe.radius * (2.0 * u - 1.0)

    def measure(self) -> EmpiricalMeasure:
        k = self.probe.measure_points
        u = self.stream.uniforms(k * self.dim).reshape(k, self.dim)
        return make_empirical(self.probe.radius * (2.0 * u - 1.0))

    def marks(self, n: int) -> np.ndarray:
        return self.stream.uniforms(n)


def _jump_l1_gap(spec: ModelSpec, x, y, mx, my, marks) -> float:
    """L1 gap of the thinned main-jump kernel between states (x, mx), (y, my).

    The u-integral of ||psi_x 1_{u<=lam_x} - psi_y 1_{u<=lam_y}|| collapses
    to min(lam) * ||psi_x - psi_y|| + |lam_x - lam_y| * ||psi of the larger
    rate||; the mark integral is averaged over the probe's mark draws.
    """
    lx = float(spec.rate(x[None, :], mx)[0])
    ly = float(spec.rate(y[None, :], my)[0])
    m = len(marks)
    px = spec.main_jump(np.tile(x, (m, 1)), mx, marks)
    py = spec.main_jump(np.tile(y, (m, 1)), my, marks)
    common = min(lx, ly) * np.linalg.norm(px - py, axis=1)
    big = px if lx >= ly else py
    excess = abs(lx - ly) * np.linalg.norm(big, axis=1)
    return float(np.mean(common + excess))


def _collateral_field(spec: ModelSpec, x: np.ndarray, m: EmpiricalMeasure, marks: np.ndarray) -> np.ndarray:
    """< m, rate(.) * E_marks[Theta(., x)] > for a single target x."""
    kind = spec.collateral_mean_kind()
    lam = np.asarray(spec.rate(m.points, m), dtype=np.float64)
    if kind == "zero":
        return np.zeros(spec.dim)
    if kind == "constant":
        return float(np.mean(lam)) * np.asarray(spec.collateral_mean, dtype=np.float64)
    cm = spec.collateral_mean(m.points, x[None, :], m)  # (k, 1, d)
    return np.mean(lam[:, None] * cm[:, 0, :], axis=0)


def validate_model(spec: ModelSpec, probe: ProbeConfig | None = None) -> AssumptionReport:
    """Probe the declared assumptions of a model over sampled states.

    Verdicts are evidence, not proofs: conditions quantified over all
    probability measures are only checked on empirical measures inside the
    probe radius, and the report notes this restriction.
    """
    probe = probe or ProbeConfig()
    conditions: list[ConditionResult] = []
    tol = 1.0 + probe.rel_tol
    channels = iter(range(1000))

    def new_sampler() -> _ProbeSampler:
        return _ProbeSampler(spec.dim, probe, channel=next(channels))

    def run_pairs(fn, name, declared, note=""):
        sampler = new_sampler()
        worst = 0.0
        witness = None
        for b in range(probe.budget):
            x, y = sampler.point(), sampler.point()
            mx, my = sampler.measure(), sampler.measure()
            den = float(np.linalg.norm(x - y)) + w1_assignment(mx.points, my.points)
            if den < 1e-9:
                continue
            try:
                q = fn(x, y, mx, my) / den
            except Exception as exc:  # noqa: BLE001 - coefficient failures -> indeterminate
                return ConditionResult(
                    name, "indeterminate", note=f"coefficient evaluation failed: {exc}",
                    witness={"x": x.tolist(), "y": y.tolist()},
                )
            if not np.isfinite(q):
                return ConditionResult(
                    name, "indeterminate", note="non-finite quotient",
                    witness={"x": x.tolist(), "y": y.tolist()},
                )
            if q > worst:
                worst = q
                witness = {
                    "x": x.tolist(), "y": y.tolist(), "quotient": q,
                    "probe_index": b,
                }
        if declared is None:
            return ConditionResult(name, "indeterminate", estimate=worst, note="no declared constant")
        if worst <= declared * tol + 1e-12:
            return ConditionResult(name, "pass", estimate=worst, declared=declared, note=note)
        return ConditionResult(name, "fail", estimate=worst, declared=declared, witness=witness, note=note)

    # rate nonnegativity, every class
    sampler = new_sampler()
    neg_witness = None
    for _ in range(probe.budget):
        x = sampler.point()
        m = sampler.measure()
        lam = float(spec.rate(x[None, :], m)[0])
        if not (np.isfinite(lam) and lam >= 0):
            neg_witness = {"x": x.tolist(), "rate": lam}
            break
    conditions.append(
        ConditionResult("rate-nonnegative", "fail" if neg_witness else "pass", witness=neg_witness)
    )

    quantifier_note = "probed over empirical measures within the probe radius only"

    if spec.class_tag == "lipschitz":
        conditions.append(
            run_pairs(
                lambda x, y, mx, my: float(
                    np.linalg.norm(spec.drift(x[None, :], mx)[0] - spec.drift(y[None, :], my)[0])
                ),
                "drift-lipschitz",
                spec.meta.lipschitz_drift,
                note=quantifier_note,
            )
        )
        conditions.append(
            run_pairs(
                lambda x, y, mx, my: float(
                    np.linalg.norm(
                        np.asarray(spec.diffusion(x[None, :], mx))
                        - np.asarray(spec.diffusion(y[None, :], my))
                    )
                ),
                "diffusion-lipschitz",
                spec.meta.lipschitz_diffusion,
                note=quantifier_note,
            )
        )

    if spec.class_tag == "convex_potential":
        grad = spec.meta.potential_grad
        if grad is None:
            conditions.append(
                ConditionResult("potential-monotone", "indeterminate", note="no potential gradient declared")
            )
        else:
            sampler = new_sampler()
            worst = 0.0
            witness = None
            for b in range(probe.budget):
                x, y = sampler.point(), sampler.point()
                g = float(np.dot(x - y, grad(x[None, :])[0] - grad(y[None, :])[0]))
                if g < -1e-9 * (1.0 + float(np.linalg.norm(x - y)) ** 2):
                    witness = {"x": x.tolist(), "y": y.tolist(), "inner": g, "probe_index": b}
                    break
                worst = min(worst, g)
            conditions.append(
                ConditionResult(
                    "potential-monotone", "fail" if witness else "pass", witness=witness,
                    note=quantifier_note,
                )
            )
        inter = spec.meta.interaction
        if inter is None or spec.meta.interaction_bound is None:
            conditions.append(
                ConditionResult(
                    "interaction-bounded", "indeterminate",
                    note="boundedness over all measures cannot be probed; no declared interaction",
                )
            )
        else:
            sampler = new_sampler()
            sup = 0.0
            witness = None
            for b in range(probe.budget):
                x = sampler.point()
                m = sampler.measure()
                v = float(np.max(np.abs(inter(x[None, :], m)[0])))
                if v > sup:
                    sup = v
                    witness = {"x": x.tolist(), "value": v, "probe_index": b}
            ok = sup <= spec.meta.interaction_bound * tol + 1e-12
            conditions.append(
                ConditionResult(
                    "interaction-bounded", "pass" if ok else "fail", estimate=sup,
                    declared=spec.meta.interaction_bound,
                    witness=None if ok else witness,
                    note="boundedness over all measures probed on empirical measures only",
                )
            )
        conditions.append(
            run_pairs(
                lambda x, y, mx, my: float(
                    np.linalg.norm(
                        np.asarray(spec.diffusion(x[None, :], mx))
                        - np.asarray(spec.diffusion(y[None, :], my))
                    )
                ),
                "diffusion-lipschitz",
                spec.meta.lipschitz_diffusion,
                note=quantifier_note,
            )
        )

    if spec.class_tag in ("lipschitz", "convex_potential"):
        marks = new_sampler().marks(probe.mark_draws)
        conditions.append(
            run_pairs(
                lambda x, y, mx, my: _jump_l1_gap(spec, x, y, mx, my, marks),
                "main-jump-l1-lipschitz",
                spec.meta.lipschitz_jump_l1,
                note=quantifier_note,
            )
        )
        conditions.append(
            run_pairs(
                lambda x, y, mx, my: float(
                    np.linalg.norm(
                        _collateral_field(spec, x, mx, marks) - _collateral_field(spec, y, my, marks)
                    )
                ),
                "collateral-field-l1-lipschitz",
                spec.meta.lipschitz_jump_l1,
                note=quantifier_note,
            )
        )

    if spec.class_tag == "superlinear_rate":
        g, ev = spec.meta.rate_gamma, spec.meta.mean_collateral_norm
        k = spec.meta.rate_margin_factor
        margin = k * g * ev
        note = f"exact arithmetic check of {k:g} * gamma * E||V|| < 1"
        if k < 5.0:
            note += " (weakened margin factor; the supported constraint uses 5)"
        conditions.append(
            ConditionResult(
                "collateral-margin", "pass" if margin < 1.0 else "fail",
                estimate=margin, declared=1.0, note=note,
            )
        )
        b = spec.meta.rate_radial
        c = spec.meta.rate_c
        if b is None or c is None:
            conditions.append(
                ConditionResult("rate-envelope", "indeterminate", note="no radial rate declared")
            )
        else:
            rs = np.logspace(-3, 3, 61)
            eps = probe.fd_step
            db = (np.asarray(b(rs + eps)) - np.asarray(b(np.maximum(rs - eps, 0.0)))) / (
                rs + eps - np.maximum(rs - eps, 0.0)
            )
            rhs = g * np.asarray(b(rs)) + c
            slack = db - rhs
            fd_tol = 1e-6 * (1.0 + np.abs(rhs))
            bad = np.flatnonzero(slack > fd_tol)
            if bad.size:
                i = int(bad[np.argmax(slack[bad])])
                conditions.append(
                    ConditionResult(
                        "rate-envelope", "fail", estimate=float(db[i]), declared=float(rhs[i]),
                        witness={"r": float(rs[i]), "b_prime": float(db[i]), "gamma_b_plus_c": float(rhs[i])},
                        note="finite-difference b' vs gamma*b + c on log-spaced radii",
                    )
                )
            else:
                conditions.append(
                    ConditionResult(
                        "rate-envelope", "pass", estimate=float(np.max(slack)),
                        note="finite-difference b' vs gamma*b + c on log-spaced radii",
                    )
                )

    return AssumptionReport(
        model_class=spec.class_tag,
        conditions=tuple(conditions),
        probe_budget=probe.budget,
    )
