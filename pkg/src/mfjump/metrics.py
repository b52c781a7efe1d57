"""Distances, rate fitting and run diagnostics.

W1 between equal-size empirical measures is exact: sorted matching in 1D,
optimal assignment in R^d (the optimal coupling of two uniform empirical
measures is a permutation, so a linear assignment suffices).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .drivers import InvalidInputError, StreamKey, StreamState

ASSIGNMENT_CAP = 512


def w1_1d(a, b) -> float:
    """Exact W1 between two equal-size 1D empirical measures."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == 0 or a.size != b.size:
        raise InvalidInputError("w1_1d needs two nonempty samples of equal size")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def _lap_solve(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path assignment (Jonker-Volgenant class).

    Augments one row at a time along shortest reduced-cost paths, keeping
    dual potentials u, v.  Ties in the path search resolve to the lowest
    column index.  Returns the assigned column for each row.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j] = row matched to column j, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = np.flatnonzero(~used[1:]) + 1
            cur = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = cur < minv[free]
            if np.any(better):
                upd = free[better]
                minv[upd] = cur[better]
                way[upd] = j0
            k = int(np.argmin(minv[free]))
            delta = minv[free][k]
            j1 = int(free[k])
            used_cols = np.flatnonzero(used)
            u[p[used_cols]] += delta
            v[used_cols] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = int(way[j0])
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col


def w1_assignment(a, b, cap: int = ASSIGNMENT_CAP) -> float:
    """Exact W1 between equal-size empirical measures in R^d.

    Euclidean ground cost; n above ``cap`` is rejected (callers subsample
    explicitly via ``subsample_indices``).  Duplicate points are fine.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] == 0 or a.shape != b.shape:
        raise InvalidInputError("w1_assignment needs equal-shape (n, d) samples")
    n = a.shape[0]
    if n == 0:
        raise InvalidInputError("empty sample")
    if n > cap:
        raise InvalidInputError(f"n={n} exceeds assignment cap {cap}; subsample first")
    if a.shape[1] == 1:
        return w1_1d(a[:, 0], b[:, 0])
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    cols = _lap_solve(cost)
    return float(cost[np.arange(n), cols].mean())


def subsample_indices(n: int, cap: int, seed: int) -> np.ndarray:
    """Deterministic subsample of size cap: first cap of a seeded permutation, sorted.

    The subsampled estimator carries extra Monte Carlo variance of order
    cap**-1/2; report it alongside when it matters.
    """
    if n <= cap:
        return np.arange(n)
    s = StreamState(StreamKey(seed, 0, 0, "init").hash64())
    order = np.argsort(s.uniforms(n))
    return np.sort(order[:cap])


def w1_capped(a, b, cap: int = ASSIGNMENT_CAP, seed: int = 0) -> float:
    """W1 with the documented deterministic subsample when n exceeds cap."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] == 1:
        return w1_1d(a[:, 0], b[:, 0])
    idx = subsample_indices(a.shape[0], cap, seed)
    return w1_assignment(a[idx], b[idx], cap=cap)


def path_sup_distance(p, q) -> float:
    """sup over [0, T] of the Euclidean distance between two cadlag paths.

    Evaluation points are the union of both records' grids and jump times;
    at each point both the post-jump value and the left limit are compared.
    """
    if abs(p.horizon - q.horizon) > 1e-12:
        raise InvalidInputError("paths must share the same horizon")
    pts = np.union1d(
        np.union1d(np.asarray(p.times), np.asarray(q.times)),
        np.union1d(np.asarray(p.jump_times()), np.asarray(q.jump_times())),
    )
    best = 0.0
    for t in pts:
        d_right = float(np.linalg.norm(p.eval(t) - q.eval(t)))
        d_left = float(np.linalg.norm(p.eval_left(t) - q.eval_left(t)))
        best = max(best, d_right, d_left)
    return best


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float
    slope_se: float
    slope_ci: tuple[float, float]


def fit_rate(Ns, errors, std_errs=None, z: float = 1.96) -> RateFit:
    """Least squares of log error against log N.

    When per-point standard errors are given the fit is weighted by the
    delta-method variances of the log errors and the CI uses those known
    variances; otherwise the CI comes from the residual variance.
    """
    Ns = np.asarray(Ns, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if len(set(Ns.tolist())) < 3:
        raise InvalidInputError("need at least 3 distinct N values")
    if np.any(errors <= 0):
        raise InvalidInputError("errors must be positive")
    x = np.log(Ns)
    y = np.log(errors)
    if std_errs is not None:
        se = np.asarray(std_errs, dtype=np.float64)
        var_log = np.maximum((se / errors) ** 2, 1e-30)
        w = 1.0 / var_log
    else:
        w = np.ones_like(x)
    X = np.column_stack([np.ones_like(x), x])
    XtW = X.T * w
    A = XtW @ X
    beta = np.linalg.solve(A, XtW @ y)
    intercept, slope = float(beta[0]), float(beta[1])
    resid = y - X @ beta
    cov = np.linalg.inv(A)
    if std_errs is not None:
        slope_var = cov[1, 1]
    else:
        dof = max(len(x) - 2, 1)
        slope_var = cov[1, 1] * float(np.sum(w * resid**2)) / dof
    slope_se = float(np.sqrt(slope_var))
    ybar = float(np.sum(w * y) / np.sum(w))
    ss_tot = float(np.sum(w * (y - ybar) ** 2))
    ss_res = float(np.sum(w * resid**2))
    if ss_tot < 1e-24:
        r2 = 1.0 if ss_res < 1e-24 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return RateFit(
        slope=slope,
        intercept=intercept,
        r2=r2,
        slope_se=slope_se,
        slope_ci=(slope - z * slope_se, slope + z * slope_se),
    )


@dataclass(frozen=True)
class MomentSeries:
    power: int
    times: np.ndarray
    values: np.ndarray
    trend_slope: float
    trend_se: float
    trend_ci: tuple[float, float]


def _ols_slope(t: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tc = t - t.mean()
    denom = float(np.sum(tc**2))
    if denom == 0.0:
        return 0.0, 0.0
    slope = float(np.sum(tc * y) / denom)
    resid = y - y.mean() - slope * tc
    dof = max(len(t) - 2, 1)
    se = float(np.sqrt(np.sum(resid**2) / dof / denom))
    return slope, se


def moment_diagnostics(paths, spec, p: int, z: float = 1.96) -> MomentSeries:
    """Time series of the empirical p-th moment of the jump rate.

    For each grid time t computes the mean over particles of
    rate(x_i(t), mu^N(t))**p; the trend is an OLS slope over the second
    half of the horizon with a normal-approximation CI.
    """
    if p not in (1, 2, 3, 4):
        raise InvalidInputError("moment power must be in {1, 2, 3, 4}")
    from .models import make_empirical

    times = np.asarray(paths.times)
    vals = np.empty(len(times))
    for k, _t in enumerate(times):
        pos = paths.positions[k]
        mu = make_empirical(pos)
        lam = np.asarray(spec.rate(pos, mu), dtype=np.float64)
        vals[k] = float(np.mean(lam**p))
    half = times >= (times[0] + 0.5 * (times[-1] - times[0]))
    slope, se = _ols_slope(times[half], vals[half])
    return MomentSeries(
        power=p,
        times=times,
        values=vals,
        trend_slope=slope,
        trend_se=se,
        trend_ci=(slope - z * se, slope + z * se),
    )


def wilson_interval(k: int, n: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    phat = k / n
    denom = 1.0 + z**2 / n
    center = (phat + z**2 / (2 * n)) / denom
    half = z * np.sqrt(phat * (1 - phat) / n + z**2 / (4 * n**2)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass(frozen=True)
class JumpTailTable:
    thresholds: np.ndarray
    tail_prob: np.ndarray
    wilson_lo: np.ndarray
    wilson_hi: np.ndarray
    per_replica: np.ndarray  # C_N(T)/N samples


def jump_count_stats(jump_counts, N: int, T: float, thresholds) -> JumpTailTable:
    """Empirical tails P(C_N(T)/N >= H) across replicas with Wilson intervals.

    ``jump_counts`` holds one accepted-main-jump count per replica (the
    jump-log length of each run).
    """
    counts = np.asarray(jump_counts, dtype=np.float64)
    if np.any(np.asarray(thresholds) <= 0):
        raise InvalidInputError("thresholds must be positive")
    ratios = counts / float(N)
    hs = np.asarray(thresholds, dtype=np.float64)
    n = len(ratios)
    tail = np.empty(len(hs))
    lo = np.empty(len(hs))
    hi = np.empty(len(hs))
    for i, h in enumerate(hs):
        k = int(np.sum(ratios >= h))
        tail[i] = k / n if n else 0.0
        lo[i], hi[i] = wilson_interval(k, n)
    return JumpTailTable(thresholds=hs, tail_prob=tail, wilson_lo=lo, wilson_hi=hi, per_replica=ratios)


@dataclass
class ChaosReport:
    """Aggregated result of an N-sweep chaos experiment."""

    model_id: str
    Ns: list[int]
    replica_count: int
    distances: dict  # pair -> {"mean": [...], "se": [...], "per_replica": [[...], ...]}
    fits: dict  # pair -> RateFit
    diagnostics: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "model_id": self.model_id,
            "Ns": list(map(int, self.Ns)),
            "replica_count": self.replica_count,
            "distances": {
                k: {
                    "mean": [float(x) for x in v["mean"]],
                    "se": [float(x) for x in v["se"]],
                    "per_replica": [[float(x) for x in row] for row in v["per_replica"]],
                }
                for k, v in self.distances.items()
            },
            "fits": {
                k: {
                    "slope": f.slope,
                    "intercept": f.intercept,
                    "r2": f.r2,
                    "slope_se": f.slope_se,
                    "slope_ci": list(f.slope_ci),
                }
                for k, f in self.fits.items()
            },
            "diagnostics": self.diagnostics,
            "manifest": self.manifest,
        }
        return out
