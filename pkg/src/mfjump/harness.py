"""Experiment orchestration: config, sweeps, persistence.

Configs are strict YAML trees with a schema version; unknown keys are
errors, because silent config drift is the main reproducibility hazard.
Work cells (N, replica) are statically partitioned over a process pool
and merged in deterministic cell order, so worker count never changes any
output byte.  Every report embeds the full config and seed it was run
with and can be regenerated from that manifest alone.
"""

from __future__ import annotations

import dataclasses
import json
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .drivers import InvalidInputError, make_driver_bundle
from .limit import FlowApproximation, coupled_chaos_run, solve_limit
from .metrics import ChaosReport, fit_rate, jump_count_stats, moment_diagnostics
from .models import AssumptionReport, ProbeConfig, validate_model
from .particle import InitSampler, StepPolicy, simulate
from .zoo import build

PKG_VERSION = "0.1.0"
SCHEMA_VERSION = 1
DISTANCES_HEADER = "# mfjump-distances-v1"
DIAGNOSTICS_HEADER = "# mfjump-diagnostics-v1"
PATHS_HEADER = "# mfjump-paths-v1"
JUMPLOG_HEADER = "# mfjump-jumplog-v1"


class ConfigError(InvalidInputError):
    pass


class SweepError(RuntimeError):
    """A sweep cell failed; partial results were persisted and flagged."""

    def __init__(self, message: str, failures: list[dict]):
        super().__init__(message)
        self.failures = failures


def _parse_section(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{path}' must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in config section '{path}': {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class ModelSection:
    id: str = "lipschitz-demo"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RunSection:
    T: float = 1.0
    dt: float = 0.01
    scheme: str = "auto"
    Ns: tuple = (64,)
    replicas: int = 4
    seed: int = 0
    workers: int = 0

    def __post_init__(self):
        if not self.T > 0:
            raise ConfigError("run.T must be positive")
        if not self.dt > 0:
            raise ConfigError("run.dt must be positive")
        ns = list(self.Ns)
        if any(b <= a for a, b in zip(ns, ns[1:])):
            raise ConfigError("run.Ns must be strictly increasing")
        if self.replicas < 1:
            raise ConfigError("run.replicas must be >= 1")


@dataclass(frozen=True)
class InitSection:
    kind: str = "gauss"
    mean: tuple = (0.0,)
    std: float = 1.0
    low: float = 0.0
    high: float = 1.0
    point: tuple = (0.0,)

    def sampler(self) -> InitSampler:
        return InitSampler(
            kind=self.kind, mean=tuple(self.mean), std=self.std,
            low=self.low, high=self.high, point=tuple(self.point),
        )


@dataclass(frozen=True)
class LimitSection:
    ensemble: int = 0  # 0 = automatic (16 x largest N)
    picard_tol: float = 1e-3
    picard_max_iter: int = 10


@dataclass(frozen=True)
class SteppingSection:
    bound_mult: float = 2.0
    bound_add: float = 1.0
    candidate_cap: float = 1.0
    max_retries: int = 8
    ysystem_rate_arg: str = "jumper"

    def policy(self) -> StepPolicy:
        return StepPolicy(
            bound_mult=self.bound_mult, bound_add=self.bound_add,
            candidate_cap=self.candidate_cap, max_retries=self.max_retries,
            ysystem_rate_arg=self.ysystem_rate_arg,
        )


@dataclass(frozen=True)
class DiagnosticsSection:
    moment_powers: tuple = (4,)
    jump_thresholds: tuple = ()  # empty = 2x the largest-N mean ratio


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs/out"


@dataclass(frozen=True)
class SimConfig:
    model: ModelSection = field(default_factory=ModelSection)
    run: RunSection = field(default_factory=RunSection)
    init: InitSection = field(default_factory=InitSection)
    limit: LimitSection = field(default_factory=LimitSection)
    stepping: SteppingSection = field(default_factory=SteppingSection)
    diagnostics: DiagnosticsSection = field(default_factory=DiagnosticsSection)
    output: OutputSection = field(default_factory=OutputSection)

    @staticmethod
    def from_dict(data: dict) -> "SimConfig":
        data = dict(data)
        schema = data.pop("schema", None)
        if schema != SCHEMA_VERSION:
            raise ConfigError(f"config schema must be {SCHEMA_VERSION}, got {schema!r}")
        sections = {
            "model": ModelSection, "run": RunSection, "init": InitSection,
            "limit": LimitSection, "stepping": SteppingSection,
            "diagnostics": DiagnosticsSection, "output": OutputSection,
        }
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigError(f"unknown top-level config sections: {sorted(unknown)}")
        kwargs = {}
        for name, cls in sections.items():
            if name in data:
                kwargs[name] = _parse_section(cls, data[name], name)
        return SimConfig(**kwargs)

    @staticmethod
    def from_file(path) -> "SimConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        return SimConfig.from_dict(data)

    def to_dict(self) -> dict:
        out = {"schema": SCHEMA_VERSION}
        for name in ("model", "run", "init", "limit", "stepping", "diagnostics", "output"):
            section = dataclasses.asdict(getattr(self, name))
            for k, v in list(section.items()):
                if isinstance(v, tuple):
                    section[k] = list(v)
            out[name] = section
        return out

    def with_overrides(self, seed=None, workers=None, out=None) -> "SimConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, seed=int(seed)))
        if workers is not None:
            cfg = dataclasses.replace(cfg, run=dataclasses.replace(cfg.run, workers=int(workers)))
        if out is not None:
            cfg = dataclasses.replace(cfg, output=dataclasses.replace(cfg.output, dir=str(out)))
        return cfg


# -- persistence helpers ----------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def save_paths_csv(paths, fh) -> None:
    """Columnar path record: one row per (grid time, particle)."""
    d = paths.positions.shape[2]
    cols = ",".join(f"x{k+1}" for k in range(d))
    fh.write(f"{PATHS_HEADER}\nt,particle,{cols}\n")
    for gi, t in enumerate(paths.times):
        for i in range(paths.n_particles):
            vals = ",".join(_fmt(v) for v in paths.positions[gi, i])
            fh.write(f"{_fmt(t)},{i},{vals}\n")


def save_jumplog_csv(paths, fh) -> None:
    fh.write(f"{JUMPLOG_HEADER}\nt,jumper,amp_norm\n")
    for t, j, pre, post in zip(paths.jump_times, paths.jump_particles, paths.jump_pre, paths.jump_post):
        amp = float(np.linalg.norm(post - pre))
        fh.write(f"{_fmt(t)},{int(j)},{_fmt(amp)}\n")


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- chaos sweep ------------------------------------------------------------

_FLOW_CACHE: dict[tuple, FlowApproximation] = {}


def _load_flow_cached(path: str) -> FlowApproximation:
    # keyed by (path, mtime) so a rewritten flow file is never served stale
    key = (path, Path(path).stat().st_mtime_ns)
    if key not in _FLOW_CACHE:
        _FLOW_CACHE.clear()
        _FLOW_CACHE[key] = FlowApproximation.load(path)
    return _FLOW_CACHE[key]


def replica_stream_key(n_index: int, replica: int) -> int:
    """Distinct stream namespace per sweep cell (no reuse across N values)."""
    return (n_index << 20) | replica


def _chaos_cell(args: tuple) -> dict:
    cfg_dict, flow_path, n_index, N, replica = args
    try:
        config = SimConfig.from_dict(cfg_dict)
        spec = build(config.model.id, config.model.params)
        flow = _load_flow_cached(flow_path)
        bundle = make_driver_bundle(config.run.seed, replica_stream_key(n_index, replica), N)
        sample = coupled_chaos_run(
            spec, N, config.run.T, config.run.dt, bundle, flow,
            init=config.init.sampler(), scheme=config.run.scheme,
            policy=config.stepping.policy(),
        )
        return {
            "N": N,
            "replica": replica,
            "d_xy": float(np.mean(sample.sup_xy)),
            "d_ylimit": float(np.mean(sample.sup_ylimit)),
            "d_xlimit": float(np.mean(sample.sup_xlimit)),
            "jumps_per_particle": sample.jump_count_x / N,
        }
    except Exception as exc:  # noqa: BLE001 - cell failures are data, not crashes
        return {"N": N, "replica": replica, "error": f"{type(exc).__name__}: {exc}"}


def _map_cells(fn, args: list, workers: int) -> list:
    if workers <= 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, args, chunksize=1))


def _aggregate_distances(Ns: list[int], cells: list[dict]) -> dict:
    pairs = ("d_xy", "d_ylimit", "d_xlimit")
    out = {p: {"mean": [], "se": [], "per_replica": []} for p in pairs}
    for N in Ns:
        rows = [c for c in cells if c["N"] == N and "error" not in c]
        for p in pairs:
            vals = np.asarray([r[p] for r in rows])
            out[p]["per_replica"].append(vals.tolist())
            if len(vals) == 0:
                out[p]["mean"].append(float("nan"))
                out[p]["se"].append(float("nan"))
            else:
                out[p]["mean"].append(float(vals.mean()))
                se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
                out[p]["se"].append(se)
    return out


def _write_distances_csv(path: Path, cells: list[dict]) -> None:
    lines = [DISTANCES_HEADER, "N,replica,d_xy,d_ylimit,d_xlimit,jumps_per_particle"]
    for c in cells:
        if "error" in c:
            lines.append(f"{c['N']},{c['replica']},error,error,error,error")
        else:
            lines.append(
                f"{c['N']},{c['replica']},{_fmt(c['d_xy'])},{_fmt(c['d_ylimit'])},"
                f"{_fmt(c['d_xlimit'])},{_fmt(c['jumps_per_particle'])}"
            )
    path.write_text("\n".join(lines) + "\n")


def _write_plotdata(plot_dir: Path, Ns: list[int], distances: dict) -> None:
    plot_dir.mkdir(parents=True, exist_ok=True)
    for pair, stats in distances.items():
        lines = ["# log2N log_err log_err_se"]
        for N, mean, se in zip(Ns, stats["mean"], stats["se"]):
            if not np.isfinite(mean) or mean <= 0:
                continue
            yerr = se / mean if mean > 0 else 0.0
            lines.append(f"{_fmt(np.log2(N))} {_fmt(np.log(mean))} {_fmt(yerr)}")
        (plot_dir / f"{pair[2:]}.dat").write_text("\n".join(lines) + "\n")


def run_chaos_sweep(config: SimConfig, force: bool = False) -> ChaosReport:
    """Solve the limit once, run every (N, replica) coupled cell, fit rates.

    Deterministic given the config (including worker count).  A failing
    cell persists all other cells' outputs and raises ``SweepError`` with
    the report flagged partial.
    """
    spec = build(config.model.id, config.model.params)
    report = validate_model(spec)
    if report.verdict == "fail":
        if not force:
            raise InvalidInputError(
                "model failed assumption validation (pass force=True to run anyway):\n"
                + report.summary()
            )
        warnings.warn("running a model that failed assumption validation", stacklevel=2)

    outdir = Path(config.output.dir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.echo").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))

    Ns = [int(n) for n in config.run.Ns]
    M = config.limit.ensemble or 16 * max(Ns)
    flow = solve_limit(
        spec, M, config.run.T, config.run.dt,
        seed=config.run.seed, tol=config.limit.picard_tol,
        max_iter=config.limit.picard_max_iter, scheme=config.run.scheme,
        policy=config.stepping.policy(), init=config.init.sampler(),
    )
    flow_path = outdir / "flow.npz"
    flow.save(flow_path)

    cfg_dict = config.to_dict()
    args = [
        (cfg_dict, str(flow_path), ni, N, r)
        for ni, N in enumerate(Ns)
        for r in range(config.run.replicas)
    ]
    cells = _map_cells(_chaos_cell, args, config.run.workers)
    failures = [c for c in cells if "error" in c]

    distances = _aggregate_distances(Ns, cells)
    fits = {}
    for pair, stats in distances.items():
        ok = [
            i for i, N in enumerate(Ns)
            if len(stats["per_replica"][i]) >= 2 and np.isfinite(stats["mean"][i]) and stats["mean"][i] > 0
        ]
        if len({Ns[i] for i in ok}) >= 3:
            fits[pair] = fit_rate(
                [Ns[i] for i in ok],
                [stats["mean"][i] for i in ok],
                [stats["se"][i] for i in ok],
            )

    jumps_by_n = {
        str(N): [c["jumps_per_particle"] for c in cells if c["N"] == N and "error" not in c]
        for N in Ns
    }
    chaos = ChaosReport(
        model_id=config.model.id,
        Ns=Ns,
        replica_count=config.run.replicas,
        distances=distances,
        fits=fits,
        diagnostics={
            "limit_meta": flow.meta,
            "jumps_per_particle": {k: float(np.mean(v)) if v else float("nan") for k, v in jumps_by_n.items()},
        },
        manifest={
            "config": cfg_dict,
            "seed": config.run.seed,
            "package_version": PKG_VERSION,
            "status": "partial" if failures else "complete",
            "failures": failures,
        },
    )

    _write_distances_csv(outdir / "distances.csv", cells)
    _write_plotdata(outdir / "plotdata", Ns, distances)
    payload = {
        "format": "mfjump-report-v1",
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "report": chaos.to_dict(),
    }
    _write_json(outdir / "report.json", payload)

    if failures:
        raise SweepError(
            f"{len(failures)} of {len(cells)} cells failed; partial results in {outdir}", failures
        )
    return chaos


# -- diagnostics ------------------------------------------------------------


def _diag_cell(args: tuple) -> dict:
    cfg_dict, n_index, N, replica = args
    try:
        config = SimConfig.from_dict(cfg_dict)
        spec = build(config.model.id, config.model.params)
        bundle = make_driver_bundle(config.run.seed, replica_stream_key(n_index, replica), N)
        paths = simulate(
            "X", spec, N, config.run.T, config.run.dt, bundle,
            init=config.init.sampler(), scheme=config.run.scheme,
            policy=config.stepping.policy(),
        )
        moments = {}
        for p in config.diagnostics.moment_powers:
            series = moment_diagnostics(paths, spec, int(p))
            moments[int(p)] = {
                "mean": float(series.values.mean()),
                "second_half_mean": float(series.values[series.times >= config.run.T / 2].mean()),
                "trend_slope": series.trend_slope,
                "trend_se": series.trend_se,
            }
        return {
            "N": N,
            "replica": replica,
            "jump_count": paths.jump_count,
            "jumps_per_particle": paths.jump_count / N,
            "moments": moments,
        }
    except Exception as exc:  # noqa: BLE001
        return {"N": N, "replica": replica, "error": f"{type(exc).__name__}: {exc}"}


@dataclass
class DiagnosticsBundle:
    Ns: list[int]
    cells: list[dict]
    moment_verdicts: dict  # (N, p) -> dict with slope CI and verdict
    jump_tails: dict  # N -> JumpTailTable
    thresholds: list[float]
    manifest: dict


def _t_quantile(df: int, level: float = 0.975) -> float:
    from scipy.stats import t as student_t

    return float(student_t.ppf(level, df))


def run_diagnostics(config: SimConfig) -> DiagnosticsBundle:
    """Moment series and jump-count tails for the interacting system.

    The moment verdict is 'bounded' when the cross-replica CI of the
    second-half trend slope excludes growth faster than 5% of the series
    mean per unit time.
    """
    Ns = [int(n) for n in config.run.Ns]
    if min(Ns) == 1:
        warnings.warn("N=1 runs: mean-field quantities are degenerate", stacklevel=2)
    cfg_dict = config.to_dict()
    args = [
        (cfg_dict, ni, N, r)
        for ni, N in enumerate(Ns)
        for r in range(config.run.replicas)
    ]
    cells = _map_cells(_diag_cell, args, config.run.workers)
    failures = [c for c in cells if "error" in c]
    if failures:
        raise SweepError(f"{len(failures)} diagnostics cells failed", failures)

    moment_verdicts = {}
    for N in Ns:
        rows = [c for c in cells if c["N"] == N]
        for p in config.diagnostics.moment_powers:
            p = int(p)
            slopes = np.asarray([r["moments"][p]["trend_slope"] for r in rows])
            means = np.asarray([r["moments"][p]["second_half_mean"] for r in rows])
            mean_slope = float(slopes.mean())
            if len(slopes) > 1:
                se = float(slopes.std(ddof=1) / np.sqrt(len(slopes)))
                half = _t_quantile(len(slopes) - 1) * se
            else:
                se = float(rows[0]["moments"][p]["trend_se"])
                half = 1.96 * se
            hi = mean_slope + half
            lo = mean_slope - half
            threshold = 0.05 * float(means.mean())
            verdict = "bounded" if hi < threshold else "growing"
            moment_verdicts[(N, p)] = {
                "slope_mean": mean_slope,
                "slope_ci": (lo, hi),
                "series_mean": float(means.mean()),
                "threshold": threshold,
                "verdict": verdict,
            }

    ratios_by_n = {
        N: [c["jumps_per_particle"] for c in cells if c["N"] == N] for N in Ns
    }
    if config.diagnostics.jump_thresholds:
        thresholds = [float(h) for h in config.diagnostics.jump_thresholds]
    else:
        thresholds = [2.0 * float(np.mean(ratios_by_n[max(Ns)]))]
    jump_tails = {
        N: jump_count_stats(
            [c["jump_count"] for c in cells if c["N"] == N], N, config.run.T, thresholds
        )
        for N in Ns
    }

    bundle = DiagnosticsBundle(
        Ns=Ns,
        cells=cells,
        moment_verdicts=moment_verdicts,
        jump_tails=jump_tails,
        thresholds=thresholds,
        manifest={"config": cfg_dict, "seed": config.run.seed, "package_version": PKG_VERSION},
    )

    outdir = Path(config.output.dir)
    outdir.mkdir(parents=True, exist_ok=True)
    lines = [DIAGNOSTICS_HEADER, "N,replica,jumps_per_particle," + ",".join(
        f"m{int(p)}_mean,m{int(p)}_slope" for p in config.diagnostics.moment_powers
    )]
    for c in cells:
        row = [str(c["N"]), str(c["replica"]), _fmt(c["jumps_per_particle"])]
        for p in config.diagnostics.moment_powers:
            row += [_fmt(c["moments"][int(p)]["mean"]), _fmt(c["moments"][int(p)]["trend_slope"])]
        lines.append(",".join(row))
    (outdir / "diagnostics.csv").write_text("\n".join(lines) + "\n")
    _write_json(
        outdir / "diagnostics.json",
        {
            "format": "mfjump-diagnostics-v1",
            "moment_verdicts": {
                f"N{N}_p{p}": v for (N, p), v in moment_verdicts.items()
            },
            "jump_tails": {
                str(N): {
                    "thresholds": t.thresholds.tolist(),
                    "tail_prob": t.tail_prob.tolist(),
                    "wilson_lo": t.wilson_lo.tolist(),
                    "wilson_hi": t.wilson_hi.tolist(),
                }
                for N, t in jump_tails.items()
            },
            "manifest": bundle.manifest,
        },
    )
    return bundle


def run_validate(model_id: str, params: dict | None = None, probe: ProbeConfig | None = None) -> AssumptionReport:
    """Build a zoo model and probe its declared assumptions."""
    spec = build(model_id, params or {})
    return validate_model(spec, probe)
