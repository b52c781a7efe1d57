"""Reproducible, splittable random drivers.

Every random number consumed by a simulation is a pure function of a
64-bit master seed and a stream address ``(replica, particle, kind,
counter)``.  Streams are counter-based (stateless skip-ahead), so the
Brownian motion and the marked Poisson candidates of particle ``i`` can be
replayed bit-identically by any process that holds the same key -- this is
what lets two coupled systems consume literally the same drivers.

Derivation function (frozen, format v1)
---------------------------------------
All arithmetic is modulo 2**64.  ``mix64`` is the splitmix64 finalizer::

    GOLD = 0x9E3779B97F4A7C15
    mix64(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)

    key(seed, replica, particle, kind):
        h = mix64(seed)
        h = mix64(h ^ ((replica + 1) * GOLD))
        h = mix64(h ^ ((particle + 1) * GOLD))
        h = mix64(h ^ (KIND_CODE[kind] * GOLD))
        return h

    raw(key, i)     = mix64(key + (i + 1) * GOLD)          # i = 0, 1, ...
    uniform(key, i) = ((raw(key, i) >> 11) + 0.5) * 2**-53 # in (0, 1)

with ``KIND_CODE = {"brownian": 1, "poisson": 2, "marks": 3, "init": 4}``.
Gaussians are ``ndtri(uniform)``; exponential inter-arrival times are
``-log(uniform) / rate``.

Mark coordinates are addressed statelessly: the mark for particle index
``m`` attached to candidate event number ``k`` of a given marks stream is
uniform number ``(k << 32) | m`` of that stream.  Only the coordinates a
jump actually touches are ever materialized.

Reference vectors for ``(seed=42, replica=0, particle=0, kind="brownian")``
are frozen in ``tests/data/stream_vectors.json``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

_MASK = (1 << 64) - 1
_GOLD = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

KIND_CODES = {"brownian": 1, "poisson": 2, "marks": 3, "init": 4}

# Reserved replica namespaces so auxiliary consumers never collide with
# experiment replicas (which are small integers, or (n_index << 20) | r in
# sweep cells).
PICARD_REPLICA = 1 << 40
PROBE_REPLICA = (1 << 40) + 1
WEAK_TEST_REPLICA = (1 << 40) + 2

_U64_GOLD = np.uint64(_GOLD)
_U64_MIX1 = np.uint64(_MIX1)
_U64_MIX2 = np.uint64(_MIX2)
_U64_ONE = np.uint64(1)


class InvalidInputError(ValueError):
    """Raised when an operation is called with out-of-contract arguments."""


def mix64(z: int) -> int:
    """Splitmix64 finalizer on python ints (mod 2**64)."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 array ops wrap mod 2**64, matching mix64 on scalars
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _U64_MIX1
    z ^= z >> np.uint64(27)
    z *= _U64_MIX2
    z ^= z >> np.uint64(31)
    return z


def _raw_from_counters(key: int | np.ndarray, counters: np.ndarray) -> np.ndarray:
    key_arr = np.asarray(key, dtype=np.uint64)
    c = counters.astype(np.uint64, copy=False)
    return _mix64_array(key_arr + (c + _U64_ONE) * _U64_GOLD)


def _uniform_from_raw(raw: np.ndarray) -> np.ndarray:
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


@dataclass(frozen=True)
class StreamKey:
    """Address of one random stream.

    Distinct keys yield statistically independent streams; identical keys
    yield bit-identical streams.
    """

    master_seed: int
    replica: int
    particle: int
    kind: str

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise InvalidInputError(f"unknown stream kind {self.kind!r}")

    def hash64(self) -> int:
        h = mix64(self.master_seed)
        h = mix64(h ^ (((self.replica + 1) * _GOLD) & _MASK))
        h = mix64(h ^ (((self.particle + 1) * _GOLD) & _MASK))
        h = mix64(h ^ ((KIND_CODES[self.kind] * _GOLD) & _MASK))
        return h


@dataclass
class StreamState:
    """A cursor into one counter-based stream.  Value-like: copy to fork."""

    key: int
    counter: int = 0

    def clone(self) -> "StreamState":
        return StreamState(self.key, self.counter)

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _raw_from_counters(self.key, idx)

    def uniforms(self, n: int) -> np.ndarray:
        """n uniforms in (0, 1), advancing the cursor."""
        return _uniform_from_raw(self.raw(n))

    def normals(self, n: int) -> np.ndarray:
        return ndtri(self.uniforms(n))


def derive_stream(key: StreamKey) -> StreamState:
    """Materialize the stream addressed by ``key`` at counter 0."""
    return StreamState(key.hash64())


def brownian_increment(stream: StreamState, dt: float, d1: int) -> np.ndarray:
    """One Brownian increment: N(0, dt * I) in R^d1."""
    if not dt > 0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    return stream.normals(d1) * np.sqrt(dt)


@dataclass(frozen=True)
class PoissonEvent:
    """A candidate event of a thinned Poisson stream.

    ``u`` is uniform on (0, rate_bound); the caller accepts the event iff
    ``u <= rate(state)``.  Marks are addressed lazily through
    ``mark``/``marks`` so untouched coordinates are never drawn.
    """

    time: float
    u: float
    marks_key: int
    event_index: int

    def mark(self, particle_index: int) -> float:
        return float(self.marks(np.asarray([particle_index]))[0])

    def marks(self, particle_indices: np.ndarray) -> np.ndarray:
        return marks_uniforms(self.marks_key, self.event_index, particle_indices)


def marks_uniforms(marks_key: int, event_index: int, particle_indices: np.ndarray) -> np.ndarray:
    """Mark coordinates for one event: uniform #((k << 32) | m) of the marks stream."""
    idx = np.asarray(particle_indices, dtype=np.uint64)
    counters = (np.uint64(event_index) << np.uint64(32)) | idx
    return _uniform_from_raw(_raw_from_counters(marks_key, counters))


def marks_uniforms_batch(marks_keys: np.ndarray, event_indices: np.ndarray, particle_indices: np.ndarray) -> np.ndarray:
    """Vectorized ``marks_uniforms``: one (key, event, particle) triple per row."""
    ks = np.asarray(event_indices, dtype=np.uint64)
    ms = np.asarray(particle_indices, dtype=np.uint64)
    counters = (ks << np.uint64(32)) | ms
    return _uniform_from_raw(_raw_from_counters(np.asarray(marks_keys, dtype=np.uint64), counters))


def stream_keys(master_seed: int, replicas, particles, kind: str) -> np.ndarray:
    """Vectorized ``StreamKey.hash64`` over replica/particle arrays."""
    if kind not in KIND_CODES:
        raise InvalidInputError(f"unknown stream kind {kind!r}")
    reps = np.asarray(replicas, dtype=np.uint64)
    parts = np.asarray(particles, dtype=np.uint64)
    h = np.uint64(mix64(master_seed))
    h = _mix64_array(h ^ ((reps + _U64_ONE) * _U64_GOLD))
    h = _mix64_array(h ^ ((parts + _U64_ONE) * _U64_GOLD))
    kmix = np.uint64((KIND_CODES[kind] * _GOLD) & _MASK)
    h = _mix64_array(h ^ kmix)
    return h


def next_candidate_event(
    stream: StreamState,
    t: float,
    horizon: float,
    rate_bound: float,
    marks_key: int = 0,
    event_index: int = 0,
) -> PoissonEvent | None:
    """Next candidate at bounding rate ``rate_bound``, or None past ``horizon``.

    Consumes one uniform for the inter-arrival time and, only if the
    candidate lands inside the horizon, a second one for the thinning level
    ``u``.
    """
    if not rate_bound > 0:
        raise InvalidInputError(f"rate_bound must be positive, got {rate_bound}")
    if not t < horizon:
        raise InvalidInputError("t must be before horizon")
    w = -np.log(stream.uniforms(1)[0]) / rate_bound
    tau = t + w
    if tau > horizon:
        return None
    u = stream.uniforms(1)[0] * rate_bound
    return PoissonEvent(time=float(tau), u=float(u), marks_key=marks_key, event_index=event_index)


class StreamArray:
    """Vectorized bundle of one stream per particle (same kind).

    Counters are value-like: ``snapshot``/``restore`` give exact rewind,
    which the steppers use when a sub-step is retried.
    """

    def __init__(self, keys: np.ndarray, counters: np.ndarray | None = None):
        self.keys = np.asarray(keys, dtype=np.uint64)
        n = self.keys.shape[0]
        self.counters = (
            np.zeros(n, dtype=np.uint64) if counters is None else counters.astype(np.uint64, copy=True)
        )

    @property
    def n(self) -> int:
        return self.keys.shape[0]

    def snapshot(self) -> np.ndarray:
        return self.counters.copy()

    def restore(self, snap: np.ndarray) -> None:
        self.counters = snap.copy()

    def uniforms_all(self) -> np.ndarray:
        u = _uniform_from_raw(_mix64_array(self.keys + (self.counters + _U64_ONE) * _U64_GOLD))
        self.counters += _U64_ONE
        return u

    def uniforms_at(self, idx: np.ndarray) -> np.ndarray:
        u = _uniform_from_raw(
            _mix64_array(self.keys[idx] + (self.counters[idx] + _U64_ONE) * _U64_GOLD)
        )
        self.counters[idx] += _U64_ONE
        return u

    def normals_block(self, k: int) -> np.ndarray:
        """(n, k) standard normals; each stream advances by k."""
        offs = np.arange(1, k + 1, dtype=np.uint64)
        ctr = self.counters[:, None] + offs[None, :]
        raw = _mix64_array(self.keys[:, None] + ctr * _U64_GOLD)
        self.counters += np.uint64(k)
        return ndtri(_uniform_from_raw(raw))


def stream_array(master_seed: int, replica: int, particle_ids: np.ndarray, kind: str) -> StreamArray:
    ids = np.asarray(particle_ids)
    return StreamArray(stream_keys(master_seed, np.full(len(ids), replica), ids, kind))


@dataclass
class DriverBundle:
    """Per-particle streams for one replica: Brownian, Poisson, marks, init.

    The same bundle is handed to every process of a coupled set so all of
    them consume identical drivers particle by particle.  ``cand_counts``
    tracks each particle's candidate-event counter, which addresses marks.
    """

    master_seed: int
    replica: int
    particle_ids: np.ndarray
    brownian: StreamArray = field(init=False)
    poisson: StreamArray = field(init=False)
    marks_keys: np.ndarray = field(init=False)
    init: StreamArray = field(init=False)
    cand_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        ids = np.asarray(self.particle_ids)
        self.particle_ids = ids
        reps = np.full(len(ids), self.replica)
        self.brownian = StreamArray(stream_keys(self.master_seed, reps, ids, "brownian"))
        self.poisson = StreamArray(stream_keys(self.master_seed, reps, ids, "poisson"))
        self.marks_keys = stream_keys(self.master_seed, reps, ids, "marks")
        self.init = StreamArray(stream_keys(self.master_seed, reps, ids, "init"))
        self.cand_counts = np.zeros(len(ids), dtype=np.uint64)

    @property
    def n(self) -> int:
        return len(self.particle_ids)

    def snapshot(self) -> dict:
        return {
            "brownian": self.brownian.snapshot(),
            "poisson": self.poisson.snapshot(),
            "init": self.init.snapshot(),
            "cand": self.cand_counts.copy(),
        }

    def restore(self, snap: dict) -> None:
        self.brownian.restore(snap["brownian"])
        self.poisson.restore(snap["poisson"])
        self.init.restore(snap["init"])
        self.cand_counts = snap["cand"].copy()


def make_driver_bundle(master_seed: int, replica: int, n: int, particle_ids=None) -> DriverBundle:
    ids = np.arange(n) if particle_ids is None else np.asarray(particle_ids)
    if len(ids) != n:
        raise InvalidInputError("particle_ids length must equal n")
    return DriverBundle(master_seed, replica, ids)


def collect_candidates(
    bundle: DriverBundle, t0: float, t1: float, rate_bounds: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """All candidate events in (t0, t1] across the bundle's Poisson streams.

    Per particle the stream is consumed as alternating (inter-arrival,
    thinning-level) uniforms, identically to ``next_candidate_event``.
    Returns (times, jumpers, u_levels, event_indices) sorted by time with
    ties broken by particle index.  Particles with zero bound emit nothing.
    """
    n = bundle.n
    r = np.asarray(rate_bounds, dtype=np.float64)
    times_acc: list[np.ndarray] = []
    jumps_acc: list[np.ndarray] = []
    us_acc: list[np.ndarray] = []
    ks_acc: list[np.ndarray] = []

    active = np.flatnonzero(r > 0)
    if active.size == 0:
        empty = np.empty(0)
        return empty, np.empty(0, dtype=np.int64), empty, np.empty(0, dtype=np.int64)

    cur = np.full(n, np.inf)
    w = bundle.poisson.uniforms_at(active)
    cur[active] = t0 - np.log(w) / r[active]
    live = active[cur[active] <= t1]
    while live.size > 0:
        u = bundle.poisson.uniforms_at(live) * r[live]
        k = bundle.cand_counts[live].astype(np.int64)
        bundle.cand_counts[live] += _U64_ONE
        times_acc.append(cur[live].copy())
        jumps_acc.append(live.copy())
        us_acc.append(u)
        ks_acc.append(k)
        w = bundle.poisson.uniforms_at(live)
        cur[live] = cur[live] - np.log(w) / r[live]
        live = live[cur[live] <= t1]

    if not times_acc:
        empty = np.empty(0)
        return empty, np.empty(0, dtype=np.int64), empty, np.empty(0, dtype=np.int64)

    times = np.concatenate(times_acc)
    jumpers = np.concatenate(jumps_acc)
    us = np.concatenate(us_acc)
    ks = np.concatenate(ks_acc)
    order = np.lexsort((jumpers, times))
    return times[order], jumpers[order], us[order], ks[order]
