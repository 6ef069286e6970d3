"""The Markov chain u_k = S(u_{k-1}, eta_k), histogram kernels and condition estimates.

All measures live on a fixed :class:`~ctrlmix.geometry.CellPartition`, so
total variation between histograms is half the L1 distance of cell masses.
On a partition this is a lower bound for the TV of the underlying laws.

Certification is conservative: frequencies are replaced by 95% lower
confidence bounds before being compared with zero.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .flow import DEFAULT_STEP, ControlSystem, flow_batch
from .geometry import CellPartition
from .noise import NoiseLaw

Z95 = 1.959963984540054


@dataclass
class HistogramMeasure:
    """Cell masses on a partition; ``counts`` keeps the integer sample counts when known."""

    partition: CellPartition
    masses: np.ndarray
    n_samples: int = 0
    counts: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if m.shape != (self.partition.n_cells,):
            raise ValueError("one mass per cell required")
        if np.any(m < 0) or abs(m.sum() - 1.0) > 1e-12:
            raise ValueError("masses must be nonnegative and sum to 1")
        self.masses = m

    @classmethod
    def from_points(cls, partition: CellPartition, points) -> "HistogramMeasure":
        return cls.from_counts(partition, partition.counts(np.atleast_2d(points)))

    @classmethod
    def from_counts(cls, partition: CellPartition, counts) -> "HistogramMeasure":
        c = np.asarray(counts, dtype=np.int64)
        if np.any(c < 0) or c.sum() == 0:
            raise ValueError("counts must be nonnegative with a positive total")
        return cls(partition, c / c.sum(), int(c.sum()), c)

    @property
    def density(self) -> np.ndarray:
        return self.masses / self.partition.volumes


def tv(a, b) -> float:
    """Total variation between two mass vectors: half their L1 distance (order-independent sum)."""
    d = np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))
    return 0.5 * math.fsum(d.ravel())


def tv_counts(c1, c2) -> float:
    """Total variation between two histograms given by integer counts.

    Computed exactly in integer arithmetic with a single rounding at the end,
    so merging cells can never increase the returned value.
    """
    c1 = np.asarray(c1, dtype=np.int64)
    c2 = np.asarray(c2, dtype=np.int64)
    if c1.shape != c2.shape:
        raise ValueError("count vectors of different lengths")
    n1, n2 = int(c1.sum()), int(c2.sum())
    if n1 <= 0 or n2 <= 0:
        raise ValueError("empty histogram")
    num = sum(abs(int(x) * n2 - int(y) * n1) for x, y in zip(c1.tolist(), c2.tolist()))
    return num / (2 * n1 * n2)


def tv_distance(h1: HistogramMeasure, h2: HistogramMeasure) -> float:
    if not h1.partition.same_as(h2.partition):
        raise ValueError("histograms live on different partitions")
    if h1.counts is not None and h2.counts is not None:
        return tv_counts(h1.counts, h2.counts)
    return tv(h1.masses, h2.masses)


def overlap(a, b) -> float:
    return float(np.sum(np.minimum(a, b)))


def merge_cells(masses, mapping, n_groups: int) -> np.ndarray:
    """Image of a mass (or count) vector under a cell-merging map ``cell -> group``."""
    x = np.asarray(masses)
    if np.issubdtype(x.dtype, np.integer):
        out = np.zeros(n_groups, dtype=np.int64)
        np.add.at(out, np.asarray(mapping), x)
        return out
    return np.bincount(np.asarray(mapping), weights=x.astype(float), minlength=n_groups)


def wilson_lower(k, n, z: float = Z95):
    """Lower end of the Wilson score interval for a binomial proportion."""
    k = np.asarray(k, dtype=float)
    p = k / n
    den = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    hw = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    # k = 0 has lower end exactly 0; rounding would otherwise leave a tiny positive value
    return np.where(k > 0, np.maximum(centre - hw, 0.0), 0.0)


def tv_halfwidth(n1: int, n2: int, alpha: float = 0.05) -> float:
    """One-sided deviation bound for the empirical TV between two histograms.

    Changing one sample moves the empirical TV by at most 1/n, so McDiarmid's
    inequality gives the returned half-width at level ``alpha``.
    """
    return math.sqrt(0.5 * math.log(1.0 / alpha) * (1.0 / n1 + 1.0 / n2))


# -- simulation ----------------------------------------------------------------

def step_batch(system: ControlSystem, x, law: NoiseLaw, rng: np.random.Generator,
               h: float = DEFAULT_STEP) -> np.ndarray:
    """One step of the chain for every row of ``x``, each with its own noise draw."""
    x = np.atleast_2d(x)
    amps = law.sample_amplitudes(rng, x.shape[0])
    return flow_batch(system, x, law.durations, amps, h)


def propagate(system: ControlSystem, x0, m: int, law: NoiseLaw, rng: np.random.Generator,
              h: float = DEFAULT_STEP) -> np.ndarray:
    x = system.manifold.project(np.atleast_2d(np.asarray(x0, dtype=float)))
    for _ in range(m):
        x = step_batch(system, x, law, rng, h)
    return x


def simulate_chain(system: ControlSystem, u0, K: int, law: NoiseLaw, rng: np.random.Generator,
                   h: float = DEFAULT_STEP) -> np.ndarray:
    """Path ``u_0..u_K`` of a single chain, shape (K+1, D)."""
    if K < 0:
        raise ValueError("K must be >= 0")
    path = [system.manifold.project(np.asarray(u0, dtype=float))]
    for _ in range(K):
        path.append(step_batch(system, path[-1], law, rng, h)[0])
    return np.array(path)


def empirical_kernel(system: ControlSystem, u, m: int, N: int, partition: CellPartition, law: NoiseLaw,
                     rng: np.random.Generator, h: float = DEFAULT_STEP) -> HistogramMeasure:
    """Histogram of ``m``-step endpoints of ``N`` independent chains started at ``u``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    x0 = np.broadcast_to(np.asarray(u, dtype=float), (N, system.manifold.ambient_dim))
    return HistogramMeasure.from_points(partition, propagate(system, x0, m, law, rng, h))


def _endpoints_per_start(system, starts, m, N, law, stage, h, workers):
    """m-step endpoints of N chains from each start; start i draws from stream (stage, i)."""
    def task(i):
        rng = law.stream(stage, i)
        x0 = np.broadcast_to(starts[i], (N, starts.shape[1]))
        return propagate(system, x0, m, law, rng, h)

    idx = range(len(starts))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(task, idx))
    return [task(i) for i in idx]


# -- condition estimates ----------------------------------------------------------

@dataclass
class ConditionEstimate:
    name: str
    value: float          # certified lower bound (point estimate minus half-width)
    estimate: float
    half_width: float
    params: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    @property
    def certified(self) -> bool:
        return self.value > 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["certified"] = self.certified
        return d


STAGE_RECURRENCE, STAGE_COUPLING, STAGE_MINORIZATION, STAGE_PAIRS = 1, 2, 3, 4


def estimate_recurrence(system: ControlSystem, u_hat, delta: float, m: int, G: int, N: int,
                        law: NoiseLaw, h: float = DEFAULT_STEP, workers: int = 1) -> ConditionEstimate:
    """Lower bound p for P_m(u, B(u_hat, delta)) uniformly over a G^d grid of starts."""
    if delta <= 0 or m < 1:
        raise ValueError("need delta > 0 and m >= 1")
    M = system.manifold
    u_hat = M.project(np.asarray(u_hat, dtype=float))
    starts = M.grid(G)
    ends = _endpoints_per_start(system, starts, m, N, law, STAGE_RECURRENCE, h, workers)
    hits = np.array([int(np.sum(M.dist(e, u_hat) <= delta)) for e in ends])
    lower = wilson_lower(hits, N)
    i = int(np.argmin(hits))
    spacing = (M.period if hasattr(M, "period") else math.pi * M.radius) / G
    p_hat = hits[i] / N
    return ConditionEstimate(
        "recurrence", float(lower[i]), float(p_hat), float(p_hat - lower[i]),
        params=dict(u_hat=u_hat.tolist(), delta=delta, m=m, grid=G, samples=N),
        details=dict(worst_start=starts[i].tolist(), hits=hits.tolist(),
                     grid_spacing=spacing, spacing_within_quarter_delta=bool(spacing <= delta / 4)))


def estimate_coupling(system: ControlSystem, u_hat, delta: float, pairs, N: int, partition: CellPartition,
                      law: NoiseLaw, h: float = DEFAULT_STEP, workers: int = 1) -> ConditionEstimate:
    """Lower bound eps for the overlap 1 - TV(P_1(u,.), P_1(u',.)) over pairs in B(u_hat, delta).

    ``pairs`` is either a count (pairs drawn uniformly in the ball, the first
    one replaced by two opposite boundary points) or an array (P, 2, D).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    M = system.manifold
    u_hat = M.project(np.asarray(u_hat, dtype=float))
    if np.ndim(pairs) == 0:
        P = int(pairs)
        rng = law.stream(STAGE_PAIRS)
        pts = M.sample_ball(u_hat, delta, rng, 2 * P).reshape(P, 2, -1)
        e = np.zeros(M.dim)
        e[0] = delta * (1 - 1e-9)
        pts[0, 0] = M.exp(u_hat, e)
        pts[0, 1] = M.exp(u_hat, -e)
    else:
        pts = np.asarray(pairs, dtype=float)
        P = pts.shape[0]
    starts = pts.reshape(2 * P, -1)
    ends = _endpoints_per_start(system, starts, 1, N, law, STAGE_COUPLING, h, workers)
    hists = [partition.counts(e) / N for e in ends]
    ov = np.array([overlap(hists[2 * k], hists[2 * k + 1]) for k in range(P)])
    hw = tv_halfwidth(N, N)
    i = int(np.argmin(ov))
    return ConditionEstimate(
        "coupling", float(ov[i] - hw), float(ov[i]), hw,
        params=dict(u_hat=u_hat.tolist(), delta=delta, pairs=P, samples=N, mesh=partition.resolution),
        details=dict(overlaps=ov.tolist(), worst_pair=pts[i].tolist()))


def estimate_minorization(system: ControlSystem, u_hat, delta: float, partition: CellPartition, N: int,
                          law: NoiseLaw, spacing: float | None = None, h: float = DEFAULT_STEP,
                          workers: int = 1) -> ConditionEstimate:
    """Common density lower bound of S(u, .)_* law over a grid of u in B(u_hat, delta).

    Per start and cell the density bound is the Wilson lower bound of the
    cell frequency divided by the cell volume; the cell maximising the
    minimum over starts is reported as ``x_hat``.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    M = system.manifold
    u_hat = M.project(np.asarray(u_hat, dtype=float))
    starts = M.ball_grid(u_hat, delta, spacing or delta / 2)
    ends = _endpoints_per_start(system, starts, 1, N, law, STAGE_MINORIZATION, h, workers)
    counts = np.array([partition.counts(e) for e in ends])
    vol = partition.volumes
    dens_lower = wilson_lower(counts, N) / vol
    dens_point = counts / N / vol
    common = dens_lower.min(axis=0)
    j = int(np.argmax(common))
    est = float(dens_point[:, j].min())
    return ConditionEstimate(
        "minorization", float(common[j]), est, est - float(common[j]),
        params=dict(u_hat=u_hat.tolist(), delta=delta, samples=N, mesh=partition.resolution,
                    starts=len(starts)),
        details=dict(x_hat_cell=j, x_hat=partition.centers[j].tolist(), cell_volume=float(vol[j])))
