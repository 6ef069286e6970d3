"""Contraction certificates for Markov chains in total variation.

If P_m(u, B) >= p for every start u and the one-step kernels from any two
points of B overlap by at least eps, then the (m+1)-step dual operator is a
contraction with factor q = 1 - eps * p^2. Iterating gives

    TV(P_k^* lam, mu) <= q^floor(k / (m+1)) <= (1/q) exp(-gamma k),
    gamma = -ln(q) / (m+1),

which is where the constant C = 1/q comes from (TV never exceeds 1).

:func:`finite_oracle` checks all of this exactly on finite state spaces;
:func:`end_to_end_mixing` confronts a Monte-Carlo certificate with simulated
decay on a manifold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .flow import DEFAULT_STEP, ControlSystem
from .geometry import CellPartition
from .markov import (ConditionEstimate, HistogramMeasure, propagate, tv,
                     tv_halfwidth)
from .noise import NoiseLaw

STAGE_MIXING = 5


class NotCertified(ValueError):
    pass


# -- decomposition ----------------------------------------------------------------

@dataclass
class Decomposition:
    d: float
    nu: np.ndarray
    lam_hat: np.ndarray
    lam2_hat: np.ndarray


def decompose_pair(lam, lam2) -> Decomposition:
    """Write lam = (1-d) nu + d lam_hat and lam2 = (1-d) nu + d lam2_hat with d = TV.

    nu is the normalised overlap min(lam, lam2). Each part is divided by its
    own mass rather than by 1 - d or d, so rounding never leaves a part that
    fails to be a probability vector. For d = 0 all three parts equal lam;
    for disjoint supports d = 1 and nu is set to lam (its weight is zero).
    """
    a = lam.masses if isinstance(lam, HistogramMeasure) else np.asarray(lam, dtype=float)
    b = lam2.masses if isinstance(lam2, HistogramMeasure) else np.asarray(lam2, dtype=float)
    if a.shape != b.shape:
        raise ValueError("measures on different partitions")
    common = np.minimum(a, b)
    ra, rb = a - common, b - common
    sa, sb, sc = ra.sum(), rb.sum(), common.sum()
    if sa == 0.0 or sb == 0.0:
        return Decomposition(0.0, a.copy(), a.copy(), a.copy())
    if sc == 0.0:
        return Decomposition(1.0, a.copy(), a.copy(), b.copy())
    return Decomposition(tv(a, b), common / sc, ra / sa, rb / sb)


# -- certificate ------------------------------------------------------------------

@dataclass
class MixingCertificate:
    p: float
    eps: float
    m: int
    q: float
    gamma: float
    C: float
    u_hat: list | None = None
    delta: float | None = None
    provenance: dict = field(default_factory=dict)

    def bound(self, k) -> np.ndarray:
        """q^floor(k/(m+1)), the bound the contraction gives directly."""
        k = np.asarray(k)
        return np.power(self.q, np.floor_divide(k, self.m + 1)).astype(float)

    def envelope(self, k) -> np.ndarray:
        """C exp(-gamma k); infinite gamma (q = 0) falls back to :meth:`bound`."""
        if self.q == 0.0:
            return self.bound(k)
        return self.C * np.exp(-self.gamma * np.asarray(k, dtype=float))

    def to_dict(self) -> dict:
        def num(x):
            return "inf" if isinstance(x, float) and math.isinf(x) else x
        return dict(u_hat=self.u_hat, delta=self.delta, m=self.m, p=self.p, eps=self.eps,
                    q=self.q, gamma=num(self.gamma), C=num(self.C), provenance=dict(self.provenance))


def contraction_certificate(p: float, eps: float, m: int, u_hat=None, delta=None,
                            provenance: dict | None = None) -> MixingCertificate:
    """q = 1 - eps p^2, gamma = -ln(q)/(m+1), C = 1/q."""
    if not (p > 0 and eps > 0):
        raise NotCertified(f"not certified: p={p}, eps={eps}")
    if p > 1 or eps > 1 or m < 1:
        raise ValueError("need p, eps in (0, 1] and m >= 1")
    q = 1.0 - eps * p * p
    if q == 0.0:
        gamma, C = math.inf, math.inf
    else:
        gamma, C = -math.log(q) / (m + 1), 1.0 / q
    return MixingCertificate(float(p), float(eps), int(m), q, gamma, C,
                             None if u_hat is None else list(np.asarray(u_hat, dtype=float)),
                             delta, dict(provenance or {}))


# -- rate fitting -----------------------------------------------------------------

@dataclass
class RateFit:
    gamma: float
    C: float
    r2: float
    n_used: int
    floor: float

    @property
    def mixing_detected(self) -> bool:
        return self.gamma > 0.0

    def to_dict(self) -> dict:
        return dict(gamma=self.gamma, C=self.C, r2=self.r2, n_used=self.n_used, floor=self.floor,
                    mixing_detected=self.mixing_detected)


def fit_mixing_rate(series: Sequence[tuple[float, float]], floor: float = 0.0) -> RateFit:
    """Least-squares fit of log TV = log C - gamma k over the points above ``floor``."""
    arr = np.asarray(series, dtype=float).reshape(-1, 2)
    if np.any(arr[:, 1] < 0):
        raise ValueError("negative TV value in series")
    use = arr[arr[:, 1] > floor]
    if np.any(use[:, 1] <= 0):
        raise ValueError("nonpositive TV value above the floor")
    if len(use) < 4:
        raise ValueError(f"only {len(use)} points above the noise floor {floor:g}; need 4")
    k, y = use[:, 0], np.log(use[:, 1])
    A = np.column_stack([np.ones_like(k), k])
    (logC, slope), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([logC, slope])
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res < 1e-24 else 0.0)
    gamma = -float(slope)
    if abs(gamma) < 1e-12:
        gamma = 0.0
    return RateFit(gamma, float(math.exp(logC)), r2, len(use), float(floor))


# -- exact finite-state oracle --------------------------------------------------------

@dataclass
class FiniteChain:
    P: np.ndarray
    u_hat: int
    delta_set: Sequence[int]
    m: int = 1

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("transition matrix must be square")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("rows must be probability vectors")
        if self.u_hat not in self.delta_set:
            raise ValueError("u_hat must belong to its delta-neighbourhood")
        self.P = P
        self.delta_set = sorted(int(i) for i in self.delta_set)

    @property
    def states(self) -> int:
        return self.P.shape[0]


def random_chain(s: int, rng: np.random.Generator, min_entry: float = 0.05, m: int = 1,
                 delta_size: int | None = None) -> FiniteChain:
    """Random chain whose entries are all >= ``min_entry`` (so both conditions hold)."""
    if s * min_entry >= 1:
        raise ValueError("min_entry too large for the state count")
    P = min_entry + (1.0 - s * min_entry) * rng.dirichlet(np.ones(s), size=s)
    P /= P.sum(axis=1, keepdims=True)
    u_hat = int(rng.integers(s))
    k = delta_size or int(rng.integers(1, s + 1))
    others = [i for i in rng.permutation(s) if i != u_hat][:k - 1]
    return FiniteChain(P, u_hat, [u_hat, *others], m)


def stationary(P: np.ndarray, tol: float = 1e-14, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary law by power iteration from the uniform law."""
    mu = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(max_iter):
        nxt = mu @ P
        nxt /= nxt.sum()
        if np.sum(np.abs(nxt - mu)) < tol:
            return nxt
        mu = nxt
    return mu


@dataclass
class OracleReport:
    p: float
    eps: float
    recurrence_met: bool
    coupling_met: bool
    certificate: MixingCertificate | None
    mu: np.ndarray
    contraction_checks: int = 0
    contraction_violations: int = 0
    decay_checks: int = 0
    decay_violations: int = 0
    monotone_violations: int = 0

    @property
    def ok(self) -> bool:
        return (self.recurrence_met and self.coupling_met and self.contraction_violations == 0
                and self.decay_violations == 0 and self.monotone_violations == 0)

    @property
    def status(self) -> str:
        unmet = [name for name, met in (("recurrence", self.recurrence_met), ("coupling", self.coupling_met))
                 if not met]
        if unmet:
            return "; ".join(f"{name} unmet" for name in unmet)
        return "ok" if self.ok else "violations found"


def finite_oracle(chain: FiniteChain, K: int = 200, trials: int = 100, rng: np.random.Generator | None = None,
                  tol: float = 1e-12) -> OracleReport:
    """Exact check of the contraction and decay bounds on a finite chain."""
    rng = rng if rng is not None else np.random.default_rng(0)
    P, m = chain.P, chain.m
    Pm = np.linalg.matrix_power(P, m)
    ds = chain.delta_set
    p = float(Pm[:, ds].sum(axis=1).min())
    worst = max((tv(P[i], P[j]) for i in ds for j in ds), default=0.0)
    eps = 1.0 - worst
    mu = stationary(P)
    rec_ok, cpl_ok = p > 0.0, eps > 0.0
    if not (rec_ok and cpl_ok):
        return OracleReport(p, eps, rec_ok, cpl_ok, None, mu)
    cert = contraction_certificate(min(p, 1.0), min(eps, 1.0), m, provenance=dict(p="exact", eps="exact"))

    s = chain.states
    lam = rng.dirichlet(np.ones(s), size=trials)
    lam2 = rng.dirichlet(np.ones(s), size=trials)
    # half the pairs start from point masses, the extreme case for TV
    half = trials // 2
    lam[:half] = np.eye(s)[rng.integers(s, size=half)]
    lam2[:half] = np.eye(s)[rng.integers(s, size=half)]

    Pm1 = np.linalg.matrix_power(P, m + 1)
    before = 0.5 * np.abs(lam - lam2).sum(axis=1)
    after = 0.5 * np.abs(lam @ Pm1 - lam2 @ Pm1).sum(axis=1)
    c_viol = int(np.sum(after > cert.q * before + tol))

    starts = np.vstack([lam, lam2])
    env = cert.envelope(np.arange(K + 1))
    d_viol = mono_viol = 0
    x = starts.copy()
    prev = None
    for k in range(K + 1):
        dist = 0.5 * np.abs(x - mu).sum(axis=1)
        d_viol += int(np.sum(dist > env[k] + tol))
        if prev is not None:
            mono_viol += int(np.sum(dist > prev + tol))
        prev = dist
        x = x @ P
    return OracleReport(p, eps, True, True, cert, mu, trials, c_viol, len(starts) * (K + 1), d_viol, mono_viol)


# -- Monte-Carlo pipeline ----------------------------------------------------------

def tv_noise_level(mu, n1: int, n2: int) -> float:
    """Expected empirical TV between two independent samples of sizes n1, n2 of the same law mu."""
    mu = np.asarray(mu, dtype=float)
    sd = np.sqrt(mu * (1.0 - mu) * (1.0 / n1 + 1.0 / n2))
    return 0.5 * math.sqrt(2.0 / math.pi) * float(sd.sum())


@dataclass
class MixingReport:
    certificate: MixingCertificate
    tv_series: list
    fit: RateFit | None
    contraction_tv: float
    contraction_bound: float
    floor: float

    @property
    def contraction_ok(self) -> bool:
        return self.contraction_tv <= self.contraction_bound


def end_to_end_mixing(system: ControlSystem, law: NoiseLaw, recurrence: ConditionEstimate,
                      coupling: ConditionEstimate, starts, N: int, K: int, partition: CellPartition,
                      pool_steps: int = 5, h: float = DEFAULT_STEP, floor: float | None = None) -> MixingReport:
    """Certificate from the estimates plus the empirical decay from point-mass starts.

    N chains are run from every start for K steps. The reference law is the
    histogram pooled over all chains and the last ``pool_steps`` steps; the
    series is the worst TV over starts at each k. The first two starts also
    give the empirical (m+1)-step contraction, checked against
    q * TV + 3 * half-width.
    """
    m = int(recurrence.params["m"])
    cert = contraction_certificate(
        recurrence.value, coupling.value, m, recurrence.params.get("u_hat"), recurrence.params.get("delta"),
        provenance=dict(p="estimated", eps="estimated"))
    M = system.manifold
    starts = M.project(np.atleast_2d(np.asarray(starts, dtype=float)))
    if K < max(m + 1, pool_steps):
        raise ValueError("horizon too short")
    hist = np.zeros((len(starts), K + 1, partition.n_cells))
    pooled = np.zeros(partition.n_cells)
    for i, u in enumerate(starts):
        rng = law.stream(STAGE_MIXING, i)
        x = np.broadcast_to(u, (N, M.ambient_dim))
        for k in range(K + 1):
            c = partition.counts(x)
            hist[i, k] = c / N
            if k > K - pool_steps:
                pooled += c
            if k < K:
                x = propagate(system, x, 1, law, rng, h)
    mu = pooled / pooled.sum()
    n_pool = int(pooled.sum())
    if floor is None:
        floor = 2.0 * tv_noise_level(mu, N, n_pool)
    series = [(k, max(tv(hist[i, k], mu) for i in range(len(starts)))) for k in range(K + 1)]
    try:
        fit = fit_mixing_rate(series, floor)
    except ValueError:
        fit = None
    before = tv(hist[0, 0], hist[1, 0]) if len(starts) > 1 else 0.0
    after = tv(hist[0, m + 1], hist[1, m + 1]) if len(starts) > 1 else 0.0
    bound = cert.q * before + 3.0 * tv_halfwidth(N, N)
    return MixingReport(cert, series, fit, after, bound, floor)
