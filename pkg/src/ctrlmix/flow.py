"""Integration of the controlled ODE  u' = V0(u) + sum_j zeta^j(t) Vj(u)  on a manifold.

The scheme is classical fourth-order Runge-Kutta with a fixed step. Every
control piece is integrated with its own whole number of equal steps (the
largest step not exceeding ``h``), so breakpoints are always step boundaries
and splitting a signal at a breakpoint reproduces the same arithmetic.
Torus coordinates are wrapped and sphere points re-projected after each step.

All the heavy lifting happens in :func:`flow_batch`, which integrates many
initial points with per-sample piece durations and amplitudes at once.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fields import VectorField, jacobian, parse_field
from .geometry import Manifold

DEFAULT_STEP = 1.0 / 256


class FlowError(RuntimeError):
    pass


@dataclass
class ControlSystem:
    """Drift ``V0`` and controlled fields ``V1..Vn`` on a manifold."""

    manifold: Manifold
    drift: VectorField
    controls: list[VectorField]

    @classmethod
    def from_exprs(cls, manifold: Manifold, drift: Sequence[str], controls: Sequence[Sequence[str]]):
        V0 = parse_field(drift, manifold, "V0")
        Vs = [parse_field(c, manifold, f"V{j + 1}") for j, c in enumerate(controls)]
        return cls(manifold, V0, Vs)

    @property
    def n(self) -> int:
        return len(self.controls)

    @property
    def fields(self) -> list[VectorField]:
        return [self.drift, *self.controls]

    def rhs(self, x: np.ndarray, amps: np.ndarray) -> np.ndarray:
        """Velocity at points ``x`` (N, D) under amplitudes ``amps`` (N, n)."""
        v = self.drift(x)
        for j, V in enumerate(self.controls):
            v = v + amps[:, j:j + 1] * V(x)
        return v

    def reversed(self) -> "ControlSystem":
        return ControlSystem(self.manifold, self.drift.scaled(-1.0), [V.scaled(-1.0) for V in self.controls])


@dataclass(frozen=True)
class ControlSignal:
    """Piecewise-constant n-channel control on ``[0, T]`` with right-open pieces."""

    breakpoints: np.ndarray
    amplitudes: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        a = np.asarray(self.amplitudes, dtype=float)
        if a.ndim == 1:
            a = a[:, None]
        if b.ndim != 1 or len(b) < 2:
            raise ValueError("need at least one piece")
        if b[0] != 0.0:
            raise ValueError("breakpoints must start at 0")
        if np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if a.shape[0] != len(b) - 1:
            raise ValueError(f"{len(b) - 1} pieces but {a.shape[0]} amplitude rows")
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite amplitudes")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "amplitudes", a)

    @classmethod
    def from_pieces(cls, durations, amplitudes) -> "ControlSignal":
        d = np.asarray(durations, dtype=float)
        return cls(np.concatenate([[0.0], np.cumsum(d)]), amplitudes)

    @classmethod
    def constant(cls, amplitude, duration: float) -> "ControlSignal":
        return cls(np.array([0.0, duration]), np.atleast_2d(np.asarray(amplitude, dtype=float)))

    @classmethod
    def zero(cls, n: int, duration: float = 1.0) -> "ControlSignal":
        return cls.constant(np.zeros(n), duration)

    @property
    def n_channels(self) -> int:
        return self.amplitudes.shape[1]

    @property
    def n_pieces(self) -> int:
        return self.amplitudes.shape[0]

    @property
    def duration(self) -> float:
        return float(self.breakpoints[-1])

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    @property
    def coefficients(self) -> np.ndarray:
        return self.amplitudes.ravel()

    def with_coefficients(self, c) -> "ControlSignal":
        return ControlSignal(self.breakpoints, np.asarray(c, dtype=float).reshape(self.amplitudes.shape))

    def __call__(self, t: float) -> np.ndarray:
        if t < 0 or t > self.duration:
            raise ValueError(f"t={t} outside [0, {self.duration}]")
        i = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return self.amplitudes[min(i, self.n_pieces - 1)]

    def then(self, other: "ControlSignal") -> "ControlSignal":
        if other.n_channels != self.n_channels:
            raise ValueError("channel count mismatch")
        return ControlSignal(np.concatenate([self.breakpoints, self.duration + other.breakpoints[1:]]),
                             np.vstack([self.amplitudes, other.amplitudes]))

    def split(self, t: float) -> tuple["ControlSignal", "ControlSignal"]:
        """Restrictions to ``[0, t]`` and ``[t, T]`` (the latter shifted to start at 0)."""
        if not 0 < t < self.duration:
            raise ValueError("split time must lie strictly inside the signal")
        b = self.breakpoints
        i = int(np.searchsorted(b, t, side="right")) - 1
        if b[i] == t:
            left = ControlSignal(b[:i + 1], self.amplitudes[:i])
        else:
            left = ControlSignal(np.concatenate([b[:i + 1], [t]]), self.amplitudes[:i + 1])
        right_b = np.concatenate([[0.0], b[i + 1:] - t])
        return left, ControlSignal(right_b, self.amplitudes[i:])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["start", "duration", *[f"zeta{j + 1}" for j in range(self.n_channels)]])
        for s, d, a in zip(self.breakpoints[:-1], self.durations, self.amplitudes):
            w.writerow([repr(float(s)), repr(float(d)), *[repr(float(v)) for v in a]])
        return buf.getvalue()


@dataclass
class Trajectory:
    times: np.ndarray
    points: np.ndarray = field(repr=False)
    step: float

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", *[f"x{i + 1}" for i in range(self.points.shape[1])]])
        for t, p in zip(self.times, self.points):
            w.writerow([repr(float(t)), *[repr(float(v)) for v in p]])
        return buf.getvalue()


def _n_steps(duration: float, h: float) -> int:
    return max(1, math.ceil(duration / h - 1e-9))


def _rk4(system: ControlSystem, x, a, s):
    k1 = system.rhs(x, a)
    k2 = system.rhs(x + (0.5 * s) * k1, a)
    k3 = system.rhs(x + (0.5 * s) * k2, a)
    k4 = system.rhs(x + s * k3, a)
    y = x + (s / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(y)):
        raise FlowError("non-finite state during integration")
    return system.manifold.project(y)


def flow_batch(system: ControlSystem, x0, durations, amplitudes, h: float = DEFAULT_STEP,
               record: bool = False):
    """Endpoints of N trajectories under piecewise-constant controls.

    ``x0``: (N, D) or (D,); ``durations``: (M,) or (N, M) piece lengths, zero
    allowed; ``amplitudes``: (M, n) or (N, M, n). Piece ``l`` is integrated
    with ``ceil(max_i durations[i, l] / h)`` equal steps per sample.
    With ``record=True`` also returns the times and the (K+1, N, D) path;
    times are only meaningful when all samples share the durations.
    """
    x = np.array(x0, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    N = x.shape[0]
    dur = np.asarray(durations, dtype=float)
    amp = np.asarray(amplitudes, dtype=float)
    if dur.ndim == 1:
        dur = np.broadcast_to(dur, (N, dur.shape[0]))
    if amp.ndim == 2:
        amp = np.broadcast_to(amp, (N,) + amp.shape)
    if dur.shape[0] != N or amp.shape[:2] != dur.shape or amp.shape[2] != system.n:
        raise ValueError(f"shape mismatch: x0 {x.shape}, durations {dur.shape}, amplitudes {amp.shape}")
    if np.any(dur < 0):
        raise ValueError("negative piece duration")
    x = system.manifold.project(x)
    times, path = [0.0], [x]
    t = 0.0
    for l in range(dur.shape[1]):
        dmax = float(dur[:, l].max())
        if dmax <= 0.0:
            continue
        k = _n_steps(dmax, h)
        s = (dur[:, l] / k)[:, None]
        a = amp[:, l, :]
        for i in range(k):
            x = _rk4(system, x, a, s)
            if record:
                times.append(t + dmax * (i + 1) / k)
                path.append(x)
        t += dmax
    if record:
        return (x[0] if single else x), np.array(times), np.stack(path)
    return x[0] if single else x


def integrate(system: ControlSystem, ctl: ControlSignal, u0, T: float | None = None,
              h: float = DEFAULT_STEP) -> Trajectory:
    """Trajectory from ``u0`` under ``ctl`` on ``[0, T]`` (``T`` defaults to the signal length)."""
    if ctl.n_channels != system.n:
        raise ValueError(f"signal has {ctl.n_channels} channels, system has {system.n}")
    if T is not None and abs(T - ctl.duration) > 1e-12:
        if T > ctl.duration:
            raise ValueError("horizon exceeds the control signal")
        ctl = ctl.split(T)[0]
    _, times, path = flow_batch(system, np.asarray(u0, dtype=float), ctl.durations, ctl.amplitudes,
                                h, record=True)
    times[-1] = ctl.duration
    return Trajectory(times, path[:, 0, :], h)


def time_one_map(system: ControlSystem, u, eta: ControlSignal, h: float = DEFAULT_STEP) -> np.ndarray:
    """The random map S(u, eta): endpoint at time 1."""
    if abs(eta.duration - 1.0) > 1e-12:
        raise ValueError(f"time-one map needs a signal of duration 1, got {eta.duration}")
    return flow_batch(system, u, eta.durations, eta.amplitudes, h)


def const_flow(system: ControlSystem, zeta, t: float, y0, h: float = DEFAULT_STEP) -> np.ndarray:
    """Flow of the extended field (V_zeta, 1) for time ``t`` from ``y0 = (u, z)``."""
    if t < 0:
        raise ValueError("flow time must be nonnegative")
    y0 = np.asarray(y0, dtype=float)
    zeta = np.atleast_1d(np.asarray(zeta, dtype=float))
    if t == 0:
        return y0.copy()
    u = flow_batch(system, y0[:-1], [t], zeta[None, :], h)
    return np.concatenate([u, [y0[-1] + t]])


def drift_flow(system: ControlSystem, u0, t: float, direction: str = "forward",
               h: float = DEFAULT_STEP) -> np.ndarray:
    """Flow of ``V0`` alone for time ``t`` (``backward`` integrates ``-V0``)."""
    if t < 0:
        raise ValueError("flow time must be nonnegative")
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    sysd = ControlSystem(system.manifold, system.drift if direction == "forward" else system.drift.scaled(-1.0), [])
    u0 = np.asarray(u0, dtype=float)
    if t == 0:
        return system.manifold.project(u0)
    n = 1 if u0.ndim == 1 else u0.shape[0]
    amps = np.zeros((1, 0)) if u0.ndim == 1 else np.zeros((n, 1, 0))
    return flow_batch(sysd, u0, [t], amps, h)


def d_eta_S(system: ControlSystem, u, eta: ControlSignal, step: float = 1e-5, basis=None,
            h: float = DEFAULT_STEP) -> np.ndarray:
    """Derivative of the endpoint map with respect to the signal's coefficients.

    Central differences with the given step. By default the coefficients are
    the piece amplitudes (row-major, piece then channel); ``basis`` (P x K)
    maps K coefficients to amplitude perturbations instead. The result is
    d x K in the chart at the endpoint.
    """
    amps = eta.amplitudes
    P = amps.size
    B = np.eye(P) if basis is None else np.asarray(basis, dtype=float)
    K = B.shape[1]
    pert = np.concatenate([B.T, -B.T]) * step
    batch = np.concatenate([amps.ravel()[None, :], amps.ravel()[None, :] + pert]).reshape(
        (2 * K + 1,) + amps.shape)
    u = np.asarray(u, dtype=float)
    ends = flow_batch(system, np.broadcast_to(u, (2 * K + 1, u.shape[-1])), eta.durations, batch, h)
    M = system.manifold
    base = ends[0]
    plus = M.difference(ends[1:K + 1], base)
    minus = M.difference(ends[K + 1:], base)
    return ((plus - minus) / (2.0 * step)).T


def variational_d_eta_S(system: ControlSystem, u, eta: ControlSignal, h: float = DEFAULT_STEP) -> np.ndarray:
    """Same derivative as :func:`d_eta_S` from the linearised equation (torus only).

    Integrates ``x' = V_zeta(x)`` together with ``J' = DV_zeta(x) J + B(t)``
    where ``B`` injects ``Vj(x)`` into the column of the active piece.
    """
    M = system.manifold
    if M.ambient_dim != M.dim:
        raise NotImplementedError("variational derivative implemented for intrinsic coordinates only")
    d, n = M.dim, system.n
    P = eta.amplitudes.size
    x = np.asarray(u, dtype=float).copy()
    J = np.zeros((d, P))

    def rhs(x, J, a, piece):
        V = system.drift(x) + sum(a[j] * system.controls[j](x) for j in range(n))
        A = jacobian(system.drift, x) + sum(a[j] * jacobian(system.controls[j], x) for j in range(n))
        dJ = A @ J
        for j in range(n):
            dJ[:, piece * n + j] += system.controls[j](x)
        return V, dJ

    for piece, (dur, a) in enumerate(zip(eta.durations, eta.amplitudes)):
        k = _n_steps(dur, h)
        s = dur / k
        for _ in range(k):
            k1 = rhs(x, J, a, piece)
            k2 = rhs(x + 0.5 * s * k1[0], J + 0.5 * s * k1[1], a, piece)
            k3 = rhs(x + 0.5 * s * k2[0], J + 0.5 * s * k2[1], a, piece)
            k4 = rhs(x + s * k3[0], J + s * k3[1], a, piece)
            x = x + s / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            J = J + s / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return J
