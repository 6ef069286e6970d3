"""Exact and approximate controllability constructions.

A Krener frame is a tuple of constant controls zeta_0..zeta_d whose composed
flows, viewed as a function of the piece durations alpha, embed a box of
durations into the extended space X x R (the last coordinate is elapsed
time). Cutting the box with the hyperplane sum(alpha) = tau and inverting by
Newton's method gives controls g(v) of duration tau that reach every target v
of a ball exactly; following them with the drift flow psi for the remaining
time gives f(v) = g(psi^-1(v)) of duration 1.

All derivatives with respect to durations or coefficients are central
differences of the batched integrator, taken in one chart per frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow import DEFAULT_STEP, ControlSignal, ControlSystem, d_eta_S, drift_flow, flow_batch
from .noise import NoiseLaw

DEFAULT_TAU = 0.6
TRANSVERSAL_TOL = 1e-6
DET_TOL = 1e-8
BOX_HALF_WIDTH = 0.5
BOX_SHRINK = 0.5
MAX_SHRINKS = 20
GRID_PER_AXIS = 8
NEWTON_MAX_ITER = 50
NEWTON_HALVINGS = 8
NEWTON_TOL = 1e-8
FD_STEP = 1e-6
APPROACH_CANDIDATES = 64


class ControlError(RuntimeError):
    pass


def _chart_diff(M, p, base, cid: int) -> np.ndarray:
    d = M.to_chart(p, cid) - M.to_chart(base, cid)
    return M.wrap(d) if hasattr(M, "wrap") else d


def _ends(system: ControlSystem, u, zetas, alphas, h: float) -> np.ndarray:
    """Endpoints from ``u`` under pieces ``zetas`` for each row of durations ``alphas``."""
    alphas = np.atleast_2d(alphas)
    x0 = np.broadcast_to(u, (alphas.shape[0], u.shape[-1]))
    return flow_batch(system, x0, alphas, np.asarray(zetas, dtype=float), h)


def _ext_jacobians(system: ControlSystem, u, zetas, alphas, cid: int, h: float,
                   step: float = FD_STEP) -> tuple[np.ndarray, np.ndarray]:
    """Endpoints (G, D) and extended Jacobians (G, d+1, L) at each row of ``alphas``."""
    alphas = np.atleast_2d(alphas)
    G, L = alphas.shape
    E = np.eye(L) * step
    batch = np.concatenate([alphas, (alphas[:, None, :] + E).reshape(-1, L),
                            (alphas[:, None, :] - E).reshape(-1, L)])
    ends = _ends(system, u, zetas, batch, h)
    base, plus, minus = ends[:G], ends[G:G + G * L], ends[G + G * L:]
    M = system.manifold
    rep = np.repeat(base, L, axis=0)
    dp = _chart_diff(M, plus, rep, cid) - _chart_diff(M, minus, rep, cid)
    J = (dp / (2 * step)).reshape(G, L, -1).transpose(0, 2, 1)
    return base, np.concatenate([J, np.ones((G, 1, L))], axis=1)


# -- frames ---------------------------------------------------------------------

@dataclass
class KrenerFrame:
    system: ControlSystem = field(repr=False)
    u_hat: np.ndarray
    zetas: np.ndarray             # (d+1, n)
    lower: np.ndarray             # a_l
    upper: np.ndarray             # b_l
    alpha_hat: np.ndarray
    jacobian: np.ndarray          # extended Jacobian at alpha_hat
    min_det: float
    lipschitz: float
    center: np.ndarray            # R_tau(alpha_hat)
    radius: float                 # certified ball around ``center`` inside R_tau(box)
    chart: int
    h: float = DEFAULT_STEP

    @property
    def tau(self) -> float:
        return float(self.alpha_hat.sum())

    @property
    def dim(self) -> int:
        return self.system.manifold.dim

    @property
    def condition(self) -> float:
        return float(np.linalg.cond(self.jacobian))

    def in_box(self, alpha, slack: float = 0.0) -> bool:
        return bool(np.all(alpha >= self.lower - slack) and np.all(alpha <= self.upper + slack))

    def endpoint(self, alpha) -> np.ndarray:
        return _ends(self.system, self.u_hat, self.zetas, alpha, self.h)[0]

    def to_dict(self) -> dict:
        return dict(u_hat=self.u_hat.tolist(), zetas=self.zetas.tolist(), lower=self.lower.tolist(),
                    upper=self.upper.tolist(), alpha_hat=self.alpha_hat.tolist(), tau=self.tau,
                    min_det=self.min_det, condition=self.condition, lipschitz=self.lipschitz,
                    center=self.center.tolist(), radius=self.radius)


def _candidates(n: int, rng: np.random.Generator):
    yield np.zeros(n)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        yield e
        yield -e
    while True:
        yield rng.standard_normal(n)


def _slice_basis(L: int) -> np.ndarray:
    """Orthonormal basis (L x L-1) of the hyperplane sum(alpha) = 0."""
    _, _, vt = np.linalg.svd(np.ones((1, L)))
    return vt[1:].T


def _directions(k: int, rng: np.random.Generator, count: int = 64) -> np.ndarray:
    if k == 1:
        return np.array([[1.0], [-1.0]])
    if k == 2:
        a = np.linspace(0, 2 * np.pi, count, endpoint=False)
        return np.column_stack([np.cos(a), np.sin(a)])
    r = rng.standard_normal((count, k))
    return np.vstack([np.eye(k), -np.eye(k), r / np.linalg.norm(r, axis=1, keepdims=True)])


def build_frame(system: ControlSystem, u_hat, rng: np.random.Generator | None = None, max_tries: int = 100,
                tau: float = DEFAULT_TAU, h: float = DEFAULT_STEP) -> KrenerFrame:
    """Greedy Krener frame at ``u_hat`` with a validated duration box.

    Candidates are tried in the order 0, e_1, -e_1, ..., e_n, -e_n, then
    standard Gaussians; ``max_tries`` bounds the candidates per stage. The
    box is alpha_hat * (1 -+ s) with alpha_hat = tau / (d+1), halving s until
    the extended Jacobian determinant stays above 1e-8 on an 8^(d+1) grid.
    Expects the weak Hormander condition at ``u_hat``; without it no
    transversal candidate exists and the search runs out of tries.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    M = system.manifold
    u = M.project(np.asarray(u_hat, dtype=float))
    d, n = M.dim, system.n
    L = d + 1
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    alpha_hat = np.full(L, tau / L)
    cid = M.chart_id(u)

    zetas = [np.zeros(n)]
    for j in range(1, L):
        pre = np.array(zetas)
        q, J = _ext_jacobians(system, u, pre, alpha_hat[:j], cid, h)
        q, J = q[0], J[0]
        Q, _ = np.linalg.qr(J)
        profile = None
        for tries, zeta in enumerate(_candidates(n, rng)):
            if tries >= max_tries:
                raise ControlError(f"frame stage {j}: {max_tries} candidates tried, none transversal; "
                                   f"last singular values {np.round(profile, 12).tolist()}")
            v = system.rhs(q[None, :], zeta[None, :])[0]
            w = np.append(M.pushforward(q, v, cid), 1.0)
            w /= np.linalg.norm(w)
            r = w - Q @ (Q.T @ w)
            profile = np.linalg.svd(np.column_stack([J, w]), compute_uv=False)
            if np.linalg.norm(r) > TRANSVERSAL_TOL:
                zetas.append(zeta)
                break
    zetas = np.array(zetas)

    s = BOX_HALF_WIDTH
    for _ in range(MAX_SHRINKS + 1):
        lo, hi = alpha_hat * (1 - s), alpha_hat * (1 + s)
        axes = [np.linspace(a, b, GRID_PER_AXIS) for a, b in zip(lo, hi)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, L)
        _, Js = _ext_jacobians(system, u, zetas, grid, cid, h)
        dets = np.abs(np.linalg.det(Js))
        if dets.min() > DET_TOL:
            break
        s *= BOX_SHRINK
    else:
        raise ControlError(f"duration box shrunk {MAX_SHRINKS} times, min |det| still {dets.min():.3g}")
    if hi.sum() >= 1:
        raise ControlError("box violates sum(b_l) < 1")
    lipschitz = float(max(np.linalg.norm(np.linalg.inv(Jg), 2) for Jg in Js))

    center, J0 = _ext_jacobians(system, u, zetas, alpha_hat, cid, h)
    center = center[0]
    # largest ball around the centre whose boundary image stays clear: rays in the slice
    P = _slice_basis(L)
    dirs = _directions(d, rng) @ P.T
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(dirs > 0, (hi - alpha_hat) / dirs, np.inf)
        dn = np.where(dirs < 0, (lo - alpha_hat) / dirs, np.inf)
    t = np.minimum(up.min(axis=1), dn.min(axis=1))
    rim = _ends(system, u, zetas, alpha_hat + t[:, None] * dirs, h)
    radius = 0.5 * float(M.dist(rim, center).min())
    return KrenerFrame(system, u, zetas, lo, hi, alpha_hat, J0[0], float(dets.min()), lipschitz,
                       center, radius, cid, h)


def alpha_to_control(frame: KrenerFrame, alpha) -> ControlSignal:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != frame.alpha_hat.shape or not frame.in_box(alpha, 1e-12):
        raise ControlError(f"durations {alpha.tolist()} outside the frame box")
    return ControlSignal.from_pieces(alpha, frame.zetas)


# -- exact controls ----------------------------------------------------------------

@dataclass
class NewtonResult:
    alpha: np.ndarray
    iterations: int
    residual: float


def solve_durations(frame: KrenerFrame, v) -> NewtonResult:
    """Newton on the slice sum(alpha) = tau for R_tau(alpha) = v, from alpha_hat."""
    sysm, M = frame.system, frame.system.manifold
    v = M.project(np.asarray(v, dtype=float))
    if float(M.dist(v, frame.center)) > frame.radius:
        raise ControlError(f"target at distance {float(M.dist(v, frame.center)):.3g} outside the "
                           f"certified ball of radius {frame.radius:.3g}")
    alpha = frame.alpha_hat.copy()
    x = frame.endpoint(alpha)
    res = float(M.dist(x, v))
    it = 0
    while res > 0.01 * NEWTON_TOL and it < NEWTON_MAX_ITER:
        _, J = _ext_jacobians(sysm, frame.u_hat, frame.zetas, alpha, frame.chart, frame.h)
        rhs = -np.append(_chart_diff(M, x, v, frame.chart), alpha.sum() - frame.tau)
        step = np.linalg.solve(J[0], rhs)
        for _ in range(NEWTON_HALVINGS + 1):
            trial = alpha + step
            if frame.in_box(trial):
                xt = frame.endpoint(trial)
                rt = float(M.dist(xt, v))
                if rt < res:
                    break
            step = 0.5 * step
        else:
            break
        alpha, x, res = trial, xt, rt
        it += 1
    if res > NEWTON_TOL:
        raise ControlError(f"Newton stalled after {it} iterations, residual {res:.3g}")
    return NewtonResult(alpha, it, res)


def exact_control_g(frame: KrenerFrame, v) -> ControlSignal:
    """Signal of duration tau steering u_hat exactly to ``v``."""
    return alpha_to_control(frame, solve_durations(frame, v).alpha)


def psi(frame: KrenerFrame, w) -> np.ndarray:
    return drift_flow(frame.system, w, 1.0 - frame.tau, "forward", frame.h)


def psi_inverse(frame: KrenerFrame, v) -> np.ndarray:
    return drift_flow(frame.system, v, 1.0 - frame.tau, "backward", frame.h)


def exact_control_f(frame: KrenerFrame, v) -> ControlSignal:
    """Signal of duration 1 with S(u_hat, f(v)) = v: g(psi^-1(v)) then zero control."""
    g = exact_control_g(frame, psi_inverse(frame, v))
    return g.then(ControlSignal.zero(frame.system.n, 1.0 - frame.tau))


@dataclass
class ExactControl:
    """The map v -> f(v) on the ball psi(B') with B' = B(center, radius)."""
    frame: KrenerFrame

    @property
    def center(self) -> np.ndarray:
        return psi(self.frame, self.frame.center)

    @property
    def radius(self) -> float:
        return self.frame.radius

    @property
    def lipschitz(self) -> float:
        return self.frame.lipschitz

    def __call__(self, v) -> ControlSignal:
        return exact_control_f(self.frame, v)

    def sample_targets(self, rng: np.random.Generator, size: int) -> np.ndarray:
        M = self.frame.system.manifold
        w = M.sample_ball(self.frame.center, self.radius * (1 - 1e-6), rng, size)
        return psi(self.frame, w)


# -- solid controllability witness ---------------------------------------------------

@dataclass
class WitnessReport:
    signal: ControlSignal = field(repr=False)
    coefficients: np.ndarray
    rank: int
    singular_values: np.ndarray
    tries: int
    domain_radius: float
    covering_radius: float

    def to_dict(self) -> dict:
        return dict(coefficients=self.coefficients.tolist(), rank=self.rank,
                    singular_values=self.singular_values.tolist(), tries=self.tries,
                    domain_radius=self.domain_radius, covering_radius=self.covering_radius)


def _rank(s: np.ndarray, tol: float = 1e-8) -> int:
    if len(s) == 0 or s[0] < 1e-12:
        return 0
    return int(np.sum(s > tol * s[0]))


def solid_witness(system: ControlSystem, u_hat, law: NoiseLaw, rng: np.random.Generator, tries: int = 20,
                  domain_radius: float = 0.25, h: float = DEFAULT_STEP) -> WitnessReport:
    """Coefficients with full-rank endpoint derivative plus a covering radius.

    The covering check restricts the coefficients to the top-d right singular
    directions, a ball of radius ``domain_radius`` around the witness, and
    solves S(u_hat, .) = target by Newton for targets on two circles of
    radius r and r/2 around the witness image. r starts at half the smallest
    distance from the image of the domain's boundary and halves on failure.
    """
    M = system.manifold
    u = M.project(np.asarray(u_hat, dtype=float))
    d = M.dim
    B = law.amplitude_basis()
    s = np.zeros(0)
    for t in range(1, tries + 1):
        c = law.sample_coefficients(rng)
        J = d_eta_S(system, u, law.signal(c), basis=B, h=h)
        _, s, vt = np.linalg.svd(J)
        if _rank(s) == d:
            break
    else:
        raise ControlError(f"no full-rank witness in {tries} tries; singular values {s.tolist()}")
    W = vt[:d].T

    def endpoint(y):
        y = np.atleast_2d(y)
        amps = law.amplitudes(c + y @ W.T)
        return flow_batch(system, np.broadcast_to(u, (len(y), u.shape[-1])), law.durations, amps, h)

    z0 = endpoint(np.zeros(d))[0]
    dirs = _directions(d, rng, 32)
    rim = endpoint(domain_radius * dirs)
    r = 0.5 * float(M.dist(rim, z0).min())
    covered = 0.0
    for _ in range(9):
        targets = [M.exp(z0, k * r * e) for k in (1.0, 0.5) for e in _directions(d, rng, 16)]
        if all(_cover_solve(system, u, law, c, W, tgt, domain_radius, h) for tgt in targets):
            covered = r
            break
        r *= 0.5
    return WitnessReport(law.signal(c), c, d, s, t, domain_radius, covered)


def _cover_solve(system, u, law, c, W, target, rho, h, max_iter: int = 30) -> bool:
    M = system.manifold
    y = np.zeros(W.shape[1])
    B = law.amplitude_basis() @ W
    for _ in range(max_iter):
        sig = law.signal(c + W @ y)
        x = flow_batch(system, u, sig.durations, sig.amplitudes, h)
        if float(M.dist(x, target)) <= NEWTON_TOL:
            return bool(np.linalg.norm(y) <= rho)
        J = d_eta_S(system, u, sig, basis=B, h=h)
        y = y + np.linalg.solve(J, M.difference(target, x))
        if np.linalg.norm(y) > rho:
            return False
    return False


# -- approximate controllability ---------------------------------------------------

@dataclass
class ApproachResult:
    signals: list
    distance: float
    path: np.ndarray

    @property
    def m(self) -> int:
        return len(self.signals)


def _shoot(system, x, target, c, law, h, iters: int = 20):
    """Gauss-Newton (minimum-norm steps) on the coefficients for S(x, .) = target."""
    M = system.manifold
    B = law.amplitude_basis()

    def end(cc):
        cc = np.atleast_2d(cc)
        return flow_batch(system, np.broadcast_to(x, (len(cc), x.shape[-1])), law.durations,
                          law.amplitudes(cc), h)

    y = end(c)[0]
    best = float(M.dist(y, target))
    scales = 0.5 ** np.arange(NEWTON_HALVINGS + 1)
    for _ in range(iters):
        if best <= 1e-12:
            break
        J = d_eta_S(system, x, law.signal(c), basis=B, h=h)
        step = np.linalg.pinv(J) @ M.difference(target, y)
        # all damped steps in one batch; take the longest that improves
        trials = c + scales[:, None] * step
        ys = end(trials)
        ds = M.dist(ys, target)
        ok = np.flatnonzero(ds < best)
        if len(ok) == 0:
            break
        i = ok[0]
        c, y, best = trials[i], ys[i], float(ds[i])
    return c, y, best


def approach(system: ControlSystem, u0, u_hat, eps: float, law: NoiseLaw, rng: np.random.Generator,
             budget: int = 8, K: int = APPROACH_CANDIDATES, h: float = DEFAULT_STEP) -> ApproachResult:
    """Unit-time signals steering ``u0`` to within ``eps`` of ``u_hat``.

    Each stage draws K coefficient vectors from the noise law, keeps the one
    landing closest to ``u_hat`` and refines it by Gauss-Newton shooting.
    The returned chain of signals is re-simulated from ``u0`` before it is
    accepted.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    M = system.manifold
    x = M.project(np.asarray(u0, dtype=float))
    target = M.project(np.asarray(u_hat, dtype=float))
    coeffs = []
    while float(M.dist(x, target)) > eps:
        if len(coeffs) >= budget:
            raise ControlError(f"budget of {budget} steps exhausted at distance {float(M.dist(x, target)):.3g}")
        C = law.sample_coefficients(rng, K)
        ends = flow_batch(system, np.broadcast_to(x, (K, x.shape[-1])), law.durations, law.amplitudes(C), h)
        c, x, _ = _shoot(system, x, target, C[int(np.argmin(M.dist(ends, target)))], law, h)
        coeffs.append(c)

    signals = [law.signal(c) for c in coeffs]
    path = [M.project(np.asarray(u0, dtype=float))]
    for sig in signals:
        path.append(flow_batch(system, path[-1], sig.durations, sig.amplitudes, h))
    final = float(M.dist(path[-1], target))
    if final > eps:
        raise ControlError(f"re-simulation ends at distance {final:.3g} > {eps}")
    return ApproachResult(signals, final, np.array(path))
