"""Vector fields from coordinate expressions, Lie brackets and the weak Hörmander check.

Bracket convention: ``[V, W] = DW . V - DV . W``. Only spans and ranks are
consumed downstream, and those do not depend on the sign convention.

On the sphere, fields are written in ambient coordinates ``x1, x2, x3`` and
replaced by their tangential part ``v - (v.x / |x|^2) x``. That extension is
tangent to every sphere around the origin, so brackets computed in ambient
coordinates are the intrinsic brackets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import expr as ex
from .geometry import Manifold, Sphere

DEFAULT_RANK_TOL = 1e-8
MAX_BRACKET_DEPTH = 4
ZERO_FIELD_TOL = 1e-12
ZERO_FIELD_PROBES = 32


class VectorField:
    """A smooth vector field given by a component function ``fn(xs) -> list``.

    ``fn`` must work on floats, numpy arrays and :class:`~ctrlmix.expr.Dual`
    numbers alike. Calling the field on an array of points (coordinate axis
    last) returns an array of the same shape.
    """

    def __init__(self, fn: Callable, dim: int, manifold: Manifold | None = None,
                 label: str = "V", exprs: Sequence[str] | None = None):
        self._fn = fn
        self.dim = dim
        self.manifold = manifold
        self.label = label
        self.exprs = tuple(exprs) if exprs is not None else None

    def __repr__(self):
        body = f"{list(self.exprs)}" if self.exprs is not None else f"dim={self.dim}"
        return f"VectorField({self.label}: {body})"

    def components(self, xs) -> list:
        return self._fn(xs)

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.dim:
            raise ValueError(f"{self.label}: point has {p.shape[-1]} coordinates, field has {self.dim}")
        comps = self._fn([p[..., i] for i in range(self.dim)])
        out = np.empty(p.shape)
        for i, c in enumerate(comps):
            out[..., i] = c
        return out

    def scaled(self, c: float) -> "VectorField":
        return VectorField(lambda xs: [c * v for v in self._fn(xs)], self.dim, self.manifold,
                           f"{c:g}*{self.label}")


def parse_field(exprs: Sequence[str], manifold: Manifold | None = None, label: str = "V") -> VectorField:
    """Build a vector field from one expression per ambient coordinate."""
    exprs = [str(e) for e in exprs]
    dim = len(exprs)
    if manifold is not None and manifold.ambient_dim != dim:
        raise ValueError(f"{label}: {manifold.kind} needs {manifold.ambient_dim} components, got {dim}")
    compiled = [ex.parse(e, dim) for e in exprs]

    if isinstance(manifold, Sphere):
        def fn(xs):
            v = [c(xs) for c in compiled]
            r2 = xs[0] * xs[0] + xs[1] * xs[1] + xs[2] * xs[2]
            k = (v[0] * xs[0] + v[1] * xs[1] + v[2] * xs[2]) / r2
            return [v[i] - k * xs[i] for i in range(3)]
    else:
        def fn(xs):
            return [c(xs) for c in compiled]
    return VectorField(fn, dim, manifold, label, exprs)


def constant_field(values, manifold: Manifold | None = None, label: str = "V") -> VectorField:
    return parse_field([repr(float(v)) for v in values], manifold, label)


def combine(fields: Sequence[VectorField], coeffs: Sequence[float], label: str | None = None) -> VectorField:
    """``fields[0] + sum_j coeffs[j] * fields[j + 1]``, i.e. the field ``V_zeta``."""
    V0, rest = fields[0], list(fields[1:])
    coeffs = [float(c) for c in coeffs]
    if len(coeffs) != len(rest):
        raise ValueError("need one coefficient per controlled field")

    def fn(xs):
        out = list(V0.components(xs))
        for c, V in zip(coeffs, rest):
            if c != 0.0:
                out = [a + c * b for a, b in zip(out, V.components(xs))]
        return out
    return VectorField(fn, V0.dim, V0.manifold, label or f"{V0.label}+zeta.V")


def jvp(V: VectorField, xs, vs) -> list:
    """Directional derivative ``DV(x) . v`` via a freshly tagged dual number."""
    tag = ex.new_tag()
    ys = V.components([ex.Dual(x, v, tag) for x, v in zip(xs, vs)])
    return [ex.tangent(y, tag) for y in ys]


def eval_field(V: VectorField, p) -> np.ndarray:
    return V(p)


def jacobian(V: VectorField, p, method: str = "ad", h: float = 1e-5) -> np.ndarray:
    """Matrix of partial derivatives ``dV_i / dx_j`` at a single point ``p``."""
    p = np.asarray(p, dtype=float)
    n = V.dim
    J = np.zeros((n, n))
    if method == "ad":
        for j in range(n):
            tag = ex.new_tag()
            xs = [ex.Dual(float(p[i]), 1.0 if i == j else 0.0, tag) for i in range(n)]
            J[:, j] = [float(ex.tangent(y, tag)) for y in V.components(xs)]
    elif method == "fd":
        for j in range(n):
            e = np.zeros(n)
            e[j] = h
            J[:, j] = (V(p + e) - V(p - e)) / (2 * h)
    else:
        raise ValueError(f"unknown jacobian method {method!r}")
    return J


def lie_bracket(V: VectorField, W: VectorField, label: str | None = None) -> VectorField:
    """``[V, W] = DW . V - DV . W`` as a new (lazily evaluated) field."""
    if V.dim != W.dim:
        raise ValueError("bracket of fields of different dimensions")

    def fn(xs):
        a = jvp(W, xs, V.components(xs))
        b = jvp(V, xs, W.components(xs))
        return [u - w for u, w in zip(a, b)]
    return VectorField(fn, V.dim, V.manifold or W.manifold, label or f"[{V.label},{W.label}]")


# -- bracket words ---------------------------------------------------------

def _depth(w) -> int:
    return 0 if isinstance(w, int) else 1 + max(_depth(w[0]), _depth(w[1]))


def _word_str(w) -> str:
    return f"V{w}" if isinstance(w, int) else f"[{_word_str(w[0])},{_word_str(w[1])}]"


def _key(w):
    return (_depth(w), _word_str(w))


def _canonical(a, b):
    """Canonical representative of ``[a, b]`` up to sign; ``None`` when identically zero."""
    if a == b:
        return None
    return (a, b) if _key(a) < _key(b) else (b, a)


@dataclass
class BracketFamily:
    """Controlled fields plus iterated brackets of ``V0..Vn`` up to ``max_depth``."""

    words: list[str]
    fields: list[VectorField] = field(repr=False)
    depths: list[int]
    max_depth: int
    dim: int
    manifold: Manifold | None = None
    pruned: int = 0

    def __len__(self):
        return len(self.fields)

    def evaluate(self, p) -> np.ndarray:
        return np.array([F(p) for F in self.fields]).reshape(len(self.fields), self.dim)


def _probe_points(fields: Sequence[VectorField], rng: np.random.Generator) -> np.ndarray:
    M = fields[0].manifold
    if M is not None:
        return M.sample_uniform(rng, ZERO_FIELD_PROBES)
    return rng.uniform(-np.pi, np.pi, (ZERO_FIELD_PROBES, fields[0].dim))


def bracket_family(fields: Sequence[VectorField], depth: int, max_depth: int = MAX_BRACKET_DEPTH,
                   seed: int = 0) -> BracketFamily:
    """Enumerate ``V1..Vn`` and left-normed brackets of ``V0..Vn`` up to ``depth``.

    ``[a, b]`` and ``[b, a]`` are kept once, ``[a, a]`` is dropped, and
    brackets that vanish at 32 random probe points are pruned (and not
    bracketed further).
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if depth > max_depth:
        raise ValueError(f"bracket depth {depth} exceeds the cap {max_depth}")
    if len(fields) < 2:
        raise ValueError("need a drift V0 and at least one controlled field")
    dim = fields[0].dim
    probes = _probe_points(fields, np.random.default_rng(seed))

    gens = list(range(len(fields)))
    built = {g: fields[g] for g in gens}
    words = [_word_str(g) for g in gens[1:]]
    members = [fields[g] for g in gens[1:]]
    depths = [0] * (len(gens) - 1)
    seen = set()
    pruned = 0
    frontier = list(gens)
    for level in range(1, depth + 1):
        nxt = []
        for w in frontier:
            for g in gens:
                c = _canonical(w, g)
                if c is None or c in seen:
                    continue
                seen.add(c)
                F = lie_bracket(built[c[0]], built[c[1]], label=_word_str(c))
                if np.max(np.abs(F(probes))) < ZERO_FIELD_TOL:
                    pruned += 1
                    continue
                built[c] = F
                words.append(_word_str(c))
                members.append(F)
                depths.append(level)
                nxt.append(c)
        frontier = nxt
    return BracketFamily(words, members, depths, depth, dim, fields[0].manifold, pruned)


@dataclass
class HormanderResult:
    rank: int
    basis: list[str]
    dim: int
    depth: int
    singular_values: np.ndarray = field(repr=False)

    @property
    def full_rank(self) -> bool:
        return self.rank == self.dim

    @property
    def message(self) -> str:
        if self.full_rank:
            return f"weak Hormander condition holds (rank {self.rank} = {self.dim}, depth {self.depth})"
        return f"rank {self.rank} < {self.dim}: not established up to depth {self.depth}"


def hormander_rank(fam: BracketFamily, p, tol: float = DEFAULT_RANK_TOL) -> HormanderResult:
    """Numerical rank of the family evaluated at ``p`` (singular values above ``tol * s_max``)."""
    if len(fam) == 0:
        raise ValueError("empty bracket family")
    A = fam.evaluate(p)
    s = np.linalg.svd(A, compute_uv=False)
    smax = s[0] if len(s) else 0.0
    dim = fam.manifold.dim if fam.manifold is not None else fam.dim
    if smax == 0.0:
        return HormanderResult(0, [], dim, fam.max_depth, s)
    thresh = tol * smax
    rank = int(np.sum(s > thresh))
    basis, Q = [], np.zeros((fam.dim, 0))
    for word, v in zip(fam.words, A):
        r = v - Q @ (Q.T @ v)
        nr = np.linalg.norm(r)
        if nr > thresh:
            basis.append(word)
            Q = np.column_stack([Q, r / nr])
            if len(basis) == rank:
                break
    return HormanderResult(rank, basis, dim, fam.max_depth, s)


class ExtendedField(VectorField):
    """A field on X x R: the base field with a constant last component."""

    def __init__(self, base: VectorField, last: float):
        self.base = base
        self.last = float(last)
        n = base.dim

        def fn(xs):
            return list(base.components(xs[:n])) + [self.last]
        super().__init__(fn, n + 1, None, f"~{base.label}")


def extend_system(fields: Sequence[VectorField]) -> list[ExtendedField]:
    """``(V0, 1)`` followed by ``(Vj, 0)`` for the controlled fields."""
    return [ExtendedField(V, 1.0 if j == 0 else 0.0) for j, V in enumerate(fields)]
