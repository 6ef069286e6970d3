"""Compact manifolds used as phase spaces: flat tori, the circle and the 2-sphere.

Points are plain numpy arrays. Torus and circle points carry intrinsic periodic
coordinates in ``[0, period)``; sphere points are ambient vectors in R^3 of norm
``radius``. Batches are arrays with the coordinate axis last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


class ManifoldError(ValueError):
    pass


@dataclass(frozen=True)
class CellPartition:
    """A partition of a manifold into cells with known Riemannian volumes."""

    manifold: "Manifold"
    resolution: int
    volumes: np.ndarray = field(repr=False)
    centers: np.ndarray = field(repr=False)

    @property
    def n_cells(self) -> int:
        return len(self.volumes)

    def locate(self, points) -> np.ndarray:
        """Cell index of every point (a point belongs to exactly one cell)."""
        return self.manifold._locate(np.asarray(points, dtype=float), self.resolution)

    def counts(self, points) -> np.ndarray:
        idx = self.locate(points).ravel()
        return np.bincount(idx, minlength=self.n_cells)

    def same_as(self, other: "CellPartition") -> bool:
        return self.manifold == other.manifold and self.resolution == other.resolution


class Manifold:
    kind: str
    dim: int
    ambient_dim: int

    # -- coordinates -------------------------------------------------------
    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1:] != (self.ambient_dim,):
            raise ManifoldError(
                f"{self.kind}: expected coordinate axis of length {self.ambient_dim}, got shape {x.shape}")
        return x

    def project(self, x) -> np.ndarray:
        raise NotImplementedError

    def dist(self, p, q) -> np.ndarray:
        raise NotImplementedError

    @property
    def volume(self) -> float:
        raise NotImplementedError

    @property
    def diameter(self) -> float:
        raise NotImplementedError

    def chart_id(self, p) -> int:
        return 0

    def to_chart(self, p, cid: int) -> np.ndarray:
        raise NotImplementedError

    def from_chart(self, z, cid: int) -> np.ndarray:
        raise NotImplementedError

    def pushforward(self, p, v, cid: int) -> np.ndarray:
        """Chart components of the tangent vector ``v`` (ambient) at ``p``."""
        raise NotImplementedError

    def difference(self, p, base) -> np.ndarray:
        """Coordinates of ``p`` minus those of ``base`` in the chart of ``base``."""
        cid = self.chart_id(base)
        return self.to_chart(p, cid) - self.to_chart(base, cid)

    def tangent(self, p, v) -> np.ndarray:
        """Restrict an ambient vector to the tangent space at ``p``."""
        return np.asarray(v, dtype=float)

    # -- discretisation and sampling --------------------------------------
    def mesh(self, resolution: int) -> CellPartition:
        raise NotImplementedError

    def sample_uniform(self, rng: np.random.Generator, size=None) -> np.ndarray:
        raise NotImplementedError

    def sample_ball(self, center, radius: float, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError

    def ball_grid(self, center, radius: float, spacing: float) -> np.ndarray:
        raise NotImplementedError

    def grid(self, resolution: int) -> np.ndarray:
        """Deterministic covering of X: centres of the cells of ``mesh(resolution)``."""
        return self.mesh(resolution).centers

    def _locate(self, x: np.ndarray, resolution: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Torus(Manifold):
    """Flat torus (R / period Z)^dim."""

    dim: int = 2
    period: float = TWO_PI
    kind: str = "torus"

    def __post_init__(self):
        if self.dim < 1:
            raise ManifoldError("torus dimension must be >= 1")
        if not self.period > 0:
            raise ManifoldError("period must be positive")

    @property
    def ambient_dim(self) -> int:
        return self.dim

    @property
    def volume(self) -> float:
        return self.period ** self.dim

    @property
    def diameter(self) -> float:
        return 0.5 * self.period * math.sqrt(self.dim)

    def project(self, x) -> np.ndarray:
        x = self._check(x)
        if not np.all(np.isfinite(x)):
            raise ManifoldError("non-finite coordinates")
        y = np.mod(x, self.period)
        # np.mod can round up to the period itself for tiny negative inputs
        return np.where(y >= self.period, 0.0, y)

    def wrap(self, dx) -> np.ndarray:
        """Representative of a coordinate difference in [-period/2, period/2)."""
        half = 0.5 * self.period
        return np.mod(np.asarray(dx, dtype=float) + half, self.period) - half

    def dist(self, p, q) -> np.ndarray:
        return np.linalg.norm(self.wrap(self._check(p) - self._check(q)), axis=-1)

    def to_chart(self, p, cid: int) -> np.ndarray:
        return self._check(p)

    def from_chart(self, z, cid: int) -> np.ndarray:
        return self.project(z)

    def pushforward(self, p, v, cid: int) -> np.ndarray:
        return np.asarray(v, dtype=float)

    def difference(self, p, base) -> np.ndarray:
        return self.wrap(self._check(p) - self._check(base))

    def exp(self, p, v) -> np.ndarray:
        return self.project(self._check(p) + v)

    def mesh(self, resolution: int) -> CellPartition:
        if resolution < 2:
            raise ManifoldError("mesh resolution must be >= 2")
        w = self.period / resolution
        n = resolution ** self.dim
        axes = [(np.arange(resolution) + 0.5) * w] * self.dim
        centers = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(n, self.dim)
        return CellPartition(self, resolution, np.full(n, w ** self.dim), centers)

    def _locate(self, x, resolution):
        x = self.project(x)
        ij = np.minimum((x * (resolution / self.period)).astype(np.int64), resolution - 1)
        return np.ravel_multi_index(tuple(np.moveaxis(ij, -1, 0)), (resolution,) * self.dim)

    def sample_uniform(self, rng, size=None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        return self.project(rng.uniform(0.0, self.period, shape))

    def sample_ball(self, center, radius, rng, size) -> np.ndarray:
        # rejection from the enclosing cube; radius is assumed below period/2
        out = np.empty((0, self.dim))
        while len(out) < size:
            v = rng.uniform(-radius, radius, (2 * size + 8, self.dim))
            v = v[np.linalg.norm(v, axis=1) <= radius]
            out = np.concatenate([out, v])
        return self.exp(center, out[:size])

    def ball_grid(self, center, radius, spacing) -> np.ndarray:
        k = int(math.floor(radius / spacing))
        ax = np.arange(-k, k + 1) * spacing
        offs = np.stack(np.meshgrid(*[ax] * self.dim, indexing="ij"), axis=-1).reshape(-1, self.dim)
        offs = offs[np.linalg.norm(offs, axis=1) <= radius + 1e-12]
        return self.exp(center, offs)


@dataclass(frozen=True)
class Circle(Torus):
    """The circle S^1 = R / 2 pi Z (a one-dimensional torus)."""

    dim: int = 1
    period: float = TWO_PI
    kind: str = "circle"

    def __post_init__(self):
        if self.dim != 1:
            raise ManifoldError("a circle has dimension 1")
        super().__post_init__()


@dataclass(frozen=True)
class Sphere(Manifold):
    """The round 2-sphere of the given radius, embedded in R^3.

    Charts are the stereographic projections from the north pole (chart 0)
    and from the south pole (chart 1); ``chart_id`` picks the chart whose
    pole is farther from the point.
    """

    radius: float = 1.0
    kind: str = "sphere"

    def __post_init__(self):
        if not self.radius > 0:
            raise ManifoldError("radius must be positive")

    @property
    def dim(self) -> int:
        return 2

    @property
    def ambient_dim(self) -> int:
        return 3

    @property
    def volume(self) -> float:
        return 4.0 * math.pi * self.radius ** 2

    @property
    def diameter(self) -> float:
        return math.pi * self.radius

    def project(self, x) -> np.ndarray:
        x = self._check(x)
        if not np.all(np.isfinite(x)):
            raise ManifoldError("non-finite coordinates")
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        if np.any(n == 0.0):
            raise ManifoldError("radial projection of the zero vector is undefined")
        return self.radius * x / n

    def dist(self, p, q) -> np.ndarray:
        p, q = self._check(p), self._check(q)
        s = np.linalg.norm(np.cross(p, q), axis=-1)
        c = np.sum(p * q, axis=-1)
        return self.radius * np.arctan2(s, c)

    def tangent(self, p, v) -> np.ndarray:
        p = self._check(p) / self.radius
        v = np.asarray(v, dtype=float)
        return v - np.sum(v * p, axis=-1, keepdims=True) * p

    def chart_id(self, p) -> int:
        # chart 0 projects from the north pole, so use it on the southern half
        return 0 if float(np.asarray(p)[2]) <= 0.0 else 1

    def to_chart(self, p, cid: int) -> np.ndarray:
        p = self._check(p) / self.radius
        s = 1.0 if cid == 0 else -1.0
        return p[..., :2] / (1.0 - s * p[..., 2:3])

    def from_chart(self, z, cid: int) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        s = 1.0 if cid == 0 else -1.0
        r2 = np.sum(z * z, axis=-1, keepdims=True)
        p = np.concatenate([2.0 * z, s * (r2 - 1.0)], axis=-1) / (r2 + 1.0)
        return self.radius * p

    def pushforward(self, p, v, cid: int) -> np.ndarray:
        p = self._check(p) / self.radius
        v = np.asarray(v, dtype=float) / self.radius
        s = 1.0 if cid == 0 else -1.0
        den = 1.0 - s * p[..., 2:3]
        return v[..., :2] / den + s * p[..., :2] * v[..., 2:3] / den ** 2

    def tangent_basis(self, p) -> np.ndarray:
        """Orthonormal basis (3 x 2) of the tangent plane at ``p``."""
        n = self._check(p) / self.radius
        a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = a - (a @ n) * n
        e1 /= np.linalg.norm(e1)
        return np.stack([e1, np.cross(n, e1)], axis=1)

    def exp(self, p, v) -> np.ndarray:
        """Geodesic from ``p`` with tangent coordinates ``v`` (in ``tangent_basis(p)``)."""
        p = self._check(p)
        w = np.asarray(v, dtype=float) @ self.tangent_basis(p).T
        nw = np.linalg.norm(w, axis=-1, keepdims=True)
        t = nw / self.radius
        return self.project(np.cos(t) * p + np.sin(t) * self.radius * w / np.where(nw > 0, nw, 1.0))

    # latitude bands of equal polar angle, each split into 2*resolution sectors
    def _edges(self, resolution):
        return np.linspace(0.0, math.pi, resolution + 1), 2 * resolution

    def mesh(self, resolution: int) -> CellPartition:
        if resolution < 2:
            raise ManifoldError("mesh resolution must be >= 2")
        theta, nphi = self._edges(resolution)
        band = (self.radius ** 2) * (TWO_PI / nphi) * (np.cos(theta[:-1]) - np.cos(theta[1:]))
        volumes = np.repeat(band, nphi)
        tc = 0.5 * (theta[:-1] + theta[1:])
        pc = (np.arange(nphi) + 0.5) * TWO_PI / nphi
        T, P = np.meshgrid(tc, pc, indexing="ij")
        centers = self.radius * np.stack(
            [np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
        return CellPartition(self, resolution, volumes, centers)

    def _locate(self, x, resolution):
        x = self.project(x)
        theta_edges, nphi = self._edges(resolution)
        theta = np.arccos(np.clip(x[..., 2] / self.radius, -1.0, 1.0))
        phi = np.mod(np.arctan2(x[..., 1], x[..., 0]), TWO_PI)
        i = np.minimum((theta * (resolution / math.pi)).astype(np.int64), resolution - 1)
        j = np.minimum((phi * (nphi / TWO_PI)).astype(np.int64), nphi - 1)
        return i * nphi + j

    def sample_uniform(self, rng, size=None) -> np.ndarray:
        shape = (3,) if size is None else (size, 3)
        while True:
            g = rng.standard_normal(shape)
            if np.all(np.linalg.norm(g, axis=-1) > 0):
                return self.project(g)

    def sample_ball(self, center, radius, rng, size) -> np.ndarray:
        # uniform on the geodesic cap: cos(angle) is uniform on [cos(r/R), 1]
        a = min(radius / self.radius, math.pi)
        c = rng.uniform(math.cos(a), 1.0, size)
        phi = rng.uniform(0.0, TWO_PI, size)
        ang = np.arccos(c)
        v = self.radius * ang[:, None] * np.stack([np.cos(phi), np.sin(phi)], axis=1)
        return self.exp(center, v)

    def ball_grid(self, center, radius, spacing) -> np.ndarray:
        k = int(math.floor(radius / spacing))
        ax = np.arange(-k, k + 1) * spacing
        offs = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
        offs = offs[np.linalg.norm(offs, axis=1) <= radius + 1e-12]
        return self.exp(center, offs)


def make_manifold(kind: str, dim: int | None = None, period: float = TWO_PI, radius: float = 1.0) -> Manifold:
    kind = kind.lower()
    if kind in ("torus", "torus-d"):
        return Torus(dim=2 if dim is None else int(dim), period=period)
    if kind == "circle":
        if dim not in (None, 1):
            raise ManifoldError("circle has dimension 1")
        return Circle(period=period)
    if kind in ("sphere", "sphere-2"):
        if dim not in (None, 2):
            raise ManifoldError("only the 2-sphere is supported")
        return Sphere(radius=radius)
    raise ManifoldError(f"unknown manifold kind {kind!r}")
