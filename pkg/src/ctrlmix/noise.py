"""Haar-Gaussian noise on L^2([0, 1], R^n).

Each channel is expanded in the L^2-orthonormal Haar basis truncated at level
L: the constant function followed by the wavelets psi_{j,k}, j < L,
k < 2^j. Coefficients are independent centred Gaussians with standard
deviation ``sigma0 * 2**(-decay * j)`` (the constant function sits at j = 0).
Truncated realisations are piecewise constant on the dyadic grid of 2^L
pieces, which is exactly the control type the integrator consumes.

Coefficients are ordered basis-major: index ``b * channels + c`` is basis
function ``b`` of channel ``c``. Cutting the vector after ``n`` entries gives
the finite-dimensional head (in F_n) and the tail (in G_n).

Random streams: ``law.stream(*key)`` seeds a generator from
``SeedSequence(seed, spawn_key=key)``. Callers key streams by task (for
instance ``(stage, grid_index)``), so results do not depend on how tasks are
scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .flow import ControlSignal


def haar_matrix(level: int) -> np.ndarray:
    """Values of the 2^L Haar functions (columns) on the 2^L dyadic pieces (rows)."""
    P = 2 ** level
    H = np.zeros((P, P))
    H[:, 0] = 1.0
    b = 1
    for j in range(level):
        width = P >> j  # pieces per support interval
        for k in range(2 ** j):
            s = k * width
            amp = 2.0 ** (j / 2)
            H[s:s + width // 2, b] = amp
            H[s + width // 2:s + width, b] = -amp
            b += 1
    return H


def basis_level(b: int) -> int:
    return 0 if b == 0 else int(math.floor(math.log2(b)))


@dataclass(frozen=True)
class NoiseLaw:
    channels: int = 1
    level: int = 3
    sigma0: float = 1.0
    decay: float = 1.0
    seed: int = 0
    _H: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.channels < 1 or self.level < 0:
            raise ValueError("need channels >= 1 and level >= 0")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be nonnegative")
        if not self.decay > 0.5:
            raise ValueError("decay must exceed 1/2")
        object.__setattr__(self, "_H", haar_matrix(self.level))

    @property
    def n_pieces(self) -> int:
        return 2 ** self.level

    @property
    def dim(self) -> int:
        return self.channels * self.n_pieces

    @property
    def breakpoints(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_pieces + 1)

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.breakpoints)

    @property
    def sigmas(self) -> np.ndarray:
        lv = np.array([basis_level(b) for b in range(self.n_pieces)], dtype=float)
        return np.repeat(self.sigma0 * 2.0 ** (-self.decay * lv), self.channels)

    def stream(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=tuple(int(k) for k in key)))

    # coefficient <-> amplitude maps
    def amplitudes(self, coeffs) -> np.ndarray:
        c = np.asarray(coeffs, dtype=float)
        C = c.reshape(c.shape[:-1] + (self.n_pieces, self.channels))
        return np.einsum("pb,...bc->...pc", self._H, C)

    def coefficients(self, amplitudes) -> np.ndarray:
        A = np.asarray(amplitudes, dtype=float)
        C = np.einsum("pb,...pc->...bc", self._H, A) / self.n_pieces
        return C.reshape(C.shape[:-2] + (self.dim,))

    def amplitude_basis(self) -> np.ndarray:
        """Matrix (pieces*channels x dim) taking coefficients to flattened amplitudes."""
        return self.amplitudes(np.eye(self.dim)).reshape(self.dim, -1).T

    def signal(self, coeffs) -> ControlSignal:
        return ControlSignal(self.breakpoints, self.amplitudes(coeffs))

    # sampling
    def sample_coefficients(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.standard_normal(shape) * self.sigmas

    def sample_amplitudes(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return self.amplitudes(self.sample_coefficients(rng, size))

    def tail_variance(self, n: int) -> float:
        """E ||Q_n eta||^2, the variance left after the first n coefficients."""
        return float(np.sum(self.sigmas[n:] ** 2))


@dataclass(frozen=True)
class NoiseRealization:
    law: NoiseLaw
    coefficients: np.ndarray

    @property
    def signal(self) -> ControlSignal:
        return self.law.signal(self.coefficients)


def sample_noise(law: NoiseLaw, rng: np.random.Generator) -> NoiseRealization:
    return NoiseRealization(law, law.sample_coefficients(rng))


def project(realization: NoiseRealization, n: int) -> tuple[NoiseRealization, NoiseRealization]:
    """Split into the head (first ``n`` coefficients) and the tail; they sum to the original."""
    law = realization.law
    if not 0 <= n <= law.dim:
        raise ValueError(f"cut {n} outside [0, {law.dim}]")
    c = realization.coefficients
    head = np.where(np.arange(law.dim) < n, c, 0.0)
    tail = np.where(np.arange(law.dim) < n, 0.0, c)
    return NoiseRealization(law, head), NoiseRealization(law, tail)


def log_density_rho_n(law: NoiseLaw, n: int, coeffs) -> float:
    c = np.asarray(coeffs, dtype=float)
    if c.shape[-1] != n:
        raise ValueError(f"expected {n} coefficients, got {c.shape[-1]}")
    s = law.sigmas[:n]
    if np.any(s == 0):
        raise ValueError("degenerate law has no density")
    return np.sum(-0.5 * (c / s) ** 2 - np.log(s) - 0.5 * math.log(2 * math.pi), axis=-1)


def density_rho_n(law: NoiseLaw, n: int, coeffs) -> float:
    """Density of the projection onto the first ``n`` coordinates (a Gaussian product)."""
    return np.exp(log_density_rho_n(law, n, coeffs))
