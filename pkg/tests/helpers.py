"""Independent oracles shared by the test modules."""

import numpy as np

from ctrlmix.fields import parse_field


def random_field(rng, dim, manifold=None, label="V"):
    """Random smooth field: quadratic polynomial plus one trigonometric term per component."""
    comps = []
    for _ in range(dim):
        terms = [f"{rng.normal():.6f}"]
        for i in range(dim):
            terms.append(f"{rng.normal():.6f}*x{i + 1}")
            for j in range(i, dim):
                terms.append(f"{rng.normal():.6f}*x{i + 1}*x{j + 1}")
        k = rng.integers(dim) + 1
        terms.append(f"{rng.normal():.6f}*{rng.choice(['sin', 'cos'])}(x{k})")
        comps.append(" + ".join(terms))
    return parse_field(comps, manifold, label)


def fd_jacobian(V, p, h=1e-5):
    p = np.asarray(p, dtype=float)
    J = np.zeros((V.dim, V.dim))
    for j in range(V.dim):
        e = np.zeros(V.dim)
        e[j] = h
        J[:, j] = (V(p + e) - V(p - e)) / (2 * h)
    return J


def fd_bracket(V, W, p, h=1e-5):
    """[V, W](p) = DW V - DV W with central-difference Jacobians."""
    return fd_jacobian(W, p, h) @ V(p) - fd_jacobian(V, p, h) @ W(p)


def rk4_reference(f, x0, T, n):
    """Plain scalar-loop RK4 for x' = f(x) on [0, T] with n steps (no wrapping)."""
    x = np.array(x0, dtype=float)
    s = T / n
    for _ in range(n):
        k1 = f(x)
        k2 = f(x + 0.5 * s * k1)
        k3 = f(x + 0.5 * s * k2)
        k4 = f(x + s * k3)
        x = x + s / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x
