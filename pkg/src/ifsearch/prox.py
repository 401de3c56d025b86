"""Closed-form proximal / projection steps for the constraint sets used here.

All operators are Euclidean projections (argmin of 0.5*||z - x||^2 over the
constraint set) and return new arrays; inputs are never modified.
"""

import numpy as np


def prox_c1(z):
    """Project onto the one-nonzero set {x : ||x||_0 = 1}.

    Keeps the entry of largest magnitude (ties broken by lowest index) and
    zeroes everything else.
    """
    z = np.asarray(z, dtype=float)
    out = np.zeros_like(z)
    i = int(np.argmax(np.abs(z)))
    out[i] = z[i]
    return out


def prox_c2(z):
    """Project onto the box [0, 1]^d: clip each entry."""
    return np.clip(np.asarray(z, dtype=float), 0.0, 1.0)


def prox_ck(z, k):
    """Project onto {x : ||x||_0 = k}: keep the k largest-|z| entries.

    Ties broken by lowest index. k=1 reduces to prox_c1.
    """
    z = np.asarray(z, dtype=float)
    if not 1 <= k <= z.size:
        raise ValueError(f"k must be in [1, {z.size}], got {k}")
    # stable sort on -|z| keeps equal magnitudes in index order
    order = np.argsort(-np.abs(z), kind="stable")
    keep = order[:k]
    out = np.zeros_like(z)
    out[keep] = z[keep]
    return out


def project_unit_ball(z):
    """Euclidean projection onto the l2 unit ball.

    Identity inside the ball, z / ||z||_2 outside. Idempotent and
    non-expansive.
    """
    z = np.asarray(z, dtype=float)
    n = float(np.linalg.norm(z))
    if n <= 1.0:
        return z.copy()
    return z / n
