"""Deterministic seed derivation (splitmix64 over mixed-in components).

Per-example and per-step RNGs are derived statelessly from a root seed so
parallel and serial execution, and interrupted and resumed runs, see the same
random streams.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x):
    """One splitmix64 scrambling step."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(root, *components):
    """Mix integer components into a 64-bit child seed."""
    s = splitmix64(int(root) & _MASK)
    for c in components:
        s = splitmix64((s ^ (int(c) & _MASK)) & _MASK)
    return s


def make_rng(root, *components):
    return np.random.Generator(np.random.PCG64(derive_seed(root, *components)))
