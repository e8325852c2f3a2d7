"""Synthetic dataset generators used by the benchmark harness and tests.

These ship in-repo so the full experiment suite runs without downloading any
quantum-chemistry datasets.
"""
from __future__ import annotations

import numpy as np

from .dataset import LabeledSet, Structure


def mahalanobis_regression(n, seed=0, n_informative=5, n_distractor=45, noise=0.01):
    """Regression task where only a low-dimensional projection matters.

    X ~ N(0, 1)^(n_informative + n_distractor); the target depends only on the
    informative block through a random mixing matrix: y = ||L x_info|| + eps.
    Returns (X, y, informative_mask).
    """
    rng = np.random.default_rng(seed)
    p = n_informative + n_distractor
    X = rng.standard_normal((n, p))
    L = rng.standard_normal((n_informative, n_informative))
    z = X[:, :n_informative] @ L.T
    y = np.linalg.norm(z, axis=1) + noise * rng.standard_normal(n)
    mask = np.zeros(p, dtype=bool)
    mask[:n_informative] = True
    return X, y, mask


def heteroscedastic_regression(n, seed=0):
    """1-D target with input-dependent noise scale, for calibration checks.

    y = 0.5 x + (0.2 + 0.1 x) * eps with x ~ U(0, 10).  Returns (X, y) with
    X of shape (n, 1).
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 10.0, size=n)
    y = 0.5 * x + (0.2 + 0.1 * x) * rng.standard_normal(n)
    return x[:, None], y


# Rigid monomer templates (element, offset in Angstrom); crude shapes are
# enough since the labels are synthetic.
_MONOMERS = {
    "SA": (("S", (0.0, 0.0, 0.0)), ("O", (1.4, 0.0, 0.0)), ("O", (-1.4, 0.0, 0.0))),
    "W": (("O", (0.0, 0.0, 0.0)), ("H", (0.76, 0.59, 0.0)), ("H", (-0.76, 0.59, 0.0))),
}


def extensive_clusters(n, seed=0, max_sa=4, max_w=5, noise=0.0):
    """Synthetic clusters with an extensive target (total atom count).

    Each item is a random (SA)_a (W)_b composition with monomers scattered in
    a box that grows with the monomer count.  Labels are the atom count plus
    optional Gaussian noise, so size classes are cleanly separated for
    extrapolation experiments.
    """
    rng = np.random.default_rng(seed)
    structures = []
    labels = []
    for i in range(n):
        a = int(rng.integers(1, max_sa + 1))
        b = int(rng.integers(0, max_w + 1))
        elements = []
        coords = []
        box = 4.0 * (a + b) ** (1.0 / 3.0) + 2.0
        for tag, count in (("SA", a), ("W", b)):
            for _ in range(count):
                center = rng.uniform(0.0, box, size=3)
                rot = _random_rotation(rng)
                for elem, off in _MONOMERS[tag]:
                    elements.append(elem)
                    coords.append(center + rot @ np.asarray(off))
        y = float(len(elements))
        if noise > 0:
            y += noise * rng.standard_normal()
        structures.append(
            Structure(
                id=f"synthetic-{i}",
                elements=tuple(elements),
                coords=np.array(coords),
                composition={"SA": a, "W": b},
            )
        )
        labels.append(y)
    return LabeledSet(structures=structures, labels=np.array(labels))


def _random_rotation(rng):
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_structures(n, seed=0, min_atoms=3, max_atoms=8, elements=("H", "O", "C")):
    """Random small structures for kernel/metric property tests."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        n_atoms = int(rng.integers(min_atoms, max_atoms + 1))
        elems = tuple(elements[j] for j in rng.integers(0, len(elements), size=n_atoms))
        coords = rng.uniform(0.0, 6.0, size=(n_atoms, 3))
        out.append(Structure(id=f"rand-{i}", elements=elems, coords=coords))
    return out
