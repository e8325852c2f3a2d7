"""Molecular descriptors: Coulomb matrix, bag-of-bonds, and a local many-body
descriptor with element-resolved radial and angular channels."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .dataset import SUPPORTED_ELEMENTS, Structure
from .errors import ConfigError, DegenerateGeometry, ShapeError

BOHR_PER_ANGSTROM = 1.0 / 0.52917721092

ATOMIC_NUMBERS = {"H": 1, "C": 6, "N": 7, "O": 8, "F": 9, "S": 16}

# Canonical unordered element pairs, e.g. ("H","H"), ("H","C"), ...
ELEMENT_PAIRS = tuple(itertools.combinations_with_replacement(SUPPORTED_ELEMENTS, 2))

_ELEMENT_ORDER = {e: i for i, e in enumerate(SUPPORTED_ELEMENTS)}


def _canonical_pair(e1, e2):
    return (e1, e2) if _ELEMENT_ORDER[e1] <= _ELEMENT_ORDER[e2] else (e2, e1)


@dataclass(frozen=True)
class LmbParams:
    """Parameters of the local many-body descriptor."""

    r_cut: float = 8.0
    n_radial: int = 24
    radial_width: float = 0.25
    n_angular: int = 8
    angular_width: float = 0.3
    use_three_body: bool = True

    def __post_init__(self):
        if self.r_cut <= 0 or self.radial_width <= 0 or self.angular_width <= 0:
            raise ConfigError("cutoff and widths must be positive")
        if self.n_radial < 1 or self.n_angular < 1:
            raise ConfigError("basis sizes must be at least 1")


@dataclass(frozen=True)
class DescriptorParams:
    kind: str = "LMB"  # "CM" | "BoB" | "LMB"
    max_atoms_per_element: dict[str, int] = field(default_factory=dict)
    lmb: LmbParams = field(default_factory=LmbParams)

    def __post_init__(self):
        if self.kind not in ("CM", "BoB", "LMB"):
            raise ConfigError(f"unknown descriptor kind {self.kind!r}")


@dataclass(frozen=True)
class LocalDescriptor:
    """Per-atom environment vectors; one row per atom, tagged with its element."""

    vectors: np.ndarray  # (n_atoms, p_local)
    center_elements: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float)
        if v.ndim != 2 or v.shape[0] != len(self.center_elements):
            raise ShapeError("one row per atom required")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "center_elements", tuple(self.center_elements))


@dataclass(frozen=True)
class GlobalDescriptor:
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float).ravel()
        object.__setattr__(self, "vector", v)


def _coulomb_entries(s: Structure):
    """Full Coulomb matrix in atomic units, rows/cols in input atom order."""
    z = np.array([ATOMIC_NUMBERS[e] for e in s.elements], dtype=float)
    dists = squareform(pdist(s.coords)) * BOHR_PER_ANGSTROM
    if s.n_atoms > 1 and np.min(dists[~np.eye(s.n_atoms, dtype=bool)]) < 1e-10:
        raise DegenerateGeometry(f"coincident atoms in structure {s.id!r}")
    with np.errstate(divide="ignore"):
        m = np.outer(z, z) / np.where(dists > 0, dists, np.inf)
    np.fill_diagonal(m, 0.5 * z**2.4)
    return m


def _total_padding(params: DescriptorParams) -> int:
    if not params.max_atoms_per_element:
        raise ConfigError("CM/BoB need max_atoms_per_element padding counts")
    return sum(params.max_atoms_per_element.values())


def coulomb_matrix(s: Structure, params: DescriptorParams) -> GlobalDescriptor:
    """Row-norm-sorted Coulomb matrix, padded and flattened to its upper triangle."""
    size = _total_padding(params)
    if s.n_atoms > size:
        raise ConfigError(f"structure {s.id!r} has {s.n_atoms} atoms, padding allows {size}")
    m = _coulomb_entries(s)
    order = np.argsort(-np.linalg.norm(m, axis=1), kind="stable")
    m = m[np.ix_(order, order)]
    padded = np.zeros((size, size))
    padded[: s.n_atoms, : s.n_atoms] = m
    iu = np.triu_indices(size)
    return GlobalDescriptor(padded[iu])


def _bag_sizes(params: DescriptorParams) -> dict[tuple[str, str], int]:
    counts = params.max_atoms_per_element
    sizes = {}
    for e1, e2 in ELEMENT_PAIRS:
        n1 = counts.get(e1, 0)
        n2 = counts.get(e2, 0)
        sizes[(e1, e2)] = n1 * (n1 - 1) // 2 if e1 == e2 else n1 * n2
    return sizes


def bag_of_bonds(s: Structure, params: DescriptorParams) -> GlobalDescriptor:
    """Off-diagonal Coulomb terms bagged per element pair, each bag sorted descending."""
    sizes = _bag_sizes(params)
    m = _coulomb_entries(s)
    bags: dict[tuple[str, str], list[float]] = {pair: [] for pair in ELEMENT_PAIRS}
    for i in range(s.n_atoms):
        for j in range(i + 1, s.n_atoms):
            pair = _canonical_pair(s.elements[i], s.elements[j])
            bags[pair].append(m[i, j])
    parts = []
    for pair in ELEMENT_PAIRS:
        size = sizes[pair]
        vals = sorted(bags[pair], reverse=True)
        if len(vals) > size:
            raise ConfigError(
                f"bag {pair} holds {len(vals)} terms but padding allows {size} "
                f"(structure {s.id!r})"
            )
        parts.append(np.pad(np.array(vals, dtype=float), (0, size - len(vals))))
    return GlobalDescriptor(np.concatenate(parts) if parts else np.zeros(0))


def _cutoff(r, r_cut):
    return np.where(r < r_cut, 0.5 * (np.cos(np.pi * r / r_cut) + 1.0), 0.0)


def lmb_dimension(params: LmbParams) -> int:
    p = len(SUPPORTED_ELEMENTS) * params.n_radial
    if params.use_three_body:
        p += len(ELEMENT_PAIRS) * params.n_angular
    return p


def local_many_body(s: Structure, params: DescriptorParams) -> LocalDescriptor:
    """Gaussian-smeared radial histograms per neighbour element, plus angular
    three-body histograms per unordered neighbour-element pair, under a smooth
    cosine cutoff.  Rotation/translation invariant by construction."""
    lp = params.lmb
    n = s.n_atoms
    p_local = lmb_dimension(lp)
    radial_centers = np.linspace(0.5, lp.r_cut, lp.n_radial)
    angular_centers = np.linspace(0.0, np.pi, lp.n_angular)
    elem_idx = {e: i for i, e in enumerate(SUPPORTED_ELEMENTS)}
    pair_idx = {pair: i for i, pair in enumerate(ELEMENT_PAIRS)}

    dists = squareform(pdist(s.coords)) if n > 1 else np.zeros((1, 1))
    out = np.zeros((n, p_local))
    for i in range(n):
        neigh = [j for j in range(n) if j != i and dists[i, j] < lp.r_cut]
        for j in neigh:
            r = dists[i, j]
            block = elem_idx[s.elements[j]] * lp.n_radial
            out[i, block : block + lp.n_radial] += (
                np.exp(-((r - radial_centers) ** 2) / (2 * lp.radial_width**2))
                * _cutoff(r, lp.r_cut)
            )
        if lp.use_three_body and len(neigh) >= 2:
            base = len(SUPPORTED_ELEMENTS) * lp.n_radial
            for a, j in enumerate(neigh):
                for k in neigh[a + 1 :]:
                    rij, rik = dists[i, j], dists[i, k]
                    cos_t = np.dot(s.coords[j] - s.coords[i], s.coords[k] - s.coords[i]) / (rij * rik)
                    theta = np.arccos(np.clip(cos_t, -1.0, 1.0))
                    pair = _canonical_pair(s.elements[j], s.elements[k])
                    block = base + pair_idx[pair] * lp.n_angular
                    out[i, block : block + lp.n_angular] += (
                        np.exp(-((theta - angular_centers) ** 2) / (2 * lp.angular_width**2))
                        * _cutoff(rij, lp.r_cut)
                        * _cutoff(rik, lp.r_cut)
                    )
    return LocalDescriptor(out, s.elements)


def global_pool(d: LocalDescriptor) -> GlobalDescriptor:
    """Sum per-atom rows into one global vector."""
    if d.vectors.shape[0] == 0:
        raise ShapeError("cannot pool an empty local descriptor")
    return GlobalDescriptor(d.vectors.sum(axis=0))


def featurize(structures, params: DescriptorParams, pooled=True):
    """Descriptors for a list of structures.

    For CM/BoB (and pooled LMB) returns a list of GlobalDescriptor; with
    pooled=False and kind LMB returns LocalDescriptor per structure.
    """
    if params.kind == "CM":
        return [coulomb_matrix(s, params) for s in structures]
    if params.kind == "BoB":
        return [bag_of_bonds(s, params) for s in structures]
    locals_ = [local_many_body(s, params) for s in structures]
    if pooled:
        return [global_pool(d) for d in locals_]
    return locals_


def infer_padding(structures) -> dict[str, int]:
    """Smallest per-element padding covering every structure in a dataset."""
    counts: dict[str, int] = {}
    for s in structures:
        local = {}
        for e in s.elements:
            local[e] = local.get(e, 0) + 1
        for e, c in local.items():
            counts[e] = max(counts.get(e, 0), c)
    return counts


def global_matrix(descs) -> np.ndarray:
    """Stack GlobalDescriptors into a (n, p) matrix."""
    return np.vstack([d.vector for d in descs])
