"""Structure ingestion, delta labels, fold planning and subsampling."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, ShapeError, UnsupportedElement

SUPPORTED_ELEMENTS = ("H", "C", "N", "O", "F", "S")

HARTREE_TO_KCALMOL = 627.509474

# "SA4W5" or "(SA)4(W)5" -> {"SA": 4, "W": 5}
DEFAULT_COMPOSITION_PATTERN = r"\(?([A-Z][A-Za-z]*?)\)?(\d+)"


@dataclass(frozen=True)
class Structure:
    """One molecule or cluster: element symbols plus Cartesian coordinates (Angstrom)."""

    id: str
    elements: tuple[str, ...]
    coords: np.ndarray  # (n_atoms, 3)
    composition: dict[str, int] | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ShapeError(f"coords must be (n, 3), got {coords.shape}")
        if len(self.elements) != coords.shape[0]:
            raise ShapeError("element count does not match coordinate count")
        if coords.shape[0] < 1:
            raise ShapeError("structure must contain at least one atom")
        if not np.all(np.isfinite(coords)):
            raise ParseError(f"non-finite coordinates in structure {self.id!r}")
        for e in self.elements:
            if e not in SUPPORTED_ELEMENTS:
                raise UnsupportedElement(f"unsupported element {e!r} in structure {self.id!r}")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "elements", tuple(self.elements))

    @property
    def n_atoms(self) -> int:
        return len(self.elements)


@dataclass(frozen=True)
class LabeledSet:
    """Structures with labels in kcal/mol, optionally set up for delta learning."""

    structures: list[Structure]
    labels: np.ndarray
    label_kind: str = "direct"  # "direct" | "delta"
    low_level_labels: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=float)
        if len(labels) != len(self.structures):
            raise ShapeError("label count does not match structure count")
        if self.label_kind not in ("direct", "delta"):
            raise ConfigError(f"unknown label_kind {self.label_kind!r}")
        if self.label_kind == "delta":
            if self.low_level_labels is None:
                raise ConfigError("delta labels require low_level_labels")
            low = np.asarray(self.low_level_labels, dtype=float)
            if len(low) != len(labels):
                raise ShapeError("low_level_labels length mismatch")
            object.__setattr__(self, "low_level_labels", low)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.structures)


@dataclass(frozen=True)
class FoldPlan:
    """Deterministic partition of n items into k_cv folds of near-equal size."""

    n: int
    k_cv: int
    seed: int
    assignments: np.ndarray = field(repr=False, default=None)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def parse_xyz(path, format="plain", property_column=None, composition_pattern=None):
    """Parse a (multi-frame) XYZ file.

    Returns a list of (Structure, label-or-None) pairs, one per frame.  In
    ``qm9_extended`` format the label is read from the whitespace-split comment
    line at index ``property_column``.  A composition tag is extracted from the
    comment line (or filename) when ``composition_pattern`` matches.
    """
    if format not in ("plain", "qm9_extended"):
        raise ConfigError(f"unknown xyz format {format!r}")
    if format == "qm9_extended" and property_column is None:
        raise ConfigError("qm9_extended format requires property_column")

    with open(path) as fh:
        lines = fh.read().splitlines()

    out = []
    i = 0
    frame = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        try:
            n_atoms = int(lines[i].split()[0])
        except ValueError:
            raise ParseError(f"{path}:{i + 1}: expected an atom count, got {lines[i]!r}")
        if n_atoms < 1:
            raise ParseError(f"{path}:{i + 1}: atom count must be positive")
        if i + 1 + n_atoms >= len(lines) + 1 and i + 2 + n_atoms > len(lines):
            raise ParseError(f"{path}:{i + 1}: frame declares {n_atoms} atoms but file ends early")
        comment = lines[i + 1] if i + 1 < len(lines) else ""
        elements = []
        coords = []
        for j in range(n_atoms):
            ln = i + 2 + j
            if ln >= len(lines):
                raise ParseError(f"{path}:{i + 1}: frame declares {n_atoms} atoms but file ends early")
            parts = lines[ln].split()
            if len(parts) < 4:
                raise ParseError(f"{path}:{ln + 1}: expected 'element x y z', got {lines[ln]!r}")
            elements.append(parts[0])
            try:
                coords.append([float(p.replace("*^", "e")) for p in parts[1:4]])
            except ValueError:
                raise ParseError(f"{path}:{ln + 1}: bad coordinate in {lines[ln]!r}")

        label = None
        if format == "qm9_extended":
            fields = comment.split()
            if property_column >= len(fields):
                raise ParseError(
                    f"{path}:{i + 2}: property column {property_column} out of range "
                    f"(comment has {len(fields)} fields)"
                )
            try:
                label = float(fields[property_column].replace("*^", "e"))
            except ValueError:
                raise ParseError(f"{path}:{i + 2}: property field {fields[property_column]!r} is not a number")

        composition = None
        if composition_pattern is not None:
            composition = parse_composition(comment, composition_pattern)
            if not composition:
                composition = parse_composition(str(path), composition_pattern)

        out.append((Structure(id=f"{path}#{frame}", elements=tuple(elements),
                              coords=np.array(coords), composition=composition or None), label))
        i += 2 + n_atoms
        frame += 1
    return out


def parse_composition(text, pattern=DEFAULT_COMPOSITION_PATTERN):
    """Extract monomer counts like 'SA4W5' -> {'SA': 4, 'W': 5} using a
    configurable regex whose groups are (tag, count)."""
    comp: dict[str, int] = {}
    for tag, count in re.findall(pattern, text):
        comp[tag] = comp.get(tag, 0) + (int(count) if count else 1)
    return comp


def make_delta_labels(high, low):
    """Elementwise residual high - low; reconstruction low + delta == high exactly."""
    high = np.asarray(high, dtype=float)
    low = np.asarray(low, dtype=float)
    if high.shape != low.shape:
        raise ShapeError(f"label shape mismatch: {high.shape} vs {low.shape}")
    return high - low


def make_folds(n, k_cv, seed):
    """Random balanced partition of range(n) into k_cv folds; fold sizes differ by at most 1."""
    if k_cv < 2:
        raise ConfigError("k_cv must be at least 2")
    if n < k_cv:
        raise ConfigError(f"cannot split {n} items into {k_cv} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    assignments = np.empty(n, dtype=int)
    assignments[perm] = np.arange(n) % k_cv
    return FoldPlan(n=n, k_cv=k_cv, seed=seed, assignments=assignments)


def subsample(indices_pool, m, seed):
    """Uniform subsample of m indices without replacement.

    At a fixed seed, subsamples are nested: the m-sample is a prefix of the
    m'-sample for any m' >= m, so learning-curve points share training data.
    """
    pool = np.asarray(list(indices_pool))
    if m > len(pool):
        raise ConfigError(f"requested {m} items from a pool of {len(pool)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(pool))
    return pool[perm[:m]]


def dataset_manifest(data: LabeledSet, seed=None):
    """Canonical JSON-serializable summary of a labeled dataset."""
    labels = data.labels
    return {
        "n_structures": len(data),
        "ids": [s.id for s in data.structures],
        "label_kind": data.label_kind,
        "label_mean": float(np.mean(labels)),
        "label_std": float(np.std(labels)),
        "label_min": float(np.min(labels)),
        "label_max": float(np.max(labels)),
        "seed": seed,
    }


def write_manifest(data: LabeledSet, path, seed=None):
    with open(path, "w") as fh:
        json.dump(dataset_manifest(data, seed=seed), fh, indent=2)


def structure_to_xyz(s: Structure, comment="") -> str:
    """Serialize a structure as one XYZ frame, coordinates at full precision."""
    lines = [str(s.n_atoms), comment]
    for e, (x, y, z) in zip(s.elements, s.coords):
        lines.append(f"{e} {x:.14g} {y:.14g} {z:.14g}")
    return "\n".join(lines) + "\n"
