"""Semantic labels, category grouping, and per-pixel visibility targets.

Nine scene classes are grouped into three render categories:

    Background <- Grass, Ground, Road, Sky, Unknown   (always behind CG)
    Simple     <- Building, Car, TreeTrunk            (clean contours)
    Complex    <- Tree                                (foliage-like contours)

Each category carries four user-set visibility levels (V_f1, V_f2, V_b1,
V_b2): the desired level when the real scene is foreground / background,
plus a fallback level blended in where the classifier is uncertain.  The
per-pixel target visibility is

    V_f  = 1/2 V_f1 + 1/2 ((1 - g) V_f1 + g V_f2)        (same for V_b)
    w    = 1/sqrt(2 pi sigma) * exp(-P_f^2 / (2 sigma))
    V_cg = (1 - w) V_f + w V_b

with g the classifier uncertainty and P_f the foreground probability.
The weighting uses sigma (not sigma squared) in both places; the default
sigma = 1/(2 pi) makes w(0) = 1 exactly, so V_cg reduces to V_b where the
real scene is certainly background.  w is clamped to [0, 1] for smaller
sigma values.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .depth import ProbabilityMap

log = logging.getLogger(__name__)

UNCERTAINTY_EPS = 1e-4


class Label(IntEnum):
    BUILDING = 0
    GRASS = 1
    CAR = 2
    GROUND = 3
    ROAD = 4
    SKY = 5
    TREE = 6
    TREE_TRUNK = 7
    UNKNOWN = 8


class Category(IntEnum):
    BACKGROUND = 0
    SIMPLE = 1
    COMPLEX = 2


CATEGORY_OF_LABEL = {
    Label.BUILDING: Category.SIMPLE,
    Label.GRASS: Category.BACKGROUND,
    Label.CAR: Category.SIMPLE,
    Label.GROUND: Category.BACKGROUND,
    Label.ROAD: Category.BACKGROUND,
    Label.SKY: Category.BACKGROUND,
    Label.TREE: Category.COMPLEX,
    Label.TREE_TRUNK: Category.SIMPLE,
    Label.UNKNOWN: Category.BACKGROUND,
}

# Display palette for label map PNGs (index = Label value).
LABEL_PALETTE = np.array(
    [
        (70, 70, 70),     # Building
        (112, 180, 60),   # Grass
        (0, 0, 142),      # Car
        (152, 120, 90),   # Ground
        (128, 64, 128),   # Road
        (70, 130, 180),   # Sky
        (107, 142, 35),   # Tree
        (110, 80, 50),    # TreeTrunk
        (0, 0, 0),        # Unknown
    ],
    dtype=np.uint8,
)


@dataclass
class SemanticMap:
    """Per-pixel class label plus classifier uncertainty g in (0, 1).

    Uncertainty values outside the open interval are clamped to
    [UNCERTAINTY_EPS, 1 - UNCERTAINTY_EPS].
    """

    labels: np.ndarray
    uncertainty: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        g = np.asarray(self.uncertainty, dtype=np.float64)
        if labels.shape != g.shape or labels.ndim != 2:
            raise ValueError("labels and uncertainty must be matching 2D arrays")
        self.labels = labels.astype(np.uint8)
        self.uncertainty = np.clip(g, UNCERTAINTY_EPS, 1.0 - UNCERTAINTY_EPS)


@dataclass
class CategoryMap:
    """Per-pixel render category; ``unmapped_count`` counts label codes
    outside the known set (treated as Unknown)."""

    categories: np.ndarray
    unmapped_count: int = 0


@dataclass(frozen=True)
class VisibilityParams:
    """Visibility levels for one category; all must be nonnegative.

    Note the published defaults themselves put Simple's fallback V_f2
    above V_f1, so no ordering between the pairs is enforced.
    """

    v_f1: float
    v_f2: float
    v_b1: float
    v_b2: float

    def __post_init__(self):
        if min(self.v_f1, self.v_f2, self.v_b1, self.v_b2) < 0:
            raise ValueError("visibility levels must be nonnegative")


# Default visibility levels per category.
DEFAULT_VISIBILITY_TABLE = {
    Category.BACKGROUND: VisibilityParams(10.0, 10.0, 10.0, 10.0),
    Category.SIMPLE: VisibilityParams(0.0005, 0.001, 5.0, 4.0),
    Category.COMPLEX: VisibilityParams(1.5, 1.0, 4.0, 2.5),
}

DEFAULT_SIGMA = 1.0 / (2.0 * math.pi)


@dataclass
class VisibilityField:
    """Per-pixel foreground/background/target visibility values."""

    v_f: np.ndarray
    v_b: np.ndarray
    v_cg: np.ndarray
    omega: np.ndarray
    sigma: float


def group_categories(sem: SemanticMap) -> CategoryMap:
    """Map the 9-class label image onto the 3 render categories.

    Unknown label codes are counted and treated as the Unknown class
    (hence Background).
    """
    lut = np.full(256, Category.BACKGROUND, dtype=np.uint8)
    for label, cat in CATEGORY_OF_LABEL.items():
        lut[int(label)] = int(cat)
    known = np.zeros(256, dtype=bool)
    known[[int(l) for l in Label]] = True

    labels = sem.labels
    unmapped = int((~known[labels]).sum())
    if unmapped:
        log.warning("%d pixels carry unknown label codes; treating them as Unknown", unmapped)
    return CategoryMap(lut[labels], unmapped_count=unmapped)


def visibility_from_uncertainty(category: Category, g, params: VisibilityParams | None = None):
    """Uncertainty-weighted visibility pair (V_f, V_b) for one category.

    Affine in g: g = 0 gives (V_f1, V_b1) exactly, g = 1 gives the
    midpoints ((V_f1 + V_f2)/2, (V_b1 + V_b2)/2).  Without explicit
    ``params`` the category's default levels are used.
    """
    if params is None:
        params = DEFAULT_VISIBILITY_TABLE[Category(category)]
    g = np.asarray(g, dtype=np.float64)
    v_f = 0.5 * params.v_f1 + 0.5 * ((1.0 - g) * params.v_f1 + g * params.v_f2)
    v_b = 0.5 * params.v_b1 + 0.5 * ((1.0 - g) * params.v_b1 + g * params.v_b2)
    # exact collapse when the pair coincides, keeping the uncertainty-blended
    # and fixed-level modes bit-comparable
    if params.v_f1 == params.v_f2:
        v_f = np.full_like(g, params.v_f1)
    if params.v_b1 == params.v_b2:
        v_b = np.full_like(g, params.v_b1)
    return v_f, v_b


def probability_weight(p_f, sigma: float = DEFAULT_SIGMA):
    """Gaussian-tail weight of the foreground probability, clamped to [0, 1].

    w = 1/sqrt(2 pi sigma) * exp(-P_f^2 / (2 sigma)); sigma appears in
    both the prefactor and the exponent.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    p_f = np.asarray(p_f, dtype=np.float64)
    omega = np.exp(-(p_f**2) / (2.0 * sigma)) / math.sqrt(2.0 * math.pi * sigma)
    return np.clip(omega, 0.0, 1.0)


def target_visibility(v_f, v_b, omega):
    """Blend the visibility pair: V_cg = (1 - w) V_f + w V_b.

    Clamped to the [min(V_f, V_b), max(V_f, V_b)] interval (a no-op for
    w in [0, 1]).
    """
    v_f = np.asarray(v_f, dtype=np.float64)
    v_b = np.asarray(v_b, dtype=np.float64)
    omega = np.asarray(omega, dtype=np.float64)
    v_cg = (1.0 - omega) * v_f + omega * v_b
    return np.clip(v_cg, np.minimum(v_f, v_b), np.maximum(v_f, v_b))


def _table_arrays(table):
    v = np.zeros((len(Category), 4), dtype=np.float64)
    for cat in Category:
        p = table[cat]
        v[int(cat)] = (p.v_f1, p.v_f2, p.v_b1, p.v_b2)
    return v


def visibility_field(sem: SemanticMap, prob: ProbabilityMap,
                     table=None, sigma: float = DEFAULT_SIGMA) -> VisibilityField:
    """Per-pixel visibility targets from labels, uncertainty and P_f."""
    if table is None:
        table = DEFAULT_VISIBILITY_TABLE
    if sem.labels.shape != prob.p.shape:
        raise ValueError("semantic map and probability map dimensions differ")

    cats = group_categories(sem).categories
    tab = _table_arrays(table)
    v_f1 = tab[cats, 0]
    v_f2 = tab[cats, 1]
    v_b1 = tab[cats, 2]
    v_b2 = tab[cats, 3]

    g = sem.uncertainty
    v_f = 0.5 * v_f1 + 0.5 * ((1.0 - g) * v_f1 + g * v_f2)
    v_b = 0.5 * v_b1 + 0.5 * ((1.0 - g) * v_b1 + g * v_b2)
    v_f = np.where(v_f1 == v_f2, v_f1, v_f)
    v_b = np.where(v_b1 == v_b2, v_b1, v_b)

    omega = probability_weight(prob.p, sigma)
    v_cg = target_visibility(v_f, v_b, omega)
    return VisibilityField(v_f=v_f, v_b=v_b, v_cg=v_cg, omega=omega, sigma=sigma)


def fixed_visibility_field(categories: np.ndarray, prob: ProbabilityMap,
                           table=None, sigma: float = DEFAULT_SIGMA) -> VisibilityField:
    """Visibility targets with fixed per-category levels (no uncertainty mixing).

    Uses each category's (V_f1, V_b1) directly, so the classifier
    uncertainty has no effect in this mode.
    """
    if table is None:
        table = DEFAULT_VISIBILITY_TABLE
    if categories.shape != prob.p.shape:
        raise ValueError("category map and probability map dimensions differ")
    tab = _table_arrays(table)
    cats = np.asarray(categories)
    v_f = tab[cats, 0]
    v_b = tab[cats, 2]
    omega = probability_weight(prob.p, sigma)
    v_cg = target_visibility(v_f, v_b, omega)
    return VisibilityField(v_f=v_f, v_b=v_b, v_cg=v_cg, omega=omega, sigma=sigma)


def load_visibility_table(path) -> dict:
    """Read a per-category visibility table from a JSON file.

    Schema: {"Background": {"v_f1": ..., "v_f2": ..., "v_b1": ..., "v_b2": ...}, ...}
    Missing categories keep their defaults.
    """
    with open(path) as fh:
        raw = json.load(fh)
    table = dict(DEFAULT_VISIBILITY_TABLE)
    names = {c.name.capitalize(): c for c in Category}
    for key, values in raw.items():
        cat = names.get(key.capitalize())
        if cat is None:
            raise ValueError(f"unknown category {key!r} in visibility table")
        table[cat] = VisibilityParams(
            float(values["v_f1"]), float(values["v_f2"]),
            float(values["v_b1"]), float(values["v_b2"]),
        )
    return table


def save_visibility_table(path, table) -> None:
    out = {
        cat.name.capitalize(): {
            "v_f1": p.v_f1, "v_f2": p.v_f2, "v_b1": p.v_b1, "v_b2": p.v_b2,
        }
        for cat, p in table.items()
    }
    Path(path).write_text(json.dumps(out, indent=2) + "\n")
