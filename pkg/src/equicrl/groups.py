"""Finite symmetry groups, their matrix representations, and grid/vector actions.

Supports cyclic C_n and dihedral D_n with exact integer composition tables.
The default group for the planar task suite is D2 = {e, mx, my, r180}:
the two axis reflections plus the 180-degree rotation (Klein four-group).
All representation matrices have entries in {0, +1, -1}, so equivariance
constraints downstream hold without tolerance questions at this layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class GroupSpec:
    """A finite group: cyclic C_n or dihedral D_n (2n elements)."""

    kind: str  # "cyclic" | "dihedral"
    n: int

    def __post_init__(self):
        if self.kind not in ("cyclic", "dihedral"):
            raise ValueError(f"unknown group kind {self.kind!r}")
        if self.n < 1:
            raise ValueError("group order parameter must be >= 1")

    @property
    def order(self) -> int:
        return self.n if self.kind == "cyclic" else 2 * self.n

    @property
    def name(self) -> str:
        return ("C" if self.kind == "cyclic" else "D") + str(self.n)

    def elements(self) -> list["GroupElement"]:
        return [GroupElement(self, i) for i in range(self.order)]

    def element(self, index: int) -> "GroupElement":
        return GroupElement(self, index)

    def identity(self) -> "GroupElement":
        return GroupElement(self, 0)


@dataclass(frozen=True)
class GroupElement:
    """An element identified by its index in the group's canonical ordering."""

    group: GroupSpec
    index: int

    def __post_init__(self):
        if not 0 <= self.index < self.group.order:
            raise ValueError(f"element index {self.index} out of range for {self.group.name}")

    def __mul__(self, other: "GroupElement") -> "GroupElement":
        return compose(self, other)

    def inverse(self) -> "GroupElement":
        return inverse(self)

    @property
    def name(self) -> str:
        return element_names(self.group)[self.index]

    def __repr__(self):
        return f"{self.group.name}:{self.name}"


# Internal element encoding: (ref, rot) meaning s^ref * r^rot, where r is the
# rotation by 2*pi/n and s is the reflection across the x-axis (negates y).
# Composition: (a, j) * (b, k) = ((a + b) % 2, ((-1)^b * j + k) % n).


@lru_cache(maxsize=None)
def _pair_order(group: GroupSpec) -> tuple[tuple[int, int], ...]:
    if group.kind == "cyclic":
        return tuple((0, k) for k in range(group.n))
    if group.n == 2:
        # Canonical D2 ordering {e, mx, my, r180}: mx = s, my = s*r, r180 = r.
        return ((0, 0), (1, 0), (1, 1), (0, 1))
    rotations = tuple((0, k) for k in range(group.n))
    reflections = tuple((1, k) for k in range(group.n))
    return rotations + reflections


@lru_cache(maxsize=None)
def _pair_index(group: GroupSpec) -> dict[tuple[int, int], int]:
    return {pair: i for i, pair in enumerate(_pair_order(group))}


@lru_cache(maxsize=None)
def element_names(group: GroupSpec) -> tuple[str, ...]:
    if group.kind == "dihedral" and group.n == 2:
        return ("e", "mx", "my", "r180")
    names = []
    for ref, rot in _pair_order(group):
        if ref == 0:
            names.append("e" if rot == 0 else f"r{rot}")
        else:
            names.append("s" if rot == 0 else f"sr{rot}")
    return tuple(names)


def elements(group: GroupSpec) -> list[GroupElement]:
    """Canonical element list, identity first."""
    return group.elements()


def compose(g: GroupElement, h: GroupElement) -> GroupElement:
    """Group product g*h (apply h first, then g)."""
    if g.group != h.group:
        raise ValueError(f"cannot compose elements of {g.group.name} and {h.group.name}")
    group = g.group
    order = _pair_order(group)
    a, j = order[g.index]
    b, k = order[h.index]
    n = group.n
    rot = (j if b == 0 else -j) + k
    pair = ((a + b) % 2, rot % n)
    return GroupElement(group, _pair_index(group)[pair])


def inverse(g: GroupElement) -> GroupElement:
    group = g.group
    ref, rot = _pair_order(group)[g.index]
    if ref == 0:
        pair = (0, (-rot) % group.n)
    else:
        pair = (1, rot)  # reflections are involutions
    return GroupElement(group, _pair_index(group)[pair])


@lru_cache(maxsize=None)
def multiplication_table(group: GroupSpec) -> np.ndarray:
    """table[i, j] = index of element_i * element_j."""
    els = group.elements()
    table = np.zeros((group.order, group.order), dtype=np.int64)
    for i, g in enumerate(els):
        for j, h in enumerate(els):
            table[i, j] = compose(g, h).index
    return table


def generators(group: GroupSpec) -> list[GroupElement]:
    """A generating set: the basic rotation, plus the reflection for dihedral."""
    idx = _pair_index(group)
    gens = []
    if group.n > 1:
        gens.append(GroupElement(group, idx[(0, 1)]))
    if group.kind == "dihedral":
        gens.append(GroupElement(group, idx[(1, 0)]))
    return gens


# --- representations ---------------------------------------------------------

# Character tables for groups whose real irreps are all one-dimensional
# (every element squares to the identity).  Rows indexed by canonical element
# order.  For D2 the labels record which coordinate the character tracks.
_D2 = GroupSpec("dihedral", 2)

_IRREP_CHARACTERS: dict[tuple[str, int], dict[str, tuple[int, ...]]] = {
    ("dihedral", 2): {
        "x": (1, 1, -1, -1),   # sign of the x coordinate: flipped by my, r180
        "y": (1, -1, 1, -1),   # sign of the y coordinate: flipped by mx, r180
        "xy": (1, -1, -1, 1),
    },
    ("cyclic", 2): {"sign": (1, -1)},
    ("dihedral", 1): {"sign": (1, -1)},
    ("cyclic", 1): {},
}


class Representation:
    """A matrix representation of a finite group.

    Kinds: "trivial" (dim 1, always [1]), "irrep" (1-dimensional sign
    character, by label), "regular" (|G|-dim permutation matrices), and
    "direct_sum" (block diagonal of parts).
    """

    def __init__(self, group: GroupSpec, kind: str, dimension: int,
                 label: str | None = None, parts: tuple["Representation", ...] = ()):
        self.group = group
        self.kind = kind
        self.dimension = dimension
        self.label = label
        self.parts = parts
        self._cache: dict[int, np.ndarray] = {}

    def __repr__(self):
        if self.kind == "irrep":
            return f"irrep[{self.label}]({self.group.name})"
        if self.kind == "direct_sum":
            return "(" + " + ".join(repr(p) for p in self.parts) + ")"
        return f"{self.kind}({self.group.name})"

    def __eq__(self, other):
        if not isinstance(other, Representation):
            return NotImplemented
        return (self.group, self.kind, self.label, self.parts) == (
            other.group, other.kind, other.label, other.parts)

    def __hash__(self):
        return hash((self.group, self.kind, self.label, self.parts))

    def matrix(self, g: GroupElement) -> np.ndarray:
        if g.group != self.group:
            raise ValueError("element does not belong to this representation's group")
        cached = self._cache.get(g.index)
        if cached is not None:
            return cached
        m = self._build_matrix(g)
        m.setflags(write=False)
        self._cache[g.index] = m
        return m

    def _build_matrix(self, g: GroupElement) -> np.ndarray:
        if self.kind == "trivial":
            return np.ones((1, 1))
        if self.kind == "irrep":
            chars = _IRREP_CHARACTERS[(self.group.kind, self.group.n)][self.label]
            return np.array([[float(chars[g.index])]])
        if self.kind == "regular":
            table = multiplication_table(self.group)
            m = np.zeros((self.group.order, self.group.order))
            for j in range(self.group.order):
                m[table[g.index, j], j] = 1.0
            return m
        if self.kind == "direct_sum":
            blocks = [p.matrix(g) for p in self.parts]
            m = np.zeros((self.dimension, self.dimension))
            off = 0
            for b in blocks:
                d = b.shape[0]
                m[off:off + d, off:off + d] = b
                off += d
            return m
        raise ValueError(f"unknown representation kind {self.kind!r}")

    def character(self) -> np.ndarray:
        return np.array([np.trace(self.matrix(g)) for g in self.group.elements()])


def trivial_rep(group: GroupSpec) -> Representation:
    return Representation(group, "trivial", 1)


def irrep(group: GroupSpec, label: str) -> Representation:
    key = (group.kind, group.n)
    if key not in _IRREP_CHARACTERS:
        raise ValueError(f"1-dimensional irreps not tabulated for {group.name}")
    if label not in _IRREP_CHARACTERS[key]:
        raise ValueError(f"{group.name} has no irrep labeled {label!r}; "
                         f"choose from {sorted(_IRREP_CHARACTERS[key])}")
    return Representation(group, "irrep", 1, label=label)


def regular_rep(group: GroupSpec) -> Representation:
    return Representation(group, "regular", group.order)


def direct_sum(parts) -> Representation:
    parts = tuple(parts)
    if not parts:
        raise ValueError("direct_sum needs at least one part")
    group = parts[0].group
    if any(p.group != group for p in parts):
        raise ValueError("direct_sum parts must share one group")
    dim = sum(p.dimension for p in parts)
    return Representation(group, "direct_sum", dim, parts=parts)


def rep_matrix(rep: Representation, g: GroupElement) -> np.ndarray:
    return rep.matrix(g)


def act_typed_vector(rep: Representation, g: GroupElement, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != rep.dimension:
        raise ValueError(f"vector of length {v.shape[-1]} does not match "
                         f"representation dimension {rep.dimension}")
    return v @ rep.matrix(g).T


# --- actions on grid images and planar coordinates ---------------------------

# Each supported element acts on the square grid through (swap, flip_row,
# flip_col) applied in that order, and on centered (x, y) coordinates through
# a signed permutation matrix.  Rows carry y, columns carry x.


@lru_cache(maxsize=None)
def _grid_ops(group: GroupSpec) -> tuple[tuple[bool, bool, bool], ...]:
    ops = []
    for ref, rot in _pair_order(group):
        if group.n in (1, 2):
            # rot is 0 or the 180-degree turn; reflections fix an axis.
            flip_r = group.n == 2 and rot == 1
            flip_c = flip_r
            if ref:
                flip_r = not flip_r
            ops.append((False, flip_r, flip_c))
        elif group.n == 4:
            swap = rot % 2 == 1
            # rotation r^rot: (x, y) -> R(90*rot)(x, y)
            if rot == 0:
                fr, fc = False, False
            elif rot == 1:
                fr, fc = False, True   # (x,y)->(-y,x): cols from flipped rows
            elif rot == 2:
                fr, fc = True, True
            else:
                fr, fc = True, False
            if ref:
                fr = not fr
            ops.append((swap, fr, fc))
        else:
            raise ValueError(f"grid action not defined for {group.name}; "
                             "supported: C1, C2, C4, D1, D2, D4")
    return tuple(ops)


@lru_cache(maxsize=None)
def _coord_matrices(group: GroupSpec) -> tuple[np.ndarray, ...]:
    if group.n not in (1, 2, 4):
        raise ValueError(f"planar coordinate action not defined for {group.name}")
    mats = []
    s = np.array([[1.0, 0.0], [0.0, -1.0]])
    for ref, rot in _pair_order(group):
        angle = 2.0 * np.pi * rot / group.n
        c, sn = int(round(np.cos(angle))), int(round(np.sin(angle)))
        r = np.array([[c, -sn], [sn, c]], dtype=np.float64)
        m = (s @ r) if ref else r
        m.setflags(write=False)
        mats.append(m)
    return tuple(mats)


class SpatialAction:
    """Exact pixel-permutation action of a group on H x W grids.

    Also carries the matching signed-permutation action on centered (x, y)
    coordinates.  Applying g then g^{-1} is the identity on any image.
    """

    def __init__(self, group: GroupSpec):
        _grid_ops(group)  # validate support early
        self.group = group

    def coord_matrix(self, g: GroupElement) -> np.ndarray:
        return _coord_matrices(self.group)[g.index]

    def apply(self, g: GroupElement, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image)
        if image.ndim < 2:
            raise ValueError("image must have at least 2 dimensions (H, W last)")
        swap, flip_r, flip_c = _grid_ops(self.group)[g.index]
        out = image
        if swap:
            if image.shape[-2] != image.shape[-1]:
                raise ValueError("rotations by 90 degrees need a square grid")
            out = np.swapaxes(out, -2, -1)
        if flip_r:
            out = np.flip(out, axis=-2)
        if flip_c:
            out = np.flip(out, axis=-1)
        return np.ascontiguousarray(out)


def act_image(action: SpatialAction, g: GroupElement, image: np.ndarray) -> np.ndarray:
    return action.apply(g, image)


def check_group_axioms(group: GroupSpec) -> None:
    """Exhaustive closure/associativity/identity/inverse check; raises on failure."""
    els = group.elements()
    table = multiplication_table(group)
    n = group.order
    full = list(range(n))
    for i in range(n):
        if sorted(table[i, :].tolist()) != full or sorted(table[:, i].tolist()) != full:
            raise AssertionError("composition table rows/columns are not permutations")
    for i in range(n):
        if table[0, i] != i or table[i, 0] != i:
            raise AssertionError("identity law fails")
        inv = inverse(els[i]).index
        if table[i, inv] != 0 or table[inv, i] != 0:
            raise AssertionError("inverse law fails")
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if table[table[i, j], k] != table[i, table[j, k]]:
                    raise AssertionError("associativity fails")


def d2() -> GroupSpec:
    """The default symmetry group of the planar suite."""
    return _D2


def d2_element(name: str) -> GroupElement:
    return _D2.element(element_names(_D2).index(name))
