"""Cuboids and the cube lattice.

A cuboid is an *ordered* tuple of dimension indices.  Order matters for
batching (a cuboid can only ride along another whose dimension sequence it
prefixes); the canonical id (an n-bit set) identifies the view regardless of
order.  The empty tuple is the grand-total cuboid ``all``.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Iterable, Sequence

from .errors import ConfigError

MAX_DIMS = 16
DIM_LETTERS = "ABCDEFGHIJKLMNOP"

Cuboid = tuple  # tuple[int, ...]

ALL: Cuboid = ()


@dataclass(frozen=True)
class Dimension:
    index: int
    name: str
    type: str = "int"  # "int" | "str" | "date"


@dataclass(frozen=True)
class LatticeGroup:
    arity: int
    members: tuple  # tuple[Cuboid, ...], each in ascending dimension order


def check_dims(n: int) -> None:
    if not 1 <= n <= MAX_DIMS:
        raise ConfigError(f"dimension count must be in 1..{MAX_DIMS}, got {n}")


def canonical_id(cuboid: Iterable[int]) -> int:
    mask = 0
    for d in cuboid:
        mask |= 1 << d
    return mask


def from_mask(mask: int) -> Cuboid:
    return tuple(i for i in range(mask.bit_length()) if mask >> i & 1)


def validate(cuboid: Sequence[int], n: int) -> Cuboid:
    c = tuple(cuboid)
    if len(set(c)) != len(c):
        raise ConfigError(f"cuboid {c} repeats a dimension")
    for d in c:
        if not 0 <= d < n:
            raise ConfigError(f"cuboid {c} references dimension {d} outside 0..{n - 1}")
    return c


def label(cuboid: Sequence[int]) -> str:
    """Textual form: one letter per dimension position, e.g. ``ABC``."""
    if not cuboid:
        return "all"
    return "".join(DIM_LETTERS[d] for d in cuboid)


def parse_label(text: str, n: int) -> Cuboid:
    text = text.strip()
    if text.lower() == "all":
        return ALL
    try:
        dims = tuple(DIM_LETTERS.index(ch) for ch in text.upper())
    except ValueError:
        raise ConfigError(f"bad cuboid label {text!r}") from None
    return validate(dims, n)


def enumerate_lattice(n: int) -> list[LatticeGroup]:
    """Groups G_1..G_n of the lattice (the ``all`` cuboid excluded)."""
    check_dims(n)
    by_arity: dict[int, list[int]] = {i: [] for i in range(1, n + 1)}
    for mask in range(1, 1 << n):
        by_arity[bin(mask).count("1")].append(mask)
    return [
        LatticeGroup(arity=i, members=tuple(from_mask(m) for m in by_arity[i]))
        for i in range(1, n + 1)
    ]


def group_size(n: int, i: int) -> int:
    return comb(n, i)


def cuboid_numbering(n: int) -> dict[int, int]:
    """Canonical id -> bit position in a batch identifier.

    ``all`` is number 0, then groups in ascending arity, canonical ids
    ascending within a group.
    """
    check_dims(n)
    numbering = {0: 0}
    nxt = 1
    for group in enumerate_lattice(n):
        for member in group.members:
            numbering[canonical_id(member)] = nxt
            nxt += 1
    return numbering


def is_prefix_ancestor(a: Sequence[int], d: Sequence[int]) -> bool:
    """True iff ``a`` is a non-empty strict prefix of ``d`` (a ≺ d)."""
    return 0 < len(a) < len(d) and tuple(d[: len(a)]) == tuple(a)


def rotate_hops(cuboid: Sequence[int], hops: int, n: int) -> Cuboid:
    """Advance every dimension ``hops`` steps along the cycle d0→d1→…→d(n-1)→d0."""
    if hops < 0:
        raise ConfigError("hops must be non-negative")
    return tuple((d + hops) % n for d in cuboid)
