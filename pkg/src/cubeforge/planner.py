"""Greedy batch plan generation.

Every batch is a descendant cuboid (the *sort dimensions*) plus whichever of
its prefixes are still available; the shortest member gives the *partition
dimensions*.  Batch construction always starts from the group of largest
arity that still has available cuboids; the hop heuristic proposes the first
permutation to try, and the permutation search stops as soon as one is found
whose every prefix is available.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import permutations
from typing import Iterable, Optional, Sequence

from . import lattice
from .errors import ConfigError, PlanError
from .lattice import Cuboid, canonical_id, label

# Above this arity the permutation search switches to an equivalent subset DP.
_ENUMERATE_MAX_ARITY = 8


@dataclass(frozen=True)
class Batch:
    index: int
    cuboids: tuple  # members ordered by length, shortest first
    identifier: int

    @property
    def sort_dims(self) -> Cuboid:
        return self.cuboids[-1]

    @property
    def partition_dims(self) -> Cuboid:
        return self.cuboids[0]

    def __len__(self) -> int:
        return len(self.cuboids)


@dataclass(frozen=True)
class BatchPlan:
    n: int
    batches: tuple
    requested: frozenset  # canonical ids
    include_all: bool = True
    numbering: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.batches)

    def cuboids(self) -> list:
        out = [c for b in self.batches for c in b.cuboids]
        if self.include_all:
            out.append(lattice.ALL)
        return out

    def batch_by_identifier(self, ident: int) -> Batch:
        for b in self.batches:
            if b.identifier == ident:
                return b
        raise PlanError(f"unknown batch identifier {ident:#x}")


def _available_prefixes(perm: Sequence[int], available: set) -> list:
    """Available strict prefixes of ``perm`` (shortest first)."""
    out = []
    mask = 0
    for d in perm[:-1]:
        mask |= 1 << d
        if mask in available:
            out.append(tuple(perm[: bin(mask).count("1")]))
    return out


def _count_prefixes(perm: Sequence[int], available: set) -> int:
    count = 0
    mask = 0
    for d in perm[:-1]:
        mask |= 1 << d
        if mask in available:
            count += 1
    return count


def _search_enumerate(dims: tuple, available: set, hop_perm: Optional[tuple]) -> tuple:
    full = len(dims) - 1
    best_perm, best = None, -1
    for perm in permutations(dims):
        count = _count_prefixes(perm, available)
        if count > best:
            best_perm, best = perm, count
            if count == full:
                break
    if hop_perm is not None and _count_prefixes(hop_perm, available) == best:
        return hop_perm
    return best_perm


def _search_dp(dims: tuple, available: set, hop_perm: Optional[tuple]) -> tuple:
    """Same result as exhaustive enumeration, via DP over prefix sets."""
    alpha = canonical_id(dims)
    memo: dict = {}

    def best_from(prefix: int) -> int:
        if prefix == alpha:
            return 0
        hit = memo.get(prefix)
        if hit is not None:
            return hit
        result = 0
        for d in dims:
            if prefix >> d & 1:
                continue
            nxt = prefix | 1 << d
            gain = 1 if (nxt != alpha and nxt in available) else 0
            result = max(result, gain + best_from(nxt))
        memo[prefix] = result
        return result

    best = best_from(0)
    if hop_perm is not None and _count_prefixes(hop_perm, available) == best:
        return hop_perm
    perm, prefix, remaining = [], 0, best
    for _ in range(len(dims)):
        for d in sorted(dims):
            if prefix >> d & 1:
                continue
            nxt = prefix | 1 << d
            gain = 1 if (nxt != alpha and nxt in available) else 0
            if gain + best_from(nxt) == remaining:
                perm.append(d)
                prefix, remaining = nxt, remaining - gain
                break
    return tuple(perm)


def best_permutation(dims: Sequence[int], available: set, hop_perm: Optional[tuple] = None) -> tuple:
    """Permutation of ``dims`` with the most available prefixes.

    Ties go to ``hop_perm`` when it is among the best, else to the
    lexicographically smallest permutation.
    """
    dims = tuple(sorted(dims))
    if hop_perm is not None and _count_prefixes(hop_perm, available) == len(dims) - 1:
        return tuple(hop_perm)
    if len(dims) <= _ENUMERATE_MAX_ARITY:
        return _search_enumerate(dims, available, hop_perm)
    return _search_dp(dims, available, hop_perm)


def batch_identifier(cuboids: Iterable[Sequence[int]], numbering: dict) -> int:
    ident = 0
    for c in cuboids:
        try:
            ident |= 1 << numbering[canonical_id(c)]
        except KeyError:
            raise PlanError(f"cuboid {label(c)} has no number") from None
    return ident


def identifier_bits(ident: int, n: int) -> str:
    """Render an identifier as 2^n characters, bit 0 first."""
    return "".join("1" if ident >> j & 1 else "0" for j in range(1 << n))


def identifier_hex(ident: int, n: int) -> str:
    width = max(1, (1 << n) // 4)
    return format(ident, f"0{width}x")


def roles(batch_cuboids: Sequence[Sequence[int]]) -> tuple:
    """(sort_dims, partition_dims) of a batch given as a set of cuboids."""
    members = [tuple(c) for c in batch_cuboids]
    if not members:
        raise PlanError("empty batch has no roles")
    members.sort(key=len)
    lengths = [len(c) for c in members]
    if len(set(lengths)) != len(lengths):
        raise PlanError("batch members do not form a prefix chain")
    longest = members[-1]
    for c in members[:-1]:
        if not lattice.is_prefix_ancestor(c, longest):
            raise PlanError(f"{label(c)} is not a prefix of {label(longest)}")
    return longest, members[0]


def generate_plan(n: int, requested: Optional[Iterable[Sequence[int]]] = None,
                  include_all: bool = True) -> BatchPlan:
    lattice.check_dims(n)
    numbering = lattice.cuboid_numbering(n)
    if requested is None:
        available = set(range(1, 1 << n))
    else:
        available = set()
        for c in requested:
            c = lattice.validate(c, n)
            if c:
                available.add(canonical_id(c))
            else:
                include_all = True
        if not available and not include_all:
            raise ConfigError("requested cuboid set is empty")
    target = frozenset(available)

    batches = []
    last_taken: dict = {}  # arity -> permutation most recently made unavailable
    while available:
        top = max(bin(m).count("1") for m in available)
        hop_perm = None
        if top in last_taken:
            base = last_taken[top]
            for hops in range(1, n):
                cand = lattice.rotate_hops(base, hops, n)
                if canonical_id(cand) in available:
                    hop_perm = cand
                    break
        if hop_perm is not None:
            alpha = lattice.from_mask(canonical_id(hop_perm))
        else:
            alpha = lattice.from_mask(min(m for m in available if bin(m).count("1") == top))
        perm = best_permutation(alpha, available, hop_perm)
        members = _available_prefixes(perm, available) + [tuple(perm)]
        for c in members:
            available.discard(canonical_id(c))
            last_taken[len(c)] = tuple(c)
        batches.append(Batch(
            index=len(batches),
            cuboids=tuple(members),
            identifier=batch_identifier(members, numbering),
        ))
    return BatchPlan(n=n, batches=tuple(batches), requested=target,
                     include_all=include_all, numbering=numbering)


def format_plan(plan: BatchPlan) -> list:
    lines = []
    for b in plan.batches:
        lines.append(
            f"B{b.index}: sort={label(b.sort_dims)} partition={label(b.partition_dims)} "
            f"members={','.join(label(c) for c in b.cuboids)} "
            f"id={identifier_hex(b.identifier, plan.n)}"
        )
    return lines
