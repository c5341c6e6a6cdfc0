from __future__ import annotations

from bisect import bisect_left, bisect_right
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Literal

from .errors import OutOfRangeError, TailError
from .log import get_logger
from .scale import Scale, build_scale, controlling_sequence
from .types import IntervalKind, TailDocument

logger = get_logger(__name__)

ViolationKind = Literal["shape", "zero", "overlap", "adjacent", "center", "presence", "sparse"]


@dataclass(frozen=True, slots=True)
class Component:
    start: int
    level: int
    size: int

    @property
    def end(self) -> int:
        """Last index of the component (inclusive)."""
        return self.start + self.size - 1


@dataclass(frozen=True, slots=True)
class IntervalClass:
    kind: IntervalKind
    level: int

    @property
    def good(self) -> bool:
        return self.kind == "good"


@dataclass(frozen=True, slots=True)
class SparseTail:
    scale: Scale
    depth: int
    components: tuple[tuple[int, ...], ...]

    @property
    def length(self) -> int:
        return self.scale.length(self.depth)

    def starts(self, n: int) -> tuple[int, ...]:
        return self.components[n]

    def iter_components(self) -> Iterator[Component]:
        for n, starts in enumerate(self.components):
            size = self.scale.length(n)
            for s in starts:
                yield Component(start=s, level=n, size=size)


@dataclass(frozen=True, slots=True)
class TailViolation:
    kind: ViolationKind
    level: int
    start: int
    detail: str = ""


@dataclass(frozen=True, slots=True)
class TailReport:
    violations: tuple[TailViolation, ...]
    checked_blocks: int
    sampled: bool = False
    kinds: frozenset[str] = field(default_factory=frozenset)

    @property
    def ok(self) -> bool:
        return not self.violations


def _containing(starts: Sequence[int], size: int, i: int) -> int | None:
    pos = bisect_right(starts, i) - 1
    if pos >= 0 and starts[pos] <= i < starts[pos] + size:
        return starts[pos]
    return None


def build_tail(scale: Scale, depth: int) -> SparseTail:
    if not 0 <= depth <= scale.depth:
        raise TailError(f"depth {depth} outside 0..{scale.depth}")
    levels = scale.levels
    total = levels[depth]
    comps: list[tuple[int, ...]] = [() for _ in range(depth)]
    # Decreasing j: one level-j block at offset T_{j+1}/3 of every T_{j+1} block
    # that is not already covered by a higher level.
    for j in range(depth - 1, -1, -1):
        block = levels[j + 1]
        offset = block // 3
        starts: list[int] = []
        for s in range(0, total, block):
            if any(
                _containing(comps[i], levels[i], s) is not None for i in range(j + 1, depth)
            ):
                continue
            starts.append(s + offset)
        comps[j] = tuple(starts)
    tail = SparseTail(scale=scale, depth=depth, components=tuple(comps))
    logger.debug(
        "tail.built",
        depth=depth,
        length=total,
        components=[len(c) for c in comps],
    )
    return tail


def restrict(tail: SparseTail, depth: int) -> SparseTail:
    """The tail seen on [0, T_depth), keeping levels below ``depth``."""
    if not 0 <= depth <= tail.depth:
        raise TailError(f"depth {depth} outside 0..{tail.depth}")
    bound = tail.scale.length(depth)
    comps = tuple(
        tuple(s for s in tail.components[n] if s < bound) for n in range(depth)
    )
    return SparseTail(scale=tail.scale, depth=depth, components=comps)


def _check_index(tail: SparseTail, i: int) -> None:
    if not 0 <= i < tail.length:
        raise OutOfRangeError(f"index {i} outside [0, {tail.length})")


def component_at(tail: SparseTail, i: int) -> Component | None:
    _check_index(tail, i)
    for n, starts in enumerate(tail.components):
        size = tail.scale.length(n)
        s = _containing(starts, size, i)
        if s is not None:
            return Component(start=s, level=n, size=size)
    return None


def covering_level(tail: SparseTail, i: int) -> int | None:
    found = component_at(tail, i)
    return None if found is None else found.level


def classify(tail: SparseTail, k: int, n: int) -> IntervalClass:
    if not 0 <= n <= tail.depth or k < 0:
        raise OutOfRangeError(f"interval (k={k}, n={n}) outside the tail")
    size = tail.scale.length(n)
    a = k * size
    b = a + size - 1
    if b >= tail.length:
        raise OutOfRangeError(f"interval [{a}, {b}] outside [0, {tail.length})")
    partial = False
    for level in range(n, tail.depth):
        starts = tail.components[level]
        csize = tail.scale.length(level)
        lo = bisect_right(starts, a - csize)
        hi = bisect_right(starts, b)
        for s in starts[lo:hi]:
            if s <= a and b <= s + csize - 1:
                return IntervalClass(kind="bad", level=n)
            partial = True
    if partial:
        return IntervalClass(kind="mixed_below", level=n)
    return IntervalClass(kind="good", level=n)


def validate_tail(tail: SparseTail, *, stride: int = 1) -> TailReport:
    """Check shape, zero exclusion, center position and sparseness of a tail.

    ``stride > 1`` samples every stride-th aligned block instead of all of them.
    """
    if stride < 1:
        raise TailError("stride must be >= 1")
    scale = tail.scale
    total = tail.length
    violations: list[TailViolation] = []

    spans: list[tuple[int, int, int]] = []
    for comp in tail.iter_components():
        if comp.start % comp.size or comp.start < 0 or comp.end >= total:
            violations.append(
                TailViolation("shape", comp.level, comp.start, f"[{comp.start}, {comp.end}] is not an aligned block")
            )
        if comp.start <= 0 <= comp.end:
            violations.append(TailViolation("zero", comp.level, comp.start, "component contains 0"))
        spans.append((comp.start, comp.end, comp.level))
    spans.sort()
    for (s0, e0, _), (s1, e1, l1) in zip(spans, spans[1:]):
        if s1 <= e0:
            violations.append(TailViolation("overlap", l1, s1, f"meets [{s0}, {e0}]"))
        elif s1 == e0 + 1:
            violations.append(TailViolation("adjacent", l1, s1, f"touches [{s0}, {e0}]"))

    eps = controlling_sequence(scale).eps
    checked = 0
    for n in range(1, tail.depth + 1):
        size = scale.length(n)
        below = tail.components[n - 1]
        below_size = scale.length(n - 1)
        third = size // 3
        for index, a in enumerate(range(0, total, size)):
            if index % stride:
                continue
            if any(
                _containing(tail.components[i], scale.length(i), a) is not None
                for i in range(n, tail.depth)
            ):
                continue
            checked += 1
            inside = below[bisect_left(below, a) : bisect_left(below, a + size)]
            if not inside:
                violations.append(TailViolation("presence", n, a, f"no level-{n - 1} component"))
                continue
            if len(inside) > 1:
                violations.append(
                    TailViolation("presence", n, a, f"{len(inside)} level-{n - 1} components, expected one")
                )
            for s in inside:
                if not (a + third <= s and s + below_size <= a + 2 * third):
                    violations.append(
                        TailViolation("center", n, a, f"level-{n - 1} component at {s} outside the middle third")
                    )
            ratio = Fraction(len(inside) * below_size, size)
            if ratio >= eps[n - 1]:
                violations.append(
                    TailViolation("sparse", n, a, f"density {ratio} >= eps_{n}={eps[n - 1]}")
                )
    report = TailReport(
        violations=tuple(violations),
        checked_blocks=checked,
        sampled=stride > 1,
        kinds=frozenset(v.kind for v in violations),
    )
    logger.debug("tail.validated", checked=checked, violations=len(violations))
    return report


def density_profile(tail: SparseTail, m: int, n: int) -> Fraction:
    """#(R_m ∩ [0, n]) / n."""
    if not 0 <= m < tail.depth:
        raise OutOfRangeError(f"level {m} outside 0..{tail.depth - 1}")
    if not 1 <= n <= tail.length:
        raise OutOfRangeError(f"n={n} outside [1, {tail.length}]")
    size = tail.scale.length(m)
    starts = tail.components[m]
    count = 0
    for s in starts[: bisect_right(starts, n)]:
        count += min(size, n - s + 1)
    return Fraction(count, n)


def tail_document(tail: SparseTail) -> TailDocument:
    return {
        "t0": tail.scale.t0,
        "factors": list(tail.scale.factors),
        "depth": tail.depth,
        "components": [list(c) for c in tail.components],
    }


def tail_from_document(doc: TailDocument) -> SparseTail:
    scale = build_scale(int(doc["t0"]), [int(k) for k in doc["factors"]])
    depth = int(doc["depth"])
    comps = tuple(tuple(int(s) for s in level) for level in doc["components"])
    if len(comps) != depth:
        raise TailError(f"expected {depth} component levels, got {len(comps)}")
    return SparseTail(scale=scale, depth=depth, components=comps)
