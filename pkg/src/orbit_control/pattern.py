from __future__ import annotations

from bisect import bisect_left, bisect_right
from dataclasses import dataclass

from .errors import NotAdmissibleError, NotGoodIntervalError, PatternError
from .scale import Scale
from .tail import SparseTail, classify
from .types import CellDocument, CellKind, PatternDocument


@dataclass(frozen=True, slots=True)
class Cell:
    start: int
    level: int
    kind: CellKind
    size: int

    @property
    def end(self) -> int:
        """One past the last index."""
        return self.start + self.size


def _cell_start(cell: Cell) -> int:
    return cell.start


@dataclass(frozen=True, slots=True)
class Pattern:
    """A partition of the base [index*T_level, (index+1)*T_level) into r and w cells."""

    scale: Scale
    level: int
    index: int
    cells: tuple[Cell, ...]

    @property
    def start(self) -> int:
        return self.index * self.scale.length(self.level)

    @property
    def end(self) -> int:
        return self.start + self.scale.length(self.level)

    @property
    def trivial(self) -> bool:
        return len(self.cells) == 1 and self.cells[0].kind == "w" and self.cells[0].level == self.level

    def cell_at(self, i: int) -> Cell:
        if not self.start <= i < self.end:
            raise PatternError(f"{i} outside [{self.start}, {self.end})")
        return self.cells[bisect_right(self.cells, i, key=_cell_start) - 1]


@dataclass(frozen=True, slots=True)
class MarkedPointSet:
    points: tuple[int, ...]
    pattern: Pattern

    def __contains__(self, point: object) -> bool:
        if not isinstance(point, int):
            return False
        pos = bisect_left(self.points, point)
        return pos < len(self.points) and self.points[pos] == point

    def __len__(self) -> int:
        return len(self.points)


def check_pattern(pattern: Pattern) -> Pattern:
    scale = pattern.scale
    if not 0 <= pattern.level <= scale.depth:
        raise PatternError(f"level {pattern.level} outside 0..{scale.depth}")
    cursor = pattern.start
    for cell in pattern.cells:
        if cell.start != cursor:
            raise PatternError(f"cells leave a gap or overlap at {cursor}")
        if not 0 <= cell.level <= pattern.level:
            raise PatternError(f"cell at {cell.start} has level {cell.level} above {pattern.level}")
        if cell.size != scale.length(cell.level) or cell.start % cell.size:
            raise PatternError(f"cell at {cell.start} is not an aligned T_{cell.level} block")
        if cell.kind == "r" and cell.level != 0:
            raise PatternError(f"r cell at {cell.start} must have level 0")
        cursor = cell.end
    if cursor != pattern.end:
        raise PatternError(f"cells stop at {cursor}, base ends at {pattern.end}")
    return pattern


def make_pattern(scale: Scale, level: int, index: int, cells: list[tuple[int, int, CellKind]]) -> Pattern:
    """Build and check a pattern from (start, level, kind) triples."""
    built = tuple(Cell(start=s, level=lv, kind=kind, size=scale.length(lv)) for s, lv, kind in cells)
    return check_pattern(Pattern(scale=scale, level=level, index=index, cells=built))


def trivial_pattern(scale: Scale, level: int, index: int = 0) -> Pattern:
    size = scale.length(level)
    return make_pattern(scale, level, index, [(index * size, level, "w")])


def induced_pattern(tail: SparseTail, n: int, k: int) -> Pattern:
    if not classify(tail, k, n).good:
        raise NotGoodIntervalError(f"[{k}*T_{n}, {k + 1}*T_{n}) is not a good interval", level=n, index=k)
    scale = tail.scale
    t0 = scale.t0
    base = k * scale.length(n)
    end = base + scale.length(n)
    inside: list[tuple[int, int]] = []
    for level in range(n):
        starts = tail.components[level]
        for s in starts[bisect_left(starts, base) : bisect_left(starts, end)]:
            inside.append((s, level))
    inside.sort()
    cells: list[Cell] = []
    cursor = base
    for s, level in inside:
        cells.extend(Cell(start=j, level=0, kind="r", size=t0) for j in range(cursor, s, t0))
        size = scale.length(level)
        cells.append(Cell(start=s, level=level, kind="w", size=size))
        cursor = s + size
    cells.extend(Cell(start=j, level=0, kind="r", size=t0) for j in range(cursor, end, t0))
    return Pattern(scale=scale, level=n, index=k, cells=tuple(cells))


def initial_pattern(tail: SparseTail, n: int) -> Pattern:
    return induced_pattern(tail, n, 0)


def marked_points(pattern: Pattern) -> MarkedPointSet:
    # An aligned start is admissible for some length exactly when it opens a cell.
    points = tuple(c.start for c in pattern.cells) + (pattern.end,)
    return MarkedPointSet(points=points, pattern=pattern)


def is_admissible(pattern: Pattern, start: int, i: int) -> bool:
    """Whether [start, start + T_i) is an aligned block of the base not strictly inside a cell."""
    if not 0 <= i <= pattern.level:
        return False
    size = pattern.scale.length(i)
    if start % size or start < pattern.start or start + size > pattern.end:
        return False
    return pattern.cell_at(start).level <= i


def admissible_intervals(pattern: Pattern, i: int) -> tuple[int, ...]:
    if not 0 <= i <= pattern.level:
        return ()
    size = pattern.scale.length(i)
    return tuple(a for a in range(pattern.start, pattern.end, size) if pattern.cell_at(a).level <= i)


def restrict_to_initial(pattern: Pattern, i: int) -> Pattern:
    if not is_admissible(pattern, pattern.start, i):
        raise NotAdmissibleError(
            f"[{pattern.start}, {pattern.start + pattern.scale.length(i)}) is not admissible in the level-{pattern.level} pattern"
        )
    end = pattern.start + pattern.scale.length(i)
    cells = tuple(c for c in pattern.cells if c.start < end)
    return Pattern(scale=pattern.scale, level=i, index=pattern.start // pattern.scale.length(i), cells=cells)


def split_pattern(pattern: Pattern) -> tuple[Pattern, ...]:
    """The kappa_n level-(n-1) patterns a non-trivial level-n pattern concatenates."""
    if pattern.level == 0:
        raise PatternError("a level-0 pattern does not split")
    if pattern.trivial:
        raise PatternError("a single w cell does not split")
    scale = pattern.scale
    size = scale.length(pattern.level - 1)
    parts: list[Pattern] = []
    cells = list(pattern.cells)
    pos = 0
    for a in range(pattern.start, pattern.end, size):
        chunk: list[Cell] = []
        while pos < len(cells) and cells[pos].start < a + size:
            chunk.append(cells[pos])
            pos += 1
        parts.append(
            check_pattern(Pattern(scale=scale, level=pattern.level - 1, index=a // size, cells=tuple(chunk)))
        )
    return tuple(parts)


def pattern_document(pattern: Pattern) -> PatternDocument:
    cells: list[CellDocument] = [{"offset": c.start, "level": c.level, "kind": c.kind} for c in pattern.cells]
    return {
        "level": pattern.level,
        "index": pattern.index,
        "base": [pattern.start, pattern.end],
        "cells": cells,
        "marked_points": list(marked_points(pattern).points),
    }
