from __future__ import annotations

from typing import Literal, TypedDict

Sign = Literal[1, -1]
CellKind = Literal["r", "w"]
BlockKind = Literal["sign", "sojourn"]
IntervalKind = Literal["good", "bad", "mixed_below"]


def sign_symbol(omega: int) -> str:
    return "+" if omega > 0 else "-"


class ScaleDocument(TypedDict):
    t0: int
    factors: list[int]
    levels: list[int]
    eps: list[str]
    partial_sum: str
    partial_product: str


class TailDocument(TypedDict):
    t0: int
    factors: list[int]
    depth: int
    components: list[list[int]]


class CellDocument(TypedDict):
    offset: int
    level: int
    kind: CellKind


class PatternDocument(TypedDict):
    level: int
    index: int
    base: list[int]
    cells: list[CellDocument]
    marked_points: list[int]


class RecordDocument(TypedDict):
    mark: int
    start: int
    level: int
    kind: BlockKind
    omega: str
    average: str


class LedgerDocument(TypedDict):
    t0: int
    factors: list[int]
    depth: int
    target: str
    junction: list[int]
    length: int
    records: list[RecordDocument]


class ViolationDocument(TypedDict, total=False):
    kind: str
    level: int
    start: int
    index: int
    average: str
    missing: list[int]
    detail: str


class ClaimDocument(TypedDict):
    claim: str
    checked: int
    counterexamples: list[int]
    parameters: dict[str, str]


class ReportDocument(TypedDict):
    label: str
    clean: bool
    average_violations: list[ViolationDocument]
    density_violations: list[ViolationDocument]
    claim_violations: list[ViolationDocument]
    claims: list[ClaimDocument]
    summary: dict[str, str]
