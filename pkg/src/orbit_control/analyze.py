from __future__ import annotations

import csv
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from functools import partial, reduce
from pathlib import Path

import anyio
import numpy as np

from .errors import AnalysisError, OrderTooSmallError, PrefixTooShortError, WindowTooSmallError
from .log import get_logger
from .pattern import Pattern, initial_pattern
from .scale import ControlParams, Scale
from .sft import EXACT_INT64, Potential, Sft, decode_window, legal_words, shift_potential, window_code, window_codes
from .synth import SynthesisLedger
from .tail import SparseTail
from .types import ClaimDocument, ReportDocument, ViolationDocument

logger = get_logger(__name__)

MAX_COUNTEREXAMPLES = 64
FINITE_SCALE_LABEL = "finite-scale consequences"


@dataclass(frozen=True, slots=True)
class Violation:
    kind: str
    level: int
    start: int
    average: Fraction | None = None
    missing: tuple[bytes, ...] = ()
    detail: str = ""

    def sort_key(self) -> tuple[str, int, int]:
        return (self.kind, self.level, self.start)


@dataclass(frozen=True, slots=True)
class ClaimResult:
    claim: str
    checked: int
    failures: int
    counterexamples: tuple[int, ...]
    parameters: Mapping[str, str] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.failures == 0

    def sort_key(self) -> tuple[str, tuple[tuple[str, str], ...]]:
        return (self.claim, tuple(sorted(self.parameters.items())))


@dataclass(frozen=True, slots=True)
class ControlReport:
    average_violations: tuple[Violation, ...] = ()
    density_violations: tuple[Violation, ...] = ()
    claim_violations: tuple[Violation, ...] = ()
    claims: tuple[ClaimResult, ...] = ()
    checked_intervals: int = 0
    checked_components: int = 0

    @property
    def clean(self) -> bool:
        return (
            not self.average_violations
            and not self.density_violations
            and not self.claim_violations
            and all(c.ok for c in self.claims)
        )

    def merge(self, other: ControlReport) -> ControlReport:
        def joined(a: Iterable[Violation], b: Iterable[Violation]) -> tuple[Violation, ...]:
            return tuple(sorted((*a, *b), key=Violation.sort_key))

        return ControlReport(
            average_violations=joined(self.average_violations, other.average_violations),
            density_violations=joined(self.density_violations, other.density_violations),
            claim_violations=joined(self.claim_violations, other.claim_violations),
            claims=tuple(sorted((*self.claims, *other.claims), key=ClaimResult.sort_key)),
            checked_intervals=self.checked_intervals + other.checked_intervals,
            checked_components=self.checked_components + other.checked_components,
        )

    def summary(self) -> dict[str, str]:
        return {
            "clean": str(self.clean).lower(),
            "average_violations": str(len(self.average_violations)),
            "density_violations": str(len(self.density_violations)),
            "claim_violations": str(len(self.claim_violations)),
            "checked_intervals": str(self.checked_intervals),
            "checked_components": str(self.checked_components),
        }


@dataclass(frozen=True, slots=True)
class EmpiricalMeasure:
    length: int
    order: int
    frequencies: Mapping[bytes, Fraction]

    @property
    def support(self) -> frozenset[bytes]:
        return frozenset(w for w, f in self.frequencies.items() if f)

    @property
    def total(self) -> Fraction:
        return sum(self.frequencies.values(), Fraction(0))

    def coverage(self, sft: Sft) -> Fraction:
        legal = legal_words(sft, self.order)
        return Fraction(sum(1 for w in legal if w in self.support), len(legal))


@dataclass(frozen=True, slots=True)
class CheckpointRow:
    checkpoint: int
    average: Fraction
    coverage: Fraction


def _prefix_sums(prefix: bytes, potential: Potential, target: Fraction, count: int) -> tuple[np.ndarray, int]:
    """Scaled prefix sums of phi - t over the windows starting at 0..count-1."""
    k = potential.depth
    if len(prefix) < count + k - 1:
        raise PrefixTooShortError(f"prefix has {len(prefix)} symbols, need {count + k - 1}")
    if prefix and max(prefix[: count + k - 1]) >= potential.alphabet_size:
        raise AnalysisError(f"prefix holds symbols outside the alphabet of size {potential.alphabet_size}")
    table, d = shift_potential(potential, target).scaled_table()
    codes = window_codes(prefix[: count + k - 1], k, potential.alphabet_size)
    peak = int(np.abs(table).max()) if table.size else 0
    if table.dtype == object or peak * max(count, 1) >= EXACT_INT64:
        sums = np.zeros(count + 1, dtype=object)
        sums[1:] = np.cumsum(table[codes].astype(object))
        return sums, d
    sums = np.zeros(count + 1, dtype=np.int64)
    np.cumsum(table[codes], out=sums[1:])
    return sums, d


def _level_array(tail: SparseTail) -> np.ndarray:
    levels = np.full(tail.length, -1, dtype=np.int16)
    for n, starts in enumerate(tail.components):
        size = tail.scale.length(n)
        for s in starts:
            levels[s : s + size] = n
    return levels


def _exceeds(values: np.ndarray, num: int, den: int, scale: int) -> np.ndarray:
    """|values| * den > num * scale, elementwise and exact."""
    bound = num * scale
    magnitude = np.abs(values)
    if magnitude.size and int(magnitude.max()) * den < EXACT_INT64 and bound < EXACT_INT64:
        return magnitude * den > bound
    return np.array([abs(int(v)) * den > bound for v in values], dtype=bool)


def _falls_short(values: np.ndarray, num: int, den: int, scale: int) -> np.ndarray:
    """2 * |values| * den < num * scale, elementwise and exact."""
    bound = num * scale
    magnitude = np.abs(values)
    if magnitude.size and int(magnitude.max()) * 2 * den < EXACT_INT64 and bound < EXACT_INT64:
        return magnitude * 2 * den < bound
    return np.array([abs(int(v)) * 2 * den < bound for v in values], dtype=bool)


class _Prepared:
    """Read-only arrays shared by every scan over one prefix."""

    def __init__(
        self,
        prefix: bytes,
        sft: Sft,
        tail: SparseTail,
        potential: Potential,
        target: Fraction,
    ) -> None:
        self.prefix = prefix
        self.sft = sft
        self.tail = tail
        self.length = tail.length
        self.psum, self.d = _prefix_sums(prefix, potential, target, tail.length)
        self.level_at = _level_array(tail)
        self._codes: dict[int, np.ndarray] = {}
        self._legal: dict[int, np.ndarray] = {}

    def codes(self, m: int) -> np.ndarray:
        if m not in self._codes:
            self._codes[m] = window_codes(self.prefix[: self.length], m, self.sft.alphabet_size)
        return self._codes[m]

    def legal(self, m: int) -> np.ndarray:
        if m not in self._legal:
            words = legal_words(self.sft, m)
            self._legal[m] = np.array([window_code(w, self.sft.alphabet_size) for w in words], dtype=np.int64)
        return self._legal[m]

    def warm(self, depths: Iterable[int]) -> None:
        # Fill the caches before worker threads read them.
        for m in set(depths):
            if m > 0:
                self.codes(m)
                self.legal(m)


def _control_range(
    prep: _Prepared,
    params: ControlParams,
    lo: int,
    hi: int,
    stride: int,
) -> ControlReport:
    tail = prep.tail
    total = prep.length
    averages: list[Violation] = []
    densities: list[Violation] = []
    checked = 0
    for n in range(tail.depth + 1):
        size = tail.scale.length(n)
        first = -(-lo // size) * size
        starts = np.arange(first, min(hi, total - size + 1), size, dtype=np.int64)
        if stride > 1:
            starts = starts[(starts // size) % stride == 0]
        # Intervals inside a component of level > n are free.
        starts = starts[prep.level_at[starts] <= n]
        if not starts.size:
            continue
        checked += int(starts.size)
        sums = prep.psum[starts + size] - prep.psum[starts]
        alpha = params.alpha[n]
        bad = _exceeds(sums, alpha.numerator, alpha.denominator, size * prep.d)
        for a, s in zip(starts[bad].tolist(), sums[bad].tolist()):
            averages.append(Violation("average", n, a, average=Fraction(s, prep.d * size)))

    components = 0
    for n in range(tail.depth):
        m = params.density_depths[n]
        if m < 1:
            continue
        size = tail.scale.length(n)
        codes = prep.codes(m)
        legal = prep.legal(m)
        for s in tail.components[n]:
            if not lo <= s < hi:
                continue
            components += 1
            present = np.unique(codes[s : s + size - m + 1])
            missing = np.setdiff1d(legal, present)
            if missing.size:
                densities.append(
                    Violation(
                        "density",
                        n,
                        s,
                        missing=tuple(decode_window(int(c), prep.sft.alphabet_size, m) for c in missing),
                    )
                )
    return ControlReport(
        average_violations=tuple(averages),
        density_violations=tuple(densities),
        checked_intervals=checked,
        checked_components=components,
    )


def verify_control(
    prefix: bytes,
    sft: Sft,
    tail: SparseTail,
    params: ControlParams,
    potential: Potential,
    target: Fraction,
    *,
    stride: int = 1,
) -> ControlReport:
    """Check average control on every free aligned interval and density on every component."""
    prep = _Prepared(prefix, sft, tail, potential, target)
    prep.warm(params.density_depths)
    report = _control_range(prep, params, 0, tail.length, stride)
    logger.info("analyze.control", **report.summary())
    return report


async def verify_control_parallel(
    prefix: bytes,
    sft: Sft,
    tail: SparseTail,
    params: ControlParams,
    potential: Potential,
    target: Fraction,
    *,
    workers: int = 4,
    chunks: int | None = None,
    stride: int = 1,
) -> ControlReport:
    """``verify_control`` over partitions of the index range on worker threads."""
    prep = _Prepared(prefix, sft, tail, potential, target)
    prep.warm(params.density_depths)
    pieces = max(1, chunks or workers)
    bounds = [tail.length * i // pieces for i in range(pieces + 1)]
    limiter = anyio.CapacityLimiter(max(1, workers))
    parts: list[ControlReport] = [ControlReport() for _ in range(pieces)]

    async def scan(index: int, lo: int, hi: int) -> None:
        parts[index] = await anyio.to_thread.run_sync(
            _control_range, prep, params, lo, hi, stride, limiter=limiter
        )

    async with anyio.create_task_group() as tg:
        for index in range(pieces):
            tg.start_soon(scan, index, bounds[index], bounds[index + 1])
    return reduce(ControlReport.merge, parts, ControlReport())


def empirical_measure(
    prefix: bytes,
    length: int,
    order: int,
    *,
    alphabet_size: int | None = None,
) -> EmpiricalMeasure:
    if length < 1 or order < 1:
        raise AnalysisError("length and order must be >= 1")
    if length + order - 1 > len(prefix):
        raise PrefixTooShortError(f"prefix has {len(prefix)} symbols, need {length + order - 1}")
    size = alphabet_size if alphabet_size is not None else max(prefix) + 1
    codes = window_codes(prefix[: length + order - 1], order, size)
    found, counts = np.unique(codes, return_counts=True)
    frequencies = {
        decode_window(int(c), size, order): Fraction(int(n), length) for c, n in zip(found, counts)
    }
    return EmpiricalMeasure(length=length, order=order, frequencies=dict(sorted(frequencies.items())))


def integrate_potential(measure: EmpiricalMeasure, potential: Potential) -> Fraction:
    k = potential.depth
    if measure.order < k:
        raise OrderTooSmallError(f"measure order {measure.order} is below potential depth {k}")
    return sum(
        (freq * potential.value(word[:k]) for word, freq in measure.frequencies.items()),
        Fraction(0),
    )


def _next_occurrence(codes: np.ndarray, code: int, starts: np.ndarray) -> np.ndarray:
    positions = np.flatnonzero(codes == code)
    sentinel = np.append(positions, np.iinfo(np.int64).max)
    return sentinel[np.searchsorted(positions, starts)]


def _claim(
    claim: str,
    checked: int,
    failing: np.ndarray,
    parameters: Mapping[str, object],
) -> ClaimResult:
    return ClaimResult(
        claim=claim,
        checked=checked,
        failures=int(failing.size),
        counterexamples=tuple(int(i) for i in failing[:MAX_COUNTEREXAMPLES]),
        parameters={key: str(value) for key, value in parameters.items()},
    )


def verify_density_claim(
    prefix: bytes,
    sft: Sft,
    tail: SparseTail,
    params: ControlParams,
    k: int,
    t: int,
    *,
    stride: int = 1,
) -> ClaimResult:
    """Every segment [i, i+t] off the exclusion set holds all m_k-words."""
    depth = tail.depth
    if not 0 <= k < depth:
        raise AnalysisError(f"k={k} needs a tail level k+1 <= {depth}")
    block = tail.scale.length(k + 1)
    if t <= block:
        raise WindowTooSmallError(f"t={t} must exceed T_{k + 1}={block}")
    if len(prefix) < tail.length:
        raise PrefixTooShortError(f"prefix has {len(prefix)} symbols, need {tail.length}")
    m_t = next(
        (m for m in range(k + 1, depth + 1) if tail.scale.length(m) + 2 * block > t),
        depth,
    )
    total = tail.length
    level_at = _level_array(tail)
    starts = np.arange(0, max(total - t, 0), stride, dtype=np.int64)
    shifted = starts + block
    excluded = level_at[starts] >= m_t
    inside = shifted < total
    excluded[inside] |= level_at[shifted[inside]] >= m_t
    candidates = starts[~excluded]

    m = params.density_depths[k]
    ok = np.ones(candidates.size, dtype=bool)
    if m > 0 and candidates.size:
        codes = window_codes(prefix[:total], m, sft.alphabet_size)
        last = candidates + t - m + 1
        for word in legal_words(sft, m):
            ok &= _next_occurrence(codes, window_code(word, sft.alphabet_size), candidates) <= last
    result = _claim(
        "density",
        int(candidates.size),
        candidates[~ok],
        {"k": k, "t": t, "m_t": m_t, "m_k": m},
    )
    logger.info("analyze.claim", claim="density", checked=result.checked, failures=result.failures)
    return result


def average_claim_window(
    scale: Scale,
    params: ControlParams,
    potential: Potential,
    target: Fraction,
    k: int,
    m: int,
) -> int:
    """t_m = 2 T_m / C + 1 with C = alpha_k / (2 (max|phi - t| + alpha_k))."""
    alpha = params.alpha[k]
    bound = shift_potential(potential, target).max_abs
    c = alpha / (2 * (bound + alpha))
    return math.ceil(2 * scale.length(m) / c) + 1


def verify_average_claim(
    prefix: bytes,
    tail: SparseTail,
    params: ControlParams,
    potential: Potential,
    target: Fraction,
    k: int,
    m: int,
    t: int,
    *,
    stride: int = 1,
) -> ClaimResult:
    """Windows [i, i+t) with average outside [-2 alpha_k, 2 alpha_k] start or end in R_{>=m}."""
    if not 0 <= m <= tail.depth:
        raise AnalysisError(f"level m={m} outside 0..{tail.depth}")
    window = average_claim_window(tail.scale, params, potential, target, k, m)
    if t < window:
        raise WindowTooSmallError(f"t={t} is below t_m={window}")
    total = tail.length
    psum, d = _prefix_sums(prefix, potential, target, total)
    level_at = _level_array(tail)
    starts = np.arange(0, max(total - t + 1, 0), stride, dtype=np.int64)
    sums = psum[starts + t] - psum[starts]
    limit = 2 * params.alpha[k]
    over = _exceeds(sums, limit.numerator, limit.denominator, t * d)
    exempt = level_at[starts] >= m
    ends = starts + t
    inside = ends < total
    exempt[inside] |= level_at[ends[inside]] >= m
    result = _claim(
        "average",
        int(starts.size),
        starts[over & ~exempt],
        {"k": k, "m": m, "t": t, "t_m": window},
    )
    logger.info("analyze.claim", claim="average", checked=result.checked, failures=result.failures)
    return result


def finite_scale_consequences(
    prefix: bytes,
    sft: Sft,
    tail: SparseTail,
    params: ControlParams,
    potential: Potential,
    target: Fraction,
) -> ClaimResult:
    """|average over [0, T_n)| <= 3 alpha_k and [0, T_n) holds every (m_k - 1)-word, for k < n."""
    depth = tail.depth
    psum, d = _prefix_sums(prefix, potential, target, tail.length)
    failing: list[int] = []
    checked = 0
    for n in range(1, depth + 1):
        size = tail.scale.length(n)
        average = Fraction(int(psum[size]), d * size)
        for k in range(n):
            checked += 1
            m = params.density_depths[k] - 1
            dense = m <= 0 or not _missing(prefix[:size], sft, m)
            if abs(average) > 3 * params.alpha[k] or not dense:
                failing.append(n * (depth + 1) + k)
    result = _claim(FINITE_SCALE_LABEL, checked, np.array(failing, dtype=np.int64), {"depth": depth})
    logger.info("analyze.claim", claim=FINITE_SCALE_LABEL, checked=checked, failures=result.failures)
    return result


def _missing(word: bytes, sft: Sft, m: int) -> bool:
    present = set(window_codes(word, m, sft.alphabet_size).tolist())
    return any(window_code(w, sft.alphabet_size) not in present for w in legal_words(sft, m))


def verify_ledger(prefix: bytes, ledger: SynthesisLedger, potential: Potential) -> tuple[Violation, ...]:
    """Double entry: every stored cell average against the one recomputed from the symbols."""
    psum, d = _prefix_sums(prefix, potential, ledger.target, ledger.length)
    out: list[Violation] = []
    cursor = 0
    starts = np.fromiter((r.start for r in ledger.records), dtype=np.int64, count=len(ledger.records))
    marks = np.fromiter((r.mark for r in ledger.records), dtype=np.int64, count=len(ledger.records))
    totals = (psum[marks] - psum[starts]).tolist()
    for record, total in zip(ledger.records, totals):
        if record.start != cursor:
            out.append(Violation("ledger_gap", record.level, cursor, detail=f"next record starts at {record.start}"))
        size = record.mark - record.start
        avg = record.average
        if total * avg.denominator != avg.numerator * d * size:
            out.append(
                Violation(
                    "ledger",
                    record.level,
                    record.start,
                    average=Fraction(total, d * size),
                    detail=f"recorded {record.average}",
                )
            )
        cursor = record.mark
    if cursor != ledger.length:
        out.append(Violation("ledger_gap", 0, cursor, detail=f"records stop before {ledger.length}"))
    return tuple(out)


def verify_pattern_control(
    prefix: bytes,
    pattern: Pattern,
    params: ControlParams,
    potential: Potential,
    target: Fraction,
) -> tuple[Violation, ...]:
    """Admissible intervals of level i < n sit in the two-sided band; the base in the + band."""
    base, end = pattern.start, pattern.end
    psum, d = _prefix_sums(prefix, potential, target, end)
    levels = np.zeros(end - base, dtype=np.int16)
    for cell in pattern.cells:
        levels[cell.start - base : cell.end - base] = cell.level
    out: list[Violation] = []
    for i in range(pattern.level):
        size = pattern.scale.length(i)
        starts = np.arange(base, end, size, dtype=np.int64)
        starts = starts[levels[starts - base] <= i]
        sums = np.abs(psum[starts + size] - psum[starts])
        alpha = params.alpha[i]
        too_big = _exceeds(sums, alpha.numerator, alpha.denominator, size * d)
        too_small = _falls_short(sums, alpha.numerator, alpha.denominator, size * d)
        for a, s in zip(starts[too_big | too_small].tolist(), sums[too_big | too_small].tolist()):
            out.append(Violation("pattern", i, a, average=Fraction(int(psum[a + size] - psum[a]), d * size)))
    size = end - base
    top = Fraction(int(psum[end] - psum[base]), d * size)
    lo, hi = params.band(pattern.level, 1)
    if not lo <= top <= hi:
        out.append(Violation("pattern_top", pattern.level, base, average=top))
    return tuple(out)


def checkpoint_series(
    prefix: bytes,
    sft: Sft,
    scale: Scale,
    potential: Potential,
    order: int,
    *,
    depth: int | None = None,
) -> list[CheckpointRow]:
    """Birkhoff average of phi and m-word coverage over [0, T_n) for each level."""
    top = scale.depth if depth is None else depth
    psum, d = _prefix_sums(prefix, potential, Fraction(0), scale.length(top))
    legal = legal_words(sft, order) if order > 0 else ()
    rows: list[CheckpointRow] = []
    for n in range(top + 1):
        size = scale.length(n)
        if order > 0:
            present = set(window_codes(prefix[:size], order, sft.alphabet_size).tolist())
            hits = sum(1 for w in legal if window_code(w, sft.alphabet_size) in present)
            coverage = Fraction(hits, len(legal))
        else:
            coverage = Fraction(1)
        rows.append(CheckpointRow(checkpoint=size, average=Fraction(int(psum[size]), d * size), coverage=coverage))
    return rows


def write_series_csv(rows: Sequence[CheckpointRow], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["checkpoint", "average_num", "average_den", "coverage_num", "coverage_den"])
        for row in rows:
            writer.writerow(
                [
                    row.checkpoint,
                    row.average.numerator,
                    row.average.denominator,
                    row.coverage.numerator,
                    row.coverage.denominator,
                ]
            )


def _claim_violations(result: ClaimResult) -> list[Violation]:
    return [Violation(f"claim:{result.claim}", 0, i) for i in result.counterexamples]


async def audit(
    prefix: bytes,
    sft: Sft,
    tail: SparseTail,
    params: ControlParams,
    potential: Potential,
    target: Fraction,
    *,
    ledger: SynthesisLedger | None = None,
    claims: bool = True,
    workers: int = 4,
    stride: int = 1,
) -> ControlReport:
    """Control, ledger, pattern and proof-claim checks merged into one report."""
    report = await verify_control_parallel(
        prefix, sft, tail, params, potential, target, workers=workers, stride=stride
    )
    extra: list[Violation] = []
    if ledger is not None:
        extra.extend(verify_ledger(prefix, ledger, potential))
    extra.extend(verify_pattern_control(prefix, initial_pattern(tail, tail.depth), params, potential, target))

    results: list[ClaimResult] = []
    if claims:
        jobs = [partial(finite_scale_consequences, prefix, sft, tail, params, potential, target)]
        for k in range(tail.depth - 1):
            t = tail.scale.length(2) if k == 0 else 2 * tail.scale.length(k + 1)
            if t <= tail.length:
                jobs.append(partial(verify_density_claim, prefix, sft, tail, params, k, t, stride=stride))
        if tail.depth >= 2:
            window = average_claim_window(tail.scale, params, potential, target, 1, 2)
            if window <= tail.length:
                jobs.append(
                    partial(verify_average_claim, prefix, tail, params, potential, target, 1, 2, window, stride=stride)
                )
        limiter = anyio.CapacityLimiter(max(1, workers))
        slots: list[ClaimResult | None] = [None] * len(jobs)

        async def run(index: int, job: partial[ClaimResult]) -> None:
            slots[index] = await anyio.to_thread.run_sync(job, limiter=limiter)

        async with anyio.create_task_group() as tg:
            for index, job in enumerate(jobs):
                tg.start_soon(run, index, job)
        results = [r for r in slots if r is not None]

    claim_violations = [v for r in results for v in _claim_violations(r)]
    return report.merge(
        ControlReport(
            claim_violations=tuple(sorted((*extra, *claim_violations), key=Violation.sort_key)),
            claims=tuple(results),
        )
    )


def violation_document(v: Violation) -> ViolationDocument:
    doc: ViolationDocument = {"kind": v.kind, "level": v.level, "start": v.start}
    if v.average is not None:
        doc["average"] = str(v.average)
    if v.missing:
        doc["missing"] = [list(w) for w in v.missing]  # type: ignore[typeddict-item]
    if v.detail:
        doc["detail"] = v.detail
    return doc


def claim_document(result: ClaimResult) -> ClaimDocument:
    return {
        "claim": result.claim,
        "checked": result.checked,
        "counterexamples": list(result.counterexamples),
        "parameters": dict(result.parameters),
    }


def report_document(report: ControlReport, label: str) -> ReportDocument:
    return {
        "label": label,
        "clean": report.clean,
        "average_violations": [violation_document(v) for v in report.average_violations],
        "density_violations": [violation_document(v) for v in report.density_violations],
        "claim_violations": [violation_document(v) for v in report.claim_violations],
        "claims": [claim_document(c) for c in report.claims],
        "summary": report.summary(),
    }
