from __future__ import annotations

import random
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from orbit_control.analyze import (
    FINITE_SCALE_LABEL,
    ControlReport,
    Violation,
    audit,
    average_claim_window,
    checkpoint_series,
    empirical_measure,
    finite_scale_consequences,
    integrate_potential,
    report_document,
    verify_average_claim,
    verify_control,
    verify_control_parallel,
    verify_density_claim,
    verify_ledger,
    verify_pattern_control,
    write_series_csv,
)
from orbit_control.errors import (
    AnalysisError,
    OrderTooSmallError,
    PrefixTooShortError,
    WindowTooSmallError,
)
from orbit_control.pattern import initial_pattern
from orbit_control.scale import build_scale, decay_params
from orbit_control.sft import build_potential, full_shift, legal_words
from orbit_control.tail import build_tail

from .oracles import factors_of
from .runs import Run


def _control(run: Run, prefix: bytes | None = None, **kwargs: int) -> ControlReport:
    return verify_control(
        run.ledger.prefix if prefix is None else prefix,
        run.sft,
        run.tail,
        run.params,
        run.potential,
        run.target,
        **kwargs,
    )


def test_full_shift_run_is_controlled(full_shift_run: Run) -> None:
    report = _control(full_shift_run)
    assert report.clean
    assert report.checked_intervals > 0
    assert report.checked_components == sum(len(c) for c in full_shift_run.tail.components[1:])


def test_off_centre_and_golden_runs_are_controlled(quarter_run: Run, golden_run: Run) -> None:
    assert _control(quarter_run).clean
    assert _control(golden_run).clean


def test_sampled_control_checks_fewer_intervals(full_shift_run: Run) -> None:
    sampled = _control(full_shift_run, stride=16)
    assert sampled.clean
    assert sampled.checked_intervals < _control(full_shift_run).checked_intervals


def test_constant_prefix_breaks_control(full_shift_run: Run) -> None:
    zeros = bytes(len(full_shift_run.ledger.prefix))
    report = _control(full_shift_run, zeros)
    assert not report.clean
    assert report.average_violations
    first = report.average_violations[0]
    # Level-0 averages of 1 sit on the closed edge of the alpha_0 band.
    assert (first.kind, first.level, first.start, first.average) == ("average", 1, 0, 1)
    assert all(v.level > 0 for v in report.average_violations)
    assert report.density_violations
    assert all(v.missing for v in report.density_violations)


@pytest.mark.anyio
async def test_parallel_scan_does_not_depend_on_partition(full_shift_run: Run) -> None:
    run = full_shift_run
    zeros = bytes(len(run.ledger.prefix))
    serial = _control(run, zeros)
    for chunks in (1, 3, 7):
        parallel = await verify_control_parallel(
            zeros, run.sft, run.tail, run.params, run.potential, run.target, workers=2, chunks=chunks
        )
        assert parallel == serial
    clean = await verify_control_parallel(
        run.ledger.prefix, run.sft, run.tail, run.params, run.potential, run.target, chunks=5
    )
    assert clean.clean
    assert clean.checked_intervals == _control(run).checked_intervals


def test_empirical_measure_of_the_demo_prefix(full_shift_run: Run) -> None:
    ledger = full_shift_run.ledger
    measure = empirical_measure(ledger.prefix, ledger.length, 3, alphabet_size=2)
    assert len(measure.support) == 8
    assert measure.coverage(full_shift_run.sft) == 1
    assert measure.total == 1
    zeros = ledger.word.count(0)
    expected = Fraction(zeros - (ledger.length - zeros), ledger.length)
    assert integrate_potential(measure, full_shift_run.potential) == expected


def test_empirical_measure_errors() -> None:
    with pytest.raises(AnalysisError):
        empirical_measure(b"\x00\x01", 2, 0)
    with pytest.raises(PrefixTooShortError):
        empirical_measure(b"\x00\x01", 2, 2)
    pairs = build_potential(full_shift(2), 2, {}, default=0)
    with pytest.raises(OrderTooSmallError):
        integrate_potential(empirical_measure(b"\x00\x01\x01", 3, 1), pairs)


def test_proof_claims_hold_on_the_demo(full_shift_run: Run) -> None:
    run = full_shift_run
    prefix = run.ledger.prefix
    consequences = finite_scale_consequences(prefix, run.sft, run.tail, run.params, run.potential, run.target)
    assert consequences.claim == FINITE_SCALE_LABEL
    assert consequences.ok
    assert consequences.checked == 6

    density = verify_density_claim(prefix, run.sft, run.tail, run.params, 0, run.scale.length(2))
    assert density.ok
    assert density.counterexamples == ()

    window = average_claim_window(run.scale, run.params, run.potential, run.target, 1, 2)
    assert window == 136081
    average = verify_average_claim(prefix, run.tail, run.params, run.potential, run.target, 1, 2, window)
    assert average.ok
    assert average.parameters["t_m"] == "136081"


def test_claim_argument_errors(full_shift_run: Run) -> None:
    run = full_shift_run
    prefix = run.ledger.prefix
    with pytest.raises(WindowTooSmallError):
        verify_density_claim(prefix, run.sft, run.tail, run.params, 0, run.scale.length(1))
    with pytest.raises(AnalysisError):
        verify_density_claim(prefix, run.sft, run.tail, run.params, 3, run.scale.length(3) + 1)
    with pytest.raises(WindowTooSmallError):
        verify_average_claim(prefix, run.tail, run.params, run.potential, run.target, 1, 2, 100)
    with pytest.raises(AnalysisError):
        verify_average_claim(prefix, run.tail, run.params, run.potential, run.target, 1, 4, 10**9)


def test_prefix_errors(full_shift_run: Run) -> None:
    with pytest.raises(PrefixTooShortError):
        _control(full_shift_run, full_shift_run.ledger.prefix[:100])
    with pytest.raises(AnalysisError):
        _control(full_shift_run, bytes([2]) * len(full_shift_run.ledger.prefix))


def test_ledger_matches_the_symbols(full_shift_run: Run) -> None:
    ledger = full_shift_run.ledger
    assert verify_ledger(ledger.prefix, ledger, full_shift_run.potential) == ()


def test_ledger_detects_mutations_in_density_components(full_shift_run: Run) -> None:
    run = full_shift_run
    ledger = run.ledger
    positions = [
        i
        for n in range(1, run.tail.depth)
        for s in run.tail.components[n]
        for i in range(s, s + run.scale.length(n))
    ]
    rng = random.Random(20240917)
    for pos in rng.sample(positions, 100):
        mutated = bytearray(ledger.prefix)
        mutated[pos] ^= 1
        found = verify_ledger(bytes(mutated), ledger, run.potential)
        assert any(v.kind == "ledger" and v.start <= pos for v in found), pos


def test_ledger_gaps_are_reported(golden_run: Run) -> None:
    ledger = golden_run.ledger
    broken = replace(ledger, records=ledger.records[1:])
    kinds = {v.kind for v in verify_ledger(ledger.prefix, broken, golden_run.potential)}
    assert kinds == {"ledger_gap"}


def test_pattern_control(full_shift_run: Run) -> None:
    run = full_shift_run
    pattern = initial_pattern(run.tail, run.tail.depth)
    assert verify_pattern_control(run.ledger.prefix, pattern, run.params, run.potential, run.target) == ()
    zeros = bytes(len(run.ledger.prefix))
    kinds = {v.kind for v in verify_pattern_control(zeros, pattern, run.params, run.potential, run.target)}
    assert kinds == {"pattern", "pattern_top"}


def test_checkpoint_series(full_shift_run: Run, tmp_path: Path) -> None:
    run = full_shift_run
    rows = checkpoint_series(run.ledger.prefix, run.sft, run.scale, run.potential, 3)
    assert [r.checkpoint for r in rows] == list(run.scale.levels)
    assert rows[-1].coverage == 1
    assert abs(rows[-1].average) <= run.params.alpha[3]

    path = tmp_path / "series.csv"
    write_series_csv(rows, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "checkpoint,average_num,average_den,coverage_num,coverage_den"
    assert len(lines) == len(rows) + 1
    assert lines[1].startswith("3,")


@pytest.mark.anyio
async def test_audit_is_clean_and_serializable(full_shift_run: Run) -> None:
    run = full_shift_run
    report = await audit(
        run.ledger.prefix,
        run.sft,
        run.tail,
        run.params,
        run.potential,
        run.target,
        ledger=run.ledger,
        workers=2,
    )
    assert report.clean
    assert [c.claim for c in report.claims] == ["average", "density", "density", FINITE_SCALE_LABEL]
    assert [c.parameters["k"] for c in report.claims if c.claim == "density"] == ["0", "1"]

    doc = report_document(report, "demo")
    assert doc["label"] == "demo"
    assert doc["clean"] is True
    assert doc["summary"]["clean"] == "true"
    assert len(doc["claims"]) == 4


def test_report_merge_orders_violations() -> None:
    a = ControlReport(average_violations=(Violation("average", 1, 9),), checked_intervals=2)
    b = ControlReport(average_violations=(Violation("average", 0, 3),), checked_intervals=5)
    merged = a.merge(b)
    assert [v.start for v in merged.average_violations] == [3, 9]
    assert merged.checked_intervals == 7
    assert not merged.clean
    assert ControlReport().clean


def test_wide_denominators_stay_exact(full_shift_run: Run) -> None:
    run = full_shift_run
    target = Fraction(1, 10**17)
    zeros = bytes(len(run.ledger.prefix))
    report = verify_control(zeros, run.sft, run.tail, run.params, run.potential, target)
    assert {v.level for v in report.average_violations} == {1, 2, 3}
    assert all(v.average == 1 - target for v in report.average_violations)


def test_pattern_lower_edge_is_exact() -> None:
    scale = build_scale(3, [3, 6])
    pattern = initial_pattern(build_tail(scale, 2), 2)
    # alpha_1 = 12/13, so [0, 9) below averages 5/9 - 2**-56 inside the band.
    params = decay_params(
        alpha0=Fraction(4),
        decay=Fraction(3, 13),
        beta_ratio=Fraction(3, 8),
        density_depths=[0, 0, 0],
        target=Fraction(0),
        depth=2,
    )
    phi = build_potential(full_shift(2), 1, {"0": 1, "1": -1})
    prefix = bytes(7) + bytes([1, 1]) + bytes(45)
    found = verify_pattern_control(prefix, pattern, params, phi, Fraction(1, 2**56))
    level_one = {v.start for v in found if v.kind == "pattern" and v.level == 1}
    assert 0 not in level_one
    assert 9 in level_one


def _flipped(prefix: bytes, *positions: int) -> bytes:
    mutated = bytearray(prefix)
    for pos in positions:
        mutated[pos] ^= 1
    return bytes(mutated)


def _outside_density_components(run: Run) -> np.ndarray:
    free = np.ones(run.tail.length, dtype=bool)
    for n in range(1, run.tail.depth):
        size = run.scale.length(n)
        for s in run.tail.components[n]:
            free[s : s + size] = False
    return np.flatnonzero(free)


@pytest.mark.anyio
async def test_audit_catches_flips_outside_density_components(full_shift_run: Run) -> None:
    run = full_shift_run
    rng = random.Random(20240918)
    positions = _outside_density_components(run).tolist()
    for pos in rng.sample(positions, 12):
        report = await audit(
            _flipped(run.ledger.prefix, pos),
            run.sft,
            run.tail,
            run.params,
            run.potential,
            run.target,
            claims=False,
            workers=2,
        )
        assert not report.clean, pos
        assert any(v.kind == "pattern" and v.start <= pos for v in report.claim_violations), pos


@pytest.mark.anyio
async def test_audit_with_ledger_catches_every_flip(full_shift_run: Run) -> None:
    run = full_shift_run
    rng = random.Random(20240919)
    for pos in rng.sample(range(run.tail.length), 8):
        report = await audit(
            _flipped(run.ledger.prefix, pos),
            run.sft,
            run.tail,
            run.params,
            run.potential,
            run.target,
            ledger=run.ledger,
            claims=False,
            workers=2,
        )
        assert any(v.kind == "ledger" for v in report.claim_violations), pos


def _expected_density(run: Run, prefix: bytes) -> set[tuple[int, int, frozenset[bytes]]]:
    out: set[tuple[int, int, frozenset[bytes]]] = set()
    for n in range(run.tail.depth):
        m = run.params.density_depths[n]
        if m < 1:
            continue
        size = run.scale.length(n)
        legal = set(legal_words(run.sft, m))
        for s in run.tail.components[n]:
            missing = legal - factors_of(prefix[s : s + size], m)
            if missing:
                out.add((n, s, frozenset(missing)))
    return out


def _reported_density(report: ControlReport) -> set[tuple[int, int, frozenset[bytes]]]:
    return {(v.level, v.start, frozenset(v.missing)) for v in report.density_violations}


def test_density_scan_flags_exactly_the_lost_words(full_shift_run: Run) -> None:
    run = full_shift_run
    prefix = run.ledger.prefix
    start = run.tail.components[2][0]
    word = prefix[start : start + run.scale.length(2)]
    counts: dict[bytes, list[int]] = {}
    for i in range(len(word) - 2):
        counts.setdefault(word[i : i + 3], []).append(i)
    unique = [hits[0] for hits in counts.values() if len(hits) == 1]
    assert unique

    detected = 0
    for offset in unique:
        mutated = _flipped(prefix, start + offset + 1)
        expected = _expected_density(run, mutated)
        assert _reported_density(_control(run, mutated)) == expected
        detected += bool(expected)
    assert detected

    rng = random.Random(20240920)
    for pos in rng.sample(range(run.tail.length), 6):
        mutated = _flipped(prefix, pos)
        assert _reported_density(_control(run, mutated)) == _expected_density(run, mutated), pos


def test_density_claim_above_the_first_level(full_shift_run: Run) -> None:
    run = full_shift_run
    t = 2 * run.scale.length(2)
    held = verify_density_claim(run.ledger.prefix, run.sft, run.tail, run.params, 1, t)
    assert held.ok
    assert held.checked > 0
    assert held.parameters["m_k"] == "2"

    zeros = bytes(len(run.ledger.prefix))
    broken = verify_density_claim(zeros, run.sft, run.tail, run.params, 1, t)
    assert broken.failures > 0
    assert broken.counterexamples[0] == 0


@pytest.mark.anyio
async def test_audit_claims_come_in_job_order(full_shift_run: Run) -> None:
    run = full_shift_run
    reports = [
        await audit(run.ledger.prefix, run.sft, run.tail, run.params, run.potential, run.target, workers=w)
        for w in (1, 3)
    ]
    assert reports[0].claims == reports[1].claims
    assert [c.claim for c in reports[0].claims] == sorted(c.claim for c in reports[0].claims)
