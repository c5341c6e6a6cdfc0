"""Symbolic synthesis of a controlled prefix.

Blocks are generated bottom-up along the initial pattern of a tail. Level-0
cells become sign blocks, components of level >= 1 become sojourn blocks that
carry a universal word, and every good interval is a concatenation of its
level-(n-1) sub-blocks whose signs are scheduled by :func:`choose_sign`.
"""

from __future__ import annotations

import threading
from bisect import bisect_left, bisect_right
from collections.abc import Callable, Hashable, Iterator, Mapping
from dataclasses import dataclass
from fractions import Fraction
from functools import partial

import anyio

from .errors import (
    BandUnreachableError,
    CoreTooLongError,
    SynthesisError,
    TargetOutOfRangeError,
)
from .log import get_logger
from .scale import ControlParams, Scale, build_scale, validate_params
from .sft import Potential, Sft, average_range, bridge, legal_words, shift_potential, universal_word
from .tail import SparseTail
from .types import BlockKind, LedgerDocument, RecordDocument, Sign, sign_symbol

logger = get_logger(__name__)

EXHAUSTIVE_LIMIT = 1 << 20


@dataclass(frozen=True, slots=True)
class BlockSpec:
    level: int
    kind: BlockKind
    omega: Sign
    band: tuple[Fraction, Fraction]
    density: int = 0

    @classmethod
    def sign(cls, params: ControlParams, omega: Sign) -> BlockSpec:
        return cls(level=0, kind="sign", omega=omega, band=params.band(0, omega))

    @classmethod
    def sojourn(cls, params: ControlParams, n: int, omega: Sign) -> BlockSpec:
        return cls(
            level=n,
            kind="sojourn",
            omega=omega,
            band=params.band(n, omega),
            density=params.density_depths[n],
        )

    def contains(self, average: Fraction) -> bool:
        lo, hi = self.band
        return lo <= average <= hi


def in_two_sided_band(params: ControlParams, level: int, average: Fraction) -> bool:
    """average in [-a, -a/2] or [a/2, a] with a = alpha_level."""
    a = params.alpha[level]
    return a / 2 <= abs(average) <= a


@dataclass(frozen=True, slots=True)
class BlockRecord:
    mark: int
    start: int
    level: int
    kind: BlockKind
    omega: Sign
    average: Fraction

    def shifted(self, offset: int) -> BlockRecord:
        return BlockRecord(
            mark=self.mark + offset,
            start=self.start + offset,
            level=self.level,
            kind=self.kind,
            omega=self.omega,
            average=self.average,
        )


@dataclass(frozen=True, slots=True)
class Block:
    word: bytes
    total: int  # shifted Birkhoff sum times the common denominator
    records: tuple[BlockRecord, ...]


@dataclass(frozen=True, slots=True)
class SynthesisLedger:
    scale: Scale
    depth: int
    target: Fraction
    junction: bytes
    word: bytes
    context: bytes
    records: tuple[BlockRecord, ...]

    @property
    def prefix(self) -> bytes:
        """The synthesized word followed by its trailing context."""
        return self.word + self.context

    @property
    def length(self) -> int:
        return len(self.word)

    def marks(self) -> tuple[int, ...]:
        return (0,) + tuple(r.mark for r in self.records)

    def record_at(self, mark: int) -> BlockRecord:
        marks = [r.mark for r in self.records]
        pos = bisect_left(marks, mark)
        if pos == len(marks) or marks[pos] != mark:
            raise SynthesisError(f"{mark} is not a marked point")
        return self.records[pos]


def choose_sign(
    history_average: Fraction,
    history_length: int,
    level: int,
    params: ControlParams,
    *,
    steer: Sign = 1,
) -> Sign:
    """Pick the next sub-block sign against the threshold 5/6 * alpha_{level+1}.

    The threshold itself goes to the steering sign.
    """
    if history_length < 1:
        raise SynthesisError("sign choice needs a non-empty history")
    if not 0 <= level < params.depth:
        raise SynthesisError(f"level {level} has no parent level in the params")
    threshold = Fraction(5, 6) * params.alpha[level + 1]
    if steer > 0:
        return 1 if history_average <= threshold else -1
    return -1 if history_average >= -threshold else 1


def _window_sum(word: bytes, values: Mapping[bytes, int], k: int, continuation: bytes) -> int:
    full = word + continuation
    return sum(values[full[i : i + k]] for i in range(len(word)))


def _words(sft: Sft, length: int, entry: int | None, junction: bytes) -> Iterator[bytes]:
    """Legal words of ``length`` in lexicographic order that fit between entry and junction."""
    if len(junction) > length:
        return
    if junction and entry is not None and not sft.allowed(entry, junction[0]):
        return

    def extend(word: bytes) -> Iterator[bytes]:
        if len(word) == length:
            if not junction or sft.allowed(word[-1], junction[0]):
                yield word
            return
        prev = word[-1] if word else entry
        for s in range(sft.alphabet_size):
            if prev is None or sft.allowed(prev, s):
                yield from extend(word + bytes([s]))

    yield from extend(junction)


def sign_block(
    sft: Sft,
    shifted: Potential,
    params: ControlParams,
    omega: Sign,
    *,
    length: int,
    entry: int | None = None,
    junction: bytes = b"",
    exhaustive_limit: int = EXHAUSTIVE_LIMIT,
) -> bytes:
    """A legal word whose ``shifted``-average lies in omega * [alpha_0/2, alpha_0].

    Among admissible words the one closest to omega * 3 alpha_0 / 4 wins; ties
    go to the lexicographically first.
    """
    values, d = shifted.scaled_values()
    k = shifted.depth
    spec = BlockSpec.sign(params, omega)
    center = omega * 3 * params.alpha[0] / 4
    lo, hi = spec.band

    def distance_to_band(avg: Fraction) -> Fraction:
        return max(lo - avg, avg - hi, Fraction(0))

    nearest: Fraction | None = None
    best: tuple[Fraction, bytes] | None = None
    if sft.alphabet_size**length <= exhaustive_limit:
        for word in _words(sft, length, entry, junction):
            avg = Fraction(_window_sum(word, values, k, junction), d * length)
            if spec.contains(avg):
                gap = abs(avg - center)
                if best is None or gap < best[0]:
                    best = (gap, word)
            elif nearest is None or distance_to_band(avg) < distance_to_band(nearest):
                nearest = avg
    else:
        found = _greedy_word(sft, values, k, d, spec, center, length, entry, junction)
        if isinstance(found, bytes):
            best = (Fraction(0), found)
        else:
            nearest = found
    if best is None:
        raise BandUnreachableError(
            f"no legal word of length {length} reaches the {sign_symbol(omega)} band",
            level=0,
            nearest=nearest,
        )
    return best[1]


def _greedy_word(
    sft: Sft,
    values: Mapping[bytes, int],
    k: int,
    d: int,
    spec: BlockSpec,
    center: Fraction,
    length: int,
    entry: int | None,
    junction: bytes,
) -> bytes | Fraction | None:
    # Depth-first search, children ordered by how close the running sum stays
    # to the band centre; stops after length**2 visited nodes.
    if len(junction) > length:
        return None
    budget = length * length
    nearest: Fraction | None = None
    stack = [junction]
    while stack and budget > 0:
        word = stack.pop()
        budget -= 1
        if len(word) == length:
            if junction and not sft.allowed(word[-1], junction[0]):
                continue
            avg = Fraction(_window_sum(word, values, k, junction), d * length)
            if spec.contains(avg):
                return word
            if nearest is None or abs(avg - center) < abs(nearest - center):
                nearest = avg
            continue
        prev = word[-1] if word else entry
        children = [
            word + bytes([s])
            for s in range(sft.alphabet_size)
            if prev is None or sft.allowed(prev, s)
        ]

        def drift(w: bytes) -> Fraction:
            done = sum(values[w[i : i + k]] for i in range(len(w) - k + 1))
            return abs(done - center * d * max(len(w) - k + 1, 0))

        children.sort(key=lambda w: (drift(w), w))
        stack.extend(reversed(children))
    return nearest


def _round_up(value: int, step: int) -> int:
    return value + (-value) % step


def core_span(sft: Sft, m: int, k: int, t0: int, word: bytes | None = None) -> int:
    """Upper bound on the length of a sojourn core region for density depth m."""
    if m == 0:
        return 0
    universal = word if word is not None else universal_word(sft, m)
    return _round_up(k - 1 + 2 * sft.mixing_power + len(universal), t0)


class BlockMemo:
    """Blocks keyed by signature; the first stored block for a key wins."""

    def __init__(self) -> None:
        self._blocks: dict[Hashable, Block] = {}
        self._lock = threading.Lock()

    def get_or_create(self, key: Hashable, factory: Callable[[], Block]) -> Block:
        with self._lock:
            found = self._blocks.get(key)
        if found is not None:
            return found
        block = factory()
        with self._lock:
            return self._blocks.setdefault(key, block)

    def __len__(self) -> int:
        with self._lock:
            return len(self._blocks)


class Synthesizer:
    def __init__(
        self,
        sft: Sft,
        potential: Potential,
        scale: Scale,
        params: ControlParams,
        *,
        universal_words: Mapping[int, bytes] | None = None,
        exhaustive_limit: int = EXHAUSTIVE_LIMIT,
    ) -> None:
        low, high = average_range(sft, potential)
        if not low < params.target < high:
            raise TargetOutOfRangeError(f"target {params.target} is not inside ({low}, {high})")
        self.sft = sft
        self.potential = potential
        self.scale = scale
        self.params = params
        self.shifted = shift_potential(potential, params.target)
        self.exhaustive_limit = exhaustive_limit
        self._values, self._d = self.shifted.scaled_values()
        self._k = potential.depth
        self.junction = legal_words(sft, self._k - 1)[0] if self._k >= 2 else b""
        self._universal: dict[int, bytes] = dict(universal_words or {})
        self._universal_lock = threading.Lock()
        self._memo = BlockMemo()

    @property
    def memo_size(self) -> int:
        return len(self._memo)

    def _entry_key(self, entry: int | None) -> int | None:
        # With a junction every block opens the same way, so the entry is irrelevant.
        return entry if self._k == 1 else None

    def _sum(self, word: bytes) -> int:
        return _window_sum(word, self._values, self._k, self.junction)

    def universal(self, m: int) -> bytes:
        with self._universal_lock:
            found = self._universal.get(m)
        if found is None:
            found = universal_word(self.sft, m)
            with self._universal_lock:
                found = self._universal.setdefault(m, found)
        return found

    def sign_block(self, omega: Sign, entry: int | None) -> Block:
        key = ("sign", omega, self._entry_key(entry))
        return self._memo.get_or_create(key, partial(self._build_sign, omega, entry))

    def _build_sign(self, omega: Sign, entry: int | None) -> Block:
        t0 = self.scale.t0
        word = sign_block(
            self.sft,
            self.shifted,
            self.params,
            omega,
            length=t0,
            entry=entry,
            junction=self.junction,
            exhaustive_limit=self.exhaustive_limit,
        )
        total = self._sum(word)
        record = BlockRecord(
            mark=t0, start=0, level=0, kind="sign", omega=omega, average=Fraction(total, self._d * t0)
        )
        return Block(word=word, total=total, records=(record,))

    def core(self, m: int, entry: int | None) -> bytes:
        """Junction, connector, universal word and a bridge up to a multiple of T_0."""
        if m == 0:
            return b""
        universal = self.universal(m)
        junction = self.junction
        if junction:
            head = junction + self.sft.connector(junction[-1], universal[0])
        elif entry is not None:
            head = self.sft.connector(entry, universal[0])
        else:
            head = b""
        body = head + universal
        exit_symbol = junction[0] if junction else None
        t0 = self.scale.t0
        first = (-len(body)) % t0
        for extra in range(first, first + t0 * (self.sft.mixing_power + 2), t0):
            if exit_symbol is None or self.sft.walks(universal[-1], exit_symbol, extra + 1):
                return body + bridge(self.sft, universal[-1], exit_symbol, extra)
        raise SynthesisError(f"no bridge closes the level core for m={m}")

    def sojourn_block(self, n: int, omega: Sign, entry: int | None) -> Block:
        key = ("sojourn", n, omega, self._entry_key(entry))
        return self._memo.get_or_create(key, partial(self._build_sojourn, n, omega, entry))

    def _build_sojourn(self, n: int, omega: Sign, entry: int | None) -> Block:
        size = self.scale.length(n)
        t0 = self.scale.t0
        m = self.params.density_depths[n]
        if m:
            universal = self.universal(m)
            if size < 2 * len(universal) + 2 * self.sft.mixing_power + t0:
                raise CoreTooLongError(
                    f"universal word of length {len(universal)} for m={m} does not fit T_{n}={size}",
                    level=n,
                )
        core = self.core(m, entry)
        if len(core) >= size:
            raise CoreTooLongError(f"core of length {len(core)} fills T_{n}={size}", level=n)

        parts = [core]
        total = self._sum(core)
        length = len(core)
        last = core[-1] if core else entry
        while length < size:
            if length == 0:
                sign = omega
            else:
                sign = choose_sign(Fraction(total, self._d * length), length, n - 1, self.params, steer=omega)
            block = self.sign_block(sign, last)
            parts.append(block.word)
            total += block.total
            length += t0
            last = block.word[-1]

        average = Fraction(total, self._d * size)
        spec = BlockSpec.sojourn(self.params, n, omega)
        if not spec.contains(average):
            raise BandUnreachableError(
                f"sojourn block misses the {sign_symbol(omega)} band", level=n, nearest=average
            )
        record = BlockRecord(mark=size, start=0, level=n, kind="sojourn", omega=omega, average=average)
        return Block(word=b"".join(parts), total=total, records=(record,))

    def _shape(self, tail: SparseTail, n: int, start: int) -> tuple[tuple[int, int], ...]:
        end = start + self.scale.length(n)
        shape: list[tuple[int, int]] = []
        for level in range(n):
            starts = tail.components[level]
            for s in starts[bisect_left(starts, start) : bisect_left(starts, end)]:
                shape.append((level, s - start))
        return tuple(shape)

    @staticmethod
    def _is_component(tail: SparseTail, level: int, start: int) -> bool:
        starts = tail.components[level]
        pos = bisect_right(starts, start) - 1
        return pos >= 0 and starts[pos] == start

    def good_block(self, tail: SparseTail, n: int, start: int, omega: Sign, entry: int | None) -> Block:
        if n == 0:
            return self.sign_block(omega, entry)
        key = ("good", n, self._shape(tail, n, start), omega, self._entry_key(entry))
        return self._memo.get_or_create(key, partial(self._build_good, tail, n, start, omega, entry))

    def _build_good(self, tail: SparseTail, n: int, start: int, omega: Sign, entry: int | None) -> Block:
        sub = self.scale.length(n - 1)
        parts: list[bytes] = []
        records: list[BlockRecord] = []
        total = 0
        length = 0
        last = entry
        for idx in range(self.scale.factor(n)):
            a = start + idx * sub
            if idx == 0:
                sign = omega
            else:
                sign = choose_sign(Fraction(total, self._d * length), length, n - 1, self.params, steer=omega)
            try:
                if n == 1:
                    block = self.sign_block(sign, last)
                elif self._is_component(tail, n - 1, a):
                    block = self.sojourn_block(n - 1, sign, last)
                else:
                    block = self.good_block(tail, n - 1, a, sign, last)
            except BandUnreachableError as exc:
                if exc.start is not None:
                    raise
                raise BandUnreachableError(
                    "sub-block misses its band", level=exc.level, start=a, nearest=exc.nearest
                ) from exc
            offset = idx * sub
            parts.append(block.word)
            records.extend(r.shifted(offset) for r in block.records)
            total += block.total
            length += sub
            last = block.word[-1]

        average = Fraction(total, self._d * length)
        lo, hi = self.params.band(n, omega)
        if not lo <= average <= hi:
            raise BandUnreachableError(
                f"level-{n} block misses the {sign_symbol(omega)} band; factor {self.scale.factor(n)} is too small",
                level=n,
                start=start,
                nearest=average,
            )
        logger.debug("synth.block", level=n, omega=omega, start=start, average=str(average))
        return Block(word=b"".join(parts), total=total, records=tuple(records))

    def _context(self, word: bytes, depth: int) -> bytes:
        need = required_context(self.params, depth, self._k)
        head = self.junction
        last = head[-1] if head else word[-1]
        return head + bridge(self.sft, last, None, need - len(head))

    def run(self, tail: SparseTail) -> SynthesisLedger:
        if tail.depth > self.scale.depth:
            raise SynthesisError(f"tail depth {tail.depth} exceeds the scale depth {self.scale.depth}")
        if tail.scale.levels[: tail.depth + 1] != self.scale.levels[: tail.depth + 1]:
            raise SynthesisError("tail and synthesizer use different scales")
        validate_params(self.params, tail.depth)
        if self.params.density_depths[0] != 0:
            raise SynthesisError("level 0 cannot carry density: density_depths[0] must be 0")
        block = self.good_block(tail, tail.depth, 0, 1, None)
        ledger = SynthesisLedger(
            scale=self.scale,
            depth=tail.depth,
            target=self.params.target,
            junction=self.junction,
            word=block.word,
            context=self._context(block.word, tail.depth),
            records=block.records,
        )
        logger.info(
            "synth.done",
            depth=tail.depth,
            length=ledger.length,
            records=len(ledger.records),
            blocks=self.memo_size,
        )
        return ledger

    def extend(self, ledger: SynthesisLedger, tail: SparseTail) -> SynthesisLedger:
        """Grow a ledger to a deeper tail; the old word stays a prefix."""
        if tail.depth < ledger.depth:
            raise SynthesisError(f"cannot extend depth {ledger.depth} to {tail.depth}")
        grown = self.run(tail)
        if grown.word[: ledger.length] != ledger.word:
            raise SynthesisError("extension changed the existing prefix")
        logger.info("synth.extend", depth_from=ledger.depth, depth_to=tail.depth)
        return grown

    async def warm(self, *, workers: int = 4) -> None:
        """Precompute universal words and sign blocks on worker threads."""
        limiter = anyio.CapacityLimiter(workers)
        entries: list[int | None] = [None]
        if self._k == 1:
            entries.extend(range(self.sft.alphabet_size))

        def sign(omega: Sign, entry: int | None) -> None:
            try:
                self.sign_block(omega, entry)
            except BandUnreachableError:
                logger.debug("synth.warm.skip", omega=omega, entry=entry)

        async with anyio.create_task_group() as tg:
            for m in sorted(set(self.params.density_depths) - {0}):
                tg.start_soon(partial(anyio.to_thread.run_sync, self.universal, m, limiter=limiter))
            for omega in (1, -1):
                for entry in entries:
                    tg.start_soon(partial(anyio.to_thread.run_sync, sign, omega, entry, limiter=limiter))


def synthesize(
    sft: Sft,
    potential: Potential,
    scale: Scale,
    tail: SparseTail,
    params: ControlParams,
    *,
    universal_words: Mapping[int, bytes] | None = None,
) -> SynthesisLedger:
    synth = Synthesizer(sft, potential, scale, params, universal_words=universal_words)
    return synth.run(tail)


def ledger_document(ledger: SynthesisLedger) -> LedgerDocument:
    records: list[RecordDocument] = [
        {
            "mark": r.mark,
            "start": r.start,
            "level": r.level,
            "kind": r.kind,
            "omega": sign_symbol(r.omega),
            "average": str(r.average),
        }
        for r in ledger.records
    ]
    return {
        "t0": ledger.scale.t0,
        "factors": list(ledger.scale.factors),
        "depth": ledger.depth,
        "target": str(ledger.target),
        "junction": list(ledger.junction),
        "length": ledger.length,
        "records": records,
    }


def ledger_from_document(doc: LedgerDocument, prefix: bytes) -> SynthesisLedger:
    scale = build_scale(int(doc["t0"]), [int(k) for k in doc["factors"]])
    length = int(doc["length"])
    if len(prefix) < length:
        raise SynthesisError(f"symbol file holds {len(prefix)} symbols, ledger needs {length}")
    records = tuple(
        BlockRecord(
            mark=int(r["mark"]),
            start=int(r["start"]),
            level=int(r["level"]),
            kind=r["kind"],
            omega=1 if r["omega"] == "+" else -1,
            average=Fraction(r["average"]),
        )
        for r in doc["records"]
    )
    return SynthesisLedger(
        scale=scale,
        depth=int(doc["depth"]),
        target=Fraction(doc["target"]),
        junction=bytes(doc["junction"]),
        word=prefix[:length],
        context=prefix[length:],
        records=records,
    )


def required_context(params: ControlParams, depth: int, k: int) -> int:
    return max(k - 1, max(params.density_depths[: depth + 1], default=0) - 1, 0)

