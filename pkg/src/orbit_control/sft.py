from __future__ import annotations

import math
from collections import deque
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from fractions import Fraction

import networkx as nx
import numpy as np

from .errors import IllegalWordError, NotMixingError, SftError
from .log import get_logger

logger = get_logger(__name__)

MAX_ALPHABET = 255
MAX_WINDOW_CODES = 1 << 20
EXACT_INT64 = 2**62

SymbolKey = bytes | str | Sequence[int]


def word_from_text(text: str) -> bytes:
    """``"0101"`` or ``"0,1,0,1"`` -> raw symbols."""
    text = text.strip()
    if not text:
        return b""
    if "," in text:
        return bytes(int(part) for part in text.split(","))
    return bytes(int(ch) for ch in text)


def word_text(word: bytes) -> str:
    if all(s < 10 for s in word):
        return "".join(str(s) for s in word)
    return ",".join(str(s) for s in word)


def _as_word(key: SymbolKey) -> bytes:
    if isinstance(key, bytes):
        return key
    if isinstance(key, str):
        return word_from_text(key)
    return bytes(int(s) for s in key)


@dataclass(frozen=True, slots=True)
class Sft:
    alphabet_size: int
    transition: tuple[tuple[bool, ...], ...]
    mixing_power: int
    connectors: Mapping[tuple[int, int], bytes]

    def allowed(self, a: int, b: int) -> bool:
        return self.transition[a][b]

    def successors(self, a: int) -> tuple[int, ...]:
        return tuple(b for b in range(self.alphabet_size) if self.transition[a][b])

    def matrix(self) -> np.ndarray:
        return np.array(self.transition, dtype=np.int64)

    def connector(self, a: int, b: int) -> bytes:
        return self.connectors[(a, b)]

    def walks(self, a: int, b: int, edges: int) -> bool:
        """Whether some path of exactly ``edges`` transitions leads from a to b."""
        if edges < 0:
            return False
        if edges >= self.mixing_power:
            return True
        m = self.matrix()
        power = np.linalg.matrix_power(m, edges) if edges else np.eye(self.alphabet_size, dtype=np.int64)
        return bool(power[a, b] > 0)


def _mixing_power(m: np.ndarray) -> int | None:
    size = m.shape[0]
    power = m.copy()
    for p in range(1, size * size + 1):
        if power.all():
            return p
        power = np.minimum(power @ m, 1)
    return None


def _shortest_connector(transition: Sequence[Sequence[bool]], a: int, b: int) -> bytes:
    if transition[a][b]:
        return b""
    size = len(transition)
    parent: dict[int, int] = {}
    queue = deque([a])
    seen = {a}
    while queue:
        u = queue.popleft()
        for v in range(size):
            if not transition[u][v] or v in seen:
                continue
            parent[v] = u
            if transition[v][b]:
                path = [v]
                while path[-1] != a and parent.get(path[-1], a) != a:
                    path.append(parent[path[-1]])
                return bytes(reversed(path))
            seen.add(v)
            queue.append(v)
    raise NotMixingError(f"no path from {a} to {b}")


def build_sft(alphabet_size: int, transitions: Sequence[Sequence[bool | int]]) -> Sft:
    if not 2 <= alphabet_size <= MAX_ALPHABET:
        raise SftError(f"alphabet size {alphabet_size} outside 2..{MAX_ALPHABET}")
    if len(transitions) != alphabet_size or any(len(row) != alphabet_size for row in transitions):
        raise SftError(f"transition matrix must be {alphabet_size}x{alphabet_size}")
    rows = tuple(tuple(bool(x) for x in row) for row in transitions)
    power = _mixing_power(np.array(rows, dtype=np.int64))
    if power is None:
        raise NotMixingError(f"no power <= {alphabet_size ** 2} of the transition matrix is positive")
    connectors = {
        (a, b): _shortest_connector(rows, a, b)
        for a in range(alphabet_size)
        for b in range(alphabet_size)
    }
    logger.debug("sft.built", alphabet_size=alphabet_size, mixing_power=power)
    return Sft(alphabet_size=alphabet_size, transition=rows, mixing_power=power, connectors=connectors)


def sft_from_forbidden(alphabet_size: int, forbidden: Iterable[SymbolKey]) -> Sft:
    rows = [[True] * alphabet_size for _ in range(alphabet_size)]
    for key in forbidden:
        pair = _as_word(key)
        if len(pair) != 2 or max(pair) >= alphabet_size:
            raise SftError(f"forbidden word {word_text(pair)!r} is not a 2-word over the alphabet")
        rows[pair[0]][pair[1]] = False
    return build_sft(alphabet_size, rows)


def full_shift(alphabet_size: int) -> Sft:
    return sft_from_forbidden(alphabet_size, ())


def is_legal(sft: Sft, word: bytes) -> bool:
    if any(s >= sft.alphabet_size for s in word):
        return False
    return all(sft.transition[a][b] for a, b in zip(word, word[1:]))


def legal_words(sft: Sft, m: int) -> tuple[bytes, ...]:
    """Legal words of length m, in lexicographic order."""
    if m < 0:
        raise SftError("word length must be >= 0")
    if m == 0:
        return (b"",)
    words = [bytes([s]) for s in range(sft.alphabet_size)]
    for _ in range(m - 1):
        words = [w + bytes([b]) for w in words for b in sft.successors(w[-1])]
    return tuple(words)


def bridge(sft: Sft, a: int | None, b: int | None, length: int) -> bytes:
    """Smallest legal word w of exact length with a.w.b legal (None leaves an end free)."""
    if length < 0:
        raise SftError("bridge length must be >= 0")
    if length == 0:
        if a is not None and b is not None and not sft.allowed(a, b):
            raise SftError(f"{a} cannot be followed by {b}")
        return b""
    out = bytearray()
    prev = a
    for pos in range(length):
        remaining = length - pos
        for s in range(sft.alphabet_size):
            if prev is not None and not sft.allowed(prev, s):
                continue
            if b is not None and not sft.walks(s, b, remaining):
                continue
            out.append(s)
            prev = s
            break
        else:
            raise SftError(f"no legal word of length {length} joins {a} to {b}")
    return bytes(out)


@dataclass(frozen=True, slots=True)
class Potential:
    """A potential determined by the first ``depth`` coordinates."""

    depth: int
    alphabet_size: int
    values: Mapping[bytes, Fraction]
    max_abs: Fraction

    def value(self, window: bytes) -> Fraction:
        try:
            return self.values[window]
        except KeyError:
            raise IllegalWordError(f"window {word_text(window)!r} is not a legal {self.depth}-word") from None

    @property
    def denominator(self) -> int:
        return math.lcm(*(v.denominator for v in self.values.values()))

    def scaled_table(self) -> tuple[np.ndarray, int]:
        """Integer values times the common denominator, indexed by base-A window code."""
        d = self.denominator
        scaled = {window_code(w, self.alphabet_size): int(v * d) for w, v in self.values.items()}
        wide = any(abs(v) >= EXACT_INT64 for v in scaled.values())
        table = np.zeros(self.alphabet_size**self.depth, dtype=object if wide else np.int64)
        for code, v in scaled.items():
            table[code] = v
        return table, d

    def scaled_values(self) -> tuple[dict[bytes, int], int]:
        d = self.denominator
        return {w: int(v * d) for w, v in self.values.items()}, d


def build_potential(
    sft: Sft,
    depth: int,
    values: Mapping[SymbolKey, Fraction | int | str],
    default: Fraction | int | str | None = None,
) -> Potential:
    if depth < 1:
        raise SftError("potential depth must be >= 1")
    if sft.alphabet_size**depth > MAX_WINDOW_CODES:
        raise SftError(
            f"potential table of {sft.alphabet_size}**{depth} windows exceeds {MAX_WINDOW_CODES}"
        )
    legal = legal_words(sft, depth)
    table: dict[bytes, Fraction] = {}
    for key, raw in values.items():
        window = _as_word(key)
        if len(window) != depth:
            raise SftError(f"key {word_text(window)!r} has length {len(window)}, expected {depth}")
        if not is_legal(sft, window):
            raise IllegalWordError(f"key {word_text(window)!r} is not a legal word")
        table[window] = Fraction(raw)
    missing = [w for w in legal if w not in table]
    if missing:
        if default is None:
            raise SftError(f"no value for {word_text(missing[0])!r} and no default")
        for w in missing:
            table[w] = Fraction(default)
    ordered = {w: table[w] for w in legal}
    return Potential(
        depth=depth,
        alphabet_size=sft.alphabet_size,
        values=ordered,
        max_abs=max(abs(v) for v in ordered.values()),
    )


def shift_potential(potential: Potential, target: Fraction) -> Potential:
    """The potential phi - t."""
    t = Fraction(target)
    values = {w: v - t for w, v in potential.values.items()}
    return Potential(
        depth=potential.depth,
        alphabet_size=potential.alphabet_size,
        values=values,
        max_abs=max(abs(v) for v in values.values()),
    )


def window_code(window: bytes, alphabet_size: int) -> int:
    code = 0
    for s in window:
        code = code * alphabet_size + s
    return code


def decode_window(code: int, alphabet_size: int, length: int) -> bytes:
    out = bytearray(length)
    for i in range(length - 1, -1, -1):
        code, out[i] = divmod(code, alphabet_size)
    return bytes(out)


def window_codes(word: bytes, length: int, alphabet_size: int) -> np.ndarray:
    """Base-A codes of every length-``length`` window of ``word``."""
    count = len(word) - length + 1
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    symbols = np.frombuffer(word, dtype=np.uint8).astype(np.int64)
    codes = np.zeros(count, dtype=np.int64)
    for j in range(length):
        codes = codes * alphabet_size + symbols[j : j + count]
    return codes


def birkhoff_sum(
    word: bytes,
    potential: Potential,
    continuation: bytes = b"",
    *,
    sft: Sft | None = None,
) -> Fraction:
    k = potential.depth
    if len(continuation) < k - 1:
        raise SftError(f"continuation needs {k - 1} symbols, got {len(continuation)}")
    full = word + continuation
    if sft is not None and not is_legal(sft, full):
        raise IllegalWordError(f"{word_text(full)!r} is not legal")
    total = Fraction(0)
    for i in range(len(word)):
        total += potential.value(full[i : i + k])
    return total


def window_graph(sft: Sft, depth: int) -> nx.DiGraph:
    """Legal depth-words, with an edge u -> v whenever v continues u by one symbol."""
    graph = nx.DiGraph()
    words = legal_words(sft, depth)
    graph.add_nodes_from(words)
    for u in words:
        for b in sft.successors(u[-1]):
            graph.add_edge(u, u[1:] + bytes([b]))
    return graph


def _min_mean_cycle(graph: nx.DiGraph, weight: Mapping[bytes, Fraction]) -> Fraction:
    # Karp, with every node reachable from a zero-weight virtual source.
    nodes = list(graph.nodes)
    n = len(nodes)
    levels: list[dict[bytes, Fraction | None]] = [{v: Fraction(0) for v in nodes}]
    for _ in range(n):
        prev = levels[-1]
        cur: dict[bytes, Fraction | None] = {}
        for v in nodes:
            best: Fraction | None = None
            for u in graph.predecessors(v):
                du = prev[u]
                if du is None:
                    continue
                cand = du + weight[u]
                if best is None or cand < best:
                    best = cand
            cur[v] = best
        levels.append(cur)
    result: Fraction | None = None
    for v in nodes:
        dn = levels[n][v]
        if dn is None:
            continue
        worst: Fraction | None = None
        for j in range(n):
            dj = levels[j][v]
            if dj is None:
                continue
            value = (dn - dj) / (n - j)
            if worst is None or value > worst:
                worst = value
        if worst is not None and (result is None or worst < result):
            result = worst
    if result is None:
        raise SftError("window graph has no cycle")
    return result


def average_range(sft: Sft, potential: Potential) -> tuple[Fraction, Fraction]:
    """Exact (min, max) of Birkhoff averages along periodic orbits."""
    graph = window_graph(sft, potential.depth)
    low = _min_mean_cycle(graph, potential.values)
    high = -_min_mean_cycle(graph, {w: -v for w, v in potential.values.items()})
    logger.debug("sft.average_range", low=str(low), high=str(high))
    return low, high


def universal_word(sft: Sft, m: int) -> bytes:
    """A legal word containing every legal m-word as a factor."""
    if m < 1:
        raise SftError("universal words need m >= 1")
    if m == 1:
        out = bytearray([0])
        for s in range(1, sft.alphabet_size):
            out += sft.connector(out[-1], s)
            out.append(s)
        return bytes(out)

    graph = nx.MultiDiGraph()
    for w in legal_words(sft, m):
        graph.add_edge(w[:-1], w[1:], word=w, virtual=False)
    surplus_in: list[bytes] = []
    surplus_out: list[bytes] = []
    for node in sorted(graph.nodes):
        diff = graph.in_degree(node) - graph.out_degree(node)
        surplus_in.extend([node] * max(diff, 0))
        surplus_out.extend([node] * max(-diff, 0))
    for u, v in zip(surplus_in, surplus_out):
        graph.add_edge(u, v, word=b"", virtual=True)

    source = min(graph.nodes)
    circuit = list(nx.eulerian_circuit(graph, source=source, keys=True))
    cut = next(
        (i for i, (u, v, key) in enumerate(circuit) if graph.edges[u, v, key]["virtual"]),
        None,
    )
    if cut is not None:
        circuit = circuit[cut + 1 :] + circuit[:cut]
    if not circuit:
        return min(graph.nodes)

    out = bytearray(circuit[0][0])
    for u, v, key in circuit:
        if graph.edges[u, v, key]["virtual"]:
            out += sft.connector(u[-1], v[0])
            out += v
        else:
            out.append(v[-1])
    word = bytes(out)
    logger.debug("sft.universal_word", m=m, length=len(word))
    return word


def missing_words(sft: Sft, word: bytes, m: int) -> tuple[bytes, ...]:
    if m == 0:
        return ()
    present = {word[i : i + m] for i in range(len(word) - m + 1)}
    return tuple(w for w in legal_words(sft, m) if w not in present)
