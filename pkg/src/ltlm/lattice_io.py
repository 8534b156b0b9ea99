"""Text formats for lattices, symbol tables, transcripts and alignments.

Lattice archive grammar (UTF-8, LF)::

    record     := utt_id NL arc_line* final_line+ (NL | EOF)
    arc_line   := state SP state SP token SP cost SP cost NL     # src dst word lm ac
    final_line := state SP cost NL

Fields are separated by runs of spaces or tabs.  The initial state is the
only state without incoming arcs; when several exist it is the source of the
first arc (or the first final state for an arc-less record).  Arc order is
preserved whenever the initial state is unambiguous.
Blank lines separate records.  Costs are finite decimal numbers and are written
with the shortest representation that reads back to the same double.
"""

from __future__ import annotations

import io
import math
import re
from typing import IO, Iterable, Iterator, Mapping, Sequence

from .errors import (
    DataError,
    DuplicateId,
    DuplicateToken,
    DuplicateUtteranceId,
    LatticeSyntaxError,
    UnknownSymbol,
)
from .lattice import UNK, Arc, Lattice, SymbolTable, _check_basic, topological_order

_NUM = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?\Z")
_STATE = re.compile(r"\d{1,7}\Z")
_FIELD = re.compile(r"[^ \t]+")
MAX_STATE_ID = 1_000_000


class LatticeArchive:
    """Ordered collection of lattices keyed by utterance id."""

    def __init__(self, lattices: Iterable[Lattice] = (), references: Mapping[str, Sequence[str]] | None = None):
        self._lattices: list[Lattice] = []
        self._index: dict[str, int] = {}
        for lat in lattices:
            self.append(lat)
        self.references = dict(references or {})

    def append(self, lat: Lattice) -> None:
        if lat.utterance_id in self._index:
            raise DuplicateUtteranceId(lat.utterance_id)
        self._index[lat.utterance_id] = len(self._lattices)
        self._lattices.append(lat)

    def __getitem__(self, utt_id: str) -> Lattice:
        return self._lattices[self._index[utt_id]]

    def __contains__(self, utt_id) -> bool:
        return utt_id in self._index

    def __iter__(self) -> Iterator[Lattice]:
        return iter(self._lattices)

    def __len__(self) -> int:
        return len(self._lattices)

    def ids(self) -> list[str]:
        return [lat.utterance_id for lat in self._lattices]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, LatticeArchive)
            and self._lattices == other._lattices
            and self.references == other.references
        )


def _lines(source) -> Iterator[str]:
    if isinstance(source, bytes):
        try:
            source = source.decode("utf-8")
        except UnicodeDecodeError as e:
            raise LatticeSyntaxError(source[: e.start].count(b"\n") + 1, 1, "invalid UTF-8") from None
    if isinstance(source, str):
        source = io.StringIO(source)
    for line in source:
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        yield line


def _fields(line: str) -> list[tuple[str, int]]:
    return [(m.group(), m.start() + 1) for m in _FIELD.finditer(line)]


def _parse_cost(tok: str, lineno: int, col: int) -> float:
    if not _NUM.match(tok):
        raise LatticeSyntaxError(lineno, col, f"expected a number, got {tok!r}")
    val = float(tok)
    if not math.isfinite(val):
        raise LatticeSyntaxError(lineno, col, f"non-finite cost {tok!r}")
    return val


def _parse_state(tok: str, lineno: int, col: int) -> int:
    if not _STATE.match(tok) or int(tok) > MAX_STATE_ID:
        raise LatticeSyntaxError(lineno, col, f"expected a state id, got {tok!r}")
    return int(tok)


def _initial_state(arcs, finals) -> int:
    """The only state without incoming arcs; otherwise the source of the first arc."""
    if not arcs:
        return next(iter(finals))
    targets = {a.dst for a in arcs}
    sources = {a.src for a in arcs} - targets
    if len(sources) == 1:
        return sources.pop()
    return arcs[0].src


def _build(utt, arcs, finals, header_line) -> Lattice:
    if not finals:
        raise LatticeSyntaxError(header_line, 1, f"record {utt!r} has no final state")
    init = _initial_state(arcs, finals)
    n = 1 + max([init, *finals, *(a.src for a in arcs), *(a.dst for a in arcs)])
    lat = Lattice(utt, n, tuple(arcs), init, finals)
    _check_basic(lat)
    topological_order(lat)
    return lat


def parse_lattice_text(source, symbols: SymbolTable | None = None, strict: bool = True) -> LatticeArchive:
    """Parse a lattice archive.

    Tokens are mapped through ``symbols``; unknown tokens raise
    :class:`UnknownSymbol` in strict mode and map to ``<unk>`` otherwise.  With
    no symbol table, tokens must be integer ids.
    """
    archive = LatticeArchive()
    utt = None
    arcs: list[Arc] = []
    finals: dict[int, float] = {}
    header = 0
    lineno = 0
    for lineno, raw in enumerate(_lines(source), 1):
        line = raw.rstrip("\n")
        if line.endswith("\r"):
            raise LatticeSyntaxError(lineno, len(line), "CR line ending")
        fields = _fields(line)
        if not fields:
            if utt is not None:
                lat = _build(utt, arcs, finals, header)
                if utt in archive:
                    raise DuplicateUtteranceId(f"line {header}: {utt}")
                archive.append(lat)
                utt, arcs, finals = None, [], {}
            continue
        if utt is None:
            if len(fields) != 1:
                raise LatticeSyntaxError(lineno, fields[1][1], "utterance id line must have one field")
            utt, header = fields[0][0], lineno
            if utt in archive:
                raise DuplicateUtteranceId(f"line {lineno}: {utt}")
            continue
        if len(fields) == 5:
            if finals:
                raise LatticeSyntaxError(lineno, 1, "arc line after final-state lines")
            (s, cs), (d, cd), (tok, ct), (lm, cl), (ac, ca) = fields
            src = _parse_state(s, lineno, cs)
            dst = _parse_state(d, lineno, cd)
            if symbols is None:
                if not _STATE.match(tok):
                    raise LatticeSyntaxError(lineno, ct, f"expected a word id, got {tok!r}")
                word = int(tok)
            else:
                word = symbols.id(tok, -1)
                if word < 0:
                    if strict:
                        raise UnknownSymbol(tok, lineno)
                    word = UNK
            arcs.append(Arc(src, dst, word, _parse_cost(lm, lineno, cl), _parse_cost(ac, lineno, ca)))
        elif len(fields) == 2:
            (s, cs), (c, cc) = fields
            state = _parse_state(s, lineno, cs)
            if state in finals:
                raise LatticeSyntaxError(lineno, cs, f"duplicate final state {state}")
            finals[state] = _parse_cost(c, lineno, cc)
        else:
            raise LatticeSyntaxError(lineno, fields[0][1], f"expected 2 or 5 fields, got {len(fields)}")
    if utt is not None:
        archive.append(_build(utt, arcs, finals, header))
    return archive


def _fmt(x: float) -> str:
    return repr(float(x))


def lattice_to_text(lat: Lattice, symbols: SymbolTable | None = None) -> str:
    """One record, including the terminating blank line."""
    name = (lambda w: symbols.token(w)) if symbols is not None else str
    arcs = list(lat.arcs)
    if arcs and _initial_state(arcs, lat.final_states) != lat.initial_state:
        # several source states: an arc leaving the initial state must come first
        arcs.sort(key=lambda a: a.src != lat.initial_state)
    if not arcs and lat.final_states and next(iter(lat.final_states)) != lat.initial_state:
        raise DataError(f"{lat.utterance_id}: arc-less lattice must list its initial state first")
    parts = [lat.utterance_id, "\n"]
    for a in arcs:
        parts.append(f"{a.src} {a.dst} {name(a.word)} {_fmt(a.lm_cost)} {_fmt(a.ac_cost)}\n")
    for s, c in lat.final_states.items():
        parts.append(f"{s} {_fmt(c)}\n")
    parts.append("\n")
    return "".join(parts)


def write_lattice_text(archive: Iterable[Lattice], stream: IO[str], symbols: SymbolTable | None = None) -> None:
    for lat in archive:
        stream.write(lattice_to_text(lat, symbols))


def read_lattice_file(path, symbols=None, strict=True) -> LatticeArchive:
    with open(path, encoding="utf-8") as f:
        return parse_lattice_text(f, symbols, strict)


def write_lattice_file(path, archive, symbols=None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        write_lattice_text(archive, f, symbols)


# symbol tables


def read_symbol_table(source) -> SymbolTable:
    pairs = []
    seen_tok: set[str] = set()
    seen_id: set[int] = set()
    for lineno, raw in enumerate(_lines(source), 1):
        line = raw.rstrip("\n")
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not _STATE.match(parts[1]) or any(c.isspace() for c in parts[0]):
            raise LatticeSyntaxError(lineno, 1, "expected 'token<TAB>id'")
        tok, i = parts[0], int(parts[1])
        if tok in seen_tok:
            raise DuplicateToken(f"line {lineno}: {tok!r}")
        if i in seen_id:
            raise DuplicateId(f"line {lineno}: {i}")
        seen_tok.add(tok)
        seen_id.add(i)
        pairs.append((tok, i))
    return SymbolTable.from_pairs(pairs)


def write_symbol_table(table: SymbolTable, stream: IO[str]) -> None:
    for tok, i in table.items():
        stream.write(f"{tok}\t{i}\n")


def load_symbol_table(path) -> SymbolTable:
    with open(path, encoding="utf-8") as f:
        return read_symbol_table(f)


def save_symbol_table(path, table: SymbolTable) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        write_symbol_table(table, f)


# "utt_id<TAB>item item ..." tables: transcripts (.ref), alignments (.ali), targets (.tgt)


def read_table(source, convert=str) -> dict[str, list]:
    out: dict[str, list] = {}
    for lineno, raw in enumerate(_lines(source), 1):
        line = raw.rstrip("\n")
        if not line:
            continue
        utt, sep, rest = line.partition("\t")
        if not sep or not utt or any(c.isspace() for c in utt):
            raise LatticeSyntaxError(lineno, 1, "expected 'utt_id<TAB>items'")
        if utt in out:
            raise DuplicateUtteranceId(f"line {lineno}: {utt}")
        try:
            out[utt] = [convert(t) for t in rest.split()]
        except ValueError:
            raise LatticeSyntaxError(lineno, len(utt) + 2, "bad item") from None
    return out


def write_table(table: Mapping[str, Sequence], stream: IO[str]) -> None:
    for utt, items in table.items():
        stream.write(f"{utt}\t{' '.join(str(x) for x in items)}\n")


def read_transcripts(path) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as f:
        return read_table(f)


def read_alignments(path) -> dict[str, list[int]]:
    with open(path, encoding="utf-8") as f:
        return read_table(f, int)


def save_table(path, table) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        write_table(table, f)
