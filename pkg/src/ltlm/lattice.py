"""Lattice data model and structural algorithms.

Scores are stored as costs (negative natural-log probabilities).  A lattice
is an immutable value; every operation returns a new lattice.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, NamedTuple, Sequence

from .errors import (
    AlreadyAugmented,
    CyclicLattice,
    DuplicateId,
    DuplicateToken,
    MalformedLattice,
    NoFinalState,
    NoInitialState,
    ReservedIdViolation,
    TooManyPaths,
)

EPS, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = {EPS: "<eps>", BOS: "<s>", EOS: "</s>", UNK: "<unk>"}
AUX_IDS = frozenset((EPS, BOS, EOS))

# states per lattice before augmentation; augmented ids must fit 256 positions
MAX_STATES = 254


class SymbolTable:
    """Bidirectional token <-> id map with reserved ids 0-3."""

    def __init__(self, tokens: Sequence[str] = ()):
        self._tok2id: dict[str, int] = {}
        self._id2tok: dict[int, str] = {}
        for i, tok in RESERVED.items():
            self._tok2id[tok] = i
            self._id2tok[i] = tok
        for tok in tokens:
            self.add(tok)

    @classmethod
    def from_pairs(cls, pairs) -> "SymbolTable":
        table = cls.__new__(cls)
        table._tok2id = {}
        table._id2tok = {}
        for tok, i in pairs:
            if tok in table._tok2id:
                raise DuplicateToken(f"token {tok!r} assigned twice")
            if i in table._id2tok:
                raise DuplicateId(f"id {i} assigned twice")
            table._tok2id[tok] = i
            table._id2tok[i] = tok
        for i, tok in RESERVED.items():
            if table._id2tok.get(i) != tok:
                raise ReservedIdViolation(f"id {i} must map to {tok}")
        return table

    def add(self, token: str) -> int:
        if token in self._tok2id:
            return self._tok2id[token]
        if not token or any(c.isspace() for c in token):
            raise ValueError(f"invalid token {token!r}")
        i = self._next_id()
        self._tok2id[token] = i
        self._id2tok[i] = token
        return i

    def _next_id(self) -> int:
        # cached so building a large table stays linear
        nxt = getattr(self, "_next", None)
        if nxt is None or nxt in self._id2tok:
            nxt = max(self._id2tok) + 1
        self._next = nxt + 1
        return nxt

    def id(self, token: str, default: int | None = None) -> int:
        if default is None:
            return self._tok2id[token]
        return self._tok2id.get(token, default)

    def token(self, i: int) -> str:
        return self._id2tok[i]

    def ids(self, tokens, unk: bool = True) -> list[int]:
        if unk:
            return [self._tok2id.get(t, UNK) for t in tokens]
        return [self._tok2id[t] for t in tokens]

    def tokens(self, ids) -> list[str]:
        return [self._id2tok[i] for i in ids]

    def items(self) -> list[tuple[str, int]]:
        """(token, id) pairs in ascending id order."""
        return sorted(self._tok2id.items(), key=lambda kv: kv[1])

    def __contains__(self, token) -> bool:
        return token in self._tok2id

    def __len__(self) -> int:
        return len(self._tok2id)

    def __eq__(self, other) -> bool:
        return isinstance(other, SymbolTable) and self._tok2id == other._tok2id

    @property
    def max_id(self) -> int:
        return max(self._id2tok)


class Arc(NamedTuple):
    src: int
    dst: int
    word: int
    lm_cost: float
    ac_cost: float


@dataclass(frozen=True)
class ScoreWeights:
    """Weights of the combined cost ``a*ac + l1*lm + l2*rescore``."""

    a: float = 1.0
    l1: float = 1.0
    l2: float = 0.8

    def __post_init__(self):
        for name in ("a", "l1", "l2"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"weight {name} must be finite")

    def arc_cost(self, arc: Arc) -> float:
        return self.a * arc.ac_cost + self.l1 * arc.lm_cost

    def scaled(self, k: float) -> "ScoreWeights":
        return ScoreWeights(self.a * k, self.l1 * k, self.l2 * k)


@dataclass(frozen=True)
class Lattice:
    utterance_id: str
    num_states: int
    arcs: tuple[Arc, ...]
    initial_state: int
    final_states: Mapping[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.arcs, tuple):
            object.__setattr__(self, "arcs", tuple(Arc(*a) for a in self.arcs))
        if not isinstance(self.final_states, dict):
            object.__setattr__(self, "final_states", dict(self.final_states))

    @property
    def num_arcs(self) -> int:
        return len(self.arcs)

    def out_arcs(self) -> list[list[int]]:
        """Outgoing arc indices per state, in arc-list order."""
        out: list[list[int]] = [[] for _ in range(self.num_states)]
        for i, arc in enumerate(self.arcs):
            out[arc.src].append(i)
        return out

    def in_arcs(self) -> list[list[int]]:
        inc: list[list[int]] = [[] for _ in range(self.num_states)]
        for i, arc in enumerate(self.arcs):
            inc[arc.dst].append(i)
        return inc

    def is_augmented(self) -> bool:
        return any(a.word == BOS for a in self.arcs)

    def replace(self, **kw) -> "Lattice":
        fields = dict(
            utterance_id=self.utterance_id,
            num_states=self.num_states,
            arcs=self.arcs,
            initial_state=self.initial_state,
            final_states=self.final_states,
        )
        fields.update(kw)
        return Lattice(**fields)


@dataclass
class ValidationResult:
    ok: bool
    issues: list[str]
    lattice: Lattice
    removed_states: int = 0


def _check_basic(lat: Lattice) -> None:
    if lat.num_states <= 0 or not 0 <= lat.initial_state < lat.num_states:
        raise NoInitialState(f"{lat.utterance_id}: initial state out of range")
    if not lat.final_states:
        raise NoFinalState(f"{lat.utterance_id}: no final state")
    for arc in lat.arcs:
        if not (0 <= arc.src < lat.num_states and 0 <= arc.dst < lat.num_states):
            raise MalformedLattice(f"{lat.utterance_id}: arc {arc} references unknown state")
    for s in lat.final_states:
        if not 0 <= s < lat.num_states:
            raise MalformedLattice(f"{lat.utterance_id}: final state {s} out of range")


def topological_order(lat: Lattice) -> list[int]:
    """Kahn's algorithm; ties broken by ascending index, initial state first."""
    indeg = [0] * lat.num_states
    out = lat.out_arcs()
    for arc in lat.arcs:
        indeg[arc.dst] += 1
    init = lat.initial_state
    heap = [(s != init, s) for s in range(lat.num_states) if indeg[s] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, s = heapq.heappop(heap)
        order.append(s)
        for i in out[s]:
            d = lat.arcs[i].dst
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(heap, (d != init, d))
    if len(order) != lat.num_states:
        raise CyclicLattice(f"{lat.utterance_id}: lattice contains a cycle")
    return order


def _connected_states(lat: Lattice, order: list[int]) -> list[bool]:
    out = lat.out_arcs()
    fwd = [False] * lat.num_states
    fwd[lat.initial_state] = True
    for s in order:
        if fwd[s]:
            for i in out[s]:
                fwd[lat.arcs[i].dst] = True
    bwd = [False] * lat.num_states
    for s in lat.final_states:
        bwd[s] = True
    for s in reversed(order):
        if not bwd[s]:
            bwd[s] = any(bwd[lat.arcs[i].dst] for i in out[s])
    return [f and b for f, b in zip(fwd, bwd)]


def _restrict(lat: Lattice, keep_state: list[bool], keep_arc=None) -> Lattice:
    """Drop states not in ``keep_state`` (and arcs touching them); relabel in order."""
    new_id = {}
    for s in range(lat.num_states):
        if keep_state[s]:
            new_id[s] = len(new_id)
    arcs = []
    for i, a in enumerate(lat.arcs):
        if keep_arc is not None and not keep_arc[i]:
            continue
        if a.src in new_id and a.dst in new_id:
            arcs.append(Arc(new_id[a.src], new_id[a.dst], a.word, a.lm_cost, a.ac_cost))
    finals = {new_id[s]: c for s, c in lat.final_states.items() if s in new_id}
    return Lattice(lat.utterance_id, len(new_id), tuple(arcs), new_id[lat.initial_state], finals)


def trim(lat: Lattice) -> Lattice:
    """Remove states (and their arcs) not on any complete path."""
    _check_basic(lat)
    order = topological_order(lat)
    keep = _connected_states(lat, order)
    if not keep[lat.initial_state]:
        raise NoFinalState(f"{lat.utterance_id}: no final state reachable from the initial state")
    return _restrict(lat, keep)


def validate(lat: Lattice, trim: bool = False) -> ValidationResult:
    """Check the lattice definition; optionally trim useless states.

    Cycles, a missing initial state or a missing final state raise.  Other
    problems are listed in ``issues``.
    """
    _check_basic(lat)
    order = topological_order(lat)
    issues = []
    for i, a in enumerate(lat.arcs):
        if not (math.isfinite(a.lm_cost) and math.isfinite(a.ac_cost)):
            issues.append(f"arc {i} has a non-finite cost")
    for s, c in lat.final_states.items():
        if not math.isfinite(c):
            issues.append(f"final state {s} has a non-finite cost")
    keep = _connected_states(lat, order)
    if not keep[lat.initial_state]:
        raise NoFinalState(f"{lat.utterance_id}: no final state reachable from the initial state")
    indeg = [0] * lat.num_states
    for a in lat.arcs:
        indeg[a.dst] += 1
    extra_starts = [s for s in range(lat.num_states) if indeg[s] == 0 and s != lat.initial_state]
    if extra_starts:
        issues.append(f"states without incoming arcs besides the initial state: {extra_starts}")
    useless = [s for s in range(lat.num_states) if not keep[s]]
    if useless:
        issues.append(f"states not on a complete path: {useless}")
    out = lat
    removed = 0
    if trim and useless:
        out = _restrict(lat, keep)
        removed = lat.num_states - out.num_states
        issues = [m for m in issues if not m.startswith(("states not on", "states without"))]
    return ValidationResult(ok=not issues, issues=issues, lattice=out, removed_states=removed)


def topo_sort(lat: Lattice) -> Lattice:
    """Relabel states so that every arc has ``src < dst`` and the initial state is 0.

    Arc list order is preserved.
    """
    _check_basic(lat)
    order = topological_order(lat)
    if order[0] != lat.initial_state:
        raise MalformedLattice(f"{lat.utterance_id}: initial state has incoming arcs")
    new_id = [0] * lat.num_states
    for k, s in enumerate(order):
        new_id[s] = k
    arcs = tuple(Arc(new_id[a.src], new_id[a.dst], a.word, a.lm_cost, a.ac_cost) for a in lat.arcs)
    for a in arcs:
        if a.src >= a.dst:
            raise CyclicLattice(f"{lat.utterance_id}: self-loop on state {a.src}")
    finals = {new_id[s]: c for s, c in sorted(lat.final_states.items(), key=lambda kv: new_id[kv[0]])}
    return Lattice(lat.utterance_id, lat.num_states, arcs, 0, finals)


def augment(lat: Lattice) -> Lattice:
    """Add the ``<s>`` arc into the initial state and ``</s>`` arcs out of every final state.

    Final costs move onto the ``</s>`` arcs as LM cost; the single new final
    state has cost 0.
    """
    if lat.is_augmented():
        raise AlreadyAugmented(f"{lat.utterance_id}: lattice already has <s> arcs")
    _check_basic(lat)
    start, end = lat.num_states, lat.num_states + 1
    arcs = [Arc(start, lat.initial_state, BOS, 0.0, 0.0)]
    arcs.extend(lat.arcs)
    for s, c in lat.final_states.items():
        arcs.append(Arc(s, end, EOS, c, 0.0))
    out = Lattice(lat.utterance_id, lat.num_states + 2, tuple(arcs), start, {end: 0.0})
    return topo_sort(out)


def strip_aux(words) -> tuple[int, ...]:
    return tuple(w for w in words if w not in AUX_IDS)


def _viterbi_costs(lat: Lattice, order, weights: ScoreWeights, extra=None, backward=False):
    """Best weighted cost from the initial state (forward) or to a final state (backward)."""
    inf = math.inf
    out = lat.out_arcs()
    arc_w = [weights.arc_cost(a) for a in lat.arcs]
    if extra is not None:
        arc_w = [w + e for w, e in zip(arc_w, extra)]
    if backward:
        beta = [inf] * lat.num_states
        for s in reversed(order):
            best = weights.l1 * lat.final_states[s] if s in lat.final_states else inf
            for i in out[s]:
                c = arc_w[i] + beta[lat.arcs[i].dst]
                if c < best:
                    best = c
            beta[s] = best
        return beta, arc_w
    alpha = [inf] * lat.num_states
    alpha[lat.initial_state] = 0.0
    for s in order:
        if alpha[s] == inf:
            continue
        for i in out[s]:
            d = lat.arcs[i].dst
            c = alpha[s] + arc_w[i]
            if c < alpha[d]:
                alpha[d] = c
    return alpha, arc_w


def arc_through_costs(lat: Lattice, weights: ScoreWeights) -> tuple[list[float], float]:
    """Best complete-path cost through each arc, and the global best cost."""
    order = topological_order(lat)
    alpha, arc_w = _viterbi_costs(lat, order, weights)
    beta, _ = _viterbi_costs(lat, order, weights, backward=True)
    through = [alpha[a.src] + w + beta[a.dst] for a, w in zip(lat.arcs, arc_w)]
    return through, beta[lat.initial_state]


def prune_arc_mask(lat: Lattice, beam: float, weights: ScoreWeights | None = None) -> list[bool]:
    if beam < 0:
        raise ValueError("beam must be non-negative")
    weights = weights or ScoreWeights()
    through, best = arc_through_costs(lat, weights)
    if best == math.inf:
        raise NoFinalState(f"{lat.utterance_id}: no complete path")
    # slack absorbs summation-order rounding so the best path always survives
    limit = best + beam + 1e-9 * max(1.0, abs(best))
    return [t <= limit for t in through]


def prune(lat: Lattice, beam: float, weights: ScoreWeights | None = None) -> Lattice:
    """Drop arcs whose best complete path is worse than ``best + beam``; then trim."""
    _check_basic(lat)
    if beam == math.inf:
        return trim(lat)
    mask = prune_arc_mask(lat, beam, weights)
    kept = _restrict(lat, [True] * lat.num_states, mask)
    return trim(kept)


def count_paths(lat: Lattice) -> int:
    order = topological_order(lat)
    out = lat.out_arcs()
    n = [0] * lat.num_states
    for s in reversed(order):
        n[s] = (1 if s in lat.final_states else 0) + sum(n[lat.arcs[i].dst] for i in out[s])
    return n[lat.initial_state]


def iter_arc_paths(lat: Lattice) -> Iterator[tuple[int, ...]]:
    """Complete paths as arc-index tuples in lexicographic state-sequence order."""
    out = lat.out_arcs()
    for s in range(lat.num_states):
        out[s].sort(key=lambda i: (lat.arcs[i].dst, i))
    finals = lat.final_states
    stack: list[tuple[int, tuple[int, ...]]] = [(lat.initial_state, ())]
    # explicit stack; a path ending at a final state precedes its extensions
    while stack:
        s, path = stack.pop()
        if s in finals:
            yield path
        for i in reversed(out[s]):
            stack.append((lat.arcs[i].dst, path + (i,)))


def enumerate_paths(lat: Lattice, limit: int = 10_000) -> list[tuple[tuple[int, ...], float, float]]:
    """All complete paths as ``(words, lm_cost, ac_cost)``; final cost included in lm_cost."""
    n = count_paths(lat)
    if n > limit:
        raise TooManyPaths(f"{lat.utterance_id}: {n} paths exceed limit {limit}")
    result = []
    for path in iter_arc_paths(lat):
        lm = 0.0
        ac = 0.0
        for i in path:
            lm += lat.arcs[i].lm_cost
            ac += lat.arcs[i].ac_cost
        end = lat.arcs[path[-1]].dst if path else lat.initial_state
        lm += lat.final_states[end]
        result.append((tuple(lat.arcs[i].word for i in path), lm, ac))
    return result
