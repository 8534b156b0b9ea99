"""Shared fixtures and independent reference implementations.

The helpers here deliberately avoid the package's own path enumeration, edit
distance and search code so tests compare two separate routes.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import pytest
from hypothesis import strategies as st

from ltlm.lattice import Arc, Lattice

AUX = {0, 1, 2}


def ref_paths(lat: Lattice):
    """Every complete path as (arc indices, words, lm cost incl. final, ac cost), by plain recursion."""
    out = []

    def walk(state, arcs):
        if state in lat.final_states:
            lm = sum(lat.arcs[i].lm_cost for i in arcs) + lat.final_states[state]
            ac = sum(lat.arcs[i].ac_cost for i in arcs)
            out.append((tuple(arcs), tuple(lat.arcs[i].word for i in arcs), lm, ac))
        for i, a in enumerate(lat.arcs):
            if a.src == state:
                walk(a.dst, arcs + [i])

    walk(lat.initial_state, [])
    return out


def ref_edit_distance(hyp, ref) -> int:
    """Levenshtein distance by memoised recursion."""
    hyp, ref = tuple(hyp), tuple(ref)

    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (hyp[i - 1] != ref[j - 1]))

    return d(len(hyp), len(ref))


def words_only(words):
    return tuple(w for w in words if w not in AUX)


def ref_ranked(lat: Lattice, a: float = 1.0, l1: float = 1.0):
    """Distinct word sequences with their cheapest combined cost, sorted by cost."""
    best = {}
    for _, words, lm, ac in ref_paths(lat):
        key = words_only(words)
        cost = a * ac + l1 * lm
        if key not in best or cost < best[key]:
            best[key] = cost
    return sorted(((c, w) for w, c in best.items()), key=lambda x: x[0])


def make_random_lattice(rng: np.random.Generator, max_paths: int = 64, vocab: int = 8, utt: str = "u", max_states: int = 7) -> Lattice:
    """Random acyclic lattice (state 0 initial) with at most ``max_paths`` complete paths."""
    while True:
        n = int(rng.integers(2, max_states + 1))
        arcs = []
        for s in range(n - 1):
            for d in range(s + 1, n):
                if d == s + 1 or rng.random() < 0.3:
                    for _ in range(1 + int(rng.random() < 0.3)):
                        arcs.append(Arc(s, d, int(rng.integers(4, 4 + vocab)), float(rng.uniform(0, 5)), float(rng.uniform(0, 5))))
        finals = {n - 1: float(rng.uniform(0, 2))}
        if n > 2 and rng.random() < 0.3:
            finals[int(rng.integers(1, n - 1))] = float(rng.uniform(0, 2))
        lat = Lattice(utt, n, tuple(arcs), 0, finals)
        if len(ref_paths(lat)) <= max_paths:
            return lat


@st.composite
def lattices(draw, max_states: int = 6, vocab: int = 6):
    """Hypothesis strategy for small topologically sorted lattices with every state on a path."""
    n = draw(st.integers(2, max_states))
    cost = st.floats(0.0, 10.0, allow_nan=False, allow_infinity=False)
    arcs = []
    for s in range(n - 1):
        arcs.append(Arc(s, s + 1, draw(st.integers(4, 3 + vocab)), draw(cost), draw(cost)))
        for d in range(s + 2, n):
            if draw(st.booleans()):
                arcs.append(Arc(s, d, draw(st.integers(4, 3 + vocab)), draw(cost), draw(cost)))
    order = draw(st.permutations(range(len(arcs))))
    return Lattice("h", n, tuple(arcs[i] for i in order), 0, {n - 1: draw(cost)})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance report: one line per criterion, repeated in the terminal summary

ACCEPTANCE: list[str] = []


def record_acceptance(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
