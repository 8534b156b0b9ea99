"""Edit distance, corpus WER and lattice oracle paths."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import MissingReference, NoFinalState
from .lattice import AUX_IDS, Lattice, topological_order


@dataclass(frozen=True)
class EditStats:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        if self.ref_len == 0:
            raise ZeroDivisionError("WER undefined for an empty reference")
        return self.errors / self.ref_len

    def __add__(self, other: "EditStats") -> "EditStats":
        return EditStats(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )


def edit_distance(hyp: Sequence, ref: Sequence) -> EditStats:
    """Levenshtein alignment of ``hyp`` against ``ref``.

    Among minimal alignments the backtrace prefers substitution (or match),
    then insertion, then deletion.
    """
    n, m = len(hyp), len(ref)
    d = [list(range(m + 1))]
    for i in range(1, n + 1):
        h = hyp[i - 1]
        prev = d[-1]
        row = [i]
        for j in range(1, m + 1):
            row.append(min(prev[j - 1] + (h != ref[j - 1]), prev[j] + 1, row[j - 1] + 1))
        d.append(row)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1]):
            s += hyp[i - 1] != ref[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            ins += 1
            i -= 1
        else:
            dels += 1
            j -= 1
    return EditStats(int(s), ins, dels, m)


@dataclass
class ArcTargets:
    labels: list[int]
    oracle_path: list[int]
    oracle_stats: EditStats
    num_oracle_paths: int = 1


def _next_column(col: tuple, w, ref) -> tuple:
    out = [col[0] + 1]
    for i in range(1, len(col)):
        c = col[i - 1] + (w != ref[i - 1])
        ins = col[i] + 1
        if ins < c:
            c = ins
        dl = out[-1] + 1
        if dl < c:
            c = dl
        out.append(c)
    return tuple(out)


def _backward_bound(lat: Lattice, order, ref) -> list[list[int]]:
    """Fewest errors from (state, ref position) to the end of a complete path."""
    m = len(ref)
    big = 1 << 30
    out = lat.out_arcs()
    bound = [[big] * (m + 1) for _ in range(lat.num_states)]
    for s in reversed(order):
        row = bound[s]
        if s in lat.final_states:
            for i in range(m + 1):
                row[i] = m - i
        for k in out[s]:
            arc = lat.arcs[k]
            nxt = bound[arc.dst]
            if arc.word in AUX_IDS:
                for i in range(m + 1):
                    if nxt[i] < row[i]:
                        row[i] = nxt[i]
            else:
                w = arc.word
                for i in range(m + 1):
                    c = nxt[i] + 1
                    if i < m:
                        c2 = nxt[i + 1] + (w != ref[i])
                        if c2 < c:
                            c = c2
                    if c < row[i]:
                        row[i] = c
        for i in range(m - 1, -1, -1):
            if row[i + 1] + 1 < row[i]:
                row[i] = row[i + 1] + 1
    return bound


def oracle_path(lat: Lattice, ref: Sequence[int], rng: np.random.Generator | None = None) -> ArcTargets:
    """Complete path with fewest word errors against ``ref``.

    ``<s>``, ``</s>`` and ``<eps>`` arcs cost nothing.  When several paths tie,
    one is drawn uniformly over paths (not alignments) with ``rng``; without
    an rng the first tied path found is returned.

    Each partial path is summarised by its edit-distance column against the
    reference.  Partial paths sharing (state, column) are interchangeable, so
    counting paths per group gives exact path counts; groups that cannot reach
    the optimum (per the backward bound) are dropped.
    """
    ref = list(ref)
    order = topological_order(lat)
    bound = _backward_bound(lat, order, ref)
    best = bound[lat.initial_state][0]
    if best >= 1 << 30:
        raise NoFinalState(f"{lat.utterance_id}: no complete path")
    m = len(ref)
    out = lat.out_arcs()
    # per state: column -> [count, list of (arc, predecessor column)]
    groups: list[dict] = [dict() for _ in range(lat.num_states)]
    init_col = tuple(range(m + 1))
    groups[lat.initial_state][init_col] = [1, []]
    ends = []
    for s in order:
        g = groups[s]
        if not g:
            continue
        if s in lat.final_states:
            for col, (cnt, _) in g.items():
                if col[m] == best:
                    ends.append((s, col, cnt))
        for k in out[s]:
            arc = lat.arcs[k]
            dst_bound = bound[arc.dst]
            dg = groups[arc.dst]
            for col, entry in g.items():
                ncol = col if arc.word in AUX_IDS else _next_column(col, arc.word, ref)
                if min(c + b for c, b in zip(ncol, dst_bound)) > best:
                    continue
                slot = dg.get(ncol)
                if slot is None:
                    dg[ncol] = [entry[0], [(k, col, entry[0])]]
                else:
                    slot[0] += entry[0]
                    slot[1].append((k, col, entry[0]))
    total = sum(c for _, _, c in ends)

    def pick(options):
        if rng is None or len(options) == 1:
            return options[0]
        weights = np.array([o[-1] for o in options], dtype=np.float64)
        return options[int(rng.choice(len(options), p=weights / weights.sum()))]

    s, col, _ = pick(ends)
    path = []
    while True:
        preds = groups[s][col][1]
        if not preds:
            break
        k, pcol, _ = pick(preds)
        path.append(k)
        s, col = lat.arcs[k].src, pcol
    path.reverse()
    labels = [0] * lat.num_arcs
    for k in path:
        labels[k] = 1
    hyp = [lat.arcs[k].word for k in path if lat.arcs[k].word not in AUX_IDS]
    stats = edit_distance(hyp, ref)
    assert stats.errors == best
    return ArcTargets(labels, path, stats, total)


def corpus_wer(hyps: Mapping[str, Sequence], refs: Mapping[str, Sequence]) -> tuple[float, EditStats]:
    """Percentage WER over ``refs``; a missing hypothesis counts as all deletions."""
    for utt in hyps:
        if utt not in refs:
            raise MissingReference(utt)
    total = EditStats()
    for utt, ref in refs.items():
        total = total + edit_distance(hyps.get(utt, ()), ref)
    if total.ref_len == 0:
        return 0.0, total
    return 100.0 * total.errors / total.ref_len, total


def corpus_oracle_wer(lattices, refs: Mapping[str, Sequence]) -> tuple[float, EditStats]:
    """Corpus WER of the per-lattice oracle paths."""
    hyps = {}
    for lat in lattices:
        path = oracle_path(lat, refs[lat.utterance_id]).oracle_path
        hyps[lat.utterance_id] = [lat.arcs[i].word for i in path if lat.arcs[i].word not in AUX_IDS]
    return corpus_wer(hyps, {u: refs[u] for u in hyps})
