"""Hypothesis selection: Viterbi best path, N-best extraction and the two rescoring modes.

Combined cost of a path is ``a*ac + l1*lm + l2*extra`` summed over its arcs,
plus ``l1`` times the final cost.  Single-shot rescoring takes ``extra`` from
one lattice-model call per batch; N-best rescoring scores every distinct
hypothesis with the causal LM, one call each.
"""

from __future__ import annotations

import heapq
import json
import math
import time
from dataclasses import dataclass, field
from typing import IO, Mapping, Sequence

import numpy as np

from .align import EditStats, corpus_wer
from .errors import DataError, MalformedLattice, MismatchedUtteranceSets, PositionOverflow
from .lattice import Lattice, ScoreWeights, SymbolTable, _viterbi_costs, augment, strip_aux, topological_order

PROB_CLAMP = 1e-6


def _path_cost(lat: Lattice, path: Sequence[int], weights: ScoreWeights, extra=None) -> float:
    cost = 0.0
    for i in path:
        cost += weights.arc_cost(lat.arcs[i])
        if extra is not None:
            cost += extra[i]
    end = lat.arcs[path[-1]].dst if path else lat.initial_state
    return cost + weights.l1 * lat.final_states[end]


def best_arc_path(lat: Lattice, weights: ScoreWeights, extra=None) -> tuple[list[int], float]:
    """Arc indices of the cheapest complete path and its combined cost.

    Ties go to the lexicographically smallest state sequence: stopping beats
    continuing, then the smaller destination state, then the earlier arc.
    """
    order = topological_order(lat)
    beta, arc_w = _viterbi_costs(lat, order, weights, extra, backward=True)
    if beta[lat.initial_state] == math.inf:
        raise MalformedLattice(f"{lat.utterance_id}: no complete path")
    out = lat.out_arcs()
    path: list[int] = []
    s = lat.initial_state
    while True:
        best = (weights.l1 * lat.final_states[s], -1, -1) if s in lat.final_states else (math.inf, -1, -1)
        for i in out[s]:
            d = lat.arcs[i].dst
            cand = (arc_w[i] + beta[d], d, i)
            if cand < best:
                best = cand
        if best[2] < 0:
            break
        path.append(best[2])
        s = lat.arcs[best[2]].dst
    return path, _path_cost(lat, path, weights, extra)


def best_path(lat: Lattice, weights: ScoreWeights | None = None, extra=None) -> tuple[tuple[int, ...], float]:
    """Word sequence (auxiliary tokens removed) and combined cost of the cheapest complete path."""
    weights = weights or ScoreWeights()
    path, cost = best_arc_path(lat, weights, extra)
    return strip_aux(lat.arcs[i].word for i in path), cost


@dataclass(frozen=True)
class Hypothesis:
    words: tuple[int, ...]
    ac_cost: float
    lm_cost: float
    cost: float
    arcs: tuple[int, ...] = ()


def nbest_extract(lat: Lattice, n: int, weights: ScoreWeights | None = None, max_pops: int = 200_000) -> list[Hypothesis]:
    """Up to ``n`` distinct word sequences in increasing first-pass cost.

    Best-first search over partial paths with the exact cost-to-go as the
    heuristic, so complete paths pop in cost order; a word sequence keeps its
    cheapest path.  Ties pop in lexicographic state-sequence order.
    """
    weights = weights or ScoreWeights()
    if n <= 0:
        return []
    order = topological_order(lat)
    beta, arc_w = _viterbi_costs(lat, order, weights, backward=True)
    out = lat.out_arcs()
    s0 = lat.initial_state
    if beta[s0] == math.inf:
        return []
    # (f, state sequence, done, g, arcs)
    heap = [(beta[s0], (s0,), False, 0.0, ())]
    seen: set[tuple[int, ...]] = set()
    result: list[Hypothesis] = []
    pops = 0
    while heap and len(result) < n and pops < max_pops:
        f, states, done, g, arcs = heapq.heappop(heap)
        pops += 1
        s = states[-1]
        if done:
            words = strip_aux(lat.arcs[i].word for i in arcs)
            if words in seen:
                continue
            seen.add(words)
            ac = 0.0
            lm = 0.0
            for i in arcs:
                ac += lat.arcs[i].ac_cost
                lm += lat.arcs[i].lm_cost
            lm += lat.final_states[s]
            result.append(Hypothesis(words, ac, lm, _path_cost(lat, arcs, weights), arcs))
            continue
        if s in lat.final_states:
            gf = g + weights.l1 * lat.final_states[s]
            heapq.heappush(heap, (gf, states, True, gf, arcs))
        for i in out[s]:
            d = lat.arcs[i].dst
            if beta[d] == math.inf:
                continue
            g2 = g + arc_w[i]
            heapq.heappush(heap, (g2 + beta[d], states + (d,), False, g2, arcs + (i,)))
    return result


# rescoring


@dataclass
class UtteranceResult:
    words: tuple[int, ...]
    cost: float


@dataclass
class RescoreReport:
    method: str
    results: dict[str, UtteranceResult] = field(default_factory=dict)
    model_calls: int = 0
    seq_lengths: list[int] = field(default_factory=list)
    wall_time: float = 0.0
    skipped: dict[str, str] = field(default_factory=dict)
    # average read back from a report file, where per-call lengths are not kept
    stored_avg_seq_len: float | None = None

    def hypotheses(self) -> dict[str, tuple[int, ...]]:
        return {u: r.words for u, r in sorted(self.results.items())}

    def wer(self, refs: Mapping[str, Sequence[int]]) -> tuple[float, EditStats]:
        return corpus_wer(self.hypotheses(), {u: refs[u] for u in sorted(refs)})

    @property
    def avg_seq_len(self) -> float:
        if self.seq_lengths:
            return float(np.mean(self.seq_lengths))
        return self.stored_avg_seq_len or 0.0


def _ensure_augmented(lat: Lattice) -> Lattice:
    return lat if lat.is_augmented() else augment(lat)


def first_pass(lattices: Sequence[Lattice], weights: ScoreWeights | None = None) -> RescoreReport:
    weights = weights or ScoreWeights()
    t0 = time.perf_counter()
    report = RescoreReport("first-pass")
    for lat in lattices:
        words, cost = best_path(lat, weights)
        report.results[lat.utterance_id] = UtteranceResult(words, cost)
    report.wall_time = time.perf_counter() - t0
    return report


def rescoring_costs(probs: np.ndarray, l2: float) -> np.ndarray:
    """``l2 * -log p`` with ``p`` clamped to ``[1e-6, 1 - 1e-6]``."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return l2 * -np.log(p)


def single_shot_rescore(
    lattices: Sequence[Lattice],
    scorer,
    weights: ScoreWeights | None = None,
    batch_size: int = 1,
    max_positions: int | None = None,
) -> RescoreReport:
    """Rescore every lattice with per-arc probabilities from one scorer call per batch.

    ``scorer.predict(lattices)`` returns one probability vector per lattice;
    ``scorer.counter`` counts its calls.  Lattices are augmented if needed.
    Lattices too large for the scorer's position tables are skipped and
    listed in ``report.skipped``.
    """
    weights = weights or ScoreWeights()
    if max_positions is None:
        cfg = getattr(scorer, "config", None)
        max_positions = getattr(cfg, "max_positions", None)
    t0 = time.perf_counter()
    report = RescoreReport("single-shot")
    calls0 = scorer.counter.calls
    lens0 = len(scorer.counter.seq_lengths)
    ready = []
    for lat in lattices:
        lat = _ensure_augmented(lat)
        if max_positions is not None and lat.num_states > max_positions:
            report.skipped[lat.utterance_id] = str(PositionOverflow(f"{lat.num_states} states > {max_positions}"))
            continue
        ready.append(lat)
    for b in range(0, len(ready), batch_size):
        chunk = ready[b: b + batch_size]
        probs = scorer.predict(chunk)
        for lat, p in zip(chunk, probs):
            extra = None if weights.l2 == 0 else rescoring_costs(p, weights.l2)
            words, cost = best_path(lat, weights, extra)
            report.results[lat.utterance_id] = UtteranceResult(words, cost)
    report.model_calls = scorer.counter.calls - calls0
    report.seq_lengths = list(scorer.counter.seq_lengths[lens0:])
    report.wall_time = time.perf_counter() - t0
    return report


def nbest_rescore(
    lattices: Sequence[Lattice],
    ar_model,
    n: int = 50,
    weights: ScoreWeights | None = None,
) -> RescoreReport:
    """Re-rank each lattice's ``n`` best hypotheses with ``a*ac + l1*lm + l2*(-log P_ar)``."""
    weights = weights or ScoreWeights()
    t0 = time.perf_counter()
    report = RescoreReport(f"{n}-best")
    calls0 = ar_model.counter.calls
    lens0 = len(ar_model.counter.seq_lengths)
    for lat in lattices:
        hyps = nbest_extract(lat, n, weights)
        best = None
        for rank, h in enumerate(hyps):
            cost = weights.a * h.ac_cost + weights.l1 * h.lm_cost - weights.l2 * ar_model.ar_score(h.words)
            if best is None or (cost, rank) < best[:2]:
                best = (cost, rank, h)
        report.results[lat.utterance_id] = UtteranceResult(best[2].words, best[0])
    report.model_calls = ar_model.counter.calls - calls0
    report.seq_lengths = list(ar_model.counter.seq_lengths[lens0:])
    report.wall_time = time.perf_counter() - t0
    return report


# reports


def write_report(report: RescoreReport, stream: IO[str], symbols: SymbolTable | None = None,
                 refs: Mapping[str, Sequence[int]] | None = None) -> None:
    """One tab-separated record per utterance, then a ``#``-prefixed summary block.

    Wall time is left out so reruns produce identical files.
    """
    for utt, r in sorted(report.results.items()):
        hyp = " ".join(symbols.tokens(r.words)) if symbols else " ".join(map(str, r.words))
        stream.write(f"{utt}\t{report.method}\t{hyp}\t{float(r.cost)!r}\n")
    stream.write(f"# method={report.method}\n")
    stream.write(f"# utterances={len(report.results)}\n")
    stream.write(f"# model_calls={report.model_calls}\n")
    stream.write(f"# avg_seq_len={float(report.avg_seq_len)!r}\n")
    if refs is not None:
        stream.write(f"# wer={float(report.wer(refs)[0])!r}\n")
    for utt, why in sorted(report.skipped.items()):
        stream.write(f"# skipped {utt}: {why}\n")


def read_report(stream: IO[str] | str, symbols: SymbolTable | None = None) -> RescoreReport:
    lines = stream.splitlines() if isinstance(stream, str) else [ln.rstrip("\n") for ln in stream]
    report = RescoreReport("")
    for lineno, line in enumerate(lines, 1):
        if line.startswith("# "):
            key, _, val = line[2:].partition("=")
            if key == "method":
                report.method = val
            elif key == "model_calls":
                report.model_calls = int(val)
            elif key == "avg_seq_len":
                report.stored_avg_seq_len = float(val)
            continue
        if not line:
            continue
        try:
            utt, method, hyp, cost = line.split("\t")
            toks = hyp.split()
            words = tuple(symbols.ids(toks)) if symbols else tuple(int(t) for t in toks)
            cost = float(cost)
        except ValueError:
            raise DataError(f"report line {lineno}: expected 'utt<TAB>method<TAB>words<TAB>cost'") from None
        report.method = method
        report.results[utt] = UtteranceResult(words, cost)
    return report


def stats_compare(reports: Sequence[RescoreReport], refs: Mapping[str, Sequence[int]] | None = None) -> list[dict]:
    """Per-method summary rows; deltas are relative to the first report."""
    if len(reports) < 2:
        raise ValueError("need at least two reports")
    utts = set(reports[0].results)
    for r in reports[1:]:
        if set(r.results) != utts:
            raise MismatchedUtteranceSets(f"{r.method} covers a different utterance set than {reports[0].method}")
    rows = []
    for r in reports:
        row = {
            "method": r.method,
            "utterances": len(r.results),
            "model_calls": r.model_calls,
            "avg_seq_len": r.avg_seq_len,
            "wall_time": r.wall_time,
        }
        if refs is not None:
            row["wer"] = r.wer(refs)[0]
        rows.append(row)
    base = rows[0]
    for row in rows:
        for key in ("model_calls", "avg_seq_len", "wall_time", "wer"):
            if key in row:
                row[f"delta_{key}"] = row[key] - base[key]
    return rows


def render_table(rows: Sequence[dict]) -> str:
    cols = ["method", "utterances", "model_calls", "avg_seq_len", "wall_time"] + (["wer"] if "wer" in rows[0] else [])
    fmt = {"avg_seq_len": "{:.2f}", "wall_time": "{:.3f}", "wer": "{:.2f}"}
    cells = [[fmt.get(c, "{}").format(row[c]) for c in cols] for row in rows]
    widths = [max(len(c), *(len(r[k]) for r in cells)) for k, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def rows_to_json(rows: Sequence[dict]) -> str:
    return json.dumps(list(rows), indent=2, sort_keys=True)
