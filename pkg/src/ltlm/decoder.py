"""Time-synchronous token-passing beam decoder that writes word lattices.

A token sits on a prefix-tree node (one acoustic class per node) with an LM
history.  Each frame a token either stays on its node or moves to a child; a
token reaching a word end emits a word link into the lattice state keyed by
(end frame, new LM history).  When two tokens meet on the same (node, history)
the cheaper one survives and the other is kept as an alternative start, so the
lattice still receives an arc for it at the word end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DeadEnd, DataError
from .lattice import EOS, MAX_STATES, Arc, Lattice, ScoreWeights, SymbolTable, prune, topo_sort, trim
from .ngram import NgramModel

log = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    lattice_beam: float = 8.0
    max_active: int = 200
    prune_beam: float = 4.0
    weights: ScoreWeights = field(default_factory=ScoreWeights)
    posterior_floor: float = 1e-10
    max_retries: int = 3
    max_states: int = MAX_STATES


class PrefixTree:
    """Lexicon compiled to a tree over class ids; node 0 is the root."""

    def __init__(self, lexicon, symbols: SymbolTable):
        self.cls = [-1]
        self.children: list[list[int]] = [[]]
        self.words: list[list[int]] = [[]]
        child_of: dict[tuple[int, int], int] = {}
        for word in lexicon.words():
            if word not in symbols:
                raise DataError(f"lexicon word {word!r} missing from the symbol table")
            wid = symbols.id(word)
            for pron in lexicon[word]:
                node = 0
                for c in pron:
                    nxt = child_of.get((node, c))
                    if nxt is None:
                        nxt = len(self.cls)
                        self.cls.append(c)
                        self.children.append([])
                        self.words.append([])
                        self.children[node].append(nxt)
                        child_of[(node, c)] = nxt
                    node = nxt
                if wid not in self.words[node]:
                    self.words[node].append(wid)

    def __len__(self) -> int:
        return len(self.cls)


class _Token:
    __slots__ = ("cost", "ac", "start", "alts")

    def __init__(self, cost, ac, start, alts):
        self.cost = cost
        self.ac = ac
        self.start = start
        # start state -> (acoustic offset, total-cost offset) relative to this token
        self.alts = alts


def _merge(win: _Token, lose: _Token, beam: float) -> _Token:
    dac = lose.ac - win.ac
    dcost = lose.cost - win.cost
    alts = dict(win.alts)
    cand = [(lose.start, dac, dcost)] + [(s, o + dac, d + dcost) for s, (o, d) in lose.alts.items()]
    for s, o, d in cand:
        if s == win.start or d > beam:
            continue
        cur = alts.get(s)
        if cur is None or d < cur[1]:
            alts[s] = (o, d)
    return _Token(win.cost, win.ac, win.start, alts)


@dataclass
class DecodeResult:
    lattice: Lattice
    # word links before trimming and pruning: (src state, dst state, word, lm_cost, ac_cost)
    links: list[tuple[int, int, int, float, float]]
    # last frame covered by each raw lattice state (-1 for the start state)
    state_frames: list[int]


def decode_once(
    posteriors: np.ndarray,
    tree: PrefixTree,
    lm: NgramModel,
    config: DecodeConfig,
    utterance_id: str = "",
) -> DecodeResult:
    post = np.asarray(posteriors, dtype=np.float64)
    T = post.shape[0]
    if T == 0:
        raise DeadEnd(f"{utterance_id}: no frames")
    fcost = -np.log(np.maximum(post, config.posterior_floor))
    a, l1 = config.weights.a, config.weights.l1
    beam = config.lattice_beam
    cls, children, words = tree.cls, tree.children, tree.words
    root_children = children[0]

    start_h = lm.start_state()
    state_key: dict[tuple, int] = {(-1, start_h): 0}
    state_frame = [-1]
    state_cost = [0.0]
    state_h = [start_h]
    links: list[tuple[int, int, int, float, float]] = []
    lm_cache: dict[tuple, tuple[float, tuple]] = {}
    tokens: dict[tuple, _Token] = {}
    entry = [0]

    for t in range(T):
        fc = fcost[t]
        new: dict[tuple, _Token] = {}

        def relax(key, tok):
            cur = new.get(key)
            if cur is None:
                new[key] = tok
            elif (tok.cost, tok.start) < (cur.cost, cur.start):
                new[key] = _merge(tok, cur, beam)
            else:
                new[key] = _merge(cur, tok, beam)

        for (node, h), tok in tokens.items():
            c = fc[cls[node]]
            relax((node, h), _Token(tok.cost + a * c, tok.ac + c, tok.start, tok.alts))
            for ch in children[node]:
                c = fc[cls[ch]]
                relax((ch, h), _Token(tok.cost + a * c, tok.ac + c, tok.start, tok.alts))
        for s in entry:
            h = state_h[s]
            base = state_cost[s]
            for ch in root_children:
                c = fc[cls[ch]]
                relax((ch, h), _Token(base + a * c, c, s, {}))

        best = min(tok.cost for tok in new.values())
        limit = best + beam
        ranked = sorted((tok.cost, key) for key, tok in new.items() if tok.cost <= limit)
        tokens = {key: new[key] for _, key in ranked[: config.max_active]}

        entry = []
        for (node, h), tok in tokens.items():
            for w in words[node]:
                hit = lm_cache.get((h, w))
                if hit is None:
                    lp, h2 = lm.score_step(h, w)
                    hit = lm_cache[(h, w)] = (-lp, h2)
                lmc, h2 = hit
                total = tok.cost + l1 * lmc
                if total > limit:
                    continue
                skey = (t, h2)
                sid = state_key.get(skey)
                if sid is None:
                    sid = state_key[skey] = len(state_frame)
                    state_frame.append(t)
                    state_cost.append(total)
                    state_h.append(h2)
                    entry.append(sid)
                elif total < state_cost[sid]:
                    state_cost[sid] = total
                links.append((tok.start, sid, w, lmc, tok.ac))
                for s, (off, _) in sorted(tok.alts.items()):
                    links.append((s, sid, w, lmc, tok.ac + off))

    finals = {}
    for sid, fr in enumerate(state_frame):
        if fr == T - 1:
            finals[sid] = -lm.logprob(state_h[sid], EOS)
    if not finals:
        raise DeadEnd(f"{utterance_id}: no word ends on the last frame")
    raw = Lattice(utterance_id, len(state_frame), tuple(Arc(*k) for k in links), 0, finals)
    lat = topo_sort(trim(raw))
    lat = prune(lat, config.prune_beam, config.weights)
    pb = config.prune_beam
    while lat.num_states > config.max_states and pb > 1e-3:
        pb /= 2
        lat = prune(lat, pb, config.weights)
    if lat.num_states > config.max_states:
        raise DeadEnd(f"{utterance_id}: lattice keeps {lat.num_states} states after pruning")
    return DecodeResult(topo_sort(lat), links, state_frame)


def decode_to_lattice(
    posteriors: np.ndarray,
    tree: PrefixTree,
    lm: NgramModel,
    config: DecodeConfig | None = None,
    utterance_id: str = "",
) -> Lattice:
    """Decode with retries: each :class:`DeadEnd` doubles the beam and the active-token cap."""
    config = config or DecodeConfig()
    cfg = config
    for attempt in range(config.max_retries + 1):
        try:
            return decode_once(posteriors, tree, lm, cfg, utterance_id).lattice
        except DeadEnd:
            if attempt == config.max_retries:
                raise
            cfg = DecodeConfig(
                cfg.lattice_beam * 2, cfg.max_active * 2, cfg.prune_beam, cfg.weights,
                cfg.posterior_floor, cfg.max_retries, cfg.max_states,
            )
            log.info("%s: dead end, retrying with beam %.1f", utterance_id, cfg.lattice_beam)
    raise AssertionError("unreachable")
