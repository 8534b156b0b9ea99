"""Witten-Bell backoff n-gram language model with ARPA I/O.

Probabilities are kept as log10 values (the ARPA convention) and the natural-log
tables used for scoring are derived from them with one constant factor, so an
ARPA round trip reproduces the in-memory model bit for bit.
"""

from __future__ import annotations

import math
import re
from collections import Counter, defaultdict
from typing import IO, Iterable, Sequence

from .errors import EmptyCorpus, MalformedArpa
from .lattice import BOS, EOS, EPS, UNK, SymbolTable

LN10 = math.log(10.0)
_ARPA_NO_PROB = -99.0


class NgramModel:
    """Backoff n-gram model over a symbol table.

    ``log10_probs`` maps n-gram tuples of word ids to log10 P(w | context);
    ``log10_backoffs`` maps context tuples to log10 backoff weights.  ``<s>``
    has a backoff weight but no probability.
    """

    def __init__(self, order: int, symbols: SymbolTable, log10_probs: dict, log10_backoffs: dict):
        if not 1 <= order:
            raise ValueError("order must be >= 1")
        self.order = order
        self.symbols = symbols
        self.log10_probs = log10_probs
        self.log10_backoffs = log10_backoffs
        self._lp = {k: v * LN10 for k, v in log10_probs.items()}
        self._bo = {k: v * LN10 for k, v in log10_backoffs.items()}
        contexts = set()
        for gram in log10_probs:
            for i in range(1, len(gram)):
                contexts.add(gram[:i])
        contexts.update(k for k, v in log10_backoffs.items() if v != 0.0)
        self._contexts = contexts
        self.vocab = frozenset(i for _, i in symbols.items() if i not in (EPS, BOS))

    # scoring

    def start_state(self) -> tuple:
        return (BOS,) if self.order > 1 else ()

    def logprob(self, context: tuple, word: int) -> float:
        """Natural-log P(word | context) with full backoff."""
        if word not in self.vocab:
            word = UNK
        lp, bo = self._lp, self._bo
        h = context[len(context) - self.order + 1:] if self.order > 1 else ()
        total = 0.0
        while True:
            v = lp.get(h + (word,))
            if v is not None:
                return total + v
            if not h:
                raise KeyError(f"word id {word} has no unigram probability")
            total += bo.get(h, 0.0)
            h = h[1:]

    def next_state(self, context: tuple, word: int) -> tuple:
        if self.order == 1:
            return ()
        if word not in self.vocab:
            word = UNK
        s = (context + (word,))[-(self.order - 1):]
        while s and s not in self._contexts:
            s = s[1:]
        return s

    def score_step(self, state: tuple, word: int) -> tuple[float, tuple]:
        return self.logprob(state, word), self.next_state(state, word)

    def score_sentence(self, words: Sequence[int], eos: bool = True) -> float:
        state = self.start_state()
        total = 0.0
        for w in words:
            lp, state = self.score_step(state, w)
            total += lp
        if eos:
            total += self.logprob(state, EOS)
        return total

    def contexts(self) -> list[tuple]:
        """Histories with explicit entries, plus the empty history."""
        return [()] + sorted(c for c in self._contexts if c and len(c) < self.order)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, NgramModel)
            and self.order == other.order
            and self.symbols == other.symbols
            and self.log10_probs == other.log10_probs
            and self.log10_backoffs == other.log10_backoffs
        )


def train(corpus: Iterable[Sequence[str]], order: int = 3, symbols: SymbolTable | None = None) -> NgramModel:
    """Witten-Bell backoff model; sentences are wrapped in ``<s> ... </s>``.

    With ``symbols`` given, out-of-table words count as ``<unk>``; otherwise a
    table is built from the corpus.  Unigrams are interpolated with a uniform
    distribution over the vocabulary, which gives ``<unk>`` its floor.
    """
    sents = [list(s) for s in corpus]
    if not sents:
        raise EmptyCorpus("no sentences")
    if symbols is None:
        symbols = SymbolTable()
        for s in sents:
            for w in s:
                symbols.add(w)
    ids = [[BOS] + symbols.ids(s) + [EOS] for s in sents]
    counts: list[Counter] = [Counter() for _ in range(order + 1)]
    for s in ids:
        for k in range(1, order + 1):
            for i in range(max(1, k - 1), len(s)):
                counts[k][tuple(s[i - k + 1: i + 1])] += 1
    vocab = sorted(i for _, i in symbols.items() if i not in (EPS, BOS))
    probs: dict[tuple, float] = {}
    backoffs: dict[tuple, float] = {}

    uni = counts[1]
    n_tok = sum(uni.values())
    n_types = len(uni)
    denom = n_tok + n_types
    for w in vocab:
        probs[(w,)] = math.log10((uni.get((w,), 0) + n_types / len(vocab)) / denom)

    model = NgramModel(1, symbols, dict(probs), {})
    for k in range(2, order + 1):
        followers: dict[tuple, dict[int, int]] = defaultdict(dict)
        for gram, c in counts[k].items():
            followers[gram[:-1]][gram[-1]] = c
        level = {}
        for h in sorted(followers):
            fol = followers[h]
            c_h = sum(fol.values())
            t_h = len(fol)
            lower_seen = sum(math.exp(model.logprob(h[1:], w)) for w in fol)
            left = 1.0 - lower_seen
            if left <= 1e-12:
                # every vocabulary word was seen after h: no mass to back off with
                for w, c in fol.items():
                    level[h + (w,)] = math.log10(c / c_h)
                backoffs[h] = 0.0
                continue
            for w, c in fol.items():
                level[h + (w,)] = math.log10(c / (c_h + t_h))
            backoffs[h] = math.log10((t_h / (c_h + t_h)) / left)
        probs.update(level)
        model = NgramModel(k, symbols, dict(probs), dict(backoffs))
    return model


def normalization_error(model: NgramModel) -> float:
    """Largest |sum_w P(w|h) - 1| over every explicit history."""
    worst = 0.0
    vocab = sorted(model.vocab)
    for h in model.contexts():
        total = math.fsum(math.exp(model.logprob(h, w)) for w in vocab)
        worst = max(worst, abs(total - 1.0))
    return worst


# ARPA


def _fmt(x: float) -> str:
    return repr(float(x))


def write_arpa(model: NgramModel, stream: IO[str]) -> None:
    by_order: dict[int, list] = defaultdict(list)
    for gram in model.log10_probs:
        by_order[len(gram)].append(gram)
    for gram in model.log10_backoffs:
        if len(gram) == 1 and gram not in model.log10_probs:
            by_order[1].append(gram)
    for k in by_order:
        by_order[k].sort()
    stream.write("\n\\data\\\n")
    for k in range(1, model.order + 1):
        stream.write(f"ngram {k}={len(by_order[k])}\n")
    for k in range(1, model.order + 1):
        stream.write(f"\n\\{k}-grams:\n")
        for gram in by_order[k]:
            lp = model.log10_probs.get(gram, _ARPA_NO_PROB)
            words = " ".join(model.symbols.token(w) for w in gram)
            line = f"{_fmt(lp)}\t{words}"
            if k < model.order and gram in model.log10_backoffs:
                line += f"\t{_fmt(model.log10_backoffs[gram])}"
            stream.write(line + "\n")
    stream.write("\n\\end\\\n")


_NUM = re.compile(r"[+-]?(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?\Z")


def _num(tok: str, lineno: int) -> float:
    if not _NUM.match(tok):
        raise MalformedArpa(lineno, f"bad number {tok!r}")
    v = float(tok)
    if not math.isfinite(v):
        raise MalformedArpa(lineno, f"non-finite value {tok!r}")
    return v


def read_arpa(stream: IO[str] | str, symbols: SymbolTable | None = None) -> NgramModel:
    """Read an ARPA file.  Without ``symbols``, a table is built from the unigrams in file order."""
    if isinstance(stream, str):
        lines = stream.splitlines()
    else:
        lines = [ln.rstrip("\n") for ln in stream]
    declared: dict[int, int] = {}
    seen: dict[int, int] = defaultdict(int)
    probs: dict[tuple, float] = {}
    backoffs: dict[tuple, float] = {}
    section = None
    build_table = symbols is None
    if build_table:
        symbols = SymbolTable()
    done = False
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or done:
            if done and line:
                raise MalformedArpa(lineno, "content after \\end\\")
            continue
        if line == "\\data\\":
            section = "data"
            continue
        if line == "\\end\\":
            done = True
            continue
        m = re.fullmatch(r"\\(\d+)-grams:", line)
        if m:
            section = int(m.group(1))
            if section not in declared:
                raise MalformedArpa(lineno, f"undeclared section {section}")
            continue
        if section == "data":
            m = re.fullmatch(r"ngram (\d+)\s*=\s*(\d+)", line)
            if not m:
                raise MalformedArpa(lineno, "bad header line")
            declared[int(m.group(1))] = int(m.group(2))
            continue
        if not isinstance(section, int):
            raise MalformedArpa(lineno, "entry outside an n-gram section")
        parts = line.split()
        k = section
        if len(parts) not in (k + 1, k + 2):
            raise MalformedArpa(lineno, f"expected {k + 1} or {k + 2} fields")
        lp = _num(parts[0], lineno)
        toks = parts[1: k + 1]
        if k == 1 and build_table and toks[0] not in symbols:
            symbols.add(toks[0])
        try:
            gram = tuple(symbols.id(t) for t in toks)
        except (KeyError, ValueError):
            raise MalformedArpa(lineno, f"unknown word in {toks}") from None
        if gram in probs or (gram == (BOS,) and gram in backoffs):
            raise MalformedArpa(lineno, f"duplicate entry {toks}")
        if lp > 0:
            raise MalformedArpa(lineno, "positive log probability")
        if not (gram == (BOS,) and lp <= _ARPA_NO_PROB):
            probs[gram] = lp
        if len(parts) == k + 2:
            backoffs[gram] = _num(parts[-1], lineno)
        seen[k] += 1
    if not done:
        raise MalformedArpa(len(lines), "missing \\end\\")
    if not declared:
        raise MalformedArpa(1, "missing \\data\\ header")
    for k, n in declared.items():
        if seen[k] != n:
            raise MalformedArpa(1, f"header declares {n} {k}-grams, found {seen[k]}")
    order = max(declared)
    if sorted(declared) != list(range(1, order + 1)):
        raise MalformedArpa(1, "n-gram orders must be contiguous from 1")
    if (UNK,) not in probs:
        raise MalformedArpa(1, "<unk> needs a unigram probability")
    return NgramModel(order, symbols, probs, backoffs)


def save_arpa(path, model: NgramModel) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        write_arpa(model, f)


def load_arpa(path, symbols: SymbolTable | None = None) -> NgramModel:
    with open(path, encoding="utf-8") as f:
        return read_arpa(f, symbols)
