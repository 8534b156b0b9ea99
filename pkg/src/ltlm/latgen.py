"""Artificial lattice generation from text.

Text is expanded into acoustic-class sequences through a lexicon, stretched
into a frame-level fake alignment with sampled durations, turned into frame
posteriors with the fake acoustic model (FAM), and decoded into a lattice by
:mod:`ltlm.decoder`.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .align import corpus_oracle_wer, oracle_path
from .decoder import PrefixTree, decode_to_lattice
from .errors import DataError, DeadEnd, EmptyInput, FrameCountMismatch, UnpronounceableWord
from .lattice import augment
from .lattice_io import LatticeArchive
from .rescore import first_pass

log = logging.getLogger(__name__)


def utterance_seed(seed: int, utterance_id: str) -> list[int]:
    """Per-utterance RNG seed derived from the global seed and the utterance id."""
    digest = hashlib.sha256(f"{seed}\x00{utterance_id}".encode("utf-8")).digest()
    return [int.from_bytes(digest[i: i + 4], "little") for i in range(0, 16, 4)]


# lexicon


class Lexicon:
    """Word to pronunciation map; a pronunciation is a tuple of class ids below ``num_classes``."""

    def __init__(self, num_classes: int, prons: Mapping[str, Sequence[Sequence[int]]] | None = None):
        self.num_classes = num_classes
        self.prons: dict[str, list[tuple[int, ...]]] = {}
        for word, alts in (prons or {}).items():
            for p in alts:
                self.add(word, p)

    def add(self, word: str, pron: Sequence[int]) -> None:
        pron = tuple(int(c) for c in pron)
        if not pron:
            raise DataError(f"empty pronunciation for {word!r}")
        bad = [c for c in pron if not 0 <= c < self.num_classes]
        if bad:
            raise DataError(f"class ids {bad} of {word!r} outside [0, {self.num_classes})")
        alts = self.prons.setdefault(word, [])
        if pron not in alts:
            alts.append(pron)

    def __contains__(self, word) -> bool:
        return word in self.prons

    def __getitem__(self, word) -> list[tuple[int, ...]]:
        return self.prons[word]

    def words(self) -> list[str]:
        return sorted(self.prons)

    def spell(self, word: str) -> tuple[int, ...]:
        """Fallback grapheme spelling: one class per character."""
        return tuple(ord(ch) % self.num_classes for ch in word)

    def __eq__(self, other) -> bool:
        return isinstance(other, Lexicon) and self.num_classes == other.num_classes and self.prons == other.prons


def write_lexicon(lex: Lexicon, stream: IO[str]) -> None:
    stream.write(f"#A={lex.num_classes}\n")
    for word in lex.words():
        for p in lex[word]:
            stream.write(word + "\t" + " ".join(map(str, p)) + "\n")


def read_lexicon(stream: IO[str] | str, num_classes: int | None = None) -> Lexicon:
    """Read ``word<TAB>class class ...`` lines; an optional ``#A=<n>`` first line sets the inventory."""
    lines = stream.splitlines() if isinstance(stream, str) else list(stream)
    entries = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if line.startswith("#A="):
            num_classes = int(line[3:])
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1].split():
            raise DataError(f"lexicon line {lineno}: expected word<TAB>classes")
        try:
            entries.append((parts[0], [int(c) for c in parts[1].split()]))
        except ValueError:
            raise DataError(f"lexicon line {lineno}: class ids must be integers") from None
    if num_classes is None:
        num_classes = 1 + max((max(p) for _, p in entries), default=-1)
    lex = Lexicon(num_classes)
    for word, p in entries:
        lex.add(word, p)
    return lex


# durations


@dataclass
class DurationModel:
    """Per-class run-length distributions with a global fallback."""

    per_class: dict[int, dict[int, float]]
    fallback: dict[int, float]

    def dist(self, cls: int) -> dict[int, float]:
        return self.per_class.get(cls, self.fallback)

    def mean(self, cls: int) -> float:
        return sum(n * p for n, p in self.dist(cls).items())

    def sample(self, cls: int, rng: np.random.Generator) -> int:
        d = self.dist(cls)
        lengths = sorted(d)
        probs = np.array([d[n] for n in lengths])
        return lengths[int(rng.choice(len(lengths), p=probs / probs.sum()))]


def _runs(seq: Sequence[int]) -> list[tuple[int, int]]:
    out = []
    for c in seq:
        if out and out[-1][0] == c:
            out[-1][1] += 1
        else:
            out.append([c, 1])
    return [(c, n) for c, n in out]


def _histogram(counts: Mapping[int, int], smooth: bool) -> dict[int, float]:
    if smooth:
        lo, hi = min(counts), max(counts)
        counts = {n: counts.get(n, 0) + 1 for n in range(lo, hi + 1)}
    total = sum(counts.values())
    return {n: counts[n] / total for n in sorted(counts)}


def estimate_duration_model(alignments: Iterable[Sequence[int]], smooth: bool = True) -> DurationModel:
    """Run-length histograms per class.

    Smoothing adds one count to every length between the smallest and largest
    observed run of that class.
    """
    per: dict[int, dict[int, int]] = {}
    glob: dict[int, int] = {}
    for ali in alignments:
        for c, n in _runs(ali):
            per.setdefault(c, {})
            per[c][n] = per[c].get(n, 0) + 1
            glob[n] = glob.get(n, 0) + 1
    if not glob:
        raise EmptyInput("no alignment frames")
    return DurationModel({c: _histogram(h, smooth) for c, h in sorted(per.items())}, _histogram(glob, smooth))


def write_duration_model(model: DurationModel, stream: IO[str]) -> None:
    def fmt(d):
        return " ".join(f"{n}:{float(p)!r}" for n, p in d.items())

    stream.write(f"*: {fmt(model.fallback)}\n")
    for c, d in model.per_class.items():
        stream.write(f"{c}: {fmt(d)}\n")


def read_duration_model(stream: IO[str] | str) -> DurationModel:
    lines = stream.splitlines() if isinstance(stream, str) else list(stream)
    per, fallback = {}, None
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        head, _, rest = line.partition(":")
        try:
            d = {int(n): float(p) for n, p in (tok.split(":") for tok in rest.split())}
        except ValueError:
            raise DataError(f"duration line {lineno}: expected len:prob pairs") from None
        if not d or any(n < 1 or p < 0 for n, p in d.items()):
            raise DataError(f"duration line {lineno}: invalid distribution")
        if head.strip() == "*":
            fallback = d
        else:
            per[int(head)] = d
    if fallback is None:
        raise DataError("duration model has no fallback line")
    return DurationModel(per, fallback)


# fake acoustic model


@dataclass
class FakeAcousticModel:
    """Row ``i`` is the mean posterior over classes on frames whose true class is ``i``."""

    matrix: np.ndarray
    kappa: float | None = None

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[0]

    def row(self, cls: int) -> np.ndarray:
        return self.matrix[cls]


def _guard_diagonal(row: np.ndarray, i: int) -> np.ndarray:
    """Mix with the identity row just enough that entry ``i`` is the row maximum."""
    others = np.delete(row, i).max()
    if row[i] >= others:
        return row
    # (1-t)*row[i] + t >= (1-t)*others  ->  t >= (others - row[i]) / (1 + others - row[i])
    gap = others - row[i]
    t = gap / (1.0 + gap) + 1e-12
    out = (1.0 - t) * row
    out[i] += t
    return out


def estimate_fam(
    alignments: Sequence[Sequence[int]],
    posteriors: Sequence[np.ndarray],
    num_classes: int | None = None,
    eps: float = 1e-6,
) -> FakeAcousticModel:
    """Average posterior rows per aligned class, add ``eps`` and renormalise.

    Classes that are never aligned get a smoothed identity row.
    """
    if not alignments:
        raise EmptyInput("no alignments")
    if len(alignments) != len(posteriors):
        raise FrameCountMismatch(f"{len(alignments)} alignments but {len(posteriors)} posterior matrices")
    A = num_classes if num_classes is not None else posteriors[0].shape[1]
    sums = np.zeros((A, A))
    counts = np.zeros(A)
    for ali, post in zip(alignments, posteriors):
        post = np.asarray(post, dtype=np.float64)
        if post.shape != (len(ali), A):
            raise FrameCountMismatch(f"alignment has {len(ali)} frames, posteriors shape {post.shape}")
        idx = np.asarray(ali, dtype=np.int64)
        np.add.at(sums, idx, post)
        np.add.at(counts, idx, 1.0)
    mat = np.empty((A, A))
    for i in range(A):
        row = sums[i] / counts[i] if counts[i] else np.eye(A)[i]
        row = row + eps
        row = _guard_diagonal(row / row.sum(), i)
        mat[i] = row / row.sum()
    return FakeAcousticModel(mat)


def write_fam(fam: FakeAcousticModel, stream: IO[str]) -> None:
    stream.write(f"A={fam.num_classes}\n")
    for row in fam.matrix:
        stream.write(" ".join(repr(float(x)) for x in row) + "\n")


def read_fam(stream: IO[str] | str) -> FakeAcousticModel:
    lines = [ln for ln in (stream.splitlines() if isinstance(stream, str) else list(stream)) if ln.strip()]
    if not lines or not lines[0].startswith("A="):
        raise DataError("FAM file must start with A=<n>")
    A = int(lines[0][2:])
    if len(lines) != A + 1:
        raise DataError(f"FAM header says {A} rows, found {len(lines) - 1}")
    try:
        mat = np.array([[float(x) for x in ln.split()] for ln in lines[1:]])
    except ValueError:
        raise DataError("FAM entries must be numbers") from None
    if mat.shape != (A, A) or not np.all(np.isfinite(mat)) or (mat < 0).any():
        raise DataError("FAM must be a finite non-negative A x A matrix")
    if np.abs(mat.sum(axis=1) - 1.0).max() > 1e-9:
        raise DataError("FAM rows must sum to 1")
    return FakeAcousticModel(mat)


# alignment graph and fake alignment


@dataclass
class AlignmentGraph:
    """Word chain where each word offers one or more class sequences."""

    words: list[str]
    alternatives: list[list[tuple[int, ...]]]

    def num_paths(self) -> int:
        return math.prod(len(a) for a in self.alternatives)

    def class_paths(self) -> list[tuple[int, ...]]:
        paths = [()]
        for alts in self.alternatives:
            paths = [p + q for p in paths for q in alts]
        return paths

    def arcs(self) -> list[tuple[int, int, int, str | None]]:
        """Explicit ``(src, dst, class, word_at_end)`` arcs; word-boundary states are shared."""
        out = []
        boundary = 0
        next_state = 1
        for word, alts in zip(self.words, self.alternatives):
            end = next_state
            next_state += 1
            for p in alts:
                s = boundary
                for k, c in enumerate(p):
                    last = k == len(p) - 1
                    d = end if last else next_state
                    if not last:
                        next_state += 1
                    out.append((s, d, c, word if last else None))
                    s = d
            boundary = end
        return out


def build_alignment_graph(words: Sequence[str], lexicon: Lexicon, strict: bool = True) -> AlignmentGraph:
    alts = []
    for w in words:
        if w in lexicon:
            alts.append(list(lexicon[w]))
        elif strict:
            raise UnpronounceableWord(w)
        else:
            alts.append([lexicon.spell(w)])
    return AlignmentGraph(list(words), alts)


@dataclass
class FakeAlignment:
    utterance_id: str
    frames: list[int]
    # (word, first frame, last frame + 1); frames of a merged run are split between its words
    word_spans: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return len(self.frames)


def sample_fake_alignment(
    graph: AlignmentGraph, durations: DurationModel, rng: np.random.Generator, utterance_id: str = ""
) -> FakeAlignment:
    """Pick a pronunciation per word uniformly, merge adjacent equal classes, stretch each run.

    A run that merged ``k`` equal classes is stretched once and then given at
    least ``k`` frames, so every merged occurrence still owns a frame.
    """
    seq: list[tuple[int, int]] = []  # (class, word index)
    for wi, alts in enumerate(graph.alternatives):
        pron = alts[int(rng.integers(len(alts)))] if len(alts) > 1 else alts[0]
        seq.extend((c, wi) for c in pron)
    runs: list[list] = []  # [class, [word index per merged occurrence]]
    for c, wi in seq:
        if runs and runs[-1][0] == c:
            runs[-1][1].append(wi)
        else:
            runs.append([c, [wi]])
    frames: list[int] = []
    owner: list[int] = []
    for c, wis in runs:
        n = max(durations.sample(c, rng), len(wis))
        frames.extend([c] * n)
        # split the run evenly between its occurrences, remainder to the first
        k = len(wis)
        share = [n // k + (1 if j < n % k else 0) for j in range(k)]
        for wi, m in zip(wis, share):
            owner.extend([wi] * m)
    spans = []
    for wi, word in enumerate(graph.words):
        idx = [t for t, o in enumerate(owner) if o == wi]
        spans.append((word, idx[0], idx[-1] + 1))
    return FakeAlignment(utterance_id, frames, spans)


def synthesize_posteriors(
    frames: Sequence[int], fam: FakeAcousticModel, rng: np.random.Generator | None = None, kappa: float | None = None
) -> np.ndarray:
    """Frame ``t`` gets the FAM row of its class, redrawn around that row when ``kappa`` is set."""
    kappa = fam.kappa if kappa is None else kappa
    idx = np.asarray(frames, dtype=np.int64)
    if kappa is None or rng is None:
        return fam.matrix[idx].copy()
    base = np.maximum(fam.matrix[idx], 1e-12)
    # Dirichlet via normalised gammas, vectorised over frames
    g = rng.standard_gamma(kappa * base)
    g = np.maximum(g / g.sum(axis=1, keepdims=True), 1e-12)
    return g / g.sum(axis=1, keepdims=True)


# corpus generation


@dataclass
class GeneratedCorpus:
    archive: LatticeArchive
    refs: dict[str, list[int]]
    # per-arc 0/1 oracle labels, aligned with the arcs of the augmented lattice
    targets: dict[str, list[int]]
    skipped: dict[str, str]
    stats: dict[str, float]


def label_lattices(lattices, refs: Mapping[str, Sequence[int]], seed: int) -> dict[str, list[int]]:
    """Oracle targets on the augmented lattice; ties are broken with a per-utterance seed."""
    out = {}
    for lat in lattices:
        rng = np.random.default_rng(utterance_seed(seed, lat.utterance_id + "/oracle"))
        out[lat.utterance_id] = oracle_path(augment(lat), refs[lat.utterance_id], rng).labels
    return out


def corpus_summary(lattices, refs: Mapping[str, Sequence[int]]) -> dict[str, float]:
    if not lattices:
        return {"lattices": 0}
    sub = {lat.utterance_id: refs[lat.utterance_id] for lat in lattices}
    n_words = sum(len(r) for r in sub.values())
    return {
        "lattices": len(lattices),
        "arcs_per_word": sum(lat.num_arcs for lat in lattices) / max(1, n_words),
        "oracle_wer": corpus_oracle_wer(lattices, sub)[0],
        "first_pass_wer": first_pass(lattices).wer(sub)[0],
    }


def decode_corpus(items, tree, lm, decode_config, seed: int):
    """Decode ``(utterance id, reference ids, posteriors)`` triples; failures are collected, not raised."""
    archive = LatticeArchive()
    refs, skipped = {}, {}
    for utt, ref, post in items:
        try:
            lat = decode_to_lattice(post, tree, lm, decode_config, utt)
        except DeadEnd as exc:
            log.warning("skipping %s: %s", utt, exc)
            skipped[utt] = str(exc)
            continue
        archive.append(lat)
        refs[utt] = list(ref)
    lats = list(archive)
    return GeneratedCorpus(archive, refs, label_lattices(lats, refs, seed), skipped, corpus_summary(lats, refs))


def generate_corpus(
    texts: Sequence[tuple[str, Sequence[str]]],
    lexicon: Lexicon,
    symbols,
    lm,
    durations: DurationModel,
    fam: FakeAcousticModel,
    seed: int,
    decode_config=None,
    kappa: float | None = None,
    strict: bool = True,
) -> GeneratedCorpus:
    """Artificial lattices from text: fake alignment, synthetic posteriors, beam decoding."""
    tree = PrefixTree(lexicon, symbols)
    items, dropped = [], {}
    for utt, words in texts:
        try:
            graph = build_alignment_graph(words, lexicon, strict)
        except UnpronounceableWord as exc:
            dropped[utt] = f"unpronounceable word {exc}"
            continue
        rng = np.random.default_rng(utterance_seed(seed, utt))
        ali = sample_fake_alignment(graph, durations, rng, utt)
        post = synthesize_posteriors(ali.frames, fam, rng, kappa)
        items.append((utt, symbols.ids(words), post))
    out = decode_corpus(items, tree, lm, decode_config, seed)
    out.skipped.update(dropped)
    return out
