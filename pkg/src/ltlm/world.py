"""Synthetic toy world: lexicon, topic-coherent text and a simulated acoustic channel.

Classes come in confusable pairs ``(2k, 2k+1)``.  Every noun has a twin in
another topic (twins of one topic spread over all the others) whose pronunciation differs only by swapping one class for its
partner, so the acoustic channel confuses twins and only the sentence topic
(set by a noun several words away, beyond trigram reach) tells them apart.
The channel's frame posteriors stand in for labeled acoustic-model output.
"""

from __future__ import annotations

import ast
import itertools
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .latgen import (
    DurationModel,
    FakeAcousticModel,
    Lexicon,
    build_alignment_graph,
    read_duration_model,
    read_fam,
    read_lexicon,
    sample_fake_alignment,
    synthesize_posteriors,
    write_duration_model,
    write_fam,
    write_lexicon,
)
from .lattice_io import read_transcripts, save_table

TOPIC_NOUNS = (
    ("cat", "dog", "rat", "cow", "pig", "hen"),
    ("pan", "pot", "cup", "jar", "bowl", "fork"),
    ("ball", "bat", "net", "goal", "club", "puck"),
    ("drum", "horn", "harp", "bell", "lute", "song"),
)
# two twin pairs per topic pair, so a topic's twins spread over all other topics
TWIN_TOPICS = tuple(itertools.combinations(range(len(TOPIC_NOUNS)), 2))
VERBS = ("sees", "likes", "takes", "finds", "wants")
ADJECTIVES = ("big", "small", "old", "new", "red")
DETERMINERS = ("the", "a")
CONJUNCTIONS = ("and", "with", "near")
ADVERBS = ("today", "again", "now")


@dataclass
class WorldConfig:
    num_classes: int = 24
    leak: float = 0.45
    background: float = 0.02
    frame_concentration: float = 4.0
    min_mean_duration: float = 1.5
    max_mean_duration: float = 3.0
    max_duration: int = 8
    train_sentences: int = 2000
    eval_sentences: int = 200
    labeled_sentences: int = 300
    seed: int = 0


def confusion_matrix(num_classes: int, leak: float, background: float) -> np.ndarray:
    """True channel: class ``i`` keeps most mass, leaks to its partner, the rest is uniform."""
    A = num_classes
    m = np.full((A, A), background / (A - 2))
    for i in range(A):
        m[i, i] = 1.0 - leak - background
        m[i, i ^ 1] = leak
    return m


def _poisson_durations(mean: float, cap: int) -> dict[int, float]:
    lam = mean - 1.0
    w = {n: math.exp(-lam) * lam ** (n - 1) / math.factorial(n - 1) for n in range(1, cap + 1)}
    z = sum(w.values())
    return {n: v / z for n, v in w.items()}


@dataclass
class ToyWorld:
    config: WorldConfig
    lexicon: Lexicon
    confusion: np.ndarray
    durations: DurationModel
    twins: dict[str, str] = field(default_factory=dict)

    @property
    def channel(self) -> FakeAcousticModel:
        return FakeAcousticModel(self.confusion, self.config.frame_concentration)

    def sentence(self, rng: np.random.Generator) -> list[str]:
        """``DET ADJ? N VERB DET ADJ? N [CONJ DET N] [ADV]`` with every noun from one topic."""
        nouns = TOPIC_NOUNS[int(rng.integers(len(TOPIC_NOUNS)))]

        def pick(seq):
            return seq[int(rng.integers(len(seq)))]

        def np_phrase():
            out = [pick(DETERMINERS)]
            if rng.random() < 0.4:
                out.append(pick(ADJECTIVES))
            out.append(pick(nouns))
            return out

        words = np_phrase() + [pick(VERBS)] + np_phrase()
        if rng.random() < 0.6:
            words += [pick(CONJUNCTIONS), pick(DETERMINERS), pick(nouns)]
        if rng.random() < 0.3:
            words.append(pick(ADVERBS))
        return words

    def simulate(self, words, rng: np.random.Generator, utterance_id: str = ""):
        """Frame alignment and noisy posteriors for a spoken sentence."""
        graph = build_alignment_graph(words, self.lexicon)
        ali = sample_fake_alignment(graph, self.durations, rng, utterance_id)
        post = synthesize_posteriors(ali.frames, self.channel, rng)
        return ali, post


def make_world(config: WorldConfig | None = None) -> ToyWorld:
    config = config or WorldConfig()
    A = config.num_classes
    rng = np.random.default_rng([config.seed, 7])
    used: set[tuple[int, ...]] = set()

    def fresh(length):
        while True:
            p = [int(rng.integers(A))]
            while len(p) < length:
                c = int(rng.integers(A))
                if c != p[-1]:
                    p.append(c)
            p = tuple(p)
            if p not in used:
                return p

    lex = Lexicon(A)
    twins = {}
    next_noun = [0] * len(TOPIC_NOUNS)
    pairs = []
    for ta, tb in TWIN_TOPICS:
        for _ in range(2):
            pairs.append((TOPIC_NOUNS[ta][next_noun[ta]], TOPIC_NOUNS[tb][next_noun[tb]]))
            next_noun[ta] += 1
            next_noun[tb] += 1
    for wa, wb in pairs:
        while True:
            p = fresh(3)
            q = (p[0], p[1] ^ 1, p[2])
            if q not in used and q[1] not in (q[0], q[2]):
                break
        used.update((p, q))
        lex.add(wa, p)
        lex.add(wb, q)
        twins[wa], twins[wb] = wb, wa
    for group, length in ((VERBS, 3), (ADJECTIVES, 3), (DETERMINERS, 2), (CONJUNCTIONS, 2), (ADVERBS, 3)):
        for w in group:
            p = fresh(length)
            used.add(p)
            lex.add(w, p)
    means = rng.uniform(config.min_mean_duration, config.max_mean_duration, A)
    per = {c: _poisson_durations(means[c], config.max_duration) for c in range(A)}
    fallback = _poisson_durations(float(means.mean()), config.max_duration)
    return ToyWorld(
        config,
        lex,
        confusion_matrix(A, config.leak, config.background),
        DurationModel(per, fallback),
        twins,
    )


def find_twins(lexicon: Lexicon) -> dict[str, str]:
    """Noun pairs whose pronunciations differ by one class swapped for its partner."""
    nouns = [w for topic in TOPIC_NOUNS for w in topic if w in lexicon.prons]
    twins = {}
    for i, a in enumerate(nouns):
        for b in nouns[i + 1:]:
            pa, pb = lexicon.prons[a][0], lexicon.prons[b][0]
            diff = [(x, y) for x, y in zip(pa, pb) if x != y]
            if len(pa) == len(pb) and len(diff) == 1 and diff[0][0] ^ 1 == diff[0][1]:
                twins[a], twins[b] = b, a
    return twins


def make_corpora(world: ToyWorld) -> dict[str, list[tuple[str, list[str]]]]:
    """Deterministic train, eval and labeled sentence sets as ``(utterance id, words)``."""
    cfg = world.config
    rng = np.random.default_rng([cfg.seed, 11])
    out = {}
    for name, n in (("train", cfg.train_sentences), ("labeled", cfg.labeled_sentences), ("eval", cfg.eval_sentences)):
        out[name] = [(f"{name}-{i:05d}", world.sentence(rng)) for i in range(n)]
    return out


# fixture files


def save_world(world: ToyWorld, corpora: dict, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "world.cfg", "w", encoding="utf-8", newline="\n") as f:
        for k, v in dataclasses.asdict(world.config).items():
            f.write(f"{k} = {v!r}\n")
    with open(d / "lexicon.txt", "w", encoding="utf-8", newline="\n") as f:
        write_lexicon(world.lexicon, f)
    with open(d / "channel.fam", "w", encoding="utf-8", newline="\n") as f:
        write_fam(FakeAcousticModel(world.confusion), f)
    with open(d / "durations.txt", "w", encoding="utf-8", newline="\n") as f:
        write_duration_model(world.durations, f)
    for name, items in corpora.items():
        save_table(d / f"{name}.txt", {utt: words for utt, words in items})


def load_world(directory) -> tuple[ToyWorld, dict]:
    d = Path(directory)
    try:
        text = (d / "world.cfg").read_text(encoding="utf-8")
        values = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                values[k.strip()] = ast.literal_eval(v.strip())
        config = WorldConfig(**values)
        with open(d / "lexicon.txt", encoding="utf-8") as f:
            lexicon = read_lexicon(f)
        with open(d / "channel.fam", encoding="utf-8") as f:
            confusion = read_fam(f).matrix
        with open(d / "durations.txt", encoding="utf-8") as f:
            durations = read_duration_model(f)
        corpora = {}
        for name in ("train", "labeled", "eval"):
            corpora[name] = list(read_transcripts(d / f"{name}.txt").items())
    except (OSError, ValueError, SyntaxError, TypeError) as exc:
        raise DataError(f"cannot load world from {d}: {exc}") from None
    return ToyWorld(config, lexicon, confusion, durations, find_twins(lexicon)), corpora


def bundled_world_dir() -> Path:
    return Path(__file__).parent / "data" / "toyworld"
