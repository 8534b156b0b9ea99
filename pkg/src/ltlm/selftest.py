"""Quick invariant suite behind ``ltlm selftest``.

Each check compares an implementation against a brute-force or numerical
reference on small random inputs and returns (name, passed, detail).
"""

from __future__ import annotations

import io
import math
from typing import Callable

import numpy as np

from . import autodiff as ad
from .align import edit_distance, oracle_path
from .lattice import Arc, Lattice, ScoreWeights, augment, count_paths, enumerate_paths, strip_aux
from .lattice_io import parse_lattice_text, write_lattice_text
from .model import LatticeTransformer, LtLmConfig, bce_loss, make_batch
from .rescore import best_path, nbest_extract


def random_lattice(rng: np.random.Generator, max_paths: int = 64, vocab: int = 8, utt: str = "u") -> Lattice:
    """Random acyclic lattice with at most ``max_paths`` complete paths; state 0 is initial."""
    while True:
        n = int(rng.integers(2, 7))
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
        if count_paths(lat) <= max_paths:
            return lat


def _brute_cost(words_lm_ac, w: ScoreWeights):
    _, lm, ac = words_lm_ac
    return w.a * ac + w.l1 * lm


def check_oracle(rng, n=50) -> tuple[bool, str]:
    for k in range(n):
        lat = random_lattice(rng)
        ref = [int(x) for x in rng.integers(4, 12, size=int(rng.integers(0, 6)))]
        brute = min(edit_distance(strip_aux(p[0]), ref).errors for p in enumerate_paths(lat))
        got = oracle_path(lat, ref, rng).oracle_stats.errors
        if got != brute:
            return False, f"lattice {k}: oracle {got} != brute force {brute}"
    return True, f"{n} lattices"


def check_best_and_nbest(rng, n=50) -> tuple[bool, str]:
    w = ScoreWeights()
    for k in range(n):
        lat = random_lattice(rng)
        paths = enumerate_paths(lat)
        ranked = sorted(paths, key=lambda p: _brute_cost(p, w))
        _, cost = best_path(lat, w)
        if not math.isclose(cost, _brute_cost(ranked[0], w), rel_tol=1e-9, abs_tol=1e-9):
            return False, f"lattice {k}: best cost {cost}"
        best = {}
        for p in ranked:
            best.setdefault(strip_aux(p[0]), _brute_cost(p, w))
        hyps = nbest_extract(lat, 1000, w)
        if len(hyps) != len(best):
            return False, f"lattice {k}: {len(hyps)} hypotheses, expected {len(best)}"
        for h in hyps:
            if not math.isclose(h.cost, best[h.words], rel_tol=1e-9, abs_tol=1e-9):
                return False, f"lattice {k}: cost mismatch for {h.words}"
    return True, f"{n} lattices"


def _tiny_model(seed=0):
    cfg = LtLmConfig(vocab_size=12, d_model=16, layers=2, heads=2, ff_dim=32, max_positions=16, dropout=0.0, seed=seed)
    return LatticeTransformer(cfg)


def check_gradients(rng) -> tuple[bool, str]:
    lat = augment(random_lattice(rng, max_paths=8))
    model = _tiny_model()
    labels = rng.integers(0, 2, size=lat.num_arcs)
    batch = make_batch([lat], [labels], model.config.max_positions)
    err = ad.grad_check(lambda: bce_loss(model.logits(batch), batch.targets, batch.mask), list(model.params.values()), rng=rng)
    return err < 1e-4, f"max relative error {err:.2e}"


def check_permutation(rng, n=10) -> tuple[bool, str]:
    model = _tiny_model()
    worst = 0.0
    for _ in range(n):
        lat = augment(random_lattice(rng))
        perm = rng.permutation(lat.num_arcs)
        shuffled = lat.replace(arcs=tuple(lat.arcs[i] for i in perm))
        p = model.predict([lat])[0]
        q = model.predict([shuffled])[0]
        worst = max(worst, float(np.abs(p[perm] - q).max()))
    return worst < 1e-9, f"max deviation {worst:.1e}"


def check_roundtrip(rng, n=50) -> tuple[bool, str]:
    for _ in range(n):
        lat = random_lattice(rng)
        buf = io.StringIO()
        write_lattice_text([lat], buf)
        back = list(parse_lattice_text(buf.getvalue()))[0]
        if back != lat:
            return False, "lattice text round trip changed the lattice"
    return True, f"{n} lattices"


CHECKS: dict[str, Callable] = {
    "oracle": check_oracle,
    "best-path/n-best": check_best_and_nbest,
    "gradients": check_gradients,
    "permutation": check_permutation,
    "round-trip": check_roundtrip,
}


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS.items():
        ok, detail = fn(np.random.default_rng([seed, len(results)]))
        results.append((name, ok, detail))
    return results
