"""End-to-end experiment: world, lattices, training, rescoring, evaluation.

Every stage derives its randomness from the experiment seed, so two runs with
the same config write identical files (timing.json aside).
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import ngram
from .align import corpus_oracle_wer
from .config import ExperimentConfig, dump_config
from .decoder import PrefixTree
from .latgen import (
    decode_corpus,
    estimate_duration_model,
    estimate_fam,
    generate_corpus,
    utterance_seed,
    write_duration_model,
    write_fam,
)
from .lattice import SymbolTable, augment
from .lattice_io import save_symbol_table, save_table, write_lattice_file
from .model import CausalTransformerLM, LatticeTransformer, train_arlm, train_ltlm
from .rescore import first_pass, nbest_rescore, render_table, single_shot_rescore, stats_compare, write_report
from .world import bundled_world_dir, load_world, make_corpora, make_world

log = logging.getLogger(__name__)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(directory, cfg: ExperimentConfig | None, extra: dict | None = None) -> None:
    """Config, seed, versions and a digest of every file in ``directory``."""
    d = Path(directory)
    files = {
        str(p.relative_to(d)): file_digest(p)
        for p in sorted(d.rglob("*"))
        if p.is_file() and p.name not in ("manifest.json", "timing.json")
    }
    manifest = {
        "versions": {"ltlm": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "files": files,
    }
    if cfg is not None:
        manifest.update(config=cfg.to_dict(), config_sha256=cfg.digest(), seed=cfg.seed)
    manifest.update(extra or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _save_corpus(out: Path, name: str, corpus, symbols: SymbolTable) -> None:
    write_lattice_file(out / f"{name}.lat.txt", corpus.archive, symbols)
    save_table(out / f"{name}.ref", {u: symbols.tokens(r) for u, r in corpus.refs.items()})
    save_table(out / f"{name}.tgt", corpus.targets)


def build_world(cfg: ExperimentConfig):
    if cfg.world_dir:
        return load_world(cfg.world_dir)
    bundled = bundled_world_dir()
    if bundled.is_dir() and _matches_bundled(cfg):
        return load_world(bundled)
    world = make_world(cfg.world_config())
    return world, make_corpora(world)


def _matches_bundled(cfg: ExperimentConfig) -> bool:
    return cfg.world_config() == load_world(bundled_world_dir())[0].config


def simulate_real(world, items, symbols, seed: int):
    """Alignments and noisy posteriors from the world's channel, standing in for recorded audio."""
    alis, posts, triples = {}, {}, []
    for utt, words in items:
        rng = np.random.default_rng(utterance_seed(seed, "real/" + utt))
        ali, post = world.simulate(words, rng, utt)
        alis[utt] = ali.frames
        posts[utt] = post
        triples.append((utt, symbols.ids(words), post))
    return alis, posts, triples


def run_pipeline(cfg: ExperimentConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timing = {}
    t_start = time.perf_counter()

    def stage(name):
        timing[name] = time.perf_counter()

    def done(name):
        timing[name] = time.perf_counter() - timing[name]
        log.info("stage %s: %.1fs", name, timing[name])

    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")

    stage("world")
    world, corpora = build_world(cfg)
    symbols = SymbolTable(world.lexicon.words())
    save_symbol_table(out / "words.txt", symbols)
    lm = ngram.train([w for _, w in corpora["train"]], cfg.ngram_order, symbols)
    ngram.save_arpa(out / "lm.arpa", lm)
    done("world")

    stage("estimate")
    alis, posts, labeled_items = simulate_real(world, corpora["labeled"], symbols, cfg.seed)
    save_table(out / "labeled.ali", alis)
    durations = estimate_duration_model(alis.values())
    fam = estimate_fam(list(alis.values()), list(posts.values()), world.lexicon.num_classes)
    with open(out / "durations.txt", "w", encoding="utf-8", newline="\n") as f:
        write_duration_model(durations, f)
    with open(out / "fam.txt", "w", encoding="utf-8", newline="\n") as f:
        write_fam(fam, f)
    done("estimate")

    stage("latgen")
    tree = PrefixTree(world.lexicon, symbols)
    dcfg = cfg.decode_config()
    real = decode_corpus(labeled_items, tree, lm, dcfg, cfg.seed)
    _save_corpus(out, "real", real, symbols)
    artificial = generate_corpus(
        corpora["train"], world.lexicon, symbols, lm, durations, fam, cfg.seed, dcfg, kappa=cfg.kappa
    )
    _save_corpus(out, "train", artificial, symbols)
    _, _, eval_items = simulate_real(world, corpora["eval"], symbols, cfg.seed)
    evalset = decode_corpus(eval_items, tree, lm, dcfg, cfg.seed)
    _save_corpus(out, "eval", evalset, symbols)
    done("latgen")

    stage("train-ltlm")
    examples = [(augment(lat), artificial.targets[lat.utterance_id]) for lat in artificial.archive]
    if cfg.mix_real:
        examples += [(augment(lat), real.targets[lat.utterance_id]) for lat in real.archive]
    heldout = examples[::20]
    train_set = [e for i, e in enumerate(examples) if i % 20]
    ckdir = out / "checkpoints"
    ckdir.mkdir(exist_ok=True)
    ltlm, history = train_ltlm(train_set, cfg.ltlm_config(len(symbols)), cfg.schedule(), heldout, ckdir)
    ltlm.save(out / "ltlm.ckpt", {"epoch_losses": history.epoch_losses, "heldout": history.heldout})
    done("train-ltlm")

    stage("train-arlm")
    sentences = [symbols.ids(w) for _, w in corpora["train"]]
    arlm, ar_hist = train_arlm(sentences, cfg.arlm_config(len(symbols)), cfg.schedule(cfg.ar_epochs))
    arlm.save(out / "arlm.ckpt", {"epoch_losses": ar_hist.epoch_losses})
    done("train-arlm")

    stage("rescore")
    summary = rescore_and_report(cfg, list(evalset.archive), evalset.refs, ltlm, arlm, symbols, out)
    done("rescore")

    summary["corpora"] = {"real": real.stats, "train": artificial.stats, "eval": evalset.stats}
    summary["skipped"] = {"real": len(real.skipped), "train": len(artificial.skipped), "eval": len(evalset.skipped)}
    summary["ltlm_epoch_losses"] = history.epoch_losses
    summary["ltlm_heldout"] = history.heldout
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    timing["total"] = time.perf_counter() - t_start
    write_manifest(out, cfg)
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    summary["timing"] = timing
    return summary


def rescore_and_report(cfg, lattices, refs, ltlm: LatticeTransformer, arlm: CausalTransformerLM, symbols, out: Path) -> dict:
    weights = cfg.weights()
    reports = [
        first_pass(lattices, weights),
        single_shot_rescore(lattices, ltlm, weights, cfg.rescore_batch),
        nbest_rescore(lattices, arlm, cfg.nbest, weights),
    ]
    rdir = out / "reports"
    rdir.mkdir(exist_ok=True)
    for r in reports:
        with open(rdir / f"{r.method}.txt", "w", encoding="utf-8", newline="\n") as f:
            write_report(r, f, symbols, refs)
    rows = stats_compare(reports, refs)
    oracle_wer = corpus_oracle_wer(lattices, refs)[0]
    table = render_table(rows)
    log.info("\n%s", table)
    return {
        "lattices": len(lattices),
        "first_pass_wer": rows[0]["wer"],
        "single_shot_wer": rows[1]["wer"],
        "nbest_wer": rows[2]["wer"],
        "oracle_wer": oracle_wer,
        "single_shot_calls": rows[1]["model_calls"],
        "nbest_calls": rows[2]["model_calls"],
        "single_shot_avg_seq_len": rows[1]["avg_seq_len"],
        "nbest_avg_seq_len": rows[2]["avg_seq_len"],
    }

