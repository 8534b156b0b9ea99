"""Command-line front end: ``ltlm <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ngram
from .align import corpus_oracle_wer, corpus_wer
from .config import ExperimentConfig, load_config, parse_overrides
from .decoder import DecodeConfig
from .errors import ConfigError, DataError, LtlmError, RuntimeFailure
from .latgen import (
    generate_corpus,
    label_lattices,
    read_duration_model,
    read_fam,
    read_lexicon,
)
from .lattice import ScoreWeights, augment
from .lattice_io import (
    LatticeArchive,
    load_symbol_table,
    read_lattice_file,
    read_table,
    read_transcripts,
    save_table,
    write_lattice_file,
)
from .model import CausalTransformerLM, LatticeTransformer, train_arlm, train_ltlm
from .pipeline import file_digest, run_pipeline, write_manifest
from .rescore import (
    first_pass,
    nbest_rescore,
    read_report,
    render_table,
    rows_to_json,
    single_shot_rescore,
    stats_compare,
    write_report,
)
from .selftest import run_selftest
from .world import make_corpora, make_world, save_world

log = logging.getLogger("ltlm")

EXIT_CODES = ((ConfigError, 2), (DataError, 3), (RuntimeFailure, 4))


def _config(args) -> ExperimentConfig:
    return load_config(args.config, parse_overrides(args.set or []))


def _manifest_for_file(path, cfg, command: str) -> None:
    """Manifest ``<file>.manifest.json`` describing one output file."""
    p = Path(path)
    data = {"command": command, "files": {p.name: file_digest(p)}}
    if cfg is not None:
        data.update(config=cfg.to_dict(), config_sha256=cfg.digest(), seed=cfg.seed)
    p.with_name(p.name + ".manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _open(path):
    try:
        return open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _refs_as_ids(path, symbols) -> dict[str, list[int]]:
    return {u: symbols.ids(w) for u, w in read_transcripts(path).items()}


def _targets_for(path: Path, archive: LatticeArchive, symbols, seed: int) -> dict[str, list[int]]:
    """Targets from ``<prefix>.tgt`` beside the lattice file, else computed from ``<prefix>.ref``."""
    prefix = str(path)[: -len(".lat.txt")] if str(path).endswith(".lat.txt") else str(path)
    tgt = Path(prefix + ".tgt")
    if tgt.exists():
        return read_table(_open(tgt), int)
    ref = Path(prefix + ".ref")
    if not ref.exists():
        raise DataError(f"{path}: neither {tgt.name} nor {ref.name} found")
    return label_lattices(list(archive), _refs_as_ids(ref, symbols), seed)


# commands


def cmd_make_world(args) -> int:
    cfg = _config(args)
    world = make_world(cfg.world_config())
    save_world(world, make_corpora(world), args.out)
    write_manifest(args.out, cfg, {"command": "make-world"})
    print(f"world written to {args.out}")
    return 0


def cmd_latgen(args) -> int:
    cfg = _config(args)
    symbols = load_symbol_table(args.words)
    lexicon = read_lexicon(_open(args.lexicon))
    lm = ngram.load_arpa(args.lm, symbols)
    fam = read_fam(_open(args.fam))
    durations = read_duration_model(_open(args.durations))
    texts = list(read_transcripts(args.texts).items())
    kappa = cfg.kappa if args.kappa is None else (None if args.kappa <= 0 else args.kappa)
    dcfg = DecodeConfig(cfg.lattice_beam, cfg.max_active, cfg.prune_beam, ScoreWeights(cfg.a, cfg.l1, 0.0))
    corpus = generate_corpus(texts, lexicon, symbols, lm, durations, fam, cfg.seed, dcfg, kappa, strict=not args.spell)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_lattice_file(out / f"{args.name}.lat.txt", corpus.archive, symbols)
    save_table(out / f"{args.name}.ref", {u: symbols.tokens(r) for u, r in corpus.refs.items()})
    save_table(out / f"{args.name}.tgt", corpus.targets)
    write_manifest(out, cfg, {"command": "latgen", "stats": corpus.stats, "skipped": corpus.skipped})
    print(json.dumps(corpus.stats, sort_keys=True))
    return 0


def cmd_train_ltlm(args) -> int:
    cfg = _config(args)
    symbols = load_symbol_table(args.words)
    examples = []
    for path in args.mix:
        archive = read_lattice_file(path, symbols)
        targets = _targets_for(Path(path), archive, symbols, cfg.seed)
        for lat in archive:
            if lat.utterance_id not in targets:
                raise DataError(f"{path}: no targets for {lat.utterance_id}")
            examples.append((augment(lat), targets[lat.utterance_id]))
    heldout = examples[::20] if len(examples) >= 20 else None
    train_set = [e for i, e in enumerate(examples) if i % 20] if heldout else examples
    ckdir = Path(args.out).parent / (Path(args.out).stem + "_checkpoints")
    ckdir.mkdir(parents=True, exist_ok=True)
    model, hist = train_ltlm(train_set, cfg.ltlm_config(len(symbols)), cfg.schedule(), heldout, ckdir, args.resume)
    model.save(args.out, {"epoch_losses": hist.epoch_losses, "heldout": hist.heldout, "config_file": cfg.to_dict()})
    _manifest_for_file(args.out, cfg, "train-ltlm")
    for e, loss in enumerate(hist.epoch_losses, 1):
        extra = hist.heldout[e - 1] if e - 1 < len(hist.heldout) else {}
        print(f"epoch {e} loss {loss:.4f} " + " ".join(f"{k} {v:.4f}" for k, v in extra.items()))
    return 0


def cmd_train_arlm(args) -> int:
    cfg = _config(args)
    symbols = load_symbol_table(args.words)
    sentences = [symbols.ids(w) for w in read_transcripts(args.texts).values()]
    model, hist = train_arlm(sentences, cfg.arlm_config(len(symbols)), cfg.schedule(cfg.ar_epochs))
    model.save(args.out, {"epoch_losses": hist.epoch_losses, "config_file": cfg.to_dict()})
    _manifest_for_file(args.out, cfg, "train-arlm")
    print(f"final loss {hist.epoch_losses[-1]:.4f}")
    return 0


def cmd_rescore(args) -> int:
    cfg = _config(args)
    symbols = load_symbol_table(args.words)
    lattices = list(read_lattice_file(args.lattices, symbols))
    weights = ScoreWeights(cfg.a, cfg.l1, cfg.l2 if args.l2 is None else args.l2)
    if args.mode == "first-pass":
        report = first_pass(lattices, weights)
    elif args.mode == "single-shot":
        if not args.model:
            raise ConfigError("--model is required for single-shot rescoring")
        model = LatticeTransformer.load(args.model)
        report = single_shot_rescore(lattices, model, weights, args.batch or cfg.rescore_batch)
    else:
        if not args.model:
            raise ConfigError("--model is required for n-best rescoring")
        model = CausalTransformerLM.load(args.model)
        report = nbest_rescore(lattices, model, args.nbest or cfg.nbest, weights)
    refs = _refs_as_ids(args.ref, symbols) if args.ref else None
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        write_report(report, f, symbols, refs)
    if args.hyp_out:
        save_table(args.hyp_out, {u: symbols.tokens(w) for u, w in report.hypotheses().items()})
    _manifest_for_file(args.out, cfg, f"rescore --mode {args.mode}")
    line = f"{report.method}: {len(report.results)} utterances, {report.model_calls} model calls"
    if refs:
        line += f", WER {report.wer(refs)[0]:.2f}%"
    print(line)
    return 0


def cmd_wer(args) -> int:
    hyps = read_transcripts(args.hyp)
    refs = read_transcripts(args.ref)
    wer, stats = corpus_wer(hyps, refs)
    print(f"WER {wer:.2f}% [ {stats.errors} / {stats.ref_len}, {stats.insertions} ins, {stats.deletions} del, {stats.substitutions} sub ]")
    return 0


def cmd_oracle_wer(args) -> int:
    symbols = load_symbol_table(args.words)
    lattices = list(read_lattice_file(args.lattices, symbols))
    refs = _refs_as_ids(args.ref, symbols)
    wer, stats = corpus_oracle_wer(lattices, refs)
    print(f"oracle WER {wer:.2f}% [ {stats.errors} / {stats.ref_len} ]")
    return 0


def cmd_stats(args) -> int:
    symbols = load_symbol_table(args.words) if args.words else None
    reports = [read_report(_open(p), symbols) for p in args.reports]
    refs = _refs_as_ids(args.ref, symbols) if args.ref and symbols else None
    rows = stats_compare(reports, refs)
    print(rows_to_json(rows) if args.json else render_table(rows))
    return 0


def cmd_selftest(args) -> int:
    failed = 0
    for name, ok, detail in run_selftest(args.seed):
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed += not ok
    return 4 if failed else 0


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    summary = run_pipeline(cfg, args.out)
    keys = ("first_pass_wer", "single_shot_wer", "nbest_wer", "oracle_wer")
    print("  ".join(f"{k} {summary[k]:.2f}" for k in keys))
    print(f"lattices {summary['lattices']}  single_shot_calls {summary['single_shot_calls']}  nbest_calls {summary['nbest_calls']}")
    print(f"total time {summary['timing']['total']:.1f}s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (default: $LTLM_CONFIG)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value")
    common.add_argument("--jobs", type=int, default=1, help="worker cap (stages run single-threaded)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ltlm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-world", parents=[common], help="write a toy world fixture")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_make_world)

    s = sub.add_parser("latgen", parents=[common], help="generate artificial lattices from text")
    for name in ("texts", "lexicon", "words", "lm", "fam", "durations", "out"):
        s.add_argument(f"--{name}", required=True)
    s.add_argument("--name", default="train")
    s.add_argument("--kappa", type=float, help="posterior noise concentration; <= 0 disables")
    s.add_argument("--spell", action="store_true", help="spell out words missing from the lexicon")
    s.set_defaults(fn=cmd_latgen)

    s = sub.add_parser("train-ltlm", parents=[common], help="train the lattice transformer")
    s.add_argument("--mix", nargs="+", required=True, metavar="LATTICES", help="one or more .lat.txt files")
    s.add_argument("--words", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume")
    s.set_defaults(fn=cmd_train_ltlm)

    s = sub.add_parser("train-arlm", parents=[common], help="train the causal baseline LM")
    s.add_argument("--texts", required=True)
    s.add_argument("--words", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train_arlm)

    s = sub.add_parser("rescore", parents=[common], help="select hypotheses from lattices")
    s.add_argument("--mode", choices=("first-pass", "single-shot", "nbest"), default="single-shot")
    s.add_argument("--lattices", required=True)
    s.add_argument("--words", required=True)
    s.add_argument("--model")
    s.add_argument("--out", required=True)
    s.add_argument("--hyp-out")
    s.add_argument("--ref")
    s.add_argument("--l2", type=float)
    s.add_argument("--nbest", type=int)
    s.add_argument("--batch", type=int)
    s.set_defaults(fn=cmd_rescore)

    s = sub.add_parser("wer", parents=[common], help="corpus WER of a hypothesis table")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.set_defaults(fn=cmd_wer)

    s = sub.add_parser("oracle-wer", parents=[common], help="oracle WER of a lattice archive")
    s.add_argument("--lattices", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--words", required=True)
    s.set_defaults(fn=cmd_oracle_wer)

    s = sub.add_parser("stats", parents=[common], help="compare rescoring reports")
    s.add_argument("--reports", nargs="+", required=True)
    s.add_argument("--words")
    s.add_argument("--ref")
    s.add_argument("--json", action="store_true")
    s.set_defaults(fn=cmd_stats)

    s = sub.add_parser("selftest", parents=[common], help="brute-force and gradient invariant checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_selftest)

    s = sub.add_parser("pipeline", parents=[common], help="world -> lattices -> training -> rescoring")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_pipeline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return args.fn(args)
    except LtlmError as exc:
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                print(f"error: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
