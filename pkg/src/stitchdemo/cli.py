"""Command-line entry point: ``stitchdemo <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import Corpus, ingest_corpus, load_procedures, load_samples, write_corpus, write_samples
from .errors import DataError, ExternalServiceError, NoCandidates, TrainingDiverged
from .localizer import localize_corpus, read_pool, write_pool

log = logging.getLogger("stitchdemo")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_EXTERNAL = 0, 1, 2, 3

DEFAULTS = {
    "corpus_dir": "corpus",
    "out_dir": "out",
    "seed": 0,
    "threads": os.cpu_count() or 1,
    "dim": None,
    "threshold": 0.8,
    "top_s": 50,
    "top_k": 100,
    "distractors": 499,
    "llm": "mock",
    "neg_kinds": "cor,con,osc",
    "epochs": 10,
    "lr": 3e-4,
    "batch_size": 24,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common() -> argparse.ArgumentParser:
    # every default is None so that explicitly passed flags can be told apart
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--config", help="JSON file with flag values (flags given on the command line win)")
    g.add_argument("--corpus-dir", help="corpus directory (videos.jsonl + embedding files)")
    g.add_argument("--out-dir", help="directory for outputs and run_config.json")
    g.add_argument("--seed", type=int)
    g.add_argument("--threads", type=int, help="worker threads (default: logical cores)")
    g.add_argument("--dim", type=int, help="embedding dim (synth) or model width (train)")
    g.add_argument("--threshold", type=float, help="step-text match threshold")
    g.add_argument("--top-s", type=int, help="pool matches kept per query step")
    g.add_argument("--top-k", type=int, help="set-cover candidates per query")
    g.add_argument("--distractors", type=int, help="distractors per test query")
    g.add_argument("--llm", choices=("mock", "http"))
    g.add_argument("--neg-kinds", help="comma list of negative kinds: cor,con,osc")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("-v", "--verbose", action="store_true", default=None)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="stitchdemo", description="Stitch multi-source video demonstrations for procedures.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    add("ingest", "validate a corpus directory and summarize it")
    p = add("localize", "localize annotated steps in every video (writes pool.jsonl)")
    p.add_argument("--drop-percentile", type=float, default=None)
    p.add_argument("--step-drop-cost", type=float, default=None)
    for name, text in (
        ("map", "map query steps to pool clips (writes mapping.json)"),
        ("covers", "set-cover candidate sequences per query (writes candidates.jsonl)"),
    ):
        p = add(name, text)
        p.add_argument("--query", required=True, help="procedures.jsonl")
        p.add_argument("--pool", help="pool.jsonl (default: <out-dir>/pool.jsonl or localize on the fly)")
    p = add("gen-data", "LLM summaries and procedure mixing (writes dataset_w.jsonl)")
    p.add_argument("--domain", default="cooking", choices=("cooking", "woodworking", "gardening"))
    p.add_argument("--pair-threshold", type=float, default=0.8)
    p.add_argument("--group-sizes", default="2,3,4")
    p = add("gen-negatives", "hard negatives for ground-truth samples (writes negatives.jsonl)")
    p.add_argument("--samples", required=True, nargs="+")
    p.add_argument("--per-sample", type=int, default=3)
    p.add_argument("--pool")
    p.add_argument("--lenient-state", action="store_true", help="state violations swap the sample's own clips")
    p = add("train", "train the procedure evaluator (writes model.json, model.bin, loss.csv)")
    p.add_argument("--train", required=True, nargs="+", help="ground-truth sample files")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--pool")
    p = add("stitch", "pick the best candidate per query (writes stitched.jsonl)")
    p.add_argument("--query", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--pool")
    p = add("eval", "rank ground truths among distractors (writes report.csv)")
    p.add_argument("--test", required=True, nargs="+")
    p.add_argument("--model")
    p.add_argument("--pool")
    p.add_argument("--ablation", help="negative-kind rows separated by ';', e.g. 'cor,con,osc;cor'")
    p.add_argument("--ablation-seeds", default="0")
    p.add_argument("--train", nargs="+", help="training samples for --ablation")
    p = add("capture-curve", "ground-truth capture probability vs K (writes capture_curve.csv)")
    p.add_argument("--test", required=True, nargs="+")
    p.add_argument("--ks", default="1,5,10,20,50,100")
    p.add_argument("--pool")
    p.add_argument("--svg", action="store_true", help="also write capture_curve.svg")
    p = add("synth", "write a synthetic benchmark corpus and query sets")
    p.add_argument("--videos", type=int, default=200)
    p.add_argument("--train-queries", type=int, default=300)
    p.add_argument("--test-queries", type=int, default=100)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise DataError(f"config {args.config} must hold a JSON object")
        for key, value in loaded.items():
            key = key.replace("-", "_")
            if key not in vars(args) or key in ("config", "command"):
                raise DataError(f"config {args.config}: unknown key {key!r}")
            cfg[key] = value
    for key, value in vars(args).items():
        if value is not None and key != "config":
            cfg[key] = value
    for key in vars(args):
        cfg.setdefault(key, None)
    return cfg


def _load_corpus(cfg) -> Corpus:
    return ingest_corpus(cfg["corpus_dir"])


def _pool(cfg, corpus):
    path = cfg.get("pool") or Path(cfg["out_dir"]) / "pool.jsonl"
    if Path(path).exists():
        return read_pool(path, corpus)
    if cfg.get("pool"):
        raise DataError(f"pool file {path} not found")
    log.info("no pool file; localizing the corpus")
    return localize_corpus(corpus)[0]


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _kinds(text: str) -> list[str]:
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in ("cor", "con", "osc")]
    if bad or not kinds:
        raise UsageError(f"--neg-kinds must be a comma list of cor,con,osc (got {text!r})")
    return kinds


def _ints(text: str, flag: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"{flag} expects a comma list of integers") from None


def _samples(paths):
    out = []
    for p in paths:
        out.extend(load_samples(p))
    return out


# ---------------------------------------------------------------------------
# subcommands; each returns the names of the files it wrote


def cmd_ingest(cfg, out: Path):
    corpus = _load_corpus(cfg)
    tasks = Counter(v.task for v in corpus)
    _write_json(
        out / "corpus_summary.json",
        {
            "videos": len(corpus),
            "dim": corpus.dim,
            "windows": int(sum(v.n_windows for v in corpus)),
            "with_asr": sum(v.asr is not None for v in corpus),
            "with_steps": sum(v.steps is not None for v in corpus),
            "tasks": dict(sorted(tasks.items())),
        },
    )
    return ["corpus_summary.json"]


def cmd_localize(cfg, out: Path):
    corpus = _load_corpus(cfg)
    kwargs = {}
    if cfg.get("drop_percentile") is not None:
        kwargs["drop_percentile"] = cfg["drop_percentile"]
    if cfg.get("step_drop_cost") is not None:
        kwargs["step_drop_cost"] = cfg["step_drop_cost"]
    pool, skipped = localize_corpus(corpus, **kwargs)
    write_pool(pool, out / "pool.jsonl")
    log.info("%d pool entries, %d video(s) skipped", len(pool), skipped)
    return ["pool.jsonl"]


def cmd_map(cfg, out: Path):
    from .mapping import build_mapping, dump_mappings

    corpus = _load_corpus(cfg)
    pool = _pool(cfg, corpus)
    queries = load_procedures(cfg["query"])
    mappings = [build_mapping(q, pool, cfg["threshold"], cfg["top_s"]) for q in queries]
    dump_mappings(mappings, out / "mapping.json")
    return ["mapping.json"]


def cmd_covers(cfg, out: Path):
    from .mapping import build_mapping
    from .setcover import setcover_candidates, write_candidates

    corpus = _load_corpus(cfg)
    pool = _pool(cfg, corpus)
    cands = []
    for q in load_procedures(cfg["query"]):
        mapping = build_mapping(q, pool, cfg["threshold"], cfg["top_s"])
        found = setcover_candidates(mapping, cfg["top_k"])
        if not found:
            log.warning("%s: no complete candidate", q.procedure_id)
        cands.extend(found)
    write_candidates(cands, out / "candidates.jsonl")
    return ["candidates.jsonl"]


def cmd_gen_data(cfg, out: Path):
    from .datagen import build_weak_dataset
    from .llm import make_client

    corpus = _load_corpus(cfg)
    llm = make_client(cfg["llm"])
    sizes = _ints(cfg["group_sizes"], "--group-sizes")
    samples, stats, audit = build_weak_dataset(corpus, llm, cfg["domain"], cfg["pair_threshold"], sizes)
    data_dir = out / "dataset_w"
    data_dir.mkdir(exist_ok=True)
    write_samples(samples, data_dir / "dataset_w.jsonl")
    with open(out / "rejected.jsonl", "w", encoding="utf-8") as fh:
        for r in audit:
            fh.write(json.dumps({"status": r.status, "reason": r.reason, "raw": r.raw}) + "\n")
    _write_json(out / "gen_data_stats.json", dict(sorted(stats.items())))
    return ["dataset_w/dataset_w.jsonl", "rejected.jsonl", "gen_data_stats.json"]


def cmd_gen_negatives(cfg, out: Path):
    from .negatives import NegativeGenerator, write_negatives

    corpus = _load_corpus(cfg)
    pool = _pool(cfg, corpus)
    gen = NegativeGenerator(pool, _kinds(cfg["neg_kinds"]), cfg["threshold"], not cfg.get("lenient_state"))
    rng = np.random.default_rng(cfg["seed"])
    negatives = []
    for sample in _samples(cfg["samples"]):
        made = gen(sample, rng, cfg["per_sample"])
        if len(made) < cfg["per_sample"]:
            log.info("%s: %d of %d negatives", sample.procedure.procedure_id, len(made), cfg["per_sample"])
        negatives.extend(made)
    write_negatives(negatives, out / "negatives.jsonl")
    return ["negatives.jsonl"]


def cmd_train(cfg, out: Path):
    from .evaluator import EvaluatorConfig, save_model, train, write_loss_log
    from .negatives import NegativeGenerator

    corpus = _load_corpus(cfg)
    pool = _pool(cfg, corpus)
    positives = _samples(cfg["train"])
    dim = corpus.dim
    config = EvaluatorConfig(
        feature_dim=dim,
        model_dim=cfg["dim"] or dim,
        layers=cfg["layers"],
        heads=cfg["heads"],
        learning_rate=cfg["lr"],
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
    )
    gen = NegativeGenerator(pool, _kinds(cfg["neg_kinds"]), cfg["threshold"])
    result = train(config, corpus, positives, gen)
    save_model(result.model, out / "model.json")
    write_loss_log(result.losses, out / "loss.csv")
    return ["model.json", "model.bin", "loss.csv"]


def cmd_stitch(cfg, out: Path):
    from .evaluator import candidate_logits, load_model, rank_by_scores, _sigmoid
    from .mapping import build_mapping
    from .setcover import setcover_candidates

    corpus = _load_corpus(cfg)
    pool = _pool(cfg, corpus)
    model = load_model(cfg["model"])
    with open(out / "stitched.jsonl", "w", encoding="utf-8") as fh:
        for q in load_procedures(cfg["query"]):
            mapping = build_mapping(q, pool, cfg["threshold"], cfg["top_s"])
            cands = setcover_candidates(mapping, cfg["top_k"])
            if not cands:
                log.warning("%s: %s", q.procedure_id, NoCandidates("no complete candidate"))
                fh.write(json.dumps({"procedure_id": q.procedure_id, "clips": None, "error": "no candidates"}) + "\n")
                continue
            logits = candidate_logits(model, q, cands, corpus)
            best = rank_by_scores(logits)[0]
            record = cands[best].to_json()
            record["score"] = round(float(_sigmoid(logits[best : best + 1])[0]), 6)
            record["n_candidates"] = len(cands)
            fh.write(json.dumps(record) + "\n")
    return ["stitched.jsonl"]


def cmd_eval(cfg, out: Path):
    from .evaluator import EvaluatorConfig, load_model
    from .harness import build_all_distractors, run_ablation, run_experiment, write_ablation, write_ranks, write_report

    corpus = _load_corpus(cfg)
    pool = _pool(cfg, corpus)
    test = _samples(cfg["test"])
    sets = build_all_distractors(
        test, corpus, pool, cfg["seed"], cfg["distractors"], cfg["threshold"], cfg["top_s"]
    )
    with open(out / "distractors.jsonl", "w", encoding="utf-8") as fh:
        for ds in sets:
            fh.write(json.dumps(ds.to_json()) + "\n")
    written = ["distractors.jsonl"]
    if cfg.get("ablation"):
        if not cfg.get("train"):
            raise UsageError("--ablation needs --train")
        rows = [_kinds(r) for r in cfg["ablation"].split(";") if r.strip()]
        config = EvaluatorConfig(
            feature_dim=corpus.dim,
            model_dim=cfg["dim"] or corpus.dim,
            learning_rate=cfg["lr"],
            batch_size=cfg["batch_size"],
            epochs=cfg["epochs"],
        )
        result = run_ablation(
            config, corpus, pool, _samples(cfg["train"]), sets, rows,
            _ints(cfg["ablation_seeds"], "--ablation-seeds"), cfg["threshold"],
        )
        write_ablation(result, out / "ablation.csv")
        written.append("ablation.csv")
    model = load_model(cfg["model"]) if cfg.get("model") else None
    reports = run_experiment(sets, corpus, model)
    write_report(reports, out / "report.csv")
    write_ranks(reports, out / "ranks.csv")
    return written + ["report.csv", "ranks.csv"]


def cmd_capture_curve(cfg, out: Path):
    from .harness import capture_curve, capture_svg, write_capture_curve

    corpus = _load_corpus(cfg)
    pool = _pool(cfg, corpus)
    rows = capture_curve(
        _samples(cfg["test"]), pool, _ints(cfg["ks"], "--ks"), cfg["seed"], cfg["threshold"], cfg["top_s"]
    )
    write_capture_curve(rows, out / "capture_curve.csv")
    written = ["capture_curve.csv"]
    if cfg.get("svg"):
        capture_svg(rows, out / "capture_curve.svg")
        written.append("capture_curve.svg")
    return written


def cmd_synth(cfg, out: Path):
    from .synth import SynthConfig, make_world, real_video_samples

    config = SynthConfig(n_videos=cfg["videos"], seed=cfg["seed"], threshold=cfg["threshold"])
    if cfg["dim"]:
        config.dim = cfg["dim"]
    world = make_world(config, cfg["train_queries"], cfg["test_queries"])
    corpus_dir = Path(cfg["corpus_dir"])
    write_corpus(world.corpus, corpus_dir)
    write_pool(world.pool, out / "pool.jsonl")
    qdir = out / "queries"
    write_samples(world.train, qdir / "train.jsonl")
    write_samples(world.test, qdir / "test.jsonl")
    write_samples(real_video_samples(world, np.random.default_rng(cfg["seed"] + 1)), qdir / "train_videos.jsonl")
    return ["pool.jsonl", "queries/train.jsonl", "queries/test.jsonl", "queries/train_videos.jsonl"]


COMMANDS = {
    "ingest": cmd_ingest,
    "localize": cmd_localize,
    "map": cmd_map,
    "covers": cmd_covers,
    "gen-data": cmd_gen_data,
    "gen-negatives": cmd_gen_negatives,
    "train": cmd_train,
    "stitch": cmd_stitch,
    "eval": cmd_eval,
    "capture-curve": cmd_capture_curve,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve(args)
        import torch

        torch.set_num_threads(max(1, int(cfg["threads"])))
        out = Path(cfg["out_dir"])
        out.mkdir(parents=True, exist_ok=True)
        written = COMMANDS[args.command](cfg, out)
        record = {k: v for k, v in cfg.items() if k != "verbose"}
        record["outputs"] = written
        record["version"] = __version__
        _write_json(out / "run_config.json", record)
        return EXIT_OK
    except UsageError as exc:
        print(f"stitchdemo {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, TrainingDiverged, FileNotFoundError) as exc:
        print(f"stitchdemo {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ExternalServiceError as exc:
        print(f"stitchdemo {args.command}: external service error: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL


if __name__ == "__main__":
    sys.exit(main())
