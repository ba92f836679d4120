"""Command-line entry point: synth, prepare, train, eval, probe, ablate.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import yaml

from .checkpoint import CheckpointError, CheckpointMismatch
from .config import ConfigError, ExperimentConfig
from .corpus import (
    CorpusError,
    build_corpus,
    corpus_statistics,
    format_statistics,
    generate_synthetic,
    ingest_events,
    load_prepared,
    make_splits,
    save_prepared,
    write_events,
)
from .evaluator import METRICS, EvaluationError, MetricsReport, evaluate
from .graph import GraphError, ItemGraphs
from .spectrum import ProbeSpec, probe_spectrum
from .trainer import ABLATION_VARIANTS, TrainingError, fit, load_checkpoint, save_checkpoint

logger = logging.getLogger("cdsr")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
PARTITIONS = ("val", "test")


class UsageError(Exception):
    pass


def _seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from exc


def _config(args, extra: dict | None = None) -> ExperimentConfig:
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = yaml.safe_load(raw)
    overrides.update(extra or {})
    return ExperimentConfig.load(getattr(args, "config", None), overrides)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _config(args, {"synth.n_users": args.users, "synth.seed": args.seed, "synth.transfer_strength": args.transfer})
    out = cfg.output_dir(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    events = generate_synthetic(cfg.synthetic_spec())
    write_events(events, out)
    print(f"wrote {len(events)} events to {out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = _config(args, {"data.events": args.events, "data.prepared": args.out})
    data = cfg["data"]
    if not data["events"]:
        raise UsageError("prepare needs an event file (--events or data.events)")
    src = Path(data["events"])
    if not src.is_file():
        raise UsageError(f"event file {src} does not exist")
    events, rejected = ingest_events(src, data["domain_map"])
    for line_no, reason in rejected[:10]:
        logger.warning("line %d rejected: %s", line_no, reason)
    vocab, sequences = build_corpus(events, data["min_interactions"], data["min_domain_len"])
    split = make_splits(sequences, data["split_seed"])
    out = cfg.output_dir(data["prepared"] or "prepared")
    save_prepared(out, vocab, split)
    ItemGraphs.build(split.train, vocab.n_x, vocab.n_y, cfg["graph"]["window"]).save(out)
    stats = corpus_statistics(vocab, sequences, split)
    stats["rejected_lines"] = len(rejected)
    text = format_statistics(stats)
    (out / "stats.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _prepared_dir(cfg, explicit) -> Path:
    path = explicit or cfg["data"]["prepared"]
    if not path:
        raise UsageError("no prepared data directory (--data or data.prepared)")
    path = cfg.output_dir(path)
    if not (path / "vocab.tsv").is_file():
        raise UsageError(f"{path} is not a prepared corpus directory; run prepare first")
    return path


def _median_report(reports: list[MetricsReport], partition: str) -> MetricsReport:
    merged = MetricsReport(partition)
    for dom in sorted(set().union(*(r.domains for r in reports))):
        rows = [r.domains[dom] for r in reports if dom in r.domains]
        merged.domains[dom] = {m: float(statistics.median(row[m] for row in rows)) for m in METRICS}
        merged.domains[dom]["n_instances"] = rows[0]["n_instances"]
    return merged


def train_once(hp, data_dir: Path, out: Path, echo=print) -> dict:
    """Fit, save the best checkpoint plus history and metrics; return {partition: report}."""
    vocab, split = load_prepared(data_dir)
    graphs = ItemGraphs.load(data_dir)
    torch.set_num_threads(1)

    def progress(row):
        logger.info("epoch %d total %.4f val_mrr %.4f", row["epoch"], row["total"], row["val_mrr"])

    result = fit(vocab, split, hp, graphs, progress)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "history.jsonl", "w", encoding="utf-8") as fh:
        for row in result.history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    reports = {part: evaluate(result.model, split.eval_instances, part, hp.max_len) for part in PARTITIONS}
    for report in reports.values():
        report.save(out)
    save_checkpoint(out / "checkpoint", result.state, hp, {p: r.to_dict() for p, r in reports.items()}, data_dir.resolve())
    echo(f"{out}: best epoch {result.best_epoch}, val MRR {reports['val'].mrr():.4f}, test MRR {reports['test'].mrr():.4f}")
    return reports


def run_seeds(hp, data_dir: Path, out: Path, seeds: list[int] | None) -> dict:
    if not seeds:
        return train_once(hp, data_dir, out)
    per_seed = [train_once(replace(hp, seed=s), data_dir, out / f"seed_{s}") for s in seeds]
    medians = {}
    for part in PARTITIONS:
        median = _median_report([r[part] for r in per_seed], part)
        median.partition = f"{part}_median"
        median.save(out)
        medians[part] = median
    (out / "seeds.json").write_text(
        json.dumps({"seeds": seeds, "test_mrr": [r["test"].mrr() for r in per_seed]}, indent=2), encoding="utf-8"
    )
    print(f"{out}: median test MRR over seeds {seeds}: {medians['test'].mrr():.4f}")
    return medians


def cmd_train(args) -> int:
    extra = {"train.seed": args.seed, "train.max_epochs": args.epochs, "ablation.variant": args.ablate}
    cfg = _config(args, extra)
    data_dir = _prepared_dir(cfg, args.data)
    out = cfg.output_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump(), encoding="utf-8")
    run_seeds(cfg.hyperparams(), data_dir, out, _seeds(args.seeds))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args, {"train.seed": args.seed, "train.max_epochs": args.epochs})
    data_dir = _prepared_dir(cfg, args.data)
    out = cfg.output_dir(args.out)
    letters = [v.strip().upper() for v in args.variants.split(",") if v.strip()]
    for letter in letters:
        if letter not in ABLATION_VARIANTS:
            raise UsageError(f"unknown ablation variant {letter!r}; expected letters from {sorted(ABLATION_VARIANTS)}")
    base = cfg.hyperparams()
    seeds = _seeds(args.seeds)
    rows = []
    for letter in letters:
        reports = run_seeds(base.with_variant(letter), data_dir, out / f"variant_{letter}", seeds)
        for dom, vals in sorted(reports["test"].domains.items()):
            rows.append({"variant": letter, "domain": dom, **{m: vals[m] for m in METRICS}})
    with open(out / "ablation_test.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, ["variant", "domain", *METRICS])
        writer.writeheader()
        writer.writerows(rows)
    for row in rows:
        print(f"{row['variant']} {row['domain']} MRR {row['MRR']:.4f} NDCG@10 {row['NDCG@10']:.4f}")
    return EXIT_OK


def _load(checkpoint: Path, data: str | None):
    graphs = ItemGraphs.load(data) if data else None
    state, hp, manifest = load_checkpoint(checkpoint, graphs)
    data_dir = Path(data) if data else Path(manifest["data_dir"])
    return state, hp, manifest, data_dir


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not (checkpoint / "manifest.json").is_file():
        raise UsageError(f"{checkpoint} is not a checkpoint directory")
    state, hp, _, data_dir = _load(checkpoint, args.data)
    vocab, split = load_prepared(data_dir)
    if (vocab.n_x, vocab.n_y) != (state.model.n_x, state.model.n_y):
        raise CheckpointMismatch("checkpoint vocabulary does not match the prepared data")
    out = Path(args.out) if args.out else checkpoint
    for part in args.partition.split(","):
        report = evaluate(state.model, split.eval_instances, part.strip(), hp.max_len)
        report.save(out)
        print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_probe(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not (checkpoint / "manifest.json").is_file():
        raise UsageError(f"{checkpoint} is not a checkpoint directory")
    try:
        spec = ProbeSpec.parse(args.group, args.coefficient)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    state, hp, manifest, data_dir = _load(checkpoint, args.data)
    model = state.model
    with torch.no_grad():
        emb = model.propagated().mixed.double().numpy()
    try:
        probed = probe_spectrum(emb, spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model.global_override = torch.from_numpy(probed).to(model.embedding.dtype)
    out = Path(args.out)
    save_checkpoint(out, state, hp, {"probe": {"group": args.group, "coefficient": args.coefficient}}, data_dir)
    # post values are measured along the original right singular vectors, so rows stay aligned
    _, pre, vt = np.linalg.svd(emb, full_matrices=False)
    post = np.linalg.norm(probed @ vt.T, axis=0)
    with open(out / "spectrum.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "pre", "post", "in_group"])
        for i, (a, b) in enumerate(zip(pre, post), start=1):
            writer.writerow([i, repr(float(a)), repr(float(b)), int(spec.first <= i <= spec.last)])
    print(f"wrote probed checkpoint to {out} (group {spec.first}-{spec.last}, coefficient {spec.coefficient})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdsr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")

    p = sub.add_parser("synth", help="write a planted-correlation synthetic event file")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int)
    p.add_argument("--transfer", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="filter, split and build graphs from an event file")
    common(p)
    p.add_argument("--events")
    p.add_argument("--out")
    p.set_defaults(func=cmd_prepare)

    for name, func, help_ in (("train", cmd_train, "fit a model"), ("ablate", cmd_ablate, "fit ablation variants")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--data", help="prepared corpus directory")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--seeds", help="comma-separated seeds; writes median-of-seeds reports")
        p.add_argument("--epochs", type=int)
        if name == "train":
            p.add_argument("--ablate", help="variant letter B-G, or 'all' for B")
        else:
            p.add_argument("--variants", default="A,B,C,D,E,F,G")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="prepared directory (defaults to the one recorded in the checkpoint)")
    p.add_argument("--partition", default="val,test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="rescale a group of singular values of the global embedding table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--group", required=True, help="1-based range such as 1-5")
    p.add_argument("--coefficient", type=float, required=True)
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointMismatch, CorpusError, GraphError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
