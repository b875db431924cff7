"""Command line pipeline: synth, build-bank, train, eval, bench.

Exit codes: 0 success, 1 usage, 2 data validation, 3 numerical failure.
Every run writes ``run_manifest.json`` into its ``--out`` directory.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .embed_io import (
    load_bank,
    load_batch,
    load_params,
    read_embeddings,
    read_manifest,
    read_reference_index,
    save_bank,
    save_params,
)
from .evaluation import (
    bench_scoring,
    evaluate,
    per_category_top1,
    write_pca_csv,
    write_per_category_csv,
)
from .exceptions import ConfigError, DataValidationError, MMProtoError, NumericalError
from .heads import MODES, score
from .prototypes import DEFAULT_SIGMA_TABLE, SigmaTable, build_bank
from .synth import WorldConfig, generate_world, world_to_inputs
from .training import TrainConfig, fit, init_params

log = logging.getLogger("mmproto")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _digest(path):
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(f.name.encode("utf-8"))
        h.update(f.read_bytes())
    return h.hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_json(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} col {exc.colno} ({exc.msg})")


def _require(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")


def _batch_files(stem):
    stem = Path(stem)
    return [stem.with_name(stem.name + ".pemb"), stem.with_name(stem.name + ".labels.json")]


def _finish(args, out, config, inputs, outputs):
    manifest = {
        "subcommand": args.command,
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": {str(p): _digest(p) for p in outputs},
        "seed": args.seed,
        "threads": args.threads,
        "tool_version": __version__,
    }
    _write_json(Path(out) / "run_manifest.json", manifest)
    return manifest


def cmd_synth(args):
    _require(args.config)
    raw = _load_json(args.config)
    if not isinstance(raw, dict):
        raise ConfigError(f"{args.config}: world config must be a JSON object")
    cfg = WorldConfig.from_json({**raw, "seed": args.seed})
    out = Path(args.out)
    paths = world_to_inputs(generate_world(cfg), out)
    _write_json(out / "world_config.json", cfg.to_json())
    _finish(args, out, cfg.to_json(), [args.config], list(paths.values()))
    log.info("wrote synthetic world with %d categories to %s", cfg.n_categories, out)


def cmd_build_bank(args):
    _require(args.descriptions, args.refs, args.ref_embeddings, args.manifest, args.sigma_table)
    table = SigmaTable.load(args.sigma_table) if args.sigma_table else DEFAULT_SIGMA_TABLE
    manifest = read_manifest(args.manifest)
    descriptions = read_embeddings(args.descriptions)
    ref_embeddings = read_embeddings(args.ref_embeddings)
    refs, warnings = read_reference_index(args.refs, ref_embeddings, manifest)
    if warnings:
        log.warning("%d reference sets were re-sorted", warnings)
    bank = build_bank(descriptions, refs, ref_embeddings, manifest, table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_bank(bank, out / "bank.pbnk")
    inputs = [args.descriptions, args.refs, args.ref_embeddings, args.manifest]
    if args.sigma_table:
        inputs.append(args.sigma_table)
    config = {"sigma_table": table.to_json(), "sigma_table_hash": table.digest(),
              "reorder_warnings": warnings}
    _finish(args, out, config, inputs, [out / "bank.pbnk"])


def cmd_train(args):
    inputs = [args.bank, args.config, *_batch_files(args.train)]
    if args.heldout:
        inputs += _batch_files(args.heldout)
    _require(*inputs)
    raw = _load_json(args.config)
    tau = raw.pop("tau", None) if isinstance(raw, dict) else None
    normed = raw.pop("conventional_normalized", True) if isinstance(raw, dict) else True
    if isinstance(raw, dict):
        raw["seed"] = args.seed
    cfg = TrainConfig.from_json(raw)
    bank = load_bank(args.bank)
    train = load_batch(args.train)
    heldout = load_batch(args.heldout) if args.heldout else None
    init = init_params(bank.n_categories, train.X.shape[1], bank.T.shape[1], bank.V.shape[1],
                       seed=args.seed, conventional_normalized=normed,
                       **({} if tau is None else {"tau": tau}))
    params, trace = fit(init, bank, [train], cfg, heldout)
    out = Path(args.out)
    save_params(params, out / "params", {"mode": cfg.mode, "heads": list(cfg.active_heads)})
    _write_json(out / "trace.json", trace)
    config = {**cfg.to_json(), "tau": params.tau, "conventional_normalized": normed}
    _finish(args, out, config, inputs, [out / "params", out / "trace.json"])
    log.info("final loss %.6f", trace[-1]["loss"])


def cmd_eval(args):
    inputs = [args.bank, args.params, *_batch_files(args.batch)]
    _require(*inputs)
    bank = load_bank(args.bank)
    params, meta = load_params(args.params)
    batch = load_batch(args.batch)
    report = evaluate(params, bank, batch, args.mode, seed=args.seed, n_clusters=args.clusters)
    if meta.get("mode") and meta["mode"] != args.mode:
        report.notes.append(f"params trained in {meta['mode']} mode")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "report.json"]
    _write_json(out / "report.json", report.to_json())
    if args.per_category_csv:
        s = score(params, bank, batch.X, args.mode)
        write_per_category_csv(per_category_top1(s, batch.labels, bank.n_categories),
                               out / "per_category.csv")
        outputs.append(out / "per_category.csv")
    if args.pca_csv:
        write_pca_csv(bank.T, out / "pca_text.csv")
        write_pca_csv(bank.V, out / "pca_visual.csv")
        outputs += [out / "pca_text.csv", out / "pca_visual.csv"]
    _finish(args, out, {"mode": args.mode, "clusters": args.clusters}, inputs, outputs)
    log.info("top1 %.4f top5 %.4f", report.top1, report.top5)


def cmd_bench(args):
    report = bench_scoring(args.categories, args.dims, args.objects, args.seed,
                           threads=args.threads, repeats=args.repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "bench.json", report)
    config = {"categories": args.categories, "dims": args.dims, "objects": args.objects,
              "repeats": args.repeats}
    _finish(args, out, config, [], [])
    log.info("%.3f s for %d objects", report["wall_time_s"], args.objects)


def build_parser():
    parser = _Parser(prog="mmproto", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed_required=True):
        p.add_argument("--seed", type=int, required=seed_required, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="generate a synthetic embedding world")
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-bank", help="build a prototype bank")
    p.add_argument("--descriptions", required=True)
    p.add_argument("--refs", required=True, help="reference index (JSON lines)")
    p.add_argument("--ref-embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sigma-table")
    common(p, seed_required=False)
    p.set_defaults(func=cmd_build_bank)

    p = sub.add_parser("train", help="train conventional weights and projections")
    p.add_argument("--bank", required=True)
    p.add_argument("--train", required=True, help="batch stem (<stem>.pemb + <stem>.labels.json)")
    p.add_argument("--heldout")
    p.add_argument("--config", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate trained params on a batch")
    p.add_argument("--bank", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--batch", required=True)
    p.add_argument("--mode", choices=MODES, default="supervised")
    p.add_argument("--clusters", type=int)
    p.add_argument("--per-category-csv", action="store_true")
    p.add_argument("--pca-csv", action="store_true")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time supervised-ensemble scoring")
    p.add_argument("--categories", type=int, default=13204)
    p.add_argument("--dims", type=int, default=768)
    p.add_argument("--objects", type=int, default=1000)
    p.add_argument("--repeats", type=int, default=1)
    common(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("MMPROTO_VERBOSITY", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.seed < 0:
            raise UsageError("--seed must be >= 0")
        with threadpool_limits(args.threads):
            args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except MMProtoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
