"""Command line entry point: ``sitsx <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 diverged.
Every run-level flag maps onto a key of the INI run config; explicit flags
override values read from ``--config``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import detection, harness, reporting
from .dataio import PatchDataset
from .errors import CheckpointMismatch, ConfigError, DataError, DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

# flag destination -> RunConfig field
RUN_FLAGS = {
    "method": "method", "data": "data", "out": "out", "profile": "profile", "steps": "steps_used",
    "epochs": "epochs", "batch_size": "batch_size", "lr": "learning_rate", "weight_decay": "weight_decay",
    "warmup_epochs": "warmup_epochs", "seeds": "seeds", "lambda_contra": "lambda_contra",
    "mu_consist": "mu_consist", "lambda_reg": "lambda_reg", "reconstruction": "reconstruction",
    "tau_policy": "tau_policy", "eval_batch_size": "eval_batch_size", "head_hidden_dim": "head_hidden_dim",
    "pair_aggregation": "pair_aggregation", "diff_aggregation": "diff_aggregation",
}


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run config; flags override its keys")
    p.add_argument("--method", choices=harness.ALL_METHODS)
    p.add_argument("--data", help="dataset directory (relative paths honour SITSX_DATA_ROOT)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--profile", choices=sorted(harness.PROFILES))
    p.add_argument("--steps", type=int, choices=(2, 5), help="timesteps used by the baselines")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--seeds", type=_ints, help="comma-separated, e.g. 42,43,44")
    p.add_argument("--lambda-contra", type=float)
    p.add_argument("--mu-consist", type=float)
    p.add_argument("--lambda-reg", type=float)
    p.add_argument("--reconstruction", type=float)
    p.add_argument("--tau-policy", choices=("test-grid", "validation-selected"))
    p.add_argument("--eval-batch-size", type=int)
    p.add_argument("--head-hidden-dim", type=int)
    p.add_argument("--pair-aggregation", choices=("mean", "max"))
    p.add_argument("--diff-aggregation", choices=("mean", "concat"))


def run_config(args) -> harness.RunConfig:
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    overrides = {field: getattr(args, flag) for flag, field in RUN_FLAGS.items()}
    cfg = harness.RunConfig.from_ini(text, **overrides)
    if not cfg.data:
        raise ConfigError("no dataset given (--data or [run] data)")
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sitsx", description="Disaster detection on satellite image time series.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="render the procedural base corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=60)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("generate", help="generate a synthetic series dataset")
    p.add_argument("--corpus", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p1", type=float, default=0.5)
    p.add_argument("--p2", type=float, default=0.3)
    p.add_argument("--disaster-fraction", type=float, default=0.5)
    p.add_argument("--jitter-range", type=float, default=0.2)
    p.add_argument("--blur-sigma", type=float, default=2.0)
    p.add_argument("--cut-area-range", type=_floats, default=(0.2, 0.5))

    p = sub.add_parser("ingest", help="tile AOI scenes into a labelled patch dataset")
    p.add_argument("--aoi-root", required=True)
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label-threshold", type=float, default=0.5)

    for name, text in (("train", "train a method under every seed"),
                       ("ablate", "train the four loss-ablation rows")):
        _add_run_flags(sub.add_parser(name, help=text))

    p = sub.add_parser("grid-search", help="select lr / lambda / mu on validation AP")
    _add_run_flags(p)
    p.add_argument("--grid-lr", type=_floats)
    p.add_argument("--grid-lambda", type=_floats)
    p.add_argument("--grid-mu", type=_floats)
    p.add_argument("--grid-epochs", type=int, help="reduced epoch budget per grid point")

    for name, text in (("evaluate", "score a split and write a metrics report"),
                       ("detect", "apply a fixed threshold and write per-series decisions")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--change-maps", help="directory for per-AOI change-map PNGs")
        p.add_argument("--batch-size", type=int, default=128)
        if name == "evaluate":
            p.add_argument("--tau-policy", default="test-grid", choices=detection.TAU_POLICIES)
            p.add_argument("--tau", type=float)
            p.add_argument("--out", default="report.json")
        else:
            p.add_argument("--tau", type=float, required=True)
            p.add_argument("--out", default="detections.csv")

    p = sub.add_parser("report", help="aggregate run directories into tables and plots")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    return parser


# --- commands ------------------------------------------------------------------


def cmd_make_corpus(args) -> None:
    from .corpus import make_corpus

    make_corpus(args.out, per_class=args.per_class, size=args.size, seed=args.seed)
    print(f"corpus written to {args.out}")


def cmd_generate(args) -> None:
    from .ingest import load_base_corpus
    from .synthgen import GenParams, generate_dataset

    try:
        params = GenParams(p1=args.p1, p2=args.p2, jitter_range=args.jitter_range,
                           blur_sigma=args.blur_sigma, cut_area_range=tuple(args.cut_area_range))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not 0.0 <= args.disaster_fraction <= 1.0 or args.count < 10:
        raise ConfigError("--count must be >= 10 and --disaster-fraction in [0, 1]")
    corpus = load_base_corpus(args.corpus)
    manifest = generate_dataset(corpus, args.count, args.out, params_template=params,
                                master_seed=args.seed, disaster_fraction=args.disaster_fraction)
    print(json.dumps(manifest["split_counts"]))


def cmd_ingest(args) -> None:
    from .ingest import ingest_aois

    if args.patch_size < 1 or not 0.0 <= args.label_threshold <= 1.0:
        raise ConfigError("invalid --patch-size or --label-threshold")
    manifest = ingest_aois(args.aoi_root, args.out, args.patch_size, args.seed, args.label_threshold)
    print(json.dumps(manifest["split_counts"]))


def _print_aggregate(record: harness.RunRecord) -> None:
    print(f"{reporting.run_label(record.config)}: status {record.status}, "
          f"AP {reporting.format_mean_std(record.aggregate['ap'])}, "
          f"F1 {reporting.format_mean_std(record.aggregate['f1'])}")


def cmd_train(args) -> None:
    _print_aggregate(harness.train(run_config(args)))


def cmd_ablate(args) -> None:
    for row in harness.ablation_losses(run_config(args)):
        ap = reporting.format_mean_std(row["aggregate"]["ap"]) if row["status"] == "ok" else "/"
        print(f"{row['row']}: {row['status']} AP {ap}")


def cmd_grid_search(args) -> None:
    cfg = run_config(args)
    grid = {k: v for k, v in (("learning_rate", args.grid_lr), ("lambda_contra", args.grid_lambda),
                              ("mu_consist", args.grid_mu)) if v}
    result = harness.grid_search(cfg, grid, epochs=args.grid_epochs)
    Path(cfg.out, "best_config.ini").write_text(result.best.to_ini())
    print(f"best validation AP {result.best_val_ap:.4f} at "
          + ", ".join(f"{k}={getattr(result.best, k)}" for k in grid))


def _load_for_data(args):
    model, config, header = harness.load_model(args.checkpoint)
    dataset = PatchDataset(args.data)
    patch = int(dataset.manifest.get("patch_size", 64))
    if config.model.input_size != patch:
        raise CheckpointMismatch(f"checkpoint expects {config.model.input_size}px patches, dataset has {patch}px")
    return model, config.replace(eval_batch_size=args.batch_size), dataset


def cmd_evaluate(args) -> None:
    if (args.tau_policy == "fixed") != (args.tau is not None):
        raise ConfigError("--tau is required with, and only with, --tau-policy fixed")
    model, config, dataset = _load_for_data(args)
    report, scores, data = detection.evaluate(
        harness.make_scorer(config, model), dataset, args.split, args.tau_policy, args.tau,
        meta={"checkpoint": str(args.checkpoint), "method": config.method},
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), indent=1))
    detection.write_scores(out.with_name("scores.csv"), data.ids, scores, data.labels, data.disaster_types)
    if args.change_maps:
        decisions = [detection.threshold_decision(s, report.best_threshold) for s in scores]
        detection.render_change_maps(args.change_maps, data.aoi_ids, data.patch_coords, decisions)
    print(f"AP {report.ap:.4f} F1 {report.f1:.4f} (tau {report.best_threshold:.4f}, {report.tau_policy})")


def cmd_detect(args) -> None:
    model, config, dataset = _load_for_data(args)
    data = dataset.load(args.split)
    scores = harness.make_scorer(config, model)(data.images)
    results = detection.detect(scores, args.tau)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "score", "decision", "threshold"])
        for rec_id, r in zip(data.ids, results):
            w.writerow([rec_id, f"{r.mcd:.8f}", r.decision, r.threshold_used])
    if args.change_maps:
        detection.render_change_maps(args.change_maps, data.aoi_ids, data.patch_coords,
                                     [r.decision for r in results])
    print(f"{sum(r.decision for r in results)} of {len(results)} series flagged")


def cmd_report(args) -> None:
    for d in args.runs:
        if not (Path(d) / "run.json").is_file():
            raise DataError(f"{d} has no run.json")
    written = reporting.report(args.runs, args.out)
    print(f"wrote {len(written)} artefacts under {args.out}")


COMMANDS = {
    "make-corpus": cmd_make_corpus, "generate": cmd_generate, "ingest": cmd_ingest, "train": cmd_train,
    "ablate": cmd_ablate, "grid-search": cmd_grid_search, "evaluate": cmd_evaluate, "detect": cmd_detect,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
