"""Command-line front end.

Every subcommand reads one JSON config (optional; defaults otherwise),
applies dotted ``key=value`` overrides, validates, and only then starts
work.  Artifacts land in ``--output-dir`` together with the resolved config.

Exit codes: 0 success, 1 validation error or bad usage, 2 runtime error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import plotting
from .clustering import cluster_report, dbscan
from .config import dump_config, load_config
from .dataset import generate_synthetic_pair, load_dataset, read_truth, save_dataset, write_truth
from .errors import MGRError, ValidationError
from .mgr import load_params, save_params
from .pipeline import (
    ADAPTING_VARIANTS,
    adapt,
    class_indices,
    evaluate_target,
    make_params,
    mega_features,
    run_variant,
    train_source,
)

log = logging.getLogger("mgrgcl")

SOURCE_MANIFEST = "source.manifest.json"
TARGET_MANIFEST = "target.manifest.json"
TARGET_TRUTH = "target.truth.json"
SOURCE_PARAMS = "source_params.mgrp"
ADAPTED_PARAMS = "adapted_params.mgrp"
REPORT = "report.jsonl"
RESOLVED_CONFIG = "resolved_config.json"

ABLATION_ORDER = ("full", "one_iter", "mgr_only", "mgr_no_h", "mgr_no_hv")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for runtime errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    common.add_argument("--output-dir", default="out", help="where artifacts are written (default: out)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common.add_argument("overrides", nargs="*", metavar="KEY=VALUE",
                        help="dotted config overrides, e.g. run.clustering.eps=0.3")

    parser = _Parser(prog="mgrgcl", description="Multi-granularity features with group contrastive adaptation.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    sub.add_parser("synth", parents=[common], help="generate the synthetic source/target pair")

    p = sub.add_parser("train-source", parents=[common], help="supervised training on the source domain")
    p.add_argument("--source", help=f"source manifest (default: OUTPUT_DIR/{SOURCE_MANIFEST})")

    p = sub.add_parser("adapt", parents=[common], help="clustering + group contrastive rounds on the target")
    p.add_argument("--target", help=f"target manifest (default: OUTPUT_DIR/{TARGET_MANIFEST})")
    p.add_argument("--params", help=f"starting checkpoint (default: OUTPUT_DIR/{SOURCE_PARAMS})")
    p.add_argument("--truth", help="target identities for the final evaluation line (optional)")

    p = sub.add_parser("eval", parents=[common], help="CMC/mAP of a checkpoint on a labelled manifest")
    p.add_argument("--manifest", help=f"manifest to evaluate (default: OUTPUT_DIR/{TARGET_MANIFEST})")
    p.add_argument("--truth", help=f"identity file; omit to use the manifest labels (default tries OUTPUT_DIR/{TARGET_TRUTH})")
    p.add_argument("--params", help="checkpoint (default: adapted, else source, in OUTPUT_DIR)")

    p = sub.add_parser("cluster", parents=[common], help="DBSCAN report for a checkpoint on a manifest")
    p.add_argument("--manifest", help=f"manifest to cluster (default: OUTPUT_DIR/{TARGET_MANIFEST})")
    p.add_argument("--params", help="checkpoint (default: adapted, else source, in OUTPUT_DIR)")
    p.add_argument("--eps", type=float, help="shorthand for run.clustering.eps")
    p.add_argument("--min-pts", type=int, help="shorthand for run.clustering.min_pts")
    p.add_argument("--metric", choices=("euclidean", "cosine_distance"), help="shorthand for run.clustering.metric")

    sub.add_parser("run-all", parents=[common], help="synth, source training, adaptation and evaluation")
    sub.add_parser("ablation", parents=[common], help="run every variant on one synthetic pair")
    return parser


# -- helpers -----------------------------------------------------------------

def _emit(doc):
    print(json.dumps(doc))


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _write_jsonl(path, docs):
    with open(path, "w") as fh:
        for doc in docs:
            fh.write(json.dumps(doc) + "\n")


def _default(value, out, name):
    return value if value is not None else os.path.join(out, name)


def _default_params(value, out):
    if value is not None:
        return value
    adapted = os.path.join(out, ADAPTED_PARAMS)
    return adapted if os.path.exists(adapted) else os.path.join(out, SOURCE_PARAMS)


def _protocol(cfg):
    return replace(cfg.eval, metric=cfg.run.clustering.metric)


def _report_lines(reports, direct, final, timing):
    lines = []
    if direct is not None:
        lines.append({"type": "direct", **direct.to_json()})
    lines.extend(r.to_json(timing) for r in reports)
    if final is not None:
        lines.append({"type": "result", **final.to_json()})
    return lines


def _source_log_lines(history):
    return [{"epoch": h["epoch"], "lr": h["lr"], "loss": h["loss"]} for h in history]


# -- subcommands -------------------------------------------------------------

def cmd_synth(cfg, args, out):
    pair = generate_synthetic_pair(cfg.synth, "source.mgrf", "target.mgrf")
    save_dataset(pair.source, os.path.join(out, SOURCE_MANIFEST))
    save_dataset(pair.target, os.path.join(out, TARGET_MANIFEST))
    write_truth(os.path.join(out, TARGET_TRUTH), pair.target.manifest, pair.target_identities)
    _emit({"source_samples": len(pair.source), "target_samples": len(pair.target),
           "map_shape": list(cfg.synth.map_shape)})


def cmd_train_source(cfg, args, out):
    source = load_dataset(_default(args.source, out, SOURCE_MANIFEST))
    if (source.identities < 0).any():
        raise ValidationError("source manifest: every record needs an identity")
    _, num_classes = class_indices(source.identities)
    params = make_params(cfg.run, source.manifest.map_shape[0], num_classes)
    params, history = train_source(source, params, cfg.run)
    save_params(os.path.join(out, SOURCE_PARAMS), params)
    _write_jsonl(os.path.join(out, "source_log.jsonl"), _source_log_lines(history))
    if cfg.report.figures:
        plotting.plot_source_loss(history, os.path.join(out, "source_loss.png"))
    _emit({"epochs": len(history), "final_loss": history[-1]["loss"] if history else None,
           "num_parameters": params.num_parameters()})


def cmd_adapt(cfg, args, out):
    target = load_dataset(_default(args.target, out, TARGET_MANIFEST))
    params = load_params(_default(args.params, out, SOURCE_PARAMS))
    truth = read_truth(args.truth, target.manifest) if args.truth else None
    prot = _protocol(cfg)
    norm, center = cfg.run.normalize_features, cfg.run.center_features
    direct = evaluate_target(target, truth, params, prot, norm, center) if truth is not None else None
    params, reports = adapt(target, params, cfg.run)
    final = evaluate_target(target, truth, params, prot, norm, center) if truth is not None else None
    save_params(os.path.join(out, ADAPTED_PARAMS), params)
    _write_jsonl(os.path.join(out, REPORT), _report_lines(reports, direct, final, cfg.report.timing))
    if cfg.report.figures:
        plotting.plot_rounds(reports, os.path.join(out, "rounds.png"))
    _emit({"rounds": len(reports), **({"mAP": final.mAP} if final is not None else {})})


def _eval_labels(args, out, dataset):
    if args.truth is not None:
        return read_truth(args.truth, dataset.manifest)
    ids = dataset.identities
    if (ids >= 0).all():
        return ids
    fallback = os.path.join(out, TARGET_TRUTH)
    if os.path.exists(fallback):
        return read_truth(fallback, dataset.manifest)
    raise ValidationError("truth: manifest is unlabelled and no --truth file was given")


def cmd_eval(cfg, args, out):
    dataset = load_dataset(_default(args.manifest, out, TARGET_MANIFEST))
    labels = _eval_labels(args, out, dataset)
    params = load_params(_default_params(args.params, out))
    result = evaluate_target(dataset, labels, params, _protocol(cfg),
                             cfg.run.normalize_features, cfg.run.center_features)
    _write_json(os.path.join(out, "eval.json"), result.to_json())
    _emit(result.to_json())


def cmd_cluster(cfg, args, out):
    dataset = load_dataset(_default(args.manifest, out, TARGET_MANIFEST))
    params = load_params(_default_params(args.params, out))
    feats, _ = mega_features(dataset.sample_maps(), params, cfg.run.normalize_features, cfg.run.center_features)
    report = cluster_report(dbscan(feats, cfg.run.clustering))
    _write_json(os.path.join(out, "cluster.json"), report)
    _emit(report)


def cmd_run_all(cfg, args, out):
    pair = generate_synthetic_pair(cfg.synth, "source.mgrf", "target.mgrf")
    save_dataset(pair.source, os.path.join(out, SOURCE_MANIFEST))
    save_dataset(pair.target, os.path.join(out, TARGET_MANIFEST))
    write_truth(os.path.join(out, TARGET_TRUTH), pair.target.manifest, pair.target_identities)

    res = run_variant(cfg.run, pair, cfg.eval)
    name = ADAPTED_PARAMS if cfg.run.variant in ADAPTING_VARIANTS else SOURCE_PARAMS
    save_params(os.path.join(out, name), res.params)
    _write_jsonl(os.path.join(out, "source_log.jsonl"), _source_log_lines(res.source_log))
    _write_jsonl(os.path.join(out, REPORT), _report_lines(res.reports, res.direct, res.final, cfg.report.timing))
    if cfg.report.figures:
        plotting.plot_source_loss(res.source_log, os.path.join(out, "source_loss.png"))
        if res.reports:
            plotting.plot_rounds(res.reports, os.path.join(out, "rounds.png"))
    _emit({"variant": res.variant, "direct_mAP": res.direct.mAP, "final_mAP": res.final.mAP,
           "final_rank1": res.final.cmc[min(res.final.cmc)]})


def ablation(cfg, pair=None):
    """Run every variant on one synthetic pair with a shared seed.

    Returns rows ``{"variant", "mAP", "rank1"}`` in :data:`ABLATION_ORDER`.
    """
    if pair is None:
        pair = generate_synthetic_pair(cfg.synth, "source.mgrf", "target.mgrf")
    rows = []
    for variant in ABLATION_ORDER:
        log.info("ablation: running %s", variant)
        res = run_variant(replace(cfg.run, variant=variant), pair, cfg.eval)
        rows.append({"variant": variant, "mAP": res.final.mAP, "rank1": res.final.cmc.get(1, float("nan"))})
    return rows


def format_table(rows):
    lines = [f"{'variant':<10} {'mAP':>7} {'rank1':>7}"]
    lines += [f"{r['variant']:<10} {100 * r['mAP']:7.2f} {100 * r['rank1']:7.2f}" for r in rows]
    return "\n".join(lines)


def cmd_ablation(cfg, args, out):
    rows = ablation(cfg)
    _write_json(os.path.join(out, "ablation.json"),
                {"seed": cfg.run.seed, "synth_seed": cfg.synth.seed, "columns": ["mAP", "rank1"], "rows": rows})
    table = format_table(rows)
    with open(os.path.join(out, "ablation.txt"), "w") as fh:
        fh.write(table + "\n")
    if cfg.report.figures:
        plotting.plot_ablation(rows, os.path.join(out, "ablation.png"))
    print(table)


COMMANDS = {
    "synth": cmd_synth,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "cluster": cmd_cluster,
    "run-all": cmd_run_all,
    "ablation": cmd_ablation,
}


def _overrides(args):
    items = list(args.overrides)
    for flag, key in (("eps", "run.clustering.eps"), ("min_pts", "run.clustering.min_pts"),
                      ("metric", "run.clustering.metric")):
        value = getattr(args, flag, None)
        if value is not None:
            items.append(f"{key}={json.dumps(value)}")
    return items


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
    except (ValidationError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1

    out = args.output_dir
    try:
        os.makedirs(out, exist_ok=True)
        dump_config(cfg, os.path.join(out, RESOLVED_CONFIG))
        COMMANDS[args.command](cfg, args, out)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (MGRError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
