"""Command-line entry point: ``cellgraph <subcommand> [--config FILE] [--key VALUE ...]``.

Every :class:`RunConfig` key has a ``--key`` flag (underscores become
hyphens); flags override values read from ``--config``.  Failures print one
JSON line ``{"error": ..., "message": ...}`` on stderr and exit 1; usage
errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig, config_keys
from .serialization import FORMAT_VERSION, write_json

log = logging.getLogger("cellgraph")


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration (overrides --config)")
    g.add_argument("--config", metavar="FILE", help="JSON configuration file")
    for name, default in config_keys():
        shown = json.dumps(default) if isinstance(default, list) else default
        g.add_argument("--" + name.replace("_", "-"), dest=name, metavar="V",
                       default=argparse.SUPPRESS, help=f"default: {shown}")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors")
    return p


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="cellgraph", description="Cell-graph risk classification pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, help_):
        return sub.add_parser(name, parents=[parent], help=help_, description=help_)

    add("synth", "render a synthetic cohort (images, masks, grades, manifest) under --data-root")
    p = add("train-cpc", "train the CPC encoder on patches of the manifest images")
    p.add_argument("--out", metavar="FILE", help="checkpoint path (default: OUTPUT_DIR/cpc.json)")
    p = add("build-graphs", "segmentation masks -> node features -> cell graphs")
    p.add_argument("--cpc-checkpoint", metavar="FILE", help="default: OUTPUT_DIR/cpc.json")
    p.add_argument("--graphs", metavar="DIR", help="output directory (default: OUTPUT_DIR/graphs)")
    p = add("train", "train one GNN with a validation hold-out")
    p.add_argument("--graphs", metavar="DIR", help="default: OUTPUT_DIR/graphs")
    p = add("eval", "evaluate a checkpoint on a graph directory")
    p.add_argument("--checkpoint", metavar="FILE", help="default: OUTPUT_DIR/model.json")
    p.add_argument("--graphs", metavar="DIR", help="default: OUTPUT_DIR/graphs")
    p = add("roc", "export ROC points of a checkpoint as TSV")
    p.add_argument("--checkpoint", metavar="FILE", help="default: OUTPUT_DIR/model.json")
    p.add_argument("--graphs", metavar="DIR", help="default: OUTPUT_DIR/graphs")
    p.add_argument("--out", metavar="FILE", help="default: OUTPUT_DIR/roc.tsv")
    p.add_argument("--drop-intermediate", action="store_true", help="omit collinear points")
    p = add("gradcheck", "run the finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--only", nargs="*", metavar="NAME", help="subset of check names")
    add("run-cv", "end to end: CPC, graphs, k-fold GNN training and evaluation")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} does not exist")
        values.update(RunConfig.load(path).to_dict())
    keys = {name for name, _ in config_keys()}
    values.update({k: v for k, v in vars(args).items() if k in keys})
    return RunConfig.from_dict(values)


def _out(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _graphs_dir(args, cfg) -> Path:
    return Path(args.graphs) if args.graphs else Path(cfg.output_dir) / "graphs"


def _checkpoint(args, cfg) -> Path:
    path = Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / "model.json"
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return path


def cmd_synth(args, cfg: RunConfig) -> int:
    if not cfg.data_root:
        raise ConfigError("synth needs --data-root (the directory to create)")
    rows = pipeline.write_synthetic_dataset(cfg.data_root, cfg.synth_per_class, cfg.synth_side,
                                            cfg.seed, cfg.workers)
    print(f"wrote {len(rows)} samples to {cfg.data_root}")
    return 0


def cmd_train_cpc(args, cfg: RunConfig) -> int:
    root = cfg.resolved_data_root()
    rows = pipeline.read_manifest(root / pipeline.MANIFEST, root)
    out = Path(args.out) if args.out else _out(cfg) / "cpc.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.train_cpc_stage(cfg, root, rows, out.parent, name=out.name)
    print(f"wrote {out}")
    return 0


def cmd_build_graphs(args, cfg: RunConfig) -> int:
    root = cfg.resolved_data_root()
    rows = pipeline.read_manifest(root / pipeline.MANIFEST, root)
    cpc = None
    if cfg.use_cpc:
        cpc = Path(args.cpc_checkpoint) if args.cpc_checkpoint else Path(cfg.output_dir) / "cpc.json"
        if not cpc.is_file():
            raise FileNotFoundError(f"CPC checkpoint {cpc} does not exist (run train-cpc or set --use-cpc false)")
    out = _graphs_dir(args, cfg)
    graphs = pipeline.build_graphs(cfg, root, rows, cpc, out)
    print(f"wrote {len(graphs)} graphs to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    graphs = pipeline.load_graph_dir(_graphs_dir(args, cfg))
    res = pipeline.train_single(cfg, graphs, _out(cfg))
    print(f"best epoch {res.best_epoch}, validation AUC {res.best_val_auc}; "
          f"wrote {Path(cfg.output_dir) / 'model.json'}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    params, scaler, _ = pipeline.load_model(_checkpoint(args, cfg))
    graphs = pipeline.load_graph_dir(_graphs_dir(args, cfg))
    fm, _ = pipeline.evaluate(params, scaler, graphs)
    metrics = pipeline.RunMetrics([fm])
    write_json(_out(cfg) / "eval.json", pipeline.metrics_document(cfg, metrics))
    print(metrics.table())
    return 0


def cmd_roc(args, cfg: RunConfig) -> int:
    params, scaler, _ = pipeline.load_model(_checkpoint(args, cfg))
    graphs = pipeline.load_graph_dir(_graphs_dir(args, cfg))
    probs = pipeline.predict(params, scaler, graphs)
    out = Path(args.out) if args.out else _out(cfg) / "roc.tsv"
    pipeline.roc_export(probs, [g.label for g in graphs], out, args.drop_intermediate)
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .checks import check_names, run_suite

    if args.only:
        unknown = sorted(set(args.only) - set(check_names()))
        if unknown:
            raise ConfigError(f"unknown checks: {', '.join(unknown)}")
    results = run_suite(args.seeds, args.only, log=print)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_run_cv(args, cfg: RunConfig) -> int:
    metrics = pipeline.run_cv(cfg)
    print(metrics.table())
    print(f"wrote {Path(cfg.output_dir) / 'metrics.json'}")
    return 0


COMMANDS = {
    "synth": cmd_synth, "train-cpc": cmd_train_cpc, "build-graphs": cmd_build_graphs,
    "train": cmd_train, "eval": cmd_eval, "roc": cmd_roc, "gradcheck": cmd_gradcheck,
    "run-cv": cmd_run_cv,
}


def _error_line(exc: BaseException) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc),
                       "format_version": FORMAT_VERSION})


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, ValueError, OSError, KeyError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
