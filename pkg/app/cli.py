import argparse
import csv
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from pydantic import ValidationError

from app import checkpoint
from app.bilevel import retrain, run_search, write_loss_csv
from app.exception import CheckpointFormatError, ConfigValidationError, LossExplosionError, NFSError
from app.gate_search import export_gates
from app.logger import init_logger
from app.net import TwoStreamNet, init_params
from app.retrieval import dump_ranks_csv, evaluate, format_report
from app.schemas import PROTOCOLS, EvalReport, ExperimentConfig, GateTrick, RunManifest, SearchOrder, SplitSpec
from app.settings import settings
from app.synth_data import ImageStore, build_from_config, identity_specs
from app.utils import deep_merge, gen_context, gen_props, sha256_of, sha256_of_indices

logger = logging.getLogger(__name__)

RUN_LAYOUT = ("checkpoints", "gates", "logs", "reports")
VARIANTS = {"B": (False, False), "B+N": (True, False), "B+C": (False, True), "B+N+C": (True, True)}
MARGIN_SWEEP = (10.0, 12.5, 15.0, 17.5, 20.0)
LAMBDA_SWEEP = (0.01, 0.02, 0.04, 0.06, 0.08, 0.1)
ABLATION_MODES = ("variants", "stages", "tricks", "margin", "lambda")
ABLATION_PROTOCOL = "visible-to-infrared"


# configuration

def parse_stages(text: str) -> List[int]:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigValidationError([{"field": "stages", "message": "empty stage set"}])
    try:
        return sorted(int(t) for t in items)
    except ValueError:
        raise ConfigValidationError([{"field": "stages", "message": f"stages must be integers, got {text!r}"}])


def parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigValidationError([{"field": "seeds", "message": f"seeds must be integers, got {text!r}"}])
    if not seeds:
        raise ConfigValidationError([{"field": "seeds", "message": "empty seed list"}])
    return seeds


def read_config_file(path: str) -> Dict[str, Any]:
    """YAML or JSON mapping (JSON parses as YAML)."""
    try:
        with open(path, "r") as file:
            data = yaml.safe_load(file) or {}
    except OSError as e:
        raise ConfigValidationError([{"field": "config", "message": f"cannot read {path}: {e}"}])
    except yaml.YAMLError as e:
        raise ConfigValidationError([{"field": "config", "message": f"cannot parse {path}: {e}"}])
    if not isinstance(data, dict):
        raise ConfigValidationError([{"field": "config", "message": f"{path} must hold a mapping"}])
    return data


def validate_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigValidationError([{"field": ".".join(str(p) for p in err["loc"]), "message": err["msg"]}
                                     for err in e.errors()])


def flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}

    def put(path: Sequence[str], value):
        if value is None:
            return
        node = overrides
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value

    put(("seed",), getattr(args, "seed", None))
    put(("data", "dataset_seed"), getattr(args, "dataset_seed", None))
    stages = getattr(args, "stages", None)
    put(("model", "searched_stages"), parse_stages(stages) if stages is not None else None)
    put(("contrastive", "lambda_weight"), getattr(args, "lambda_weight", None))
    put(("contrastive", "margin_T"), getattr(args, "margin", None))
    put(("bilevel", "order"), getattr(args, "order", None))
    put(("bilevel", "implicit_gradient"), getattr(args, "implicit_gradient", None))
    put(("gate", "trick"), getattr(args, "trick", None))
    put(("bilevel", "search_epochs"), getattr(args, "search_epochs", None))
    put(("bilevel", "retrain_epochs"), getattr(args, "retrain_epochs", None))
    put(("bilevel", "iters_per_epoch"), getattr(args, "iters_per_epoch", None))
    return overrides


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    data: Dict[str, Any] = {}
    if os.path.exists(settings.DEFAULT_CONFIG_PATH):
        data = read_config_file(settings.DEFAULT_CONFIG_PATH)
    if getattr(args, "config", None):
        data = deep_merge(data, read_config_file(args.config))
    return validate_config(deep_merge(data, flag_overrides(args)))


# run directory, manifests, bundles

def prepare_run_dir(out: str) -> str:
    for sub in RUN_LAYOUT:
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    return out


def _file_sha(path: str) -> str:
    with open(path, "rb") as fh:
        return sha256_of(fh.read())


def write_manifest(out: str, subcommand: str, context: Dict, config: ExperimentConfig,
                   artifacts: Dict[str, str], split: Optional[SplitSpec] = None) -> RunManifest:
    manifest = RunManifest(
        subcommand=subcommand,
        run_id=context["run-id"],
        config=config.model_dump(mode="json"),
        seeds={"seed": config.seed, "dataset_seed": config.data.dataset_seed},
        split_hashes=({"search_train": sha256_of_indices(split.search_train),
                       "search_val": sha256_of_indices(split.search_val)} if split else {}),
        artifacts={name: os.path.relpath(path, out) for name, path in artifacts.items()},
        artifact_hashes={name: _file_sha(path) for name, path in artifacts.items()},
    )
    manifest.manifest_hash = sha256_of(manifest.model_dump(mode="json", exclude={"run_id", "manifest_hash"}))
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest.model_dump(mode="json"), fh, indent=2, sort_keys=True)
    return manifest


def _write_json(path: str, obj: Any) -> str:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
    return path


def save_gate_bundle(net: TwoStreamNet, path: str) -> str:
    tensors = {}
    for stage in sorted(net.search_cells):
        for cell in net.search_cells[stage]:
            tensors[f"{cell.name}.P"] = cell.P.data
            tensors[f"{cell.name}.G"] = cell.G
    return checkpoint.save(path, tensors, meta={"searched_stages": sorted(net.search_cells)})


def load_gate_bundle(path: str) -> Tuple[List[int], Dict[str, np.ndarray]]:
    tensors, meta = checkpoint.load(path)
    stages = meta.get("searched_stages")
    if not isinstance(stages, list) or not stages:
        raise CheckpointFormatError(f"{path} is not a gate bundle: no searched_stages in header")
    return [int(s) for s in stages], tensors


def apply_gate_bundle(net: TwoStreamNet, tensors: Dict[str, np.ndarray]) -> None:
    for stage in sorted(net.search_cells):
        for cell in net.search_cells[stage]:
            for suffix in ("P", "G"):
                if f"{cell.name}.{suffix}" not in tensors:
                    raise CheckpointFormatError(f"gate bundle lacks {cell.name}.{suffix}")
            cell.P.data[...] = tensors[f"{cell.name}.P"]
            cell.freeze(tensors[f"{cell.name}.G"])


def save_model(net: TwoStreamNet, config: ExperimentConfig, path: str) -> str:
    return checkpoint.save(path, net.state_dict(), meta={"config": config.model_dump(mode="json"),
                                                         "searched_stages": sorted(net.search_cells)})


def load_model(path: str) -> Tuple[TwoStreamNet, ExperimentConfig]:
    tensors, meta = checkpoint.load(path)
    if "config" not in meta:
        raise CheckpointFormatError(f"{path} carries no model config")
    try:
        config = ExperimentConfig.model_validate(meta["config"])
    except ValidationError as e:
        raise CheckpointFormatError(f"{path} carries an invalid config: {e}")
    stages = [int(s) for s in meta.get("searched_stages", [])]
    net = TwoStreamNet(config.model.model_copy(update={"searched_stages": stages}))
    net.attach_search_cells(stages)
    net.load_state_dict(tensors)
    return net, config


# pipelines

def _dataset(config: ExperimentConfig):
    manifest = build_from_config(config.data)
    return manifest, ImageStore(manifest, config.data)


def _with_stages(config: ExperimentConfig, stages: Sequence[int]) -> ExperimentConfig:
    return config.model_copy(update={"model": config.model.model_copy(update={"searched_stages": list(stages)})})


def cmd_search(config: ExperimentConfig, out: str, context: Dict) -> RunManifest:
    if not config.model.searched_stages:
        raise ConfigValidationError([{"field": "stages", "message": "empty stage set"}])
    manifest, store = _dataset(config)
    rng = np.random.default_rng(config.seed)
    net = init_params(config.model, rng, config.gate.init_range)
    result = run_search(net, manifest, config, rng, store, context)

    gates_dir = os.path.join(out, "gates")
    exports = export_gates(net.search_cells, gates_dir)
    artifacts = {f"gate_export:{os.path.basename(path)}": path for path in exports
                 if path.endswith((".pgm", ".csv"))}
    artifacts.update({
        "gates": save_gate_bundle(net, os.path.join(gates_dir, "gates.nfs")),
        "activation_summary": os.path.join(gates_dir, "activation_summary.json"),
        "checkpoint": save_model(net, config, os.path.join(out, "checkpoints", "search.nfs")),
        "search_log": _write_json(os.path.join(out, "logs", "search_log.json"), result.log),
    })
    return write_manifest(out, "search", context, config, artifacts, result.split)


def cmd_train(config: ExperimentConfig, out: str, context: Dict, gates_path: Optional[str] = None) -> RunManifest:
    stages, bundle = [], None
    if gates_path:
        stages, bundle = load_gate_bundle(gates_path)
    config = _with_stages(config, stages)
    manifest, store = _dataset(config)
    net = init_params(config.model, np.random.default_rng(config.seed), config.gate.init_range)
    if bundle is not None:
        apply_gate_bundle(net, bundle)
    records = retrain(net, manifest, config, np.random.default_rng([config.seed, 1]), store, context)
    artifacts = {
        "checkpoint": save_model(net, config, os.path.join(out, "checkpoints", "model.nfs")),
        "loss_csv": write_loss_csv(records, os.path.join(out, "logs", "loss.csv")),
    }
    if gates_path:
        artifacts["input:gates"] = gates_path
    return write_manifest(out, "train", context, config, artifacts)


def cmd_eval(checkpoint_path: str, out: str, context: Dict, protocols: Sequence[str],
             dump_ranks: bool = False) -> List[EvalReport]:
    net, config = load_model(checkpoint_path)
    manifest, store = _dataset(config)
    reports, artifacts = [], {"input:checkpoint": checkpoint_path}
    for protocol in protocols:
        report = evaluate(net, manifest, store, protocol, config.eval, config.seed, keep_ranked=dump_ranks,
                          context=context)
        path = os.path.join(out, "reports", f"{protocol}.json")
        with open(path, "w") as fh:
            fh.write(report.model_dump_json(indent=2))
        artifacts[f"report:{protocol}"] = path
        if dump_ranks:
            ranks_path = os.path.join(out, "reports", f"{protocol}.ranks.csv")
            artifacts[f"ranks:{protocol}"] = dump_ranks_csv(report, ranks_path)
        reports.append(report)
    print(format_report(reports))
    write_manifest(out, "eval", context, config, artifacts)
    return reports


def run_pipeline(config: ExperimentConfig, out: str, context: Optional[Dict] = None) -> EvalReport:
    """Search (when enabled), retrain and evaluate one configuration in its own run directory."""
    prepare_run_dir(out)
    context = context or gen_context("pipeline", config.seed)
    if config.enable_search and not config.model.searched_stages:
        raise ConfigValidationError([{"field": "stages", "message": "empty stage set"}])
    config = _with_stages(config, config.model.searched_stages if config.enable_search else [])
    manifest, store = _dataset(config)
    rng = np.random.default_rng(config.seed)
    net = init_params(config.model, rng, config.gate.init_range)
    if net.search_cells:
        run_search(net, manifest, config, rng, store, context)
        export_gates(net.search_cells, os.path.join(out, "gates"))
    records = retrain(net, manifest, config, np.random.default_rng([config.seed, 1]), store, context)
    report = evaluate(net, manifest, store, ABLATION_PROTOCOL, config.eval, config.seed, context=context)
    artifacts = {
        "checkpoint": save_model(net, config, os.path.join(out, "checkpoints", "model.nfs")),
        "loss_csv": write_loss_csv(records, os.path.join(out, "logs", "loss.csv")),
        "report": os.path.join(out, "reports", f"{ABLATION_PROTOCOL}.json"),
    }
    with open(artifacts["report"], "w") as fh:
        fh.write(report.model_dump_json(indent=2))
    write_manifest(out, "pipeline", context, config, artifacts)
    return report


def ablation_grid(mode: str, config: ExperimentConfig) -> List[Tuple[str, Dict[str, Any]]]:
    """(label, config override) for every variant of an ablation mode."""
    if mode == "variants":
        return [(label, {"enable_search": n, "enable_contrastive": c}) for label, (n, c) in VARIANTS.items()]
    if mode == "stages":
        n = len(config.model.stage_widths)
        subsets = [s for k in range(1, n + 1) for s in itertools.combinations(range(1, n + 1), k)]
        return [("stages-" + "-".join(map(str, s)), {"enable_search": True, "model": {"searched_stages": list(s)}})
                for s in subsets]
    if mode == "tricks":
        return [(t.value, {"enable_search": True, "gate": {"trick": t.value}}) for t in GateTrick]
    if mode == "margin":
        return [(f"T{t:g}", {"contrastive": {"margin_T": t}}) for t in MARGIN_SWEEP]
    if mode == "lambda":
        return [(f"lambda{lam:g}", {"contrastive": {"lambda_weight": lam}}) for lam in LAMBDA_SWEEP]
    raise ConfigValidationError([{"field": "mode", "message": f"unknown ablation mode {mode!r}"}])


def _ablation_worker(job: Tuple[str, int, Dict[str, Any], str]) -> Tuple[str, int, Dict[str, Any]]:
    label, seed, config_data, run_dir = job
    report = run_pipeline(validate_config(config_data), run_dir, gen_context("ablate", seed))
    return label, seed, report.model_dump(mode="json")


def cmd_ablate(config: ExperimentConfig, out: str, context: Dict, mode: str, seeds: Sequence[int],
               workers: int = 1) -> List[Dict[str, Any]]:
    base = config.model_dump(mode="json")
    results: Dict[Tuple[str, int], Dict[str, Any]] = {}
    jobs = []
    grid = ablation_grid(mode, config)
    for label, override in grid:
        for seed in seeds:
            run_dir = os.path.join(out, "ablation", mode, label, f"seed{seed}")
            report_path = os.path.join(run_dir, "reports", f"{ABLATION_PROTOCOL}.json")
            if os.path.exists(report_path):
                with open(report_path) as fh:
                    results[(label, seed)] = EvalReport.model_validate_json(fh.read()).model_dump(mode="json")
                logger.info(f"Resuming: {label} seed {seed} already complete",
                            extra=gen_props(context, operation="ablate", variant=label, resumed=True))
                continue
            jobs.append((label, seed, deep_merge(base, {**override, "seed": seed}), run_dir))

    logger.info(f"Ablation '{mode}': {len(grid)} variants x {len(seeds)} seeds, {len(jobs)} runs pending",
                extra=gen_props(context, operation="ablate", mode=mode, pending=len(jobs)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            finished = list(pool.map(_ablation_worker, jobs))
    else:
        finished = [_ablation_worker(job) for job in jobs]
    for label, seed, report in finished:
        results[(label, seed)] = report

    rows = []
    for label, _ in grid:
        reports = [results[(label, seed)] for seed in seeds]
        rows.append({"variant": label,
                     "rank1_mean": float(np.mean([r["cmc"][0] for r in reports])),
                     "map_mean": float(np.mean([r["map"] for r in reports])),
                     "seeds": ";".join(str(s) for s in seeds)})

    csv_path = os.path.join(out, "reports", f"ablation_{mode}.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "rank1_mean", "map_mean", "seeds"])
        writer.writeheader()
        writer.writerows(rows)
    table = ["| variant | rank1_mean | map_mean | seeds |", "|---|---|---|---|"]
    table += [f"| {r['variant']} | {100 * r['rank1_mean']:.2f} | {100 * r['map_mean']:.2f} | {r['seeds']} |"
              for r in rows]
    md_path = os.path.join(out, "reports", f"ablation_{mode}.md")
    with open(md_path, "w") as fh:
        fh.write("\n".join(table) + "\n")
    print("\n".join(table))
    write_manifest(out, "ablate", context, config, {"summary_csv": csv_path, "summary_md": md_path})
    return rows


def cmd_gen_data(config: ExperimentConfig, out: str, context: Dict, cache: bool = False) -> RunManifest:
    start_time = time.perf_counter()
    manifest, store = _dataset(config)
    artifacts = {"dataset_manifest": os.path.join(out, "dataset_manifest.json")}
    with open(artifacts["dataset_manifest"], "w") as fh:
        fh.write(manifest.model_dump_json(indent=2))
    artifacts["identities"] = os.path.join(out, "identities.json")
    identities = identity_specs(manifest, config.data.signature_dim)
    _write_json(artifacts["identities"], [s.model_dump() for s in identities])
    if cache:
        os.makedirs(os.path.join(out, "cache"), exist_ok=True)
        artifacts["image_cache"] = store.save(os.path.join(out, "cache", "images.nfs"))
    logger.info(f"Generated dataset manifest in {out}",
                extra=gen_props(context, operation="gen-data", cached=cache,
                                execution_time=time.perf_counter() - start_time))
    return write_manifest(out, "gen-data", context, config, artifacts)


# argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config merged over the defaults")
    common.add_argument("--seed", type=int)
    common.add_argument("--dataset-seed", type=int, dest="dataset_seed")
    common.add_argument("--stages", help="comma-separated 1-based stage indices to search, e.g. 1,2,3")
    common.add_argument("--lambda", type=float, dest="lambda_weight", help="contrastive loss weight")
    common.add_argument("--margin", type=float, help="contrastive margin T")
    common.add_argument("--order", choices=[o.value for o in SearchOrder])
    common.add_argument("--implicit-gradient", action="store_true", default=None, dest="implicit_gradient",
                        help="second order: add the Hessian-vector implicit term")
    common.add_argument("--trick", choices=[t.value for t in GateTrick])
    common.add_argument("--search-epochs", type=int, dest="search_epochs")
    common.add_argument("--retrain-epochs", type=int, dest="retrain_epochs")
    common.add_argument("--iters-per-epoch", type=int, dest="iters_per_epoch")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="nfs", description=settings.DESCRIPTION)
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("search", parents=[common], help="split, search gates and derive them")
    train = sub.add_parser("train", parents=[common], help="train weights with derived gates (or none)")
    train.add_argument("--gates", help="gate bundle written by 'nfs search'")
    evaluate_parser = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    evaluate_parser.add_argument("--checkpoint", required=True)
    evaluate_parser.add_argument("--protocol", choices=sorted(PROTOCOLS) + ["all"], default="all")
    evaluate_parser.add_argument("--dump-ranks", action="store_true", dest="dump_ranks")
    ablate = sub.add_parser("ablate", parents=[common], help="run an ablation grid over seeds")
    ablate.add_argument("--mode", choices=ABLATION_MODES, default="variants")
    ablate.add_argument("--seeds", default="0,1,2,3,4")
    ablate.add_argument("--workers", type=int, default=1)
    gen = sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset manifest")
    gen.add_argument("--cache", action="store_true", help="also render every image into an NFS1 cache")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out = prepare_run_dir(args.out or settings.OUTPUT_DIR)
    init_logger(settings.TITLE, os.path.join(out, "logs"))
    context = gen_context(args.command, args.seed)
    start_time = time.perf_counter()
    logger.info(f"Starting nfs {args.command}", extra=gen_props(context, operation=args.command, out=out))
    try:
        config = resolve_config(args)
        context["seed"] = config.seed
        if args.command == "search":
            cmd_search(config, out, context)
        elif args.command == "train":
            cmd_train(config, out, context, args.gates)
        elif args.command == "eval":
            protocols = sorted(PROTOCOLS) if args.protocol == "all" else [args.protocol]
            cmd_eval(args.checkpoint, out, context, protocols, args.dump_ranks)
        elif args.command == "ablate":
            cmd_ablate(config, out, context, args.mode, parse_seeds(args.seeds), args.workers)
        else:
            cmd_gen_data(config, out, context, args.cache)
        logger.info(f"Finished nfs {args.command}",
                    extra=gen_props(context, operation=args.command,
                                    execution_time=time.perf_counter() - start_time))
        return 0
    except ConfigValidationError as e:
        logger.error(f"Validation error: {e.errors}",
                     extra=gen_props(context, operation=args.command, error_type="ConfigValidationError",
                                     error_message=str(e), execution_time=time.perf_counter() - start_time))
        print(f"nfs {args.command}: {e}", file=sys.stderr)
        return 1
    except LossExplosionError as e:
        _write_json(os.path.join(out, "logs", "diagnostics.json"), e.diagnostics)
        logger.error(f"Loss explosion: {e}",
                     extra=gen_props(context, operation=args.command, error_type="LossExplosionError",
                                     error_message=str(e), diagnostics=e.diagnostics,
                                     execution_time=time.perf_counter() - start_time))
        print(f"nfs {args.command}: {e}", file=sys.stderr)
        return 1
    except (NFSError, OSError) as e:
        logger.error(f"nfs {args.command} failed: {e}",
                     extra=gen_props(context, operation=args.command, error_type=type(e).__name__,
                                     error_message=str(e), execution_time=time.perf_counter() - start_time))
        print(f"nfs {args.command}: {e}", file=sys.stderr)
        return 1
