# main.py

import argparse
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from pydantic import ValidationError as PydanticValidationError

from config.settings import RUNS_DIR, build_config
from services.checkpoint_service import load_checkpoint, save_checkpoint
from services.cube_service import load_cube, normalize, save_cube, save_label_map, synthesize_cube
from services.evaluator import evaluate, export_embeddings, predict_map, report_table
from services.flops_counter import DEFAULT_SWEEP_LAMBDAS, count_flops, flops_sweep
from services.logging_service import get_run_logger, initialize_logger
from services.run_manifest import RunManifest
from services.sdmamba_model import SdmambaConfig, SdmambaModel
from services.split_service import load_split, save_split, stratified_split
from services.trainer import save_history, train
from utils.convert_mat_to_hsc import convert_mat_to_cube
from utils.error_handler import ConfigurationError, ProcessingError, SdmambaError

CHECKPOINT_NAME = "model.sdmb"
SPLIT_NAME = "split.txt"
HISTORY_NAME = "history.txt"

FLAG_ALIASES = {
    "patch_size": ["--patch"],
    "hidden_dim": ["--hidden"],
    "learning_rate": ["--lr"],
    "batch_size": ["--batch"],
    "in_bands": ["--bands"],
    "num_classes": ["--classes"],
}


class OneLineArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors are a single `error: ...` line, exit code 2."""

    def error(self, message):
        self.exit(2, f"error: {message}\n")


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got '{value}'")


def _parse_lambdas(value: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated ratios, got '{value}'") from e


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model configuration")
    group.add_argument("--preset", help="Dataset preset from config/datasets.yml")
    group.add_argument("--config", type=Path, help="Flat key=value run-config file")
    for name, info in SdmambaConfig.model_fields.items():
        kind = info.annotation
        arg_type = _parse_bool if kind is bool else kind
        flags = [f"--{name}"] + FLAG_ALIASES.get(name, [])
        group.add_argument(*flags, dest=name, type=arg_type, default=None, help=f"default {info.default}")
    group.add_argument("--lambda", dest="lambda_both", type=float, default=None,
                       help="Sparsity ratio for both the spatial and spectral branch")


def config_from_args(args: argparse.Namespace) -> SdmambaConfig:
    overrides: Dict[str, Any] = {name: getattr(args, name, None) for name in SdmambaConfig.model_fields}
    if getattr(args, "lambda_both", None) is not None:
        for name in ("lambda_spatial", "lambda_spectral"):
            if overrides[name] is None:
                overrides[name] = args.lambda_both
    return build_config(preset=args.preset, config_file=args.config, overrides=overrides)


def _check_cube_matches(cube, config: SdmambaConfig) -> None:
    if cube.bands != config.in_bands:
        raise ConfigurationError(f"cube has {cube.bands} bands but in_bands={config.in_bands}")
    if cube.num_classes != config.num_classes:
        raise ConfigurationError(f"cube has {cube.num_classes} classes but num_classes={config.num_classes}")


def _runs_dir(args) -> Path:
    return Path(args.runs_dir) if args.runs_dir else RUNS_DIR


def _open_checkpoint_run(checkpoint_path: Path):
    """Checkpoint, its run directory and that run's manifest (None if absent)."""
    checkpoint = load_checkpoint(checkpoint_path)
    run_dir = Path(checkpoint_path).parent
    manifest = RunManifest.load(run_dir) if (run_dir / "manifest.json").exists() else None
    return checkpoint, run_dir, manifest


def _append_outputs(manifest: Optional[RunManifest], run_dir: Path, command: str, paths: List[Path]) -> None:
    if manifest is None:
        return
    for path in paths:
        manifest.record_output(path, run_dir, command=command)
    manifest.finish()
    manifest.save(run_dir)


# ---- commands ----

def cmd_synth(args) -> int:
    logger = get_run_logger()
    manifest = RunManifest.create(
        "synth",
        {"size": args.size, "bands": args.bands, "classes": args.classes,
         "sigma": args.sigma, "background": args.background},
        seed=args.seed,
    )
    logger.start_run_logging("synth", manifest.run_id)
    cube = synthesize_cube(num_classes=args.classes, size=args.size, bands=args.bands,
                           noise_sigma=args.sigma, seed=args.seed, background=args.background)
    run_dir = manifest.run_dir(_runs_dir(args))
    out = save_cube(cube, Path(args.out) if args.out else run_dir / "synthetic.hsc")
    manifest.record_output(out, run_dir)
    manifest.finish()
    manifest.save(run_dir)
    print(out)
    logger.complete_run_logging("SUCCESS")
    return 0


def cmd_convert(args) -> int:
    logger = get_run_logger()
    logger.start_run_logging("convert", Path(args.out).stem)
    logger.log_step("Convert", f"{args.data} + {args.gt}")
    cube = convert_mat_to_cube(args.data, args.gt, args.drop_bands, args.names, args.data_key, args.gt_key)
    out = save_cube(cube, args.out)
    logger.log_step("Convert", f"{cube.height}x{cube.width}x{cube.bands}, {cube.num_classes} classes", "COMPLETED")
    print(out)
    logger.complete_run_logging("SUCCESS")
    return 0


def cmd_train(args) -> int:
    logger = get_run_logger()
    config = config_from_args(args)
    manifest = RunManifest.create("train", config.model_dump(), seed=config.seed, dataset_path=args.cube)
    logger.start_run_logging("train", manifest.run_id)
    run_dir = manifest.run_dir(_runs_dir(args))

    cube = normalize(load_cube(args.cube))
    _check_cube_matches(cube, config)

    logger.log_step("Split", f"train={config.train_ratio} val={config.val_ratio} seed={config.split_seed}")
    split = load_split(args.split, cube) if args.split else stratified_split(
        cube, config.train_ratio, config.val_ratio, config.split_seed)
    split_path = save_split(split, run_dir / SPLIT_NAME)

    start = time.time()
    result = train(SdmambaModel(config), cube, split, config, progress=args.progress)
    logger.log_performance_metric("training time", round(time.time() - start, 2), "s")

    checkpoint_path = save_checkpoint(result.model, run_dir / CHECKPOINT_NAME, manifest_id=manifest.run_id)
    history_path = save_history(result.history, run_dir / HISTORY_NAME)

    outputs = [split_path, checkpoint_path, history_path]
    if len(split.test):
        report = evaluate(result.model, cube, split.test)
        table = report_table(report, _train_counts(split, cube))
        report_path = run_dir / "eval_test.csv"
        table.to_csv(report_path, index=False, lineterminator="\n")
        outputs.append(report_path)
        print(_format_table(table))

    for path in outputs:
        manifest.record_output(path, run_dir)
    manifest.finish()
    manifest.save(run_dir)
    print(run_dir)
    logger.complete_run_logging("SUCCESS")
    return 0


def _train_counts(split, cube) -> List[int]:
    counts = split.class_counts(cube, "train")
    return [counts[k] for k in range(1, cube.num_classes + 1)]


def _format_table(table) -> str:
    return table.to_string(index=False, na_rep="", float_format=lambda v: f"{v:.2f}")


def cmd_eval(args) -> int:
    logger = get_run_logger()
    checkpoint, run_dir, manifest = _open_checkpoint_run(args.checkpoint)
    logger.start_run_logging("eval", run_dir.name)
    cube = normalize(load_cube(args.cube))
    _check_cube_matches(cube, checkpoint.config)
    split = load_split(args.split or run_dir / SPLIT_NAME, cube)

    coords = split.subset(args.set)
    if len(coords) == 0:
        raise ProcessingError(f"the '{args.set}' set is empty", step="eval")
    report = evaluate(checkpoint.model, cube, coords)
    table = report_table(report, _train_counts(split, cube))
    report_path = run_dir / f"eval_{args.set}.csv"
    table.to_csv(report_path, index=False, lineterminator="\n")
    _append_outputs(manifest, run_dir, "eval", [report_path])
    print(_format_table(table))
    logger.complete_run_logging("SUCCESS")
    return 0


def cmd_predict(args) -> int:
    logger = get_run_logger()
    checkpoint, run_dir, manifest = _open_checkpoint_run(args.checkpoint)
    logger.start_run_logging("predict", run_dir.name)
    cube = normalize(load_cube(args.cube))
    _check_cube_matches(cube, checkpoint.config)
    label_map = predict_map(checkpoint.model, cube, all_pixels=args.all_pixels)
    default_name = "prediction_all.hsl" if args.all_pixels else "prediction.hsl"
    out = save_label_map(label_map, cube.num_classes, Path(args.out) if args.out else run_dir / default_name)
    _append_outputs(manifest, run_dir, "predict", [out])
    print(out)
    logger.complete_run_logging("SUCCESS")
    return 0


def cmd_export(args) -> int:
    logger = get_run_logger()
    checkpoint, run_dir, manifest = _open_checkpoint_run(args.checkpoint)
    logger.start_run_logging("export", run_dir.name)
    cube = normalize(load_cube(args.cube))
    _check_cube_matches(cube, checkpoint.config)
    if args.set == "all":
        coords = cube.all_coords()
    elif args.set == "labeled":
        coords = cube.labeled_coords()
    else:
        coords = load_split(args.split or run_dir / SPLIT_NAME, cube).subset(args.set)
    out = export_embeddings(checkpoint.model, cube, coords,
                            Path(args.out) if args.out else run_dir / f"embeddings_{args.set}.txt")
    _append_outputs(manifest, run_dir, "export", [out])
    print(out)
    logger.complete_run_logging("SUCCESS")
    return 0


def cmd_flops(args) -> int:
    logger = get_run_logger()
    config = config_from_args(args)
    manifest = RunManifest.create("flops", {**config.model_dump(), "lambdas": args.lambdas}, seed=config.seed)
    logger.start_run_logging("flops", manifest.run_id)
    run_dir = manifest.run_dir(_runs_dir(args))
    table = flops_sweep(config, args.lambdas)
    for row in table.to_dict("records"):
        logger.log_flops(row["sparse_flops"], row["dense_flops"], row["lambda"])
    flops_path = run_dir / "flops.csv"
    table.to_csv(flops_path, index=False, lineterminator="\n")
    manifest.record_output(flops_path, run_dir)
    manifest.finish()
    manifest.save(run_dir)
    logger.log_step("Flops", f"table written to {flops_path}", "COMPLETED")
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    logger.complete_run_logging("SUCCESS")
    return 0


def cmd_sweep(args) -> int:
    logger = get_run_logger()
    base = config_from_args(args)
    manifest = RunManifest.create("sweep", {**base.model_dump(), "lambdas": args.lambdas},
                                  seed=base.seed, dataset_path=args.cube)
    logger.start_run_logging("sweep", manifest.run_id)
    run_dir = manifest.run_dir(_runs_dir(args))
    cube = normalize(load_cube(args.cube))
    _check_cube_matches(cube, base)
    split = stratified_split(cube, base.train_ratio, base.val_ratio, base.split_seed)

    rows = []
    for lam in list(args.lambdas) + [1.0]:
        config = SdmambaConfig.model_validate({**base.model_dump(), "lambda_spatial": lam, "lambda_spectral": lam})
        logger.log_step("Sweep", f"lambda={lam}")
        result = train(SdmambaModel(config), cube, split, config, progress=args.progress)
        report = evaluate(result.model, cube, split.test)
        flops = count_flops(config)
        rows.append({"lambda": lam, "oa": report.oa, "aa": report.aa, "kappa": report.kappa,
                     "sparse_flops": flops.sparse_flops, "dense_flops": flops.dense_flops})
        logger.log_step("Sweep", f"lambda={lam} oa={report.oa:.4f}", "COMPLETED")

    table = pd.DataFrame(rows, columns=["lambda", "oa", "aa", "kappa", "sparse_flops", "dense_flops"])
    sweep_path = run_dir / "sweep.csv"
    table.to_csv(sweep_path, index=False, lineterminator="\n")
    manifest.record_output(sweep_path, run_dir)
    manifest.finish()
    manifest.save(run_dir)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(run_dir)
    logger.complete_run_logging("SUCCESS")
    return 0


# ---- parser ----

def build_parser() -> argparse.ArgumentParser:
    parser = OneLineArgumentParser(prog="sdmamba", description="SDMamba hyperspectral image classification")
    parser.add_argument("--runs-dir", dest="runs_dir", type=Path, default=None, help="Output root for run directories")
    parser.add_argument("--logs-dir", dest="logs_dir", type=Path, default=None, help="Root folder for run logs")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=OneLineArgumentParser)

    p = sub.add_parser("synth", help="Write a synthetic .hsc cube")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--bands", type=int, default=8)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--background", action="store_true", help="Add an unlabeled one-pixel frame")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("convert", help="Convert .mat data + ground truth to .hsc")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--drop-bands", dest="drop_bands", default=None, help="1-based ranges, e.g. 104-108,150-163,220")
    p.add_argument("--names", type=Path, default=None, help="Text file with one class name per line")
    p.add_argument("--data-key", dest="data_key", default=None)
    p.add_argument("--gt-key", dest="gt_key", default=None)
    p.set_defaults(handler=cmd_convert)

    p = sub.add_parser("train", help="Train a model and evaluate it on the test split")
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--split", type=Path, default=None, help="Reuse an existing split file")
    p.add_argument("--progress", action="store_true")
    add_config_flags(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="Print the evaluation report of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--split", type=Path, default=None)
    p.add_argument("--set", choices=["train", "val", "test"], default="test")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", help="Write a predicted label map")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--all-pixels", dest="all_pixels", action="store_true")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("export", help="Export fused pre-head feature embeddings")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--split", type=Path, default=None)
    p.add_argument("--set", choices=["labeled", "test", "all"], default="labeled")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(handler=cmd_export)

    p = sub.add_parser("flops", help="Print sparse and dense FLOPs per sparsity ratio")
    p.add_argument("--lambdas", type=_parse_lambdas, default=list(DEFAULT_SWEEP_LAMBDAS))
    add_config_flags(p)
    p.set_defaults(handler=cmd_flops)

    p = sub.add_parser("sweep", help="Train and test one model per sparsity ratio plus a dense run")
    p.add_argument("--cube", type=Path, required=True)
    p.add_argument("--lambdas", type=_parse_lambdas, default=[0.05, 0.1, 0.3, 0.5, 0.7])
    p.add_argument("--progress", action="store_true")
    add_config_flags(p)
    p.set_defaults(handler=cmd_sweep)

    return parser


def _one_line(error: Exception) -> str:
    if isinstance(error, PydanticValidationError):
        parts = [f"{'.'.join(str(x) for x in e['loc']) or 'config'}: {e['msg']}" for e in error.errors()]
        return "invalid configuration: " + "; ".join(parts)
    return " ".join(str(error).split())


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.logs_dir:
        initialize_logger(args.logs_dir)
    logger = get_run_logger()
    try:
        return args.handler(args)
    except (SdmambaError, PydanticValidationError, OSError) as e:
        message = _one_line(e)
        logger.log_error(message, e)
        logger.complete_run_logging("FAILED")
        print(f"error: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
