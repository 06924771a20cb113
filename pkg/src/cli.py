import argparse
import json
import logging
import os
import re
from typing import Any, Dict, List, Optional, Sequence

from pydantic import BaseModel, ValidationError

from src import __version__
from src.config import (
    RunConfig,
    default_output_dir,
    default_threads,
    load_config_file,
    load_manifest,
    normalize_key,
    resolve_options,
    write_manifest,
)
from src.dataset import filter_stuff, load_dataset, save_dataset
from src.errors import AmodalToolkitError, ConfigError, DatasetIOError, DatasetValidationError, ParseError
from src.evaluation import evaluate, evaluate_suite, load_detections
from src.ingest.factory import SUPPORTED_FORMATS
from src.ml.gradcheck import run_grad_check_suite
from src.ml.heads import Variant
from src.ml.trainer import ToyTrainConfig, compare_variants, load_train_config, save_checkpoint, train_toy, write_log
from src.models import AugmentConfig, EvalConfig, EvalResult, MergeConfig, MetricMode, Placement
from src.reporter import format_summary_table, generate_excel_report, write_eval_json, write_json, write_pr_csv, write_stats_json
from src.stats import combine_stats, compute_stats, stats_table
from src.synthesis import AugmentedDatasetBuilder, merge_categories, pad_dataset_for_amodal, write_compositing_manifest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

METRIC_COLUMNS = {
    "a": ("AP_A", MetricMode.A),
    "v": ("AP_V", MetricMode.V),
    "av": ("AP_AV", MetricMode.AV),
    "aivv": ("AP_AIVV", MetricMode.AIVV),
    "iv": ("AP^0.5_IV", MetricMode.IV),
}
SYNTH_MODES = ("paste-aug", "modal-aug", "merge-cls", "pad")


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _file_options(path: Optional[str], command: str) -> Dict[str, Any]:
    """
    Options from --config. A run manifest is accepted as well, so a run can be
    repeated from the manifest it wrote.
    """
    values = load_config_file(path)
    if "command" in values and "options" in values:
        run = load_manifest(path)
        if run.command != command:
            raise ConfigError(f"{path} is a manifest of '{run.command}', not '{command}'")
        return {normalize_key(k): v for k, v in run.options.items()}
    return values


def _resolve(args: argparse.Namespace, command: str, defaults: Dict[str, Any]) -> Dict[str, Any]:
    explicit = {key: getattr(args, key, None) for key in defaults}
    return resolve_options(defaults, _file_options(args.config, command), explicit)


def _build(model_cls, **values) -> BaseModel:
    try:
        return model_cls(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid {model_cls.__name__}: {e}") from e


def _record_run(command: str, inputs: Sequence[str], opts: Dict[str, Any], seed: Optional[int] = None) -> None:
    write_manifest(RunConfig(command=command, inputs=list(inputs), options=opts, seed=seed), opts["output_dir"])


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


# ---------------------------------------------------------------- validate

def cmd_validate(args: argparse.Namespace) -> int:
    opts = _resolve(args, "validate", {
        "format": "native",
        "repair_slack": 0,
        "strict_depth": False,
        "output_dir": default_output_dir(),
    })
    _record_run("validate", [args.dataset], opts)

    print(f"🔍 Validating {args.dataset} ({opts['format']})...")
    try:
        ds = load_dataset(args.dataset, opts["format"], repair_slack=opts["repair_slack"], strict_depth=opts["strict_depth"])
    except DatasetValidationError as e:
        print(f"❌ {len(e.violations)} violation(s) found:")
        for v in e.violations:
            print(f"   - {v}")
        return EXIT_FAILURE
    print(f"✅ Dataset is valid: {len(ds.images)} images, {ds.num_annotations} annotations.")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _run_metrics(ds, dets, base: EvalConfig, metric: str) -> Dict[str, EvalResult]:
    key = metric.lower()
    if key == "all":
        return evaluate_suite(ds, dets, base)
    if key not in METRIC_COLUMNS:
        raise ConfigError(f"Unknown metric '{metric}' (expected one of all, {', '.join(METRIC_COLUMNS)})")
    name, mode = METRIC_COLUMNS[key]
    cfg = base.model_copy(update={"metric": mode})
    if cfg.occluded_only and mode != MetricMode.IV:
        name = f"{name} (occl)"
    return {name: evaluate(ds, dets, cfg)}


def cmd_eval(args: argparse.Namespace) -> int:
    opts = _resolve(args, "eval", {
        "format": "native",
        "no_stuff": False,
        "metric": "all",
        "occluded_only": False,
        "class_agnostic": False,
        "max_dets": 100,
        "iv_threshold": 0.5,
        "threads": default_threads(),
        "xlsx": None,
        "pr_csv": False,
        "output_dir": default_output_dir(),
    })
    _record_run("eval", [args.ground_truth, args.detections], opts)
    out_dir = opts["output_dir"]

    print(f"🚀 Evaluating {args.detections}")
    print(f"📂 Ground truth: {args.ground_truth}")

    print("\n[1/3] Loading ground truth and detections...")
    ds = load_dataset(args.ground_truth, opts["format"])
    dets = load_detections(args.detections, ds)
    if opts["no_stuff"]:
        stuff_ids = {c.id for c in ds.categories if c.is_stuff}
        dets = [d for d in dets if d.category_id not in stuff_ids]
        ds = filter_stuff(ds)
    print(f"✅ {len(ds.images)} images, {ds.num_annotations} ground truths, {len(dets)} detections.")

    print("\n[2/3] Matching detections...")
    base = _build(
        EvalConfig,
        max_detections_per_image=opts["max_dets"],
        occluded_only=opts["occluded_only"],
        class_agnostic=opts["class_agnostic"],
        iv_threshold=opts["iv_threshold"],
        threads=opts["threads"],
    )
    results = _run_metrics(ds, dets, base, opts["metric"])
    print(format_summary_table(results))
    if any(r.fallback_used for r in results.values()):
        print("⚠️ Some detections have no visible/invisible masks: amodal masks were used as visible predictions.")
    for name, r in results.items():
        if r.occluded_only:
            print(f"ℹ️ {name}: {r.num_ignored_gts} non-occluded ground truth(s) and "
                  f"{r.num_ignored_detections} detection(s) ignored.")

    print("\n[3/3] Writing reports...")
    path = write_eval_json(results, os.path.join(out_dir, "eval_results.json"))
    print(f"✅ Results saved to: {path}")
    if opts["pr_csv"]:
        for name, r in results.items():
            write_pr_csv(r, os.path.join(out_dir, f"pr_{_slug(name)}.csv"))
        print(f"✅ PR curves saved to: {out_dir}")
    if opts["xlsx"]:
        generate_excel_report(opts["xlsx"], results=results, categories=ds.categories)
        print(f"✅ Workbook saved to: {opts['xlsx']}")

    if all(r.mean_ap is None for r in results.values()):
        print("⚠️ No metric is defined: there is no ground truth in scope.")
        return EXIT_FAILURE
    print("\n✨ Evaluation completed successfully!")
    return EXIT_OK


# ---------------------------------------------------------------- synth

def cmd_synth(args: argparse.Namespace) -> int:
    opts = _resolve(args, "synth", {
        "format": "native",
        "modal_format": "native",
        "seed": 0,
        "n_images": None,
        "donors_per_image": 1,
        "placement": Placement.UNIFORM_INSIDE.value,
        "min_visible_fraction": 0.0,
        "max_attempts": 50,
        "keep_boundary_objects": False,
        "iou_threshold": 0.75,
        "keep_stuff": False,
        "keep_crowd": False,
        "threads": default_threads(),
        "output": None,
        "output_dir": default_output_dir(),
    })
    mode = args.mode
    expected = 2 if mode == "merge-cls" else 1
    if len(args.inputs) != expected:
        raise ConfigError(f"synth {mode} expects {expected} input dataset(s), got {len(args.inputs)}")
    _record_run("synth", args.inputs, opts, seed=opts["seed"])
    out_dir = opts["output_dir"]

    print(f"🚀 Synthesizing dataset ({mode})...")
    ds = load_dataset(args.inputs[0], opts["format"])
    print(f"✅ Loaded {args.inputs[0]}: {len(ds.images)} images, {ds.num_annotations} annotations.")

    entries = None
    if mode == "merge-cls":
        modal = load_dataset(args.inputs[1], opts["modal_format"])
        cfg = _build(
            MergeConfig,
            iou_threshold=opts["iou_threshold"],
            drop_stuff=not opts["keep_stuff"],
            drop_crowd=not opts["keep_crowd"],
        )
        result = merge_categories(ds, modal, cfg)
    elif mode == "pad":
        result = pad_dataset_for_amodal(ds)
        padded = sum(not img.padding.is_zero() for img in result.images)
        print(f"✅ {padded} image(s) padded.")
    else:
        cfg = _build(
            AugmentConfig,
            rng_seed=opts["seed"],
            donors_per_image=opts["donors_per_image"],
            placement=opts["placement"],
            exclude_boundary_objects=not opts["keep_boundary_objects"],
            min_remaining_visible_fraction=opts["min_visible_fraction"],
            max_placement_attempts=opts["max_attempts"],
            threads=opts["threads"],
        )
        n_images = opts["n_images"] if opts["n_images"] is not None else len(ds.images)
        source = "amodal" if mode == "paste-aug" else "modal"
        result, entries = AugmentedDatasetBuilder(ds, cfg, source=source).build(n_images, opts["seed"])

    output = opts["output"] or os.path.join(out_dir, f"{result.split_name}.json")
    save_dataset(result, output)
    print(f"✅ {len(result.images)} images, {result.num_annotations} annotations saved to: {output}")
    if entries is not None:
        manifest_path = os.path.join(out_dir, "compositing_manifest.json")
        write_compositing_manifest(entries, manifest_path)
        print(f"✅ Compositing manifest ({len(entries)} pastes) saved to: {manifest_path}")
    print("\n✨ Synthesis completed successfully!")
    return EXIT_OK


# ---------------------------------------------------------------- stats

def cmd_stats(args: argparse.Namespace) -> int:
    opts = _resolve(args, "stats", {
        "format": "native",
        "no_stuff": False,
        "json": False,
        "combine": False,
        "xlsx": None,
        "output_dir": default_output_dir(),
    })
    _record_run("stats", args.datasets, opts)

    stats = {}
    for path in args.datasets:
        ds = load_dataset(path, opts["format"])
        if opts["no_stuff"]:
            ds = filter_stuff(ds)
        name = ds.split_name if ds.split_name not in stats else f"{ds.split_name} ({path})"
        stats[name] = compute_stats(ds)
    if opts["combine"] and len(stats) > 1:
        stats["combined"] = combine_stats(list(stats.values()))

    print(stats_table(stats).to_string())
    path = write_stats_json(stats, os.path.join(opts["output_dir"], "split_stats.json"))
    if opts["json"]:
        print(json.dumps({name: s.model_dump() for name, s in stats.items()}, indent=2, sort_keys=True))
    if opts["xlsx"]:
        generate_excel_report(opts["xlsx"], stats=stats)
        print(f"✅ Workbook saved to: {opts['xlsx']}")
    print(f"✅ Statistics saved to: {path}")
    return EXIT_OK


# ---------------------------------------------------------------- toy-train

def cmd_toy_train(args: argparse.Namespace) -> int:
    defaults = ToyTrainConfig().model_dump(mode="json")
    defaults.update({
        "grad_check": False,
        "grad_check_configs": 20,
        "compare": False,
        "output_dir": default_output_dir(),
    })
    opts = _resolve(args, "toy-train", defaults)
    cfg = load_train_config({key: opts[key] for key in ToyTrainConfig.model_fields})
    _record_run("toy-train", [], opts, seed=cfg.seed)
    out_dir = opts["output_dir"]

    if opts["grad_check"]:
        n = opts["grad_check_configs"]
        print(f"🧮 Checking gradients on {n} random configurations...")
        report = run_grad_check_suite(n_configs=n, seed=cfg.seed)
        for term, err in report.per_term.items():
            print(f"   {term}: {err:.3e}")
        print(f"max relative error: {report.max_rel_error:.3e} "
              f"({report.checked} coordinates checked, {report.skipped} skipped at kinks)")
        write_json(report.model_dump(), os.path.join(out_dir, "grad_check.json"))
        if not report.passed:
            print("❌ Analytic and numeric gradients disagree.")
            return EXIT_FAILURE
        print("✅ All loss gradients match finite differences.")
        return EXIT_OK

    if opts["compare"]:
        print(f"🚀 Comparing variants ({cfg.steps} steps each, seed {cfg.seed})...")
        table = compare_variants(cfg, tuple(Variant))
        print(table.to_string(float_format=lambda v: f"{v:.2f}"))
        path = os.path.join(out_dir, "variant_comparison.csv")
        try:
            table.to_csv(path)
        except OSError as e:
            raise DatasetIOError(f"Could not write {path}: {e}") from e
        print(f"✅ Comparison saved to: {path}")
        return EXIT_OK

    print(f"🚀 Training variant '{cfg.variant.value}' for {cfg.steps} steps (seed {cfg.seed})...")
    result = train_toy(cfg)
    log_path = write_log(result.log, os.path.join(out_dir, "train_log.jsonl"))
    ckpt_path = save_checkpoint(result.model, os.path.join(out_dir, "checkpoint.json"), cfg.variant)
    if result.log:
        print(f"✅ Total loss {result.log[0].total:.4f} -> {result.log[-1].total:.4f}")
    print(f"✅ Log saved to: {log_path}")
    print(f"✅ Checkpoint saved to: {ckpt_path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with option values (long flag names as keys) or a run manifest")
    common.add_argument("--output-dir", help="Directory for reports and run_manifest.json (default: $AMODAL_OUTPUT_DIR or data/processed)")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(description="Amodal instance segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="Check a dataset against every invariant")
    p.add_argument("dataset", help="Dataset file")
    p.add_argument("--format", choices=SUPPORTED_FORMATS)
    p.add_argument("--repair-slack", type=int, help="Repair visible masks exceeding the amodal mask by at most N pixels")
    p.add_argument("--strict-depth", action="store_true", default=None, help="Treat depth-order inconsistencies as violations")
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("eval", parents=[common], help="Compute AP/AR for amodal, visible and invisible masks")
    p.add_argument("ground_truth", help="Ground-truth dataset file")
    p.add_argument("detections", help="Detections JSON file")
    p.add_argument("--format", choices=SUPPORTED_FORMATS, help="Ground-truth format")
    p.add_argument("--metric", choices=("all",) + tuple(METRIC_COLUMNS), help="Metric to compute (default: the full column set)")
    p.add_argument("--occluded-only", action="store_true", default=None, help="Evaluate on occluded ground truth only")
    p.add_argument("--no-stuff", action="store_true", default=None, help="Drop stuff categories and their detections")
    p.add_argument("--class-agnostic", action="store_true", default=None, help="Ignore categories when matching")
    p.add_argument("--max-dets", type=int, help="Detections kept per image (default: 100)")
    p.add_argument("--iv-threshold", type=float, help="IoU threshold of AP_IV (default: 0.5)")
    p.add_argument("--threads", type=int, help="Worker threads (default: $AMODAL_THREADS or 1)")
    p.add_argument("--xlsx", help="Also write an Excel workbook to this path")
    p.add_argument("--pr-csv", action="store_true", default=None, help="Write interpolated PR curves as CSV")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="Build augmented, merged or padded datasets")
    p.add_argument("mode", choices=SYNTH_MODES)
    p.add_argument("inputs", nargs="+", help="Input dataset(s); merge-cls takes the amodal then the modal dataset")
    p.add_argument("--format", choices=SUPPORTED_FORMATS, help="Format of the first input")
    p.add_argument("--modal-format", choices=SUPPORTED_FORMATS, help="Format of the modal dataset (merge-cls)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-images", type=int, help="Images to synthesize (default: size of the input)")
    p.add_argument("--donors-per-image", type=int)
    p.add_argument("--placement", choices=[pl.value for pl in Placement])
    p.add_argument("--min-visible-fraction", type=float, help="Drop occluded objects with less visible area left")
    p.add_argument("--max-attempts", type=int, help="Placement attempts per donor")
    p.add_argument("--keep-boundary-objects", action="store_true", default=None, help="Allow donors touching the image border")
    p.add_argument("--iou-threshold", type=float, help="Matching threshold of merge-cls (default: 0.75)")
    p.add_argument("--keep-stuff", action="store_true", default=None, help="merge-cls: keep matches to stuff")
    p.add_argument("--keep-crowd", action="store_true", default=None, help="merge-cls: keep matches to crowd regions")
    p.add_argument("--threads", type=int)
    p.add_argument("--output", "-o", help="Output dataset path (default: <output-dir>/<split>.json)")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("stats", parents=[common], help="Occlusion statistics of one or more splits")
    p.add_argument("datasets", nargs="+", help="Dataset files, one column each")
    p.add_argument("--format", choices=SUPPORTED_FORMATS)
    p.add_argument("--json", action="store_true", default=None, help="Also print exact (unrounded) ratios as JSON")
    p.add_argument("--combine", action="store_true", default=None, help="Add a column for the union of all splits")
    p.add_argument("--no-stuff", action="store_true", default=None, help="Drop stuff annotations from every split")
    p.add_argument("--xlsx", help="Also write an Excel workbook to this path")
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("toy-train", parents=[common], help="Train the occlusion mask heads on synthetic shapes")
    p.add_argument("--variant", choices=[v.value for v in Variant])
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--corpus-size", type=int)
    p.add_argument("--grad-check", action="store_true", default=None, help="Run the finite-difference gradient check and exit")
    p.add_argument("--grad-check-configs", type=int, help="Random configurations for --grad-check (default: 20)")
    p.add_argument("--compare", action="store_true", default=None, help="Train and evaluate every variant")
    p.set_defaults(handler=cmd_toy_train)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Runs one subcommand and returns its exit code: 0 on success, 1 on a domain
    failure (invalid dataset, undefined metric, failed placement), 2 on usage
    and I/O errors. argparse itself exits with 2 on malformed command lines.
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except DatasetValidationError as e:
        print(f"❌ {e}")
        return EXIT_FAILURE
    except (DatasetIOError, ParseError, ConfigError) as e:
        print(f"❌ {e}")
        return EXIT_USAGE
    except AmodalToolkitError as e:
        print(f"❌ {e}")
        return EXIT_FAILURE
