# ui/cli.py
"""
Command-line entry point for the whole pipeline.

    synth-data   write a synthetic lesion dataset
    pretrain     multi-resolution self-supervised pre-training
    finetune     supervised fine-tuning with the sparse classifier
    explain      scoring sheet, top-k heatmaps and an optional prototype gallery
    eval-detect  scale-sweep localisation AP of one prototype
    eval-class   BAcc / F1 / AUC with bootstrap intervals, per resolution
    ablate       compare none / single / multi-resolution pre-training

Every invocation writes a run manifest next to its outputs, whether it
succeeds or fails. Exit codes: 0 ok, 2 config, 3 data, 4 numeric.
"""
import argparse
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from core.ablation import STRATEGIES, results_frame, run_ablation
from core.checkpoint import load_checkpoint, save_checkpoint
from core.data import generate_synthetic_dataset, load_dataset, read_image
from core.detection import (auto_prototype, cases_from_maps, cases_from_model, evaluate_detection, lesion_class,
                            write_activation_png)
from core.errors import ConfigError, DataError, NumericFailure, ProtoPatchError
from core.explain import (render_heatmap, prototype_activation, prototype_gallery, rank_prototypes,
                          sheet_from_presence)
from core.metrics import PerformanceMetrics
from core.model import ProtoModel
from core.prototype_head import activation_map
from core.training import TrainConfig, TrainingLog, finetune, predict, pretrain
from ui.charts import ChartGenerator
from ui.inputs import DEFAULT_PRESET, default_seed, describe_presets, resolve_synthetic_spec, resolve_train_config
from ui.results import ResultsExporter, companion_path, export_report

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
FORMATS = ("json", "csv", "pdf", "html")
MANIFEST_NAME = "run_manifest.json"


@dataclass
class RunManifest:
    command: str
    argv: List[str]
    started: str
    config: Dict = field(default_factory=dict)
    seed: Optional[int] = None
    artifacts: List[str] = field(default_factory=list)
    wall_clock_s: float = 0.0
    status: str = "running"
    exit_code: int = 0
    error: Optional[str] = None
    details: Dict = field(default_factory=dict)

    def add(self, *paths):
        self.artifacts.extend(str(p) for p in paths)

    def to_dict(self) -> Dict:
        return asdict(self)


def configure_logging(level: Optional[str] = None):
    name = (level or os.getenv("PROTOPATCH_LOG_LEVEL") or "INFO").upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise ConfigError(f"unknown log level '{name}'")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, force=True)


# -----------------------------
# Argument helpers
# -----------------------------
def _formats(args) -> List[str]:
    chosen = [f.strip().lower() for f in args.formats.split(",") if f.strip()]
    unknown = sorted(set(chosen) - set(FORMATS))
    if unknown:
        raise ConfigError(f"unknown output format(s) {unknown}, choose from {', '.join(FORMATS)}")
    return chosen


def _seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = default_seed()
    return 0 if env is None else env


def _split(name: Optional[str]) -> Optional[str]:
    return None if name in (None, "", "all") else name


def _tau(value: float) -> float:
    if not 0.0 < value <= 1.0:
        raise ConfigError(f"--tau must lie in (0, 1], got {value}")
    return value


def _int_list(raw: Optional[str], flag: str) -> Optional[List[int]]:
    if not raw:
        return None
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"{flag} expects comma-separated integers, got '{raw}'") from exc


def _train_config(args, manifest: RunManifest) -> TrainConfig:
    config, _ = resolve_train_config(args.config, args.preset, args.set, args.seed)
    # --out decides where checkpoints land
    config.checkpoint_dir = str(args.out)
    manifest.config = config.to_dict()
    manifest.seed = config.seed
    return config


def _training_log(args, out: Path, name: str, manifest: RunManifest) -> TrainingLog:
    paths = [out / name] + ([Path(args.log)] if args.log else [])
    manifest.add(*paths)
    return TrainingLog(paths)


def _load_model(path, manifest: RunManifest) -> ProtoModel:
    model = ProtoModel.from_checkpoint(load_checkpoint(path))
    if not model.class_names:
        raise ConfigError(f"checkpoint {path} carries no class names")
    manifest.config["checkpoint"] = str(path)
    manifest.config["classes"] = list(model.class_names)
    return model


def _check_prototype(model: ProtoModel, d: int) -> int:
    if not 0 <= d < model.num_prototypes:
        raise ConfigError(f"prototype {d} is out of range for {model.num_prototypes} prototypes")
    return d


def _write_curves(log: TrainingLog, out: Path, formats: Sequence[str], title: str) -> List[Path]:
    frame = log.to_frame()
    written = []
    if "csv" in formats and not frame.empty:
        written.append(ResultsExporter.export_to_csv(frame, out / "train_log.csv"))
    if "html" in formats and not frame.empty:
        path = out / "loss_curve.html"
        ChartGenerator().create_loss_curve(frame, title).write_html(str(path), include_plotlyjs="cdn")
        written.append(path)
    return written


# -----------------------------
# Subcommands
# -----------------------------
def cmd_synth_data(args, manifest: RunManifest):
    spec, _ = resolve_synthetic_spec(args.spec, args.preset, args.set, args.seed)
    manifest.config = asdict(spec)
    manifest.seed = spec.seed
    root = generate_synthetic_dataset(spec, args.out)
    manifest.add(root / "labels.jsonl", root / "boxes.jsonl", *(root / split for split in spec.counts))


def cmd_pretrain(args, manifest: RunManifest):
    out = Path(args.out)
    config = _train_config(args, manifest)
    formats = _formats(args)
    train = load_dataset(args.data, "train")
    log = _training_log(args, out, "train_log.jsonl", manifest)
    ckpt = pretrain(config, train, log)
    manifest.add(save_checkpoint(ckpt, Path(config.checkpoint_dir) / "pretrained.ckpt"))
    manifest.add(*_write_curves(log, out, formats, "Pre-training losses"))
    manifest.details = {"selected_epoch": ckpt.epoch, **ckpt.metrics}


def cmd_finetune(args, manifest: RunManifest):
    out = Path(args.out)
    config = _train_config(args, manifest)
    formats = _formats(args)
    train = load_dataset(args.data, "train")
    val = load_dataset(args.data, "val")
    start = load_checkpoint(args.init) if args.init else None
    if start is None:
        logger.warning("No --init checkpoint: fine-tuning from a randomly initialised encoder")
    log = _training_log(args, out, "train_log.jsonl", manifest)
    ckpt = finetune(config, train, val, start, log)
    manifest.add(save_checkpoint(ckpt, Path(config.checkpoint_dir) / "model.ckpt"))
    manifest.add(*_write_curves(log, out, formats, "Fine-tuning losses"))
    manifest.details = {"selected_epoch": ckpt.epoch, **ckpt.metrics}


def cmd_explain(args, manifest: RunManifest):
    out = Path(args.out)
    manifest.seed = _seed(args)
    if args.topk < 1:
        raise ConfigError(f"--topk must be at least 1, got {args.topk}")
    model = _load_model(args.ckpt, manifest)
    image = read_image(Path(args.image))
    height, width = image.shape
    analysis = model.analyse(image)
    sheet = sheet_from_presence(analysis.presence, model.classifier)
    manifest.add(sheet.to_json(out / "scoring_sheet.json"))

    hits = rank_prototypes(analysis.presence, model.classifier, args.topk)
    if len(hits) < args.topk:
        logger.warning("Only %d prototypes carry class weight; writing %d heatmaps", len(hits), len(hits))
    for rank, hit in enumerate(hits, start=1):
        amap = activation_map(analysis.proto, hit.prototype, (width, height))
        manifest.add(render_heatmap(image, amap, out / f"heatmap_{rank}_p{hit.prototype}.png"))
    manifest.add(ResultsExporter.export_to_json({"image": args.image, "topk": [asdict(h) for h in hits]},
                                                out / "topk.json"))
    manifest.details = {"prediction": sheet.prediction}

    if args.gallery:
        if args.prototype is not None:
            d = _check_prototype(model, args.prototype)
        elif hits:
            d = hits[0].prototype
        else:
            raise ConfigError("no eligible prototype for the gallery; pass --prototype")
        dataset = load_dataset(args.gallery, _split(args.split))
        by_path = {s.path: s for s in dataset}
        entries = prototype_gallery(model, dataset, d, args.gallery_k)
        for rank, entry in enumerate(entries, start=1):
            sample = by_path[entry.path]
            amap = prototype_activation(model, sample.image, d)
            manifest.add(render_heatmap(sample.image, amap, out / "gallery" / f"p{d}_{rank}.png"))
        manifest.add(ResultsExporter.export_to_json({"prototype": d, "entries": [asdict(e) for e in entries]},
                                                    out / "gallery" / "gallery.json"))


def cmd_eval_detect(args, manifest: RunManifest):
    out = Path(args.out)
    seed = manifest.seed = _seed(args)
    tau = _tau(args.tau)
    formats = _formats(args)
    if args.min_overlap < 0 or args.min_overlap > 1:
        raise ConfigError(f"--min-overlap must lie in [0, 1], got {args.min_overlap}")
    dataset = load_dataset(args.data, _split(args.split))
    manifest.config.update({"data": args.data, "split": args.split, "tau": tau, "min_overlap": args.min_overlap})

    prototype = None
    if args.maps:
        cases = cases_from_maps(dataset, args.maps, tau)
        manifest.config["maps"] = args.maps
    else:
        if not args.ckpt:
            raise ConfigError("eval-detect needs --ckpt or --maps")
        model = _load_model(args.ckpt, manifest)
        if args.prototype == "auto":
            lesion = lesion_class(dataset, args.lesion_class)
            prototype = auto_prototype(model, lesion)
            logger.info("Top-weighted prototype of class '%s' is %d", model.class_names[lesion], prototype)
        else:
            try:
                prototype = _check_prototype(model, int(args.prototype))
            except ValueError as exc:
                raise ConfigError(f"--prototype expects an id or 'auto', got '{args.prototype}'") from exc
        cases = cases_from_model(model, dataset, prototype, tau)
        if args.save_maps:
            maps_dir = companion_path(out, "", "_maps")
            for case in cases:
                write_activation_png(case.raster, maps_dir / case.image_id)
            manifest.add(maps_dir)

    report = evaluate_detection(cases, tau, baseline_seed=seed, min_overlap=args.min_overlap,
                                prototype=prototype, config=dict(manifest.config, seed=seed))
    summary = {"AP": report.ap, "random-centroid AP": report.baseline_ap, "tau": tau,
               "cases": len(cases), "ground-truth boxes": sum(len(c.gt_boxes) for c in cases),
               "prototype": "precomputed maps" if prototype is None else prototype}
    figure = ChartGenerator().create_pr_curve(report.points, report.ap)
    manifest.add(*export_report(report.to_dict(), out, formats, report.to_frame(), "Detection report", summary,
                                [report.to_dict()["AP_definition"]], figure))
    manifest.details = {"AP": report.ap, "baseline_AP": report.baseline_ap, "points": len(report.points)}


def cmd_eval_class(args, manifest: RunManifest):
    out = Path(args.out)
    seed = manifest.seed = _seed(args)
    formats = _formats(args)
    if args.bootstrap < 0:
        raise ConfigError(f"--bootstrap must be non-negative, got {args.bootstrap}")
    model = _load_model(args.ckpt, manifest)
    dataset = load_dataset(args.data, _split(args.split))
    if dataset.class_names != model.class_names:
        raise ConfigError(f"dataset classes {dataset.class_names} differ from model classes {model.class_names}")
    resolutions = _int_list(args.resolutions, "--resolutions") or [model.resolution]
    for r in resolutions:
        if r <= 0 or r % model.config.patch_size:
            raise ConfigError(f"resolution {r} is not a positive multiple of patch size {model.config.patch_size}")
    manifest.config.update({"data": args.data, "split": args.split, "bootstrap": args.bootstrap,
                            "resolutions": resolutions})

    evaluator = PerformanceMetrics(args.bootstrap, seed)
    results = {}
    for r in resolutions:
        y_true, y_pred, probs = predict(model, dataset, r)
        results[f"{r}px"] = evaluator.calculate_all_metrics(y_true, y_pred, probs, model.class_names)
        logger.info("%dpx: BAcc %.4f, F1 %.4f", r, results[f"{r}px"]["BAcc"], results[f"{r}px"]["F1_macro"])
    table = evaluator.compare_models(results)
    best = evaluator.get_best_model(table)
    notes = [f"{name}: {line}" for name, metrics in results.items() for line in evaluator.generate_insights(metrics)]
    data = {"results": results, "best_resolution": best, "config": dict(manifest.config, seed=seed)}
    summary = {f"{name} BAcc": m["BAcc"] for name, m in results.items()}
    summary["best"] = best
    figure = ChartGenerator().create_comparison_chart(table, "Run", ["BAcc", "F1_macro", "AUC_OVR"],
                                                      "Classification metrics per resolution")
    manifest.add(*export_report(data, out, formats, table, "Classification report", summary, notes, figure))
    manifest.details = {name: m["BAcc"] for name, m in results.items()}


def cmd_ablate(args, manifest: RunManifest):
    out = Path(args.out)
    config = _train_config(args, manifest)
    formats = _formats(args)
    tau = _tau(args.tau)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    unknown = sorted(set(strategies) - set(STRATEGIES))
    if unknown or not strategies:
        raise ConfigError(f"--strategies must name some of {', '.join(STRATEGIES)}, got '{args.strategies}'")
    train = load_dataset(args.data, "train")
    val = load_dataset(args.data, "val")
    test = load_dataset(args.data, "test")
    results = run_ablation(config, train, val, test, tau, args.lesion_class, strategies, log_dir=out)
    manifest.add(*(out / f"train_log_{s}.jsonl" for s in strategies))
    table = results_frame(results)
    data = {"tau": tau, "results": table.to_dict(orient="records"), "config": manifest.config}
    summary = {f"{r.strategy} test BAcc": r.test_BAcc for r in results}
    summary.update({f"{r.strategy} AP": r.AP_top1 for r in results})
    figure = ChartGenerator().create_comparison_chart(table, "strategy", ["test_BAcc", "AP_top1", "baseline_AP"],
                                                      "Pre-training strategies")
    manifest.add(*export_report(data, out / "ablation.json", formats, table, "Pre-training ablation",
                                summary, figure=figure))


COMMANDS: Dict[str, Callable] = {
    "synth-data": cmd_synth_data,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "explain": cmd_explain,
    "eval-detect": cmd_eval_detect,
    "eval-class": cmd_eval_class,
    "ablate": cmd_ablate,
}
# commands whose --out is a report file rather than a directory
FILE_OUTPUTS = {"eval-detect", "eval-class"}


# -----------------------------
# Parser
# -----------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protopatch",
        description="Interpretable prototype patch transformer: train, explain, evaluate.",
        epilog="presets:\n" + describe_presets(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (env PROTOPATCH_LOG_LEVEL)")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Random seed (env PROTOPATCH_SEED)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config key, dotted for nested fields (repeatable)")
    common.add_argument("--preset", default=DEFAULT_PRESET, help="Base preset the config file is merged onto")
    common.add_argument("--formats", default="json,csv", help=f"Comma-separated outputs among {', '.join(FORMATS)}")

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--config", default=None, help="YAML config file")
    training.add_argument("--data", required=True, help="Dataset directory")
    training.add_argument("--out", required=True, help="Output directory")
    training.add_argument("--log", default=None, help="Extra JSON-lines training log file")

    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth-data", parents=[common], help="Generate a synthetic lesion dataset")
    p.add_argument("--spec", default=None, help="YAML synthetic dataset spec")
    p.add_argument("--out", required=True, help="Output dataset directory")

    sub.add_parser("pretrain", parents=[common, training], help="Self-supervised multi-resolution pre-training")

    p = sub.add_parser("finetune", parents=[common, training], help="Supervised fine-tuning")
    p.add_argument("--init", default=None, help="Pre-trained checkpoint")

    p = sub.add_parser("explain", parents=[common], help="Scoring sheet and prototype heatmaps for one image")
    p.add_argument("--ckpt", required=True, help="Trained checkpoint")
    p.add_argument("--image", required=True, help="Image file")
    p.add_argument("--topk", type=int, default=5, help="Number of prototypes to render")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--gallery", default=None, metavar="DATA", help="Also render the top images of a prototype")
    p.add_argument("--gallery-k", type=int, default=5, help="Images in the gallery")
    p.add_argument("--prototype", type=int, default=None, help="Gallery prototype (default: top-1 of the image)")
    p.add_argument("--split", default="test", help="Gallery split, or 'all'")

    p = sub.add_parser("eval-detect", parents=[common], help="Scale-sweep localisation AP")
    p.add_argument("--ckpt", default=None, help="Trained checkpoint")
    p.add_argument("--maps", default=None, help="Directory of precomputed 16-bit activation PNGs")
    p.add_argument("--data", required=True, help="Dataset directory with boxes.jsonl")
    p.add_argument("--split", default="test", help="Split to evaluate, or 'all'")
    p.add_argument("--prototype", default="auto", help="Prototype id or 'auto'")
    p.add_argument("--lesion-class", default=None, help="Class whose top-weighted prototype 'auto' picks")
    p.add_argument("--tau", type=float, default=0.5, help="Relative binarisation threshold")
    p.add_argument("--min-overlap", type=float, default=0.0, help="Minimum intersection over ground-truth area")
    p.add_argument("--save-maps", action="store_true", help="Write the activation maps next to the report")
    p.add_argument("--out", required=True, help="Report JSON file")

    p = sub.add_parser("eval-class", parents=[common], help="Classification metrics with bootstrap intervals")
    p.add_argument("--ckpt", required=True, help="Trained checkpoint")
    p.add_argument("--data", required=True, help="Dataset directory")
    p.add_argument("--split", default="test", help="Split to evaluate, or 'all'")
    p.add_argument("--bootstrap", type=int, default=1000, help="Bootstrap replicates (0 disables)")
    p.add_argument("--resolutions", default=None, help="Comma-separated input resolutions")
    p.add_argument("--out", required=True, help="Report JSON file")

    p = sub.add_parser("ablate", parents=[common, training], help="Compare pre-training strategies")
    p.add_argument("--tau", type=float, default=0.5, help="Relative binarisation threshold")
    p.add_argument("--lesion-class", default=None, help="Class whose top-weighted prototype is evaluated")
    p.add_argument("--strategies", default=",".join(STRATEGIES), help="Comma-separated subset of none,single,multi")
    return parser


def manifest_path(args) -> Path:
    out = Path(args.out)
    if args.command in FILE_OUTPUTS:
        return companion_path(out, ".json", ".manifest")
    return out / MANIFEST_NAME


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit code"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0, usage errors exit 2
        return 0 if exc.code in (0, None) else 2
    try:
        configure_logging(args.log_level)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code

    manifest = RunManifest(args.command, argv, datetime.now(timezone.utc).isoformat(timespec="seconds"))
    start = time.perf_counter()
    try:
        COMMANDS[args.command](args, manifest)
        manifest.status = "ok"
    except ProtoPatchError as exc:
        logger.error("%s failed: %s", args.command, exc)
        manifest.status, manifest.exit_code, manifest.error = "failed", exc.exit_code, str(exc)
        if isinstance(exc, NumericFailure):
            manifest.details = {"node": exc.node, "breakdown": exc.breakdown}
    except Exception as exc:
        logger.exception("%s crashed", args.command)
        manifest.status, manifest.exit_code, manifest.error = "crashed", 1, f"{type(exc).__name__}: {exc}"
    manifest.wall_clock_s = round(time.perf_counter() - start, 3)

    try:
        path = ResultsExporter.export_to_json(manifest.to_dict(), manifest_path(args))
        logger.info("Run manifest: %s", path)
    except DataError as exc:
        logger.error("could not write run manifest: %s", exc)
        if manifest.exit_code == 0:
            manifest.exit_code = exc.exit_code
    return manifest.exit_code
