"""Command-line entry point: ``agecycle {synth-data,train,translate,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml
from PIL import Image as PILImage

from . import __version__
from ._validation import InvalidInputError
from .data import GroupScheme, IMAGE_SUFFIXES, assign_age_group, load_image, to_uint8
from .evaluation import DEFAULT_THRESHOLD, EvaluationError, RemoteEstimator, build_oracle_backend, build_report
from .trainer import ConfigError, Dataset, TrainConfig, checkpoint_meta, fit_state, jsonl_logger, load_checkpoint
from .estimator import translate

logger = logging.getLogger("agecycle")

RUN_MANIFEST = "run_manifest.json"


# ---------------------------------------------------------------- synth-data

def cmd_synth_data(args) -> int:
    from .synthetic import write_dataset

    manifest = write_dataset(args.out, args.subjects, args.groups, args.resolution, args.seed)
    print(manifest)
    return 0


# ---------------------------------------------------------------- train

_RUN_KEYS = {"dataset", "output", "group_boundaries"}


def load_config_file(path) -> dict:
    """Read a flat key-value document (YAML or JSON)."""
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    doc = yaml.safe_load(text) or {}
    if not isinstance(doc, dict):
        raise ConfigError([f"{path}: expected a flat key-value mapping"])
    nested = [k for k, v in doc.items() if isinstance(v, dict) and k != "weights"]
    if nested:
        raise ConfigError([f"{k}: nested sections are not supported" for k in nested])
    for key in ("dataset", "output"):
        if key in doc and doc[key] is not None and not Path(doc[key]).is_absolute():
            doc[key] = str(Path(path).parent / doc[key])
    return doc


def resolve_train_config(args) -> tuple[TrainConfig, dict]:
    """Merge config file and flags (flags win); report every invalid field at once."""
    values = load_config_file(args.config)
    run = {k: values.pop(k) for k in list(values) if k in _RUN_KEYS}
    flag_map = {
        "seed": args.seed,
        "resolution": args.resolution,
        "n_groups": args.groups,
        "epochs": args.epochs,
        "lambda_actv": args.lambda_actv,
    }
    values.update({k: v for k, v in flag_map.items() if v is not None})
    if args.no_attention:
        values["use_attention"] = False
    if args.unordered_input:
        values["ordered_input"] = False
    if args.dataset:
        run["dataset"] = args.dataset
    if args.out:
        run["output"] = args.out
    problems = []
    if not run.get("dataset"):
        problems.append("dataset: a manifest path is required (config key 'dataset' or --dataset)")
    elif not Path(run["dataset"]).is_file():
        problems.append(f"dataset: manifest {run['dataset']} not found")
    if not run.get("output"):
        problems.append("output: a run directory is required (config key 'output' or --out)")
    config = None
    try:
        config = TrainConfig.from_dict(values)
    except ConfigError as exc:
        problems += exc.problems
    except TypeError as exc:
        problems.append(str(exc))
    if problems:
        raise ConfigError(problems)
    return config, run


def _scheme(config: TrainConfig, run: dict) -> GroupScheme:
    if run.get("group_boundaries"):
        return GroupScheme(tuple(run["group_boundaries"]))
    return GroupScheme.uniform(config.n_groups)


def cmd_train(args) -> int:
    config, run = resolve_train_config(args)
    out = Path(run["output"])
    out.mkdir(parents=True, exist_ok=True)
    scheme = _scheme(config, run)
    dataset = Dataset.from_manifest(run["dataset"], config.resolution, scheme)
    log_path = out / "train_log.jsonl"
    if not args.resume and log_path.exists():
        log_path.unlink()
    log = jsonl_logger(log_path)
    try:
        result = fit_state(config, dataset, out / "checkpoints", resume=args.resume, on_step=log,
                           max_steps=args.max_steps)
    finally:
        log.close()
    manifest = {
        "tool_version": __version__,
        "config": config.to_dict(),
        "group_boundaries": list(scheme.boundaries),
        "checkpoint": str(result.checkpoint),
        "checkpoints": sorted(str(p) for p in (out / "checkpoints").glob("*.ckpt")),
        "dataset": {"manifest": str(Path(run["dataset"]).resolve()), "sha256": dataset.digest},
        "log": str(log_path),
        "metrics": {
            "loss_weights": None if result.state.weights is None else vars(result.state.weights),
            "final_step": result.state.step,
            "final_losses": result.history[-1].to_dict() if result.history else None,
        },
    }
    (out / RUN_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    print(result.checkpoint)
    return 0


# ---------------------------------------------------------------- translate

def check_direction(source: int, targets, direction: str, n_groups: int) -> list[int]:
    targets = [int(t) for t in targets]
    for t in targets:
        if not 0 <= t < n_groups:
            raise InvalidInputError(f"target group {t} outside [0, {n_groups})")
        if direction == "progress" and t <= source:
            raise InvalidInputError(f"progress needs target > source, got source {source} -> target {t}")
        if direction == "regress" and t >= source:
            raise InvalidInputError(f"regress needs target < source, got source {source} -> target {t}")
    return targets


def attention_png(mask) -> np.ndarray:
    """Quantize a [0, 1] mask to 8-bit: white keeps the input, dark marks modified pixels."""
    return np.clip(np.rint(np.asarray(mask, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _marked(panel: np.ndarray, width: int = 2) -> np.ndarray:
    out = panel.copy()
    red = np.array([255, 0, 0], dtype=np.uint8)
    out[:width], out[-width:], out[:, :width], out[:, -width:] = red, red, red, red
    return out


def make_grid(image, outputs, attention=None) -> np.ndarray:
    """Input (red frame) followed by one panel per output; optional attention row beneath."""
    row = [_marked(to_uint8(image))] + [to_uint8(o) for o in outputs]
    top = np.concatenate(row, axis=1)
    if attention is None:
        return top
    h, w = np.asarray(image).shape[:2]
    blank = np.full((h, w, 3), 255, dtype=np.uint8)
    maps = [np.repeat(attention_png(a)[..., None], 3, axis=2) for a in attention]
    return np.concatenate([top, np.concatenate([blank] + maps, axis=1)], axis=0)


_AGE_NAME = re.compile(r"^(\d+)_")


def _source_group(path: Path, explicit, scheme: GroupScheme) -> int:
    if explicit is not None:
        return int(explicit)
    m = _AGE_NAME.match(path.name)
    if not m:
        raise InvalidInputError(f"{path.name}: pass --source-group or name the file AGE_*.ext")
    return assign_age_group(int(m.group(1)), scheme)


def translate_file(state, path: Path, source: int, targets, direction: str, out_dir: Path, export_attention: bool):
    cfg = state.config
    targets = check_direction(source, targets, direction, cfg.n_groups)
    image = load_image(path, cfg.resolution)
    result = translate(state, np.repeat(image[None], len(targets), axis=0), source, targets)
    grid = make_grid(image, result.fused, result.attention if export_attention else None)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / f"{path.stem}_grid.png"]
    PILImage.fromarray(grid).save(written[0])
    if export_attention:
        for t, mask in zip(targets, result.attention):
            p = out_dir / f"{path.stem}_attention_g{t}.png"
            PILImage.fromarray(attention_png(mask), mode="L").save(p)
            written.append(p)
    return written


def cmd_translate(args) -> int:
    state = load_checkpoint(args.checkpoint)
    scheme = GroupScheme.uniform(state.config.n_groups)
    src = Path(args.input)
    files = sorted(f for f in src.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES) if src.is_dir() else [src]
    if not files:
        raise InvalidInputError(f"no images found at {src}")
    jobs = [(f, _source_group(f, args.source_group, scheme)) for f in files]
    for f, s in jobs:
        check_direction(s, args.targets, args.direction, state.config.n_groups)

    def run(job):
        f, s = job
        return translate_file(state, f, s, args.targets, args.direction, Path(args.out), args.export_attention)

    with ThreadPoolExecutor(max(1, args.workers)) as pool:
        for written in pool.map(run, jobs):
            for p in written:
                print(p)
    return 0


# ---------------------------------------------------------------- eval

def evaluation_pairs(records, n_groups: int):
    """Every (record, target) pair with target != the record's own group."""
    return [(r, t) for r in records for t in range(n_groups) if t != r.group]


def evaluate_checkpoint(state, dataset: Dataset, backend_name: str = "oracle", endpoint=None, credentials=None,
                        threshold: float = DEFAULT_THRESHOLD, label: str = "model"):
    cfg = state.config
    train, test = dataset.split(cfg.train_fraction, cfg.seed)
    if not test:
        raise InvalidInputError("the test split is empty")
    pairs = evaluation_pairs(test, cfg.n_groups)
    images = np.stack([dataset.image_fn(r) for r, _ in pairs])
    sources = np.array([r.group for r, _ in pairs])
    targets = np.array([t for _, t in pairs])
    outputs = translate(state, images, sources, targets).fused
    if backend_name == "oracle":
        test_images = dataset.images(test)
        backend = build_oracle_backend(
            test_images, [r.subject_id for r in test], cfg.n_groups, cfg.resolution, dataset.scheme,
            exclude_subjects=[r.subject_id for r in dataset.records],
        )
    elif backend_name == "remote":
        if not endpoint:
            raise InvalidInputError("--backend remote needs --endpoint")
        backend = RemoteEstimator(endpoint, credentials)
    else:
        raise InvalidInputError(f"unknown backend {backend_name!r}")
    return build_report(images, outputs, targets, backend, dataset.scheme, threshold, label)


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    scheme = GroupScheme.uniform(state.config.n_groups)
    meta = checkpoint_meta(args.checkpoint)
    dataset = Dataset.from_manifest(args.dataset, state.config.resolution, scheme)
    expected = meta.get("extra", {}).get("dataset_sha256")
    if expected and expected != dataset.digest:
        logger.warning("dataset manifest differs from the one used for training")
    # the report is built fully in memory so a backend failure leaves no partial output
    report = evaluate_checkpoint(state, dataset, args.backend, args.endpoint, args.credentials,
                                 args.threshold, args.label)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_table() + "\n", encoding="utf-8")
    run_manifest = Path(args.checkpoint).resolve().parent.parent / RUN_MANIFEST
    if run_manifest.is_file():
        doc = json.loads(run_manifest.read_text(encoding="utf-8"))
        doc.setdefault("metrics", {})["evaluation"] = {
            "report": str((out / "report.json").resolve()), **report.to_dict()
        }
        run_manifest.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    print(report.to_table())
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agecycle", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="render the procedural face dataset with a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=500)
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train the generator pair")
    p.add_argument("--config")
    p.add_argument("--dataset", help="manifest CSV (overrides the config)")
    p.add_argument("--out", help="run directory (overrides the config)")
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--groups", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda-actv", type=float)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--unordered-input", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--max-steps", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="render age sequences for an image or a directory")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("--direction", choices=("progress", "regress"), required=True)
    p.add_argument("--targets", type=int, nargs="+", required=True)
    p.add_argument("--source-group", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--export-attention", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="age accuracy and identity preservation on the test split")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--backend", choices=("oracle", "remote"), default="oracle")
    p.add_argument("--endpoint")
    p.add_argument("--credentials")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--label", default="model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InvalidInputError, EvaluationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
