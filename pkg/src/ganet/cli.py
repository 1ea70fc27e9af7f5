"""``ganet`` command line: synth, train, predict, evaluate and sweep.

Configuration is layered: built-in defaults, then a YAML file (``--config``,
either a path or the name of a bundled profile such as ``desk``), then
``--set section.key=value`` overrides, then the dedicated flags.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import itertools
import json
import logging
import os
import shutil
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import yaml

from . import raster
from .checkpoint import CheckpointError, load_checkpoint
from .inference import DEFAULT_SCALES, DEFAULT_STRIDE, multiscale_predict, write_prediction
from .metrics import EmptyReportError, LabelError, evaluate_maps
from .network import ConfigError, NetworkConfig, build_network
from .trainer import NumericalAbort, TrainConfig, TrainingData, train

log = logging.getLogger("ganet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "GANET_OUTPUT_ROOT"
RUN_MANIFEST = "run_manifest.json"
CONFIG_DIR = Path(__file__).parent / "configs"


class UsageError(Exception):
    pass


def default_config() -> dict:
    net = NetworkConfig().to_dict()
    tr = dataclasses.asdict(TrainConfig())
    tr["replicas"] = 1
    return {
        "data": {"dataset": None, "train_split": "train", "val_split": "val", "test_split": "test"},
        "network": net,
        "train": tr,
        "predict": {"scales": list(DEFAULT_SCALES), "stride": DEFAULT_STRIDE, "batch_size": 8, "save_probs": False},
        "evaluate": {"erosion": 3.0, "classes": None},
    }


def valid_keys(config: dict) -> list[str]:
    return [f"{s}.{k}" for s, sec in config.items() for k in sec]


def set_key(config: dict, dotted: str, value) -> None:
    section, _, key = dotted.partition(".")
    if section not in config or key not in config[section]:
        raise ConfigError(f"unknown config key {dotted!r}; valid keys: {', '.join(valid_keys(config))}")
    config[section][key] = value


def merge(config: dict, update: dict, origin: str) -> dict:
    for section, values in (update or {}).items():
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: section {section!r} must be a mapping")
        for key, value in values.items():
            set_key(config, f"{section}.{key}", value)
    return config


def read_config_file(name: str) -> dict:
    path = Path(name)
    if not path.exists():
        bundled = CONFIG_DIR / f"{name}.yaml"
        if not bundled.exists():
            have = sorted(p.stem for p in CONFIG_DIR.glob("*.yaml"))
            raise ConfigError(f"config {name!r} is neither a file nor a bundled profile {have}")
        path = bundled
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_scales(text: str) -> list[float]:
    try:
        scales = [float(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from None
    if not scales or any(s <= 0 for s in scales):
        raise argparse.ArgumentTypeError(f"scales must be positive, got {text!r}")
    return scales


def parse_classes(text: str) -> list[int]:
    return [int(c) for c in text.split(",") if c]


class WarnOnRepeat(argparse.Action):
    """Last occurrence wins; repeating a flag with a different value warns."""

    def __call__(self, parser, namespace, values, option_string=None):
        seen = getattr(namespace, "_seen", None)
        if seen is None:
            seen = {}
            setattr(namespace, "_seen", seen)
        if self.dest in seen and seen[self.dest] != values:
            warnings.warn(f"{option_string} given more than once; using {values!r} (was {seen[self.dest]!r})",
                          stacklevel=2)
        seen[self.dest] = values
        setattr(namespace, self.dest, values)


# flag dest -> config keys it sets
FLAG_KEYS = {
    "seed": ["train.seed"],
    "fusion": ["network.fusion_mode"],
    "lam": ["train.lam"],
    "backbone": ["network.backbone_depth"],
    "patch_size": ["network.patch_size", "train.patch_size"],
    "stride": ["predict.stride"],
    "scales": ["predict.scales"],
    "erosion": ["evaluate.erosion"],
    "replicas": ["train.replicas"],
    "dataset": ["data.dataset"],
    "classes": ["evaluate.classes"],
}


def resolve_config(args) -> dict:
    config = default_config()
    if getattr(args, "config", None):
        merge(config, read_config_file(args.config), args.config)
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        set_key(config, key.strip(), yaml.safe_load(raw))
    for dest, keys in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            for key in keys:
                set_key(config, key, value)
    return config


def network_config(config: dict, num_classes: int) -> NetworkConfig:
    d = dict(config["network"])
    d["num_classes"] = num_classes
    return NetworkConfig(**d)


def train_config(config: dict) -> TrainConfig:
    d = {k: v for k, v in config["train"].items() if k != "replicas"}
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# run directories


def code_hash() -> str:
    """Git-style hash over the package sources (blob hashes of each file, then of the listing)."""
    root = Path(__file__).parent
    listing = []
    for path in sorted(root.rglob("*")):
        if path.suffix not in (".py", ".yaml") or "__pycache__" in path.parts:
            continue
        data = path.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        listing.append(f"{blob} {path.relative_to(root).as_posix()}")
    text = "\n".join(listing).encode()
    return hashlib.sha1(b"tree %d\0" % len(text) + text).hexdigest()


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def prepare_run_dir(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise UsageError(f"{path} already exists and is not empty; pass --overwrite to replace it")
        if not (path / RUN_MANIFEST).exists():
            raise UsageError(f"refusing to clear {path}: it has no {RUN_MANIFEST}, so it is not a ganet run")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_run_manifest(run_dir: Path, command: str, config: dict, seed, started: str, extra=None) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "code_hash": code_hash(),
        "output_dir": str(run_dir),
        "started": started,
        "finished": now(),
    }
    if extra:
        manifest.update(extra)
    path = run_dir / RUN_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.num_tiles < 1:
        raise UsageError("--num-tiles must be at least 1")
    fractions = [float(f) for f in args.split.split(",")]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or sum(fractions) <= 0:
        raise UsageError(f"--split needs three non-negative fractions, got {args.split!r}")
    started = now()
    out = prepare_run_dir(Path(args.out), args.overwrite)
    rng = np.random.default_rng(args.seed)
    tiles = raster.generate_synthetic_dataset(args.num_tiles, args.tile_size, rng)
    counts = np.floor(np.array(fractions) / sum(fractions) * args.num_tiles).astype(int)
    counts[0] += args.num_tiles - counts.sum()
    bounds = np.concatenate([[0], np.cumsum(counts)])
    ids = [t.tile_id for t in tiles]
    splits = {name: ids[bounds[i]:bounds[i + 1]] for i, name in enumerate(("train", "val", "test"))}
    manifest = raster.DatasetManifest(
        root=out,
        splits=splits,
        image_pattern="images/{id}.png",
        dsm_pattern="dsm/{id}.tif",
        label_pattern="labels/{id}.png",
        color_map=raster.SYNTHETIC_COLOR_MAP,
        ground_resolution=1.0,
    )
    for tile in tiles:
        raster.write_tile(tile, manifest)
    manifest.save()
    params = {"num_tiles": args.num_tiles, "tile_size": args.tile_size, "split": fractions}
    write_run_manifest(out, "synth", params, args.seed, started)
    print(f"wrote {args.num_tiles} tiles to {out} ({', '.join(f'{k}={len(v)}' for k, v in splits.items())})")
    return EXIT_OK


def _dataset(config: dict) -> raster.DatasetManifest:
    if not config["data"]["dataset"]:
        raise UsageError("no dataset given; use --dataset or data.dataset in the config")
    return raster.DatasetManifest.read(config["data"]["dataset"])


def run_name(config: dict) -> str:
    return f"{config['network']['fusion_mode']}_lam{config['train']['lam']:g}_seed{config['train']['seed']}"


def train_run(config: dict, run_dir: Path, data: TrainingData | None = None) -> dict:
    started = now()
    manifest = _dataset(config)
    if data is None:
        train_tiles = manifest.load_split(config["data"]["train_split"])
        val_split = config["data"]["val_split"]
        val_tiles = manifest.load_split(val_split) if val_split and manifest.splits.get(val_split) else []
        data = TrainingData.prepare(train_tiles, val_tiles, manifest.num_classes, manifest.ignore_value)
    net = build_network(network_config(config, data.num_classes), config["train"]["seed"])
    result = train(net, data, train_config(config), replicas=int(config["train"]["replicas"]), out_dir=run_dir)
    summary = {"best_val_avg_f1": result.best_score, "steps": len(result.records)}
    if result.records:
        summary["final_loss"] = result.records[-1]["total"]
    write_run_manifest(run_dir, "train", config, config["train"]["seed"], started, {"summary": summary})
    return summary


def cmd_train(args) -> int:
    config = resolve_config(args)
    run_dir = Path(args.out) if args.out else output_root() / run_name(config)
    prepare_run_dir(run_dir, args.overwrite)
    summary = train_run(config, run_dir)
    print(f"trained {summary['steps']} steps into {run_dir}")
    return EXIT_OK


def predict_run(checkpoint, tiles, config: dict, out_dir: Path, color_map) -> list[str]:
    net, normalization, _ = load_checkpoint(checkpoint)
    p = config["predict"]
    written = []
    for tile in tiles:
        field = multiscale_predict(net, tile, p["scales"], net.config.patch_size, p["stride"], normalization,
                                   p["batch_size"])
        write_prediction(field, out_dir, tile.tile_id, color_map, p["save_probs"])
        written.append(tile.tile_id)
    return written


def cmd_predict(args) -> int:
    config = resolve_config(args)
    if args.save_probs:
        config["predict"]["save_probs"] = True
    if not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    started = now()
    manifest = _dataset(config)
    split = args.split or config["data"]["test_split"]
    ids = args.tiles or manifest.splits.get(split)
    if not ids:
        raise UsageError(f"no tiles to predict (split {split!r} is empty or missing)")
    tiles = [manifest.load(t, with_labels=False) for t in ids]
    out = prepare_run_dir(Path(args.out), args.overwrite)
    written = predict_run(args.checkpoint, tiles, config, out, manifest.color_map)
    write_run_manifest(out, "predict", config, None, started,
                       {"checkpoint": str(args.checkpoint), "tiles": written})
    print(f"wrote predictions for {len(written)} tiles to {out}")
    return EXIT_OK


def evaluate_run(pred_dir: Path, manifest: raster.DatasetManifest, tile_ids, erosion, classes):
    pairs = []
    for tile_id in tile_ids:
        path = pred_dir / f"{tile_id}_label.png"
        if not path.exists():
            raise FileNotFoundError(f"prediction missing for tile {tile_id}: {path}")
        pred = raster.decode_labels(raster._read_image(path), manifest.color_map)
        truth = manifest.load(tile_id).labels
        if pred.shape != truth.shape:
            raise raster.DimensionError(f"{tile_id}: prediction {pred.shape} vs truth {truth.shape}")
        # predictions never carry the ignore label; keep them in range for the confusion matrix
        pairs.append((np.where(pred == manifest.ignore_value, 0, pred), truth))
    subset = set(classes) if classes else None
    return evaluate_maps(pairs, manifest.num_classes, erosion, manifest.ignore_value, subset)


def cmd_evaluate(args) -> int:
    config = resolve_config(args)
    started = now()
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory not found: {pred_dir}")
    manifest = _dataset(config)
    ids = sorted(p.name[: -len("_label.png")] for p in pred_dir.glob("*_label.png"))
    if not ids:
        raise FileNotFoundError(f"no *_label.png predictions in {pred_dir}")
    e = config["evaluate"]
    report = evaluate_run(pred_dir, manifest, ids, e["erosion"], e["classes"])
    out = prepare_run_dir(Path(args.out) if args.out else pred_dir / "evaluation", args.overwrite)
    names = [c.name for c in sorted(manifest.color_map, key=lambda c: c.class_id) if c.class_id != manifest.ignore_value]
    (out / "report.json").write_text(report.to_json(names) + "\n")
    table = report.table(names)
    (out / "report.txt").write_text(table + "\n")
    write_run_manifest(out, "evaluate", config, None, started, {"predictions": str(pred_dir), "tiles": ids})
    print(table)
    return EXIT_OK


def cmd_sweep(args) -> int:
    """Train every fusion x lambda x seed combination and score each on the test split."""
    base = resolve_config(args)
    root = Path(args.out) if args.out else output_root() / "sweep"
    started = now()
    prepare_run_dir(root, args.overwrite)
    manifest = _dataset(base)
    train_tiles = manifest.load_split(base["data"]["train_split"])
    val_split = base["data"]["val_split"]
    val_tiles = manifest.load_split(val_split) if val_split and manifest.splits.get(val_split) else []
    data = TrainingData.prepare(train_tiles, val_tiles, manifest.num_classes, manifest.ignore_value)
    test_ids = manifest.splits.get(base["data"]["test_split"]) or []
    test_tiles = [manifest.load(t, with_labels=False) for t in test_ids]

    fusions = args.fusions or [base["network"]["fusion_mode"]]
    lams = args.lams or [base["train"]["lam"]]
    seeds = args.seeds or [base["train"]["seed"]]
    results = []
    for fusion, lam, seed in itertools.product(fusions, lams, seeds):
        config = copy.deepcopy(base)
        set_key(config, "network.fusion_mode", fusion)
        set_key(config, "train.lam", lam)
        set_key(config, "train.seed", seed)
        run_dir = root / run_name(config)
        run_dir.mkdir(parents=True)
        train_run(config, run_dir, data)
        row = {"fusion": fusion, "lambda": lam, "seed": seed, "run": run_dir.name}
        if test_tiles:
            pred_dir = run_dir / "test_predictions"
            predict_run(run_dir / "checkpoint_last.pt", test_tiles, config, pred_dir, manifest.color_map)
            report = evaluate_run(pred_dir, manifest, test_ids, config["evaluate"]["erosion"],
                                  config["evaluate"]["classes"])
            row.update(oa=report.overall_accuracy, average_f1=report.average_f1)
        results.append(row)
        log.info("sweep %s", row)
        print(json.dumps(row))
    (root / "sweep_results.json").write_text(json.dumps(results, indent=2) + "\n")
    write_run_manifest(root, "sweep", base, None, started,
                       {"axes": {"fusion": fusions, "lambda": lams, "seed": seeds}})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def add_common(p: argparse.ArgumentParser, *flags: str) -> None:
    p.add_argument("--config", action=WarnOnRepeat, help="YAML config file or bundled profile name (desk, full)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.lr_init=0.02")
    p.add_argument("--dataset", action=WarnOnRepeat, help="dataset directory (contains dataset.yaml)")
    p.add_argument("--out", action=WarnOnRepeat, help=f"output directory (default under ${OUTPUT_ROOT_ENV})")
    p.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
    options = {
        "seed": dict(type=int),
        "fusion": dict(choices=["none", "sum", "gac"]),
        "lambda": dict(dest="lam", type=float, help="height loss weight"),
        "backbone": dict(choices=["tiny", "50", "101", "152"]),
        "patch-size": dict(type=int),
        "stride": dict(type=int, help="sliding-window stride in pixels"),
        "scales": dict(type=parse_scales, help="comma separated, e.g. 0.8,1,1.2"),
        "erosion": dict(type=float, help="boundary erosion radius in pixels (0 disables)"),
        "replicas": dict(type=int, help="simulated data-parallel replicas"),
        "classes": dict(type=parse_classes, help="class ids to score, comma separated"),
    }
    for name in flags:
        p.add_argument(f"--{name}", action=WarnOnRepeat, **options[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ganet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic height-disambiguation dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-tiles", type=int, default=24)
    p.add_argument("--tile-size", type=int, default=128)
    p.add_argument("--split", default="0.6,0.2,0.2", help="train,val,test fractions")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one network")
    add_common(p, "seed", "fusion", "lambda", "backbone", "patch-size", "replicas", "stride", "erosion")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="sliding-window multi-scale prediction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", help="dataset split to predict (default: test)")
    p.add_argument("--tiles", nargs="+", help="explicit tile ids")
    p.add_argument("--save-probs", action="store_true")
    add_common(p, "stride", "scales")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of *_label.png predictions")
    add_common(p, "erosion", "classes")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="ablation sweep over fusion modes, lambdas and seeds")
    add_common(p, "seed", "fusion", "lambda", "backbone", "patch-size", "replicas", "stride", "scales",
               "erosion", "classes")
    p.add_argument("--fusions", nargs="+", choices=["none", "sum", "gac"])
    p.add_argument("--lambdas", dest="lams", nargs="+", type=float)
    p.add_argument("--seeds", nargs="+", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"ganet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, KeyError, raster.RasterError, CheckpointError, LabelError, EmptyReportError) as exc:
        print(f"ganet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"ganet {args.command}: numerical abort: {exc} (batch {exc.batch_ids})", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
