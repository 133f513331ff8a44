"""Config-driven command line: partition, pretrain-teacher, distill, evaluate, ablate.

Values resolve in three layers: built-in defaults, then the --config YAML
file, then explicit flags. The fully resolved configuration is dumped next to
every run's outputs, so re-running from that file reproduces the run.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import yaml

from . import data as data_mod
from . import metrics, models, train
from .core import LossWeights
from .fileio import read_key_values, write_key_values

DEFAULT_CONFIG = {
    "dataset": {
        "kind": "synthetic",
        "n_classes": 4,
        "image_size": [64, 64],
        "n_train": 200,
        "n_val": 50,
        "seed": 13,
        "root": None,
        "train_list": None,
        "val_list": None,
    },
    "partition": {"fraction": "1/8", "seed": 0, "count": None},
    "student": {"width": 8, "seed": 0},
    "teachers": {"deep": None, "wide": None},
    "train": {
        "lr": 0.1,
        "steps": 300,
        "batch_size": 8,
        "momentum": 0.9,
        "weight_decay": 0.0005,
        "lambda1": 0.002,
        "lambda2": 100.0,
        "grid": [7, 7],
        "seed": 0,
        "augment": True,
        "crop_size": None,
        "val_every": None,
        # which branches feed each loss level
        "pixel_loss": "both",  # both | labeled | none
        "image_from": "deep",  # deep | wide | both | none
        "region_from": "wide",  # deep | wide | both | none
    },
    "out": "runs/out",
}

# VOC-style runs crop to the conventional training size unless overridden.
VOC_DEFAULT_CROP = [512, 512]

_FLAG_TO_CONFIG = {
    "dataset": ("dataset", "kind"),
    "n_classes": ("dataset", "n_classes"),
    "image_size": ("dataset", "image_size"),
    "n_train": ("dataset", "n_train"),
    "n_val": ("dataset", "n_val"),
    "data_seed": ("dataset", "seed"),
    "data_root": ("dataset", "root"),
    "train_list": ("dataset", "train_list"),
    "val_list": ("dataset", "val_list"),
    "fraction": ("partition", "fraction"),
    "partition_seed": ("partition", "seed"),
    "labeled_count": ("partition", "count"),
    "width": ("student", "width"),
    "teacher_deep": ("teachers", "deep"),
    "teacher_wide": ("teachers", "wide"),
    "lr": ("train", "lr"),
    "steps": ("train", "steps"),
    "batch_size": ("train", "batch_size"),
    "lambda1": ("train", "lambda1"),
    "lambda2": ("train", "lambda2"),
    "grid": ("train", "grid"),
    "seed": ("train", "seed"),
    "val_every": ("train", "val_every"),
    "pixel_loss": ("train", "pixel_loss"),
    "image_from": ("train", "image_from"),
    "region_from": ("train", "region_from"),
    "out": ("out",),
}


def parse_pair(text: str) -> list[int]:
    try:
        h, w = text.lower().split("x")
        return [int(h), int(w)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HxW (e.g. 7x7), got {text!r}") from exc


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:12]


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        for section, values in loaded.items():
            if section not in cfg:
                raise SystemExit(f"unknown config section {section!r}")
            if isinstance(values, dict):
                cfg[section].update(values)
            else:
                cfg[section] = values
    for flag, path in _FLAG_TO_CONFIG.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
    if getattr(args, "disable_pixel_loss", False):
        cfg["train"]["pixel_loss"] = "none"
    if getattr(args, "disable_image_loss", False):
        cfg["train"]["image_from"] = "none"
    if getattr(args, "disable_region_loss", False):
        cfg["train"]["region_from"] = "none"
    if cfg["dataset"]["kind"] == "voc" and cfg["train"]["crop_size"] is None:
        cfg["train"]["crop_size"] = VOC_DEFAULT_CROP
    return cfg


def dump_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))


def build_datasets(cfg: dict):
    """(train dataset, val dataset, n_classes) from the dataset section."""
    dcfg = cfg["dataset"]
    if dcfg["kind"] == "synthetic":
        base = data_mod.SyntheticSceneSpec(
            n_classes=int(dcfg["n_classes"]),
            image_size=tuple(dcfg["image_size"]),
            seed=int(dcfg["seed"]),
        )
        train_ds = data_mod.generate_synthetic(base, int(dcfg["n_train"]))
        val_spec = data_mod.SyntheticSceneSpec(
            n_classes=base.n_classes, image_size=base.image_size, seed=base.seed + 1
        )
        val_ds = data_mod.generate_synthetic(val_spec, int(dcfg["n_val"]))
        return train_ds, val_ds, base.n_classes
    if dcfg["kind"] == "voc":
        root = dcfg["root"]
        if not root or not Path(root).is_dir():
            raise SystemExit(f"dataset root not found: {root!r}")
        if not dcfg["train_list"] or not dcfg["val_list"]:
            raise SystemExit("voc datasets need train_list and val_list")
        train_ds = data_mod.load_voc_style(root, dcfg["train_list"])
        val_ds = data_mod.load_voc_style(root, dcfg["val_list"])
        return train_ds, val_ds, int(dcfg["n_classes"])
    raise SystemExit(f"unknown dataset kind {dcfg['kind']!r}")


def switches_from_config(tcfg: dict) -> train.LossSwitches:
    pixel = tcfg["pixel_loss"]
    image = tcfg["image_from"]
    region = tcfg["region_from"]
    for name, value, allowed in (
        ("pixel_loss", pixel, ("both", "labeled", "none")),
        ("image_from", image, ("deep", "wide", "both", "none")),
        ("region_from", region, ("deep", "wide", "both", "none")),
    ):
        if value not in allowed:
            raise SystemExit(f"train.{name} must be one of {allowed}, got {value!r}")
    return train.LossSwitches(
        pixel_labeled=pixel in ("both", "labeled"),
        pixel_unlabeled=pixel == "both",
        image_deep=image in ("deep", "both"),
        image_wide=image in ("wide", "both"),
        region_deep=region in ("deep", "both"),
        region_wide=region in ("wide", "both"),
    )


def make_train_config(cfg: dict) -> train.TrainConfig:
    tcfg = cfg["train"]
    return train.TrainConfig(
        lr=float(tcfg["lr"]),
        total_steps=int(tcfg["steps"]),
        momentum=float(tcfg["momentum"]),
        weight_decay=float(tcfg["weight_decay"]),
        weights=LossWeights(lambda1=float(tcfg["lambda1"]), lambda2=float(tcfg["lambda2"])),
        grid=tuple(int(v) for v in tcfg["grid"]),
        seed=int(tcfg["seed"]),
        switches=switches_from_config(tcfg),
        batch_size=int(tcfg["batch_size"]),
        crop_size=tuple(tcfg["crop_size"]) if tcfg["crop_size"] else None,
        augment=bool(tcfg["augment"]),
        val_every=int(tcfg["val_every"]) if tcfg["val_every"] else None,
    )


def _train_manifest(cfg: dict, tconf: train.TrainConfig) -> dict:
    sw = tconf.switches
    return {
        "config_hash": config_hash(cfg),
        "lr": tconf.lr,
        "total_steps": tconf.total_steps,
        "momentum": tconf.momentum,
        "weight_decay": tconf.weight_decay,
        "lambda1": tconf.weights.lambda1,
        "lambda2": tconf.weights.lambda2,
        "grid": f"{tconf.grid[0]}x{tconf.grid[1]}",
        "train_seed": tconf.seed,
        "batch_size": tconf.batch_size,
        "augment": tconf.augment,
        "crop_size": "native" if tconf.crop_size is None else f"{tconf.crop_size[0]}x{tconf.crop_size[1]}",
        "val_every": tconf.validation_interval,
        "switch.pixel_labeled": sw.pixel_labeled,
        "switch.pixel_unlabeled": sw.pixel_unlabeled,
        "switch.image_deep": sw.image_deep,
        "switch.image_wide": sw.image_wide,
        "switch.region_deep": sw.region_deep,
        "switch.region_wide": sw.region_wide,
    }


def _make_partition(cfg: dict, ids) -> data_mod.PartitionProtocol:
    pcfg = cfg["partition"]
    if pcfg.get("count"):
        return data_mod.partition(ids, seed=int(pcfg["seed"]), count=int(pcfg["count"]))
    return data_mod.partition(ids, fraction=str(pcfg["fraction"]), seed=int(pcfg["seed"]))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_partition(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(cfg["out"])
    if args.list_file:
        ids = data_mod.read_id_list(args.list_file)
    else:
        train_ds, _, _ = build_datasets(cfg)
        ids = list(train_ds.ids)
    protocol = _make_partition(cfg, ids)
    labeled_path, unlabeled_path = data_mod.write_split_files(protocol, out_dir / "splits")
    dump_config(cfg, out_dir)
    print(f"labeled {len(protocol.labeled_ids)} -> {labeled_path}")
    print(f"unlabeled {len(protocol.unlabeled_ids)} -> {unlabeled_path}")
    return 0


def cmd_pretrain_teacher(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(cfg["out"])
    train_ds, val_ds, n_classes = build_datasets(cfg)
    tconf = make_train_config(cfg)
    net, result = train.pretrain_teacher(args.kind, train_ds, val_ds, n_classes, tconf)
    ckpt_dir = out_dir / f"teacher_{args.kind}"
    models.save_checkpoint(
        net, ckpt_dir, extra={"val_miou": f"{result.best_miou:.4f}", "kind": args.kind}
    )
    train.write_step_records(result.records, out_dir / f"teacher_{args.kind}_records.csv")
    dump_config(cfg, out_dir)
    print(f"{args.kind} teacher val mIoU {result.best_miou:.4f} -> {ckpt_dir}")
    return 0


def _load_teachers(cfg: dict) -> models.TeacherEnsemble:
    paths = cfg["teachers"]
    if not paths.get("deep") or not paths.get("wide"):
        raise SystemExit("distillation needs --teacher-deep and --teacher-wide checkpoints")
    t_d = models.freeze(models.load_checkpoint(paths["deep"]))
    t_w = models.freeze(models.load_checkpoint(paths["wide"]))
    return models.TeacherEnsemble(t_d=t_d, t_w=t_w)


def cmd_distill(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(cfg["out"])
    train_ds, val_ds, n_classes = build_datasets(cfg)
    protocol = _make_partition(cfg, list(train_ds.ids))
    data_mod.write_split_files(protocol, out_dir / "splits")
    teachers = _load_teachers(cfg)
    tconf = make_train_config(cfg)
    student = models.build_toy_student(
        n_classes, width=int(cfg["student"]["width"]), seed=int(cfg["student"]["seed"])
    )
    bundle = train.DataBundle(train=train_ds, val=val_ds, protocol=protocol, n_classes=n_classes)
    result = train.run_distillation(tconf, bundle, teachers, student)
    models.save_checkpoint(
        result.student, out_dir / "student", extra={"val_miou": f"{result.best_miou:.4f}"}
    )
    train.write_step_records(result.records, out_dir / "records.csv")
    manifest = _train_manifest(cfg, tconf)
    manifest.update(
        {
            "partition_fraction": protocol.fraction_token,
            "partition_seed": protocol.seed,
            "labeled_count": protocol.count,
            "teacher_deep_hash": teachers.t_d.frozen_hash,
            "teacher_wide_hash": teachers.t_w.frozen_hash,
            "best_miou": f"{result.best_miou:.4f}",
            "best_step": result.best_step,
        }
    )
    write_key_values(out_dir / "manifest.txt", manifest)
    dump_config(cfg, out_dir)
    print(f"student val mIoU {result.best_miou:.4f} (best step {result.best_step}) -> {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise SystemExit(f"checkpoint not found: {ckpt}")
    net = models.load_checkpoint(ckpt)
    train_ds, val_ds, n_classes = build_datasets(cfg)
    dataset = train_ds if args.split == "train" else val_ds
    score = train.evaluate_miou(net, dataset, n_classes)
    sample = dataset[0]
    cost = models.model_cost(net, tuple(sample.image.shape))
    print(f"{net.arch_name} {args.split} mIoU {score:.4f} (params {cost.params}, flops {cost.flops})")
    if args.csv:
        summary = metrics.RunSummary(name=net.arch_name, cost=cost, mious={args.split: score})
        metrics.write_csv([summary], args.csv)
        print(f"wrote {args.csv}")
    return 0


def _distill_subprocess(config_path: Path) -> None:
    proc = subprocess.run(
        [sys.executable, "-m", "mgd.cli", "distill", "--config", str(config_path)],
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        raise RuntimeError(f"sweep run failed for {config_path}:\n{proc.stdout}\n{proc.stderr}")


def _switches_to_strings(sw: train.LossSwitches) -> tuple[str, str, str]:
    """Inverse of switches_from_config for the standard ablation rows."""
    if sw.pixel_labeled and sw.pixel_unlabeled:
        pixel = "both"
    elif sw.pixel_labeled:
        pixel = "labeled"
    else:
        pixel = "none"
    def source(deep: bool, wide: bool) -> str:
        return {(True, True): "both", (True, False): "deep",
                (False, True): "wide", (False, False): "none"}[(deep, wide)]
    return pixel, source(sw.image_deep, sw.image_wide), source(sw.region_deep, sw.region_wide)


SWITCH_ROWS = [
    (label, *_switches_to_strings(sw)) for label, sw in train.standard_switch_rows()
]


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)

    variants: list[tuple[str, dict]] = []
    if args.mode == "switches":
        for label, pixel, image, region in SWITCH_ROWS:
            variant = copy.deepcopy(cfg)
            variant["train"]["pixel_loss"] = pixel
            variant["train"]["image_from"] = image
            variant["train"]["region_from"] = region
            variants.append((label, variant))
    elif args.mode == "grid":
        for side in (3, 5, 7, 9, 11):
            variant = copy.deepcopy(cfg)
            variant["train"]["grid"] = [side, side]
            variants.append((f"grid_{side}x{side}", variant))
    else:
        raise SystemExit(f"unknown ablation mode {args.mode!r}")

    jobs = []
    for label, variant in variants:
        run_hash = config_hash(variant)
        run_dir = out_dir / run_hash
        variant["out"] = str(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        config_path = run_dir / "sweep_config.yaml"
        config_path.write_text(yaml.safe_dump(variant, sort_keys=True))
        jobs.append((label, run_hash, run_dir, config_path))

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(lambda job: _distill_subprocess(job[3]), jobs))
    else:
        for job in jobs:
            _distill_subprocess(job[3])

    rows = []
    for label, run_hash, run_dir, _ in jobs:
        manifest = read_key_values(run_dir / "manifest.txt")
        rows.append((run_hash, label, manifest["partition_fraction"], float(manifest["best_miou"])))
    sweep_path = out_dir / "sweep.csv"
    with open(sweep_path, "w") as handle:
        handle.write("config_hash,label,partition,miou\n")
        for run_hash, label, partition_tag, score in rows:
            handle.write(f"{run_hash},{label},{partition_tag},{score:.4f}\n")

    student = models.build_toy_student(
        int(cfg["dataset"]["n_classes"]), width=int(cfg["student"]["width"])
    )
    size = (3, *[int(v) for v in cfg["dataset"]["image_size"]])
    cost = models.model_cost(student, size)
    summaries = [
        metrics.RunSummary(name=label, cost=cost, mious={partition_tag: score})
        for _, label, partition_tag, score in rows
    ]
    table = metrics.report_table(summaries)
    (out_dir / "report.txt").write_text(table)
    print(table)
    print(f"wrote {sweep_path}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="YAML config file")
    parser.add_argument("--out", type=str, default=None, help="output directory")
    parser.add_argument("--dataset", choices=["synthetic", "voc"], default=None)
    parser.add_argument("--n-classes", type=int, default=None)
    parser.add_argument("--image-size", type=parse_pair, default=None, metavar="HxW")
    parser.add_argument("--n-train", type=int, default=None)
    parser.add_argument("--n-val", type=int, default=None)
    parser.add_argument("--data-seed", type=int, default=None)
    parser.add_argument("--data-root", type=str, default=None)
    parser.add_argument("--train-list", type=str, default=None)
    parser.add_argument("--val-list", type=str, default=None)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--steps", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None, help="training seed")
    parser.add_argument("--val-every", type=int, default=None)


def _add_switch_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--pixel-loss", choices=["both", "labeled", "none"], default=None)
    parser.add_argument("--image-from", choices=["deep", "wide", "both", "none"], default=None)
    parser.add_argument("--region-from", choices=["deep", "wide", "both", "none"], default=None)
    parser.add_argument("--disable-pixel-loss", action="store_true", default=False)
    parser.add_argument("--disable-image-loss", action="store_true", default=False)
    parser.add_argument("--disable-region-loss", action="store_true", default=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgd", description="Multi-granularity distillation toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partition", help="write labeled/unlabeled split files")
    _add_common(p)
    p.add_argument("--list-file", type=str, default=None, help="partition this id list instead of a dataset")
    p.add_argument("--fraction", type=str, default=None, help="labeled fraction, e.g. 1/8")
    p.add_argument("--labeled-count", type=int, default=None, help="explicit labeled count")
    p.add_argument("--seed", dest="partition_seed", type=int, default=None, help="partition seed")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("pretrain-teacher", help="supervised training of a toy teacher")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--kind", choices=[models.DEEP, models.WIDE], required=True)
    p.set_defaults(func=cmd_pretrain_teacher)

    p = sub.add_parser("distill", help="cooperative distillation of the toy student")
    _add_common(p)
    _add_train_flags(p)
    _add_switch_flags(p)
    p.add_argument("--teacher-deep", type=str, default=None, metavar="PATH")
    p.add_argument("--teacher-wide", type=str, default=None, metavar="PATH")
    p.add_argument("--fraction", type=str, default=None)
    p.add_argument("--labeled-count", type=int, default=None)
    p.add_argument("--partition-seed", type=int, default=None)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--grid", type=parse_pair, default=None, metavar="HxW")
    p.add_argument("--width", type=int, default=None, help="student width")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("evaluate", help="mIoU of a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--csv", type=str, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep loss switches or grid sizes")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--mode", choices=["switches", "grid"], default="switches")
    p.add_argument("--teacher-deep", type=str, default=None, metavar="PATH")
    p.add_argument("--teacher-wide", type=str, default=None, metavar="PATH")
    p.add_argument("--fraction", type=str, default=None)
    p.add_argument("--partition-seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep processes")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
