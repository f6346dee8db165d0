"""Command-line entry point: forge, synth, train, eval, baseline, downstream, infer.

Exit codes: 0 ok, 1 contract/usage error, 2 missing inputs, 3 numerical fault.
"""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import torch

from stcloud import cloudsense
from stcloud.config import RunConfig
from stcloud.errors import ContractError, CorruptionError, FormatError, TrainingFault
from stcloud.imagecore import export_png, load_image, save_image

log = logging.getLogger("stcloud")

EXIT_CONTRACT = 1
EXIT_MISSING = 2
EXIT_NUMERIC = 3

ARCHES = {"unet": "unet_single", "stgan-resnet": "branched_resnet", "stgan-unet": "branched_unet"}
TILE_NAME = re.compile(r"^(?P<tile>.+)_(?P<date>\d{8})\.msi$")
EPOCH = dt.date(1970, 1, 1)


class MissingInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONTRACT, f"{self.prog}: error: {message}\n")


def _onoff(value: str) -> str:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="stcloud", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("forge", parents=[common], help="crop, label and pair dated tiles into manifests")
    p.add_argument("tile_dir")
    p.add_argument("--crops", type=int, dest="forge.crops")
    p.add_argument("--size", type=int, dest="forge.size")
    p.add_argument("--t", type=int, dest="forge.t")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic temporal dataset")
    p.add_argument("--groups", type=int, dest="synth.groups")
    p.add_argument("--t", type=int, dest="synth.t")
    p.add_argument("--size", type=int, dest="synth.size")
    p.add_argument("--opacity-scale", type=float, dest="synth.opacity_scale")

    p = sub.add_parser("train", parents=[common], help="train a generator on the train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--arch", choices=sorted(ARCHES), dest="model.arch")
    p.add_argument("--ir", type=_onoff, dest="model.ir")
    p.add_argument("--share-weights", type=_onoff, dest="model.share_weights")
    p.add_argument("--steps", type=int, dest="train.steps")
    p.add_argument("--base-width", type=int, dest="model.base_width")
    p.add_argument("--res-blocks", type=int, dest="model.res_blocks")
    p.add_argument("--batch-size", type=int, dest="train.batch_size")
    p.add_argument("--eval-every", type=int, dest="train.eval_every")

    p = sub.add_parser("eval", parents=[common], help="score sources on a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--source", action="append", default=[], help="clear, raw-cloudy, mean, median, composite or a checkpoint")
    p.add_argument("--ckpt", action="append", default=[], metavar="NAME=PATH", help="named generator checkpoint")
    p.add_argument("--all", action="store_true", help="all baselines plus every --ckpt")

    p = sub.add_parser("baseline", parents=[common], help="write filter-baseline predictions for a split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--method", choices=("raw-cloudy", "mean", "median", "composite"), required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")

    p = sub.add_parser("infer", parents=[common], help="run a generator checkpoint over a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--group-id")

    p = sub.add_parser("downstream", parents=[common], help="land-cover classification harness")
    p.add_argument("action", choices=("train", "eval"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--classifier", help="classifier file (eval)")
    p.add_argument("--ckpt", action="append", default=[], metavar="NAME=PATH")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--steps", type=int, dest="downstream.steps")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        if not Path(args.config).exists():
            raise MissingInput(f"config file not found: {args.config}")
        cfg.load_file(args.config)
    flags = {k: v for k, v in vars(args).items() if "." in k and v is not None}
    for item in args.set:
        if "=" not in item:
            raise ContractError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        flags[key] = value
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.jobs is not None:
        flags["jobs"] = args.jobs
    cfg.update(flags)
    return cfg


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"not found: {p}")
    return p


def _named(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ContractError(f"expected NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = str(_require(path))
    return out


# -- commands ----------------------------------------------------------------


def _forge_tile(path: Path, tile_id: str, day: float, cfg: RunConfig, crop_dir: Path):
    from stcloud.pairforge import CropRecord, extract_crops

    tile = load_image(path)
    records, ocean, labels = [], {}, []
    weights = cfg.floats("cloud.weights")
    for crop, index, _ in extract_crops(tile, tile_id, cfg.int("forge.crops"), cfg.int("forge.size"), cfg.int("seed")):
        lab = cloudsense.classify_crop(crop, cfg.float("cloud.threshold"), weights, cfg.float("ocean.blue_ratio"))
        labels.append(lab.label)
        if lab.label == cloudsense.Label.REJECTED:
            continue
        rel = f"crops/{path.stem}_{index:03d}.msi"
        save_image(crop, crop_dir.parent / rel)
        records.append(CropRecord(tile_id, index, 0.0, 0.0, day, lab.label, rel, lab.cover_fraction))
        ocean[rel] = lab.ocean_fraction
    return records, ocean, labels


def cmd_forge(args, cfg: RunConfig, out: Path) -> Path:
    from stcloud.pairforge import (
        enforce_ocean_cap,
        label_counts,
        pair_single,
        pair_temporal,
        split_counts,
        split_manifest,
        write_manifest,
    )

    tile_dir = _require(args.tile_dir)
    tiles = []
    for p in sorted(tile_dir.iterdir()):
        m = TILE_NAME.match(p.name)
        if m:
            try:
                date = dt.datetime.strptime(m["date"], "%Y%m%d").date()
            except ValueError:
                log.warning("skipping %s: bad date", p.name)
                continue
            tiles.append((p, m["tile"], float((date - EPOCH).days)))
    if not tiles:
        raise MissingInput(f"no tiles found in {tile_dir} (expected <tile_id>_<YYYYMMDD>.msi)")
    crop_dir = out / "crops"
    crop_dir.mkdir(parents=True, exist_ok=True)

    def work(item):
        path, tile_id, day = item
        try:
            return _forge_tile(path, tile_id, day, cfg, crop_dir)
        except (OSError, FormatError, CorruptionError, ContractError) as exc:
            log.warning("skipping unreadable tile %s: %s", path.name, exc)
            print(f"warning: skipping tile {path.name}: {exc}", file=sys.stderr)
            return [], {}, []

    with ThreadPoolExecutor(max_workers=max(1, cfg.int("jobs"))) as pool:
        results = list(pool.map(work, tiles))
    catalog, ocean, all_labels = [], {}, []
    for records, oc, labels in results:
        catalog += records
        ocean.update(oc)
        all_labels += labels
    counts = {lab.value: sum(1 for x in all_labels if x == lab) for lab in cloudsense.Label}

    window = cfg.float("forge.window_days")
    cap = cfg.float("ocean.cap")
    is_ocean = lambda g: ocean.get(g.clear.path, 0.0) > 0.5  # noqa: E731
    fractions = cfg.floats("split.fractions")
    single = split_manifest(enforce_ocean_cap(pair_single(catalog, window), cap, is_ocean), fractions, cfg.int("seed"))
    temporal = split_manifest(
        enforce_ocean_cap(pair_temporal(catalog, cfg.int("forge.t"), window), cap, is_ocean), fractions, cfg.int("seed")
    )
    single_path, temporal_path = out / "manifest_single.tsv", out / "manifest_temporal.tsv"
    write_manifest(single, single_path)
    write_manifest(temporal, temporal_path)
    print(f"tiles={len(tiles)} crops: " + " ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"catalog={len(catalog)} " + " ".join(f"{k}={v}" for k, v in label_counts(catalog).items() if k != "Rejected"))
    for name, m in (("single", single), ("temporal", temporal)):
        print(f"{name}: groups={len(m)} " + " ".join(f"{k}={v}" for k, v in split_counts(m).items()))
    return temporal_path


def cmd_synth(args, cfg: RunConfig, out: Path) -> Path:
    from stcloud.synthgen import synth_dataset

    m = synth_dataset(
        cfg.int("synth.groups"),
        cfg.int("synth.t"),
        cfg.int("synth.size"),
        cfg.int("seed"),
        out,
        cfg.float("synth.opacity_scale"),
        cfg.floats("split.fractions"),
        cfg.int("jobs"),
    )
    print(f"wrote {len(m)} groups to {out / 'manifest.tsv'}")
    return out / "manifest.tsv"


def generator_spec(cfg: RunConfig):
    from stcloud.models import GeneratorSpec

    kind = ARCHES[cfg["model.arch"]]
    return GeneratorSpec(
        kind=kind,
        in_channels=4 if cfg.flag("model.ir") else 3,
        T=1 if kind == "unet_single" else 3,
        base_width=cfg.int("model.base_width"),
        levels=cfg.int("model.levels"),
        res_blocks=cfg.int("model.res_blocks"),
        branch_features=cfg.int("model.branch_features"),
        share_branch_weights=cfg.flag("model.share_weights"),
    )


def train_config(cfg: RunConfig):
    from stcloud.trainer import TrainConfig

    return TrainConfig(
        lam=cfg.float("train.lambda"),
        learning_rate=cfg.float("train.lr"),
        adam_betas=(cfg.float("train.beta1"), cfg.float("train.beta2")),
        batch_size=cfg.int("train.batch_size"),
        steps=cfg.int("train.steps"),
        seed=cfg.int("seed"),
        eval_every=cfg.int("train.eval_every"),
        d_widths=cfg.ints("model.d_widths"),
    )


def cmd_train(args, cfg: RunConfig, out: Path) -> Path:
    from stcloud.pairforge import read_manifest
    from stcloud.trainer import train

    manifest = read_manifest(_require(args.manifest))
    ckpt = train(manifest, generator_spec(cfg), train_config(cfg), out)
    print(f"checkpoint: {ckpt}")
    return ckpt


def cmd_eval(args, cfg: RunConfig, out: Path) -> Path:
    from stcloud.evalsuite import BASELINES, evaluate, format_table, write_report
    from stcloud.pairforge import read_manifest

    manifest = read_manifest(_require(args.manifest))
    sources: list[tuple[str, str]] = []
    if args.all:
        sources += [(b, b) for b in BASELINES]
    for s in args.source:
        sources.append((s, s if s in BASELINES or s == "clear" else str(_require(s))))
    sources += [(name, path) for name, path in _named(args.ckpt).items()]
    if not sources:
        raise ContractError("nothing to evaluate: pass --source, --ckpt or --all")
    reports = []
    for name, src in sources:
        report = evaluate(src, manifest, args.split, name=name)
        write_report(report, out)
        reports.append(report)
    table = format_table(reports)
    path = out / f"eval_{args.split}.txt"
    path.write_text(table, encoding="utf-8")
    print(table, end="")
    return path


def cmd_baseline(args, cfg: RunConfig, out: Path) -> Path:
    from stcloud.evalsuite import evaluate, run_baseline, write_report
    from stcloud.pairforge import read_manifest

    manifest = read_manifest(_require(args.manifest))
    img_dir = out / args.method
    img_dir.mkdir(parents=True, exist_ok=True)
    for g in manifest.split(args.split):
        cloudy = [load_image(manifest.resolve(z.path)) for z in g.cloudy]
        pred = run_baseline(args.method, cloudy).rgb()
        stem = g.group_id.replace(":", "_")
        save_image(pred, img_dir / f"{stem}.msi")
        export_png(pred, img_dir / f"{stem}.png")
    report = evaluate(args.method, manifest, args.split)
    write_report(report, out)
    print(report.to_text(), end="")
    return img_dir


def cmd_infer(args, cfg: RunConfig, out: Path) -> Path:
    from stcloud.models import load_checkpoint
    from stcloud.pairforge import read_manifest
    from stcloud.trainer import infer

    G = load_checkpoint(_require(args.checkpoint))
    manifest = read_manifest(_require(args.manifest))
    groups = manifest.groups if args.group_id else manifest.split(args.split)
    if args.group_id:
        groups = [g for g in groups if g.group_id == args.group_id]
        if not groups:
            raise MissingInput(f"group {args.group_id} not in manifest")
    out.mkdir(parents=True, exist_ok=True)
    for g in groups:
        pred = infer(G, g, manifest)
        stem = g.group_id.replace(":", "_")
        save_image(pred, out / f"{stem}.msi")
        export_png(pred, out / f"{stem}.png")
    print(f"wrote {len(groups)} predictions to {out}")
    return out


def cmd_downstream(args, cfg: RunConfig, out: Path) -> Path:
    from stcloud.landcover import ClassifierConfig, LandcoverClassifier, eval_downstream, labeled_crops, train_classifier
    from stcloud.pairforge import read_manifest
    from stcloud.synthgen import read_labels

    manifest = read_manifest(_require(args.manifest))
    labels = read_labels(_require(args.labels))
    out.mkdir(parents=True, exist_ok=True)
    if args.action == "train":
        crops = labeled_crops(manifest, labels, "train")
        ccfg = ClassifierConfig(
            steps=cfg.int("downstream.steps"),
            learning_rate=cfg.float("downstream.lr"),
            batch_size=cfg.int("downstream.batch_size"),
            seed=cfg.int("seed"),
        )
        clf = train_classifier(crops, ccfg)
        path = out / "classifier.pt"
        clf.save(path)
        print(f"classifier: {path}")
        return path
    if not args.classifier:
        raise ContractError("downstream eval needs --classifier")
    clf = LandcoverClassifier.load(_require(args.classifier))
    report = eval_downstream(clf, manifest, labels, _named(args.ckpt), args.split)
    report.write(out)
    print(report.to_text(), end="")
    return out / "downstream.txt"


COMMANDS = {
    "forge": cmd_forge,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
    "infer": cmd_infer,
    "downstream": cmd_downstream,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        torch.set_num_threads(max(1, cfg.int("jobs")))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.write_lock(out)
        COMMANDS[args.command](args, cfg, out)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, FormatError, CorruptionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return 0


if __name__ == "__main__":
    sys.exit(main())
