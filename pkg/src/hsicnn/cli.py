"""Command-line entry point: ``hsicnn <command> [options]``.

Commands share a working directory (``--out``, default ``$HSICNN_DATA_DIR``
or the current directory) that holds the files of one run::

    cube.hsic, labels.pgm        input scene (written by ``synth``)
    cube_norm.hsic, split.txt    written by ``prepare``
    band_stats.csv, manifest.json
    model.hsnn, history.csv      written by ``train``
    metrics.csv, map_*.ppm, features_*.csv
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgfile
from .data import (check_pair, enumerate_samples, load_cube, load_labels, load_split,
                   normalize_cube, save_cube, save_labels, save_split, stratified_split,
                   synth_generate)
from .errors import ConfigError, HsiCnnError
from .evaluation import (MAP_MODES, MetricsReport, confusion_matrix, export_features,
                         render_map, save_ppm)
from .gradcheck import TINY_CONFIG, grad_check, random_model, random_sample
from .model import ArchConfig, build_model, derive_shapes, load_checkpoint
from .training import TrainConfig, train

log = logging.getLogger("hsicnn")

MANIFEST = "manifest.json"


class CommandError(HsiCnnError):
    pass


def _workdir(args) -> Path:
    root = args.out or os.environ.get("HSICNN_DATA_DIR") or "."
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise CommandError(f"{what} not found: {path}")
    return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _read_manifest(work: Path) -> dict:
    path = _require(work / MANIFEST, "run manifest (run `prepare` first)")
    manifest = json.loads(path.read_text())
    for key in ("normalized_cube", "labels", "split"):
        _require(Path(manifest[key]), f"{key.replace('_', ' ')} listed in {path}")
    return manifest


def _write_manifest(work: Path, manifest: dict) -> None:
    manifest["updated"] = _now()
    (work / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_run(work: Path):
    manifest = _read_manifest(work)
    cube = load_cube(manifest["normalized_cube"])
    labels = load_labels(manifest["labels"])
    check_pair(cube, labels)
    samples = enumerate_samples(labels)
    split = load_split(manifest["split"])
    return manifest, cube, labels, samples, split


def _subset(samples, split, which):
    if which == "all":
        idx = np.arange(len(samples))
    else:
        idx = split.train if which == "train" else split.test
    return samples.subset(idx), idx


def _checkpoint_path(args, work: Path) -> Path:
    return Path(args.checkpoint) if args.checkpoint else work / "model.hsnn"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    work = _workdir(args)
    width = args.width or args.size
    height = args.height or args.size
    cube, labels = synth_generate(args.classes, args.bands, width, height, args.noise, args.seed)
    save_cube(cube, work / "cube.hsic")
    save_labels(labels, work / "labels.pgm")
    print(f"wrote {width}x{height}x{args.bands} cube with {args.classes} classes to {work}")
    return 0


def cmd_prepare(args) -> int:
    work = _workdir(args)
    cube_path = _require(Path(args.cube) if args.cube else work / "cube.hsic", "cube")
    labels_path = _require(Path(args.labels) if args.labels else work / "labels.pgm", "labels")
    cube = load_cube(cube_path)
    labels = load_labels(labels_path)
    check_pair(cube, labels)

    normalized, stats = normalize_cube(cube)
    samples = enumerate_samples(labels)
    split = stratified_split(samples, args.split, args.seed)

    save_cube(normalized, work / "cube_norm.hsic")
    save_split(split, work / "split.txt")
    with open(work / "band_stats.csv", "w") as fh:
        fh.write("band,mean,std\n")
        for b, (m, s) in enumerate(zip(stats.mean, stats.std)):
            fh.write(f"{b},{m!r},{s!r}\n")
    _write_manifest(work, {
        "cube": str(cube_path.resolve()),
        "labels": str(labels_path.resolve()),
        "normalized_cube": str((work / "cube_norm.hsic").resolve()),
        "split": str((work / "split.txt").resolve()),
        "seed": args.seed,
        "ratio": args.split,
        "n_bands": int(cube.shape[-1]),
        "class_values": samples.class_values.tolist(),
        "created": _now(),
    })
    print(f"{len(samples)} labeled pixels in {samples.n_classes} classes: "
          f"{len(split.train)} train / {len(split.test)} test")
    return 0


def build_configs(args, n_bands: int, n_classes: int):
    """Preset, then ``--config`` file, then data-derived sizes, then flags."""
    settings = cfgfile.load_preset(args.preset)
    if args.config:
        settings = cfgfile.merge(settings, cfgfile.load_config_file(args.config))
    arch = settings["arch"]
    nominal = (arch.get("n_bands"), arch.get("n_classes"))
    if nominal != (n_bands, n_classes) and not args.preset.endswith("-like"):
        log.warning("preset %s is nominally %s bands / %s classes; using %d / %d from the data",
                    args.preset, *nominal, n_bands, n_classes)
    arch.update(n_bands=n_bands, n_classes=n_classes)
    tr = settings["train"]
    for flag, key in (("iterations", "max_iterations"), ("batch", "batch_size"),
                      ("lr", "learning_rate"), ("decay", "decay"), ("eval_every", "eval_every"),
                      ("checkpoint_every", "checkpoint_every")):
        value = getattr(args, flag, None)
        if value is not None:
            tr[key] = value
    tr["seed"] = args.seed
    return ArchConfig.from_dict(arch), TrainConfig.from_dict(tr)


def cmd_train(args) -> int:
    work = _workdir(args)
    manifest, cube, _, samples, split = _load_run(work)
    arch, tcfg = build_configs(args, cube.shape[-1], samples.n_classes)
    derive_shapes(arch)
    model = build_model(arch, args.seed)
    ckpt = _checkpoint_path(args, work)
    model, history = train(model, samples.subset(split.train), samples.subset(split.test), cube,
                           tcfg, checkpoint_path=ckpt)
    history.to_csv(work / "history.csv")
    manifest.update(checkpoint=str(ckpt.resolve()), arch=arch.to_dict(), train=tcfg.to_dict())
    _write_manifest(work, manifest)
    last = history.records[-1]
    print(f"trained {last.iteration} iterations: loss {last.loss:.4f}, "
          f"train acc {last.train_acc:.4f}, test acc {last.test_acc:.4f}; checkpoint {ckpt}")
    return 0


def _load_model(args, work):
    return load_checkpoint(_require(_checkpoint_path(args, work), "checkpoint"))


def cmd_eval(args) -> int:
    work = _workdir(args)
    ckpt = _require(_checkpoint_path(args, work), "checkpoint")
    manifest, cube, _, samples, split = _load_run(work)
    model = load_checkpoint(ckpt)
    subset, _ = _subset(samples, split, args.subset)
    cm = confusion_matrix(model, subset, cube)
    report = MetricsReport.from_confusion(cm, samples.class_values)
    report.to_csv(work / "metrics.csv")
    print(report.format(dataset=args.name))
    return 0


def cmd_map(args) -> int:
    work = _workdir(args)
    manifest, cube, labels, _, _ = _load_run(work)
    model = None if args.mode == "ground-truth" else _load_model(args, work)
    image = render_map(model, cube, labels, args.mode)
    path = work / f"map_{args.mode}.ppm"
    save_ppm(image, path)
    print(f"wrote {path}")
    return 0


def cmd_export(args) -> int:
    work = _workdir(args)
    ckpt = _require(_checkpoint_path(args, work), "checkpoint")
    manifest, cube, _, samples, split = _load_run(work)
    model = load_checkpoint(ckpt)
    subset, idx = _subset(samples, split, args.subset)
    table = export_features(model, subset, cube, args.layer, indices=idx)
    path = work / f"features_{args.layer}.csv"
    table.to_csv(path)
    print(f"wrote {len(table)} x {table.features.shape[1]} {args.layer} features to {path}")
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    for seed in range(args.seed, args.seed + args.count):
        model = random_model(TINY_CONFIG, seed)
        report = grad_check(model, random_sample(TINY_CONFIG, seed), args.step, args.tolerance)
        print(f"seed {seed}")
        print(report.format())
        ok &= report.passed
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, seed_default=0):
    p.add_argument("--out", help="working directory (default: $HSICNN_DATA_DIR or .)")
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS threads; 1 keeps runs bit-reproducible (default 1)")


def _positive(kind):
    def parse(text):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return value
    return parse


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsicnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic labeled scene")
    _common(p)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--bands", type=int, default=176)
    p.add_argument("--size", type=int, default=64, help="square scene side")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="validate, normalize and split a scene")
    _common(p)
    p.add_argument("--cube")
    p.add_argument("--labels")
    p.add_argument("--split", type=float, default=0.8, help="per-class training fraction")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train HSI-CNN on the prepared split")
    _common(p)
    p.add_argument("--preset", default="ksc", help="ksc, ip, pu or sa (optionally with -like)")
    p.add_argument("--config", help="JSON file with arch/train overrides")
    p.add_argument("--checkpoint")
    p.add_argument("--iterations", type=_positive(int))
    p.add_argument("--batch", type=_positive(int))
    p.add_argument("--lr", type=_positive(float))
    p.add_argument("--decay", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print OA/AA/per-class recall")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--subset", choices=("test", "train", "all"), default="test")
    p.add_argument("--name", default="scene", help="dataset name for the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("map", help="render a classification map (PPM)")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=MAP_MODES, default="full")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("export-features", help="write FC1/FC2 activations as CSV")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--layer", choices=("fc1", "fc2"), default="fc2")
    p.add_argument("--subset", choices=("test", "train", "all"), default="all")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference check on tiny random networks")
    _common(p)
    p.add_argument("--count", type=_positive(int), default=1, help="number of seeds")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("hsicnn: error: --threads must be >= 1", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (HsiCnnError, OSError) as exc:
        kind = "configuration error" if isinstance(exc, ConfigError) else "error"
        print(f"hsicnn: {kind}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
