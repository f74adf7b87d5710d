"""Command-line entry point: ``hyperscat <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import data_io
from .optim import MISR_EPOCH_CHOICES, NonFiniteLossError
from .pipeline import ModelBundle, PipelineConfig, StageError, evaluate, infer, load_scenes, train_all
from .scattering import build_filter_bank, filter_images, littlewood_paley

logger = logging.getLogger("hyperscat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_gen_synthetic(args) -> int:
    if args.size <= 0 or args.size % 4:
        raise UsageError(f"--size must be a positive multiple of 4, got {args.size}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = data_io.gen_synthetic(args.count, args.size, args.seed)
    entries = []
    for i, scene in enumerate(scenes):
        name = f"scene_{i:04d}"
        files = {"cube": f"{name}_cube.hsc", "msi": f"{name}_msi.hsc", "mask": f"{name}_mask.hsc"}
        meta = {"seed": scene.seed}
        data_io.write_cube(scene.cube, out / files["cube"])
        data_io.write_msi(scene.msi, out / files["msi"], meta)
        data_io.write_mask(scene.mask, out / files["mask"], meta)
        entries.append({
            "name": name,
            "seed": scene.seed,
            "files": files,
            "sha256": {k: _sha256(out / v) for k, v in files.items()},
        })
    manifest = {"count": args.count, "size": args.size, "seed": args.seed, "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    logger.info("wrote %d scenes to %s", len(scenes), out)
    return EXIT_OK


def _train_config(args) -> PipelineConfig:
    """Defaults, then the optional JSON config file, then explicit flags."""
    values = PipelineConfig().to_json()
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        unknown = set(overrides) - set(values)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update(overrides)
    flags = {
        "seed": args.seed,
        "misr_epochs": args.misr_epochs,
        "matching_epochs": args.matching_epochs,
        "inverse_epochs": args.inverse_epochs,
        "J": args.J,
        "L": args.L,
        "matching_hidden": args.matching_hidden,
        "misr_hidden": args.misr_hidden,
        "inverse_widths": args.inverse_widths,
        "batch_size": args.batch_size,
        "threads": args.threads,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    return PipelineConfig(**values)


def cmd_train(args) -> int:
    config = _train_config(args)
    scenes = load_scenes(args.data)
    logger.info("training on %d scenes (seed %d, MISR %d epochs)", len(scenes), config.seed,
                config.misr_epochs)
    train_all(scenes, config, out_dir=args.out)
    logger.info("checkpoints written to %s", args.out)
    return EXIT_OK


def cmd_infer(args) -> int:
    models = ModelBundle.load(args.models, require_misr=not args.no_misr)
    msi = data_io.read_msi(args.msi)
    mask = data_io.read_mask(args.mask) if args.mask else None
    cube = infer(msi, models, mask, use_misr=not args.no_misr)
    data_io.write_cube(cube, args.out)
    logger.info("wrote %s", args.out)
    return EXIT_OK


def _scene_key(path: Path) -> str:
    stem = path.stem
    for suffix in ("_pred", "_cube"):
        if stem.endswith(suffix):
            return stem[: -len(suffix)]
    return stem


def cmd_evaluate(args) -> int:
    pred_dir, truth_dir, mask_dir = Path(args.pred), Path(args.truth), Path(args.masks)
    preds = sorted(pred_dir.glob("*.hsc"))
    preds = [p for p in preds if not p.stem.endswith(("_mask", "_msi"))]
    if not preds:
        raise FileNotFoundError(f"no prediction cubes in {pred_dir}")
    names, pred_cubes, truths, masks = [], [], [], []
    for p in preds:
        key = _scene_key(p)
        truth_path, mask_path = truth_dir / f"{key}_cube.hsc", mask_dir / f"{key}_mask.hsc"
        if not truth_path.exists() or not mask_path.exists():
            raise FileNotFoundError(f"{p.name} has no matching {truth_path.name} / {mask_path.name}")
        names.append(key)
        pred_cubes.append(data_io.read_cube(p))
        truths.append(data_io.read_cube(truth_path))
        masks.append(data_io.read_mask(mask_path))
    report = evaluate(pred_cubes, truths, masks, names)
    report.write_csv(args.out)
    for name in report.skipped_images:
        print(f"warning: {name} skipped (empty mask)", file=sys.stderr)
    print(f"mean SAM over {len(report.images)} images: {report.summary()}")
    return EXIT_OK


def cmd_inspect_filters(args) -> int:
    step = 2**args.J
    if args.size <= 0 or args.size % step:
        raise UsageError(f"--size {args.size} is not divisible by 2**J = {step}")
    bank = build_filter_bank(args.J, args.L, (args.size, args.size))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, image in filter_images(bank).items():
        cube = data_io.SpectralCube.from_bands_first(
            image, [0.0, 1.0], {"kind": "filter", "name": name, "bands": ["spatial", "frequency"]})
        data_io.write_cube(cube, out / f"{name}.hsc")
    lp = littlewood_paley(bank)
    print(f"littlewood-paley min {lp['min']:.6f} max {lp['max']:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hyperscat", description="Scattering-feature MSI to HSI reconstruction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write a synthetic paired MSI/HSI dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="train all networks")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of PipelineConfig fields")
    p.add_argument("--misr-epochs", type=int, choices=MISR_EPOCH_CHOICES)
    p.add_argument("--seed", type=int)
    p.add_argument("--matching-epochs", type=int)
    p.add_argument("--inverse-epochs", type=int)
    p.add_argument("--J", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--matching-hidden", type=int)
    p.add_argument("--misr-hidden", type=int)
    p.add_argument("--inverse-widths", type=int, nargs=2, metavar=("C1", "C2"))
    p.add_argument("--batch-size", type=int)
    p.add_argument("--threads", type=int, help="cap on worker threads")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="reconstruct a 61-band cube from an MSI file")
    p.add_argument("--models", required=True)
    p.add_argument("--msi", required=True)
    p.add_argument("--mask", help="skin mask file; NIR Otsu threshold if omitted")
    p.add_argument("--out", required=True)
    p.add_argument("--no-misr", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="per-image skin SAM report")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-filters", help="dump the filter bank as cube files")
    p.add_argument("--J", type=int, default=2)
    p.add_argument("--L", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inspect_filters)
    return parser


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(exc.cause, NonFiniteLossError) else EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
