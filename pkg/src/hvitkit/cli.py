"""Command-line interface: ``hvit <command> [flags]``.

Commands: synth, preprocess, split, train, eval, heatmap, permtest.

Exit codes: 0 success, 2 usage or configuration error, 3 data error
(missing/malformed inputs), 4 numeric degeneracy (e.g. vanishing blend
weights). Errors are reported on stderr as single lines starting with
``error:``. The default output directory is ``$HVIT_OUT_DIR`` or ``hvit_out``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, model_config_text
from .data import read_labels, write_labels
from .evaluation import (
    Dataset,
    SlideEntry,
    ensemble_predict,
    evaluate,
    permutation_test,
    qwk,
    read_folds,
    read_predictions,
    split_from_assignment,
    stratified_kfold,
    train,
    write_folds,
    write_predictions,
)
from .factorization import (
    DEFAULT_GAMMA,
    LEVELS,
    DegenerateBlendError,
    bundle_to_fields,
    factorize,
    normalize_level,
    render_heatmap,
)
from .hvit import FreezeScheme, Geometry, forward_slide, load_frozen, load_weights, save_weights
from .pnm import write_pgm, write_ppm
from .preprocessing import (
    WHITE,
    preprocess,
    read_manifest,
    read_slide,
    sample_grades,
    synth_slide,
    write_manifest,
    write_slide,
)

log = logging.getLogger("hvitkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV = "HVIT_OUT_DIR"
SWEEP_GUTTER = 4


class UsageError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"error: {message}\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_ENV) or "hvit_out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _geometry(text: str) -> Geometry:
    try:
        return Geometry.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _run_config(args, extra: dict | None = None) -> RunConfig:
    """Merge defaults, ``--config`` and the command's flags (flags win)."""
    flags = dict(extra or {})
    if getattr(args, "geometry", None) is not None:
        g = args.geometry
        flags.update(
            {
                "geometry.region_size": g.region_size,
                "geometry.patch_size": g.patch_size,
                "geometry.minipatch_size": g.minipatch_size,
            }
        )
    for flag, key in (
        ("sat_threshold", "preprocess.sat_threshold"),
        ("median_kernel", "preprocess.median_kernel"),
        ("min_hole_area", "preprocess.min_hole_area"),
        ("min_tissue", "preprocess.min_tissue"),
    ):
        if getattr(args, flag, None) is not None:
            flags[key] = getattr(args, flag)
    return RunConfig.load(getattr(args, "config", None), flags)


def _add_segmentation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sat-threshold", type=int, help="HSV saturation threshold out of 255 (default 20)")
    p.add_argument("--median-kernel", type=int, help="median blur kernel, odd (default 7)")
    p.add_argument("--min-hole-area", type=int, help="fill background holes smaller than this, px (default 64)")
    p.add_argument("--min-tissue", type=float, help="minimum tissue fraction to keep a region (default 0.10)")
    p.add_argument("--spacing", type=float, default=0.5, help="input spacing in microns per pixel (default 0.5)")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    out = _out_dir(args)
    slides = out / "slides"
    slides.mkdir(exist_ok=True)
    rows = []
    for i, grade in enumerate(sample_grades(args.count, args.seed, args.balanced)):
        sid = f"slide_{i:04d}"
        raster, isup = synth_slide(args.seed * 100003 + i, int(grade), args.geometry, args.regions_per_side)
        write_slide(slides / f"{sid}.ppm", raster)
        rows.append((sid, isup, f"slides/{sid}.ppm"))
    write_labels(out / "labels.txt", rows)
    print(f"wrote {len(rows)} slides to {slides}")
    return EXIT_OK


def _slide_paths(args) -> list[Path]:
    if bool(args.slide) == bool(args.dir):
        raise UsageError("give either --slide (repeatable) or --dir")
    if args.slide:
        return [Path(s) for s in args.slide]
    d = Path(args.dir)
    if not d.is_dir():
        raise FileNotFoundError(f"no such directory: {d}")
    return sorted(d.glob("*.ppm"))


def cmd_preprocess(args) -> int:
    cfg = _run_config(args)
    geometry, params = cfg.geometry(), cfg.segment_params()
    out = _out_dir(args)
    paths = _slide_paths(args)
    if not paths:
        raise FileNotFoundError("no .ppm slides found")
    for path in paths:
        sid = path.stem
        slide = read_slide(path, args.spacing)
        mask, regions = preprocess(slide, geometry, params, cfg["preprocess.min_tissue"])
        sdir = out / sid
        (sdir / "regions").mkdir(parents=True, exist_ok=True)
        write_pgm(sdir / "mask.pgm", mask.mask.astype(np.uint8) * 255)
        rel = []
        for (x, y), px in zip(regions.coords, regions.regions):
            name = f"regions/{x}_{y}.ppm"
            write_ppm(sdir / name, px)
            rel.append(name)
        extra = {
            "source": path.name,
            "sat_threshold": params.sat_threshold,
            "median_kernel": params.median_kernel,
            "min_hole_area": params.min_hole_area,
            "min_tissue": cfg["preprocess.min_tissue"],
        }
        write_manifest(sdir / "regions.txt", regions, rel, geometry, extra)
        print(f"{sid}: {len(regions)} regions")
    return EXIT_OK


def cmd_split(args) -> int:
    rows = read_labels(args.labels)
    split = stratified_kfold([r[1] for r in rows], args.k, args.seed)
    dest = Path(args.out) if args.out else _out_dir(args) / "folds.txt"
    write_folds(dest, [r[0] for r in rows], split)
    print(f"wrote {split.k} folds to {dest}")
    return EXIT_OK


def _load_dataset(labels_path, regions_dir) -> Dataset:
    entries = []
    for sid, isup, _ in read_labels(labels_path):
        manifest = Path(regions_dir) / sid / "regions.txt"
        regions, _ = read_manifest(manifest)
        if not len(regions):
            log.warning("slide %s has no tissue regions; skipped", sid)
            continue
        entries.append(SlideEntry(sid, regions.pixels(), isup))
    if not entries:
        raise ValueError("no slides with tissue regions")
    return Dataset(entries)


def _sidecar(ckpt: Path) -> Path:
    return ckpt.with_suffix(".cfg")


def _load_model(ckpt):
    ckpt = Path(ckpt)
    side = _sidecar(ckpt)
    if not side.exists():
        raise FileNotFoundError(f"model config {side} not found next to checkpoint")
    model = RunConfig.load(side).build_model()
    return load_weights(model, ckpt)


def cmd_train(args) -> int:
    overrides = {
        "scheme": args.scheme,
        "model.seed": args.seed,
        "train.seed": args.seed,
        "model.init_std": args.init_std,
        "train.epochs": args.epochs,
        "train.lr": args.lr,
        "train.optimizer": args.optimizer,
        "train.batch_size": args.batch_size,
    }
    cfg = _run_config(args, overrides)
    dataset = _load_dataset(args.labels, args.regions_dir)
    split = split_from_assignment(dataset.slide_ids, read_folds(args.folds))
    if not 0 <= args.fold < split.k:
        raise UsageError(f"--fold must be in 0..{split.k - 1}")
    model = cfg.build_model()
    if args.pretrained:
        model = load_frozen(model, args.pretrained)
    trained, history = train(model, dataset, split, args.fold, cfg.train_config())
    if not all(np.isfinite(h["loss"]) for h in history):
        raise NumericError("training loss became non-finite")
    out = _out_dir(args)
    ckpt = out / f"{args.name}.hvt"
    save_weights(trained, ckpt)
    _sidecar(ckpt).write_text(model_config_text(trained, cfg["model.init_std"], cfg["model.seed"]))
    lines = {
        "fold": args.fold,
        "seed": cfg["train.seed"],
        "scheme": trained.scheme.name,
        "epochs": cfg["train.epochs"],
        "qwk": history[-1].get("qwk", float("nan")),
    }
    for h in history:
        lines[f"epoch.{h['epoch']}.loss"] = h["loss"]
        if "qwk" in h:
            lines[f"epoch.{h['epoch']}.qwk"] = h["qwk"]
    (out / f"{args.name}.metrics.txt").write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
    print(f"fold {args.fold} {trained.scheme.name}: qwk = {lines['qwk']}")
    return EXIT_OK


def _subset(choice: str, dataset: Dataset, folds_path) -> tuple[list[int] | None, str]:
    if choice == "all":
        return None, "all"
    if choice.startswith("fold:"):
        if not folds_path:
            raise UsageError("--subset fold:K needs --folds")
        split = split_from_assignment(dataset.slide_ids, read_folds(folds_path))
        k = int(choice[5:])
        return split.held_out(k), str(k)
    wanted = {l.split()[0] for l in Path(choice).read_text().splitlines() if l.strip() and not l.startswith("#")}
    idx = [i for i, sid in enumerate(dataset.slide_ids) if sid in wanted]
    if not idx:
        raise ValueError(f"subset file {choice} selects no known slides")
    return idx, choice


def cmd_eval(args) -> int:
    if len(args.checkpoint) > 1 and not args.ensemble:
        raise UsageError("several checkpoints need --ensemble")
    dataset = _load_dataset(args.labels, args.regions_dir)
    subset, tag = _subset(args.subset, dataset, args.folds)
    models = [_load_model(c) for c in args.checkpoint]
    if args.ensemble:
        preds = ensemble_predict(models, dataset, subset)
        score = qwk([p.label for p in preds], [p.grade for p in preds])
    else:
        score, preds = evaluate(models[0], dataset, subset)
    out = _out_dir(args)
    write_predictions(out / f"{args.name}.predictions.txt", preds)
    report = {
        "qwk": score,
        "fold": tag,
        "seed": args.seed,
        "slides": len(preds),
        "models": len(models),
        "ensemble": bool(args.ensemble),
    }
    (out / f"{args.name}.metrics.txt").write_text("".join(f"{k} = {v}\n" for k, v in report.items()))
    print(f"qwk = {score}")
    return EXIT_OK


def _levels(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    bad = [n for n in names if n not in LEVELS + ("factorized",)]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"levels must be among patch, region, slide, factorized; got {text!r}")
    return names


def cmd_heatmap(args) -> int:
    cfg = _run_config(args)
    model = _load_model(args.checkpoint)
    if args.frozen_levels is not None:
        try:
            model.scheme = FreezeScheme.parse(args.frozen_levels)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    for g in [args.gamma] + (args.sweep or []):
        if not 0.0 <= g <= 1.0:
            raise UsageError(f"gamma must lie in [0, 1], got {g}")
    geometry = model.geometry
    slide = read_slide(args.slide, args.spacing)
    mask, regions = preprocess(slide, geometry, cfg.segment_params(), cfg["preprocess.min_tissue"])
    if not len(regions):
        raise ValueError("slide has no tissue regions")
    _, bundle = forward_slide(model, regions.regions)
    s = geometry.region_size
    h, w = slide.height, slide.width
    canvas = (-(-h // s) * s, -(-w // s) * s)
    base = np.full(canvas + (3,), WHITE, np.uint8)
    base[:h, :w] = slide.pixels
    fields = bundle_to_fields(bundle, geometry, regions.coords, canvas)
    if not args.no_normalize:
        fields = [normalize_level(f) for f in fields]
    covered = fields[0].covered

    def render(values):
        img = render_heatmap(values, base, args.colormap, args.alpha, covered)
        return img[:h, :w]

    out = _out_dir(args)
    for level in args.level:
        if level == "factorized":
            img = render(factorize(fields, args.gamma))
        else:
            img = render(fields[LEVELS.index(level)].values)
        write_ppm(out / f"heatmap_{level}.ppm", img)
    if args.sweep:
        panels = []
        for g in args.sweep:
            img = render(factorize(fields, g))
            write_ppm(out / f"heatmap_gamma_{g:g}.ppm", img)
            panels.append(img)
        gutter = np.full((h, SWEEP_GUTTER, 3), WHITE, np.uint8)
        strip = [panels[0]]
        for p in panels[1:]:
            strip += [gutter, p]
        write_ppm(out / "heatmap_sweep.ppm", np.concatenate(strip, axis=1))
    print(f"wrote heatmaps to {out}")
    return EXIT_OK


def cmd_permtest(args) -> int:
    labels = read_labels(args.labels)
    by_id = [{p.slide_id: p.grade for p in read_predictions(f)} for f in (args.preds_a, args.preds_b)]
    ids = [sid for sid, _, _ in labels if sid in by_id[0] or sid in by_id[1]]
    missing = [sid for sid in ids if sid not in by_id[0] or sid not in by_id[1]]
    if missing:
        raise ValueError(f"slides missing from a predictions file: {', '.join(missing[:5])}")
    if not ids:
        raise ValueError("predictions share no slides with the labels file")
    truth = dict((sid, isup) for sid, isup, _ in labels)
    y = [truth[s] for s in ids]
    a = [by_id[0][s] for s in ids]
    b = [by_id[1][s] for s in ids]
    p = permutation_test(y, a, b, args.iters, args.seed)
    print(f"qwk_a = {qwk(y, a)}")
    print(f"qwk_b = {qwk(y, b)}")
    print(f"p = {p}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hvit", description="Hierarchical ViT grading toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--out-dir", help=f"output directory (default ${OUT_ENV} or ./hvit_out)")
        return p

    p = add("synth", cmd_synth, "generate synthetic graded slides and a labels manifest")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--geometry", type=_geometry, default=Geometry(64, 16, 4), help="'full' or region,patch,minipatch")
    p.add_argument("--regions-per-side", type=int, default=2)
    p.add_argument("--balanced", action="store_true", help="equal grade counts instead of a skewed distribution")

    p = add("preprocess", cmd_preprocess, "segment tissue and tile slides into regions")
    p.add_argument("--slide", action="append", help="slide .ppm (repeatable)")
    p.add_argument("--dir", help="directory of slide .ppm files")
    p.add_argument("--config")
    p.add_argument("--geometry", type=_geometry)
    _add_segmentation_flags(p)

    p = add("split", cmd_split, "stratified k-fold assignment")
    p.add_argument("--labels", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="folds file (default <out-dir>/folds.txt)")

    p = add("train", cmd_train, "train on all folds but one")
    p.add_argument("--config")
    p.add_argument("--labels", required=True)
    p.add_argument("--regions-dir", required=True)
    p.add_argument("--folds", required=True)
    p.add_argument("--fold", type=int, required=True, help="held-out fold")
    p.add_argument("--scheme", help="local, global, or comma list of frozen stages")
    p.add_argument("--seed", type=int)
    p.add_argument("--geometry", type=_geometry)
    p.add_argument("--init-std", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["sgd", "momentum", "adam"])
    p.add_argument("--batch-size", type=int)
    p.add_argument("--pretrained", help="checkpoint supplying frozen-stage weights")
    p.add_argument("--name", default="model", help="output file stem (default model)")

    p = add("eval", cmd_eval, "score checkpoints on a subset of slides")
    p.add_argument("--checkpoint", action="append", required=True, help="repeat to ensemble")
    p.add_argument("--labels", required=True)
    p.add_argument("--regions-dir", required=True)
    p.add_argument("--subset", default="all", help="all, fold:K (with --folds), or a file of slide ids")
    p.add_argument("--folds")
    p.add_argument("--ensemble", action="store_true", help="average scores across checkpoints")
    p.add_argument("--seed", type=int, default=0, help="recorded in the metrics report")
    p.add_argument("--name", default="eval", help="output file stem (default eval)")

    p = add("heatmap", cmd_heatmap, "render per-level and factorized attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--config")
    p.add_argument("--gamma", type=float, default=DEFAULT_GAMMA)
    p.add_argument("--sweep", type=_floats, help="comma list of gammas, e.g. 0.3,0.5,0.7")
    p.add_argument("--level", type=_levels, default=["factorized"], help="comma list of patch, region, slide, factorized")
    p.add_argument("--frozen-levels", help="override which levels count as frozen (comma list or none)")
    p.add_argument("--colormap", default="jet")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--no-normalize", action="store_true", help="blend raw attention without per-level min-max scaling")
    _add_segmentation_flags(p)

    p = add("permtest", cmd_permtest, "two-sided paired permutation test on QWK")
    p.add_argument("--labels", required=True)
    p.add_argument("--preds-a", required=True)
    p.add_argument("--preds-b", required=True)
    p.add_argument("--iters", type=int, default=9999)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        code, msg = EXIT_USAGE, str(exc)
    except (DegenerateBlendError, NumericError) as exc:
        code, msg = EXIT_NUMERIC, str(exc)
    except (OSError, ValueError) as exc:
        code, msg = EXIT_DATA, str(exc)
    print(f"error: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
