"""Command-line entry point: ``roipoly <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config, save_config
from .dataio import (
    DataError,
    coco_from_polygons,
    read_boxes,
    read_coco,
    read_pnm,
    read_results,
    write_boxes,
    write_coco,
    write_pnm,
    write_results,
    write_svg,
    write_targets,
)
from .decoder import attention_cost_estimate, padded_pixel_count
from .encoding import EncodingError, build_target
from .geometry import GeometryError
from .metrics import Detection, evaluate
from .pyramid import FeaturePyramid, ImageRaster, PyramidError, read_fpyr
from .training import TrainingDivergence, gen_synthetic, infer, load_model, save_model, train_toy, write_loss_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("roipoly")


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits with 2 by default
        raise UsageError(f"{self.prog}: {message}")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig.preset_config(args.preset)
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_encode(args) -> int:
    ds = read_coco(args.coco)
    records = []
    for a in ds.annotations:
        try:
            t = build_target(a.polygon, args.M, args.mode, spacing=args.spacing, source_polygon_id=a.id)
        except (EncodingError, GeometryError) as exc:
            raise DataError(f"annotation {a.id}: {exc}") from None
        records.append((a.id, a.image_id, t))
    write_targets(records, args.out)
    print(f"encoded {len(records)} polygon(s) with M={args.M}, mode={args.mode}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    cfg = _config(args)
    overrides = {k: v for k, v in (("epochs", args.epochs), ("seed", args.seed), ("lr", args.lr)) if v is not None}
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
    shapes = tuple(args.shapes.split(","))
    data = gen_synthetic(cfg.seed, args.samples, grid=cfg.grid, shapes=shapes, M=cfg.M, spacing=cfg.spacing, mode=cfg.match_mode)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train_toy(cfg, data)
    save_model(result.model, out / "model.rpck")
    write_loss_csv(result.curve, out / "loss.csv")
    save_config(cfg, out / "config.toml")
    last = result.curve[-1].total if result.curve else float("nan")
    print(f"trained {cfg.epochs} epoch(s) on {len(data)} samples; final loss {last:.6g}; wrote {out}")
    return EXIT_OK


def _pyramid_for(image_id, source: Path, model) -> tuple[FeaturePyramid, Optional[tuple[float, float]]]:
    if source.is_file():
        if source.suffix == ".fpyr":
            return read_fpyr(source), None
        raster = read_pnm(source)
    else:
        for ext in (".fpyr", ".ppm", ".pgm"):
            cand = source / f"{image_id}{ext}"
            if cand.exists():
                return _pyramid_for(image_id, cand, model)
        raise DataError(f"no features or image for image {image_id} in {source}")
    c_in = model.cfg.in_channels
    if raster.shape[0] < c_in:
        raise DataError(f"image {image_id} has {raster.shape[0]} channel(s), model needs {c_in}")
    img = ImageRaster(raster[:c_in])
    with torch.no_grad():
        return model.pyramid.build(img), (float(img.width), float(img.height))


def cmd_infer(args) -> int:
    model = load_model(args.checkpoint)
    boxes = read_boxes(args.boxes)
    source = Path(args.features)
    if source.is_file() and len(boxes) > 1:
        raise DataError("a single feature/image file needs a boxes file for a single image")
    dets, raw = [], []
    for image_id, bs in boxes.items():
        pyr, size = _pyramid_for(image_id, source, model)
        if args.image_size:
            size = tuple(float(v) for v in args.image_size)
        preds = infer(pyr, bs, model, args.tau, size)
        for k, p in enumerate(preds):
            if not (np.all(np.isfinite(p.raw_xy)) and np.all(np.isfinite(p.raw_scores))):
                raise NumericalFailure(f"non-finite decoder output for image {image_id}, box {k}")
            raw.append(
                {
                    "image_id": image_id,
                    "box": list(p.box.as_tuple()),
                    "box_score": p.box.score,
                    "coords": p.raw_xy.tolist(),
                    "scores": p.raw_scores.tolist(),
                    "kept_slots": p.slots.tolist(),
                }
            )
            if p.polygon is not None:
                dets.append(Detection(image_id, p.polygon, p.score))
    write_results(dets, args.out)
    if args.raw:
        Path(args.raw).write_text(json.dumps({"tau": args.tau, "predictions": raw}) + "\n", encoding="utf-8")
    print(f"{len(dets)} polygon(s) from {sum(len(b) for b in boxes.values())} box(es)")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = read_coco(args.gt)
    dets = read_results(args.results)
    known = {im.id for im in gt.images}
    unknown = sorted({d.image_id for d in dets if d.image_id not in known}, key=str)
    if unknown:
        raise DataError(f"results reference unknown image id(s): {unknown[:5]}")
    report = evaluate(
        dets,
        gt.polygons_by_image(),
        gt.sizes(),
        match_iou=args.match_iou,
        boundary_ratio=args.boundary_ratio,
        floorplan=args.floorplan,
    )
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_table(), end="")
    return EXIT_OK


def cost_table(cfg: RunConfig, width: int, height: int) -> str:
    est = attention_cost_estimate(cfg.decoder(), (width, height))
    g, r = est["global"], est["roi"]
    rows = [
        ("quantity", "global", "roi"),
        ("encoder tokens", str(g["encoder_tokens"]), str(r["encoder_tokens"])),
        ("encoder ops", str(g["encoder_ops"]), str(r["encoder_ops"])),
        ("decoder ops", str(g["decoder_ops"]), str(r["decoder_ops"])),
    ]
    widths = [max(len(row[i]) for row in rows) for i in range(3)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in rows]
    n_e = padded_pixel_count(width, height)
    lines.append(f"N*H_r*W_r = {cfg.N}*{cfg.H_r}*{cfg.W_r} = {r['encoder_tokens']}  vs  N_e = {n_e}")
    lines.append(f"encoder ratio global/roi = {est['encoder_ratio']:.4g}")
    lines.append(f"decoder ratio global/roi = {est['decoder_ratio']}")
    return "\n".join(lines) + "\n"


def cmd_estimate_cost(args) -> int:
    cfg = _config(args)
    w = args.width if args.width is not None else cfg.grid
    h = args.height if args.height is not None else cfg.grid
    print(cost_table(cfg, w, h), end="")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    shapes = tuple(args.shapes.split(","))
    data = gen_synthetic(args.seed, args.count, grid=args.grid, shapes=shapes, M=args.M)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = []
    for s in data:
        name = f"{s.image_id}.ppm"
        rgb = np.zeros((3, s.image.height, s.image.width))
        rgb[: s.image.channels] = s.image.data
        write_pnm(rgb, out / name)
        images.append((s.image_id, name, s.image.width, s.image.height))
    write_coco(coco_from_polygons(images, {s.image_id: s.gt_polygons for s in data}), out / "annotations.json")
    write_boxes({s.image_id: s.gt_boxes for s in data}, out / "boxes.json")
    print(f"wrote {len(data)} image(s) to {out}")
    return EXIT_OK


def cmd_viz(args) -> int:
    items = []
    dims = None
    if args.gt:
        ds = read_coco(args.gt)
        im = ds.image(args.image_id) if args.image_id is not None else ds.images[0]
        dims = (im.width, im.height)
        items += [(p, {"stroke": "#2ca02c", "vertex": "#2ca02c"}) for p in ds.polygons_by_image()[im.id]]
        image_id = im.id
    else:
        image_id = args.image_id
    if args.results:
        for d in read_results(args.results):
            if image_id is None or d.image_id == image_id:
                items.append((d.polygon, None))
    if args.size:
        dims = tuple(args.size)
    if dims is None:
        raise UsageError("viz: pass --gt or --size to fix the canvas")
    write_svg(dims, items, args.out)
    print(f"wrote {len(items)} polygon(s) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="roipoly", description="RoI-confined polygon decoding toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="flat TOML run configuration")
        sp.add_argument("--preset", default="desk", choices=["desk", "small_medium", "large"])

    sp = sub.add_parser("encode", help="COCO polygons -> vertex target sets")
    sp.add_argument("coco")
    sp.add_argument("--out", required=True)
    sp.add_argument("--M", type=int, default=RunConfig().M)
    sp.add_argument("--mode", choices=["index", "euclidean"], default="index")
    sp.add_argument("--spacing", type=float, default=RunConfig().spacing)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("train-toy", help="train on synthetic scenes")
    with_config(sp)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--shapes", default="rect")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lr", type=float)
    sp.set_defaults(func=cmd_train_toy)

    sp = sub.add_parser("infer", help="decode polygons for supplied boxes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--boxes", required=True)
    sp.add_argument("--features", required=True, help="FPYR/PGM/PPM file or a directory of <image_id>.<ext>")
    sp.add_argument("--out", required=True)
    sp.add_argument("--raw", help="also dump raw decoder output")
    sp.add_argument("--tau", type=float, default=0.5)
    sp.add_argument("--image-size", type=float, nargs=2, metavar=("W", "H"))
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="score results against COCO ground truth")
    sp.add_argument("--results", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out")
    sp.add_argument("--match-iou", type=float, default=0.5)
    sp.add_argument("--boundary-ratio", type=float, default=0.02)
    sp.add_argument("--floorplan", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("estimate-cost", help="global vs. RoI attention cost")
    with_config(sp)
    sp.add_argument("--width", type=int)
    sp.add_argument("--height", type=int)
    sp.set_defaults(func=cmd_estimate_cost)

    sp = sub.add_parser("gen-data", help="write a synthetic COCO dataset")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--grid", type=int, default=64)
    sp.add_argument("--M", type=int, default=RunConfig().M)
    sp.add_argument("--shapes", default="rect,rotated,lshape")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("viz", help="draw polygons to SVG")
    sp.add_argument("--out", required=True)
    sp.add_argument("--gt")
    sp.add_argument("--results")
    sp.add_argument("--image-id", type=int)
    sp.add_argument("--size", type=int, nargs=2, metavar=("W", "H"))
    sp.set_defaults(func=cmd_viz)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("roipoly: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergence, NumericalFailure) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ConfigError, EncodingError, GeometryError, PyramidError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
