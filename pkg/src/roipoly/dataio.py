"""File formats: COCO annotations, results, boxes, PGM/PPM rasters and SVG overlays."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .encoding import VertexTargetSet
from .geometry import GeometryError, Polygon, PolygonLike, as_polygon, bounding_box, signed_area
from .metrics import Detection
from .pyramid import BBox, PyramidError

__all__ = [
    "DataError",
    "BUILDING_CATEGORY",
    "CocoImage",
    "CocoAnnotation",
    "CocoDataset",
    "read_coco",
    "write_coco",
    "coco_from_polygons",
    "write_results",
    "read_results",
    "read_boxes",
    "write_boxes",
    "write_targets",
    "read_targets",
    "read_pnm",
    "write_pnm",
    "write_svg",
    "svg_text",
]

log = logging.getLogger(__name__)

BUILDING_CATEGORY = 100


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def _load_json(path: str | Path) -> Any:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataError(f"{path}: not UTF-8 (byte offset {exc.start})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DataError(f"{path}: malformed JSON at byte offset {offset}: {exc.msg}") from exc


def _number(v: Any, what: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise DataError(f"{what}: expected a number, got {v!r}")
    return float(v)


# ---------------------------------------------------------------------------
# COCO


@dataclass(frozen=True)
class CocoImage:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class CocoAnnotation:
    id: int
    image_id: int
    polygon: Polygon
    bbox: tuple[float, float, float, float]  # x, y, w, h
    area: float
    category_id: int = BUILDING_CATEGORY


@dataclass
class CocoDataset:
    images: list[CocoImage]
    annotations: list[CocoAnnotation]
    categories: list[dict] = field(default_factory=lambda: [{"id": BUILDING_CATEGORY, "name": "building"}])
    holes_rejected: int = 0

    def image(self, image_id: int) -> CocoImage:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def polygons_by_image(self) -> dict[int, list[Polygon]]:
        """Ground-truth polygons per image in annotation-file order."""
        out: dict[int, list[Polygon]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            out[a.image_id].append(a.polygon)
        return out

    def sizes(self) -> dict[int, tuple[int, int]]:
        return {im.id: (im.width, im.height) for im in self.images}


def _parse_image(d: Any) -> CocoImage:
    if not isinstance(d, dict):
        raise DataError(f"image entry must be an object, got {d!r}")
    try:
        iid, w, h = d["id"], d["width"], d["height"]
    except KeyError as exc:
        raise DataError(f"image {d.get('id', '?')}: missing field {exc.args[0]!r}") from None
    if not all(isinstance(x, int) and not isinstance(x, bool) for x in (iid, w, h)) or w <= 0 or h <= 0:
        raise DataError(f"image {iid}: id, width and height must be integers, width and height positive")
    return CocoImage(iid, str(d.get("file_name", "")), w, h)


def _parse_annotation(d: Any, images: Mapping[int, CocoImage]) -> tuple[CocoAnnotation, int]:
    if not isinstance(d, dict) or "id" not in d:
        raise DataError(f"annotation without id: {str(d)[:80]}")
    aid = d["id"]
    where = f"annotation {aid}"
    if d.get("image_id") not in images:
        raise DataError(f"{where}: references unknown image {d.get('image_id')!r}")
    seg = d.get("segmentation")
    if not isinstance(seg, list) or not seg or not all(isinstance(r, list) for r in seg):
        raise DataError(f"{where}: segmentation must be a non-empty list of coordinate lists")
    for ring in seg:
        if len(ring) % 2:
            raise DataError(f"{where}: segmentation ring has odd length {len(ring)}")
        if len(ring) < 6:
            raise DataError(f"{where}: segmentation ring has fewer than 3 vertices")
    coords = np.array([_number(v, where) for v in seg[0]]).reshape(-1, 2)
    try:
        poly = Polygon(coords)
    except GeometryError as exc:
        raise DataError(f"{where}: {exc}") from exc
    if "bbox" in d:
        bbox = d["bbox"]
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise DataError(f"{where}: bbox must have 4 numbers")
        bbox = tuple(_number(v, where) for v in bbox)
    else:
        x0, y0, x1, y1 = bounding_box(poly)
        bbox = (x0, y0, x1 - x0, y1 - y0)
    area = _number(d["area"], where) if "area" in d else abs(signed_area(poly))
    cat = d.get("category_id", BUILDING_CATEGORY)
    return CocoAnnotation(aid, d["image_id"], poly, bbox, area, cat), len(seg) - 1


def read_coco(path: str | Path) -> CocoDataset:
    """Parse and validate a COCO polygon file; only the outer ring of each annotation is kept."""
    data = _load_json(path)
    if not isinstance(data, dict):
        raise DataError(f"{path}: top level must be an object")
    images_raw = data.get("images")
    anns_raw = data.get("annotations", [])
    if not isinstance(images_raw, list) or not isinstance(anns_raw, list):
        raise DataError(f"{path}: 'images' and 'annotations' must be lists")
    images = [_parse_image(d) for d in images_raw]
    by_id = {im.id: im for im in images}
    if len(by_id) != len(images):
        raise DataError(f"{path}: duplicate image ids")
    anns, holes = [], 0
    for d in anns_raw:
        a, h = _parse_annotation(d, by_id)
        anns.append(a)
        holes += h
    if holes:
        log.warning("%s: dropped %d interior ring(s)", path, holes)
    cats = data.get("categories") or [{"id": BUILDING_CATEGORY, "name": "building"}]
    return CocoDataset(images, anns, cats, holes)


def _flat(poly: PolygonLike, digits: Optional[int] = None) -> list[float]:
    v = as_polygon(poly).vertices.reshape(-1)
    return [round(float(x), digits) if digits is not None else float(x) for x in v]


def write_coco(ds: CocoDataset, path: str | Path) -> None:
    doc = {
        "images": [{"id": i.id, "file_name": i.file_name, "width": i.width, "height": i.height} for i in ds.images],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "category_id": a.category_id,
                "segmentation": [_flat(a.polygon)],
                "bbox": list(a.bbox),
                "area": a.area,
                "iscrowd": 0,
            }
            for a in ds.annotations
        ],
        "categories": ds.categories,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def coco_from_polygons(
    images: Sequence[tuple[int, str, int, int]], polygons: Mapping[int, Sequence[PolygonLike]]
) -> CocoDataset:
    """Build a dataset from (id, file_name, width, height) records and per-image polygons."""
    anns = []
    for im in images:
        for p in polygons.get(im[0], []):
            poly = as_polygon(p)
            x0, y0, x1, y1 = bounding_box(poly)
            anns.append(CocoAnnotation(len(anns) + 1, im[0], poly, (x0, y0, x1 - x0, y1 - y0), abs(signed_area(poly))))
    return CocoDataset([CocoImage(*im) for im in images], anns)


# ---------------------------------------------------------------------------
# results, boxes and targets


def write_results(dets: Sequence[Detection], path: str | Path) -> None:
    """COCO results array with coordinates rounded to 2 decimals."""
    doc = [
        {
            "image_id": d.image_id,
            "category_id": BUILDING_CATEGORY,
            "segmentation": [_flat(d.polygon, 2)],
            "score": float(d.score),
        }
        for d in dets
    ]
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def read_results(path: str | Path) -> list[Detection]:
    data = _load_json(path)
    if not isinstance(data, list):
        raise DataError(f"{path}: results must be a JSON array")
    out = []
    for k, d in enumerate(data):
        where = f"result {k}"
        try:
            ring = d["segmentation"][0]
            if len(ring) % 2 or len(ring) < 6:
                raise DataError(f"{where}: ring must have an even number (>= 6) of coordinates")
            poly = Polygon(np.array([_number(v, where) for v in ring]).reshape(-1, 2))
            out.append(Detection(d["image_id"], poly, _number(d["score"], where)))
        except (KeyError, IndexError, TypeError) as exc:
            raise DataError(f"{where}: malformed entry ({exc})") from None
        except GeometryError as exc:
            raise DataError(f"{where}: {exc}") from None
    return out


_BOX_KEYS = ("x_min", "y_min", "x_max", "y_max")


def read_boxes(path: str | Path) -> dict[int, list[BBox]]:
    """Boxes per image id, in file order."""
    data = _load_json(path)
    if not isinstance(data, list):
        raise DataError(f"{path}: boxes must be a JSON array")
    out: dict[int, list[BBox]] = {}
    for k, d in enumerate(data):
        try:
            vals = [_number(d[key], f"box {k}") for key in _BOX_KEYS]
            box = BBox(*vals, score=_number(d.get("score", 1.0), f"box {k}"))
            out.setdefault(d["image_id"], []).append(box)
        except (KeyError, TypeError) as exc:
            raise DataError(f"box {k}: missing or malformed field ({exc})") from None
        except PyramidError as exc:
            raise DataError(f"box {k}: {exc}") from None
    return out


def write_boxes(boxes: Mapping[int, Sequence[BBox]], path: str | Path) -> None:
    doc = [
        {"image_id": img, **dict(zip(_BOX_KEYS, b.as_tuple())), "score": b.score}
        for img, bs in boxes.items()
        for b in bs
    ]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def write_targets(records: Sequence[tuple[int, int, VertexTargetSet]], path: str | Path) -> None:
    """Dump (annotation_id, image_id, target) records as JSON.

    ``slot_to_gt`` lists the corner index held by each slot, -1 for invalid slots.
    """
    doc = [
        {
            "annotation_id": aid,
            "image_id": iid,
            "mode": t.mode,
            "M": int(t.vertices.shape[0]),
            "vertices": t.vertices.tolist(),
            "labels": [int(x) for x in t.labels],
            "slot_to_gt": [int(t.extras["slot_to_gt"].get(k, -1)) for k in range(len(t.labels))],
        }
        for aid, iid, t in records
    ]
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def read_targets(path: str | Path) -> list[dict]:
    data = _load_json(path)
    if not isinstance(data, list):
        raise DataError(f"{path}: targets must be a JSON array")
    return data


# ---------------------------------------------------------------------------
# PGM / PPM (binary, 8-bit)


def write_pnm(data: np.ndarray, path: str | Path) -> None:
    """Write (H, W) as P5 or (3, H, W) as P6; values in [0, 1] scale to 0..255."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 2:
        magic, pixels = b"P5", a
    elif a.ndim == 3 and a.shape[0] == 3:
        magic, pixels = b"P6", np.moveaxis(a, 0, -1)
    else:
        raise DataError("PNM data must be (H, W) or (3, H, W)")
    h, w = a.shape[-2:]
    q = np.clip(np.rint(pixels * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(q.tobytes())


def _pnm_tokens(buf: bytes, count: int, pos: int) -> tuple[list[int], int]:
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DataError("malformed PNM header")
        out.append(int(buf[start:pos]))
    return out, pos + 1


def read_pnm(path: str | Path) -> np.ndarray:
    """Read binary PGM/PPM as float (C, H, W) in [0, 1]."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: only binary PGM (P5) and PPM (P6) are supported")
    (w, h, maxval), pos = _pnm_tokens(buf, 3, 2)
    if not 0 < maxval < 256:
        raise DataError(f"{path}: only 8-bit PNM is supported")
    c = 1 if magic == b"P5" else 3
    body = buf[pos : pos + w * h * c]
    if len(body) != w * h * c:
        raise DataError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).astype(np.float64) / maxval
    return np.moveaxis(arr, -1, 0)


# ---------------------------------------------------------------------------
# SVG


DEFAULT_STYLE = {"stroke": "#d62728", "fill": "none", "vertex": "#1f77b4"}


def _fmt(x: float) -> str:
    s = f"{x:.3f}".rstrip("0").rstrip(".")
    return "0" if s == "-0" else s


def svg_text(image_dims: tuple[int, int], polygons: Sequence[tuple[PolygonLike, Optional[dict]]], radius: float = 1.0) -> str:
    w, h = image_dims
    lines = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect x="0" y="0" width="{w}" height="{h}" fill="white" stroke="black"/>',
    ]
    for poly, style in polygons:
        st = {**DEFAULT_STYLE, **(style or {})}
        v = as_polygon(poly).vertices
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in v)
        lines.append(f'<polygon points="{pts}" fill="{st["fill"]}" stroke="{st["stroke"]}" stroke-width="0.5"/>')
        for x, y in v:
            lines.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(radius)}" fill="{st["vertex"]}"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def write_svg(image_dims: tuple[int, int], polygons: Sequence[tuple[PolygonLike, Optional[dict]]], path: str | Path) -> None:
    """One polygon element per input (in input order) plus a circle per vertex."""
    Path(path).write_text(svg_text(image_dims, polygons), encoding="utf-8")
