"""Losses, synthetic scenes, the toy trainer and threshold-only inference."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import read_rpck, write_rpck
from .config import RunConfig
from .decoder import DecoderOutput, RoIPolyDecoder
from .encoding import VertexTargetSet, build_target
from .metrics import Detection
from .geometry import GeometryError, Polygon, bounding_box, ensure_ccw, is_simple, rasterize
from .pyramid import LEVELS, BBox, FeaturePyramid, ImageRaster, PyramidNet, level_assign, roi_align_batch

__all__ = [
    "TrainSample",
    "LossReport",
    "TrainingDivergence",
    "RoIPolyModel",
    "PolygonPrediction",
    "coord_loss",
    "class_loss",
    "focal_loss",
    "total_loss",
    "render_scene",
    "gen_synthetic",
    "collate",
    "batch_losses",
    "evaluate_loss",
    "train_toy",
    "threshold_vertices",
    "infer",
    "save_model",
    "load_model",
    "write_loss_csv",
    "VertexStats",
    "vertex_stats",
    "detect",
]

log = logging.getLogger(__name__)

LOG_EPS = 1e-12


class TrainingDivergence(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainSample:
    image: ImageRaster
    gt_polygons: list[Polygon]
    gt_boxes: list[BBox]
    targets: list[VertexTargetSet]
    image_id: int = 0

    def __post_init__(self) -> None:
        if not len(self.gt_polygons) == len(self.gt_boxes) == len(self.targets):
            raise ValueError("polygons, boxes and targets must have equal length")


@dataclass
class LossReport:
    l_cor: float
    l_cls: float
    total: float
    lambda_cor: float
    lambda_cls: float


# ---------------------------------------------------------------------------
# losses


def coord_loss_batched(pred: torch.Tensor, target: torch.Tensor, n_gt: torch.Tensor) -> torch.Tensor:
    """Mean over images of the per-image L1 vertex loss.

    pred, target: (B, N, M, 2); n_gt: (B,). Groups at or beyond ``n_gt[b]`` are
    ignored, and an image without ground truth contributes 0.
    """
    B, N, M, _ = pred.shape
    groups = torch.arange(N, device=pred.device)[None, :] < n_gt[:, None]  # (B, N)
    l1 = (pred - target).abs().sum(dim=-1).sum(dim=-1)  # (B, N)
    per_image = torch.where(groups, l1, torch.zeros_like(l1)).sum(dim=1)
    denom = (n_gt * M).to(pred.dtype)
    per_image = torch.where(n_gt > 0, per_image / denom.clamp(min=1), torch.zeros_like(per_image))
    return per_image.mean()


def coord_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """L1 vertex loss of one image: pred (N, M, 2), target (N_gt, M, 2), N_gt <= N."""
    n_gt = target.shape[0]
    N = pred.shape[0]
    if n_gt > N:
        raise ValueError("more ground-truth polygons than prediction groups")
    padded = torch.zeros_like(pred)
    padded[:n_gt] = target
    return coord_loss_batched(pred[None], padded[None], torch.tensor([n_gt]))


def focal_loss(logits: torch.Tensor, labels: torch.Tensor, alpha: float, gamma: float) -> torch.Tensor:
    """Elementwise ``-alpha_t * (1 - p_t)**gamma * log(p_t)``; alpha weights the positive class."""
    p = torch.sigmoid(logits)
    y = labels.to(logits.dtype)
    p_t = p * y + (1 - p) * (1 - y)
    a_t = alpha * y + (1 - alpha) * (1 - y)
    return -a_t * (1 - p_t) ** gamma * torch.log(p_t.clamp(min=LOG_EPS))


def class_loss(logits: torch.Tensor, labels: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss averaged over every slot of every group."""
    return focal_loss(logits, labels, alpha, gamma).mean()


def total_loss(l_cor, l_cls, lambda_cor: float, lambda_cls: float):
    """``lambda_cor * l_cor + lambda_cls * l_cls``; returns a LossReport for plain floats."""
    total = lambda_cor * l_cor + lambda_cls * l_cls
    if isinstance(total, torch.Tensor):
        return total
    return LossReport(float(l_cor), float(l_cls), float(total), lambda_cor, lambda_cls)


# ---------------------------------------------------------------------------
# synthetic scenes


def _rect(rng, grid, lo, hi):
    w, h = rng.uniform(lo, hi, 2)
    return np.array([(0, 0), (0, h), (w, h), (w, 0)], dtype=np.float64)


def _rotated_rect(rng, grid, lo, hi):
    v = _rect(rng, grid, lo, hi)
    v -= v.mean(axis=0)
    t = rng.uniform(math.radians(10), math.radians(80))
    c, s = math.cos(t), math.sin(t)
    return v @ np.array([[c, -s], [s, c]])


def _lshape(rng, grid, lo, hi):
    w, h = rng.uniform(lo, hi, 2)
    cw, ch = w * rng.uniform(0.35, 0.65), h * rng.uniform(0.35, 0.65)
    v = np.array([(0, 0), (0, h), (w, h), (w, ch), (cw, ch), (cw, 0)], dtype=np.float64)
    k = int(rng.integers(4))
    if k & 1:
        v[:, 0] = w - v[:, 0]
    if k & 2:
        v[:, 1] = h - v[:, 1]
    return v


SHAPES: dict[str, Callable] = {"rect": _rect, "rotated": _rotated_rect, "lshape": _lshape}


def render_scene(polygons: Sequence[Polygon], grid: int) -> np.ndarray:
    """Two channels: filled occupancy and a 1-px inner boundary."""
    occ = np.zeros((grid, grid), dtype=bool)
    for p in polygons:
        occ |= rasterize(p, grid, grid).bits
    pad = np.pad(occ, 1)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    boundary = occ & ~interior
    return np.stack([occ, boundary]).astype(np.float32)


def gen_synthetic(
    seed: int,
    count: int,
    grid: int = 64,
    shapes: Sequence[str] = ("rect", "rotated", "lshape"),
    M: int = 12,
    max_polygons: int = 4,
    spacing: float = 0.5,
    mode: str = "index",
    box_dilation: float = 0.1,
) -> list[TrainSample]:
    """Deterministic scenes of 1..max_polygons disjoint buildings."""
    if grid < 64:
        raise ValueError("grid must be >= 64")
    rng = np.random.default_rng(seed)
    lo, hi = 0.16 * grid, 0.4 * grid
    margin = 2.0
    out = []
    for idx in range(count):
        want = int(rng.integers(1, max_polygons + 1))
        polys: list[Polygon] = []
        taken = np.zeros((grid, grid), dtype=bool)
        attempts = 0
        while len(polys) < want and attempts < 200:
            attempts += 1
            kind = shapes[int(rng.integers(len(shapes)))]
            v = SHAPES[kind](rng, grid, lo, hi)
            v = v - v.min(axis=0)
            ext = v.max(axis=0)
            if np.any(ext > grid - 2 * margin):
                continue
            v = v + rng.uniform(margin, grid - margin - ext, 2)
            poly = ensure_ccw(v)
            if not is_simple(poly):
                continue
            mask = rasterize(poly, grid, grid).bits
            if not mask.any():
                continue
            grown = np.pad(mask, 1)
            grown = grown[1:-1, 1:-1] | grown[:-2, 1:-1] | grown[2:, 1:-1] | grown[1:-1, :-2] | grown[1:-1, 2:]
            if np.any(grown & taken):
                continue
            taken |= mask
            polys.append(poly)
        boxes = [BBox(*bounding_box(p)).dilate(box_dilation).clamp(grid, grid) for p in polys]
        targets = [build_target(p, M, mode, spacing=spacing, source_polygon_id=k) for k, p in enumerate(polys)]
        out.append(TrainSample(ImageRaster(render_scene(polys, grid)), polys, boxes, targets, image_id=idx))
    return out


# ---------------------------------------------------------------------------
# model


class RoIPolyModel(nn.Module):
    """Pyramid generator plus decoder. Boxes arrive from outside (ground truth or a file)."""

    def __init__(self, cfg: RunConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.pyramid = PyramidNet(cfg.in_channels, cfg.C)
        self.level_proj = nn.Conv2d(len(LEVELS) * cfg.C, cfg.C, 1) if cfg.all_level_roi else None
        self.decoder = RoIPolyDecoder(cfg.decoder())

    def extract_rois(self, levels: dict[int, torch.Tensor], boxes: torch.Tensor, bidx: torch.Tensor) -> torch.Tensor:
        """RoI features (R, C, H_r, W_r) for image-frame boxes (R, 4)."""
        cfg = self.cfg
        R = boxes.shape[0]
        if self.level_proj is not None:
            stacked = torch.cat([roi_align_batch(levels[l], boxes, bidx, l, cfg.H_r, cfg.W_r) for l in LEVELS], dim=1)
            return self.level_proj(stacked)
        chosen = [level_assign(b, cfg.l_c, cfg.S_c) for b in boxes.detach().tolist()]
        C = next(iter(levels.values())).shape[1]
        out = boxes.new_zeros((R, C, cfg.H_r, cfg.W_r))
        for lvl in sorted(set(chosen)):
            sel = torch.tensor([k for k, c in enumerate(chosen) if c == lvl], dtype=torch.long)
            out = out.index_copy(0, sel, roi_align_batch(levels[lvl], boxes[sel], bidx[sel], lvl, cfg.H_r, cfg.W_r))
        return out

    def forward(self, images: torch.Tensor, boxes: torch.Tensor, bidx: torch.Tensor) -> DecoderOutput:
        levels = self.pyramid(images)
        rois = self.extract_rois(levels, boxes, bidx)
        H, W = images.shape[-2:]
        return self.decoder(rois, boxes, (float(W), float(H)))

    def decode_pyramid(self, pyramid: FeaturePyramid, boxes: torch.Tensor, image_size: tuple[float, float]) -> DecoderOutput:
        dtype = self.decoder.query_content.dtype
        levels = {k: v.to(dtype)[None] for k, v in pyramid.levels.items()}
        bidx = torch.zeros(boxes.shape[0], dtype=torch.long)
        rois = self.extract_rois(levels, boxes.to(dtype), bidx)
        return self.decoder(rois, boxes.to(dtype), image_size)


@dataclass
class Batch:
    images: torch.Tensor  # (B, C_in, H, W)
    boxes: torch.Tensor  # (B*N, 4)
    bidx: torch.Tensor  # (B*N,)
    targets: torch.Tensor  # (B, N, M, 2), normalized image units
    labels: torch.Tensor  # (B, N, M)
    n_gt: torch.Tensor  # (B,)


def collate(
    samples: Sequence[TrainSample], cfg: RunConfig, dtype=torch.float32, rng: Optional[np.random.Generator] = None
) -> Batch:
    """Stack samples; groups beyond N_gt get the whole-image box and all-invalid labels."""
    B, N, M = len(samples), cfg.N, cfg.M
    H, W = samples[0].image.height, samples[0].image.width
    images = torch.as_tensor(np.stack([s.image.data for s in samples]), dtype=dtype)
    boxes = np.tile(np.array([0.0, 0.0, W, H]), (B, N, 1))
    targets = np.zeros((B, N, M, 2))
    labels = np.zeros((B, N, M))
    n_gt = np.zeros(B, dtype=np.int64)
    for b, s in enumerate(samples):
        if len(s.gt_polygons) > N:
            raise ValueError(f"sample {s.image_id} has {len(s.gt_polygons)} polygons, more than N={N}")
        n_gt[b] = len(s.gt_polygons)
        for n, (box, t) in enumerate(zip(s.gt_boxes, s.targets)):
            if t.vertices.shape[0] != M:
                raise ValueError("target length differs from M")
            bx = np.array(box.as_tuple())
            if rng is not None and cfg.box_jitter > 0:
                size = np.array([box.width, box.height, box.width, box.height])
                bx = bx + rng.uniform(-cfg.box_jitter, cfg.box_jitter, 4) * size
                if bx[2] <= bx[0] or bx[3] <= bx[1]:
                    bx = np.array(box.as_tuple())
            boxes[b, n] = bx
            targets[b, n] = t.vertices / np.array([W, H])
            labels[b, n] = t.labels
    return Batch(
        images=images,
        boxes=torch.as_tensor(boxes.reshape(B * N, 4), dtype=dtype),
        bidx=torch.arange(B).repeat_interleave(N),
        targets=torch.as_tensor(targets, dtype=dtype),
        labels=torch.as_tensor(labels, dtype=dtype),
        n_gt=torch.as_tensor(n_gt),
    )


def batch_losses(out: DecoderOutput, batch: Batch, cfg: RunConfig, layer: int = -1):
    """(l_cor, l_cls, total) tensors for one decoder layer."""
    B, N, M = batch.labels.shape
    H, W = batch.images.shape[-2:]
    scale = torch.tensor([W, H], dtype=batch.targets.dtype)
    xy = (out.image_xy(layer) / scale).reshape(B, N, M, 2)
    logits = out.logits[layer].reshape(B, N, M)
    l_cor = coord_loss_batched(xy, batch.targets, batch.n_gt)
    l_cls = class_loss(logits, batch.labels, cfg.focal_alpha, cfg.focal_gamma)
    return l_cor, l_cls, total_loss(l_cor, l_cls, cfg.lambda_cor, cfg.lambda_cls)


def _objective(out: DecoderOutput, batch: Batch, cfg: RunConfig) -> torch.Tensor:
    layers = range(len(out.coords)) if cfg.aux_loss else [len(out.coords) - 1]
    return sum(batch_losses(out, batch, cfg, k)[2] for k in layers)


def _fixed_batches(dataset: Sequence[TrainSample], size: int):
    return [dataset[i : i + size] for i in range(0, len(dataset), size)]


@torch.no_grad()
def evaluate_loss(model: RoIPolyModel, dataset: Sequence[TrainSample], batch_size: Optional[int] = None) -> LossReport:
    """Final-layer losses over the dataset in fixed order, image-weighted."""
    cfg = model.cfg
    dtype = model.decoder.query_content.dtype
    cor = cls = 0.0
    for chunk in _fixed_batches(dataset, batch_size or cfg.batch_size):
        batch = collate(chunk, cfg, dtype)
        l_cor, l_cls, _ = batch_losses(model(batch.images, batch.boxes, batch.bidx), batch, cfg)
        cor += float(l_cor) * len(chunk)
        cls += float(l_cls) * len(chunk)
    n = len(dataset)
    return total_loss(cor / n, cls / n, cfg.lambda_cor, cfg.lambda_cls)


@dataclass
class TrainResult:
    model: RoIPolyModel
    curve: list[LossReport] = field(default_factory=list)


def train_toy(
    cfg: RunConfig,
    dataset: Sequence[TrainSample],
    epochs: Optional[int] = None,
    lr: Optional[float] = None,
    model: Optional[RoIPolyModel] = None,
    on_epoch: Optional[Callable[[int, LossReport], None]] = None,
    single_thread: bool = True,
) -> TrainResult:
    """Adam on the weighted loss; the curve holds the end-of-epoch dataset loss.

    With ``single_thread`` torch runs on one thread, which makes runs with the
    same seed bit-identical.
    """
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    if single_thread:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    if model is None:
        model = RoIPolyModel(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999))
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    for epoch in range(1, epochs + 1):
        model.train()
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            chunk = [dataset[i] for i in order[start : start + cfg.batch_size]]
            batch = collate(chunk, cfg, rng=rng)
            loss = _objective(model(batch.images, batch.boxes, batch.bidx), batch, cfg)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch starting {start}: {float(loss.detach())}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        report = evaluate_loss(model, dataset)
        if not math.isfinite(report.total):
            raise TrainingDivergence(f"non-finite evaluation loss after epoch {epoch}")
        result.curve.append(report)
        log.info("epoch %d l_cor=%.5f l_cls=%.5f total=%.5f", epoch, report.l_cor, report.l_cls, report.total)
        if on_epoch is not None:
            on_epoch(epoch, report)
    return result


def write_loss_csv(curve: Sequence[LossReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "l_cor", "l_cls", "total"])
        for k, r in enumerate(curve, start=1):
            w.writerow([k, repr(r.l_cor), repr(r.l_cls), repr(r.total)])


def save_model(model: RoIPolyModel, path: str | Path) -> None:
    write_rpck(path, model.state_dict(), config=model.cfg.to_dict())


def load_model(path: str | Path) -> RoIPolyModel:
    tensors, config = read_rpck(path)
    if config is None:
        raise ValueError(f"{path} carries no run configuration")
    model = RoIPolyModel(RunConfig.from_dict(config))
    model.load_state_dict(tensors)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# inference


@dataclass
class PolygonPrediction:
    """Decoder output for one box and the vertices that pass the score threshold."""

    box: BBox
    raw_xy: np.ndarray  # (M, 2) image frame, slot order
    raw_scores: np.ndarray  # (M,)
    slots: np.ndarray  # kept slot indices, increasing
    tau: float

    @property
    def vertices(self) -> np.ndarray:
        return self.raw_xy[self.slots]

    @property
    def scores(self) -> np.ndarray:
        return self.raw_scores[self.slots]

    @property
    def score(self) -> float:
        return float(self.box.score * self.scores.mean()) if len(self.slots) else 0.0

    @property
    def polygon(self) -> Optional[Polygon]:
        """The kept ring, or None if fewer than 3 vertices survive or the ring is degenerate."""
        if len(self.slots) < 3:
            return None
        try:
            return Polygon(self.vertices)
        except GeometryError:
            return None


def threshold_vertices(scores: np.ndarray, tau: float) -> np.ndarray:
    """Slots whose score reaches ``tau``, in slot order."""
    return np.flatnonzero(np.asarray(scores) >= tau)


@torch.no_grad()
def infer(
    pyramid: FeaturePyramid,
    boxes: Sequence[BBox],
    model: RoIPolyModel | str | Path,
    tau: float = 0.5,
    image_size: Optional[tuple[float, float]] = None,
) -> list[PolygonPrediction]:
    """Decode one polygon per box and keep vertices with score >= tau. Nothing else is done."""
    if not 0 <= tau < 1:
        raise ValueError("tau must be in [0, 1)")
    if not boxes:
        return []
    if not isinstance(model, RoIPolyModel):
        model = load_model(model)
    if image_size is None:
        lvl2 = pyramid.levels[min(pyramid.levels)]
        stride = 2 ** min(pyramid.levels)
        image_size = (float(lvl2.shape[-1] * stride), float(lvl2.shape[-2] * stride))
    bt = torch.tensor([b.as_tuple() for b in boxes], dtype=torch.float64)
    out = model.decode_pyramid(pyramid, bt, image_size)
    xy = out.image_xy().double().numpy()
    sc = out.scores().double().numpy()
    return [PolygonPrediction(b, xy[k], sc[k], threshold_vertices(sc[k], tau), tau) for k, b in enumerate(boxes)]


@dataclass
class VertexStats:
    mean_error_px: float
    accuracy: float
    n_valid: int
    n_slots: int


@torch.no_grad()
def vertex_stats(model: RoIPolyModel, dataset: Sequence[TrainSample], tau: float = 0.5) -> VertexStats:
    """Slot-wise comparison against the targets of the ground-truth groups.

    The error is the image-frame distance of each valid target vertex to the
    prediction in its slot; accuracy is the share of slots whose thresholded
    score agrees with the valid/invalid label.
    """
    err = 0.0
    correct = n_valid = n_slots = 0
    for s in dataset:
        if not s.gt_boxes:
            continue
        preds = infer(model.pyramid.build(s.image), s.gt_boxes, model, tau, (float(s.image.width), float(s.image.height)))
        for pred, t in zip(preds, s.targets):
            valid = t.labels.astype(bool)
            err += float(np.linalg.norm(pred.raw_xy[valid] - t.vertices[valid], axis=1).sum())
            n_valid += int(valid.sum())
            correct += int(((pred.raw_scores >= tau) == valid).sum())
            n_slots += valid.size
    return VertexStats(err / max(n_valid, 1), correct / max(n_slots, 1), n_valid, n_slots)


@torch.no_grad()
def detect(model: RoIPolyModel, dataset: Sequence[TrainSample], tau: float = 0.5) -> list[Detection]:
    """Run inference on each sample's boxes and collect the surviving polygons."""
    dets = []
    for s in dataset:
        if not s.gt_boxes:
            continue
        size = (float(s.image.width), float(s.image.height))
        for pred in infer(model.pyramid.build(s.image), s.gt_boxes, model, tau, size):
            poly = pred.polygon
            if poly is not None:
                dets.append(Detection(s.image_id, poly, pred.score))
    return dets
