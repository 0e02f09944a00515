"""Per-polygon vertex-query decoder.

Each polygon owns M vertex queries. A query carries a content vector ``e``,
a reference point ``v`` (two pre-sigmoid reals, RoI-normalized after the
sigmoid) and a class logit ``cls``. Every layer

    p = LN(MLP(PE(sigmoid(v))))       position embedding
    l = MLP(PE(sigmoid(cls)))         logit embedding
    q = (e + p) * (1 + gamma) + beta  with (gamma, beta) = Linear(l)
    q = self-attention over the M queries of the same polygon
    q = deformable cross-attention into the polygon's own RoI
    q = feed-forward
    v <- v + MLP_coords(q);  cls <- cls + Linear(q);  e <- q

so no operation mixes information between polygons. Batched tensors keep the
polygon axis first and only ever reduce over the query axis.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
from torch import nn

from .pyramid import bilinear_sample

__all__ = [
    "DecoderConfig",
    "DecoderOutput",
    "DecoderError",
    "sinusoidal_pe",
    "PositionEmbedding",
    "LogitEmbedding",
    "AdaLNFusion",
    "fuse_add",
    "SelfAttention",
    "DeformableCrossAttention",
    "FeedForward",
    "RoIEncoderLayer",
    "DecoderLayer",
    "RoIPolyDecoder",
    "attention_cost_estimate",
    "padded_pixel_count",
]

PE_TEMPERATURE = 10000.0


class DecoderError(ValueError):
    pass


@dataclass
class DecoderConfig:
    M: int = 12
    N: int = 8
    L: int = 3
    C: int = 32
    heads: int = 4
    K: int = 4
    H_r: int = 7
    W_r: int = 7
    fusion: str = "adaln"  # or "add"
    box_embed: bool = True
    encoder_layers: int = 0

    def __post_init__(self) -> None:
        for name in ("M", "N", "L", "C", "heads", "K", "H_r", "W_r"):
            if getattr(self, name) <= 0:
                raise DecoderError(f"{name} must be positive")
        if self.C % self.heads:
            raise DecoderError("C must be divisible by heads")
        if self.C % 4:
            raise DecoderError("C must be a multiple of 4 (two sin/cos pairs per coordinate)")
        if self.fusion not in ("adaln", "add"):
            raise DecoderError(f"unknown fusion {self.fusion!r}")
        if self.encoder_layers < 0:
            raise DecoderError("encoder_layers must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_pe(values: torch.Tensor, dim: int, temperature: float = PE_TEMPERATURE) -> torch.Tensor:
    """Sinusoidal embedding of the last axis of ``values`` (n scalars) into ``dim`` channels.

    Each scalar x gets ``d = dim // n`` channels, interleaved as
    ``sin(2*pi*x / T**(2k/d)), cos(2*pi*x / T**(2k/d))`` for k = 0 .. d/2 - 1;
    the per-scalar blocks are concatenated in input order.
    """
    n = values.shape[-1]
    if dim % n or (dim // n) % 2:
        raise DecoderError(f"dim={dim} must split into an even number of channels per each of {n} inputs")
    d = dim // n
    k = torch.arange(d // 2, dtype=values.dtype, device=values.device)
    freq = 2 * math.pi / temperature ** (2 * k / d)
    arg = values[..., None] * freq  # (..., n, d/2)
    pe = torch.stack([torch.sin(arg), torch.cos(arg)], dim=-1)  # (..., n, d/2, 2)
    return pe.flatten(-3)


def _mlp(c_in: int, c_hidden: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(c_in, c_hidden), nn.GELU(), nn.Linear(c_hidden, c_out))


class PositionEmbedding(nn.Module):
    def __init__(self, C: int) -> None:
        super().__init__()
        self.C = C
        self.mlp = _mlp(C, C, C)
        self.norm = nn.LayerNorm(C, elementwise_affine=False)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.norm(self.mlp(sinusoidal_pe(torch.sigmoid(v), self.C)))


class LogitEmbedding(nn.Module):
    """Embedding of the vertex confidence. Deliberately has no layer norm."""

    def __init__(self, C: int) -> None:
        super().__init__()
        self.C = C
        self.mlp = _mlp(C, C, C)

    def forward(self, cls: torch.Tensor) -> torch.Tensor:
        return self.mlp(sinusoidal_pe(torch.sigmoid(cls)[..., None], self.C))


class AdaLNFusion(nn.Module):
    """``q = (e + p) * (gamma + 1) + beta`` with scale and shift regressed from ``l``.

    The regression layer starts at zero, so a fresh module returns ``e + p``.
    """

    def __init__(self, C: int) -> None:
        super().__init__()
        self.proj = nn.Linear(C, 2 * C)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, e: torch.Tensor, p: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.proj(l).chunk(2, dim=-1)
        return (e + p) * (gamma + 1) + beta


def fuse_add(e: torch.Tensor, p: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
    return e + p + l


class SelfAttention(nn.Module):
    """Multi-head attention among the queries of one polygon, then residual and LN.

    Input is (G, M, C); attention runs over M independently for each G.
    """

    def __init__(self, C: int, heads: int) -> None:
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(C, 3 * C)
        self.out = nn.Linear(C, C)
        self.norm = nn.LayerNorm(C)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        G, M, C = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(G, M, 3, h, C // h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(C // h)
        attn = torch.softmax(scores, dim=-1)  # (G, h, M, M)
        y = (attn @ v).transpose(1, 2).reshape(G, M, C)
        y = self.norm(x + self.out(y))
        return (y, attn) if return_weights else y


class DeformableCrossAttention(nn.Module):
    """Each query reads K bilinear samples per head from its own RoI.

    Sample locations are ``ref + offset`` in RoI-normalized coordinates,
    converted to RoI pixels as ``(x * W_r, y * H_r)`` and clamped at the border.
    """

    def __init__(self, C: int, heads: int, K: int) -> None:
        super().__init__()
        self.C, self.heads, self.K = C, heads, K
        self.offsets = nn.Linear(C, heads * K * 2)
        self.weights = nn.Linear(C, heads * K)
        self.value = nn.Linear(C, C)
        self.out = nn.Linear(C, C)
        self.norm = nn.LayerNorm(C)
        self._reset()

    def _reset(self) -> None:
        nn.init.zeros_(self.offsets.weight)
        theta = torch.arange(self.heads, dtype=torch.float32) * (2 * math.pi / self.heads)
        grid = torch.stack([theta.cos(), theta.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True).values
        grid = grid[:, None, :] * (torch.arange(self.K, dtype=torch.float32) + 1)[None, :, None]
        with torch.no_grad():
            self.offsets.bias.copy_((0.05 * grid).flatten())
        nn.init.zeros_(self.weights.weight)
        nn.init.zeros_(self.weights.bias)

    def sample(self, q: torch.Tensor, ref: torch.Tensor, roi: torch.Tensor):
        """Head outputs before the output projection.

        q (G, M, C), ref (G, M, 2) in [0, 1], roi (G, C, H_r, W_r).
        Returns the (G, M, C) weighted samples, the (G, M, heads, K) weights and
        the (G, M, heads, K, 2) sample locations.
        """
        G, M, C = q.shape
        h, K = self.heads, self.K
        Hr, Wr = roi.shape[-2:]
        val = self.value(roi.flatten(2).transpose(1, 2))  # (G, Hr*Wr, C)
        val = val.transpose(1, 2).reshape(G * h, C // h, Hr, Wr)
        off = self.offsets(q).reshape(G, M, h, K, 2)
        a = torch.softmax(self.weights(q).reshape(G, M, h, K), dim=-1)
        loc = ref[:, :, None, None, :] + off
        x = (loc[..., 0] * Wr).permute(0, 2, 1, 3).reshape(G * h, M * K)
        y = (loc[..., 1] * Hr).permute(0, 2, 1, 3).reshape(G * h, M * K)
        bidx = torch.arange(G * h, device=q.device)
        s = bilinear_sample(val, bidx, x, y)  # (G*h, C/h, M*K)
        s = s.reshape(G, h, C // h, M, K).permute(0, 3, 1, 4, 2)  # (G, M, h, K, C/h)
        heads_out = (a[..., None] * s).sum(dim=3).reshape(G, M, C)
        return heads_out, a, loc

    def forward(self, q: torch.Tensor, ref: torch.Tensor, roi: torch.Tensor) -> torch.Tensor:
        heads_out, _, _ = self.sample(q, ref, roi)
        return self.norm(q + self.out(heads_out))


class FeedForward(nn.Module):
    def __init__(self, C: int, expansion: int = 4) -> None:
        super().__init__()
        self.mlp = _mlp(C, expansion * C, C)
        self.norm = nn.LayerNorm(C)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x + self.mlp(x))


class RoIEncoderLayer(nn.Module):
    """Optional self-attention over the H_r * W_r cells of each RoI."""

    def __init__(self, C: int, heads: int) -> None:
        super().__init__()
        self.attn = SelfAttention(C, heads)
        self.ffn = FeedForward(C)

    def forward(self, roi: torch.Tensor) -> torch.Tensor:
        G, C, Hr, Wr = roi.shape
        ys, xs = torch.meshgrid(
            (torch.arange(Hr, dtype=roi.dtype) + 0.5) / Hr, (torch.arange(Wr, dtype=roi.dtype) + 0.5) / Wr, indexing="ij"
        )
        pos = sinusoidal_pe(torch.stack([xs, ys], -1).reshape(1, Hr * Wr, 2), C)
        tokens = roi.flatten(2).transpose(1, 2)
        tokens = self.ffn(self.attn(tokens + pos))
        return tokens.transpose(1, 2).reshape(G, C, Hr, Wr)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: DecoderConfig) -> None:
        super().__init__()
        C = cfg.C
        self.fusion = AdaLNFusion(C) if cfg.fusion == "adaln" else None
        self.self_attn = SelfAttention(C, cfg.heads)
        self.cross_attn = DeformableCrossAttention(C, cfg.heads, cfg.K)
        self.ffn = FeedForward(C)
        self.coords = _mlp(C, C, 2)
        nn.init.zeros_(self.coords[-1].weight)
        nn.init.zeros_(self.coords[-1].bias)
        self.logit = nn.Linear(C, 1)
        nn.init.zeros_(self.logit.weight)
        nn.init.zeros_(self.logit.bias)

    def fuse(self, e, p, l):
        return self.fusion(e, p, l) if self.fusion is not None else fuse_add(e, p, l)

    def refine_vertex(self, v: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        return v + self.coords(q)

    def refine_logit(self, cls: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        return cls + self.logit(q)[..., 0]


@dataclass
class DecoderOutput:
    """Per-layer decoder states; ``coords[i]`` are pre-sigmoid (G, M, 2), ``logits[i]`` (G, M)."""

    coords: list[torch.Tensor] = field(default_factory=list)
    logits: list[torch.Tensor] = field(default_factory=list)
    content: list[torch.Tensor] = field(default_factory=list)
    boxes: Optional[torch.Tensor] = None

    def roi_xy(self, layer: int = -1) -> torch.Tensor:
        return torch.sigmoid(self.coords[layer])

    def image_xy(self, layer: int = -1) -> torch.Tensor:
        """RoI-normalized coordinates mapped through each polygon's box, (G, M, 2)."""
        xy = self.roi_xy(layer)
        b = self.boxes
        lo = b[:, None, :2]
        size = (b[:, 2:] - b[:, :2])[:, None, :]
        return lo + xy * size

    def scores(self, layer: int = -1) -> torch.Tensor:
        return torch.sigmoid(self.logits[layer])


class RoIPolyDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig) -> None:
        super().__init__()
        self.cfg = cfg
        C, M = cfg.C, cfg.M
        self.query_content = nn.Parameter(torch.randn(M, C))
        self.query_coords = nn.Parameter(torch.randn(M, 2))
        self.query_logits = nn.Parameter(torch.randn(M))
        self.pos_embed = PositionEmbedding(C)
        self.logit_embed = LogitEmbedding(C)
        self.box_embed = nn.Linear(4, C) if cfg.box_embed else None
        self.encoder = nn.ModuleList([RoIEncoderLayer(C, cfg.heads) for _ in range(cfg.encoder_layers)])
        self.layers = nn.ModuleList([DecoderLayer(cfg) for _ in range(cfg.L)])

    def initial_state(self, G: int):
        M = self.cfg.M
        return (
            self.query_content[None].expand(G, M, -1),
            self.query_coords[None].expand(G, M, -1),
            self.query_logits[None].expand(G, M),
        )

    def forward(
        self,
        rois: torch.Tensor,
        boxes: torch.Tensor,
        image_size: tuple[float, float],
        init: Optional[tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = None,
    ) -> DecoderOutput:
        """rois (G, C, H_r, W_r); boxes (G, 4) image frame; image_size (W, H)."""
        cfg = self.cfg
        if rois.dim() != 4 or rois.shape[1:] != (cfg.C, cfg.H_r, cfg.W_r):
            raise DecoderError(f"RoI features must be (G, {cfg.C}, {cfg.H_r}, {cfg.W_r}), got {tuple(rois.shape)}")
        if boxes.shape != (rois.shape[0], 4):
            raise DecoderError("need one box per RoI")
        G = rois.shape[0]
        e, v, cls = init if init is not None else self.initial_state(G)
        if self.box_embed is not None:
            W, H = image_size
            norm = torch.tensor([W, H, W, H], dtype=boxes.dtype, device=boxes.device)
            b = boxes / norm
            geom = torch.stack([(b[:, 0] + b[:, 2]) / 2, (b[:, 1] + b[:, 3]) / 2, b[:, 2] - b[:, 0], b[:, 3] - b[:, 1]], -1)
            e = e + self.box_embed(geom)[:, None, :]
        for enc in self.encoder:
            rois = enc(rois)
        out = DecoderOutput(boxes=boxes)
        for layer in self.layers:
            p = self.pos_embed(v)
            l = self.logit_embed(cls)
            q = layer.fuse(e, p, l)
            q = layer.self_attn(q)
            q = layer.cross_attn(q, torch.sigmoid(v), rois)
            q = layer.ffn(q)
            v = layer.refine_vertex(v, q)
            cls = layer.refine_logit(cls, q)
            e = q
            out.coords.append(v)
            out.logits.append(cls)
            out.content.append(e)
        return out


def padded_pixel_count(width: int, height: int, levels=(2, 3, 4, 5), divisor: int = 32) -> int:
    """Pixels over all pyramid levels after padding the image to a multiple of ``divisor``."""
    pw = -(-width // divisor) * divisor
    ph = -(-height // divisor) * divisor
    return sum((pw >> l) * (ph >> l) for l in levels)


def attention_cost_estimate(
    cfg: DecoderConfig,
    image_dims: tuple[int, int],
    n_e: Optional[int] = None,
) -> dict:
    """Multiply counts (constant factor 1) of global vs. RoI-confined attention.

    ``N_q`` is the number of vertex queries per polygon (``cfg.M``).
    """
    C, K, N, Nq = cfg.C, cfg.K, cfg.N, cfg.M
    if n_e is None:
        n_e = padded_pixel_count(*image_dims)
    roi_tokens = N * cfg.H_r * cfg.W_r
    return {
        "global": {
            "encoder_tokens": n_e,
            "encoder_ops": 2 * n_e * C**2 + n_e * K * C**2,
            "decoder_ops": Nq**2 * N**2 * C**2,
        },
        "roi": {
            "encoder_tokens": roi_tokens,
            "encoder_ops": 2 * roi_tokens * C**2 + roi_tokens * K * C**2,
            "decoder_ops": Nq**2 * N * C**2,
        },
        "encoder_ratio": (2 * n_e * C**2 + n_e * K * C**2) / (2 * roi_tokens * C**2 + roi_tokens * K * C**2),
        "decoder_ratio": (Nq**2 * N**2 * C**2) // (Nq**2 * N * C**2),
    }
