"""Run configuration: every tunable in one flat, TOML-compatible record."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import tomli

from .decoder import DecoderConfig

__all__ = ["RunConfig", "ConfigError", "PRESETS", "SIZE_SPLIT_AREA", "load_config", "save_config"]

# Buildings below this area (px^2) go to the small/medium preset.
SIZE_SPLIT_AREA = 96.0**2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    # decoder
    M: int = 12
    N: int = 8
    L: int = 3
    C: int = 32
    heads: int = 4
    K: int = 4
    H_r: int = 7
    W_r: int = 7
    fusion: str = "adaln"
    box_embed: bool = True
    encoder_layers: int = 0
    # pyramid
    in_channels: int = 2
    l_c: int = 4
    S_c: float = 224.0
    all_level_roi: bool = False
    # encoding
    spacing: float = 0.5
    match_mode: str = "index"
    cyclic_index: bool = False
    # losses
    lambda_cor: float = 5.0
    lambda_cls: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    aux_loss: bool = True
    # training
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 8
    seed: int = 0
    box_jitter: float = 0.0
    grid: int = 64
    # inference / evaluation
    tau: float = 0.5
    match_iou: float = 0.5
    boundary_ratio: float = 0.02
    floor_iou: float = 0.5
    corner_dist: float = 10.0
    angle_tol: float = 5.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        positive = ("in_channels", "M", "N", "L", "C", "heads", "K", "H_r", "W_r", "spacing", "S_c", "batch_size", "grid")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.match_mode not in ("index", "euclidean"):
            raise ConfigError("match_mode must be 'index' or 'euclidean'")
        if not 0 < self.tau < 1:
            raise ConfigError("tau must be in (0, 1)")
        if not 0 <= self.focal_alpha <= 1 or self.focal_gamma < 0:
            raise ConfigError("focal_alpha must be in [0, 1] and focal_gamma >= 0")
        if self.lr < 0 or self.epochs < 0 or self.encoder_layers < 0:
            raise ConfigError("lr, epochs and encoder_layers must be non-negative")
        if not 0 <= self.box_jitter < 0.5:
            raise ConfigError("box_jitter must be in [0, 0.5)")
        if self.grid < 64:
            raise ConfigError("grid must be >= 64")
        if self.lambda_cor < 0 or self.lambda_cls < 0:
            raise ConfigError("loss weights must be non-negative")
        try:
            self.decoder()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def decoder(self) -> DecoderConfig:
        return DecoderConfig(
            M=self.M, N=self.N, L=self.L, C=self.C, heads=self.heads, K=self.K,
            H_r=self.H_r, W_r=self.W_r, fusion=self.fusion, box_embed=self.box_embed,
            encoder_layers=self.encoder_layers,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        base = cls.preset_config(data.get("preset", "desk"))
        coerced = {}
        for key, value in data.items():
            want = type(getattr(base, key))
            if want is bool and not isinstance(value, bool):
                raise ConfigError(f"{key} must be a boolean")
            if want is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if want is int and not (isinstance(value, int) and not isinstance(value, bool)):
                raise ConfigError(f"{key} must be an integer")
            if not isinstance(value, want):
                raise ConfigError(f"{key} must be {want.__name__}")
            coerced[key] = value
        return replace(base, **coerced)

    @staticmethod
    def preset_config(name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
        return RunConfig(**{"preset": name, **PRESETS[name]})


PRESETS: dict[str, dict] = {
    "desk": {},
    # full-scale settings for buildings below / above SIZE_SPLIT_AREA
    "small_medium": {"M": 30, "N": 34, "L": 6, "C": 256, "heads": 8, "K": 4, "grid": 300},
    "large": {"M": 96, "N": 10, "L": 6, "C": 256, "heads": 8, "K": 4, "grid": 300},
}


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        r = repr(v)
        return r if ("." in r or "e" in r or "inf" in r or "nan" in r) else r + ".0"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    raise ConfigError(f"cannot serialize {v!r}")


def save_config(cfg: RunConfig, path: str | Path) -> None:
    lines = [f"{k} = {_toml_value(v)}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_config(path: str | Path) -> RunConfig:
    try:
        data = tomli.loads(Path(path).read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    nested = [k for k, v in data.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found tables {nested}")
    return RunConfig.from_dict(data)
