"""
Run Configuration Module
Defaults from config/settings.json, overridden by key=value run files
"""

import dataclasses
import io
import json
import logging
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from dotenv import dotenv_values

from .autodiff import OptimizerState
from .errors import ConfigError
from .fusion import ModelConfig
from .losses import LossWeights

logger = logging.getLogger(__name__)

SETTINGS_PATH = Path(__file__).resolve().parent.parent / "config" / "settings.json"
SKIPPED_SECTIONS = ("application",)

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass(frozen=True)
class RunConfig:
    # data
    seed: int = 0
    image_size: int = 64
    scale_ratio: float = 1.0
    clutter: float = 0.0
    texture_freq: float = 4.0
    # model
    in_channels: int = 1
    channels: Tuple[int, int, int] = (16, 32, 64)
    embed_dim: int = 64
    decoder_channels: int = 32
    scale: int = 4
    # alignment
    patch: int = 3
    stride: int = 1
    pad: int = 1
    normalize_embeddings: bool = True
    match_temperature: float = 0.05
    # loss
    lambda1: float = 0.1
    lambda2: float = 0.05
    l1_weight: float = 1.0
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 500
    realign_every: int = 10
    log_every: int = 50
    # ablation
    use_sa: bool = True
    use_ma: bool = True
    use_chpf: bool = True
    use_ca: bool = False
    # paths
    output_dir: str = "runs/default"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            in_channels=self.in_channels,
            channels=self.channels,
            embed_dim=self.embed_dim,
            patch=self.patch,
            stride=self.stride,
            pad=self.pad,
            normalize_embeddings=self.normalize_embeddings,
            match_temperature=self.match_temperature,
            decoder_channels=self.decoder_channels,
            scale=self.scale,
            use_sa=self.use_sa,
            use_ma=self.use_ma,
            use_chpf=self.use_chpf,
            use_ca=self.use_ca,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.l1_weight)

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def as_dict(self) -> Dict[str, Any]:
        values = dataclasses.asdict(self)
        values["channels"] = ",".join(str(c) for c in self.channels)
        return values

    def replace(self, **changes) -> "RunConfig":
        return validate(dataclasses.replace(self, **changes))

    def echo(self, log: logging.Logger = logger):
        for key, value in self.as_dict().items():
            log.info(f"config {key} = {value}")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw: Any, line: Optional[int] = None) -> Any:
    if raw is None:
        raise ConfigError("missing value", key, line)
    kind = _FIELDS[key].type
    text = str(raw).strip()
    try:
        if key == "channels":
            parts = tuple(int(p) for p in text.replace(" ", "").split(","))
            if len(parts) != 3:
                raise ValueError("expected three comma-separated widths")
            return parts
        if kind is bool:
            if isinstance(raw, bool):
                return raw
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(f"not an integer: {raw}")
            return int(raw) if isinstance(raw, (int, float)) else int(text)
        if kind is float:
            return float(raw) if isinstance(raw, (int, float)) else float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"invalid value {text!r}: {e}", key, line)


def validate(cfg: RunConfig, lines: Optional[Dict[str, int]] = None) -> RunConfig:
    """Range checks; errors cite the key and, when known, its line"""
    lines = lines or {}

    def fail(key: str, message: str):
        raise ConfigError(message, key, lines.get(key))

    if cfg.scale not in (2, 4):
        fail("scale", f"scale must be 2 or 4, got {cfg.scale}")
    if cfg.image_size < 4 or cfg.image_size % 4:
        fail("image_size", f"image_size must be a positive multiple of 4, got {cfg.image_size}")
    if any(c < 1 for c in cfg.channels):
        fail("channels", f"channel widths must be >= 1, got {cfg.channels}")
    for key in ("in_channels", "embed_dim", "decoder_channels", "patch", "stride", "realign_every", "log_every"):
        if getattr(cfg, key) < 1:
            fail(key, f"{key} must be >= 1")
    if cfg.pad < 0:
        fail("pad", "pad must be >= 0")
    if cfg.steps < 0:
        fail("steps", "steps must be >= 0")
    for key in ("lambda1", "lambda2", "l1_weight", "clutter", "match_temperature"):
        if getattr(cfg, key) < 0:
            fail(key, f"{key} must be >= 0")
    if cfg.lr <= 0 or cfg.eps <= 0:
        fail("lr" if cfg.lr <= 0 else "eps", "lr and eps must be > 0")
    for key in ("beta1", "beta2"):
        if not 0.0 <= getattr(cfg, key) < 1.0:
            fail(key, f"{key} must lie in [0, 1)")
    if cfg.scale_ratio <= 0:
        fail("scale_ratio", "scale_ratio must be > 0")
    return cfg


def load_defaults(path: Optional[Path] = None) -> RunConfig:
    """Flatten the sections of settings.json into a RunConfig"""
    path = Path(path) if path else SETTINGS_PATH
    if not path.exists():
        logger.warning(f"Settings file not found: {path}. Using built-in defaults.")
        return RunConfig()
    try:
        settings = json.loads(_read_text(path, "settings file"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"settings file {path} is not valid JSON: {e}")

    values = {}
    for section, entries in settings.items():
        if section in SKIPPED_SECTIONS:
            continue
        for key, raw in entries.items():
            if key not in _FIELDS:
                raise ConfigError(f"unknown key in settings section '{section}'", key)
            values[key] = _convert(key, raw)
    return validate(RunConfig(**values))


def _key_lines(text: str) -> Dict[str, int]:
    lines = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("export "):
            stripped = stripped[len("export "):]
        lines[stripped.split("=", 1)[0].strip()] = number
    return lines


def parse_config(text: str, defaults: Optional[RunConfig] = None) -> RunConfig:
    """
    Parse key=value run configuration text

    Args:
        text: Config file content; '#' starts a comment
        defaults: Base values, settings.json when omitted

    Returns:
        Validated RunConfig

    Raises:
        ConfigError naming the offending key and 1-based line
    """
    base = defaults if defaults is not None else load_defaults()
    entries = dotenv_values(stream=io.StringIO(text), interpolate=False)
    lines = _key_lines(text)

    changes = {}
    for key, raw in entries.items():
        if key not in _FIELDS:
            raise ConfigError("unknown key", key, lines.get(key))
        changes[key] = _convert(key, raw, lines.get(key))
    return validate(dataclasses.replace(base, **changes), lines)


def _read_text(path: Path, what: str) -> str:
    """Read a UTF-8 config file; unreadable files become ConfigError"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read {what} {path}: {e}") from e


def load_config(path: Optional[Path] = None, defaults: Optional[RunConfig] = None) -> RunConfig:
    if path is None:
        return defaults if defaults is not None else load_defaults()
    return parse_config(_read_text(Path(path), "config file"), defaults)
