"""Toolchain configuration: defaults, file loading, hashing, provenance.

One frozen Config carries every knob the command-line tools accept.
Values load from a JSON file (unknown keys rejected so typos fail
loudly), then individual flags override single fields. Reports embed a
sha256 over the effective config's canonical JSON plus sha256s of the
input files, which makes any result traceable to exactly what produced
it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Mapping, Sequence

from . import __version__
from .driving_eval import ORA_GATING_MODES
from .interactor import REDUCTIONS

__all__ = [
    "AP_INTERPOLATIONS",
    "L2_MODES",
    "Config",
    "ConfigError",
    "config_hash",
    "load_config",
    "provenance_block",
    "sha256_file",
]

L2_MODES = ("at_horizon", "up_to_horizon")
AP_INTERPOLATIONS = ("all_point", "eleven_point")


class ConfigError(ValueError):
    """A config file or override is malformed or out of range."""


@dataclass(frozen=True)
class Config:
    """Every tool knob with its documented default."""

    # token selection
    k_img: int = 90
    k_bev: int = 300
    reduction: str = "max"
    # refinement
    short_answer_threshold: int = 5
    # evaluation
    iou_thresholds: tuple[float, ...] = (0.5,)
    ap_interpolation: str = "all_point"
    l2_mode: str = "at_horizon"
    ora_gating: str = "correct_exist"
    metric_scale_100: bool = True
    ego_length: float = 4.084
    ego_width: float = 1.85
    # chat client
    endpoint: str = ""
    step1_model: str = "gpt-4o"
    step2_model: str = "gpt-4o-mini"
    temperature: float = 0.0
    timeout: float = 60.0
    retries: int = 2
    max_in_flight: int = 2
    # randomness
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k_img < 1 or self.k_bev < 1:
            raise ConfigError("k_img and k_bev must be at least 1")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}")
        if self.short_answer_threshold < 0:
            raise ConfigError("short_answer_threshold must be nonnegative")
        thresholds = tuple(float(t) for t in self.iou_thresholds)
        if not thresholds:
            raise ConfigError("iou_thresholds must be non-empty")
        if any(not 0.0 < t <= 1.0 for t in thresholds):
            raise ConfigError("iou thresholds must lie in (0, 1]")
        object.__setattr__(self, "iou_thresholds", thresholds)
        if self.ap_interpolation not in AP_INTERPOLATIONS:
            raise ConfigError(
                f"ap_interpolation must be one of {AP_INTERPOLATIONS}")
        if self.l2_mode not in L2_MODES:
            raise ConfigError(f"l2_mode must be one of {L2_MODES}")
        if self.ora_gating not in ORA_GATING_MODES:
            raise ConfigError(f"ora_gating must be one of {ORA_GATING_MODES}")
        if self.ego_length <= 0 or self.ego_width <= 0:
            raise ConfigError("ego dimensions must be positive")
        if self.timeout <= 0:
            raise ConfigError("timeout must be positive")
        if self.retries < 0:
            raise ConfigError("retries must be nonnegative")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["iou_thresholds"] = list(self.iou_thresholds)
        return d

    def override(self, **updates) -> "Config":
        """Replace the given fields; None values mean 'keep the default'."""
        live = {k: v for k, v in updates.items() if v is not None}
        unknown = sorted(set(live) - {f.name for f in fields(self)})
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        try:
            return replace(self, **live)
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err


def load_config(path: str | Path | None, **overrides) -> Config:
    """Config from an optional JSON file plus flag overrides.

    File values apply first, flags second. Unknown keys in either place
    raise ConfigError rather than being silently dropped.
    """
    data: dict = {}
    if path is not None:
        try:
            raw = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read config file: {err}") from err
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(Config)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    if "iou_thresholds" in data:
        data["iou_thresholds"] = tuple(data["iou_thresholds"])
    try:
        cfg = Config(**data)
    except TypeError as err:
        raise ConfigError(str(err)) from err
    return cfg.override(**overrides)


def _canonical_json(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: Config) -> str:
    """sha256 over the canonical JSON of the effective config."""
    return hashlib.sha256(_canonical_json(cfg.to_dict()).encode()).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def provenance_block(
    cfg: Config, inputs: Mapping[str, str | Path] | Sequence[str | Path] = (),
) -> dict:
    """The provenance dict every report embeds.

    ``inputs`` maps labels to paths (or is a plain path list); each is
    hashed so a report can be traced to its exact inputs.
    """
    if isinstance(inputs, Mapping):
        items = inputs.items()
    else:
        items = ((str(p), p) for p in inputs)
    return {
        "tool_version": __version__,
        "config_hash": config_hash(cfg),
        "inputs": {str(label): sha256_file(p) for label, p in items},
        "effective_config": cfg.to_dict(),
    }
