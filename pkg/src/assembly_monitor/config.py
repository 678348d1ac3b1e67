"""Tunable parameters and their INI-file loader.

Example file::

    [monitor]
    sigma = 0.5
    stay_prob = 0.8
    radius = 0.01

    [simulate]
    dropout = 0.2
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .fusion import DEFAULT_ALPHA_DOWN, DEFAULT_ALPHA_UP, DEFAULT_IOU_THRESH, DEFAULT_RADIUS
from .ingest import DEFAULT_SYNC_WINDOW_US, sync_window_from_env
from .planner import DEFAULT_STAY_PROB
from .reasoner import (DEFAULT_DEVIATION_THRESHOLD, DEFAULT_DEVIATION_WINDOW, DEFAULT_SIGMA,
                       DEFAULT_TRELLIS_WINDOW)
from .simulator import DEFAULT_STEP_FRAMES, DEFAULT_STEP_JITTER


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MonitorConfig:
    sigma: float = DEFAULT_SIGMA
    norm: str = "l2"
    stay_prob: float = DEFAULT_STAY_PROB
    radius: float = DEFAULT_RADIUS
    iou_thresh: float = DEFAULT_IOU_THRESH
    alpha_up: float = DEFAULT_ALPHA_UP
    alpha_down: float = DEFAULT_ALPHA_DOWN
    smoothing: bool = True
    sync_window_us: int = DEFAULT_SYNC_WINDOW_US
    deviation_threshold: float = DEFAULT_DEVIATION_THRESHOLD
    deviation_window: int = DEFAULT_DEVIATION_WINDOW
    trellis_window: int = DEFAULT_TRELLIS_WINDOW
    uniform_prior: bool = False

    def validate(self) -> list[str]:
        errs = []
        if self.sigma <= 0:
            errs.append("sigma must be positive")
        if self.norm not in ("l1", "l2"):
            errs.append("norm must be 'l1' or 'l2'")
        if not 0 < self.stay_prob < 1:
            errs.append("stay_prob must lie in (0, 1)")
        if self.radius <= 0:
            errs.append("radius must be positive")
        if not 0 < self.iou_thresh <= 1:
            errs.append("iou_thresh must lie in (0, 1]")
        if not 0 <= self.alpha_down <= self.alpha_up <= 1:
            errs.append("need 0 <= alpha_down <= alpha_up <= 1")
        if self.sync_window_us <= 0:
            errs.append("sync_window_us must be positive")
        if not 0 < self.deviation_threshold < 1:
            errs.append("deviation_threshold must lie in (0, 1)")
        if self.deviation_window < 1:
            errs.append("deviation_window must be >= 1")
        if self.trellis_window < 2:
            errs.append("trellis_window must be >= 2")
        return errs


@dataclass(frozen=True)
class SimulationConfig:
    seed: int = 0
    dropout: float = 0.0
    confidence_jitter: float = 0.0
    position_jitter: float = 0.0
    confusion: float = 0.0  # mass moved onto each element's look-alike twin
    step_frames: int = DEFAULT_STEP_FRAMES
    step_jitter: int = DEFAULT_STEP_JITTER
    frames: int = 0  # 0 = sum of sampled step durations

    def validate(self) -> list[str]:
        errs = []
        if not 0 <= self.dropout <= 1:
            errs.append("dropout must lie in [0, 1]")
        if not 0 <= self.confusion <= 1:
            errs.append("confusion must lie in [0, 1]")
        if self.confidence_jitter < 0 or self.position_jitter < 0:
            errs.append("jitter must be non-negative")
        if self.step_frames < 1 or not 0 <= self.step_jitter < self.step_frames:
            errs.append("need step_frames >= 1 and 0 <= step_jitter < step_frames")
        if self.frames < 0:
            errs.append("frames must be non-negative")
        return errs


_KINDS = {"float": float, "int": int, "bool": bool, "str": str}


def _coerce(kind, raw: str):
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw.strip())


def _read_section(path: Path, section: str, cls) -> dict:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    unknown = set(parser.sections()) - {"monitor", "simulate"}
    errs = [f"unknown section [{s}]" for s in sorted(unknown)]
    kinds = {f.name: _KINDS[f.type] for f in fields(cls)}
    updates = {}
    if parser.has_section(section):
        for key, raw in parser.items(section):
            if key not in kinds:
                errs.append(f"[{section}] unknown key {key!r}")
                continue
            try:
                updates[key] = _coerce(kinds[key], raw)
            except ValueError as e:
                errs.append(f"[{section}] {key}: {e}")
    if errs:
        raise ConfigError(f"{path}: " + "; ".join(errs))
    return updates


def load_config(path: str | Path | None = None, env: bool = True) -> MonitorConfig:
    """Defaults, overridden by the ``[monitor]`` section of ``path``, then by the environment."""
    cfg = MonitorConfig()
    if path is not None:
        cfg = replace(cfg, **_read_section(Path(path), "monitor", MonitorConfig))
    if env:
        try:
            cfg = replace(cfg, sync_window_us=sync_window_from_env(cfg.sync_window_us))
        except ValueError as e:
            raise ConfigError(f"bad sync window override: {e}") from None
    errs = cfg.validate()
    if errs:
        raise ConfigError("; ".join(errs))
    return cfg


def load_simulation_config(path: str | Path | None = None, **overrides) -> SimulationConfig:
    """``[simulate]`` section of ``path``; keyword overrides that are not None win."""
    cfg = SimulationConfig()
    if path is not None:
        cfg = replace(cfg, **_read_section(Path(path), "simulate", SimulationConfig))
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    errs = cfg.validate()
    if errs:
        raise ConfigError("; ".join(errs))
    return cfg
