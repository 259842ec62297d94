"""Layered run configuration: command-line flags over a JSON file over defaults."""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Mapping

from .codebook import DEFAULT_K, DEFAULT_RESTARTS, DEFAULT_SEED
from .dpi import DEFAULT_MATCH_DOMAINS
from .errors import InvalidSpec
from .features import FeatureConfig
from .pipeline import PipelineConfig

DEFAULTS: dict = {
    "features": FeatureConfig().to_dict(),
    "flow": {"idle_timeout_s": 60.0},
    "dpi": {"match_domains": list(DEFAULT_MATCH_DOMAINS), "anchored": False},
    "classifier": {"bypass_quantization": False},
    "train": {"k": DEFAULT_K, "seed": DEFAULT_SEED, "restarts": DEFAULT_RESTARTS},
    "buffer": {"segment_duration_s": 4.0, "session_window_s": 60.0},
    "stream": {"resolution_s": 0.001},
}


def _merge(base: dict, over: Mapping, path: str = "") -> None:
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise InvalidSpec(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, Mapping):
                raise InvalidSpec(f"config key {where!r} must be a table")
            _merge(base[key], val, where + ".")
        else:
            base[key] = val


def load_config(path: str | Path | None = None,
                overrides: Mapping[str, Any] | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then dotted-key ``overrides``.

    Override values of ``None`` mean "flag not given" and are skipped.
    """
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise InvalidSpec(f"{path}: top level must be an object")
        _merge(cfg, data)
    for dotted, val in (overrides or {}).items():
        if val is None:
            continue
        section, _, key = dotted.partition(".")
        _merge(cfg, {section: {key: val}})
    return cfg


def feature_config(cfg: dict) -> FeatureConfig:
    try:
        return FeatureConfig.from_dict(cfg["features"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidSpec(f"bad features config: {exc}") from exc


def pipeline_config(cfg: dict, features: FeatureConfig | None = None) -> PipelineConfig:
    return PipelineConfig(
        features=features or feature_config(cfg),
        match_domains=tuple(cfg["dpi"]["match_domains"]),
        anchored=bool(cfg["dpi"]["anchored"]),
        idle_timeout_s=float(cfg["flow"]["idle_timeout_s"]),
    )
