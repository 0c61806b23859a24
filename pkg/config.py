# -*- coding: utf-8 -*-
import logging
import os
import typing
from typing import Dict, Optional

from dotenv import load_dotenv

from models.errors import ConfigError
from models.settings import AppConfig, DatasetConfig, HarnessConfig, NetworkConfig, TrainConfig, build_settings

load_dotenv()

logger = logging.getLogger(__name__)

# Get the absolute path of the directory where this file is located
BASE_DIR = os.path.abspath(os.path.dirname(__file__))

SECTIONS = {
    "net": NetworkConfig,
    "train": TrainConfig,
    "data": DatasetConfig,
    "harness": HarnessConfig,
}


class Config:
    # Where CLI commands write CSVs, checkpoints and datasets unless --out is given
    OUTPUT_DIR = os.environ.get('SPE_OUTPUT_DIR') or os.path.join(BASE_DIR, 'runs')

    LOG_LEVEL = os.environ.get('SPE_LOG_LEVEL', 'INFO').upper()

    # Process pool size for regime-matrix cells (harness.workers wins when set in a file)
    WORKERS = int(os.environ.get('SPE_WORKERS', '1'))

    DTYPE = os.environ.get('SPE_DTYPE', 'float32')


# --- key=value text ---
def _is_sequence(annotation) -> bool:
    origin = typing.get_origin(annotation)
    if origin in (list, tuple):
        return True
    return any(_is_sequence(arg) for arg in typing.get_args(annotation))


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_value(model_cls, key: str, raw: str):
    """Turn one text value into something the pydantic model can coerce."""
    raw = raw.strip()
    if raw.lower() == "none":
        return None
    if _is_sequence(model_cls.model_fields[key].annotation):
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw


def dump_section(section: str, settings) -> str:
    lines = [f"{section}.{key}={format_value(value)}" for key, value in settings.model_dump().items()]
    return "\n".join(lines)


def parse_lines(text: str, source: str = "<text>") -> Dict[str, Dict[str, str]]:
    """Split `ns.key=value` lines into {namespace: {key: raw value}}."""
    values: Dict[str, Dict[str, str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        namespace, _, name = key.strip().partition(".")
        if not name:
            raise ConfigError(f"{source}:{lineno}: key {key.strip()!r} has no namespace")
        values.setdefault(namespace, {})[name] = raw
    return values


def build_section(section: str, raw_values: Dict[str, str]):
    model_cls = SECTIONS[section]
    unknown = sorted(set(raw_values) - set(model_cls.model_fields))
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(section + '.' + k for k in unknown)}")
    values = {key: parse_value(model_cls, key, raw) for key, raw in raw_values.items()}
    return build_settings(model_cls, values)


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> AppConfig:
    """
    Read a key=value config file (if any), apply `section.key` overrides and validate
    """
    raw: Dict[str, Dict[str, str]] = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                raw = parse_lines(f.read(), source=path)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
    for key, value in (overrides or {}).items():
        namespace, _, name = key.partition(".")
        raw.setdefault(namespace, {})[name] = value

    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config namespace(s): {', '.join(unknown)}")
    raw.setdefault("net", {}).setdefault("dtype", Config.DTYPE)
    raw.setdefault("harness", {}).setdefault("workers", str(Config.WORKERS))
    sections = {name: build_section(name, raw.get(name, {})) for name in SECTIONS}
    logger.debug("Loaded config from %s", path or "defaults")
    return AppConfig(**sections)
