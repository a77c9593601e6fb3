"""Run configuration: an INI file with sections, plus ``section.key=value`` overrides.

Sections are ``[train]``, ``[momentum]``, ``[loss]``, ``[data]`` and
``[output]``. Keys match the dataclass field names, except that the loss
weight ``lambda_`` is spelled ``lambda`` in files. Unknown sections or keys
are rejected.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossConfig
from .memory import MomentumConfig
from .pipeline import TrainConfig

OUTPUT_ROOT_ENV = "TCRL_OUTPUT_ROOT"
DATA_SOURCES = ("synthetic", "folder")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
_KEY_ALIASES = {"lambda": "lambda_"}


class ConfigError(ValueError):
    """Raised with every problem found, one per line."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("\n".join(self.problems))


@dataclass
class DataConfig:
    source: str = "synthetic"
    path: str = ""  # dataset root with train/, query/, gallery/ when source = folder
    ids: int = 20
    per_id: int = 20
    height: int = 32
    width: int = 32
    seed: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.source not in DATA_SOURCES:
            out.append(f"data.source must be one of {list(DATA_SOURCES)}")
        if self.source == "folder" and not self.path:
            out.append("data.path is required when data.source = folder")
        if self.ids < 2 or self.per_id < 2:
            out.append("data.ids and data.per_id must be >= 2")
        if self.height < 8 or self.width < 8:
            out.append("data.height and data.width must be >= 8")
        return out


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs"

    def output_path(self) -> Path:
        """Output directory; a relative path is resolved against $TCRL_OUTPUT_ROOT when set."""
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            return Path(root) / out
        return out


def _sections(cfg: RunConfig) -> dict[str, tuple[object, list[str]]]:
    skip = {"momentum", "loss"}
    return {
        "train": (cfg.train, [f.name for f in fields(TrainConfig) if f.name not in skip]),
        "momentum": (cfg.train.momentum, [f.name for f in fields(MomentumConfig)]),
        "loss": (cfg.train.loss, [f.name for f in fields(LossConfig)]),
        "data": (cfg.data, [f.name for f in fields(DataConfig)]),
    }


def _file_key(name: str) -> str:
    for alias, attr in _KEY_ALIASES.items():
        if attr == name:
            return alias
    return name


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def defaults() -> dict[str, dict[str, object]]:
    """Default values as ``{section: {file_key: value}}``."""
    out = {}
    for sec, (obj, names) in _sections(RunConfig()).items():
        out[sec] = {_file_key(n): getattr(obj, n) for n in names}
    out["output"] = {"dir": RunConfig().output_dir}
    return out


def parse_override(token: str) -> tuple[str, str, str]:
    """Split ``section.key=value`` (a leading ``--`` is allowed)."""
    body = token[2:] if token.startswith("--") else token
    if "=" not in body or "." not in body.split("=", 1)[0]:
        raise ConfigError([f"override {token!r} is not of the form section.key=value"])
    lhs, value = body.split("=", 1)
    section, key = lhs.split(".", 1)
    return section.strip(), key.strip(), value


def build(values: dict[str, dict[str, str]]) -> RunConfig:
    """Build a RunConfig from raw string values, reporting every problem at once."""
    base = defaults()
    problems = []
    typed: dict[str, dict[str, object]] = {sec: dict(keys) for sec, keys in base.items()}
    for sec, keys in values.items():
        if sec not in base:
            problems.append(f"unknown section [{sec}]")
            continue
        for key, raw in keys.items():
            if key not in base[sec]:
                problems.append(f"unknown key {sec}.{key}")
                continue
            try:
                typed[sec][key] = _coerce(raw, base[sec][key])
            except ValueError as exc:
                problems.append(f"{sec}.{key}: {exc}")

    def attrs(sec):
        return {_KEY_ALIASES.get(k, k): v for k, v in typed[sec].items()}

    data = DataConfig(**attrs("data"))
    problems.extend(data.problems())
    parts = {}
    for sec, cls in (("momentum", MomentumConfig), ("loss", LossConfig)):
        try:
            parts[sec] = cls(**attrs(sec))
        except ValueError as exc:
            problems.append(f"{sec}: {exc}")
            parts[sec] = cls()
    try:
        train = TrainConfig(**attrs("train"), **parts)
    except ValueError as exc:
        problems.extend(f"train: {p}" for p in str(exc).split("; "))
    if problems:
        raise ConfigError(problems)
    return RunConfig(train, data, str(typed["output"]["dir"]))


def _read_ini(text: str, origin: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError([f"{origin}: {exc}"]) from None
    return {sec: dict(parser.items(sec)) for sec in parser.sections()}


def load(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Read an INI file (optional) and apply ``section.key=value`` overrides on top."""
    values: dict[str, dict[str, str]] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError([f"cannot read config {p}: {exc}"]) from None
        values = _read_ini(text, str(p))
    problems = []
    for token in overrides or []:
        try:
            sec, key, value = parse_override(token)
        except ConfigError as exc:
            problems.extend(exc.problems)
            continue
        values.setdefault(sec, {})[key] = value
    try:
        run = build(values)
    except ConfigError as exc:
        problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return run


def loads(text: str) -> RunConfig:
    return build(_read_ini(text, "<string>"))


def dumps(cfg: RunConfig) -> str:
    """Serialize every field; `loads` of the result gives back an equal config."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for sec, (obj, names) in _sections(cfg).items():
        parser[sec] = {_file_key(n): _format(getattr(obj, n)) for n in names}
    parser["output"] = {"dir": cfg.output_dir}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
