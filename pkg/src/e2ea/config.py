"""Run configuration: ``key=value`` lines with dotted section prefixes.

Example::

    seed=1
    encoder.variant=blstm
    encoder.subsample_layers=0,1
    train.lambda=0.5

Blank lines and ``#`` comments are ignored; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import functools
import typing
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .attdec import DecoderConfig, FusionConfig
from .decode import BeamConfig
from .encoder import EncoderConfig
from .model import ModelConfig
from .nn import ConfigurationError
from .train import MtlConfig, ToyTaskSpec


@dataclass
class DataConfig:
    n_train: int = 300
    n_dev: int = 50
    n_test: int = 50
    train_path: str = ""
    dev_path: str = ""
    test_path: str = ""


@dataclass
class LmConfig:
    hidden: int = 64
    epochs: int = 10


@dataclass
class AdaDeltaConfig:
    rho: float = 0.95
    eps: float = 1e-8


@dataclass
class DecodeSection:
    beam_width: int = 20
    lam: float = 0.5
    mode: str = "one-pass"
    max_len_ratio: float = 1.0
    max_len: Optional[int] = None
    nbest: Optional[int] = None


@dataclass
class RunConfig:
    seed: int = 1
    toy: ToyTaskSpec = field(default_factory=ToyTaskSpec)
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    train: MtlConfig = field(default_factory=MtlConfig)
    adadelta: AdaDeltaConfig = field(default_factory=AdaDeltaConfig)
    decode: DecodeSection = field(default_factory=DecodeSection)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.toy.vocab, self.toy.feat_dim, self.encoder, self.decoder)

    def mtl(self) -> MtlConfig:
        return dataclasses.replace(self.train, seed=self.seed)

    def beam(self) -> BeamConfig:
        d = self.decode
        return BeamConfig(d.beam_width, d.lam, d.mode, self.fusion, d.max_len_ratio, d.max_len, d.nbest)

    def hash(self) -> int:
        return zlib.crc32(dump_config(self).encode("utf-8"))


# field name -> key name where they differ
_ALIASES = {"lam": "lambda"}
# fields filled from elsewhere, never read from files
_SKIP = {("train", "seed")}
_SECTIONS = [f.name for f in dataclasses.fields(RunConfig) if f.name != "seed"]


@functools.lru_cache(maxsize=None)
def _resolved_types(cls):
    return typing.get_type_hints(cls)


def _parse_value(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    try:
        if origin is typing.Union and type(None) in args:
            if raw.lower() in ("", "none"):
                return None
            inner = next(a for a in args if a is not type(None))
            return _parse_value(raw, inner, key)
        if origin is tuple:
            inner = args[0]
            return tuple(_parse_value(p, inner, key) for p in raw.split(",") if p.strip())
        if tp is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
    except (ValueError, StopIteration):
        raise ConfigurationError(f"{key}: cannot parse {raw!r}") from None
    raise ConfigurationError(f"{key}: unsupported type {tp}")


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _section_keys(section: str):
    cls = _resolved_types(RunConfig)[section]
    types = _resolved_types(cls)
    for f in dataclasses.fields(cls):
        if (section, f.name) in _SKIP:
            continue
        yield f.name, _ALIASES.get(f.name, f.name), types[f.name]


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse config text on top of ``base`` (defaults when omitted)."""
    base = base or RunConfig()
    values = {s: dataclasses.asdict(getattr(base, s)) for s in _SECTIONS}
    for s in _SECTIONS:
        for name, value in list(values[s].items()):
            if isinstance(value, list):
                values[s][name] = tuple(value)
    seed = base.seed
    lookup = {}
    for s in _SECTIONS:
        for name, key, tp in _section_keys(s):
            lookup[f"{s}.{key}"] = (s, name, tp)
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key in seen:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key == "seed":
            seed = _parse_value(raw, int, key)
            continue
        if key not in lookup:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        s, name, tp = lookup[key]
        values[s][name] = _parse_value(raw, tp, key)
    types = _resolved_types(RunConfig)
    sections = {}
    for s in _SECTIONS:
        try:
            sections[s] = types[s](**values[s])
        except TypeError as exc:
            raise ConfigurationError(f"section {s}: {exc}") from None
    cfg = RunConfig(seed=seed, **sections)
    cfg.beam()  # validates the decode section
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = [f"seed={cfg.seed}"]
    for s in _SECTIONS:
        obj = getattr(cfg, s)
        for name, key, _ in _section_keys(s):
            lines.append(f"{s}.{key}={_format_value(getattr(obj, name))}")
    return "\n".join(lines) + "\n"


def preset_names() -> list:
    return sorted(p.name[:-5] for p in resources.files("e2ea.presets").iterdir() if p.name.endswith(".conf"))


def preset_text(name: str) -> str:
    return resources.files("e2ea.presets").joinpath(f"{name}.conf").read_text(encoding="utf-8")


def load_config(spec: str) -> RunConfig:
    """Load a config file, or a shipped preset by bare name (``toy``, ``csj``, ...)."""
    path = Path(spec)
    if path.is_file():
        return parse_config(path.read_text(encoding="utf-8"))
    if spec in preset_names():
        return parse_config(preset_text(spec))
    raise FileNotFoundError(f"no config file or preset named {spec!r}")
