"""Run configuration: an INI file with one section per stage."""

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from ..errors import ParseError, ValidationError


@dataclass
class ClusterConfig:
    k: int = 250
    gamma: float = 1.0
    sample: int = 200_000
    k_assign: int = 250
    metric: str = "euclidean"
    two_pass: bool = True
    min_mean_tissue: float = 0.3
    max_iters: int = 10
    # independent Leiden runs per clustering; each one costs a full run
    restarts: int = 1


@dataclass
class ComposeConfig:
    # "auto" derives delta from the training compositions of each fold
    delta: str = "auto"


@dataclass
class ModelConfig:
    ridge: float = 1.0
    alpha: float = 0.05
    max_iter: int = 100


@dataclass
class CvConfig:
    folds: int = 5
    seed: int = 0


@dataclass
class CharacterizeConfig:
    alpha: float = 0.01
    exclude_self: bool = False
    min_coverage: float = 0.5


@dataclass
class RunConfig:
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    compose: ComposeConfig = field(default_factory=ComposeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    cv: CvConfig = field(default_factory=CvConfig)
    characterize: CharacterizeConfig = field(default_factory=CharacterizeConfig)

    def to_dict(self):
        return asdict(self)

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    def delta_value(self):
        if self.compose.delta == "auto":
            return None
        try:
            value = float(self.compose.delta)
        except ValueError:
            raise ValidationError(f"compose.delta must be 'auto' or a number, got {self.compose.delta!r}")
        if not value > 0:
            raise ValidationError("compose.delta must be positive")
        return value


def _coerce(value, typ, where):
    try:
        if typ is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return typ(value)
    except ValueError:
        raise ValidationError(f"{where}: cannot read {value!r} as {typ.__name__}")


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ParseError(f"{source}: {exc}") from exc
    cfg = RunConfig()
    known = {f.name: f for f in fields(RunConfig)}
    for section in parser.sections():
        if section not in known:
            raise ValidationError(f"{source}: unknown section [{section}]")
        target = getattr(cfg, section)
        options = {f.name: f for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in options:
                raise ValidationError(f"{source}: unknown key {section}.{key}")
            typ = type(getattr(target, key))
            setattr(target, key, _coerce(raw, typ, f"{source} {section}.{key}"))
    return cfg


def load_config(path=None):
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read(), source=str(path))
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def format_config(cfg):
    """INI text for ``cfg``; ``parse_config(format_config(c)) == c``."""
    lines = []
    for name, section in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for key, value in section.items():
            lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
        lines.append("")
    return "\n".join(lines)
