"""Run configuration in a flat ``key = value`` text format.

Lines look like ``optimizer.lr = 0.01``; ``#`` starts a comment. Values are
parsed as bool (true/false), int, float, or left as strings. Unknown keys are
an error; missing keys take defaults, each of which is logged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace

from ..block import BlockConfig
from ..network import ArchConfig, StageSpec
from .data import DataConfig
from .optim import OptimConfig

log = logging.getLogger(__name__)

DEFAULT_STAGES = "conv:16:1:1, conv:32:1:2, stra:32:1:1"
_BLOCK_KEYS = [n for n in BlockConfig.field_names() if n not in ("in_channels", "out_channels")]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    arch: ArchConfig
    optimizer: OptimConfig = OptimConfig()
    data: DataConfig = DataConfig()
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    lambda_d: float = 1.0
    eval_batch: int = 128

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer.lr <= 0:
            raise ConfigError("optimizer.lr must be > 0")
        if self.lambda_d < 0:
            raise ConfigError("lambda_d must be >= 0")


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "on", "yes"):
        return True
    if low in ("false", "off", "no"):
        return False
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def parse_text(text: str) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = parse_value(value)
    return out


def _take(flat: dict, prefix: str, names, defaults_from) -> dict:
    got = {}
    for name in names:
        key = f"{prefix}{name}"
        if key in flat:
            got[name] = flat.pop(key)
        elif defaults_from is not None:
            log.info("config: %s not set, default %r", key, getattr(defaults_from, name))
    return got


def from_dict(flat: dict[str, object]) -> RunConfig:
    flat = dict(flat)
    try:
        data = DataConfig(**_take(flat, "data.", [f.name for f in fields(DataConfig)], DataConfig()))
        optim = OptimConfig(**_take(flat, "optimizer.", [f.name for f in fields(OptimConfig)], OptimConfig()))
        block = _take(flat, "block.", _BLOCK_KEYS, None)
        stages_text = str(flat.pop("arch.stages", DEFAULT_STAGES))
        stages = tuple(StageSpec.parse(s) for s in stages_text.split(",") if s.strip())
        arch = ArchConfig(
            stages=stages,
            num_classes=int(flat.pop("arch.num_classes", data.num_classes)),
            in_channels=int(flat.pop("arch.in_channels", data.channels)),
            pool=int(flat.pop("arch.pool", 4)),
            block=block,
        )
        top = _take(flat, "", ["epochs", "batch_size", "seed", "lambda_d", "eval_batch"], RunConfig(arch))
        cfg = RunConfig(arch=arch, optimizer=optim, data=data, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if flat:
        raise ConfigError(f"unknown config keys: {sorted(flat)}")
    return cfg


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return from_dict(parse_text(fh.read()))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def to_text(cfg: RunConfig) -> str:
    """Serialise back to the flat format; ``from_dict(parse_text(to_text(c))) == c``."""
    lines = [f"{k} = {_fmt(getattr(cfg, k))}" for k in ("seed", "epochs", "batch_size", "lambda_d", "eval_batch")]
    lines += [f"optimizer.{f.name} = {_fmt(getattr(cfg.optimizer, f.name))}" for f in fields(OptimConfig)]
    lines += [f"data.{f.name} = {_fmt(getattr(cfg.data, f.name))}" for f in fields(DataConfig)]
    a = cfg.arch
    lines.append("arch.stages = " + ", ".join(str(s) for s in a.stages))
    lines += [f"arch.num_classes = {a.num_classes}", f"arch.in_channels = {a.in_channels}", f"arch.pool = {a.pool}"]
    lines += [f"block.{k} = {_fmt(v)}" for k, v in a.block.items()]
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
