"""Experiment configuration and its flat ``section.key = value`` text form.

Every field has a default, so an empty file is a runnable config. The same
dotted keys are accepted as ``--set key=value`` overrides on the CLI.
Hyperparameter grids live under ``grid.<dotted key> = v1|v2|...`` (``|`` because
tuple values already use commas).
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from .data import ConfigurationError, FederationSpec
from .protocol import LocalTrainConfig, ServerConfig


@dataclass(frozen=True)
class ModelConfig:
    target_hidden: Tuple[int, ...] = (32,)
    descriptor_dim: int = 0  # 0: one quarter of the training clients
    phi_hidden: Tuple[int, ...] = (64,)
    pool_split: bool = True
    unit_sphere: bool = False
    psi_kind: str = "linear_head"
    hn_trunk: Tuple[int, ...] = (100, 100, 100)
    head_gain: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    method: str = "odpfl_hn"
    rounds: int = 500
    cohort_fraction: float = 0.1
    eval_every: int = 10
    patience: int = 50  # rounds without validation gain; 0 disables
    prox_mu: float = 0.01
    phase2_epochs: int = 200
    phase3_rounds: int = 0


@dataclass(frozen=True)
class EvalConfig:
    novel_split: str = "all"  # "all" or "holdout"
    corruption: str = "none"
    severity: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "results"
    federation: FederationSpec = field(default_factory=FederationSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    fl_local: LocalTrainConfig = field(default_factory=lambda: LocalTrainConfig(momentum=0.5))
    server: ServerConfig = field(default_factory=lambda: ServerConfig(lr_hn=0.1, lr_encoder=0.1))
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    grid: Tuple[Tuple[str, Tuple[str, ...]], ...] = ()

    def grid_dict(self) -> Dict[str, Tuple[str, ...]]:
        return dict(self.grid)


# ---------------------------------------------------------------------------
# scalar codecs


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse(text: str, tp, key: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    if origin is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() == "none":
            return None
        return _parse(text, args[0], key)
    if origin in (tuple, Tuple):
        inner = typing.get_args(tp)[0]
        return tuple(_parse(p, inner, key) for p in text.split(",") if p.strip())
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: {text!r}") from None
    return text


def _hints(cls) -> Dict[str, object]:
    return typing.get_type_hints(cls)


# ---------------------------------------------------------------------------
# flat form


def to_flat(cfg: ExperimentConfig) -> List[Tuple[str, str]]:
    """Ordered ``(key, value)`` pairs covering every field."""
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "grid":
            out += [(f"grid.{k}", "|".join(vals)) for k, vals in v]
        elif is_dataclass(v):
            out += [(f"{f.name}.{g.name}", _format(getattr(v, g.name))) for g in fields(v)]
        else:
            out.append((f.name, _format(v)))
    return out


def known_keys() -> List[str]:
    return [k for k, _ in to_flat(ExperimentConfig())]


def apply_overrides(cfg: ExperimentConfig, pairs: Union[Mapping[str, str], Sequence[Tuple[str, str]]]) -> ExperimentConfig:
    """Return ``cfg`` with dotted-key overrides applied in order."""
    items = list(pairs.items()) if isinstance(pairs, Mapping) else list(pairs)
    top = _hints(ExperimentConfig)
    sections: Dict[str, Dict[str, object]] = {}
    scalars: Dict[str, object] = {}
    grid = dict(cfg.grid)
    for key, text in items:
        key = key.strip()
        if key.startswith("grid."):
            sub = key[5:]
            if sub.startswith("grid.") or sub not in known_keys():
                raise ConfigurationError(f"grid over unknown key {sub!r}")
            grid[sub] = tuple(v.strip() for v in str(text).split("|") if v.strip())
            if not grid[sub]:
                raise ConfigurationError(f"empty grid for {sub}")
            continue
        head, _, tail = key.partition(".")
        if head not in top or head == "grid":
            raise ConfigurationError(f"unknown config key {key!r}")
        current = getattr(cfg, head)
        if is_dataclass(current):
            hints = _hints(type(current))
            if tail not in hints:
                raise ConfigurationError(f"unknown config key {key!r}")
            sections.setdefault(head, {})[tail] = _parse(str(text), hints[tail], key)
        else:
            if tail:
                raise ConfigurationError(f"unknown config key {key!r}")
            scalars[head] = _parse(str(text), top[head], key)
    changes: Dict[str, object] = dict(scalars)
    for head, vals in sections.items():
        try:
            changes[head] = replace(getattr(cfg, head), **vals)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid {head} settings: {exc}") from None
    changes["grid"] = tuple(sorted(grid.items()))
    return replace(cfg, **changes)


def parse_config_text(text: str) -> List[Tuple[str, str]]:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[Tuple[str, str]] = ()) -> ExperimentConfig:
    """Defaults, then the file (if any), then ``overrides``; later wins."""
    cfg = ExperimentConfig()
    if path is not None:
        pairs = [(k, v) for k, v in parse_config_text(Path(path).read_text()) if not k.startswith(("library.", "output."))]
        cfg = apply_overrides(cfg, pairs)
    return apply_overrides(cfg, overrides)


def config_text(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg))


def parse_assignment(text: str) -> Tuple[str, str]:
    if "=" not in text:
        raise ConfigurationError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


__all__ = [
    "ExperimentConfig",
    "ModelConfig",
    "TrainConfig",
    "EvalConfig",
    "apply_overrides",
    "config_text",
    "known_keys",
    "load_config",
    "parse_assignment",
    "parse_config_text",
    "to_flat",
]
