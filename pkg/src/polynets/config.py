"""Flat ``section.key = value`` experiment configuration.

Every key has a typed default; unknown keys are rejected. ``dump_config``
writes the fully defaulted form, which parses back to an equal config.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple, get_type_hints

import numpy as np

from .blocks import NetworkSpec, desk_conv_spec, mlp_chain_spec
from .regularization import INIT_KINDS, InitSpec, NormKind
from .train import Exponential, MultiStep, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class NetworkSection:
    mode: str = "mlp"
    preset: str = "rpolynet"
    variant: str = "ncp"
    blocks: int = 3
    width: int = 8
    widths: Tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    steps: int = 1
    dense: bool = False
    phi: str = "batch"
    psi: str = "batch"
    ibn_ratio: float = 0.8
    dropblock_size: int = 3
    dropblock_keep: float = 0.9
    init: str = "zero_mean"
    init_D: float = 16.0


@dataclass
class TrainSection:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    epochs: int = 120
    schedule: str = "multistep"
    milestones: Tuple[int, ...] = (40, 60, 80, 100)
    factor: float = 0.1
    gamma: float = 0.92
    label_smooth: float = 0.0
    seed: int = 0
    augment_pad: int = 0
    grad_clip: float = 0.0
    dtype: str = "float64"
    eval_every: int = 1


@dataclass
class DataSection:
    kind: str = "xor"
    path: str = ""
    limit_per_class: int = 0
    n: int = 400
    test_n: int = 200
    noise: float = 0.1
    train_size: int = 0


@dataclass
class OutputSection:
    dir: str = "runs/experiment"


@dataclass
class VerifySection:
    suites: Tuple[str, ...] = ("grad", "degree", "equivalence")


@dataclass
class ExperimentConfig:
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    output: OutputSection = field(default_factory=OutputSection)
    verify: VerifySection = field(default_factory=VerifySection)


def _sections(cfg: ExperimentConfig) -> Dict[str, object]:
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def _parse_value(raw: str, typ, where: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
        item = typ.__args__[0]
        return tuple(item(v.strip()) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def set_key(cfg: ExperimentConfig, dotted: str, raw: str, where: str = "override") -> None:
    section_name, _, key = dotted.partition(".")
    sections = _sections(cfg)
    if section_name not in sections or not key:
        raise ConfigError(f"{where}: unknown key {dotted!r}")
    section = sections[section_name]
    hints = get_type_hints(type(section))
    if key not in hints:
        raise ConfigError(f"{where}: unknown key {dotted!r}")
    setattr(section, key, _parse_value(raw, hints[key], f"{where} ({dotted})"))


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = stripped.split("=", 1)
        set_key(cfg, key.strip(), value, f"{source}:{lineno}")
    check_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for name, section in _sections(cfg).items():
        for f in dataclasses.fields(section):
            lines.append(f"{name}.{f.name} = {_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def check_config(cfg: ExperimentConfig) -> None:
    net, tr, data = cfg.network, cfg.train, cfg.data
    choices = {
        "network.mode": (net.mode, ("mlp", "conv")),
        "network.preset": (net.preset, ("rpolynet", "pinet", "dpolynet")),
        "network.variant": (net.variant, ("ncp", "ccp")),
        "network.init": (net.init, INIT_KINDS),
        "train.schedule": (tr.schedule, ("multistep", "exponential")),
        "train.dtype": (tr.dtype, ("float32", "float64")),
        "data.kind": (data.kind, ("xor", "moons", "cifar10", "idx")),
    }
    for key, (value, allowed) in choices.items():
        if value not in allowed:
            raise ConfigError(f"{key}: {value!r} is not one of {', '.join(allowed)}")
    for key in ("phi", "psi"):
        try:
            NormKind(getattr(net, key))
        except ValueError as exc:
            raise ConfigError(f"network.{key}: {exc}") from None
    try:
        train_config(cfg)
        InitSpec(net.init, net.init_D)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def init_spec(cfg: ExperimentConfig) -> InitSpec:
    return InitSpec(cfg.network.init, cfg.network.init_D)


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    tr = cfg.train
    schedule = MultiStep(tr.milestones, tr.factor) if tr.schedule == "multistep" else Exponential(tr.gamma)
    return TrainConfig(lr0=tr.lr0, momentum=tr.momentum, weight_decay=tr.weight_decay, batch_size=tr.batch_size,
                       epochs=tr.epochs, schedule=schedule, label_smooth_eps=tr.label_smooth, seed=tr.seed,
                       augment_pad=tr.augment_pad, grad_clip=tr.grad_clip)


def network_spec(cfg: ExperimentConfig, in_dim: int, num_classes: int) -> NetworkSpec:
    """Build the network spec for inputs of width (mlp) or channel count (conv) ``in_dim``."""
    net = cfg.network
    if net.mode == "conv":
        return desk_conv_spec(net.preset, widths=net.widths, blocks_per_stage=net.blocks_per_stage,
                              in_channels=in_dim, num_classes=num_classes, steps=net.steps,
                              ibn_ratio=net.ibn_ratio, dropblock_size=net.dropblock_size,
                              dropblock_keep=net.dropblock_keep)
    phi = NormKind(net.phi, ratio=net.ibn_ratio)
    psi = NormKind(net.psi, ratio=net.ibn_ratio) if net.variant == "ncp" else NormKind("identity")
    return mlp_chain_spec(net.blocks, in_dim, net.width, num_classes, steps=net.steps, dense=net.dense,
                          variant=net.variant, phi=phi, psi=psi)


def dtype_of(cfg: ExperimentConfig):
    return np.dtype(cfg.train.dtype)
