"""Run configuration: dataclass sections, presets and a key=value file format.

Precedence is flags > file > preset defaults. A config file is INI-style::

    [world]
    d = 8
    [dmd]
    lr_generator = 0.004

Every run writes the fully resolved config into its manifest.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import asdict, dataclass, field, fields

from .distillation import DMDConfig


@dataclass
class WorldConfig:
    d: int = 8
    d_c: int = 4
    F: int = 21
    rho: float = 0.9
    base_var: float = 0.25
    audio_gain: float = 1.0
    img_saturation: float = 1.0
    audio_saturation: float = 2.0


@dataclass
class ModelConfig:
    n_teacher_steps: int = 48
    k: int = 4
    block_size: int = 3
    init_scale: float = 0.1


@dataclass
class ConditionConfig:
    n_train: int = 48
    n_select: int = 4
    n_eval: int = 4
    clean_fraction: float = 0.5
    dim_fraction: float = 0.25
    noisy_fraction: float = 0.25
    min_brightness: float = 0.5
    min_audio_snr: float = 10.0


@dataclass
class ODEConfig:
    rollouts_per_condition: int = 2
    lr: float = 1e-2
    beta1: float = 0.9
    weight_decay: float = 0.0
    max_steps: int = 20000
    window: int = 200
    rel_improvement: float = 1e-3
    under_trained_fraction: float = 0.05
    teacher_cfg_scale: float = 1.0


@dataclass
class StreamConfig:
    sink_capacity: int = 3
    rolling_capacity: int = 2
    pre_context: int = 3
    look_ahead: int = 3
    denoise_delay_s: float = 0.030
    decode_delay_s: float = 0.020
    blocks: int = 50
    probe_blocks: int = 100
    playback_fps: float = 16.0
    handoff_depth: int = 1
    clock: str = "virtual"
    decoder_dim: int = 0  # 0 means identity decoder


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    conditions: ConditionConfig = field(default_factory=ConditionConfig)
    ode: ODEConfig = field(default_factory=ODEConfig)
    dmd: DMDConfig = field(default_factory=DMDConfig.toy)
    stream: StreamConfig = field(default_factory=StreamConfig)
    seed: int = 0
    preset: str = "desk"

    SECTIONS = ("world", "model", "conditions", "ode", "dmd", "stream")

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in self.SECTIONS}
        out["seed"] = self.seed
        out["preset"] = self.preset
        return out

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply ``{"section.key": value}`` or ``{"seed": value}`` overrides."""
        cfg = dataclasses.replace(self, **{s: dataclasses.replace(getattr(self, s)) for s in self.SECTIONS})
        for dotted, value in overrides.items():
            if dotted in ("seed", "preset"):
                setattr(cfg, dotted, int(value) if dotted == "seed" else str(value))
                continue
            section, _, key = dotted.partition(".")
            if section not in self.SECTIONS:
                raise KeyError(f"unknown config section {section!r}")
            sec = getattr(cfg, section)
            types = {f.name: f.type for f in fields(sec)}
            if key not in types:
                raise KeyError(f"unknown key {key!r} in section [{section}]")
            new = dataclasses.replace(sec, **{key: _coerce(getattr(sec, key), value)})
            setattr(cfg, section, new)
        return cfg


def _coerce(current, value):
    if isinstance(value, str):
        if isinstance(current, bool):
            return value.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            return tuple(float(v) for v in value.replace("(", "").replace(")", "").split(","))
        if current is None:
            return None if value.strip().lower() in ("", "none") else int(value)
    return value


def preset(name: str) -> RunConfig:
    """``smoke`` (seconds), ``desk`` (acceptance scale) or ``paper-scale-doc``.

    ``paper-scale-doc`` carries the published hyperparameters unchanged
    (learning rates, CFG 6, 20000 ODE steps); it documents the recipe and
    is far too slow to be useful on the toy world.
    """
    if name == "desk":
        return RunConfig(preset=name)
    if name == "smoke":
        return RunConfig(
            world=WorldConfig(d=4, d_c=2, F=6),
            conditions=ConditionConfig(n_train=4, n_select=2, n_eval=2),
            ode=ODEConfig(rollouts_per_condition=2, max_steps=3000, window=50),
            dmd=DMDConfig.toy(total_steps=20, eval_every=10, batch_size=16, critic_batch_size=64, conds_per_step=2, critic_init_samples=64),
            stream=StreamConfig(blocks=8, probe_blocks=10),
            preset=name,
        )
    if name == "paper-scale-doc":
        return RunConfig(
            ode=ODEConfig(lr=4e-5, max_steps=20000, teacher_cfg_scale=4.5),
            dmd=DMDConfig(total_steps=1000),
            preset=name,
        )
    raise ValueError(f"unknown preset {name!r}")


PRESETS = ("smoke", "desk", "paper-scale-doc")


def read_config_file(path) -> dict:
    """Flatten an INI file into ``{"section.key": "value"}`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    out = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            out[key if section == "run" else f"{section}.{key}"] = value
    return out


def write_config_file(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["run"] = {"seed": str(cfg.seed), "preset": cfg.preset}
    for name in cfg.SECTIONS:
        parser[name] = {k: _ini(v) for k, v in asdict(getattr(cfg, name)).items()}
    with open(path, "w") as fh:
        parser.write(fh)


def _ini(v) -> str:
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolve(preset_name: str = "desk", config_path=None, flags: dict | None = None) -> RunConfig:
    cfg = preset(preset_name)
    if config_path is not None:
        cfg = cfg.with_overrides(read_config_file(config_path))
    if flags:
        cfg = cfg.with_overrides(flags)
    return cfg
