"""Experiment configuration files and master-seed fan-out.

One YAML file drives every runner command:

    seed: 1
    output_dir: runs/vdn3v3
    arena:        # ArenaConfig keys
      n_allies: 3
      ...
    algorithm:    # name (vdn|qmix) + training hyperparameters
      name: vdn
      episodes: 4000
      ...
    attack:       # backdoor injection settings
      agent: 0
      poisoning_rate: 0.05
      attack_duration: 20
      blend: 0.5
      trigger_file: triggers/arena3v3.trg
      episodes: 2500
      lambdas: [0.0, 0.2, 0.5, 0.8, 1.0]
    evaluation:
      episodes: 500

Reward bounds for the attack default to the arena's; override r_min/r_max
only for non-default reward scaling.  The master seed fans out to one
sub-stream per pipeline component via SeedSequence spawning, so any single
command is reproducible from (config, seed) alone.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .arena import ArenaConfig, ArenaError
from .backdoor import AttackConfig
from .marl import TrainConfig
from .trigger import TriggerParseError, load_trigger


class ConfigError(ValueError):
    pass


# pipeline components fan out from the master seed in this fixed order
SEED_STREAMS = ("train_clean", "inject", "evaluate", "trace", "sweep")


def component_seed(master: int, component: str) -> int:
    if component not in SEED_STREAMS:
        raise ConfigError(f"unknown seed stream {component!r}")
    children = np.random.SeedSequence(master).spawn(len(SEED_STREAMS))
    return int(children[SEED_STREAMS.index(component)].generate_state(1)[0])


@dataclass
class AttackSettings:
    attack: AttackConfig
    trigger_file: str
    episodes: int = 2500
    lambdas: Optional[list] = None


@dataclass
class EvalSettings:
    episodes: int = 500
    smooth_window: int = 50


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: str
    arena: ArenaConfig
    algo: str
    train: TrainConfig
    attack: Optional[AttackSettings] = None
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    source: Optional[str] = None  # path the config was loaded from

    def resolve_output_dir(self, cli_out: Optional[str] = None) -> Path:
        """--out beats the MARLTRAP_OUT environment variable beats the file."""
        out = cli_out or os.environ.get("MARLTRAP_OUT") or self.output_dir
        return Path(out)


def _section(data: dict, name: str, required: bool) -> Optional[dict]:
    if name not in data:
        if required:
            raise ConfigError(f"missing required section {name!r}")
        return None
    if not isinstance(data[name], dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return data[name]


def _build(cls, section: dict, where: str, defaults: Optional[dict] = None):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = dict(defaults or {})
    kwargs.update(section)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}")


def load_experiment_config(path, need_attack: bool = False) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")

    if "seed" not in data or not isinstance(data["seed"], int):
        raise ConfigError("missing or non-integer 'seed'")
    if "output_dir" not in data or not isinstance(data["output_dir"], str):
        raise ConfigError("missing 'output_dir'")

    arena_section = _section(data, "arena", required=True)
    try:
        arena = ArenaConfig.from_dict(arena_section)
    except ArenaError as e:
        raise ConfigError(f"invalid arena section: {e}")

    algo_section = dict(_section(data, "algorithm", required=True))
    algo = algo_section.pop("name", None)
    if algo not in ("vdn", "qmix"):
        raise ConfigError("algorithm.name must be 'vdn' or 'qmix'")
    train = _build(TrainConfig, algo_section, "algorithm section")
    try:
        train.validate()
    except ValueError as e:
        raise ConfigError(f"invalid algorithm section: {e}")

    attack_settings = None
    attack_section = _section(data, "attack", required=need_attack)
    if attack_section is not None:
        attack_section = dict(attack_section)
        trigger_file = attack_section.pop("trigger_file", None)
        if not trigger_file:
            raise ConfigError("attack.trigger_file is required")
        trigger_path = Path(trigger_file)
        if not trigger_path.is_absolute():
            trigger_path = path.parent / trigger_path
        if not trigger_path.exists():
            raise ConfigError(f"attack.trigger_file {trigger_path} does not exist")
        try:
            trigger = load_trigger(trigger_path)
        except TriggerParseError as e:
            raise ConfigError(f"attack.trigger_file: {e}")
        episodes = attack_section.pop("episodes", 2500)
        lambdas = attack_section.pop("lambdas", None)
        if lambdas is not None and (
            not isinstance(lambdas, list) or not all(isinstance(x, (int, float)) for x in lambdas)
        ):
            raise ConfigError("attack.lambdas must be a list of numbers")
        defaults = {"r_min": arena.r_min, "r_max": arena.r_max}
        attack = _build(AttackConfig, attack_section, "attack section", defaults={**defaults, "trigger": trigger})
        try:
            attack.validate()
        except ValueError as e:
            raise ConfigError(f"invalid attack section: {e}")
        if not 0 <= attack.agent < arena.n_allies:
            raise ConfigError("attack.agent is not a valid ally index")
        if not isinstance(episodes, int) or episodes < 1:
            raise ConfigError("attack.episodes must be a positive integer")
        attack_settings = AttackSettings(
            attack=attack, trigger_file=str(trigger_path), episodes=episodes, lambdas=lambdas
        )

    eval_section = _section(data, "evaluation", required=False) or {}
    evaluation = _build(EvalSettings, eval_section, "evaluation section")
    if evaluation.episodes < 1:
        raise ConfigError("evaluation.episodes must be positive")

    known = {"seed", "output_dir", "arena", "algorithm", "attack", "evaluation"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level sections: {sorted(unknown)}")

    return ExperimentConfig(
        seed=data["seed"],
        output_dir=data["output_dir"],
        arena=arena,
        algo=algo,
        train=train,
        attack=attack_settings,
        evaluation=evaluation,
        source=str(path),
    )
