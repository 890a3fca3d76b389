"""Experiment configuration: YAML-backed, validated, hashable.

A config describes a grid (lists of eta, sigma, seed); a RunConfig is one
cell of that grid.  Hashes cover every semantically relevant field so run
directories are keyed by what was actually executed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import yaml

from .agents import AGENT_NAMES
from .envs import ENV_NAMES, MECHANISMS

__all__ = [
    "ConfigError",
    "Hyperparams",
    "ExperimentConfig",
    "RunConfig",
    "load_config",
]


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    adam_eps: float = 1e-5
    lambda_v: float = 1.0
    lambda_p: float = 1.0
    hidden: tuple[int, int] = (64, 64)
    horizon: int = 2048
    epochs: int = 10
    minibatch: int = 64
    max_grad_norm: float = 0.5
    eval_episodes: int = 10
    actors: int = 1

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if self.clip <= 0.0:
            raise ConfigError("clip must be positive")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if len(self.hidden) != 2 or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden must be two positive widths")
        if self.horizon < 1 or self.epochs < 1 or self.minibatch < 1:
            raise ConfigError("horizon, epochs and minibatch must be >= 1")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.actors < 1:
            raise ConfigError("actors must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    env: str = "pendulum"
    agent: str = "bi"
    mechanism: str = "mar"
    etas: tuple[float, ...] = (0.0,)
    sigmas: tuple[float, ...] = (0.0,)
    seeds: tuple[int, ...] = (0,)
    agents: tuple[str, ...] | None = None   # grid override; defaults to (agent,)
    timesteps: int = 100_000
    hp: Hyperparams = field(default_factory=Hyperparams)

    def validate(self) -> None:
        if self.env not in ENV_NAMES:
            raise ConfigError(f"unknown env {self.env!r}; choose from {ENV_NAMES}")
        for agent in self.grid_agents():
            if agent not in AGENT_NAMES:
                raise ConfigError(
                    f"unknown agent {agent!r}; choose from {AGENT_NAMES}")
        if self.mechanism not in MECHANISMS:
            raise ConfigError(
                f"unknown mechanism {self.mechanism!r}; choose from {MECHANISMS}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        for eta in self.etas:
            if not 0.0 <= eta < 1.0:
                raise ConfigError("every eta must lie in [0, 1)")
            if eta > 0.0 and self.mechanism == "none":
                raise ConfigError("eta > 0 requires mechanism mcar or mar")
        for sigma in self.sigmas:
            if sigma < 0.0:
                raise ConfigError("every sigma must be nonnegative")
        if self.timesteps < 0:
            raise ConfigError("timesteps must be nonnegative")
        self.hp.validate()

    def grid_agents(self) -> tuple[str, ...]:
        return self.agents if self.agents else (self.agent,)

    def cells(self):
        """One RunConfig per (agent, eta, sigma, seed)."""
        for agent in self.grid_agents():
            for eta in self.etas:
                for sigma in self.sigmas:
                    for seed in self.seeds:
                        yield RunConfig(
                            env=self.env, agent=agent, mechanism=self.mechanism,
                            eta=eta, sigma=sigma, seed=seed,
                            timesteps=self.timesteps, hp=self.hp)

    def first_cell(self) -> "RunConfig":
        return next(iter(self.cells()))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hp"]["hidden"] = list(self.hp.hidden)
        out["etas"] = list(self.etas)
        out["sigmas"] = list(self.sigmas)
        out["seeds"] = list(self.seeds)
        out["agents"] = list(self.agents) if self.agents else None
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        hp_data = data.pop("hp", {}) or {}
        unknown_hp = set(hp_data) - {f for f in Hyperparams.__dataclass_fields__}
        if unknown_hp:
            raise ConfigError(f"unknown hp keys: {sorted(unknown_hp)}")
        if "hidden" in hp_data:
            hp_data["hidden"] = tuple(hp_data["hidden"])
        hp = Hyperparams(**hp_data)
        for key in ("etas", "sigmas", "seeds", "agents"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        cfg = cls(hp=hp, **data)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class RunConfig:
    """One fully resolved training run."""

    env: str
    agent: str
    mechanism: str
    eta: float
    sigma: float
    seed: int
    timesteps: int
    hp: Hyperparams

    def validate(self) -> None:
        ExperimentConfig(
            env=self.env, agent=self.agent, mechanism=self.mechanism,
            etas=(self.eta,), sigmas=(self.sigma,), seeds=(self.seed,),
            timesteps=self.timesteps, hp=self.hp).validate()

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hp"]["hidden"] = list(self.hp.hidden)
        return out

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def run_id(self) -> str:
        return (f"{self.env}-{self.agent}-eta{self.eta:g}-sigma{self.sigma:g}"
                f"-seed{self.seed}-{self.config_hash()}")

    def replace(self, **kwargs) -> "RunConfig":
        return replace(self, **kwargs)


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping")
    return ExperimentConfig.from_dict(data)
