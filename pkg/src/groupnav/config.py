"""Experiment configuration: one YAML document with env/reward/optim/train/eval sections."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .evaluate import PerturbSpec
from .optim import OptimConfig
from .reward import RewardConfig
from .train import TrainConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvSection(_Section):
    n_nodes: int = Field(40, ge=2)
    area_side: float = Field(30.0, gt=0)
    connect_radius: float = Field(7.0, gt=0)
    train_graphs: int = Field(20, ge=1)
    val_graphs: int = Field(20, ge=1)
    episodes_per_graph: int = Field(10, ge=1)
    l_range: tuple[float, float] = (8.0, 20.0)
    noise_sigma: float = Field(1.0, ge=0)
    epsilon: float = Field(3.0, gt=0)

    @field_validator("l_range")
    @classmethod
    def _ordered(cls, v):
        lo, hi = v
        if not 0 <= lo <= hi:
            raise ValueError(f"l_range must satisfy 0 <= low <= high, got {v}")
        return v


class RewardSection(_Section):
    alpha: float = Field(0.25, ge=0)


class OptimSection(_Section):
    variant: Literal["drgrpo", "grpo", "gspo", "gmpo", "reinforce_nogroup"] = "drgrpo"
    delta: float = Field(0.2, gt=0, lt=1)
    beta: float = Field(0.01, ge=0)
    inner_epochs: int = Field(1, ge=1)
    std_floor: float = Field(1e-6, gt=0)
    gspo_delta: float = Field(0.1, gt=0, lt=1)
    gmpo_eps: float = Field(0.4, gt=0)
    lr: float = Field(1.0, ge=0)


class TrainSection(_Section):
    B: int = Field(8, ge=1)
    K: int = Field(8, ge=2)
    warmup_steps: int = Field(300, ge=0)
    rl_steps: int = Field(400, ge=0)
    M: Optional[int] = Field(16, ge=1, description="hard-case flush trigger; null disables replay")
    lr_sft: float = Field(0.1, ge=0)
    init_scale: float = Field(0.01, ge=0)


class EvalSection(_Section):
    perturbations: list[str] = ["none", "global:0.2", "global:0.4", "global:0.8", "early:1", "early:2", "early:3"]
    seeds: list[int] = [0, 1, 2]

    @field_validator("perturbations")
    @classmethod
    def _parse(cls, v):
        specs = [PerturbSpec.parse(s) for s in v]
        if PerturbSpec() not in specs:
            raise ValueError("perturbations must include 'none'")
        return v

    @field_validator("seeds")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("at least one evaluation seed is required")
        return v

    def specs(self) -> list[PerturbSpec]:
        return [PerturbSpec.parse(s) for s in self.perturbations]


class ExperimentConfig(_Section):
    seed: int = 0
    output_dir: str = "runs/default"
    env: EnvSection = EnvSection()
    reward: RewardSection = RewardSection()
    optim: OptimSection = OptimSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"seed": seed})

    def echo(self) -> dict:
        return self.model_dump(mode="json")

    def reward_config(self) -> RewardConfig:
        return RewardConfig(epsilon=self.env.epsilon, alpha=self.reward.alpha)

    def optim_config(self) -> OptimConfig:
        o = self.optim
        return OptimConfig(variant=o.variant, delta=o.delta, beta=o.beta, inner_epochs=o.inner_epochs,
                           gspo_delta=o.gspo_delta, gmpo_eps=o.gmpo_eps, std_floor=o.std_floor)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            B=t.B, K=t.K, warmup_steps=t.warmup_steps, rl_steps=t.rl_steps,
            M=math.inf if t.M is None else t.M,
            lr_sft=t.lr_sft, lr_rl=self.optim.lr, init_scale=t.init_scale,
            reward_cfg=self.reward_config(), optim_cfg=self.optim_config(), seed=self.seed,
        )


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return ExperimentConfig.model_validate(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.echo(), sort_keys=False)
