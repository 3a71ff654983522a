"""SFT warm-up, group rollouts, policy updates and hard-case replay."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .envgraph import EnvBundle, EpisodeSpec, expert_trajectory
from .optim import (
    OptimConfig,
    RolloutGroup,
    apply_update,
    batch_objective_and_gradient,
    compute_advantages,
    mean_step_kl,
)
from .policy import SAMPLE, PolicyParams, distribution_from_logits, select
from .reward import RewardConfig
from .rollout import run_policy, substream

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "mean_reward", "success_frac", "mean_kl", "buffer_size", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    B: int = 8
    K: int = 8
    warmup_steps: int = 200
    rl_steps: int = 200
    M: float = 200  # math.inf disables hard-case replay
    lr_sft: float = 0.1
    lr_rl: float = 0.1
    init_scale: float = 0.01
    reward_cfg: RewardConfig = field(default_factory=RewardConfig)
    optim_cfg: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def __post_init__(self):
        if self.B < 1:
            raise ValueError(f"B must be >= 1, got {self.B}")
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if not self.M >= 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.warmup_steps < 0 or self.rl_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.lr_sft < 0 or self.lr_rl < 0:
            raise ValueError("learning rates must be non-negative")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, last_params: PolicyParams, ref: PolicyParams | None):
        super().__init__(message)
        self.last_params = last_params
        self.ref = ref


@dataclass
class HardCaseBuffer:
    capacity: float
    episode_ids: list = field(default_factory=list)

    def observe(self, episode_id: str, hard: bool) -> None:
        """Track the most recent verdict for an episode."""
        if hard:
            if episode_id not in self.episode_ids:
                self.episode_ids.append(episode_id)
        elif episode_id in self.episode_ids:
            self.episode_ids.remove(episode_id)

    @property
    def full(self) -> bool:
        return len(self.episode_ids) >= self.capacity

    def clear(self) -> None:
        self.episode_ids.clear()

    def __len__(self) -> int:
        return len(self.episode_ids)


def sft_loss_and_gradient(pairs_per_episode: list, params: PolicyParams) -> tuple[float, np.ndarray]:
    """Mean-over-episodes negative expert log-likelihood and its gradient w.r.t. w."""
    loss = 0.0
    grad = np.zeros_like(params.w)
    for pairs in pairs_per_episode:
        for feats, idx in pairs:
            dist = distribution_from_logits(feats @ params.w, feats)
            loss -= dist.logprobs[idx]
            grad -= feats[idx] - dist.probs @ feats
    n = max(len(pairs_per_episode), 1)
    return float(loss / n), grad / n


def sft_update(bundle: EnvBundle, episodes: list[EpisodeSpec], params: PolicyParams, lr: float) -> PolicyParams:
    """One ascent step on the expert log-likelihood along teacher-forced shortest paths."""
    pairs = [expert_trajectory(bundle.graph_of(ep), ep) for ep in episodes]
    _, grad = sft_loss_and_gradient(pairs, params)
    return apply_update(params, -grad, lr)


def rollout_group(bundle: EnvBundle, episode: EpisodeSpec, params: PolicyParams, K: int,
                  rng: np.random.Generator, reward_cfg: RewardConfig) -> RolloutGroup:
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    graph = bundle.graph_of(episode)

    def choose(_t, dist):
        return select(dist, SAMPLE, rng)[0]

    trajs = [run_policy(graph, episode, params, choose, reward_cfg) for _ in range(K)]
    return RolloutGroup(
        episode_id=episode.episode_id,
        trajectories=trajs,
        rewards=np.array([t.r_k for t in trajs]),
        epsilon=episode.epsilon,
    )


def hard_case_check(group: RolloutGroup, epsilon: float) -> bool:
    return int(np.sum(group.d_final < epsilon)) == 0


def _sample_batch(episodes: list[EpisodeSpec], B: int, seed: int, phase: str, it: int) -> list[EpisodeSpec]:
    rng = substream(seed, phase, it)
    idx = rng.choice(len(episodes), size=B, replace=B > len(episodes))
    return [episodes[i] for i in idx]


def initial_params(cfg: TrainConfig) -> PolicyParams:
    rng = substream(cfg.seed, "init")
    return PolicyParams(rng.normal(0.0, cfg.init_scale, size=6))


@dataclass
class TrainResult:
    checkpoints: dict  # phase tag -> PolicyParams
    ref: PolicyParams
    log_rows: list
    flushes: int = 0


def train(cfg: TrainConfig, bundle: EnvBundle, split: str = "train", workers: int = 1) -> TrainResult:
    episodes = bundle.splits[split]
    if not episodes:
        raise ValueError(f"split {split!r} has no episodes")
    by_id = {ep.episode_id: ep for ep in episodes}
    params = initial_params(cfg)
    checkpoints = {"init": params}

    for it in range(cfg.warmup_steps):
        batch = _sample_batch(episodes, cfg.B, cfg.seed, "sft", it)
        params = sft_update(bundle, batch, params, cfg.lr_sft)
    checkpoints["post_sft"] = params
    ref = params
    log.info("warm-up done after %d SFT steps, w=%s", cfg.warmup_steps, np.round(params.w, 4))

    buffer = HardCaseBuffer(cfg.M)
    rows = []
    flushes = 0
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for it in range(cfg.rl_steps):
            t0 = time.perf_counter()
            batch = _sample_batch(episodes, cfg.B, cfg.seed, "rl", it)
            behavior = params

            def collect(ep, it=it, behavior=behavior):
                rng = substream(cfg.seed, "rollout", ep.episode_id, it)
                return rollout_group(bundle, ep, behavior, cfg.K, rng, cfg.reward_cfg)

            groups = list(pool.map(collect, batch)) if pool else [collect(ep) for ep in batch]
            compute_advantages(groups, cfg.optim_cfg)

            ocfg = cfg.optim_cfg
            kl = None
            for _ in range(ocfg.inner_epochs):
                obj, grad, step_kl = batch_objective_and_gradient(groups, params, ref, ocfg)
                if kl is None:
                    penalized = ocfg.variant in ("drgrpo", "grpo") and ocfg.beta > 0
                    kl = step_kl if penalized else mean_step_kl(groups, params, ref)
                if not (math.isfinite(obj) and np.all(np.isfinite(grad))):
                    raise TrainingAborted(f"non-finite objective at RL iteration {it}", params, ref)
                params = apply_update(params, grad, cfg.lr_rl)

            for ep, g in zip(batch, groups):
                buffer.observe(ep.episode_id, hard_case_check(g, ep.epsilon))
            if buffer.full:
                params = sft_update(bundle, [by_id[e] for e in buffer.episode_ids], params, cfg.lr_sft)
                buffer.clear()
                flushes += 1

            rewards = np.concatenate([g.rewards for g in groups])
            d_final = np.concatenate([g.d_final for g in groups])
            eps = np.array([ep.epsilon for ep in batch for _ in range(cfg.K)])
            rows.append({
                "iteration": it,
                "mean_reward": float(rewards.mean()),
                "success_frac": float(np.mean(d_final < eps)),
                "mean_kl": float(kl),
                "buffer_size": len(buffer),
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            })
    finally:
        if pool:
            pool.shutdown()
    checkpoints["final"] = params
    return TrainResult(checkpoints=checkpoints, ref=ref, log_rows=rows, flushes=flushes)
