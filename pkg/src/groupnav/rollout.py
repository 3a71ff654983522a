"""Running a policy through one episode and recording what the optimizer needs."""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np

from .envgraph import STOP, EpisodeSpec, NavGraph, candidates, feature_matrix, initial_state, step
from .optim import StepRecord, TrajectoryRecord
from .policy import ActionDistribution, PolicyParams, distribution_from_logits
from .reward import RewardConfig, trajectory_reward

# (step index starting at 1, distribution) -> chosen candidate index
Chooser = Callable[[int, ActionDistribution], int]


def substream(seed: int, *keys) -> np.random.Generator:
    """Independent generator for (seed, keys...); string keys are hashed stably."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


def run_policy(graph: NavGraph, episode: EpisodeSpec, params: PolicyParams, choose: Chooser,
               reward_cfg: RewardConfig) -> TrajectoryRecord:
    state = initial_state(graph, episode)
    d_start = state.d_t
    records = []
    stopped = False
    while True:
        cands = candidates(graph, state, episode)
        feats = feature_matrix(cands)
        dist = distribution_from_logits(feats @ params.w, feats)
        idx = choose(state.step + 1, dist)
        action = cands[idx]
        prev = state
        state, done = step(graph, state, action, episode)
        records.append(StepRecord(
            features=feats,
            chosen=idx,
            p_old=float(dist.logprobs[idx]),
            d_prev=prev.d_t,
            d_t=state.d_t,
            edge_len=0.0 if action.kind == STOP else graph.length(prev.node, state.node),
            node=state.node,
        ))
        if action.kind == STOP:
            stopped = True
        if done:
            break
    d_final = float(graph.dist[state.node, episode.goal])
    return TrajectoryRecord(
        episode_id=episode.episode_id,
        steps=tuple(records),
        d_start=d_start,
        d_final=d_final,
        L_k=state.path_len,
        L_star=episode.L_star,
        r_k=trajectory_reward(d_final, state.path_len, episode.L_star, reward_cfg),
        final_node=state.node,
        stopped=stopped,
    )
