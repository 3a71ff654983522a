"""Softmax-linear policy over candidate actions.

The score of a candidate is ``w @ features``; everything downstream (log-prob
gradients, KL against the frozen reference) is computed analytically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envgraph import N_FEATURES, ActionCandidate, feature_matrix

SAMPLE = "sample"
GREEDY = "greedy"
LEAST_PROBABLE = "least_probable"
SELECT_MODES = (SAMPLE, GREEDY, LEAST_PROBABLE)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    w: np.ndarray
    version: int = 0

    def __post_init__(self):
        w = np.array(self.w, dtype=float).reshape(N_FEATURES)
        if not np.all(np.isfinite(w)):
            raise ValueError(f"non-finite policy weights: {w}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @classmethod
    def zeros(cls) -> "PolicyParams":
        return cls(np.zeros(N_FEATURES))


@dataclass(frozen=True, eq=False)
class ActionDistribution:
    probs: np.ndarray
    logprobs: np.ndarray
    features: np.ndarray  # (n_candidates, F); row i belongs to candidate i


def _as_features(cands) -> np.ndarray:
    if isinstance(cands, np.ndarray):
        return cands
    if not cands:
        raise ValueError("empty candidate list")
    if isinstance(cands[0], ActionCandidate):
        return feature_matrix(cands)
    return np.asarray(cands, dtype=float)


def distribution_from_logits(logits: np.ndarray, features: np.ndarray | None = None) -> ActionDistribution:
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    logprobs = shifted - log_z
    return ActionDistribution(np.exp(logprobs), logprobs, features)


def action_distribution(cands, params: PolicyParams) -> ActionDistribution:
    feats = _as_features(cands)
    return distribution_from_logits(feats @ params.w, feats)


def select(dist: ActionDistribution, mode: str, rng: np.random.Generator | None = None) -> tuple[int, float]:
    """Pick an index; ties in greedy/least_probable go to the lowest index."""
    if mode == GREEDY:
        idx = int(np.argmax(dist.probs))
    elif mode == LEAST_PROBABLE:
        idx = int(np.argmin(dist.probs))
    elif mode == SAMPLE:
        if rng is None:
            raise ValueError("sampling needs an rng")
        cdf = np.cumsum(dist.probs)
        idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        idx = min(idx, len(cdf) - 1)
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return idx, float(dist.logprobs[idx])


def logprob(cands, chosen: int, params: PolicyParams) -> float:
    return float(action_distribution(cands, params).logprobs[chosen])


def grad_logprob(cands, chosen: int, params: PolicyParams) -> np.ndarray:
    dist = action_distribution(cands, params)
    return dist.features[chosen] - dist.probs @ dist.features


def kl_divergence(dist_theta: ActionDistribution, dist_ref: ActionDistribution) -> float:
    if dist_theta.probs.shape != dist_ref.probs.shape:
        raise ValueError("distributions are over different candidate sets")
    kl = float(dist_theta.probs @ (dist_theta.logprobs - dist_ref.logprobs))
    return max(kl, 0.0)


def grad_kl(dist_theta: ActionDistribution, dist_ref: ActionDistribution) -> np.ndarray:
    """Gradient of KL(p_theta || p_ref) w.r.t. w, with p_ref held fixed."""
    p = dist_theta.probs
    feats = dist_theta.features
    centered = feats - p @ feats
    return (p * (dist_theta.logprobs - dist_ref.logprobs)) @ centered


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_FORMAT = "groupnav.checkpoint"
CHECKPOINT_VERSION = 1


def checkpoint_to_dict(params: PolicyParams, ref: PolicyParams | None, phase: str, version: str,
                       config: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "artifact_version": version,
        "phase": phase,
        "w": [float(x) for x in params.w],
        "version": params.version,
        "ref_w": None if ref is None else [float(x) for x in ref.w],
        "config": config or {},
    }


def checkpoint_from_dict(data: dict) -> tuple[PolicyParams, PolicyParams | None, str]:
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a policy checkpoint (format={data.get('format')!r})")
    if data.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {data.get('format_version')}")
    params = PolicyParams(np.asarray(data["w"], dtype=float), int(data["version"]))
    ref = None if data.get("ref_w") is None else PolicyParams(np.asarray(data["ref_w"], dtype=float))
    return params, ref, data["phase"]
