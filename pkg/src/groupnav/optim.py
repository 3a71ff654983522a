"""Group-relative advantages, clipped surrogates and their exact gradients.

Five update rules share one rollout format:

* ``drgrpo`` - mean-baseline advantages, progress-scaled clipped surrogate
  summed over steps (no length normalization), per-step KL penalty.
* ``grpo`` - std-normalized advantages and a 1/|tau| average over steps.
* ``gspo`` - one length-normalized importance ratio per trajectory, clipped.
* ``gmpo`` - geometric mean of per-step |rho * A| computed in log space.
* ``reinforce_nogroup`` - plain score-function gradient against the batch mean.

Advantages and progress coefficients are constants under differentiation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .policy import PolicyParams, distribution_from_logits
from .reward import progress_coefficient

VARIANTS = ("drgrpo", "grpo", "gspo", "gmpo", "reinforce_nogroup")

# which advantage estimator each variant consumes
ADVANTAGE_KIND = {
    "drgrpo": "mean",
    "grpo": "std",
    "gspo": "std",
    "gmpo": "std",
    "reinforce_nogroup": "batch_mean",
}


@dataclass(frozen=True)
class OptimConfig:
    variant: str = "drgrpo"
    delta: float = 0.2
    beta: float = 0.01
    inner_epochs: int = 1
    gspo_delta: float = 0.1
    gmpo_eps: float = 0.4
    std_floor: float = 1e-6

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 < self.gspo_delta < 1:
            raise ValueError(f"gspo_delta must lie in (0, 1), got {self.gspo_delta}")
        if not self.gmpo_eps > 0:
            raise ValueError(f"gmpo_eps must be positive, got {self.gmpo_eps}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.inner_epochs < 1:
            raise ValueError(f"inner_epochs must be >= 1, got {self.inner_epochs}")
        if not self.std_floor > 0:
            raise ValueError(f"std_floor must be positive, got {self.std_floor}")


@dataclass(frozen=True, eq=False)
class StepRecord:
    features: np.ndarray  # (n_candidates, F)
    chosen: int
    p_old: float  # behavior log-prob of ``chosen``
    d_prev: float
    d_t: float
    edge_len: float
    node: int  # node after the step


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    episode_id: str
    steps: tuple
    d_start: float
    d_final: float
    L_k: float
    L_star: float
    r_k: float
    final_node: int
    stopped: bool

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def min_d(self) -> float:
        return min([self.d_start] + [s.d_t for s in self.steps])

    @property
    def nodes(self) -> list[int]:
        return [s.node for s in self.steps]


@dataclass(eq=False)
class RolloutGroup:
    episode_id: str
    trajectories: list
    rewards: np.ndarray
    advantages: np.ndarray | None = None
    advantage_kind: str | None = None
    epsilon: float = 3.0
    meta: dict = field(default_factory=dict)

    @property
    def d_final(self) -> np.ndarray:
        return np.array([t.d_final for t in self.trajectories])


def advantage_drgrpo(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("group-relative advantages need at least 2 rewards")
    return r - r.mean()


def advantage_grpo(rewards, std_floor: float = 1e-6) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("group-relative advantages need at least 2 rewards")
    centered = r - r.mean()
    return centered / max(float(r.std()), std_floor)


def compute_advantages(groups: list[RolloutGroup], cfg: OptimConfig) -> None:
    """Fill ``advantages`` on every group in a batch, in place."""
    kind = ADVANTAGE_KIND[cfg.variant]
    if kind == "batch_mean":
        baseline = float(np.mean(np.concatenate([g.rewards for g in groups])))
    for g in groups:
        if kind == "mean":
            g.advantages = advantage_drgrpo(g.rewards)
        elif kind == "std":
            g.advantages = advantage_grpo(g.rewards, cfg.std_floor)
        else:
            g.advantages = np.asarray(g.rewards, dtype=float) - baseline
        g.advantage_kind = kind


def ratio(logp_new: float, p_old: float) -> float:
    return math.exp(logp_new - p_old)


def clip(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def clipped_term(gamma: float, adv: float, rho: float, delta: float) -> float:
    scale = gamma * adv
    return min(scale * rho, scale * clip(rho, 1.0 - delta, 1.0 + delta))


def _clipped_term_and_slope(scale: float, rho: float, delta: float) -> tuple[float, float]:
    """Value of the clipped surrogate and d(value)/d(rho); zero slope on the clipped branch."""
    raw = scale * rho
    clipped = scale * clip(rho, 1.0 - delta, 1.0 + delta)
    if raw <= clipped:
        return raw, scale
    return clipped, 0.0


def _step_terms(step: StepRecord, w: np.ndarray, ref_w: np.ndarray | None):
    feats = step.features
    dist = distribution_from_logits(feats @ w, feats)
    lp = float(dist.logprobs[step.chosen])
    mean_feat = dist.probs @ feats
    g_lp = feats[step.chosen] - mean_feat
    kl = 0.0
    g_kl = None
    if ref_w is not None:
        ref = distribution_from_logits(feats @ ref_w)
        gap = dist.logprobs - ref.logprobs
        kl = max(float(dist.probs @ gap), 0.0)
        g_kl = (dist.probs * gap) @ (feats - mean_feat)
    return lp, g_lp, kl, g_kl


def _surrogate_trajectory(traj: TrajectoryRecord, adv: float, w, ref_w, cfg: OptimConfig,
                          use_gamma: bool, length_norm: bool):
    value = 0.0
    grad = np.zeros_like(w)
    kl_sum = 0.0
    for st in traj.steps:
        lp, g_lp, kl, g_kl = _step_terms(st, w, ref_w)
        rho = math.exp(lp - st.p_old)
        gamma = progress_coefficient(st.d_prev, st.d_t, traj.L_star, adv) if use_gamma else 1.0
        term, slope = _clipped_term_and_slope(gamma * adv, rho, cfg.delta)
        value += term
        if slope != 0.0:
            grad += slope * rho * g_lp
        if g_kl is not None:
            value -= cfg.beta * kl
            grad -= cfg.beta * g_kl
            kl_sum += kl
    if length_norm:
        n = max(traj.length, 1)
        value /= n
        grad /= n
    return value, grad, kl_sum


def sequence_ratio(traj: TrajectoryRecord, params: PolicyParams) -> float:
    """Length-normalised sequence importance ratio exp(mean_t (log pi - log pi_old))."""
    return math.exp(sum(_step_terms(st, params.w, None)[0] - st.p_old for st in traj.steps) / traj.length)


def _gspo_trajectory(traj: TrajectoryRecord, adv: float, w, cfg: OptimConfig):
    n = traj.length
    log_ratio = 0.0
    g_mean = np.zeros_like(w)
    for st in traj.steps:
        lp, g_lp, _, _ = _step_terms(st, w, None)
        log_ratio += lp - st.p_old
        g_mean += g_lp
    s = math.exp(log_ratio / n)
    term, slope = _clipped_term_and_slope(adv, s, cfg.gspo_delta)
    grad = slope * s * (g_mean / n) if slope != 0.0 else np.zeros_like(w)
    return term, grad


def _gmpo_trajectory(traj: TrajectoryRecord, adv: float, w, cfg: OptimConfig):
    if adv == 0.0:
        return 0.0, np.zeros_like(w)
    sgn = 1.0 if adv > 0 else -1.0
    n = traj.length
    eps = cfg.gmpo_eps
    total = 0.0
    g_active = np.zeros_like(w)
    for st in traj.steps:
        lp, g_lp, _, _ = _step_terms(st, w, None)
        ell = lp - st.p_old
        ell_clip = clip(ell, -eps, eps)
        if sgn * ell <= sgn * ell_clip:
            total += ell
            g_active += g_lp
        else:
            total += ell_clip
    value = adv * math.exp(total / n)  # sgn(A) * (prod |rho_t A|)^(1/n)
    return value, value * g_active / n


def _reinforce_trajectory(traj: TrajectoryRecord, adv: float, w):
    value = 0.0
    grad = np.zeros_like(w)
    for st in traj.steps:
        lp, g_lp, _, _ = _step_terms(st, w, None)
        rho = math.exp(lp - st.p_old)
        value += rho * adv
        grad += rho * adv * g_lp
    return value, grad


def objective_and_gradient(group: RolloutGroup, params: PolicyParams, ref: PolicyParams | None,
                           cfg: OptimConfig) -> tuple[float, np.ndarray]:
    value, grad, _ = group_objective(group, params, ref, cfg)
    return value, grad


def trajectory_objective(traj: TrajectoryRecord, adv: float, params: PolicyParams, ref: PolicyParams | None,
                         cfg: OptimConfig) -> tuple[float, np.ndarray, float]:
    """One trajectory's contribution before the 1/K group average: value, gradient, summed KL."""
    w = params.w
    uses_kl = cfg.variant in ("drgrpo", "grpo") and cfg.beta > 0 and ref is not None
    ref_w = ref.w if uses_kl else None
    adv = float(adv)
    if cfg.variant == "drgrpo":
        return _surrogate_trajectory(traj, adv, w, ref_w, cfg, use_gamma=True, length_norm=False)
    if cfg.variant == "grpo":
        return _surrogate_trajectory(traj, adv, w, ref_w, cfg, use_gamma=True, length_norm=True)
    if cfg.variant == "gspo":
        v, g = _gspo_trajectory(traj, adv, w, cfg)
    elif cfg.variant == "gmpo":
        v, g = _gmpo_trajectory(traj, adv, w, cfg)
    else:
        v, g = _reinforce_trajectory(traj, adv, w)
    return v, g, 0.0


def group_objective(group: RolloutGroup, params: PolicyParams, ref: PolicyParams | None,
                    cfg: OptimConfig) -> tuple[float, np.ndarray, float]:
    """Objective, gradient and summed per-step KL for one group."""
    expected = ADVANTAGE_KIND[cfg.variant]
    if group.advantages is None or group.advantage_kind != expected:
        raise ValueError(
            f"variant {cfg.variant!r} needs {expected!r} advantages, group has {group.advantage_kind!r}")
    K = len(group.trajectories)
    value = 0.0
    grad = np.zeros_like(params.w)
    kl_total = 0.0
    for traj, adv in zip(group.trajectories, group.advantages):
        v, g, kl = trajectory_objective(traj, adv, params, ref, cfg)
        value += v
        grad += g
        kl_total += kl
    return value / K, grad / K, kl_total


def batch_objective_and_gradient(groups: list[RolloutGroup], params: PolicyParams, ref: PolicyParams | None,
                                 cfg: OptimConfig) -> tuple[float, np.ndarray, float]:
    """Mean objective and gradient over a batch of groups, plus mean per-step KL."""
    value = 0.0
    grad = np.zeros(len(params.w))
    kl_sum = 0.0
    n_steps = 0
    for g in groups:
        v, gr, kl = group_objective(g, params, ref, cfg)
        value += v
        grad += gr
        kl_sum += kl
        n_steps += sum(t.length for t in g.trajectories)
    B = len(groups)
    return value / B, grad / B, kl_sum / max(n_steps, 1)


def mean_step_kl(groups: list[RolloutGroup], params: PolicyParams, ref: PolicyParams) -> float:
    total = 0.0
    n = 0
    for g in groups:
        for traj in g.trajectories:
            for st in traj.steps:
                total += _step_terms(st, params.w, ref.w)[2]
                n += 1
    return total / max(n, 1)


def apply_update(params: PolicyParams, grad, lr: float) -> PolicyParams:
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient at params version {params.version}: {grad}")
    return PolicyParams(params.w + lr * grad, params.version + 1)
