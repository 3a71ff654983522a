"""Greedy evaluation, navigation metrics and perturbation sweeps."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .envgraph import EnvBundle, EpisodeSpec
from .optim import TrajectoryRecord
from .policy import GREEDY, LEAST_PROBABLE, SAMPLE, PolicyParams, select
from .reward import RewardConfig
from .rollout import run_policy, substream


@dataclass(frozen=True)
class PerturbSpec:
    mode: str = "none"  # none | global | early
    p: float = 0.0
    N: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "global", "early"):
            raise ValueError(f"unknown perturbation mode {self.mode!r}")
        if self.mode == "global" and not 0.0 <= self.p <= 1.0:
            raise ValueError(f"global perturbation probability must lie in [0, 1], got {self.p}")
        if self.mode == "early" and self.N < 1:
            raise ValueError(f"early perturbation needs N >= 1, got {self.N}")

    @property
    def label(self) -> str:
        if self.mode == "global":
            return f"global(p={self.p:g})"
        if self.mode == "early":
            return f"early(N={self.N})"
        return "none"

    @classmethod
    def parse(cls, text: str) -> "PerturbSpec":
        """Accepts ``none``, ``global:0.2`` or ``early:2``."""
        text = text.strip()
        if text == "none":
            return cls()
        mode, _, arg = text.partition(":")
        if mode == "global":
            return cls("global", p=float(arg))
        if mode == "early":
            return cls("early", N=int(arg))
        raise ValueError(f"cannot parse perturbation {text!r}")


NONE = PerturbSpec()
TABLE_GRID = (NONE,
              PerturbSpec("global", p=0.2), PerturbSpec("global", p=0.4), PerturbSpec("global", p=0.8),
              PerturbSpec("early", N=1), PerturbSpec("early", N=2), PerturbSpec("early", N=3))


@dataclass(frozen=True)
class EpisodeRow:
    episode_id: str
    d_final: float
    L_k: float
    L_star: float
    success: bool
    oracle_success: bool
    min_d: float


@dataclass(frozen=True)
class EvalResult:
    NE: float
    SR: float
    SPL: float
    OSR: float
    rows: tuple

    def as_dict(self) -> dict:
        return {"OSR": self.OSR, "NE": self.NE, "SR": self.SR, "SPL": self.SPL}


def run_episode(bundle: EnvBundle, params: PolicyParams, episode: EpisodeSpec, perturb: PerturbSpec,
                rng: np.random.Generator, reward_cfg: RewardConfig | None = None) -> TrajectoryRecord:
    reward_cfg = reward_cfg or RewardConfig(epsilon=episode.epsilon)

    def choose(t, dist):
        if perturb.mode == "early" and t <= perturb.N:
            return select(dist, LEAST_PROBABLE)[0]
        if perturb.mode == "global" and rng.random() < perturb.p:
            return select(dist, SAMPLE, rng)[0]
        return select(dist, GREEDY)[0]

    return run_policy(bundle.graph_of(episode), episode, params, choose, reward_cfg)


def episode_row(bundle: EnvBundle, episode: EpisodeSpec, traj: TrajectoryRecord) -> EpisodeRow:
    dist = bundle.graph_of(episode).dist
    # recompute from the graph, never trust cached distances
    d_final = float(dist[traj.final_node, episode.goal])
    visited = [episode.start] + traj.nodes
    min_d = float(min(dist[v, episode.goal] for v in visited))
    return EpisodeRow(
        episode_id=episode.episode_id,
        d_final=d_final,
        L_k=traj.L_k,
        L_star=episode.L_star,
        success=d_final < episode.epsilon,
        oracle_success=min_d < episode.epsilon,
        min_d=min_d,
    )


def compute_metrics(rows) -> EvalResult:
    rows = tuple(rows)
    if not rows:
        raise ValueError("cannot compute metrics over zero episodes")
    d = np.array([r.d_final for r in rows])
    succ = np.array([r.success for r in rows], dtype=float)
    osr = np.array([r.oracle_success for r in rows], dtype=float)
    weight = np.array([r.L_star / max(r.L_k, r.L_star) for r in rows])
    return EvalResult(
        NE=float(d.mean()),
        SR=float(100.0 * succ.mean()),
        SPL=float(100.0 * (succ * weight).mean()),
        OSR=float(100.0 * osr.mean()),
        rows=rows,
    )


def evaluate(bundle: EnvBundle, params: PolicyParams, episodes: list[EpisodeSpec], perturb: PerturbSpec = NONE,
             seed: int = 0, workers: int = 1) -> EvalResult:
    def one(ep):
        rng = substream(seed, "eval", perturb.label, ep.episode_id)
        return episode_row(bundle, ep, run_episode(bundle, params, ep, perturb, rng))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, episodes))
    else:
        rows = [one(ep) for ep in episodes]
    return compute_metrics(rows)


def robustness_table(methods: dict, bundle: EnvBundle, episodes: list[EpisodeSpec], specs, seeds,
                     workers: int = 1) -> dict:
    """Metrics per method x perturbation x seed, with SPL deltas against the unperturbed run.

    ``methods`` maps a name to either one PolicyParams or a list with one entry per seed.
    Returns ``{"rows": [...], "summary": [...]}``; summary rows average over seeds.
    """
    specs = list(specs)
    if NONE not in specs:
        raise ValueError("the perturbation grid must include the unperturbed setting 'none'")
    specs = [NONE] + [s for s in specs if s != NONE]
    rows = []
    summary = []
    for name, params in methods.items():
        per_seed = list(params) if isinstance(params, (list, tuple)) else [params] * len(seeds)
        if len(per_seed) != len(seeds):
            raise ValueError(f"method {name!r} has {len(per_seed)} parameter sets for {len(seeds)} seeds")
        base = {}
        by_spec = {s.label: [] for s in specs}
        for spec in specs:
            for seed, p in zip(seeds, per_seed):
                res = evaluate(bundle, p, episodes, spec, seed=seed, workers=workers)
                if spec == NONE:
                    base[seed] = res.SPL
                row = {"method": name, "perturbation": spec.label, "mode": spec.mode,
                       "level": spec.p if spec.mode == "global" else spec.N, "seed": seed,
                       **res.as_dict(), "dSPL": res.SPL - base[seed]}
                rows.append(row)
                by_spec[spec.label].append(row)
        for spec in specs:
            group = by_spec[spec.label]
            summary.append({
                "method": name, "perturbation": spec.label, "mode": spec.mode,
                "level": group[0]["level"], "n_seeds": len(group),
                **{k: float(np.mean([r[k] for r in group])) for k in ("OSR", "NE", "SR", "SPL", "dSPL")},
            })
    return {"rows": rows, "summary": summary}
