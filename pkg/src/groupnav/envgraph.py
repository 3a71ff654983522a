"""Synthetic navigation graphs, episodes, candidate actions and expert next hops.

Graphs are random geometric graphs in a square area. Each episode asks the
agent to travel from ``start`` to ``goal`` while only seeing a noisy estimate
of the goal position. Geodesic distances are precomputed once per graph and
are the only source of truth for rewards and metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

N_FEATURES = 6
FEATURE_NAMES = ("is_stop", "bearing_cos", "norm_edge_len", "revisit_flag", "proximity_signal", "bias")

MOVE = "move"
STOP = "stop"

_PATH_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class NavGraph:
    positions: np.ndarray  # (n, 2) meters
    edges: tuple[tuple[int, int, float], ...]
    dist: np.ndarray  # (n, n) geodesic meters
    connect_radius: float
    seed: int
    graph_id: str = "g0"
    neighbors: tuple[tuple[int, ...], ...] = field(default=(), repr=False)
    edge_len: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    def length(self, u: int, v: int) -> float:
        return self.edge_len[(u, v)]


@dataclass(frozen=True)
class EpisodeSpec:
    episode_id: str
    graph_id: str
    start: int
    goal: int
    goal_estimate: tuple[float, float]
    L_star: float
    epsilon: float
    t_max: int


@dataclass(frozen=True, eq=False)
class ActionCandidate:
    kind: str
    target: int
    features: np.ndarray


@dataclass(frozen=True)
class AgentState:
    node: int
    visited: frozenset
    step: int
    path_len: float
    d_t: float


def _build(positions: np.ndarray, edge_pairs: Iterable[tuple[int, int]], connect_radius: float,
           seed: int, graph_id: str) -> NavGraph:
    n = len(positions)
    edges = []
    adj: list[list[int]] = [[] for _ in range(n)]
    lengths = {}
    for u, v in sorted({(min(a, b), max(a, b)) for a, b in edge_pairs}):
        length = float(math.hypot(*(positions[u] - positions[v])))
        edges.append((u, v, length))
        adj[u].append(v)
        adj[v].append(u)
        lengths[(u, v)] = lengths[(v, u)] = length

    rows = [e[0] for e in edges] + [e[1] for e in edges]
    cols = [e[1] for e in edges] + [e[0] for e in edges]
    data = [e[2] for e in edges] * 2
    weights = csr_matrix((data, (rows, cols)), shape=(n, n))
    dist = shortest_path(weights, method="D", directed=False)
    # summation order differs per source; pin d(u,v) == d(v,u) exactly
    dist = np.minimum(dist, dist.T)
    dist.setflags(write=False)
    positions = np.array(positions, dtype=float)
    positions.setflags(write=False)
    return NavGraph(
        positions=positions,
        edges=tuple(edges),
        dist=dist,
        connect_radius=float(connect_radius),
        seed=int(seed),
        graph_id=graph_id,
        neighbors=tuple(tuple(sorted(a)) for a in adj),
        edge_len=lengths,
    )


def _repair_edges(positions: np.ndarray, pairs: set[tuple[int, int]]) -> set[tuple[int, int]]:
    """Join components by repeatedly adding the shortest edge between two different components."""
    n = len(positions)
    pairs = set(pairs)
    diff = positions[:, None, :] - positions[None, :, :]
    euclid = np.sqrt((diff**2).sum(-1))
    while True:
        rows = [p[0] for p in pairs] + [p[1] for p in pairs]
        cols = [p[1] for p in pairs] + [p[0] for p in pairs]
        adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_comp, labels = connected_components(adj, directed=False)
        if n_comp == 1:
            return pairs
        cross = labels[:, None] != labels[None, :]
        masked = np.where(cross, euclid, np.inf)
        u, v = np.unravel_index(np.argmin(masked), masked.shape)
        pairs.add((int(min(u, v)), int(max(u, v))))


def graph_from_positions(positions, connect_radius: float, seed: int = 0, graph_id: str = "g0") -> NavGraph:
    positions = np.asarray(positions, dtype=float)
    if positions.ndim != 2 or positions.shape[1] != 2 or len(positions) < 2:
        raise ValueError("positions must be an (n>=2, 2) array")
    if not connect_radius > 0:
        raise ValueError(f"connect_radius must be positive, got {connect_radius}")
    n = len(positions)
    diff = positions[:, None, :] - positions[None, :, :]
    euclid = np.sqrt((diff**2).sum(-1))
    pairs = {(i, j) for i in range(n) for j in range(i + 1, n) if euclid[i, j] <= connect_radius}
    pairs = _repair_edges(positions, pairs)
    return _build(positions, pairs, connect_radius, seed, graph_id)


def generate_graph(n_nodes: int, area_side: float, connect_radius: float, seed: int,
                   graph_id: str = "g0") -> NavGraph:
    """Random geometric graph on ``[0, area_side]^2``, repaired until connected."""
    if n_nodes < 2:
        raise ValueError(f"n_nodes must be >= 2, got {n_nodes}")
    if not area_side > 0:
        raise ValueError(f"area_side must be positive, got {area_side}")
    if not connect_radius > 0:
        raise ValueError(f"connect_radius must be positive, got {connect_radius}")
    rng = np.random.default_rng(seed)
    positions = rng.uniform(0.0, area_side, size=(n_nodes, 2))
    return graph_from_positions(positions, connect_radius, seed, graph_id)


def shortest_path_nodes(graph: NavGraph, start: int, goal: int) -> list[int]:
    """Node sequence of the expert path (lowest-id tie breaking at each hop)."""
    path = [start]
    node = start
    while node != goal:
        node = next_hop(graph, node, goal)
        path.append(node)
    return path


def next_hop(graph: NavGraph, node: int, goal: int) -> int:
    d = graph.dist
    target = d[node, goal]
    for nbr in graph.neighbors[node]:
        if abs(graph.length(node, nbr) + d[nbr, goal] - target) <= _PATH_TOL * max(1.0, target):
            return nbr
    raise RuntimeError(f"no shortest-path successor from {node} to {goal}")  # pragma: no cover


def sample_episodes(graph: NavGraph, count: int, l_range: tuple[float, float], noise_sigma: float,
                    epsilon: float, seed: int, prefix: str | None = None) -> list[EpisodeSpec]:
    if count < 0:
        raise ValueError("count must be non-negative")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be non-negative, got {noise_sigma}")
    if count == 0:
        return []
    lo, hi = l_range
    d = graph.dist
    starts, goals = np.nonzero((d >= lo) & (d <= hi) & (d > 0))
    if len(starts) == 0:
        raise ValueError(f"no start/goal pair on graph {graph.graph_id} has L* in [{lo}, {hi}]")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(starts), size=count, replace=count > len(starts))
    prefix = prefix or graph.graph_id
    episodes = []
    for i, p in enumerate(picks):
        s, g = int(starts[p]), int(goals[p])
        noise = rng.normal(0.0, noise_sigma, size=2) if noise_sigma > 0 else np.zeros(2)
        est = graph.positions[g] + noise
        hops = len(shortest_path_nodes(graph, s, g)) - 1
        episodes.append(EpisodeSpec(
            episode_id=f"{prefix}-e{i:04d}",
            graph_id=graph.graph_id,
            start=s,
            goal=g,
            goal_estimate=(float(est[0]), float(est[1])),
            L_star=float(d[s, g]),
            epsilon=float(epsilon),
            t_max=hops + 6,
        ))
    return episodes


def initial_state(graph: NavGraph, episode: EpisodeSpec) -> AgentState:
    return AgentState(
        node=episode.start,
        visited=frozenset([episode.start]),
        step=0,
        path_len=0.0,
        d_t=float(graph.dist[episode.start, episode.goal]),
    )


def _proximity(graph: NavGraph, node: int, est: np.ndarray, epsilon: float) -> float:
    gap = graph.positions[node] - est
    return math.exp(-float(gap @ gap) / (2.0 * epsilon * epsilon))


def candidates(graph: NavGraph, state: AgentState, episode: EpisodeSpec) -> list[ActionCandidate]:
    """Stop first, then one move per neighbor in ascending node-id order."""
    node = state.node
    here = graph.positions[node]
    est = np.asarray(episode.goal_estimate, dtype=float)
    to_goal = est - here
    goal_norm = math.hypot(*to_goal)
    eps = episode.epsilon

    out = [ActionCandidate(STOP, node, np.array(
        [1.0, 0.0, 0.0, 1.0 if node in state.visited else 0.0, _proximity(graph, node, est, eps), 1.0]))]
    for nbr in graph.neighbors[node]:
        step_vec = graph.positions[nbr] - here
        length = graph.length(node, nbr)
        if goal_norm > 0.0 and length > 0.0:
            bearing = float(step_vec @ to_goal) / (length * goal_norm)
            bearing = min(1.0, max(-1.0, bearing))
        else:
            bearing = 0.0
        out.append(ActionCandidate(MOVE, nbr, np.array([
            0.0,
            bearing,
            min(1.0, length / graph.connect_radius),
            1.0 if nbr in state.visited else 0.0,
            _proximity(graph, nbr, est, eps),
            1.0,
        ])))
    return out


def feature_matrix(cands: list[ActionCandidate]) -> np.ndarray:
    return np.stack([c.features for c in cands])


def step(graph: NavGraph, state: AgentState, action: ActionCandidate,
         episode: EpisodeSpec) -> tuple[AgentState, bool]:
    if action.kind == STOP:
        if action.target != state.node:
            raise ValueError(f"stop must target the current node {state.node}, got {action.target}")
        nxt = AgentState(state.node, state.visited, state.step + 1, state.path_len, state.d_t)
        return nxt, True
    if action.kind != MOVE or action.target not in graph.neighbors[state.node]:
        raise ValueError(f"action {action.kind}->{action.target} is not available at node {state.node}")
    target = action.target
    nxt = AgentState(
        node=target,
        visited=state.visited | {target},
        step=state.step + 1,
        path_len=state.path_len + graph.length(state.node, target),
        d_t=float(graph.dist[target, episode.goal]),
    )
    return nxt, nxt.step >= episode.t_max


def expert_action(graph: NavGraph, state: AgentState, episode: EpisodeSpec,
                  cands: list[ActionCandidate] | None = None) -> int:
    cands = candidates(graph, state, episode) if cands is None else cands
    if state.node == episode.goal:
        return next(i for i, c in enumerate(cands) if c.kind == STOP)
    hop = next_hop(graph, state.node, episode.goal)
    return next(i for i, c in enumerate(cands) if c.kind == MOVE and c.target == hop)


def expert_trajectory(graph: NavGraph, episode: EpisodeSpec) -> list[tuple[np.ndarray, int]]:
    """Teacher-forced (feature matrix, expert index) pairs along the shortest path, ending in stop."""
    state = initial_state(graph, episode)
    pairs = []
    while True:
        cands = candidates(graph, state, episode)
        idx = expert_action(graph, state, episode, cands)
        pairs.append((feature_matrix(cands), idx))
        state, done = step(graph, state, cands[idx], episode)
        if cands[idx].kind == STOP or done:
            return pairs


# --- env bundle serialization -------------------------------------------------

BUNDLE_FORMAT = "groupnav.env-bundle"
BUNDLE_VERSION = 1


def graph_to_dict(graph: NavGraph) -> dict:
    return {
        "graph_id": graph.graph_id,
        "seed": graph.seed,
        "connect_radius": graph.connect_radius,
        "nodes": [[float(x), float(y)] for x, y in graph.positions],
        "edges": [[u, v, length] for u, v, length in graph.edges],
    }


def graph_from_dict(data: dict) -> NavGraph:
    positions = np.asarray(data["nodes"], dtype=float)
    pairs = [(int(u), int(v)) for u, v, _ in data["edges"]]
    return _build(positions, pairs, data["connect_radius"], data["seed"], data["graph_id"])


def episode_to_dict(ep: EpisodeSpec) -> dict:
    return {
        "episode_id": ep.episode_id,
        "graph_id": ep.graph_id,
        "start": ep.start,
        "goal": ep.goal,
        "goal_estimate": list(ep.goal_estimate),
        "L_star": ep.L_star,
        "epsilon": ep.epsilon,
        "t_max": ep.t_max,
    }


def episode_from_dict(data: dict) -> EpisodeSpec:
    return EpisodeSpec(
        episode_id=data["episode_id"],
        graph_id=data["graph_id"],
        start=int(data["start"]),
        goal=int(data["goal"]),
        goal_estimate=(float(data["goal_estimate"][0]), float(data["goal_estimate"][1])),
        L_star=float(data["L_star"]),
        epsilon=float(data["epsilon"]),
        t_max=int(data["t_max"]),
    )


@dataclass(frozen=True)
class EnvBundle:
    graphs: dict
    splits: dict  # split name -> list[EpisodeSpec]
    seed: int
    config: dict = field(default_factory=dict)

    def graph_of(self, episode: EpisodeSpec) -> NavGraph:
        return self.graphs[episode.graph_id]

    def to_dict(self, version: str) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "format_version": BUNDLE_VERSION,
            "artifact_version": version,
            "seed": self.seed,
            "config": self.config,
            "graphs": [graph_to_dict(self.graphs[k]) for k in sorted(self.graphs)],
            "splits": {name: [episode_to_dict(e) for e in eps] for name, eps in self.splits.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EnvBundle":
        if data.get("format") != BUNDLE_FORMAT:
            raise ValueError(f"not an env bundle (format={data.get('format')!r})")
        if data.get("format_version") != BUNDLE_VERSION:
            raise ValueError(f"unsupported env bundle version {data.get('format_version')}")
        graphs = {g["graph_id"]: graph_from_dict(g) for g in data["graphs"]}
        splits = {name: [episode_from_dict(e) for e in eps] for name, eps in data["splits"].items()}
        return cls(graphs=graphs, splits=splits, seed=int(data["seed"]), config=data.get("config", {}))


def build_bundle(n_train_graphs: int, n_val_graphs: int, episodes_per_graph: int, n_nodes: int,
                 area_side: float, connect_radius: float, l_range: tuple[float, float], noise_sigma: float,
                 epsilon: float, seed: int, config: dict | None = None) -> EnvBundle:
    """Train graphs and disjoint val-unseen graphs, each with its own episodes."""
    graphs = {}
    splits = {"train": [], "val_unseen": []}
    layout = [("train", "tr", n_train_graphs), ("val_unseen", "vu", n_val_graphs)]
    ss = np.random.SeedSequence(seed)
    children = iter(ss.spawn(n_train_graphs + n_val_graphs))
    for split, tag, count in layout:
        for i in range(count):
            child = next(children)
            g_seed, e_seed = (int(x) for x in child.generate_state(2))
            gid = f"{tag}{i:03d}"
            graph = generate_graph(n_nodes, area_side, connect_radius, g_seed, graph_id=gid)
            graphs[gid] = graph
            splits[split].extend(sample_episodes(graph, episodes_per_graph, l_range, noise_sigma, epsilon,
                                                 e_seed, prefix=gid))
    return EnvBundle(graphs=graphs, splits=splits, seed=seed, config=config or {})
