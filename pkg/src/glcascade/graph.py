"""Weighted directed graphs, synthetic topologies and edge-weight sampling.

Weights are always stored in the GLC parameterisation: for independent
cascades the stored value is ``theta = log(1 / (1 - p))`` and ``p`` is only
ever a view obtained through :func:`theta_to_p`.  Column ``j`` of the weight
matrix holds the incoming weights of node ``j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

import networkx as nx
import numpy as np

MODEL_KINDS = ("ic", "voter", "cice", "logistic")
GRAPH_HEADER = "# glc-graph v1"


class ParameterError(ValueError):
    """Invalid generator, sampler or model parameter."""


class GraphFormatError(ValueError):
    """Malformed graph file; ``line`` is 1-based."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def p_to_theta(p):
    """Infection probability -> GLC weight, ``log(1/(1-p))``."""
    arr = np.asarray(p, dtype=float)
    if np.any(arr < 0) or np.any(arr >= 1):
        raise ParameterError("p must lie in [0, 1)")
    out = -np.log1p(-arr)
    return float(out) if out.ndim == 0 else out


def theta_to_p(theta):
    """GLC weight -> infection probability, ``1 - exp(-theta)``."""
    arr = np.asarray(theta, dtype=float)
    if np.any(arr < 0):
        raise ParameterError("theta must be nonnegative")
    out = -np.expm1(-arr)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GraphTopology:
    num_nodes: int
    edges: frozenset

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ParameterError("num_nodes must be positive")
        for src, dst in self.edges:
            if src == dst:
                raise ParameterError(f"self-loop on node {src}")
            if not (0 <= src < self.num_nodes and 0 <= dst < self.num_nodes):
                raise ParameterError(f"edge ({src}, {dst}) out of range")

    @classmethod
    def from_undirected(cls, num_nodes: int, pairs: Iterable[tuple[int, int]]) -> "GraphTopology":
        edges = set()
        for u, v in pairs:
            edges.add((int(u), int(v)))
            edges.add((int(v), int(u)))
        return cls(num_nodes, frozenset(edges))

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)

    def in_degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=int)
        for _, dst in self.edges:
            deg[dst] += 1
        return deg

    def __len__(self):
        return len(self.edges)


@dataclass(frozen=True)
class Graph:
    """Directed weighted graph; ``edges`` maps ``(src, dst)`` to a positive weight."""

    num_nodes: int
    model: str
    edges: Mapping[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ParameterError(f"unknown model {self.model!r}")
        if self.num_nodes < 1:
            raise ParameterError("num_nodes must be positive")
        clean = {}
        for (src, dst), w in sorted(self.edges.items()):
            src, dst, w = int(src), int(dst), float(w)
            if src == dst:
                raise ParameterError(f"self-loop on node {src}")
            if not (0 <= src < self.num_nodes and 0 <= dst < self.num_nodes):
                raise ParameterError(f"edge ({src}, {dst}) out of range")
            if not (w > 0 and math.isfinite(w)):
                raise ParameterError(f"edge ({src}, {dst}) has non-positive weight {w}")
            clean[(src, dst)] = w
        object.__setattr__(self, "edges", MappingProxyType(clean))
        if self.model == "voter":
            sums = self.matrix.sum(axis=0)
            has_in = self.topology.in_degrees() > 0
            if np.any(np.abs(sums[has_in] - 1.0) > 1e-12):
                raise ParameterError("voter incoming weights must sum to 1")
            if any(w > 1.0 for w in clean.values()):
                raise ParameterError("voter weights must lie in (0, 1]")

    @cached_property
    def matrix(self) -> np.ndarray:
        mat = np.zeros((self.num_nodes, self.num_nodes))
        for (src, dst), w in self.edges.items():
            mat[src, dst] = w
        mat.setflags(write=False)
        return mat

    @cached_property
    def topology(self) -> GraphTopology:
        return GraphTopology(self.num_nodes, frozenset(self.edges))

    def column(self, j: int) -> np.ndarray:
        """Incoming weight vector of node ``j`` (length ``num_nodes``)."""
        if not 0 <= j < self.num_nodes:
            raise ParameterError(f"node {j} out of range")
        return self.matrix[:, j].copy()

    def parents(self, j: int) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.matrix[:, j])]

    def in_degrees(self) -> np.ndarray:
        return (self.matrix > 0).sum(axis=0)

    def edge_set(self) -> frozenset:
        return frozenset(self.edges)

    def __len__(self):
        return len(self.edges)


def _check_seed(seed):
    if seed is None:
        raise ParameterError("an explicit seed is required")


def generate_barabasi_albert(m: int, k: int, seed: int) -> GraphTopology:
    """Preferential attachment; each new node links to ``k`` distinct earlier nodes."""
    if not 1 <= k < m:
        raise ParameterError(f"need 1 <= k < m, got k={k}, m={m}")
    _check_seed(seed)
    g = nx.barabasi_albert_graph(m, k, seed=seed)
    return GraphTopology.from_undirected(m, g.edges())


def generate_watts_strogatz(m: int, k: int, beta: float, seed: int) -> GraphTopology:
    """Ring lattice over ``k`` nearest neighbours, each edge rewired w.p. ``beta``."""
    if k % 2 or k < 2:
        raise ParameterError(f"k must be a positive even integer, got {k}")
    if k >= m:
        raise ParameterError(f"k={k} must be smaller than m={m}")
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"beta must lie in [0, 1], got {beta}")
    _check_seed(seed)
    g = nx.watts_strogatz_graph(m, k, beta, seed=seed)
    return GraphTopology.from_undirected(m, g.edges())


def generate_holme_kim(m: int, k: int, p_triad: float, seed: int) -> GraphTopology:
    """Powerlaw-cluster graph: preferential attachment plus triad closure."""
    if not 1 <= k < m:
        raise ParameterError(f"need 1 <= k < m, got k={k}, m={m}")
    if not 0.0 <= p_triad <= 1.0:
        raise ParameterError(f"p_triad must lie in [0, 1], got {p_triad}")
    _check_seed(seed)
    g = nx.powerlaw_cluster_graph(m, k, p_triad, seed=seed)
    return GraphTopology.from_undirected(m, g.edges())


DEFAULT_KRONECKER_INITIATOR = ((0.9, 0.5), (0.5, 0.3))


def generate_kronecker(initiator, power: int, target_edges: int, seed: int) -> GraphTopology:
    """Stochastic Kronecker graph with ``2**power`` nodes.

    Each edge is placed by descending ``power`` levels of the initiator,
    choosing a quadrant proportionally to its entries; duplicates and
    self-loops are rejected until ``target_edges`` distinct edges exist.
    """
    init = np.asarray(initiator, dtype=float)
    if init.shape != (2, 2) or np.any(init < 0) or np.any(init > 1) or init.sum() <= 0:
        raise ParameterError("initiator must be a 2x2 matrix with entries in [0, 1]")
    if power < 1:
        raise ParameterError("power must be >= 1")
    m = 2**power
    if not 0 <= target_edges <= m * (m - 1):
        raise ParameterError(f"target_edges must lie in [0, {m * (m - 1)}]")
    _check_seed(seed)
    rng = np.random.default_rng(seed)
    probs = (init / init.sum()).ravel()
    scale = 2 ** np.arange(power - 1, -1, -1)
    edges: dict[tuple[int, int], None] = {}
    attempts = 0
    max_attempts = 1000 * max(target_edges, 1)
    while len(edges) < target_edges:
        batch = max(64, 2 * (target_edges - len(edges)))
        quad = rng.choice(4, size=(batch, power), p=probs)
        rows = (quad // 2) @ scale
        cols = (quad % 2) @ scale
        for src, dst in zip(rows.tolist(), cols.tolist()):
            attempts += 1
            if src != dst and (src, dst) not in edges:
                edges[(src, dst)] = None
                if len(edges) == target_edges:
                    break
        if attempts > max_attempts:
            raise ParameterError("initiator cannot place the requested number of edges")
    return GraphTopology(m, frozenset(edges))


def k_for_edge_target(kind: str, m: int, edges_target: int) -> int:
    """Generator attachment/neighbour count giving roughly ``edges_target`` directed edges."""
    undirected = edges_target / 2
    if kind == "ws":
        return max(2, 2 * round(undirected / m))
    if kind in ("ba", "hk"):
        disc = m * m - 4 * undirected
        if disc < 0:
            raise ParameterError(f"{edges_target} edges unreachable with {m} nodes")
        return max(1, int(round((m - math.sqrt(disc)) / 2)))
    raise ParameterError(f"no edge-target rule for generator {kind!r}")


def assign_weights(topology: GraphTopology, model, low: float, high: float, seed: int) -> Graph:
    """Sample a weight per edge (in sorted edge order) for the given cascade model.

    IC/CICE/logistic draw ``p ~ U[low, high]`` and store ``p_to_theta(p)``.
    Voter draws raw positives and normalises each node's incoming weights.
    """
    kind = getattr(model, "kind", model)
    if kind not in MODEL_KINDS:
        raise ParameterError(f"unknown model {kind!r}")
    if not 0 <= low <= high:
        raise ParameterError(f"need 0 <= low <= high, got [{low}, {high}]")
    _check_seed(seed)
    rng = np.random.default_rng(seed)
    order = topology.sorted_edges()
    if kind == "voter":
        if low == 0 and high == 0:
            raise ParameterError("voter weights need a positive range")
        raw = rng.uniform(low, high, size=len(order))
        raw = np.where(raw > 0, raw, high)
        weights = _normalise_incoming({e: float(w) for e, w in zip(order, raw)})
        return Graph(topology.num_nodes, kind, weights)
    if high >= 1:
        raise ParameterError("IC-style weights are probabilities; need high < 1")
    p = rng.uniform(low, high, size=len(order))
    theta = p_to_theta(p) if len(order) else np.zeros(0)
    weights = {e: float(t) for e, t in zip(order, np.atleast_1d(theta)) if t > 0}
    return Graph(topology.num_nodes, kind, weights)


def _normalise_incoming(weights: dict) -> dict:
    by_dst: dict[int, list] = {}
    for (src, dst), w in weights.items():
        by_dst.setdefault(dst, []).append((src, w))
    out = {}
    for dst, items in by_dst.items():
        total = math.fsum(w for _, w in items)
        for src, w in items:
            out[(src, dst)] = w / total
    return out


def add_weak_edges(graph: Graph, prob: float, low: float, high: float, seed: int) -> Graph:
    """Turn each absent off-diagonal pair into an edge with probability ``prob``."""
    if graph.model == "voter":
        raise ParameterError("weak edges are defined for IC-style weights only")
    if not 0.0 <= prob <= 1.0:
        raise ParameterError("prob must lie in [0, 1]")
    if not 0 <= low < high < 1:
        raise ParameterError(f"need 0 <= low < high < 1, got [{low}, {high}]")
    _check_seed(seed)
    rng = np.random.default_rng(seed)
    m = graph.num_nodes
    absent = [(i, j) for i in range(m) for j in range(m) if i != j and (i, j) not in graph.edges]
    coins = rng.random(len(absent))
    p = rng.uniform(low, high, size=len(absent))
    weights = dict(graph.edges)
    for (pair, coin, pij) in zip(absent, coins, p):
        if coin < prob and pij > 0:
            weights[pair] = float(p_to_theta(pij))
    return Graph(m, graph.model, weights)


def write_graph(graph: Graph, path) -> None:
    lines = [f"{GRAPH_HEADER} model={graph.model} m={graph.num_nodes}"]
    lines += [f"{s}\t{d}\t{w:.17g}" for (s, d), w in graph.edges.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path) -> Graph:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(GRAPH_HEADER):
        raise GraphFormatError("missing '# glc-graph v1' header", 1)
    fields = dict(tok.split("=", 1) for tok in text[0][len(GRAPH_HEADER):].split() if "=" in tok)
    try:
        model = fields["model"]
        m = int(fields["m"])
    except (KeyError, ValueError):
        raise GraphFormatError("header needs model=<kind> m=<int>", 1) from None
    edges = {}
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise GraphFormatError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
        try:
            src, dst, w = int(parts[0]), int(parts[1]), float(parts[2])
        except ValueError:
            raise GraphFormatError(f"unparseable edge {line!r}", lineno) from None
        if (src, dst) in edges:
            raise GraphFormatError(f"duplicate edge ({src}, {dst})", lineno)
        if src == dst or not (0 <= src < m and 0 <= dst < m) or not w > 0:
            raise GraphFormatError(f"invalid edge {line!r}", lineno)
        edges[(src, dst)] = w
    try:
        return Graph(m, model, edges)
    except ParameterError as exc:
        raise GraphFormatError(str(exc)) from None
