"""Link functions, cascade simulators and per-node measurement extraction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .graph import MODEL_KINDS, Graph, ParameterError

DEFAULT_VOTER_HORIZON = 10


class DomainError(ValueError):
    """Argument outside the domain of a model (e.g. voter sum above one)."""


class SimulationError(RuntimeError):
    """A simulation exceeded its safety cap."""


class TraceFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class CascadeModel:
    kind: str
    epsilon: float = 1.0
    threshold: float = 0.0
    horizon: int | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ParameterError(f"unknown model kind {self.kind!r}")
        if self.kind == "cice" and not self.epsilon > 0:
            raise ParameterError("CICE needs epsilon > 0")
        if self.horizon is not None and self.horizon < 1:
            raise ParameterError("horizon must be >= 1")

    @property
    def voter_horizon(self) -> int:
        return self.horizon if self.horizon is not None else DEFAULT_VOTER_HORIZON

    @property
    def rate(self) -> float:
        """Multiplier on z inside the exponential links (1 for IC)."""
        return self.epsilon if self.kind == "cice" else 1.0

    @property
    def upper_bound(self) -> float:
        """Upper end of the weight domain; voter weights live in [0, 1]."""
        return 1.0 if self.kind == "voter" else math.inf

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "cice":
            out["epsilon"] = self.epsilon
        if self.kind == "logistic":
            out["threshold"] = self.threshold
        if self.horizon is not None:
            out["horizon"] = self.horizon
        return out


def as_model(model) -> CascadeModel:
    return model if isinstance(model, CascadeModel) else CascadeModel(str(model))


# ---------------------------------------------------------------------------
# link functions (vectorised over z)


def link_value(model, z):
    """Inverse link f(z): the infection probability given weighted active sum z."""
    model = as_model(model)
    z = np.asarray(z, dtype=float)
    if model.kind in ("ic", "cice"):
        out = -np.expm1(-model.rate * z)
    elif model.kind == "voter":
        if np.any(z > 1 + 1e-9) or np.any(z < -1e-9):
            raise DomainError("voter link needs z in [0, 1]; incoming weights invalid")
        out = np.clip(z, 0.0, 1.0)
    else:
        out = expit(z - model.threshold)
    return float(out) if out.ndim == 0 else out


def link_derivative(model, z):
    """f'(z)."""
    model = as_model(model)
    z = np.asarray(z, dtype=float)
    if model.kind in ("ic", "cice"):
        out = model.rate * np.exp(-model.rate * z)
    elif model.kind == "voter":
        out = np.ones_like(z)
    else:
        s = expit(z - model.threshold)
        out = s * (1 - s)
    return float(out) if out.ndim == 0 else out


def log_link_terms(model, z):
    """Unclamped ``(log f(z), log(1 - f(z)))``, computed stably."""
    model = as_model(model)
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if model.kind in ("ic", "cice"):
            rz = model.rate * z
            log_f = np.log(-np.expm1(-rz))
            log_1mf = -rz
        elif model.kind == "voter":
            zc = np.clip(z, 0.0, 1.0)
            log_f = np.log(zc)
            log_1mf = np.log1p(-zc)
        else:
            u = z - model.threshold
            log_f = -np.logaddexp(0.0, -u)
            log_1mf = -np.logaddexp(0.0, u)
    return log_f, log_1mf


def link_log_derivatives(model, z):
    """``((log f)'(z), (log(1-f))'(z))``; raises DomainError where f(z) is 0 or 1."""
    d1, d0 = _log_derivs(as_model(model), np.asarray(z, dtype=float))
    if not (np.all(np.isfinite(d1)) and np.all(np.isfinite(d0))):
        raise DomainError("log-derivative undefined: f(z) is at a boundary {0, 1}")
    if np.ndim(d1) == 0:
        return float(d1), float(d0)
    return d1, d0


def _log_derivs(model: CascadeModel, z: np.ndarray):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if model.kind in ("ic", "cice"):
            r = model.rate
            d1 = r / np.expm1(r * z)
            d1 = np.where(z > 0, d1, np.inf)
            d0 = np.full_like(z, -r)
        elif model.kind == "voter":
            d1 = np.where(z > 0, 1.0 / z, np.inf)
            d0 = np.where(z < 1, -1.0 / (1.0 - z), -np.inf)
        else:
            u = z - model.threshold
            d1 = expit(-u)
            d0 = -expit(u)
    return d1, d0


def link_log_second_derivatives(model, z):
    """``((log f)''(z), (log(1-f))''(z))``."""
    model = as_model(model)
    z = np.asarray(z, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if model.kind in ("ic", "cice"):
            r = model.rate
            # -r^2 e^{rz} / (e^{rz} - 1)^2, written to avoid overflow
            h1 = np.where(z > 0, -(r * r) * np.exp(-r * z) / (-np.expm1(-r * z)) ** 2, -np.inf)
            h0 = np.zeros_like(z)
        elif model.kind == "voter":
            h1 = np.where(z > 0, -1.0 / z**2, -np.inf)
            h0 = np.where(z < 1, -1.0 / (1.0 - z) ** 2, -np.inf)
        else:
            s = expit(z - model.threshold)
            h1 = -s * (1 - s)
            h0 = h1.copy()
    if np.ndim(h1) == 0:
        return float(h1), float(h0)
    return h1, h0


# ---------------------------------------------------------------------------
# traces


@dataclass(frozen=True)
class CascadeTrace:
    """One simulated cascade.

    ``steps[t]`` lists the node ids recorded at step ``t``: for IC and
    logistic cascades the contagious (newly infected) set, for CICE the
    newly infected set (cumulative state is their union), for the voter
    model the full blue set.
    """

    model: str
    num_nodes: int
    sources: tuple
    steps: tuple

    def __post_init__(self):
        if not self.sources:
            raise ParameterError("source set must be nonempty")

    def __len__(self):
        return len(self.steps)

    def states(self) -> np.ndarray:
        """Contagious-indicator matrix ``X`` with one row per recorded step."""
        out = np.zeros((len(self.steps), self.num_nodes), dtype=bool)
        for t, ids in enumerate(self.steps):
            out[t, list(ids)] = True
        if self.model == "cice":
            out = np.logical_or.accumulate(out, axis=0)
        return out

    def infection_times(self) -> np.ndarray:
        """Step at which each node first became contagious (``len(self)`` if never)."""
        tau = np.full(self.num_nodes, len(self.steps), dtype=int)
        for t in range(len(self.steps) - 1, -1, -1):
            tau[list(self.steps[t])] = t
        return tau

    def to_json(self) -> str:
        return json.dumps(
            {"model": self.model, "m": self.num_nodes, "sources": list(self.sources),
             "steps": [list(s) for s in self.steps]},
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "CascadeTrace":
        obj = json.loads(line)
        return cls(obj["model"], int(obj["m"]), tuple(obj["sources"]),
                   tuple(tuple(s) for s in obj["steps"]))


def write_traces(traces: Iterable[CascadeTrace], path) -> None:
    Path(path).write_text("".join(t.to_json() + "\n" for t in traces))


def read_traces(path) -> list[CascadeTrace]:
    traces = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            trace = CascadeTrace.from_json(line)
        except (ValueError, KeyError, TypeError) as exc:
            raise TraceFormatError(f"bad trace record ({exc})", lineno) from None
        if trace.model not in MODEL_KINDS:
            raise TraceFormatError(f"unknown model {trace.model!r}", lineno)
        if traces and (trace.model, trace.num_nodes) != (traces[0].model, traces[0].num_nodes):
            raise TraceFormatError("traces mix models or node counts", lineno)
        traces.append(trace)
    return traces


# ---------------------------------------------------------------------------
# simulation


def draw_sources(m: int, p_init: float, seed) -> tuple:
    """Independent Bernoulli(p_init) sources; empty draws are redrawn."""
    if not 0 < p_init <= 1:
        raise ParameterError(f"p_init must lie in (0, 1], got {p_init}")
    rng = np.random.default_rng(seed)
    while True:
        mask = rng.random(m) < p_init
        if mask.any():
            return tuple(int(i) for i in np.flatnonzero(mask))


def _check_weights(graph: Graph, model: CascadeModel):
    if model.kind == "voter" and graph.model != "voter":
        raise DomainError("voter simulation needs voter-normalised weights")
    if model.kind != "voter" and graph.model == "voter":
        raise DomainError(f"{model.kind} simulation cannot use voter-normalised weights")


def simulate(graph: Graph, model, sources: Sequence[int], seed) -> CascadeTrace:
    """Run one cascade from ``sources``; transitions are independent across nodes."""
    model = as_model(model)
    _check_weights(graph, model)
    if not sources:
        raise ParameterError("source set must be nonempty")
    rng = np.random.default_rng(seed)
    m = graph.num_nodes
    theta = graph.matrix
    cap = 10 * m
    x = np.zeros(m, dtype=bool)
    x[list(sources)] = True
    src = tuple(sorted(int(s) for s in sources))
    steps = [src]

    if model.kind == "voter":
        has_parents = graph.in_degrees() > 0
        horizon = model.voter_horizon
        for _ in range(min(horizon, cap)):
            if x.all() or not x.any():
                break
            z = x @ theta
            draws = rng.random(m)
            nxt = np.where(has_parents, draws < link_value(model, z), x)
            x = nxt
            steps.append(tuple(int(i) for i in np.flatnonzero(x)))
        return CascadeTrace("voter", m, src, tuple(steps))

    ever = x.copy()
    remember = model.kind == "cice"
    positive = [w for w in graph.edges.values() if w > 0]
    if remember and positive:
        # at most m waits, each geometric with per-step success >= p_min
        p_min = link_value(model, min(positive))
        cap = 10 * m * math.ceil(1.0 / p_min)
    while True:
        if len(steps) > cap:
            raise SimulationError(f"cascade exceeded the {cap}-step safety cap")
        z = x.astype(float) @ theta
        prob = link_value(model, z)
        draws = rng.random(m)
        new = ~ever & (draws < prob)
        if remember:
            if not new.any():
                # nothing more can happen once no susceptible node has an infected parent
                if not np.any((z > 0) & ~ever):
                    break
                steps.append(())
                continue
            ever |= new
            x = ever.copy()
        else:
            if not new.any():
                break
            ever |= new
            x = new
        steps.append(tuple(int(i) for i in np.flatnonzero(new)))
    return CascadeTrace(model.kind, m, src, tuple(steps))


def derive_seed(master: int, *keys: int) -> int:
    """Counter-based sub-seed: a pure function of ``(master, *keys)``."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def batch_simulate(graph: Graph, model, num_cascades: int, p_init: float, seed: int) -> list[CascadeTrace]:
    """``num_cascades`` independent cascades; cascade ``k`` uses sub-seed ``(seed, k)``."""
    if num_cascades < 1:
        raise ParameterError("num_cascades must be >= 1")
    model = as_model(model)
    traces = []
    for k in range(num_cascades):
        rng = np.random.default_rng(derive_seed(seed, k))
        sources = draw_sources(graph.num_nodes, p_init, rng)
        traces.append(simulate(graph, model, sources, rng))
    return traces


# ---------------------------------------------------------------------------
# measurements


@dataclass(frozen=True)
class MeasurementSet:
    """GLM pairs ``(x_t, y_t)`` for one target node; ``x`` is ``(n, m)`` boolean."""

    node: int
    x: np.ndarray
    y: np.ndarray
    model: str = "ic"

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def num_nodes(self) -> int:
        return int(self.x.shape[1])

    def __len__(self):
        return self.n

    @classmethod
    def empty(cls, node: int, m: int, model: str = "ic") -> "MeasurementSet":
        return cls(node, np.zeros((0, m), dtype=bool), np.zeros(0, dtype=np.int8), model)


def _transition_count(trace: CascadeTrace) -> int:
    # IC and logistic traces have an implicit empty step after the last recorded one
    return len(trace) if trace.model in ("ic", "logistic") else len(trace) - 1


def extract_measurements(trace: CascadeTrace, i: int) -> MeasurementSet:
    """Measurements of node ``i`` over the steps where it is susceptible."""
    if not 0 <= i < trace.num_nodes:
        raise ParameterError(f"node {i} out of range")
    states = trace.states()
    rows, y = _node_rows(trace, i)
    return MeasurementSet(i, states[rows], y, trace.model)


def _node_rows(trace: CascadeTrace, i: int):
    last = _transition_count(trace)
    if trace.model == "voter":
        rows = np.arange(last)
        states = trace.states()
        return rows, states[1:, i].astype(np.int8)
    tau = int(trace.infection_times()[i])
    count = min(tau, last)
    y = np.zeros(count, dtype=np.int8)
    if 0 < tau < len(trace):
        y[-1] = 1
    return np.arange(count), y


def pool_measurements(traces: Sequence[CascadeTrace], i: int, num_nodes: int | None = None) -> MeasurementSet:
    """Concatenate the per-trace measurement sets of node ``i``."""
    if not traces:
        if num_nodes is None:
            raise ParameterError("num_nodes is required to pool zero traces")
        return MeasurementSet.empty(i, num_nodes)
    return measurements_by_node(traces, nodes=[i])[i]


def measurements_by_node(traces: Sequence[CascadeTrace], nodes: Iterable[int] | None = None) -> dict[int, MeasurementSet]:
    """Pool measurements for many nodes at once, sharing the stacked state matrix."""
    if not traces:
        raise ParameterError("no traces to pool")
    kinds = {(t.model, t.num_nodes) for t in traces}
    if len(kinds) != 1:
        raise DomainError("cannot pool traces from different models or graphs")
    model, m = kinds.pop()
    nodes = range(m) if nodes is None else list(nodes)
    all_states = [t.states() for t in traces]
    lengths = np.array([s.shape[0] for s in all_states])
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    stacked = np.concatenate(all_states, axis=0)
    trans = np.array([_transition_count(t) for t in traces])

    if model == "voter":
        out = {}
        starts = offsets
        counts = trans
        rows = _ranges(starts, counts)
        for i in nodes:
            y = stacked[rows + 1, i].astype(np.int8)
            out[i] = MeasurementSet(i, stacked[rows], y, model)
        return out

    taus = np.stack([t.infection_times() for t in traces])  # (num_traces, m)
    out = {}
    for i in nodes:
        tau = taus[:, i]
        counts = np.minimum(tau, trans)
        rows = _ranges(offsets, counts)
        y = np.zeros(rows.shape[0], dtype=np.int8)
        hit = (tau > 0) & (tau < lengths)
        ends = np.cumsum(counts)[hit] - 1
        y[ends] = 1
        out[i] = MeasurementSet(i, stacked[rows], y, model)
    return out


def _ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenation of ``arange(s, s + c)`` for each pair."""
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=int)
    block_start = np.cumsum(counts) - counts
    return np.repeat(starts - block_start, counts) + np.arange(total)
