"""Metrics, lambda sweeps and the experiment harness behind the figures.

A run is a full factorial over seeds x p_init x n x estimator.  For each
(seed, p_init) cell the harness samples fresh edge weights on a fixed
topology, simulates ``max(n_list)`` cascades once and evaluates every ``n``
on a prefix of them, so larger ``n`` always extends the smaller runs.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cascades import CascadeModel, as_model, batch_simulate, derive_seed, measurements_by_node
from .graph import (
    DEFAULT_KRONECKER_INITIATOR,
    Graph,
    GraphTopology,
    ParameterError,
    add_weak_edges,
    assign_weights,
    generate_barabasi_albert,
    generate_holme_kim,
    generate_kronecker,
    generate_watts_strogatz,
    k_for_edge_target,
)
from .recovery import ESTIMATORS, LambdaRule, SolverConfig, estimate_alpha, infer_graph

log = logging.getLogger(__name__)

RESULTS_HEADER = ("graph", "estimator", "n_cascades", "n_measurements_total", "seed",
                  "precision", "recall", "f1", "l2_error", "wall_time_ms")
PLOT_KINDS = ("f1_vs_n", "l2_vs_n", "pr_curve", "time_vs_n", "f1_vs_pinit")
GENERATORS = ("ba", "ws", "hk", "kronecker")


# ---------------------------------------------------------------------------
# metrics


def precision_recall_f1(estimated, true) -> tuple[float, float, float]:
    est, tru = set(estimated), set(true)
    hit = len(est & tru)
    if est:
        precision = hit / len(est)
    else:
        # nothing returned: perfect only if there was nothing to find
        precision = 1.0 if not tru else 0.0
    recall = hit / len(tru) if tru else 1.0
    if not est and not tru:
        return 1.0, 1.0, 1.0
    denom = precision + recall
    f1 = 2 * precision * recall / denom if denom > 0 else 0.0
    return precision, recall, f1


def l2_error(theta_hat, theta_star) -> float:
    """Frobenius norm of ``theta_hat - theta_star``."""
    a = np.asarray(theta_hat, dtype=float)
    b = np.asarray(theta_star, dtype=float)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def column_l2_errors(theta_hat, theta_star) -> np.ndarray:
    a = np.asarray(theta_hat, dtype=float)
    b = np.asarray(theta_star, dtype=float)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.linalg.norm(a - b, axis=0)


def _restrict(edges, nodes) -> set:
    if nodes is None:
        return set(edges)
    keep = set(nodes)
    return {e for e in edges if e[1] in keep}


def pr_curve(traces, model, truth: Graph, lambdas: Sequence[float], eta: float = 0.1,
             nodes: Sequence[int] | None = None, config: SolverConfig = SolverConfig(),
             measurements=None) -> list[tuple[float, float, float]]:
    """Precision and recall of sparse-MLE for each fixed ``lam``; rows sorted by ``lam`` descending.

    ``nodes`` restricts both the estimate and the truth to edges into those nodes.
    """
    grid = sorted({float(v) for v in lambdas}, reverse=True)
    if not grid:
        raise ParameterError("lambda grid is empty")
    if any(v < 0 for v in grid):
        raise ParameterError("lambda values must be >= 0")
    model = as_model(model)
    if measurements is None:
        measurements = measurements_by_node(traces, nodes)
    true_edges = _restrict(truth.edges, nodes)
    rows, failed = [], []
    for lam in grid:
        est = infer_graph(traces, model, replace(config, lam=lam), eta, "sparse_mle",
                          nodes=nodes, measurements=measurements, num_nodes=truth.num_nodes)
        failed.extend((lam, i, why) for i, why in est.skipped.items() if why != "no measurements")
        p, r, _ = precision_recall_f1(_restrict(est.edges(), nodes), true_edges)
        rows.append((lam, p, r))
    if failed:
        log.warning("pr_curve: %d node solves failed: %s", len(failed), failed[:5])
    return rows


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class GraphSpec:
    """Topology generator plus weight ranges.

    ``k`` is the attachment count (BA/HK) or neighbour count (WS); leave it
    unset and give ``edges`` to derive it from a directed edge target.
    """

    name: str
    kind: str
    nodes: int
    k: int | None = None
    edges: int | None = None
    beta: float = 0.1
    p_triad: float = 0.5
    initiator: tuple = DEFAULT_KRONECKER_INITIATOR
    weight_low: float = 0.2
    weight_high: float = 0.7
    weak_prob: float = 0.0
    weak_low: float = 0.0
    weak_high: float = 0.1

    def __post_init__(self):
        if self.kind not in GENERATORS:
            raise ParameterError(f"unknown generator {self.kind!r}")
        if self.nodes < 2:
            raise ParameterError("a graph needs at least 2 nodes")
        if self.kind == "kronecker":
            if self.nodes & (self.nodes - 1):
                raise ParameterError("kronecker graphs need a power-of-two node count")
            if self.edges is None:
                raise ParameterError("kronecker graphs need an edge target")
        elif self.k is None and self.edges is None:
            raise ParameterError(f"{self.kind} graphs need k or an edge target")

    def attachment(self) -> int:
        if self.k is not None:
            return self.k
        return k_for_edge_target(self.kind, self.nodes, self.edges)

    def topology(self, seed: int) -> GraphTopology:
        if self.kind == "ba":
            return generate_barabasi_albert(self.nodes, self.attachment(), seed)
        if self.kind == "ws":
            return generate_watts_strogatz(self.nodes, self.attachment(), self.beta, seed)
        if self.kind == "hk":
            return generate_holme_kim(self.nodes, self.attachment(), self.p_triad, seed)
        power = self.nodes.bit_length() - 1
        return generate_kronecker(self.initiator, power, self.edges, seed)

    def weighted(self, topology: GraphTopology, model: CascadeModel, seed: int) -> Graph:
        g = assign_weights(topology, model, self.weight_low, self.weight_high, derive_seed(seed, 0))
        if self.weak_prob > 0:
            g = add_weak_edges(g, self.weak_prob, self.weak_low, self.weak_high, derive_seed(seed, 1))
        return g


@dataclass(frozen=True)
class ExperimentConfig:
    graph: GraphSpec
    model: CascadeModel = CascadeModel("ic")
    n_list: tuple[int, ...] = (100, 500, 1000, 2000, 5000)
    p_init: tuple[float, ...] = (0.05,)
    estimators: tuple[str, ...] = ("sparse_mle", "mle", "greedy", "lasso")
    eta: float = 0.1
    lambda_rule: str = "theorem"
    lam: float = 0.0
    alpha: float | None = None
    delta: float = 0.0
    lambda_scale: float = 0.01
    lambda_grid: tuple[float, ...] = ()
    seeds: int = 1
    master_seed: int = 0
    solver: SolverConfig = SolverConfig(tolerance=1e-6)
    timing: bool = False
    max_parents: int | None = None
    plots: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.n_list:
            raise ParameterError("n_list must be nonempty")
        if any(int(n) < 1 for n in self.n_list):
            raise ParameterError("every n in n_list must be >= 1")
        if not self.p_init:
            raise ParameterError("p_init must be nonempty")
        if any(not 0 < p <= 1 for p in self.p_init):
            raise ParameterError("p_init values must lie in (0, 1]")
        if self.seeds < 1:
            raise ParameterError("seeds must be >= 1")
        if not self.estimators:
            raise ParameterError("estimators must be nonempty")
        for est in self.estimators:
            if est not in ESTIMATORS:
                raise ParameterError(f"unknown estimator {est!r}")
        if self.lambda_rule not in ("theorem", "fixed", "sweep"):
            raise ParameterError(f"unknown lambda rule {self.lambda_rule!r}")
        if self.lambda_rule == "sweep" and not self.lambda_grid:
            raise ParameterError("the sweep rule needs a lambda grid")
        for kind in self.plots:
            if kind not in PLOT_KINDS:
                raise ParameterError(f"unknown plot kind {kind!r}")

    def lambda_rules(self) -> list[tuple[LambdaRule, float | None]]:
        """``(rule, label)`` pairs; the label is the swept value, else None."""
        if self.lambda_rule == "fixed":
            return [(LambdaRule("fixed", self.lam), None)]
        if self.lambda_rule == "sweep":
            return [(LambdaRule("fixed", v), v) for v in sorted(self.lambda_grid, reverse=True)]
        alpha = self.alpha
        if alpha is None:
            alpha = estimate_alpha((self.graph.weight_low, self.graph.weight_high), self.model)
        return [(LambdaRule("theorem", alpha=alpha, delta=self.delta, scale=self.lambda_scale), None)]


@dataclass
class MetricRow:
    graph: str
    estimator: str
    n_cascades: int
    n_measurements_total: int
    seed: int
    precision: float
    recall: float
    f1: float
    l2_error: float
    wall_time: float | None = None
    p_init: float = 0.05
    lam: float | None = None
    column_errors: np.ndarray | None = field(default=None, repr=False)
    error: str = ""

    def csv_fields(self) -> list[str]:
        ms = "" if self.wall_time is None else f"{self.wall_time * 1000:.3f}"
        return [self.graph, self.estimator, str(self.n_cascades), str(self.n_measurements_total),
                str(self.seed), _fmt(self.precision), _fmt(self.recall), _fmt(self.f1),
                _fmt(self.l2_error), ms]


def _fmt(v: float) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.10g}"


def rows_to_csv(rows: Sequence[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# running


def build_topology(config: ExperimentConfig) -> GraphTopology:
    return config.graph.topology(derive_seed(config.master_seed, 0))


def cell_graph(config: ExperimentConfig, topology: GraphTopology, seed_index: int) -> Graph:
    """Edge weights for one seed; every p_init shares them."""
    return config.graph.weighted(topology, config.model, derive_seed(config.master_seed, 1, seed_index))


def _label(estimator: str, lam: float | None) -> str:
    return estimator if lam is None else f"{estimator}@{lam:g}"


def _run_cell(config: ExperimentConfig, topology: GraphTopology, seed_index: int, pi: int) -> list[MetricRow]:
    graph = cell_graph(config, topology, seed_index)
    p_init = config.p_init[pi]
    theta_star = graph.matrix
    n_max = max(config.n_list)
    traces = batch_simulate(graph, config.model, n_max, p_init,
                            derive_seed(config.master_seed, 2, seed_index, pi))
    rows = []
    for n in sorted(set(config.n_list)):
        prefix = traces[:n]
        ms = measurements_by_node(prefix)
        total = sum(s.n for s in ms.values())
        for est in config.estimators:
            rules = config.lambda_rules() if est in ("sparse_mle", "lasso") else [(None, None)]
            for rule, lam in rules:
                label = _label(est, lam)
                start = time.perf_counter()
                try:
                    g = infer_graph(prefix, config.model, config.solver, config.eta, est, rule,
                                    num_nodes=graph.num_nodes, max_parents=config.max_parents,
                                    measurements=ms)
                except Exception as exc:  # noqa: BLE001 - a failed cell is recorded, not fatal
                    log.warning("cell %s n=%d seed=%d failed: %s", label, n, seed_index, exc)
                    nan = float("nan")
                    rows.append(MetricRow(config.graph.name, label, n, total, seed_index, nan, nan, nan,
                                          nan, None, p_init, lam, error=str(exc)))
                    continue
                elapsed = time.perf_counter() - start
                p, r, f1 = precision_recall_f1(g.edges(), graph.edge_set())
                rows.append(MetricRow(
                    config.graph.name, label, n, total, seed_index, p, r, f1,
                    l2_error(g.theta_hat, theta_star), elapsed if config.timing else None, p_init, lam,
                    column_l2_errors(g.theta_hat, theta_star),
                ))
    return rows


def _cell_worker(args):
    return _run_cell(*args)


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1) -> list[MetricRow]:
    """Run the factorial; optionally write ``results.csv`` and the configured plots to ``out_dir``.

    Rows come back ordered by (seed, p_init, n, estimator) regardless of ``jobs``.
    """
    topology = build_topology(config)
    cells = [(config, topology, s, pi) for s in range(config.seeds) for pi in range(len(config.p_init))]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(cells))) as pool:
            chunks = list(pool.map(_cell_worker, cells))
    else:
        chunks = [_run_cell(*c) for c in cells]
    rows = [r for chunk in chunks for r in chunk]
    if out_dir is not None:
        write_bundle(rows, config, out_dir)
    return rows


def write_bundle(rows: Sequence[MetricRow], config: ExperimentConfig, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = out / "results.csv"
    results.write_text(rows_to_csv(rows))
    written = [results]
    for kind in config.plots:
        written.extend(emit_plot(rows, kind, out))
    return written


def default_jobs() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# plots


def _quartiles(values) -> tuple[float, float, float]:
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return math.nan, math.nan, math.nan
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return float(med), float(q1), float(q3)


_AXES = {
    # kind: (x field, y field, x label, y label, log x, log y)
    "f1_vs_n": ("n_cascades", "f1", "number of cascades n", "F1", True, True),
    "l2_vs_n": ("n_cascades", "l2_error", "number of cascades n", "l2 error", True, False),
    "time_vs_n": ("n_cascades", "wall_time_ms", "number of cascades n", "wall time (ms)", False, False),
    "f1_vs_pinit": ("p_init", "f1", "p_init", "F1", False, False),
}


def plot_series(rows: Sequence[MetricRow], kind: str) -> dict[tuple[str, str], list[tuple]]:
    """Group rows into plotted points keyed by (graph, estimator).

    Each point is ``(x, median, q1, q3)``; for ``pr_curve`` it is
    ``(recall, precision, lam)`` medians per lambda, sorted by lambda descending.
    """
    if kind not in PLOT_KINDS:
        raise ParameterError(f"unknown plot kind {kind!r}")
    groups: dict[tuple[str, str], list[MetricRow]] = {}
    for r in rows:
        if kind == "pr_curve":
            if r.lam is None:
                continue
            key = (r.graph, r.estimator.split("@")[0])
        else:
            key = (r.graph, r.estimator)
        groups.setdefault(key, []).append(r)
    out = {}
    for key in sorted(groups):
        members = groups[key]
        if kind == "pr_curve":
            n_top = max(r.n_cascades for r in members)
            by_lam: dict[float, list[MetricRow]] = {}
            for r in members:
                if r.n_cascades == n_top:
                    by_lam.setdefault(r.lam, []).append(r)
            pts = []
            for lam in sorted(by_lam, reverse=True):
                rec = _quartiles([r.recall for r in by_lam[lam]])[0]
                prec = _quartiles([r.precision for r in by_lam[lam]])[0]
                pts.append((rec, prec, lam))
        else:
            xf, yf = _AXES[kind][:2]
            if kind == "f1_vs_pinit":
                # one curve at the largest n
                n_top = max(r.n_cascades for r in members)
                members = [r for r in members if r.n_cascades == n_top]
            by_x: dict[float, list[float]] = {}
            for r in members:
                y = r.wall_time * 1000 if yf == "wall_time_ms" and r.wall_time is not None else getattr(r, yf, None)
                if yf == "wall_time_ms" and r.wall_time is None:
                    continue
                by_x.setdefault(float(getattr(r, xf)), []).append(y)
            pts = [(x, *_quartiles(ys)) for x, ys in sorted(by_x.items())]
        if pts:
            out[key] = pts
    return out


def emit_plot(rows: Sequence[MetricRow], kind: str, out_dir) -> list[Path]:
    """Write ``<kind>__<graph>__<estimator>.svg`` and ``.csv`` for every series."""
    series = plot_series(rows, kind)
    if not series:
        raise ParameterError(f"no data to plot for {kind!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for (graph, est), pts in series.items():
        stem = f"{kind}__{_safe(graph)}__{_safe(est)}"
        csv_path = out / f"{stem}.csv"
        svg_path = out / f"{stem}.svg"
        csv_path.write_text(_series_csv(kind, pts))
        svg_path.write_text(render_svg(kind, pts, f"{graph} / {est}"))
        written += [svg_path, csv_path]
    return written


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.@" else "_" for c in name)


def _series_csv(kind: str, pts) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if kind == "pr_curve":
        w.writerow(("lambda", "recall", "precision"))
        for rec, prec, lam in pts:
            w.writerow((_fmt(lam), _fmt(rec), _fmt(prec)))
    else:
        xf, yf = _AXES[kind][:2]
        w.writerow((xf, f"{yf}_median", f"{yf}_q1", f"{yf}_q3"))
        for x, med, q1, q3 in pts:
            w.writerow((_fmt(x), _fmt(med), _fmt(q1), _fmt(q3)))
    return buf.getvalue()


W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 64, 16, 28, 48


class _Axis:
    def __init__(self, lo: float, hi: float, log_scale: bool, start: float, end: float):
        self.log = log_scale and lo > 0
        if self.log:
            lo, hi = math.log10(lo), math.log10(hi)
        if hi - lo < 1e-12:
            pad = abs(lo) * 0.1 if lo else 1.0
            lo, hi = lo - pad, hi + pad
        self.lo, self.hi, self.start, self.end = lo, hi, start, end

    def __call__(self, v: float) -> float:
        u = math.log10(v) if self.log else v
        return self.start + (u - self.lo) / (self.hi - self.lo) * (self.end - self.start)

    def ticks(self) -> list[float]:
        if self.log:
            out = []
            for e in range(math.floor(self.lo), math.ceil(self.hi) + 1):
                for mult in (1, 2, 5):
                    v = mult * 10.0**e
                    if self.lo - 1e-9 <= math.log10(v) <= self.hi + 1e-9:
                        out.append(v)
            return out
        span = self.hi - self.lo
        step = 10 ** math.floor(math.log10(span / 4))
        for mult in (1, 2, 5, 10):
            if span / (step * mult) <= 6:
                step *= mult
                break
        first = math.ceil(self.lo / step) * step
        return [first + i * step for i in range(int((self.hi - first) / step + 1e-9) + 1)]


def _num(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:g}"


def render_svg(kind: str, pts, title: str) -> str:
    """Deterministic standalone SVG: a median line with markers and an IQR band."""
    if not pts:
        raise ParameterError("nothing to plot")
    if kind == "pr_curve":
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        lows = highs = None
        xlabel, ylabel, logx, logy = "recall", "precision", False, False
    else:
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        lows = [p[2] for p in pts]
        highs = [p[3] for p in pts]
        _, _, xlabel, ylabel, logx, logy = _AXES[kind]
    finite = [(x, y) for x, y in zip(xs, ys) if not (math.isnan(x) or math.isnan(y))]
    if logy and any(y <= 0 for _, y in finite):
        logy = False
    yvals = [y for _, y in finite] + [v for v in (lows or []) + (highs or []) if not math.isnan(v)]
    if not finite:
        yvals = [0.0, 1.0]
        finite_x = [0.0, 1.0]
    else:
        finite_x = [x for x, _ in finite]
    ax = _Axis(min(finite_x), max(finite_x), logx, LEFT, W - RIGHT)
    ay = _Axis(min(yvals), max(yvals), logy, H - BOTTOM, TOP)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.2f}" y="18" text-anchor="middle" font-size="13" font-family="sans-serif">{_esc(title)}</text>',
        f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
    ]
    for t in ax.ticks():
        px = ax(t)
        parts.append(f'<line x1="{_num(px)}" y1="{H - BOTTOM}" x2="{_num(px)}" y2="{H - BOTTOM + 4}" stroke="black"/>')
        parts.append(f'<text x="{_num(px)}" y="{H - BOTTOM + 16}" text-anchor="middle" font-size="10" '
                     f'font-family="sans-serif">{_tick_label(t)}</text>')
    for t in ay.ticks():
        py = ay(t)
        parts.append(f'<line x1="{LEFT - 4}" y1="{_num(py)}" x2="{LEFT}" y2="{_num(py)}" stroke="black"/>')
        parts.append(f'<text x="{LEFT - 6}" y="{_num(py + 3)}" text-anchor="end" font-size="10" '
                     f'font-family="sans-serif">{_tick_label(t)}</text>')
    parts.append(f'<text x="{(LEFT + W - RIGHT) / 2:.2f}" y="{H - 10}" text-anchor="middle" font-size="11" '
                 f'font-family="sans-serif">{_esc(xlabel)}{" (log)" if ax.log else ""}</text>')
    parts.append(f'<text x="14" y="{(TOP + H - BOTTOM) / 2:.2f}" text-anchor="middle" font-size="11" '
                 f'font-family="sans-serif" transform="rotate(-90 14 {(TOP + H - BOTTOM) / 2:.2f})">'
                 f'{_esc(ylabel)}{" (log)" if ay.log else ""}</text>')

    if lows is not None:
        band = [(x, lo, hi) for x, lo, hi in zip(xs, lows, highs)
                if not (math.isnan(lo) or math.isnan(hi)) and (not ay.log or lo > 0)]
        if len(band) > 1:
            upper = " ".join(f"{_num(ax(x))},{_num(ay(hi))}" for x, _, hi in band)
            lower = " ".join(f"{_num(ax(x))},{_num(ay(lo))}" for x, lo, _ in reversed(band))
            parts.append(f'<polygon points="{upper} {lower}" fill="#4477aa" fill-opacity="0.2" stroke="none"/>')
    line = " ".join(f"{_num(ax(x))},{_num(ay(y))}" for x, y in finite)
    if len(finite) > 1:
        parts.append(f'<polyline points="{line}" fill="none" stroke="#4477aa" stroke-width="1.5"/>')
    for x, y in finite:
        parts.append(f'<circle cx="{_num(ax(x))}" cy="{_num(ay(y))}" r="3" fill="#4477aa"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
