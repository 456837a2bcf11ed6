"""Empirical checks of the recovery assumptions.

Restricted eigenvalues over the cone ``||x_{S^c}||_1 <= 3 ||x_S||_1``, the
link-function constants that feed the lambda rule, and a Monte Carlo look at
how fast the sample Hessian concentrates around its expectation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize

from .cascades import (
    DomainError,
    MeasurementSet,
    _log_derivs,
    as_model,
    batch_simulate,
    derive_seed,
    link_log_second_derivatives,
    link_value,
    pool_measurements,
)
from .graph import Graph, ParameterError
from .recovery import NegLogLikelihood

CONE_FACTOR = 3.0
CONCENTRATION_HEADER = ("n", "trial", "max_dev", "gamma_upper", "gamma_sampled")


def _as_rows(measurements) -> np.ndarray:
    if isinstance(measurements, MeasurementSet):
        x = measurements.x
    else:
        x = np.asarray(measurements)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DomainError("need at least one measurement row")
    return x.astype(float)


def gram_matrix(measurements) -> np.ndarray:
    """``(1/n) sum_t x_t x_t^T``; the diagonal holds activation frequencies."""
    x = _as_rows(measurements)
    return x.T @ x / x.shape[0]


# ---------------------------------------------------------------------------
# restricted eigenvalues


@dataclass(frozen=True)
class ReEstimate:
    support: tuple[int, ...]
    gamma_upper: float
    gamma_sampled: float
    num_samples: int

    def to_dict(self) -> dict:
        return {
            "support": list(self.support),
            "gamma_upper": self.gamma_upper,
            "gamma_sampled": self.gamma_sampled,
            "num_samples": self.num_samples,
        }


def _in_cone(x: np.ndarray, mask: np.ndarray, slack: float = 1e-12) -> bool:
    return np.abs(x[~mask]).sum() <= CONE_FACTOR * np.abs(x[mask]).sum() + slack


def _rayleigh(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jk,ik->i", x, a, x) / np.einsum("ij,ij->i", x, x)


def _cone_samples(rng: np.random.Generator, m: int, mask: np.ndarray, count: int) -> np.ndarray:
    s, rest = int(mask.sum()), m - int(mask.sum())
    x = np.zeros((count, m))
    on = rng.exponential(size=(count, s)) * rng.choice((-1.0, 1.0), size=(count, s))
    x[:, mask] = on
    if rest:
        # a random power spreads mass between concentrated and flat off-support parts
        power = rng.uniform(1.0, 4.0, size=(count, 1))
        off = rng.exponential(size=(count, rest)) ** power
        off /= off.sum(axis=1, keepdims=True)
        scale = rng.uniform(size=(count, 1)) * CONE_FACTOR * np.abs(on).sum(axis=1, keepdims=True)
        x[:, ~mask] = off * scale * rng.choice((-1.0, 1.0), size=(count, rest))
    return x


def _polish(a: np.ndarray, mask: np.ndarray, start: np.ndarray) -> tuple[float, np.ndarray]:
    """Local descent of the Rayleigh quotient inside the orthant of ``start``.

    Within one orthant the cone is polyhedral: with ``y = sign * x >= 0`` it
    reads ``sum(y_off) <= 3 sum(y_on)``, and ``sum(y) = 1`` fixes the scale.
    """
    sign = np.where(start < 0, -1.0, 1.0)
    b = a * np.outer(sign, sign)
    w = np.where(mask, CONE_FACTOR, -1.0)
    y0 = np.abs(start) / np.abs(start).sum()

    def fun(y):
        q = y @ y
        by = b @ y
        r = y @ by / q
        return r, 2.0 * (by - r * y) / q

    res = minimize(
        fun, y0, jac=True, method="SLSQP", bounds=[(0.0, None)] * len(y0),
        constraints=[
            {"type": "eq", "fun": lambda y: y.sum() - 1.0, "jac": lambda y: np.ones_like(y)},
            {"type": "ineq", "fun": lambda y: w @ y, "jac": lambda y: w},
        ],
        options={"maxiter": 200, "ftol": 1e-12},
    )
    y = np.clip(res.x, 0.0, None)
    x = sign * y
    if not np.any(x) or not _in_cone(x, mask, 1e-9):
        return math.inf, x
    return float(_rayleigh(a, x[None, :])[0]), x


def re_estimate(matrix, support: Sequence[int], num_samples: int = 2000, seed: int = 0,
                polish: int = 64) -> ReEstimate:
    """Restricted-eigenvalue estimate of ``matrix`` on the cone of ``support``.

    ``gamma_upper`` is the smallest eigenvalue of the principal submatrix on
    the support; S-supported vectors lie in the cone, so it bounds the true
    constant from above.  ``gamma_sampled`` minimises the Rayleigh quotient
    over random cone directions and then polishes the best ``polish`` of them,
    plus the bottom eigenvectors shrunk into the cone, with a constrained
    local search.  Every candidate is feasible, so the
    sampled value is never below the true restricted eigenvalue.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DomainError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-12, rtol=0):
        raise DomainError("matrix must be symmetric")
    m = a.shape[0]
    sup = tuple(sorted(set(int(i) for i in support)))
    if not sup:
        raise ParameterError("support must be nonempty")
    if sup[0] < 0 or sup[-1] >= m:
        raise ParameterError(f"support index out of range for a {m}x{m} matrix")
    if num_samples < 0:
        raise ParameterError("num_samples must be >= 0")
    a = (a + a.T) / 2
    mask = np.zeros(m, dtype=bool)
    mask[list(sup)] = True

    vals, vecs = np.linalg.eigh(a[np.ix_(mask, mask)])
    gamma_upper = float(vals[0])
    best_x = np.zeros(m)
    best_x[mask] = vecs[:, 0]
    best = gamma_upper
    # quotients closer than this to the eigenvalue bound are rounding, not improvement
    resolution = 4 * m * np.finfo(float).eps * max(1.0, float(np.abs(a).max()))

    candidates = [best_x]
    if not mask.all():
        # bottom eigenvectors of the full matrix, shrunk off the support until they enter the cone
        for v in np.linalg.eigh(a)[1][:, :3].T:
            on, off = np.abs(v[mask]).sum(), np.abs(v[~mask]).sum()
            if on > 0:
                v = v.copy()
                v[~mask] *= min(1.0, CONE_FACTOR * on / off) if off > 0 else 1.0
                candidates.append(v)
    rng = np.random.default_rng(seed)
    chunk = 4096
    pool_x, pool_q = [], []
    done = 0
    while done < num_samples:
        k = min(chunk, num_samples - done)
        xs = _cone_samples(rng, m, mask, k)
        qs = _rayleigh(a, xs)
        order = np.argsort(qs, kind="stable")[:polish]
        pool_x.append(xs[order])
        pool_q.append(qs[order])
        done += k
    if pool_x:
        xs = np.concatenate(pool_x)
        qs = np.concatenate(pool_q)
        order = np.argsort(qs, kind="stable")[:polish]
        if qs[order[0]] < best - resolution:
            best = float(qs[order[0]])
        candidates.extend(xs[order])
    if not mask.all():
        for start in candidates:
            q, _ = _polish(a, mask, start)
            if q < best - resolution:
                best = q
    gamma_sampled = min(best, gamma_upper)
    return ReEstimate(sup, gamma_upper, float(gamma_sampled), int(num_samples))


# ---------------------------------------------------------------------------
# link constants


class LfConstants(NamedTuple):
    """``alpha_lf = 1 / max |(log f)'|, |(log(1-f))'|`` and the same for second derivatives."""

    alpha_lf: float
    alpha_lf2: float
    max_first: float
    max_second: float
    num_used: int


def lf_constants(model, measurements, theta_star) -> LfConstants:
    """Empirical (LF)/(LF2) constants at the observed arguments ``z_t = x_t . theta``.

    Rows where ``f(z_t)`` is exactly 0 or 1 are excluded, as the assumption
    only constrains the remaining ones.
    """
    model = as_model(model)
    x = _as_rows(measurements)
    theta = np.asarray(theta_star, dtype=float)
    if theta.shape != (x.shape[1],):
        raise ParameterError(f"theta has shape {theta.shape}, expected ({x.shape[1]},)")
    if np.any(theta < 0):
        raise DomainError("theta must be nonnegative")
    z = x @ theta
    f = np.asarray(link_value(model, z), dtype=float).reshape(-1)
    keep = (f > 0) & (f < 1)
    if not keep.any():
        raise DomainError("every observed argument puts f on the boundary {0, 1}")
    z = z[keep]
    d1, d0 = _log_derivs(model, z)
    h1, h0 = link_log_second_derivatives(model, z)
    first = float(max(np.max(np.abs(d1)), np.max(np.abs(d0))))
    second = float(max(np.max(np.abs(h1)), np.max(np.abs(h0))))
    return LfConstants(
        1.0 / first if first > 0 else math.inf,
        1.0 / second if second > 0 else math.inf,
        first, second, int(keep.sum()),
    )


# ---------------------------------------------------------------------------
# Hessian concentration


def sample_measurements(graph: Graph, model, node: int, count: int, seed: int,
                        p_init: float = 0.05, batch: int = 200) -> MeasurementSet:
    """Simulate cascades until ``node`` has at least ``count`` measurements; keep the first ``count``."""
    model = as_model(model)
    xs, ys, got, k = [], [], 0, 0
    while got < count:
        traces = batch_simulate(graph, model, batch, p_init, derive_seed(seed, k))
        ms = pool_measurements(traces, node, graph.num_nodes)
        xs.append(ms.x)
        ys.append(ms.y)
        got += ms.n
        k += 1
        if k > 10_000 and got == 0:
            raise DomainError(f"node {node} never produces measurements")
    x = np.concatenate(xs)[:count]
    y = np.concatenate(ys)[:count]
    return MeasurementSet(node, x, y, model.kind)


@dataclass
class ConcentrationReport:
    node: int
    support: tuple[int, ...]
    expected_hessian: np.ndarray
    gamma_expected: float
    rows: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    def summary(self) -> list[tuple[int, float, float]]:
        """``(n, median max deviation, fraction of trials with gamma >= gamma_expected / 2)``."""
        out = []
        for n in sorted({r[0] for r in self.rows}):
            sel = [r for r in self.rows if r[0] == n]
            dev = float(np.median([r[2] for r in sel]))
            frac = sum(r[4] >= self.gamma_expected / 2 for r in sel) / len(sel)
            out.append((n, dev, frac))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CONCENTRATION_HEADER)
        for n, t, dev, gu, gs in self.rows:
            w.writerow([n, t, f"{dev:.10g}", f"{gu:.10g}", f"{gs:.10g}"])
        return buf.getvalue()


def hessian_concentration(graph: Graph, model, node: int, n_grid: Sequence[int], trials: int,
                          seed: int, p_init: float = 0.05, re_samples: int = 500,
                          expected_factor: int = 10) -> ConcentrationReport:
    """Compare sample Hessians at the true weights with a Monte Carlo estimate of their mean.

    The expectation uses ``expected_factor`` times the largest ``n``.  For
    each ``n`` and trial we record the max-entry deviation and the
    restricted eigenvalues on the node's true support.
    """
    model = as_model(model)
    if not 0 <= node < graph.num_nodes:
        raise ParameterError(f"node {node} out of range [0, {graph.num_nodes})")
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    grid = sorted(set(int(n) for n in n_grid))
    if not grid or grid[0] < 1:
        raise ParameterError("n_grid must contain positive sizes")
    theta = graph.column(node)
    support = tuple(graph.parents(node))
    if not support:
        raise ParameterError(f"node {node} has no parents")

    big = sample_measurements(graph, model, node, expected_factor * grid[-1], derive_seed(seed, 0), p_init)
    expected = NegLogLikelihood(big, model).hessian(theta)
    gamma_expected = re_estimate(expected, support, re_samples, derive_seed(seed, 1)).gamma_sampled

    report = ConcentrationReport(node, support, expected, gamma_expected)
    for gi, n in enumerate(grid):
        for t in range(trials):
            ms = sample_measurements(graph, model, node, n, derive_seed(seed, 2, gi, t), p_init)
            h = NegLogLikelihood(ms, model).hessian(theta)
            dev = float(np.max(np.abs(h - expected)))
            re = re_estimate(h, support, re_samples, derive_seed(seed, 3, gi, t))
            report.rows.append((n, t, dev, re.gamma_upper, re.gamma_sampled))
    return report
