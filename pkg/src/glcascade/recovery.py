"""Per-node l1-regularised maximum likelihood and benchmark estimators.

Every estimator here works on a single :class:`MeasurementSet`; graphs are
recovered node by node in :func:`infer_graph`.  Weights are constrained to
the model domain (``theta >= 0``, and ``theta <= 1`` for the voter model), so
the l1 penalty is the linear term ``lam * sum(theta)`` and its proximal
operator is a shifted projection.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cascades import (
    CascadeModel,
    CascadeTrace,
    MeasurementSet,
    _log_derivs,
    as_model,
    link_derivative,
    link_log_second_derivatives,
    link_value,
    log_link_terms,
    measurements_by_node,
)
from .graph import Graph, ParameterError

log = logging.getLogger(__name__)

ESTIMATORS = ("sparse_mle", "mle", "greedy", "lasso")


class EmptyMeasurementsError(ValueError):
    """No measurements for a node; callers skip it."""


class NumericalError(ArithmeticError):
    """Non-finite objective or a collapsed line search."""


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 0.0
    max_iterations: int = 5000
    tolerance: float = 1e-8
    shrink: float = 0.5
    initial_step: float = 1.0
    eps_clamp: float = 1e-9

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError("lam must be nonnegative")
        if self.max_iterations < 1:
            raise ParameterError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ParameterError("tolerance must be positive")
        if not 0 < self.shrink < 1:
            raise ParameterError("shrink must lie in (0, 1)")
        if not 0 < self.eps_clamp <= 1e-3:
            raise ParameterError("eps_clamp must lie in (0, 1e-3]")


@dataclass
class InferenceResult:
    node: int
    theta_hat: np.ndarray
    iterations: int
    objective: float
    converged: bool
    n: int
    lam: float = 0.0
    estimator: str = "sparse_mle"
    history: list = field(default_factory=list, repr=False)

    def support(self, eta: float = 0.0) -> set[int]:
        return threshold_support(self.theta_hat, eta)

    def sidecar(self) -> dict:
        return {"node": self.node, "n": self.n, "lambda": self.lam, "iterations": self.iterations,
                "converged": bool(self.converged), "objective": self.objective}


# ---------------------------------------------------------------------------
# losses


class NegLogLikelihood:
    """Clamped negative log-likelihood ``-(1/n) sum_t [y log f + (1-y) log(1-f)]``.

    The probability of each observed outcome is floored at ``eps`` before the
    log; clipped rows contribute a constant and zero gradient.  For the exponential links (IC,
    CICE) ``-log(1-f)`` is linear in ``z``, so the negative rows collapse to a
    single column sum whenever no clipping can occur.
    """

    def __init__(self, measurements: MeasurementSet, model, eps_clamp: float = 1e-9):
        if measurements.n == 0:
            raise EmptyMeasurementsError(f"node {measurements.node} has no measurements")
        self.model = as_model(model)
        self.n = measurements.n
        self.m = measurements.num_nodes
        self.eps = eps_clamp
        self.log_eps = math.log(eps_clamp)
        x = measurements.x.astype(float)
        y = measurements.y.astype(bool)
        self.x = x
        self.y = y.astype(float)
        self._linear_neg = self.model.kind in ("ic", "cice")
        if self._linear_neg:
            self.x_pos = x[y]
            self.neg_colsum = x[~y].sum(axis=0)
            self.neg_zmax_factor = 1.0 if (~y).any() else 0.0

    def _fast_ok(self, theta) -> bool:
        # z <= ||theta||_1 on binary rows, so no negative row can be clipped below this
        return self._linear_neg and self.model.rate * theta.clip(min=0).sum() * self.neg_zmax_factor < -self.log_eps and theta.min() >= 0

    def _clamped(self, z, y):
        """Log of the probability each row's outcome had, floored at ``log eps``.

        Only the term a row actually uses is clamped: an observed infection
        at ``f = 1`` is not a boundary case, an observed non-infection is.
        """
        log_f, log_1mf = log_link_terms(self.model, z)
        with np.errstate(invalid="ignore"):
            term = np.where(y > 0, log_f, log_1mf)
        clipped = ~(term >= self.log_eps)
        return np.where(clipped, self.log_eps, term), clipped

    def _row_derivs(self, z, y, clipped):
        d1, d0 = _log_derivs(self.model, z)
        with np.errstate(invalid="ignore"):
            d = np.where(y > 0, d1, d0)
        return np.where(clipped, 0.0, d)

    def value(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if self._fast_ok(theta):
            z = self.x_pos @ theta
            return float((self.model.rate * (self.neg_colsum @ theta) + self._pos_row_loss(z).sum()) / self.n)
        z = self.x @ theta
        term, _ = self._clamped(z, self.y)
        return float(-term.sum() / self.n)

    def gradient(self, theta) -> np.ndarray:
        return self.value_and_gradient(theta)[1]

    def value_and_gradient(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self._fast_ok(theta):
            z = self.x_pos @ theta
            ones = np.ones_like(z)
            term, clipped = self._clamped(z, ones)
            d = self._row_derivs(z, ones, clipped)
            rate = self.model.rate
            val = (rate * (self.neg_colsum @ theta) - term.sum()) / self.n
            grad = (rate * self.neg_colsum - self.x_pos.T @ d) / self.n
            return float(val), grad
        z = self.x @ theta
        term, clipped = self._clamped(z, self.y)
        d = self._row_derivs(z, self.y, clipped)
        val = -term.sum() / self.n
        return float(val), -(self.x.T @ d) / self.n

    def row_weights(self, theta) -> np.ndarray:
        """Per-row curvature ``-[y (log f)'' + (1-y) (log(1-f))'']`` (0 on clipped rows)."""
        z = self.x @ np.asarray(theta, dtype=float)
        _, clipped = self._clamped(z, self.y)
        h1, h0 = link_log_second_derivatives(self.model, z)
        h1, h0 = np.atleast_1d(h1), np.atleast_1d(h0)
        with np.errstate(invalid="ignore"):
            w = -np.where(self.y > 0, h1, h0)
        return np.where(clipped, 0.0, w)

    def hessian(self, theta) -> np.ndarray:
        w = self.row_weights(theta)
        return (self.x.T * w) @ self.x / self.n

    def _row_loss(self, z, y):
        return -self._clamped(z, y)[0]

    def _nonzeros(self, x):
        # (row, col) of every active entry, grouped by column
        cols, rows = np.nonzero(x.T)
        return rows, cols

    def _pos_row_loss(self, z):
        log_f, _ = log_link_terms(self.model, z)
        return -np.maximum(np.nan_to_num(log_f, nan=self.log_eps, neginf=self.log_eps), self.log_eps)

    def column_trials(self, z_base: np.ndarray):
        """Return ``w -> objective`` after ``z <- z_base + w[j] * x[:, j]``, for every column ``j``.

        Only rows where column ``j`` is active change, so one evaluation
        costs O(nonzeros) rather than O(n * m).
        """
        if self._linear_neg:
            pos = self.y > 0
            zpos, neg_z = z_base[pos], z_base[~pos]
            neg_zmax = neg_z.max() if neg_z.size else 0.0
            if not hasattr(self, "_nz_pos"):
                self._nz_pos = self._nonzeros(self.x_pos)
            rows, cols = self._nz_pos
            zr = zpos[rows]
            base_rows = self._pos_row_loss(zr)
            base_total = self.model.rate * neg_z.sum() + self._pos_row_loss(zpos).sum()
            generic = self._generic_trial

            def trial(w):
                if self.model.rate * (neg_zmax + w.max(initial=0.0)) >= -self.log_eps:
                    return generic(z_base, w)
                delta = np.bincount(cols, weights=self._pos_row_loss(zr + w[cols]) - base_rows, minlength=self.m)
                return (base_total + self.model.rate * w * self.neg_colsum + delta) / self.n

            return trial
        return lambda w: self._generic_trial(z_base, w)

    def _generic_trial(self, z_base, w):
        if not hasattr(self, "_nz_all"):
            self._nz_all = self._nonzeros(self.x)
        rows, cols = self._nz_all
        yr = self.y[rows]
        delta = np.bincount(cols, weights=self._row_loss(z_base[rows] + w[cols], yr)
                            - self._row_loss(z_base[rows], yr), minlength=self.m)
        return (self._row_loss(z_base, self.y).sum() + delta) / self.n


class SquaredLoss:
    """``(1/n) sum_t (f(z_t) - y_t)^2``; the LASSO benchmark's data term."""

    def __init__(self, measurements: MeasurementSet, model):
        if measurements.n == 0:
            raise EmptyMeasurementsError(f"node {measurements.node} has no measurements")
        self.model = as_model(model)
        self.n = measurements.n
        self.m = measurements.num_nodes
        self.x = measurements.x.astype(float)
        self.y = measurements.y.astype(float)

    def _f(self, z):
        if self.model.kind == "voter":
            return z  # identity link, unclipped: plain least squares
        return link_value(self.model, z)

    def value(self, theta) -> float:
        r = self._f(self.x @ theta) - self.y
        return float(r @ r / self.n)

    def value_and_gradient(self, theta):
        z = self.x @ theta
        r = self._f(z) - self.y
        fp = link_derivative(self.model, z)
        return float(r @ r / self.n), 2.0 * (self.x.T @ (r * fp)) / self.n

    def gradient(self, theta):
        return self.value_and_gradient(theta)[1]


def neg_log_likelihood(theta, measurements: MeasurementSet, model, eps_clamp: float = 1e-9) -> float:
    return NegLogLikelihood(measurements, model, eps_clamp).value(theta)


def gradient(theta, measurements: MeasurementSet, model, eps_clamp: float = 1e-9) -> np.ndarray:
    return NegLogLikelihood(measurements, model, eps_clamp).gradient(theta)


def hessian(theta, measurements: MeasurementSet, model, eps_clamp: float = 1e-9) -> np.ndarray:
    return NegLogLikelihood(measurements, model, eps_clamp).hessian(theta)


# ---------------------------------------------------------------------------
# regularisation and thresholding


def select_lambda(m: int, n: int, alpha: float, delta: float = 0.0) -> float:
    """Regularisation weight ``2 sqrt(log m / (alpha n^(1-delta)))``."""
    if m < 2 or n < 1:
        raise ParameterError("need m >= 2 and n >= 1")
    if not 0 < alpha < 1 and not (alpha == 1 and delta == 0):
        raise ParameterError("alpha must lie in (0, 1)")
    if not 0 <= delta < 1:
        raise ParameterError("delta must lie in [0, 1)")
    return 2.0 * math.sqrt(math.log(m) / (alpha * n ** (1.0 - delta)))


def estimate_alpha(source, model=None) -> float:
    """Regularity constant from weights: IC min p; voter min(min w, 1 - max w).

    ``source`` is a :class:`Graph` or a ``(low, high)`` pair of bounds (on
    ``p`` for IC-style models, on raw weights for the voter model).
    """
    if isinstance(source, Graph):
        kind = as_model(model or source.model).kind
        w = np.array(list(source.edges.values()))
        if w.size == 0:
            raise ParameterError("empty graph has no regularity constant")
        lo, hi = w.min(), w.max()
        if kind != "voter":
            lo, hi = -math.expm1(-lo), -math.expm1(-hi)
    else:
        kind = as_model(model or "ic").kind
        lo, hi = source
    if kind == "voter":
        return float(min(lo, 1.0 - hi))
    return float(lo)


def threshold_support(theta_hat, eta: float) -> set[int]:
    """Indices with ``theta_hat[j] > eta``."""
    if eta < 0:
        raise ParameterError("eta must be nonnegative")
    return {int(j) for j in np.flatnonzero(np.asarray(theta_hat) > eta)}


# ---------------------------------------------------------------------------
# proximal gradient


def _start_point(model: CascadeModel, m: int) -> np.ndarray:
    if model.kind == "voter":
        return np.full(m, 1.0 / (m + 1))
    if model.kind == "logistic":
        return np.zeros(m)
    # interior start keeps every positive row off the clamp where its gradient vanishes
    return np.full(m, 0.1)


def proximal_gradient(loss, lam: float, upper: float, x0: np.ndarray, config: SolverConfig):
    """Accelerated projected/proximal gradient with backtracking and restart.

    Minimises ``loss(theta) + lam * sum(theta)`` over ``0 <= theta <= upper``.
    Returns ``(theta, iterations, objective, converged, history)`` where
    ``history`` holds the objective of every accepted iterate.
    """
    tol = config.tolerance
    x = np.clip(x0, 0.0, upper)
    fx = loss.value(x)
    Fx = fx + lam * x.sum()
    if not math.isfinite(Fx):
        raise NumericalError(f"non-finite objective {Fx} at the starting point")
    history = [Fx]
    y, t = x.copy(), 1.0
    step = config.initial_step
    converged = False
    it = 0
    while it < config.max_iterations:
        it += 1
        fy, gy = loss.value_and_gradient(y)
        gy = gy + lam
        while True:
            z = np.clip(y - step * gy, 0.0, upper)
            d = z - y
            fz = loss.value(z)
            if fz <= fy + gy @ d - lam * d.sum() + (d @ d) / (2 * step) + 1e-15 * abs(fy):
                break
            step *= config.shrink
            if step < 1e-30:
                raise NumericalError("line search collapsed")
        if not math.isfinite(fz):
            raise NumericalError(f"non-finite objective at iteration {it}")
        Fz = fz + lam * z.sum()
        if Fz > Fx:
            if t > 1.0:
                # momentum overshot: restart from the last accepted iterate
                y, t = x.copy(), 1.0
                continue
            if Fz - Fx <= 1e-12 * max(1.0, abs(Fx)):
                converged = True
                break
            raise NumericalError("proximal step increased the objective")
        small_change = abs(Fx - Fz) <= tol * max(1.0, abs(Fz))
        small_step = math.sqrt(d @ d) <= tol * (1.0 + math.sqrt(z @ z))
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = np.clip(z + ((t - 1.0) / t_next) * (z - x), 0.0, upper)
        x, Fx, t = z, Fz, t_next
        history.append(Fx)
        if small_change and small_step:
            converged = True
            break
        step /= config.shrink ** 0.5
    return x, it, float(Fx), converged, history


def _solve(loss, model: CascadeModel, lam: float, config: SolverConfig, x0=None):
    if x0 is None:
        x0 = _start_point(model, loss.m)
        # never-active sources carry no information; pin them at zero
        x0[~loss.x.any(axis=0)] = 0.0
    return proximal_gradient(loss, lam, model.upper_bound, np.asarray(x0, dtype=float), config)


def solve_sparse_mle(measurements: MeasurementSet, model, config: SolverConfig = SolverConfig(), x0=None) -> InferenceResult:
    """l1-penalised MLE for one node's incoming weights."""
    model = as_model(model)
    loss = NegLogLikelihood(measurements, model, config.eps_clamp)
    theta, it, obj, conv, hist = _solve(loss, model, config.lam, config, x0)
    return InferenceResult(measurements.node, theta, it, obj, conv, measurements.n, config.lam, "sparse_mle", hist)


def solve_mle(measurements: MeasurementSet, model, config: SolverConfig = SolverConfig(), x0=None) -> InferenceResult:
    """Unpenalised MLE (the ``lam`` of ``config`` is ignored)."""
    res = solve_sparse_mle(measurements, model, replace(config, lam=0.0), x0)
    res.estimator = "mle"
    return res


def solve_lasso(measurements: MeasurementSet, model, config: SolverConfig = SolverConfig(), x0=None) -> InferenceResult:
    """Squared-loss surrogate ``(1/n) sum (f(z) - y)^2 + lam ||theta||_1``."""
    model = as_model(model)
    loss = SquaredLoss(measurements, model)
    if x0 is None:
        x0 = np.zeros(loss.m)
    theta, it, obj, conv, hist = proximal_gradient(loss, config.lam, model.upper_bound, np.asarray(x0, float), config)
    return InferenceResult(measurements.node, theta, it, obj, conv, measurements.n, config.lam, "lasso", hist)


# ---------------------------------------------------------------------------
# greedy


def _golden_columns(loss: NegLogLikelihood, z_base, hi, iters=28):
    """Vectorised golden-section search of each column's 1-d refit on ``[0, hi]``."""
    m = loss.m
    trial = loss.column_trials(z_base)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a = np.zeros(m)
    b = np.full(m, hi)
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = trial(c)
    fd = trial(d)
    for _ in range(iters):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - invphi * (b - a)
        new_d = a + invphi * (b - a)
        # reuse the surviving interior point, evaluate the other one
        keep_c = np.where(left, new_c, d)
        keep_d = np.where(left, c, new_d)
        fkeep = np.where(left, fc, fd)
        probe = np.where(left, keep_c, keep_d)
        fprobe = trial(probe)
        c, d = keep_c, keep_d
        fc = np.where(left, fprobe, fkeep)
        fd = np.where(left, fkeep, fprobe)
    w = 0.5 * (a + b)
    # the boundary w = 0 is a legitimate optimum (no gain from the column)
    f_mid = trial(w)
    f_zero = trial(np.zeros(m))
    better_zero = f_zero <= f_mid
    return np.where(better_zero, 0.0, w), np.minimum(f_mid, f_zero)


GREEDY_WEIGHT_CAP = 10.0


def solve_greedy(measurements: MeasurementSet, model, max_parents: int | None = None,
                 tolerance: float | None = None, eps_clamp: float = 1e-9) -> InferenceResult:
    """Forward selection of parents by likelihood gain.

    Each round refits every candidate's weight by a 1-d line search with the
    selected weights held fixed, adds the candidate with the largest decrease
    of the negative log-likelihood (ties to the lowest id) and stops when the
    decrease falls below ``tolerance`` (default ``log(n) / (2n)``, a BIC-sized
    gain) or ``max_parents`` is reached.
    """
    model = as_model(model)
    loss = NegLogLikelihood(measurements, model, eps_clamp)
    m, n = loss.m, loss.n
    if max_parents is None:
        max_parents = m
    if max_parents < 0:
        raise ParameterError("max_parents must be >= 0")
    if tolerance is None:
        tolerance = math.log(max(n, 2)) / (2 * n)
    hi = min(GREEDY_WEIGHT_CAP, model.upper_bound)
    theta = np.zeros(m)
    z = np.zeros(n)
    obj = loss.value(theta)
    history = [obj]
    chosen: list[int] = []
    converged = False
    rounds = 0
    while len(chosen) < max_parents:
        rounds += 1
        cap = hi
        if model.kind == "voter":
            cap = max(0.0, 1.0 - float(z.max(initial=0.0)))
        w, vals = _golden_columns(loss, z, cap)
        vals = np.where(theta > 0, np.inf, vals)
        vals = np.where(w > 0, vals, np.inf)
        j = int(np.argmin(vals))  # argmin returns the lowest index among ties
        gain = obj - vals[j]
        if not math.isfinite(vals[j]) or gain < tolerance:
            converged = True
            break
        theta[j] = w[j]
        z = z + w[j] * loss.x[:, j]
        obj = float(vals[j])
        chosen.append(j)
        history.append(obj)
    else:
        converged = True
    return InferenceResult(measurements.node, theta, rounds, float(obj), converged, n, 0.0, "greedy", history)


# ---------------------------------------------------------------------------
# whole-graph inference


@dataclass(frozen=True)
class LambdaRule:
    """How to pick ``lam`` per node: ``fixed`` value or the ``theorem`` rule times ``scale``."""

    kind: str = "fixed"
    value: float = 0.0
    alpha: float = 0.2
    delta: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fixed", "theorem"):
            raise ParameterError(f"unknown lambda rule {self.kind!r}")

    def for_node(self, m: int, n: int) -> float:
        if self.kind == "fixed":
            return self.value
        return self.scale * select_lambda(m, n, self.alpha, self.delta)


@dataclass
class GraphEstimate:
    theta_hat: np.ndarray
    results: dict[int, InferenceResult]
    skipped: dict[int, str]
    eta: float
    model: str

    def edges(self, eta: float | None = None) -> set[tuple[int, int]]:
        eta = self.eta if eta is None else eta
        rows, cols = np.nonzero(self.theta_hat > eta)
        return set(zip(rows.tolist(), cols.tolist()))

    def to_graph(self, eta: float | None = None) -> Graph:
        mat = self.theta_hat
        weights = {e: float(mat[e]) for e in sorted(self.edges(eta))}
        kind = self.model if self.model != "voter" else "ic"
        # thresholded voter estimates are not normalised, so store them with IC semantics
        return Graph(mat.shape[0], kind, weights)

    @property
    def total_measurements(self) -> int:
        return sum(r.n for r in self.results.values())


def solve_node(measurements: MeasurementSet, model, estimator: str, config: SolverConfig,
               max_parents: int | None = None) -> InferenceResult:
    if estimator == "sparse_mle":
        return solve_sparse_mle(measurements, model, config)
    if estimator == "mle":
        return solve_mle(measurements, model, config)
    if estimator == "lasso":
        return solve_lasso(measurements, model, config)
    if estimator == "greedy":
        return solve_greedy(measurements, model, max_parents, eps_clamp=config.eps_clamp)
    raise ParameterError(f"unknown estimator {estimator!r}")


def infer_graph(traces: Sequence[CascadeTrace], model, config: SolverConfig = SolverConfig(),
                eta: float = 0.1, estimator: str = "sparse_mle", lam_rule: LambdaRule | None = None,
                num_nodes: int | None = None, nodes: Sequence[int] | None = None,
                max_parents: int | None = None,
                measurements: dict[int, MeasurementSet] | None = None) -> GraphEstimate:
    """Estimate every column of the weight matrix independently, then threshold at ``eta``.

    Nodes with no measurements are recorded in ``skipped`` rather than raising.
    ``measurements`` may be passed to reuse pooled data across estimators.
    """
    model = as_model(model)
    if estimator not in ESTIMATORS:
        raise ParameterError(f"unknown estimator {estimator!r}")
    if not traces and measurements is None:
        if num_nodes is None:
            raise ParameterError("num_nodes is required when there are no traces")
        m = num_nodes
        return GraphEstimate(np.zeros((m, m)), {}, {i: "no measurements" for i in range(m)}, eta, model.kind)
    if measurements is None:
        if traces[0].model != model.kind:
            raise ParameterError(f"traces are {traces[0].model!r} but model is {model.kind!r}")
        measurements = measurements_by_node(traces, nodes)
    m = next(iter(measurements.values())).num_nodes
    theta_hat = np.zeros((m, m))
    results, skipped = {}, {}
    for i in sorted(measurements) if nodes is None else nodes:
        ms = measurements[i]
        if ms.n == 0:
            skipped[i] = "no measurements"
            continue
        cfg = config
        if lam_rule is not None:
            cfg = replace(config, lam=lam_rule.for_node(m, ms.n))
        try:
            res = solve_node(ms, model, estimator, cfg, max_parents)
        except NumericalError as exc:
            skipped[i] = f"numerical failure: {exc}"
            log.warning("node %d: %s", i, exc)
            continue
        results[i] = res
        theta_hat[:, i] = res.theta_hat
    return GraphEstimate(theta_hat, results, skipped, eta, model.kind)
