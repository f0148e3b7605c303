"""Objectives, gradients, and the accelerated proximal-gradient engine.

W is D x (R*C); every model shares the crowd loss

    loss(W) = 0.5 * || U^(1/2) (Y - X W) ||_F^2

and minimizes, with S/Q the shared and sparse parts where applicable:

    st_lasso    sum_t [ 0.5||Y_t - X_t W_t||^2 ]  + alpha ||W||_1 + beta ||W||_F^2
                (per-task blocks only; tasks decouple completely)
    mt_lasso    loss + beta ||W||_F^2             + alpha ||W||_1
    l21_mtl     loss + beta ||W||_F^2             + alpha ||W||_{2,1}
    dirty_mtl   loss(S+Q) + rho1 ||S||_{1,inf}    + rho2 ||Q||_1
    robust_mtl  loss(S+Q) + rho1 ||S||_{2,1}      + rho2 ||Q||_{2,1 over columns}
    sr_mtl      loss + alpha ||E W'||_F^2 + gamma ||W||_F^2 + beta ||W||_1
    eg_mtl      loss + lambda1 ||V - P W||_F^2 + lambda2 ||E W'||_F^2
                     + lambda3 ||W||_1

The quadratic graph coupling is kept in the smooth part so the non-smooth
step is an exact soft threshold. The engine is a monotone variant of
accelerated proximal gradient: backtracking doubles the local Lipschitz
estimate until the quadratic upper bound holds, and a momentum restart
fires whenever the accelerated candidate would increase the objective, so
the recorded trace never increases.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .design import StackedDesign
from .errors import NumericalError
from .prox import prox_l1, prox_l21_cols, prox_l21_rows, prox_linf_rows

MODEL_KINDS = (
    "st_lasso",
    "mt_lasso",
    "l21_mtl",
    "dirty_mtl",
    "robust_mtl",
    "sr_mtl",
    "eg_mtl",
)

HYPERPARAMS = {
    "st_lasso": ("alpha", "beta"),
    "mt_lasso": ("alpha", "beta"),
    "l21_mtl": ("alpha", "beta"),
    "dirty_mtl": ("rho1", "rho2"),
    "robust_mtl": ("rho1", "rho2"),
    "sr_mtl": ("alpha", "beta", "gamma"),
    "eg_mtl": ("lambda1", "lambda2", "lambda3"),
}

# relative threshold under which a weight counts as zero in sparsity reports
ZERO_TOL = 1e-6


@dataclass(frozen=True)
class ModelSpec:
    """One of the model kinds plus its complete hyperparameter set."""

    kind: str
    hyperparams: dict

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        expected = set(HYPERPARAMS[self.kind])
        got = set(self.hyperparams)
        if got != expected:
            raise ValueError(
                f"{self.kind} needs hyperparameters {sorted(expected)}, "
                f"got {sorted(got)}"
            )
        for name, value in self.hyperparams.items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")

    def __getitem__(self, name: str) -> float:
        return float(self.hyperparams[name])


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 5000
    rel_tol: float = 1e-7
    L0: float = 1.0
    backtrack_factor: float = 2.0
    seed: int = 0  # reserved for randomized starts; default start is W0 = 0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be > 0")
        if self.L0 <= 0:
            raise ValueError("L0 must be > 0")
        if self.backtrack_factor <= 1:
            raise ValueError("backtrack_factor must be > 1")


@dataclass
class FitResult:
    W: np.ndarray
    objective_trace: np.ndarray
    iterations: int
    converged: bool
    sparsity: float
    shared_part: np.ndarray | None = None
    sparse_part: np.ndarray | None = None

    @property
    def final_objective(self) -> float:
        return float(self.objective_trace[-1])


@dataclass
class CompositeProblem:
    """Smooth f with gradient plus a non-smooth h with exact prox.

    `prox(v, step)` solves argmin_x 0.5||x - v||^2 + step * h(x).
    """

    shape: tuple
    f: callable
    grad: callable
    prox: callable
    h: callable


def measure_sparsity(w: np.ndarray) -> float:
    """Fraction of entries below ZERO_TOL relative to the largest weight."""
    w = np.asarray(w)
    if w.size == 0:
        return 1.0
    cut = ZERO_TOL * float(np.max(np.abs(w)))
    return float(np.mean(np.abs(w) <= cut))


def _require_dims(w: np.ndarray, design: StackedDesign) -> None:
    d = design.n_features
    rc = design.n_tasks * design.n_classes
    if w.shape != (d, rc):
        raise ValueError(f"W must be {d} x {rc}, got {w.shape}")


def objective_egmtl(w, design: StackedDesign, lambda1, lambda2, lambda3) -> float:
    """Full objective value: crowd loss + expert loss + graph + l1."""
    w = np.asarray(w, dtype=float)
    _require_dims(w, design)
    resid = design.Y - design.X @ w
    value = 0.5 * float(np.sum(design.U[:, None] * resid * resid))
    if lambda1 != 0:
        if design.P is None:
            raise ValueError("lambda1 > 0 requires the expert block (P, V)")
        eresid = design.V - design.P @ w
        value += lambda1 * float(np.sum(eresid * eresid))
    if lambda2 != 0 and design.E.shape[0]:
        g = design.E @ w.T
        value += lambda2 * float(np.sum(g * g))
    value += lambda3 * float(np.sum(np.abs(w)))
    return value


def grad_smooth_egmtl(w, design: StackedDesign, lambda1, lambda2) -> np.ndarray:
    """Gradient of the smooth part (crowd loss + expert loss + graph)."""
    w = np.asarray(w, dtype=float)
    _require_dims(w, design)
    grad = design.X.T @ (design.U[:, None] * (design.X @ w - design.Y))
    if lambda1 != 0:
        if design.P is None:
            raise ValueError("lambda1 > 0 requires the expert block (P, V)")
        grad = grad + 2.0 * lambda1 * (design.P.T @ (design.P @ w - design.V))
    if lambda2 != 0 and design.E.shape[0]:
        grad = grad + 2.0 * lambda2 * (w @ (design.E.T @ design.E))
    return grad


def fista_solve(problem: CompositeProblem, w0, config: SolverConfig | None = None):
    """Monotone accelerated proximal gradient.

    Returns (w, objective_trace, iterations, converged). The trace starts
    at the objective of w0 and records the accepted iterate each step;
    convergence is declared when the relative objective change (measured
    against max(|previous|, 1)) drops below rel_tol.
    """
    if config is None:
        config = SolverConfig()
    x = np.array(w0, dtype=float)
    y = x.copy()
    lip = float(config.L0)
    t = 1.0
    fx = problem.f(x) + problem.h(x)
    if not np.isfinite(fx):
        raise NumericalError("objective is not finite at the starting point")
    trace = [fx]
    converged = False
    iterations = 0
    base_step = True  # y holds no momentum: a plain prox step must descend
    for iterations in range(1, config.max_iter + 1):
        grad = problem.grad(y)
        fy = problem.f(y)
        if not (np.all(np.isfinite(grad)) and np.isfinite(fy)):
            raise NumericalError("non-finite gradient or objective")
        while True:
            z = problem.prox(y - grad / lip, 1.0 / lip)
            dz = z - y
            bound = fy + float(np.vdot(grad, dz)) + 0.5 * lip * float(np.vdot(dz, dz))
            fz_smooth = problem.f(z)
            if fz_smooth <= bound + 1e-12 * (1.0 + abs(bound)):
                break
            lip *= config.backtrack_factor
            if lip > 1e18:
                raise NumericalError("backtracking line search diverged")
        fz = fz_smooth + problem.h(z)
        if fz > fx:
            if base_step:
                # a momentum-free step can only fail to descend at (numerical)
                # stationarity, so the iterate is optimal to float precision
                trace.append(fx)
                converged = True
                break
            # momentum overshoot: restart from the best iterate
            y = x.copy()
            t = 1.0
            base_step = True
            trace.append(fx)
            continue
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = z + ((t - 1.0) / t_next) * (z - x)
        base_step = False
        rel_change = abs(fx - fz) / max(abs(fx), 1.0)
        x = z
        fx = fz
        t = t_next
        trace.append(fx)
        if rel_change < config.rel_tol:
            converged = True
            break
    return x, np.asarray(trace), iterations, converged


def _crowd_quadratic(design: StackedDesign):
    """Precompute the crowd loss as 0.5 w'Kw - w'C + c0 (N drops out)."""
    ux = design.U[:, None] * design.X
    k = design.X.T @ ux
    c = ux.T @ design.Y
    c0 = 0.5 * float(np.sum(design.U[:, None] * design.Y * design.Y))
    return k, c, c0


def _quad_value(w, k, c, c0) -> float:
    return 0.5 * float(np.vdot(w, k @ w)) - float(np.vdot(w, c)) + c0


def build_problem(model: ModelSpec, design: StackedDesign) -> CompositeProblem:
    """Smooth/non-smooth split for a model on a design.

    For dirty_mtl and robust_mtl the variable is the two blocks stacked
    vertically (2D x RC): shared part on top, sparse part below.
    """
    d = design.n_features
    rc = design.n_tasks * design.n_classes
    kind = model.kind
    k, c, c0 = _crowd_quadratic(design)
    ete = design.E.T @ design.E if design.E.shape[0] else None

    if kind in ("mt_lasso", "l21_mtl"):
        alpha, beta = model["alpha"], model["beta"]

        def f(w):
            return _quad_value(w, k, c, c0) + beta * float(np.vdot(w, w))

        def grad(w):
            return k @ w - c + 2.0 * beta * w

        if kind == "mt_lasso":
            prox = lambda v, step: prox_l1(v, step * alpha)
            h = lambda w: alpha * float(np.sum(np.abs(w)))
        else:
            prox = lambda v, step: prox_l21_rows(v, step * alpha)
            h = lambda w: alpha * float(
                np.sum(np.sqrt(np.sum(w * w, axis=1)))
            )
        return CompositeProblem((d, rc), f, grad, prox, h)

    if kind == "sr_mtl":
        alpha, beta, gamma = model["alpha"], model["beta"], model["gamma"]
        if ete is None:
            warnings.warn("sr_mtl fitted with an empty task graph")

        def f(w):
            value = _quad_value(w, k, c, c0) + gamma * float(np.vdot(w, w))
            if alpha != 0 and ete is not None:
                value += alpha * float(np.vdot(w, w @ ete))
            return value

        def grad(w):
            g = k @ w - c + 2.0 * gamma * w
            if alpha != 0 and ete is not None:
                g = g + 2.0 * alpha * (w @ ete)
            return g

        prox = lambda v, step: prox_l1(v, step * beta)
        h = lambda w: beta * float(np.sum(np.abs(w)))
        return CompositeProblem((d, rc), f, grad, prox, h)

    if kind == "eg_mtl":
        lam1, lam2, lam3 = model["lambda1"], model["lambda2"], model["lambda3"]
        if design.P is None or design.P.shape[0] == 0:
            raise ValueError("eg_mtl requires the expert block (P, V)")
        if ete is None:
            warnings.warn("eg_mtl fitted with an empty task graph")
        kp = design.P.T @ design.P
        cp = design.P.T @ design.V
        cp0 = float(np.sum(design.V * design.V))

        def f(w):
            value = _quad_value(w, k, c, c0)
            if lam1 != 0:
                value += lam1 * (
                    float(np.vdot(w, kp @ w)) - 2.0 * float(np.vdot(w, cp)) + cp0
                )
            if lam2 != 0 and ete is not None:
                value += lam2 * float(np.vdot(w, w @ ete))
            return value

        def grad(w):
            g = k @ w - c
            if lam1 != 0:
                g = g + 2.0 * lam1 * (kp @ w - cp)
            if lam2 != 0 and ete is not None:
                g = g + 2.0 * lam2 * (w @ ete)
            return g

        prox = lambda v, step: prox_l1(v, step * lam3)
        h = lambda w: lam3 * float(np.sum(np.abs(w)))
        return CompositeProblem((d, rc), f, grad, prox, h)

    if kind in ("dirty_mtl", "robust_mtl"):
        rho1, rho2 = model["rho1"], model["rho2"]

        def f(z):
            return _quad_value(z[:d] + z[d:], k, c, c0)

        def grad(z):
            g = k @ (z[:d] + z[d:]) - c
            return np.vstack([g, g])

        if kind == "dirty_mtl":

            def prox(v, step):
                return np.vstack(
                    [prox_linf_rows(v[:d], step * rho1), prox_l1(v[d:], step * rho2)]
                )

            def h(z):
                return rho1 * float(
                    np.sum(np.max(np.abs(z[:d]), axis=1))
                ) + rho2 * float(np.sum(np.abs(z[d:])))

        else:

            def prox(v, step):
                return np.vstack(
                    [
                        prox_l21_rows(v[:d], step * rho1),
                        prox_l21_cols(v[d:], step * rho2),
                    ]
                )

            def h(z):
                s, q = z[:d], z[d:]
                return rho1 * float(
                    np.sum(np.sqrt(np.sum(s * s, axis=1)))
                ) + rho2 * float(np.sum(np.sqrt(np.sum(q * q, axis=0))))

        return CompositeProblem((2 * d, rc), f, grad, prox, h)

    if kind == "st_lasso":
        alpha, beta = model["alpha"], model["beta"]
        # per-task quadratics: task t's rows against its own column block
        row_tasks = design.row_tasks()
        cc = design.n_classes
        blocks = []
        for t in range(design.n_tasks):
            mask = row_tasks == t
            xt = design.X[mask]
            ut = design.U[mask]
            yt = design.Y[mask][:, t * cc : (t + 1) * cc]
            uxt = ut[:, None] * xt
            blocks.append(
                (xt.T @ uxt, uxt.T @ yt, 0.5 * float(np.sum(ut[:, None] * yt * yt)))
            )

        def f(w):
            value = beta * float(np.vdot(w, w))
            for t, (kt, ct, c0t) in enumerate(blocks):
                wt = w[:, t * cc : (t + 1) * cc]
                value += _quad_value(wt, kt, ct, c0t)
            return value

        def grad(w):
            g = 2.0 * beta * w
            for t, (kt, ct, _) in enumerate(blocks):
                sl = slice(t * cc, (t + 1) * cc)
                g[:, sl] += kt @ w[:, sl] - ct
            return g

        prox = lambda v, step: prox_l1(v, step * alpha)
        h = lambda w: alpha * float(np.sum(np.abs(w)))
        return CompositeProblem((d, rc), f, grad, prox, h)

    raise ValueError(f"unknown model kind {kind!r}")


def fit(
    model: ModelSpec,
    design: StackedDesign,
    config: SolverConfig | None = None,
    w0=None,
) -> FitResult:
    """Fit one model on a design via the accelerated solver, from W0 = 0."""
    problem = build_problem(model, design)
    if w0 is None:
        w0 = np.zeros(problem.shape)
    z, trace, iterations, converged = fista_solve(problem, w0, config)
    if model.kind in ("dirty_mtl", "robust_mtl"):
        d = design.n_features
        shared, sparse = z[:d], z[d:]
        w = shared + sparse
        return FitResult(
            W=w,
            objective_trace=trace,
            iterations=iterations,
            converged=converged,
            sparsity=measure_sparsity(w),
            shared_part=shared,
            sparse_part=sparse,
        )
    return FitResult(
        W=z,
        objective_trace=trace,
        iterations=iterations,
        converged=converged,
        sparsity=measure_sparsity(z),
    )


def predict(w, x_new, task: int, n_classes: int, mode: str = "class", midpoints=None):
    """Decode predictions for one task's column block.

    mode="class" returns 1-based argmax class indices (ties to the lowest
    index). mode="level" clips negative scores to zero and returns the
    midpoint-weighted average; rows with no positive score fall back to
    the midpoint of the argmax class.
    """
    w = np.asarray(w, dtype=float)
    x_new = np.asarray(x_new, dtype=float)
    n_tasks = w.shape[1] // n_classes
    if not 1 <= task <= n_tasks:
        raise ValueError(f"task {task} out of range 1..{n_tasks}")
    scores = x_new @ w[:, (task - 1) * n_classes : task * n_classes]
    if mode == "class":
        return np.argmax(scores, axis=1) + 1
    if mode == "level":
        if midpoints is None:
            raise ValueError("level decoding requires midpoints")
        midpoints = np.asarray(midpoints, dtype=float)
        if midpoints.shape != (n_classes,):
            raise ValueError("need one midpoint per class")
        pos = np.maximum(scores, 0.0)
        totals = pos.sum(axis=1)
        fallback = midpoints[np.argmax(scores, axis=1)]
        with np.errstate(invalid="ignore", divide="ignore"):
            weighted = (pos @ midpoints) / totals
        return np.where(totals > 0, weighted, fallback)
    raise ValueError(f"unknown mode {mode!r}")


def predict_transfer(w, x_new, n_classes: int):
    """Class decode for rows that belong to no training task.

    Scores are pooled over every task's block per class; returns
    (1-based classes, pooled class scores).
    """
    w = np.asarray(w, dtype=float)
    x_new = np.asarray(x_new, dtype=float)
    scores = x_new @ w
    n_tasks = w.shape[1] // n_classes
    pooled = scores.reshape(x_new.shape[0], n_tasks, n_classes).sum(axis=1)
    return np.argmax(pooled, axis=1) + 1, pooled
