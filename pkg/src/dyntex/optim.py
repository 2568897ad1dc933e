"""Limited-memory BFGS with a strong Wolfe line search.

Minimizes a black-box (value, gradient) objective over a flat vector.
The search direction comes from the standard two-loop recursion over
curvature pairs; pairs that fail the curvature test are never stored, so
the direction is always a descent direction. Accepted steps satisfy both
the sufficient-decrease and strong curvature inequalities and can be
re-verified from the recorded trace.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NonFiniteObjectiveError, OptimizerError

# Stored pairs must satisfy s.y > CURVATURE_EPS * |s||y|.
CURVATURE_EPS = 1e-10


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iters: int = 500
    tol_grad: float = 1e-8
    tol_loss: float = 0.0          # relative decrease threshold; 0 disables
    c1: float = 1e-4
    c2: float = 0.9
    max_ls_steps: int = 20
    record_steps: bool = False     # keep per-step vectors for auditing

    def __post_init__(self):
        if not (0.0 < self.c1 < self.c2 < 1.0):
            raise ConfigError("Wolfe constants need 0 < c1 < c2 < 1",
                              key="optimizer")
        if self.memory < 1:
            raise ConfigError("memory must be >= 1", key="optimizer.memory")
        if self.max_iters < 0:
            raise ConfigError("max_iters must be >= 0",
                              key="optimizer.max_iters")
        if self.max_ls_steps < 1:
            raise ConfigError("max_ls_steps must be >= 1",
                              key="optimizer.max_ls_steps")
        if self.tol_grad < 0 or self.tol_loss < 0:
            raise ConfigError("tolerances must be >= 0", key="optimizer")


@dataclass
class IterationRecord:
    loss: float
    grad_norm: float
    step_length: float
    ls_evals: int


@dataclass
class StepDetail:
    """Everything needed to re-verify one accepted Wolfe step."""

    x: np.ndarray
    direction: np.ndarray
    alpha: float
    f0: float
    g0: np.ndarray
    f1: float
    g1: np.ndarray


@dataclass
class IterationTrace:
    initial_loss: float
    initial_grad_norm: float
    records: list = field(default_factory=list)
    termination: str = ""
    steps: list | None = None

    @property
    def iterations(self):
        return len(self.records)

    def losses(self):
        return [r.loss for r in self.records]


def two_loop_direction(gradient, history):
    """Search direction from the two-loop recursion.

    ``history`` holds (s, y) pairs, oldest first, each with positive
    curvature. Empty history gives steepest descent.
    """
    if not history:
        return -gradient
    q = gradient.astype(np.float64).copy()
    rhos = [1.0 / float(np.dot(y, s)) for s, y in history]
    alphas = []
    for (s, y), rho in zip(reversed(history), reversed(rhos)):
        a = rho * float(np.dot(s, q))
        alphas.append(a)
        q -= a * y
    s_last, y_last = history[-1]
    gamma = float(np.dot(s_last, y_last)) / float(np.dot(y_last, y_last))
    r = gamma * q
    for (s, y), rho, a in zip(history, rhos, reversed(alphas)):
        b = rho * float(np.dot(y, r))
        r += (a - b) * s
    return -r


@dataclass
class _SearchResult:
    success: bool
    alpha: float = 0.0
    f: float = 0.0
    g: np.ndarray | None = None
    x: np.ndarray | None = None
    evals: int = 0


def strong_wolfe_search(objective, x, f0, g0, direction, config):
    """Find a step along ``direction`` satisfying both strong Wolfe
    conditions, or report failure once the evaluation budget is spent.

    ``objective`` maps a point to (value, gradient); ``direction`` must be
    a descent direction at ``x``.
    """
    dphi0 = float(np.dot(g0, direction))
    if dphi0 >= 0.0:
        raise OptimizerError("line search needs a descent direction")
    c1, c2 = config.c1, config.c2
    budget = config.max_ls_steps
    evals = 0

    def evaluate(alpha):
        nonlocal evals
        evals += 1
        x1 = x + alpha * direction
        f1, g1 = objective(x1)
        return f1, g1, x1, float(np.dot(g1, direction))

    def zoom(alo, philo, dphilo, ahi, phihi):
        nonlocal evals
        while evals < budget:
            lo_b, hi_b = (alo, ahi) if alo < ahi else (ahi, alo)
            span = hi_b - lo_b
            denom = 2.0 * (phihi - philo - dphilo * (ahi - alo))
            if denom != 0.0:
                aj = alo - dphilo * (ahi - alo) ** 2 / denom
            else:
                aj = 0.5 * (alo + ahi)
            if not np.isfinite(aj) or not (lo_b + 0.1 * span <= aj <= hi_b - 0.1 * span):
                aj = 0.5 * (alo + ahi)
            fj, gj, xj, dphij = evaluate(aj)
            if fj > f0 + c1 * aj * dphi0 or fj >= philo:
                ahi, phihi = aj, fj
            else:
                if abs(dphij) <= -c2 * dphi0:
                    return _SearchResult(True, aj, fj, gj, xj, evals)
                if dphij * (ahi - alo) >= 0.0:
                    ahi, phihi = alo, philo
                alo, philo, dphilo = aj, fj, dphij
            if span <= 1e-16 * max(1.0, abs(alo)):
                break
        return _SearchResult(False, evals=evals)

    alpha_prev, phi_prev, dphi_prev = 0.0, f0, dphi0
    alpha = 1.0
    first = True
    while evals < budget:
        phi, g1, x1, dphi = evaluate(alpha)
        if phi > f0 + c1 * alpha * dphi0 or (not first and phi >= phi_prev):
            return zoom(alpha_prev, phi_prev, dphi_prev, alpha, phi)
        if abs(dphi) <= -c2 * dphi0:
            return _SearchResult(True, alpha, phi, g1, x1, evals)
        if dphi >= 0.0:
            return zoom(alpha, phi, dphi, alpha_prev, phi_prev)
        alpha_prev, phi_prev, dphi_prev = alpha, phi, dphi
        alpha = 2.0 * alpha
        first = False
    return _SearchResult(False, evals=evals)


def minimize(objective, x0, config=None, callback=None):
    """L-BFGS minimization of ``objective`` from ``x0``.

    Returns (best_x, trace). Terminates on the gradient tolerance, the
    relative loss-decrease tolerance, the iteration cap, or a repeated
    line-search failure (history is reset and steepest descent is retried
    once first). A non-finite objective value or gradient aborts with a
    NonFiniteObjectiveError carrying the iteration index and the best
    point seen.
    """
    if config is None:
        config = LbfgsConfig()
    x = np.asarray(x0, dtype=np.float64).ravel().copy()
    if not np.all(np.isfinite(x)):
        raise OptimizerError("initial point must be finite")

    state = {"iteration": 0}

    def fg(z):
        value, grad = objective(z)
        value = float(value)
        grad = np.asarray(grad, dtype=np.float64).ravel()
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise NonFiniteObjectiveError(state["iteration"])
        return value, grad

    trace = None
    best_x = x.copy()
    best_f = np.inf
    try:
        f, g = fg(x)
        best_f = f
        trace = IterationTrace(f, float(np.linalg.norm(g)),
                               steps=[] if config.record_steps else None)
        history = []
        trace.termination = "max_iterations"
        for k in range(1, config.max_iters + 1):
            state["iteration"] = k
            if float(np.linalg.norm(g)) <= config.tol_grad:
                trace.termination = "gradient_tolerance"
                break
            d = two_loop_direction(g, history)
            if float(np.dot(d, g)) >= 0.0:
                history.clear()
                d = -g
            result = strong_wolfe_search(fg, x, f, g, d, config)
            if not result.success and history:
                history.clear()
                d = -g
                result = strong_wolfe_search(fg, x, f, g, d, config)
            if not result.success:
                trace.termination = "line_search_failure"
                break
            s = result.x - x
            y = result.g - g
            sy = float(np.dot(s, y))
            if sy > CURVATURE_EPS * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
                history.append((s, y))
                if len(history) > config.memory:
                    history.pop(0)
            prev_f = f
            if config.record_steps:
                trace.steps.append(StepDetail(
                    x.copy(), d.copy(), result.alpha, f, g.copy(),
                    result.f, result.g.copy()))
            x, f, g = result.x, result.f, result.g
            trace.records.append(IterationRecord(
                f, float(np.linalg.norm(g)), result.alpha, result.evals))
            if f < best_f:
                best_f = f
                best_x = x.copy()
            if callback is not None:
                callback(k, f, float(np.linalg.norm(g)))
            if config.tol_loss > 0.0:
                if (prev_f - f) <= config.tol_loss * max(1.0, abs(prev_f)):
                    trace.termination = "loss_tolerance"
                    break
        else:
            if config.max_iters == 0:
                trace.termination = "max_iterations"
    except NonFiniteObjectiveError as err:
        err.best_x = best_x
        err.best_loss = None if not np.isfinite(best_f) else best_f
        if trace is not None:
            trace.termination = "non_finite_objective"
        err.trace = trace
        raise
    return best_x, trace
