"""1-slack cutting-plane structured SVM and the logistic detector trainer."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .inference import LossSpec, loss_augmented_infer
from .model import HierarchyConfig, WeightLayout, WeightVector, accumulate_features
from .potentials import LogisticDetector

QP_TOL = 1e-8


@dataclass
class QPResult:
    w: np.ndarray
    xi: float
    alpha: np.ndarray
    dual: float
    gap: float


class DualSolver:
    """Dual of min 1/2|w|^2 + C xi  s.t.  <w, g_k> >= L_k - xi for all k, xi >= 0.

    The multipliers live on {alpha >= 0, sum alpha <= C}; the unused mass acts
    as one extra coordinate with zero gradient. Pairwise (SMO) steps on the
    maximally violating pair keep the iterate feasible and the dual monotone.
    """

    def __init__(self, dim: int, C: float = 1.0):
        if C <= 0:
            raise ValueError("C must be positive")
        self.C = float(C)
        self.G = np.zeros((0, dim))
        self.L = np.zeros(0)
        self.K = np.zeros((0, 0))
        self.alpha = np.zeros(0)

    def add(self, g, L) -> None:
        g = np.asarray(g, dtype=np.float64)
        kg = self.G @ g
        k = len(self.L)
        K = np.empty((k + 1, k + 1))
        K[:k, :k] = self.K
        K[:k, k] = K[k, :k] = kg
        K[k, k] = g @ g
        self.K = K
        self.G = np.vstack([self.G, g])
        self.L = np.append(self.L, float(L))
        self.alpha = np.append(self.alpha, 0.0)

    def _grad(self):
        return self.L - self.K @ self.alpha

    def gap(self, grad=None) -> float:
        grad = self._grad() if grad is None else grad
        if len(grad) == 0:
            return 0.0
        return self.C * max(0.0, float(grad.max())) - float(self.alpha @ grad)

    def solve(self, tol: float = QP_TOL, max_steps: int = 1_000_000) -> QPResult:
        k = len(self.L)
        if k == 0:
            return self.result()
        # extended problem on the simplex sum = C; index k is the slack
        Kx = np.zeros((k + 1, k + 1))
        Kx[:k, :k] = self.K
        a = np.append(self.alpha, max(self.C - self.alpha.sum(), 0.0))
        grad = np.append(self._grad(), 0.0)
        for step in range(max_steps):
            if step % 64 == 0:
                grad[:k] = self.L - self.K @ a[:k]
                if self.C * max(grad.max(), 0.0) - a @ grad <= tol:
                    break
            i = int(np.argmax(grad))
            j = int(np.argmin(np.where(a > 0, grad, np.inf)))
            diff = grad[i] - grad[j]
            if diff <= 0:
                break
            q = Kx[i, i] + Kx[j, j] - 2 * Kx[i, j]
            clipped = q <= 0 or diff / q >= a[j]
            delta = a[j] if clipped else diff / q
            a[i] += delta
            a[j] = 0.0 if clipped else a[j] - delta
            grad -= delta * (Kx[:, i] - Kx[:, j])
        self.alpha = a[:k].copy()
        return self.result()

    def dual(self) -> float:
        return float(self.alpha @ self.L - 0.5 * self.alpha @ self.K @ self.alpha)

    def result(self) -> QPResult:
        w = self.alpha @ self.G if len(self.L) else np.zeros(self.G.shape[1])
        xi = max(0.0, float((self.L - self.G @ w).max())) if len(self.L) else 0.0
        return QPResult(w, xi, self.alpha.copy(), self.dual(), self.gap())


def primal_objective(w, xi, C) -> float:
    return 0.5 * float(w @ w) + C * xi


def solve_qp(constraints, C: float = 1.0, dim: int | None = None, tol: float = QP_TOL) -> QPResult:
    """Solve the 1-slack QP over ``constraints`` = [(g, L), ...] from scratch."""
    constraints = list(constraints)
    if dim is None:
        dim = len(constraints[0][0]) if constraints else 0
    s = DualSolver(dim, C)
    for g, L in constraints:
        s.add(g, L)
    return s.solve(tol)


# ---------------------------------------------------------------------------
# cutting plane


@dataclass
class CuttingPlaneState:
    w: WeightVector
    xi: float = 0.0
    iteration: int = 0
    trace: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    constraints: list = field(default_factory=list)
    converged: bool = False


def most_violated(bundles, truths, w: WeightVector, config: HierarchyConfig, losses: LossSpec,
                  mask: np.ndarray | None = None):
    """Aggregate 1-slack constraint (g, L) at ``w`` plus the per-example predictions."""
    layout = w.layout
    g = np.zeros(layout.size)
    L = 0.0
    preds = []
    N = len(bundles)
    for b, y in zip(bundles, truths):
        yhat, _, lo = loss_augmented_infer(b, y, w, config, losses)
        accumulate_features(g, layout, b, y, config, 1.0 / N)
        accumulate_features(g, layout, b, yhat, config, -1.0 / N)
        L += lo / N
        preds.append(yhat)
    if mask is not None:
        g = np.where(mask, g, 0.0)
    return g, L, preds


def train_ssvm(bundles, truths, config: HierarchyConfig, layout: WeightLayout, losses: LossSpec,
               C: float | None = None, eps: float = 1e-3, max_iter: int = 200, freeze=(),
               log=None) -> CuttingPlaneState:
    """Margin-rescaled 1-slack cutting plane from w = 0.

    Stops once the newest aggregate constraint is violated by at most
    ``eps`` beyond the current slack. Blocks named in ``freeze`` stay at 0
    along with the consistency blocks.
    """
    bundles, truths = list(bundles), list(truths)
    if not truths or len(truths) != len(bundles):
        raise ValueError("need one ground-truth assignment per training bundle")
    C = config.C if C is None else C
    mask = layout.learnable_mask()
    for name in freeze:
        if layout.has(name):
            mask[layout.slice(name)[0]] = False
    solver = DualSolver(layout.size, C)
    state = CuttingPlaneState(WeightVector(layout))
    for it in range(1, max_iter + 1):
        state.iteration = it
        g, L, _ = most_violated(bundles, truths, state.w, config, losses, mask)
        violation = L - float(state.w.values @ g)
        state.violations.append(violation)
        if log is not None:
            log(f"iter {it}: violation {violation:.6g} slack {state.xi:.6g}")
        if violation <= state.xi + eps:
            state.converged = True
            break
        solver.add(g, L)
        state.constraints.append((g, L))
        res = solver.solve()
        state.w = WeightVector(layout, res.w)
        state.xi = res.xi
        state.trace.append(res.dual)
    if not state.converged:
        warnings.warn(f"cutting plane stopped at max_iter={max_iter} without reaching eps={eps}")
    return state


# ---------------------------------------------------------------------------
# detector


def logistic_objective(params: np.ndarray, X: np.ndarray, y: np.ndarray, lam: float):
    """Mean logistic loss plus lam/2 |w|^2 (bias unregularised); returns (value, gradient).

    ``params`` is [w, b]; labels ``y`` are in {0, 1}.
    """
    w, b = params[:-1], params[-1]
    z = X @ w + b
    # log(1 + exp(-t)) with t = (2y - 1) z
    t = (2 * y - 1) * z
    val = np.mean(np.logaddexp(0.0, -t)) + 0.5 * lam * (w @ w)
    p = 0.5 * (1 + np.tanh(0.5 * z))
    r = (p - y) / len(y)
    return val, np.append(X.T @ r + lam * w, r.sum())


def train_detector(positives, negatives, lam: float = 1e-2, gtol: float = 1e-6) -> LogisticDetector:
    """L2-regularised logistic regression on z-scored appearance vectors."""
    pos = np.array([getattr(p, "values", p) for p in positives], dtype=np.float64)
    neg = np.array([getattr(p, "values", p) for p in negatives], dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both classes need at least one example")
    X = np.vstack([pos, neg])
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    mean = X.mean(0)
    scale = X.std(0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    x0 = np.zeros(Z.shape[1] + 1)
    for _ in range(5):
        res = minimize(logistic_objective, x0, args=(Z, y, lam), jac=True, method="L-BFGS-B",
                       options={"gtol": gtol * 1e-2, "ftol": 0.0, "maxiter": 20000})
        x0 = res.x
        if np.linalg.norm(logistic_objective(x0, Z, y, lam)[1]) <= gtol:
            break
    return LogisticDetector(x0[:-1], x0[-1], mean, scale)
