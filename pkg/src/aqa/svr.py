"""Epsilon-insensitive support vector regression solved with SMO.

The dual is written over ``2n`` box-constrained variables ``a = [alpha; alpha*]``::

    minimise   0.5 * a' Q a + p' a
    subject to z' a = 0,  0 <= a <= C

with ``z = [1..1, -1..-1]``, ``Q_ij = z_i z_j K(x_i, x_j)`` and
``p = [eps - y, eps + y]``. The regression function is
``f(x) = sum_i beta_i K(x_i, x) + b`` with ``beta = alpha - alpha*``.
Each SMO step updates the maximal violating pair analytically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensorcore import ShapeError, load_tensor, save_tensor

_TAU = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "rbf"
    gamma: float | None = None  # None means 1 / n_features, fixed at training time

    def resolved(self, dim: int) -> "KernelSpec":
        if self.kind == "rbf" and self.gamma is None:
            return KernelSpec("rbf", 1.0 / dim)
        return self


def kernel_eval(spec: KernelSpec, x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    return float(kernel_matrix(spec.resolved(x.size), x[None], y[None])[0, 0])


def kernel_matrix(spec: KernelSpec, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"feature dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    if spec.kind == "linear":
        return A @ B.T
    if spec.kind == "rbf":
        gamma = 1.0 / A.shape[1] if spec.gamma is None else spec.gamma
        d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2 * A @ B.T
        return np.exp(-gamma * np.maximum(d2, 0.0))
    raise ValueError(f"unknown kernel {spec.kind!r}")


@dataclass
class SvrProblem:
    X: np.ndarray
    y: np.ndarray
    C: float = 100.0
    epsilon: float = 0.1
    kernel: KernelSpec = KernelSpec()
    tol: float = 1e-3
    max_iter: int = 200_000

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.X.shape[0] < 1 or self.X.shape[0] != self.y.size:
            raise ShapeError(f"need n >= 1 rows matching targets, got X {self.X.shape}, y {self.y.shape}")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("SVR problem contains non-finite entries")
        if self.C <= 0 or self.epsilon < 0:
            raise ValueError(f"need C > 0 and epsilon >= 0, got C={self.C}, epsilon={self.epsilon}")


@dataclass
class SvrModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray
    b: float
    kernel: KernelSpec
    C: float
    epsilon: float
    converged: bool = True
    n_iter: int = 0
    dual_objective: float = float("nan")

    @property
    def dim(self) -> int:
        return self.support_vectors.shape[1]


def dual_objective(beta, K, y, epsilon) -> float:
    """Dual value to be maximised: ``-0.5 b'Kb + y'b - eps * |b|_1``."""
    beta = np.asarray(beta, dtype=np.float64)
    return float(-0.5 * beta @ K @ beta + np.dot(y, beta) - epsilon * np.abs(beta).sum())


def solve_dual(K: np.ndarray, y: np.ndarray, C: float, epsilon: float, tol: float = 1e-3,
               max_iter: int = 200_000):
    """SMO on a precomputed kernel matrix; returns ``(beta, b, converged, n_iter)``."""
    n = y.size
    z = np.concatenate([np.ones(n), -np.ones(n)])
    a = np.zeros(2 * n)
    G = np.concatenate([epsilon - y, epsilon + y])
    diagK = np.diag(K).copy()

    def q_col(t):
        return z * z[t] * np.concatenate([K[:, t % n], K[:, t % n]])

    converged = False
    it = 0
    for it in range(max_iter):
        up = ((z > 0) & (a < C)) | ((z < 0) & (a > 0))
        low = ((z < 0) & (a < C)) | ((z > 0) & (a > 0))
        score = -z * G
        if not up.any() or not low.any():
            converged = True
            break
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        j = int(np.flatnonzero(low)[np.argmin(score[low])])
        if score[i] - score[j] < tol:
            converged = True
            break
        Qi, Qj = q_col(i), q_col(j)
        Qii, Qjj, Qij = diagK[i % n], diagK[j % n], Qi[j]
        ai_old, aj_old = a[i], a[j]
        if z[i] != z[j]:
            quad = max(Qii + Qjj + 2 * Qij, _TAU)
            delta = (-G[i] - G[j]) / quad
            diff = a[i] - a[j]
            a[i] += delta
            a[j] += delta
            if diff > 0:
                if a[j] < 0:
                    a[j], a[i] = 0.0, diff
            elif a[i] < 0:
                a[i], a[j] = 0.0, -diff
            if diff > 0:
                if a[i] > C:
                    a[i], a[j] = C, C - diff
            elif a[j] > C:
                a[j], a[i] = C, C + diff
        else:
            quad = max(Qii + Qjj - 2 * Qij, _TAU)
            delta = (G[i] - G[j]) / quad
            total = a[i] + a[j]
            a[i] -= delta
            a[j] += delta
            if total > C:
                if a[i] > C:
                    a[i], a[j] = C, total - C
            elif a[j] < 0:
                a[j], a[i] = 0.0, total
            if total > C:
                if a[j] > C:
                    a[j], a[i] = C, total - C
            elif a[i] < 0:
                a[i], a[j] = 0.0, total
        G += Qi * (a[i] - ai_old) + Qj * (a[j] - aj_old)

    # bias from free variables, or the midpoint of the feasible interval
    yG = z * G
    at_upper, at_lower = a >= C, a <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        rho = yG[free].mean()
    else:
        ub_mask = (at_upper & (z < 0)) | (at_lower & (z > 0))
        lb_mask = (at_upper & (z > 0)) | (at_lower & (z < 0))
        ub = yG[ub_mask].min() if ub_mask.any() else np.inf
        lb = yG[lb_mask].max() if lb_mask.any() else -np.inf
        rho = 0.5 * (ub + lb) if np.isfinite(ub) and np.isfinite(lb) else (ub if np.isfinite(ub) else lb)
    beta = a[:n] - a[n:]
    return beta, float(-rho), converged, it


def train_svr(problem: SvrProblem) -> SvrModel:
    kernel = problem.kernel.resolved(problem.X.shape[1])
    K = kernel_matrix(kernel, problem.X, problem.X)
    if not np.all(np.isfinite(K)):
        raise ValueError("kernel matrix contains non-finite values")
    beta, b, converged, n_iter = solve_dual(K, problem.y, problem.C, problem.epsilon,
                                            problem.tol, problem.max_iter)
    obj = dual_objective(beta, K, problem.y, problem.epsilon)
    keep = beta != 0
    return SvrModel(problem.X[keep].copy(), beta[keep], b, kernel, problem.C, problem.epsilon,
                    converged, n_iter, obj)


def predict_svr(model: SvrModel, x) -> np.ndarray | float:
    """``f(x) = sum_i beta_i K(x_i, x) + b``; accepts one vector or a row matrix."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != model.dim:
        raise ShapeError(f"feature dimension {X.shape[1]} != model dimension {model.dim}")
    if model.dual_coef.size == 0:
        out = np.full(X.shape[0], model.b)
    else:
        out = kernel_matrix(model.kernel, X, model.support_vectors) @ model.dual_coef + model.b
    return float(out[0]) if single else out


def linear_weights(model: SvrModel) -> np.ndarray:
    if model.kernel.kind != "linear":
        raise ValueError("collapsed weights exist only for the linear kernel")
    return model.dual_coef @ model.support_vectors


def fit_svr_grid(X, y, kernel: KernelSpec = KernelSpec(), Cs=(1.0, 10.0, 100.0),
                 eps_fracs=(0.01, 0.05), val_frac: float = 0.2, seed: int = 0,
                 tol: float = 1e-3) -> tuple[SvrModel, dict]:
    """Pick (C, epsilon) by Spearman rho on a held-out slice, then refit on everything.

    ``epsilon`` is ``frac * (max(y) - min(y))``. Cells whose validation rho is
    undefined rank below every defined cell; ties keep the first cell in grid order.
    """
    from .evalkit import spearman_rho

    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    span = float(y.max() - y.min()) or 1.0
    n = y.size
    n_val = int(round(val_frac * n))
    best, best_score = None, -np.inf
    scores = {}
    if n_val >= 3 and n - n_val >= 2 and len(Cs) * len(eps_fracs) > 1:
        perm = np.random.default_rng(seed).permutation(n)
        val, tr = perm[:n_val], perm[n_val:]
        for C in Cs:
            for frac in eps_fracs:
                m = train_svr(SvrProblem(X[tr], y[tr], C, frac * span, kernel, tol))
                rho = spearman_rho(predict_svr(m, X[val]), y[val])
                score = -np.inf if rho is None else rho
                scores[(C, frac)] = rho
                if score > best_score:
                    best, best_score = (C, frac), score
    if best is None:
        best = (Cs[-1], eps_fracs[0])
    model = train_svr(SvrProblem(X, y, best[0], best[1] * span, kernel, tol))
    return model, {"C": best[0], "eps_frac": best[1], "scores": {f"{c}/{e}": s for (c, e), s in scores.items()}}


def save_svr(model: SvrModel, path_stem) -> None:
    """Write ``<stem>.json`` plus ``<stem>.aqtn`` (support-vector matrix)."""
    stem = Path(path_stem)
    meta = {"kernel": model.kernel.kind, "gamma": model.kernel.gamma, "C": model.C,
            "epsilon": model.epsilon, "b": model.b, "coefficients": model.dual_coef.tolist(),
            "dim": model.dim, "converged": model.converged}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    save_tensor(stem.with_suffix(".aqtn"), model.support_vectors)


def load_svr(path_stem) -> SvrModel:
    stem = Path(path_stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    sv = load_tensor(stem.with_suffix(".aqtn")).reshape(-1, meta["dim"])
    return SvrModel(sv, np.asarray(meta["coefficients"], dtype=np.float64), meta["b"],
                    KernelSpec(meta["kernel"], meta["gamma"]), meta["C"], meta["epsilon"],
                    meta["converged"])
