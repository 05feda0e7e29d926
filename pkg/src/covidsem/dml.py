"""Double machine learning for one policy coefficient.

The outcome and the target policy are each regressed on a linear block X
(unpenalized) and a nuisance block W (lasso-penalized). Held-out residuals
from cluster-level cross-fitting give the orthogonal estimate
``theta = sum(d_res * y_res) / sum(d_res ** 2)`` with a state-clustered SE.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, NumericalError
from .transform import Design

LEARNERS = ("lasso", "random_forest")
DEFAULT_X_BLOCKS = ("policy", "behavior", "information")
DEFAULT_X_TERMS = ("test_growth",)
CONVERGENCE_TOL = 1e-8
MAX_SWEEPS = 100_000
GRID_POINTS = 20
GRID_RATIO = 1e-3


@dataclass(frozen=True)
class LassoFit:
    intercept: float
    coef: np.ndarray
    lam: float
    n_iter: int

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=np.float64) @ self.coef


class _Standardized:
    """Centered, scaled copy of ``(y, X)`` with the unpenalized block projected out."""

    def __init__(self, y: np.ndarray, X: np.ndarray, penalty_factor: np.ndarray | None):
        y = np.asarray(y, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ConfigError(f"X shape {X.shape} does not match {y.size} outcomes")
        n, p = X.shape
        pf = np.ones(p) if penalty_factor is None else np.asarray(penalty_factor, dtype=np.float64)
        if pf.shape != (p,) or np.any(pf < 0):
            raise ConfigError("penalty_factor must be nonnegative with one entry per column")
        self.n, self.p, self.pf = n, p, pf
        self.x_mean = X.mean(axis=0) if n else np.zeros(p)
        self.y_mean = float(y.mean()) if n else 0.0
        sd = X.std(axis=0) if n else np.zeros(p)
        scale = np.maximum(np.abs(self.x_mean), 1.0)
        self.keep = sd > 1e-12 * scale
        self.sd = np.where(self.keep, sd, 1.0)
        Z = (X - self.x_mean) / self.sd
        yc = y - self.y_mean
        self.unpen = np.flatnonzero(self.keep & (pf == 0))
        self.pen = np.flatnonzero(self.keep & (pf > 0))
        Zu = Z[:, self.unpen]
        Zp = Z[:, self.pen]
        if self.unpen.size:
            Q, _ = np.linalg.qr(Zu)
            yc = yc - Q @ (Q.T @ yc)
            Zp = Zp - Q @ (Q.T @ Zp)
        self.Zu, self.Z, self.yc_full = Zu, Z, y - self.y_mean
        self.gram = Zp.T @ Zp / n if n else np.zeros((self.pen.size, self.pen.size))
        self.corr = Zp.T @ yc / n if n else np.zeros(self.pen.size)

    def lambda_max(self) -> float:
        if self.pen.size == 0:
            return 0.0
        return float(np.max(np.abs(self.corr) / self.pf[self.pen]))

    def _polish(self, b: np.ndarray, thresh: np.ndarray) -> np.ndarray | None:
        """Exact solution on the current support when it satisfies the KKT conditions."""
        G, c = self.gram, self.corr
        A = b != 0
        out = np.zeros_like(b)
        if A.any():
            s = np.sign(b[A])
            try:
                bA = np.linalg.solve(G[np.ix_(A, A)], c[A] - thresh[A] * s)
            except np.linalg.LinAlgError:
                return None
            if np.any(np.sign(bA) != s):
                return None
            out[A] = bA
        grad = c - G @ out
        slack = 1e-12 * max(1.0, float(np.abs(c).max(initial=0.0)))
        if np.any(np.abs(grad[~A]) > thresh[~A] + slack):
            return None
        return out

    def solve(self, lam: float, start: np.ndarray | None = None, tol: float = CONVERGENCE_TOL,
              max_sweeps: int = MAX_SWEEPS) -> tuple[LassoFit, np.ndarray]:
        if not (lam >= 0) or not math.isfinite(lam):
            raise ConfigError(f"lambda must be a finite number >= 0, got {lam!r}")
        G, c = self.gram, self.corr
        thresh = lam * self.pf[self.pen]
        diag = np.diag(G).copy()
        b = np.zeros(self.pen.size) if start is None else start.copy()
        sweeps = 0
        if self.pen.size:
            while True:
                sweeps += 1
                change = 0.0
                for j in range(b.size):
                    if diag[j] <= 1e-14:
                        new = 0.0
                    else:
                        rho = c[j] - G[j] @ b + diag[j] * b[j]
                        new = math.copysign(max(abs(rho) - thresh[j], 0.0), rho) / diag[j]
                    d = abs(new - b[j])
                    if d > change:
                        change = d
                    b[j] = new
                if change < tol:
                    break
                polished = self._polish(b, thresh)
                if polished is not None:
                    b = polished
                if sweeps >= max_sweeps:
                    raise NumericalError(f"lasso did not converge after {sweeps} coordinate sweeps (lambda={lam:g})")
        coef_std = np.zeros(self.p)
        coef_std[self.pen] = b
        if self.unpen.size:
            rest = self.yc_full - self.Z[:, self.pen] @ b
            g, *_ = np.linalg.lstsq(self.Zu, rest, rcond=None)
            coef_std[self.unpen] = g
        coef = np.where(self.keep, coef_std / self.sd, 0.0)
        intercept = self.y_mean - float(self.x_mean @ coef)
        return LassoFit(intercept, coef, float(lam), sweeps), b


def lasso(y: np.ndarray, X: np.ndarray, lam: float, penalty_factor: Sequence[float] | None = None,
          tol: float = CONVERGENCE_TOL, max_sweeps: int = MAX_SWEEPS) -> LassoFit:
    """Minimize ``0.5 * ||y - c - Xb||^2 / n + lam * sum(pf_j |b_j|)`` over standardized columns.

    The intercept is never penalized. Columns with ``penalty_factor == 0`` are
    concentrated out exactly before coordinate descent. Constant columns get
    a zero coefficient.
    """
    pf = None if penalty_factor is None else np.asarray(penalty_factor, dtype=np.float64)
    fit, _ = _Standardized(y, X, pf).solve(float(lam), tol=tol, max_sweeps=max_sweeps)
    return fit


def lambda_grid(y: np.ndarray, X: np.ndarray, penalty_factor: Sequence[float] | None = None,
                points: int = GRID_POINTS, ratio: float = GRID_RATIO) -> np.ndarray:
    """Geometric grid from the all-zero bound down by ``ratio``, in decreasing order."""
    top = _Standardized(y, X, None if penalty_factor is None else np.asarray(penalty_factor, float)).lambda_max()
    if top <= 0:
        return np.array([0.0])
    return np.geomspace(top, top * ratio, points)


def cluster_folds(clusters: np.ndarray, K: int, seed: int = 0) -> np.ndarray:
    """Fold id per row; every cluster lands in exactly one fold."""
    labels, inv = np.unique(np.asarray(clusters), return_inverse=True)
    if K < 2:
        raise ConfigError(f"need at least 2 folds, got {K}")
    if K > labels.size:
        raise ConfigError(f"{K} folds for only {labels.size} clusters")
    perm = np.random.default_rng(int(seed)).permutation(labels.size)
    fold_of = np.empty(labels.size, dtype=np.int64)
    fold_of[perm] = np.arange(labels.size) % K
    return fold_of[inv]


def cv_lambda(y: np.ndarray, X: np.ndarray, folds: np.ndarray, grid: Sequence[float] | None = None,
              penalty_factor: Sequence[float] | None = None) -> float:
    """Grid value with the smallest pooled held-out MSE; ties go to the larger value."""
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    folds = np.asarray(folds)
    pf = None if penalty_factor is None else np.asarray(penalty_factor, dtype=np.float64)
    if grid is None:
        grid = lambda_grid(y, X, pf)
    grid = np.asarray(sorted(set(float(g) for g in grid), reverse=True))
    if grid.size == 0:
        raise ConfigError("lambda grid is empty")
    if grid.size == 1:
        return float(grid[0])
    sse = np.zeros(grid.size)
    for f in np.unique(folds):
        test = folds == f
        prob = _Standardized(y[~test], X[~test], pf)
        b = None
        for i, lam in enumerate(grid):
            fit, b = prob.solve(float(lam), start=b)
            r = y[test] - fit.predict(X[test])
            sse[i] += float(r @ r)
    mse = sse / y.size
    best = 0
    for i in range(1, grid.size):
        if mse[i] < mse[best] * (1.0 - 1e-12):
            best = i
    return float(grid[best])


# (y, X, penalty_factor, lam) -> predict
Learner = Callable[[np.ndarray, np.ndarray, np.ndarray, float], Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class DmlSpec:
    """Target policy, linear block and nuisance block for one DML fit.

    By default X holds every column of the policy, behavior and information
    blocks except the target plus ``test_growth``; W holds the remaining
    confounder columns except the intercept. Giving only ``w_columns`` puts
    every other non-intercept column in X. ``lam=None`` picks each nuisance
    penalty by cluster-fold cross-validation on the cross-fitting folds.
    """

    target: str
    x_columns: tuple[str, ...] | None = None
    w_columns: tuple[str, ...] | None = None
    folds: int = 5
    learner: str = "lasso"
    lam: float | None = None
    grid: tuple[float, ...] | None = None
    cross_fit: bool = True

    def __post_init__(self):
        if self.learner not in LEARNERS:
            raise ConfigError(f"unknown learner {self.learner!r}; choose from {LEARNERS}")
        if self.folds < 2:
            raise ConfigError(f"need at least 2 folds, got {self.folds}")
        if self.lam is not None and not (self.lam >= 0):
            raise ConfigError("lam must be >= 0")
        if self.grid is not None and len(self.grid) == 0:
            raise ConfigError("lambda grid is empty")
        x = set(self.x_columns or ())
        w = set(self.w_columns or ())
        if self.target in x or self.target in w:
            raise ConfigError(f"target {self.target!r} must not appear in X or W")
        if x & w:
            raise ConfigError(f"columns in both X and W: {sorted(x & w)}")

    def resolve(self, design: Design) -> tuple[int, list[int], list[int]]:
        names = list(design.names)
        d = design.column(self.target)
        if self.x_columns is None and self.w_columns is not None:
            w_set = {design.column(c) for c in self.w_columns}
            x = [j for j, nm in enumerate(names) if j != d and j not in w_set and nm != "const"]
        elif self.x_columns is None:
            x = [j for j, (nm, bl) in enumerate(zip(names, design.blocks))
                 if j != d and (bl in DEFAULT_X_BLOCKS or design.term_of[j] in DEFAULT_X_TERMS)]
        else:
            x = [design.column(c) for c in self.x_columns]
        if self.w_columns is None:
            taken = set(x) | {d}
            w = [j for j, nm in enumerate(names) if j not in taken and nm != "const"]
        else:
            w = [design.column(c) for c in self.w_columns]
        if d in x or d in w:
            raise ConfigError(f"target {self.target!r} must not appear in X or W")
        if set(x) & set(w):
            raise ConfigError("X and W overlap")
        return d, x, w

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("x_columns", "w_columns", "grid"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "DmlSpec":
        d = dict(d)
        for k in ("x_columns", "w_columns", "grid"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad DML spec: {e}") from None


@dataclass(frozen=True)
class DmlResult:
    target: str
    theta: float
    se: float
    n_obs: int
    n_clusters: int
    fold_of_state: dict[str, int]
    nuisance: list[dict]
    spec: DmlSpec
    y_residual: np.ndarray = field(repr=False)
    d_residual: np.ndarray = field(repr=False)
    clusters: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "theta": self.theta,
            "se": self.se,
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "folds": dict(sorted(self.fold_of_state.items())),
            "nuisance": self.nuisance,
            "spec": self.spec.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def orthogonal_theta(y_res: np.ndarray, d_res: np.ndarray) -> float:
    """Residual-on-residual slope."""
    denom = float(d_res @ d_res)
    if denom <= 0:
        raise NumericalError("residualized target has zero variance")
    return float(d_res @ y_res) / denom


def orthogonal_se(y_res: np.ndarray, d_res: np.ndarray, theta: float, clusters: np.ndarray) -> float:
    """State-clustered SE of the orthogonal moment with factor ``G/(G-1)``."""
    psi = d_res * (y_res - theta * d_res)
    labels, inv = np.unique(clusters, return_inverse=True)
    G = labels.size
    if G < 2:
        raise NumericalError("clustered standard error needs at least 2 clusters")
    sums = np.bincount(inv, weights=psi, minlength=G)
    J = float(d_res @ d_res)
    return math.sqrt(G / (G - 1) * float(sums @ sums)) / J


def lasso_learner(y: np.ndarray, X: np.ndarray, pf: np.ndarray, lam: float) -> Callable[[np.ndarray], np.ndarray]:
    model = lasso(y, X, lam, pf)

    def predict(Xt):
        return model.predict(Xt)

    predict.nonzero = int(np.count_nonzero(model.coef[pf > 0]))
    return predict


def learner_for(spec: DmlSpec) -> Learner:
    if spec.learner == "random_forest":
        raise NotImplementedError("random forest nuisance learner is not implemented; use lasso")
    return lasso_learner


def dml_arrays(y: np.ndarray, D: np.ndarray, X: np.ndarray, W: np.ndarray, clusters: np.ndarray,
               spec: DmlSpec, seed: int = 0, cluster_names: Sequence[str] | None = None) -> DmlResult:
    """Cross-fitted partialling-out estimate from raw arrays.

    Without a fixed ``lam`` each nuisance gets its penalty from cluster-fold
    cross-validation over all rows on the same folds used for cross-fitting.
    With ``cross_fit=False`` the nuisances are fit once on all rows; with an
    empty W and ``lam=0`` the estimate then equals the OLS coefficient.
    """
    learner = learner_for(spec)
    y = np.asarray(y, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64).reshape(y.size, -1)
    W = np.asarray(W, dtype=np.float64).reshape(y.size, -1)
    XW = np.hstack([X, W])
    pf = np.concatenate([np.zeros(X.shape[1]), np.ones(W.shape[1])])
    clusters = np.asarray(clusters)
    labels = np.unique(clusters)
    cv_folds = cluster_folds(clusters, spec.folds, seed)
    folds = cv_folds if spec.cross_fit else np.zeros(y.size, dtype=np.int64)
    lams = {}
    for key, target in (("outcome", y), ("target", D)):
        if spec.lam is not None:
            lams[key] = float(spec.lam)
        elif W.shape[1] == 0:
            lams[key] = 0.0
        else:
            lams[key] = cv_lambda(target, XW, cv_folds, spec.grid, pf)
    y_res = np.empty(y.size)
    d_res = np.empty(y.size)
    diag = []
    for f in np.unique(folds):
        test = folds == f
        train = ~test if spec.cross_fit else np.ones(y.size, dtype=bool)
        info = {"fold": int(f), "n_train": int(train.sum()), "n_test": int(test.sum())}
        for key, target in (("outcome", y), ("target", D)):
            predict = learner(target[train], XW[train], pf, lams[key])
            res = target[test] - predict(XW[test])
            (y_res if key == "outcome" else d_res)[test] = res
            info[f"{key}_lambda"] = lams[key]
            info[f"{key}_nonzero_w"] = getattr(predict, "nonzero", None)
            info[f"{key}_mse"] = float(res @ res / max(res.size, 1))
        diag.append(info)
    spread = float(((D - D.mean()) ** 2).sum())
    if float(d_res @ d_res) <= 1e-12 * max(spread, 1e-300):
        raise NumericalError(f"residualized {spec.target!r} is degenerate (variance ~ 0)")
    theta = orthogonal_theta(y_res, d_res)
    se = orthogonal_se(y_res, d_res, theta, clusters)
    fold_of_state = {}
    for g, s in enumerate(labels):
        name = str(cluster_names[g]) if cluster_names is not None else str(s)
        fold_of_state[name] = int(folds[np.flatnonzero(clusters == s)[0]])
    return DmlResult(spec.target, theta, se, int(y.size), int(labels.size), fold_of_state, diag, spec,
                     y_res, d_res, clusters)


def dml_fit(design: Design, spec: DmlSpec, seed: int = 0) -> DmlResult:
    """DML estimate of ``spec.target`` with X and W taken from design columns."""
    d_idx, x_idx, w_idx = spec.resolve(design)
    clusters = design.cluster_ids
    names = [design.states[int(s)] for s in np.unique(clusters)]
    return dml_arrays(design.y, design.X[:, d_idx], design.X[:, x_idx], design.X[:, w_idx],
                      clusters, spec, seed, names)
