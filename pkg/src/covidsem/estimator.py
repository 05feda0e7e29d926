"""Least squares with state-clustered inference, bootstrap draws, fixed effects
and the cross-over jackknife bias correction."""

from __future__ import annotations

import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, DataError, NumericalError, RankDeficientError
from .transform import RANK_TOL, Design, dependent_columns

logger = logging.getLogger(__name__)

DEFAULT_DRAWS = 200
SCHEMES = ("pairs_cluster", "multiplier_cluster", "gaussian_asymptotic")


@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray
    names: tuple[str, ...]
    residuals: np.ndarray
    n_obs: int
    r_squared: float
    adj_r_squared: float
    vcov: np.ndarray | None = None
    estimator: str = "cre"
    fingerprint: str = ""
    cluster_ids: np.ndarray | None = None
    bread: np.ndarray | None = None
    n_clusters: int = 0
    dropped: tuple[str, ...] = ()

    @property
    def k(self) -> int:
        return self.coefficients.size

    @property
    def se(self) -> np.ndarray:
        if self.vcov is None:
            raise NumericalError("fit has no covariance matrix")
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"fit has no coefficient {name!r}") from None

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.index(name)])

    def to_dict(self) -> dict:
        d = {
            "estimator": self.estimator,
            "fingerprint": self.fingerprint,
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "r_squared": self.r_squared,
            "adj_r_squared": self.adj_r_squared,
            "names": list(self.names),
            "coefficients": [float(v) for v in self.coefficients],
            "dropped": list(self.dropped),
        }
        if self.vcov is not None:
            d["se"] = [float(v) for v in self.se]
            d["vcov"] = [[float(v) for v in row] for row in self.vcov]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table_rows(self) -> list[tuple[str, str, str, str]]:
        """``(name, estimate, se, stars)`` with stars at the 10/5/1 percent levels."""
        se = self.se if self.vcov is not None else np.full(self.k, np.nan)
        rows = []
        for name, b, s in zip(self.names, self.coefficients, se):
            rows.append((name, f"{b:.6f}", f"{s:.6f}", significance_stars(b, s)))
        return rows


def significance_stars(estimate: float, se: float) -> str:
    if not (se > 0) or not math.isfinite(se):
        return ""
    p = math.erfc(abs(estimate / se) / math.sqrt(2.0))
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


@dataclass(frozen=True)
class BootstrapDraws:
    draws: np.ndarray
    names: tuple[str, ...]
    seed: int
    scheme: str
    retries: int = 0

    def __post_init__(self):
        if self.draws.ndim != 2 or self.draws.shape[0] < 1 or self.draws.shape[1] != len(self.names):
            raise NumericalError(f"draw matrix shape {self.draws.shape} does not match {len(self.names)} names")

    @property
    def B(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def cov(self) -> np.ndarray:
        return np.atleast_2d(np.cov(self.draws, rowvar=False, ddof=1))


# --- least squares -------------------------------------------------------------

def _qr_solve(y: np.ndarray, X: np.ndarray, names: Sequence[str], tol: float = RANK_TOL):
    n, k = X.shape
    if n == 0:
        raise DataError("empty design")
    if k == 0:
        return np.zeros(0), np.zeros((0, 0))
    if n < k:
        raise RankDeficientError(list(names)[n:], f"{n} rows for {k} columns")
    scale = np.sqrt((X * X).sum(axis=0))
    if np.any(scale == 0):
        raise RankDeficientError(dependent_columns(X, list(names), tol))
    # QR of the column-normalized matrix keeps the rank test scale free
    Q, R, piv = sla.qr(X / scale, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if np.any(d <= tol * d[0]):
        raise RankDeficientError(dependent_columns(X, list(names), tol))
    z = sla.solve_triangular(R, Q.T @ y)
    beta = np.empty(k)
    beta[piv] = z / scale[piv]
    Rinv = sla.solve_triangular(R, np.eye(k))
    inv_p = Rinv @ Rinv.T
    bread = np.empty((k, k))
    bread[np.ix_(piv, piv)] = inv_p / np.outer(scale[piv], scale[piv])
    return beta, bread


def ols(y: np.ndarray, X: np.ndarray, names: Sequence[str] | None = None, estimator: str = "cre",
        fingerprint: str = "") -> FitResult:
    """Least squares through a column-pivoted QR decomposition.

    ``bread`` holds ``(X'X)^-1`` for the sandwich; ``vcov`` is left empty.
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    beta, bread = _qr_solve(y, X, names)
    resid = y - X @ beta
    n, k = X.shape
    tss = float(((y - y.mean()) ** 2).sum()) if "const" in names else float((y ** 2).sum())
    rss = float(resid @ resid)
    r2 = 1.0 - rss / tss if tss > 0 else float("nan")
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - k) if n > k and tss > 0 else float("nan")
    return FitResult(beta, names, resid, n, r2, adj, None, estimator, fingerprint, None, bread)


def cluster_scores(X: np.ndarray, resid: np.ndarray, clusters: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster score sums ``X_g' e_g`` (rows follow ``np.unique`` order)."""
    labels, inv = np.unique(np.asarray(clusters), return_inverse=True)
    S = np.zeros((labels.size, X.shape[1]))
    np.add.at(S, inv, X * resid[:, None])
    return labels, S


def cluster_vcov(fit: FitResult, X: np.ndarray, cluster_ids: np.ndarray) -> np.ndarray:
    """Clustered sandwich with factor ``G/(G-1) * (n-1)/(n-k)``."""
    n, k = X.shape
    labels, S = cluster_scores(X, fit.residuals, cluster_ids)
    G = labels.size
    if G < 2:
        raise NumericalError("clustered covariance needs at least 2 clusters")
    meat = S.T @ S
    c = G / (G - 1) * (n - 1) / (n - k) if n > k else float("nan")
    V = c * fit.bread @ meat @ fit.bread
    return (V + V.T) / 2.0


def fit_design(design: Design, estimator: str = "cre") -> FitResult:
    """OLS on a design with state-clustered covariance."""
    fit = ols(design.y, design.X, design.names, estimator, design.fingerprint())
    V = cluster_vcov(fit, design.X, design.cluster_ids)
    return replace(fit, vcov=V, cluster_ids=design.cluster_ids, n_clusters=int(np.unique(design.cluster_ids).size))


# --- bootstrap -------------------------------------------------------------------

def replicate_rng(seed: int, b: int, retry: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(b), int(retry)])


def resample_clusters(clusters: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw ``G`` cluster labels with replacement from the distinct labels."""
    labels = np.unique(clusters)
    return labels[rng.integers(0, labels.size, labels.size)]


def cluster_rows(clusters: np.ndarray, chosen: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row indices for a cluster resample plus fresh labels per draw position."""
    order = np.argsort(clusters, kind="stable")
    sorted_c = clusters[order]
    rows, labels = [], []
    for pos, g in enumerate(chosen):
        lo = np.searchsorted(sorted_c, g, side="left")
        hi = np.searchsorted(sorted_c, g, side="right")
        rows.append(order[lo:hi])
        labels.append(np.full(hi - lo, pos))
    if not rows:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.concatenate(rows), np.concatenate(labels)


def _map(fn: Callable[[int], np.ndarray], B: int, threads: int) -> list:
    if threads <= 1:
        return [fn(b) for b in range(B)]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, range(B)))


def pairs_cluster_draws(
    designs: Sequence[Design],
    B: int = DEFAULT_DRAWS,
    seed: int = 0,
    threads: int = 1,
    fitter: Callable[[Design], np.ndarray] | None = None,
) -> list[BootstrapDraws]:
    """Whole-state resampling applied jointly to every design.

    The same state draw is used for all designs in a replicate. A replicate
    that leaves some design empty or rank deficient is redrawn; the total
    number of redraws is capped at ``10 * B``.
    """
    if B < 1:
        raise ConfigError("B must be at least 1")
    if fitter is None:
        def fitter(d: Design) -> np.ndarray:
            return _qr_solve(d.y, d.X, d.names)[0]
    pool = np.unique(np.concatenate([d.cluster_ids for d in designs]))
    cap = 10 * B
    retries = [0] * B

    def one(b: int) -> list[np.ndarray]:
        for attempt in range(cap + 1):
            rng = replicate_rng(seed, b, attempt)
            chosen = pool[rng.integers(0, pool.size, pool.size)]
            out = []
            try:
                for d in designs:
                    rows, lab = cluster_rows(d.cluster_ids, chosen)
                    if rows.size == 0:
                        raise DataError("empty resample")
                    out.append(fitter(d.take_rows(rows, lab)))
                retries[b] = attempt
                return out
            except (DataError, NumericalError):
                continue
        raise NumericalError(f"bootstrap replicate {b} failed after {cap} redraws")

    results = _map(one, B, threads)
    total_retries = sum(retries)
    if total_retries > cap:
        raise NumericalError(f"bootstrap needed {total_retries} redraws (cap {cap})")
    return [
        BootstrapDraws(np.vstack([r[j] for r in results]), designs[j].names, seed, "pairs_cluster", total_retries)
        for j in range(len(designs))
    ]


def influence(fit: FitResult, X: np.ndarray, clusters: np.ndarray, pool: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-cluster influence ``(X'X)^-1 X_g' e_g``; zero rows for clusters absent from ``X``."""
    labels, S = cluster_scores(X, fit.residuals, clusters)
    psi = S @ fit.bread
    if pool is None:
        return labels, psi
    full = np.zeros((pool.size, psi.shape[1]))
    full[np.searchsorted(pool, labels)] = psi
    return pool, full


def multiplier_cluster_draws(
    fits: Sequence[FitResult],
    designs: Sequence[Design],
    B: int = DEFAULT_DRAWS,
    seed: int = 0,
    influences: Sequence[np.ndarray] | None = None,
) -> list[BootstrapDraws]:
    """Gaussian multiplier per state, shared across equations."""
    if B < 1:
        raise ConfigError("B must be at least 1")
    pool = np.unique(np.concatenate([d.cluster_ids for d in designs]))
    if influences is None:
        influences = [influence(f, d.X, d.cluster_ids, pool)[1] for f, d in zip(fits, designs)]
    xi = np.vstack([replicate_rng(seed, b).standard_normal(pool.size) for b in range(B)])
    return [
        BootstrapDraws(f.coefficients[None, :] + xi @ psi, f.names, seed, "multiplier_cluster")
        for f, psi in zip(fits, influences)
    ]


def nearest_psd(V: np.ndarray) -> tuple[np.ndarray, bool]:
    V = (V + V.T) / 2.0
    w, U = np.linalg.eigh(V)
    tol = 1e-8 * max(1.0, float(np.abs(w).max(initial=0.0)))
    if np.all(w >= -tol):
        return V, False
    return (U * np.clip(w, 0.0, None)) @ U.T, True


def draw_coefficients(fit: FitResult, B: int = DEFAULT_DRAWS, seed: int = 0) -> BootstrapDraws:
    """Normal draws around the point estimate with the fitted covariance."""
    if fit.vcov is None:
        raise NumericalError("fit has no covariance matrix")
    if B < 1:
        raise ConfigError("B must be at least 1")
    V, projected = nearest_psd(fit.vcov)
    if projected:
        msg = "covariance matrix is not positive semidefinite; projected to the nearest PSD matrix"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        logger.warning(msg)
    w, U = np.linalg.eigh(V)
    L = U * np.sqrt(np.clip(w, 0.0, None))
    z = np.vstack([replicate_rng(seed, b).standard_normal(fit.k) for b in range(B)])
    return BootstrapDraws(fit.coefficients[None, :] + z @ L.T, fit.names, seed, "gaussian_asymptotic")


def bootstrap(
    design: Design,
    scheme: str = "pairs_cluster",
    B: int = DEFAULT_DRAWS,
    seed: int = 0,
    threads: int = 1,
    fit: FitResult | None = None,
) -> BootstrapDraws:
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown bootstrap scheme {scheme!r}")
    if scheme == "pairs_cluster":
        return pairs_cluster_draws([design], B, seed, threads)[0]
    fit = fit or fit_design(design)
    if scheme == "multiplier_cluster":
        return multiplier_cluster_draws([fit], [design], B, seed)[0]
    return draw_coefficients(fit, B, seed)


# --- fixed effects ------------------------------------------------------------------

def group_demean(a: np.ndarray, groups: np.ndarray) -> np.ndarray:
    labels, inv = np.unique(groups, return_inverse=True)
    a2 = a.reshape(a.shape[0], -1)
    sums = np.zeros((labels.size, a2.shape[1]))
    np.add.at(sums, inv, a2)
    counts = np.bincount(inv, minlength=labels.size).astype(np.float64)
    out = a2 - (sums / counts[:, None])[inv]
    return out.reshape(a.shape)


def _within_varying(X: np.ndarray, groups: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    Xd = group_demean(X, groups)
    scale = np.maximum(np.abs(X).max(axis=0), 1.0)
    return np.abs(Xd).max(axis=0) > tol * scale


def _fe_columns(design: Design, groups: np.ndarray) -> tuple[np.ndarray, list[str]]:
    keep = _within_varying(design.X, groups)
    names = [n for n, k in zip(design.names, keep) if k]
    dropped = [n for n, k in zip(design.names, keep) if not k and n != "const"]
    if dropped:
        msg = f"dropped regressors constant within every state: {', '.join(dropped)}"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        logger.warning(msg)
    return keep, names


def fit_fixed_effects(design: Design) -> FitResult:
    """Within-state estimator; coefficients on time-varying columns only.

    Combine with a design built with ``dummies="week"`` for state effects
    plus weekly dummies.
    """
    g = design.cluster_ids
    counts = np.bincount(np.unique(g, return_inverse=True)[1])
    if counts.min() < 2:
        raise DataError("fixed effects need at least 2 periods per state")
    keep, names = _fe_columns(design, g)
    X = group_demean(design.X[:, keep], g)
    y = group_demean(design.y, g)
    fit = ols(y, X, names, "fe", design.fingerprint())
    V = cluster_vcov(fit, X, g)
    dropped = tuple(n for n, k in zip(design.names, keep) if not k)
    return replace(fit, vcov=V, cluster_ids=g, n_clusters=int(counts.size), dropped=dropped)


@dataclass(frozen=True)
class JackknifeResult:
    names: tuple[str, ...]
    beta_fe: np.ndarray
    beta_cross: np.ndarray
    beta_bc: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    n_states: int
    n_periods: int
    fit_fe: FitResult | None = None
    vcov_bc: np.ndarray | None = None
    draws: BootstrapDraws | None = None

    @property
    def se_bc(self) -> np.ndarray:
        if self.vcov_bc is None:
            raise NumericalError("no covariance for the debiased estimate")
        return np.sqrt(np.clip(np.diag(self.vcov_bc), 0.0, None))

    def as_fit(self) -> FitResult:
        base = self.fit_fe
        return FitResult(self.beta_bc, self.names, base.residuals, base.n_obs, base.r_squared,
                         base.adj_r_squared, self.vcov_bc, "fe_debiased", base.fingerprint,
                         base.cluster_ids, base.bread, base.n_clusters, base.dropped)


def crossover_subpanels(state_rank: np.ndarray, period_rank: np.ndarray, N: int, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Row masks of the two cross-over subpanels (ranks are 1-based)."""
    lo_i = state_rank <= math.ceil(N / 2)
    hi_i = state_rank >= math.floor(N / 2 + 1)
    lo_t = period_rank <= math.ceil(T / 2)
    hi_t = period_rank >= math.floor(T / 2 + 1)
    s1 = (lo_i & lo_t) | (hi_i & hi_t)
    s2 = (lo_i & hi_t) | (hi_i & lo_t)
    return s1, s2


def crossover_jackknife(design: Design, B: int | None = None, seed: int = 0) -> JackknifeResult:
    """Bias-corrected fixed effects ``2 * beta_fe - beta_cross``.

    ``beta_cross`` pools both subpanels with a separate effect for every
    (state, subpanel) pair. With ``B`` set, the covariance comes from ``B``
    state multiplier draws of the corrected estimator's influence; otherwise
    from its exact multiplier variance ``sum_g phi_g phi_g'``.
    """
    g = design.cluster_ids
    states, s_rank = np.unique(g, return_inverse=True)
    periods, t_rank = np.unique(design.row_date, return_inverse=True)
    N, T = states.size, periods.size
    if N < 2 or T < 2:
        raise DataError("cross-over jackknife needs at least 2 states and 2 periods")
    s1, s2 = crossover_subpanels(s_rank + 1, t_rank + 1, N, T)
    if not s1.any() or not s2.any():
        raise DataError("empty cross-over subpanel")

    fe = fit_fixed_effects(design)
    keep = np.array([n in fe.names for n in design.names])
    rows = np.concatenate([np.flatnonzero(s1), np.flatnonzero(s2)])
    groups = np.concatenate([g[s1] * 2, g[s2] * 2 + 1])
    Xc = group_demean(design.X[rows][:, keep], groups)
    yc = group_demean(design.y[rows], groups)
    cross = ols(yc, Xc, fe.names, "fe")
    beta_bc = 2.0 * fe.coefficients - cross.coefficients

    Xf = group_demean(design.X[:, keep], g)
    _, psi_full = influence(fe, Xf, g, states)
    _, psi_cross = influence(cross, Xc, g[rows], states)
    phi = 2.0 * psi_full - psi_cross
    G = states.size
    draws = None
    if B is None:
        V = phi.T @ phi
    else:
        xi = np.vstack([replicate_rng(seed, b).standard_normal(G) for b in range(B)])
        draws = BootstrapDraws(beta_bc[None, :] + xi @ phi, fe.names, seed, "multiplier_cluster")
        V = draws.cov()
    return JackknifeResult(fe.names, fe.coefficients, cross.coefficients, beta_bc, s1, s2, N, T, fe, (V + V.T) / 2, draws)
