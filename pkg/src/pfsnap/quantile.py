"""Quantile regression and distributional effect profiles.

The check-loss problem is solved through its bounded dual linear program
with a primal-dual interior point method (Mehrotra predictor-corrector).
The interior solution is then snapped to an exact basic solution, and when
the optimum is not unique a small secondary LP picks the minimiser with the
lowest mean fitted value, so results never depend on solver noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize, sparse, stats

from .errors import ConvergenceError, RankDeficiencyError
from .panel_store import as_frame
from .regress import CONST, FitResult, _codes

STEP_DAMP = 0.99995
DEFAULT_TAUS = tuple(np.round(np.arange(1, 10) / 10, 10))


def check_loss(resid, tau, weights=None) -> float:
    """Weighted check loss ``sum w_i r_i (tau - 1[r_i < 0])``."""
    r = np.asarray(resid, dtype=float)
    w = np.ones_like(r) if weights is None else np.asarray(weights, dtype=float)
    return float(np.dot(w, r * (tau - (r < 0))))


# ---------------------------------------------------------------------------
# interior point on the dual


def _step_to_boundary(*pairs):
    step = np.inf
    for v, dv in pairs:
        neg = dv < 0
        if neg.any():
            step = min(step, float(np.min(-v[neg] / dv[neg])))
    return step


def _frisch_newton(X, y, tau, tol=1e-11, max_iter=200):
    """Interior point for ``max y'a  s.t.  X'a = (1 - tau) X'1, 0 <= a <= 1``.

    ``X`` and ``y`` already carry the observation weights. The equality
    multipliers of this program are minus the regression coefficients.
    Returns ``(coef, a, iterations, converged)``. On a non-unique optimum
    the Newton system can turn singular near the end; the current iterate
    is then returned with ``converged=False``.
    """
    n, p = X.shape
    A = X.T
    c = -y
    b = (1.0 - tau) * X.sum(axis=0)
    x = np.full(n, 1.0 - tau)
    s = np.full(n, tau)
    beta0, *_ = np.linalg.lstsq(X, y, rcond=None)
    dual = -beta0
    r = y - X @ beta0
    shift = max(np.abs(r).mean(), 1e-8)
    z = np.maximum(-r, 0.0) + shift
    w = np.maximum(r, 0.0) + shift
    scale = np.abs(y).sum() or 1.0
    for it in range(max_iter):
        r_p = b - A @ x
        r_d = c - A.T @ dual - z + w
        gap = float(x @ z + s @ w)
        if gap <= tol * scale and np.abs(r_d).max() <= 1e-9 * (1.0 + np.abs(c).max()):
            return -dual, x, it, True
        # rows pinned at zero residual make q huge; the cap only guards overflow
        with np.errstate(over="ignore", divide="ignore"):
            q = np.minimum(1.0 / (z / x + w / s), 1e150)
        M = (A * q) @ A.T

        def solve(rhs):
            dy = np.linalg.solve(M, r_p - A @ (q * rhs))
            return dy, q * (A.T @ dy + rhs)

        try:
            # predictor: Newton step aimed at zero complementarity
            dy, dx = solve(-z + w - r_d)
            ds = -dx
            dz = -z - (z / x) * dx
            dw = -w + (w / s) * dx
            ap = min(1.0, _step_to_boundary((x, dx), (s, ds)))
            ad = min(1.0, _step_to_boundary((z, dz), (w, dw)))
            gap_aff = float((x + ap * dx) @ (z + ad * dz) + (s + ap * ds) @ (w + ad * dw))
            mu = (gap_aff / gap) ** 3 * gap / (2 * n)

            # corrector: recentre and add the predictor's second-order terms
            cx = (mu - dx * dz) / x
            cs = (mu - ds * dw) / s
            dy, dx = solve(cx - z - (cs - w) - r_d)
        except np.linalg.LinAlgError:
            return -dual, x, it, False
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            return -dual, x, it, False
        ds = -dx
        dz = cx - z - (z / x) * dx
        dw = cs - w - (w / s) * ds
        ap = min(1.0, STEP_DAMP * _step_to_boundary((x, dx), (s, ds)))
        ad = min(1.0, STEP_DAMP * _step_to_boundary((z, dz), (w, dw)))
        x = x + ap * dx
        s = s + ap * ds
        dual = dual + ad * dy
        z = z + ad * dz
        w = w + ad * dw
    return -dual, x, max_iter, False


# ---------------------------------------------------------------------------
# exact basic solutions


def _basis_rows(X, order):
    """First ``p`` rows in ``order`` that are linearly independent."""
    n, p = X.shape
    chosen = []
    Q = np.zeros((p, 0))
    norm0 = np.abs(X).max() or 1.0
    for i in order:
        v = X[i] - Q @ (Q.T @ X[i])
        v = v - Q @ (Q.T @ v)
        nv = np.linalg.norm(v)
        if nv > 1e-10 * max(np.linalg.norm(X[i]), norm0 * 1e-6):
            chosen.append(int(i))
            Q = np.column_stack([Q, v / nv])
            if len(chosen) == p:
                return np.array(chosen)
    return None


def _snap(X, y, coef):
    """Basic solution through the ``p`` rows with the smallest residuals at ``coef``.

    Uses the unweighted rows: positive row weights do not change which
    coefficient vector interpolates a set of observations.
    """
    r = y - X @ coef
    order = np.argsort(np.abs(r), kind="mergesort")
    h = _basis_rows(X, order)
    if h is None:
        return None
    return np.linalg.solve(X[h], y[h])


def _lp_optimum(X, y, tau):
    """Optimal check loss from a plain simplex solve (fallback only)."""
    n, p = X.shape
    eye = sparse.identity(n, format="csr")
    out = optimize.linprog(
        np.r_[np.zeros(p), np.full(n, tau), np.full(n, 1.0 - tau)],
        A_eq=sparse.hstack([sparse.csr_matrix(X), eye, -eye], format="csr"),
        b_eq=y,
        bounds=[(None, None)] * p + [(0, None)] * (2 * n),
        method="highs-ds",
    )
    if out.status != 0:
        raise ConvergenceError(f"quantile LP failed: {out.message}")
    return out.x[:p]


def _tie_break(X, y, tau, objective, mean_row):
    """Among minimisers of the check loss, the one with the lowest ``mean_row @ b``."""
    n, p = X.shape
    # variables: b (free, p), u >= 0 (n), v >= 0 (n); X b + u - v = y
    cost = np.r_[mean_row, np.zeros(2 * n)]
    eye = sparse.identity(n, format="csr")
    A_eq = sparse.hstack([sparse.csr_matrix(X), eye, -eye], format="csr")
    loss_row = np.r_[np.zeros(p), np.full(n, tau), np.full(n, 1.0 - tau)]
    bound = objective * (1.0 + 1e-12) + 1e-14 * max(np.abs(y).sum(), 1.0)
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    out = optimize.linprog(
        cost,
        A_ub=loss_row[None, :],
        b_ub=[bound],
        A_eq=A_eq,
        b_eq=y,
        bounds=bounds,
        method="highs-ds",
    )
    if out.status != 0:
        return None
    return out.x[:p]


def _solve(X, y, w, tau):
    """Exact minimiser of the weighted check loss with the lower-fit convention.

    The interior point converges to the centre of the optimal face. When
    that face is a single vertex, snapping reproduces it; when the snapped
    vertex sits visibly away from the interior solution the optimum is not
    unique and the tie-break LP chooses among the minimisers.
    """
    Xw, yw = X * w[:, None], y * w
    coef_ipm, _, iters, converged = _frisch_newton(Xw, yw, tau)
    info = {"ipm_iterations": iters, "ipm_converged": float(converged), "vertex": 0.0, "tie_break": 0.0}
    scale = np.abs(yw).sum() or 1.0

    def loss(b):
        return check_loss(y - X @ b, tau, w)

    obj_ipm = loss(coef_ipm)
    slack = 1e-12 * max(obj_ipm, scale * 1e-3)
    coef = coef_ipm
    snapped = _snap(X, y, coef_ipm)
    if snapped is not None and loss(snapped) <= obj_ipm + slack:
        coef = snapped
        info["vertex"] = 1.0
    elif not converged:
        coef = _lp_optimum(Xw, yw, tau)
        snapped = _snap(X, y, coef)
        if snapped is not None and loss(snapped) <= loss(coef) + slack:
            coef = snapped
            info["vertex"] = 1.0
        coef_ipm = coef
    spread = np.abs(coef - coef_ipm).max() / (1.0 + np.abs(coef).max())
    if spread > 1e-7 or not info["vertex"]:
        obj = min(obj_ipm, loss(coef))
        mean_row = Xw.mean(axis=0)
        alt = _tie_break(Xw, yw, tau, obj, mean_row)
        if alt is not None:
            snapped = _snap(X, y, alt)
            if snapped is not None and loss(snapped) <= obj + slack:
                alt = snapped
                info["vertex"] = 1.0
            if mean_row @ alt <= mean_row @ coef + 1e-12 * (1.0 + abs(mean_row @ coef)):
                coef = alt
            info["tie_break"] = 1.0
    return coef, info


# ---------------------------------------------------------------------------
# covariance


def hall_sheather(n, tau, alpha=0.05) -> float:
    """Hall and Sheather bandwidth on the probability scale."""
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    q = stats.norm.ppf(tau)
    f = stats.norm.pdf(q)
    return n ** (-1.0 / 3.0) * z ** (2.0 / 3.0) * (1.5 * f * f / (2.0 * q * q + 1.0)) ** (1.0 / 3.0)


def powell_vcov(X, resid, tau, weights=None, cluster=None, dof_adjust=True):
    """Cluster-robust sandwich with a uniform-kernel (Powell) density estimate.

    The bandwidth on the residual scale is ``kappa * (Phi^-1(tau + h) -
    Phi^-1(tau - h))`` with ``h`` the Hall and Sheather bandwidth and
    ``kappa = min(sd, IQR / 1.34)`` of the residuals.
    """
    X = np.asarray(X, dtype=float)
    r = np.asarray(resid, dtype=float)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    h = hall_sheather(n, tau)
    lo, hi = max(tau - h, 1e-10), min(tau + h, 1 - 1e-10)
    sd = float(np.sqrt(np.average((r - np.average(r, weights=w)) ** 2, weights=w)))
    q75, q25 = np.percentile(r, [75, 25])
    kappa = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    bw = kappa * (stats.norm.ppf(hi) - stats.norm.ppf(lo))
    if not bw > 0:
        return np.full((p, p), np.nan), bw
    inside = (np.abs(r) <= bw).astype(float)
    Amat = X.T @ ((w * inside)[:, None] * X) / (2.0 * bw)
    psi = tau - (r < 0)
    codes = np.arange(n) if cluster is None else _codes(np.asarray(cluster))[0]
    G = int(codes.max()) + 1
    scores = np.zeros((G, p))
    np.add.at(scores, codes, (w * psi)[:, None] * X)
    meat = scores.T @ scores
    if dof_adjust and G > 1:
        meat *= G / (G - 1) * (n - 1) / max(n - p, 1)
    try:
        Ainv = np.linalg.inv(Amat)
    except np.linalg.LinAlgError:
        return np.full((p, p), np.nan), bw
    V = Ainv @ meat @ Ainv
    return (V + V.T) / 2, bw


# ---------------------------------------------------------------------------
# public API


def demean_within(panel, columns, individual="individual_id", suffix=""):
    """Subtract each column's within-individual (unweighted) mean.

    With the default empty ``suffix`` the columns are replaced; otherwise
    the demeaned copies are added under ``{column}{suffix}``.
    """
    df = as_frame(panel)
    missing = [c for c in columns if c not in df]
    if missing:
        raise KeyError(f"unknown column(s): {missing}")
    out = df.copy()
    grouped = df.groupby(individual, sort=False)
    for c in columns:
        out[f"{c}{suffix}"] = df[c] - grouped[c].transform("mean")
    return panel.with_data(out) if hasattr(panel, "with_data") else out


def qreg_fit(outcome, regressors, tau, weights=None, panel=None, *, cluster=None, intercept=True) -> FitResult:
    """Weighted quantile regression at quantile ``tau``.

    Minimises ``sum w_i rho_tau(y_i - x_i'b)`` exactly (a basic solution of
    the LP). When several coefficient vectors attain the minimum, the one
    with the lowest weighted mean fitted value is returned; for an
    intercept-only fit this is the left-continuous weighted quantile.
    Standard errors are Powell-sandwich, clustered on ``cluster`` if given;
    they are NaN when the fit interpolates (as many rows as coefficients).

    ``weights`` may be a column name or an array aligned with ``panel``.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie strictly between 0 and 1")
    df = as_frame(panel)
    regressors = [regressors] if isinstance(regressors, str) else list(regressors)
    cols = [outcome, *regressors]
    missing = [c for c in cols if c not in df]
    if missing:
        raise KeyError(f"unknown column(s): {missing}")
    if isinstance(weights, str):
        w_all = df[weights].to_numpy(dtype=float)
    elif weights is None:
        w_all = np.ones(len(df))
    else:
        w_all = np.asarray(weights, dtype=float)
    keep = df[cols].notna().all(axis=1).to_numpy() & (w_all > 0)
    sub = df.loc[keep]
    w = w_all[keep]
    y = sub[outcome].to_numpy(dtype=float)
    names = ([CONST] if intercept else []) + regressors
    Xcols = ([np.ones(len(sub))] if intercept else []) + [sub[c].to_numpy(dtype=float) for c in regressors]
    X = np.column_stack(Xcols) if Xcols else np.zeros((len(sub), 0))
    n, p = X.shape
    if p == 0 or n < p:
        raise RankDeficiencyError("degenerate quantile design", names)
    if np.linalg.matrix_rank(X * np.sqrt(w)[:, None]) < p:
        raise RankDeficiencyError("quantile design is rank deficient", names)
    wn = w / w.mean()
    coef, info = _solve(X, y, wn, tau)
    resid = y - X @ coef
    cl = sub[cluster].to_numpy() if cluster else None
    vcov, bw = powell_vcov(X, resid, tau, wn, cl)
    info.update(
        objective=check_loss(resid, tau, w),
        bandwidth=bw,
        tau=tau,
        n_clusters=len(np.unique(cl)) if cl is not None else n,
    )
    return FitResult(
        names=tuple(names),
        coef=coef,
        vcov=vcov,
        residuals=resid,
        fitted=y - resid,
        n_obs=n,
        r_squared=np.nan,
        dof=n - p,
        diagnostics=info,
        index=sub.index.to_numpy(),
        family="quantile",
    )


@dataclass(frozen=True)
class QuantileProfile:
    """Coefficient of one regressor across a grid of quantiles."""

    taus: tuple
    estimates: np.ndarray
    std_errors: np.ndarray
    term: str = ""
    level: float = 0.95
    fits: tuple = field(default=(), repr=False)

    def __post_init__(self):
        t = np.asarray(self.taus, dtype=float)
        if t.size == 0 or np.any(t <= 0) or np.any(t >= 1) or np.any(np.diff(t) <= 0):
            raise ValueError("taus must be strictly increasing inside (0, 1)")

    @property
    def ci(self):
        z = stats.norm.ppf(0.5 + self.level / 2)
        return self.estimates - z * self.std_errors, self.estimates + z * self.std_errors

    def to_frame(self) -> pd.DataFrame:
        lo, hi = self.ci
        return pd.DataFrame(
            {"tau": list(self.taus), "estimate": self.estimates, "se": self.std_errors, "ci_low": lo, "ci_high": hi}
        )


def quantile_effect_profile(
    outcome,
    predicted_participation,
    controls=(),
    tau_grid=DEFAULT_TAUS,
    panel=None,
    *,
    weights=None,
    cluster="individual_id",
    individual="individual_id",
    demean=True,
) -> QuantileProfile:
    """Quantile-regression coefficient of (instrumented) participation per tau.

    Outcome, participation and controls are demeaned within individual
    before fitting, an approximation to individual fixed effects that does
    not claim consistency for quantile effects.
    """
    df = as_frame(panel)
    controls = list(controls)
    cols = [outcome, predicted_participation, *controls]
    if demean:
        work = df.dropna(subset=cols)
        work = demean_within(work, cols, individual)
    else:
        work = df
    if isinstance(weights, str):
        wts = weights
    elif weights is None:
        wts = None
    else:
        wts = pd.Series(np.asarray(weights, dtype=float), index=df.index).loc[work.index].to_numpy()
    fits = tuple(
        qreg_fit(outcome, [predicted_participation, *controls], float(t), wts, work, cluster=cluster) for t in tau_grid
    )
    est = np.array([f.params[predicted_participation] for f in fits])
    se = np.array([f.bse[predicted_participation] for f in fits])
    return QuantileProfile(tuple(float(t) for t in tau_grid), est, se, predicted_participation, fits=fits)


def pfs_bin_first_stage(
    panel,
    spi="spi",
    pfs="pfs",
    n_bins=4,
    *,
    endogenous="snap",
    controls=(),
    fe=(),
    weight=None,
    cluster="individual_id",
) -> pd.DataFrame:
    """First-stage effect of the instrument on participation by PFS quantile bin.

    Bins are equal-count quantile bins of ``pfs``. Participation is
    regressed on the instrument interacted with every bin indicator, with
    bin-specific intercepts (absorbed when ``fe`` already removes them),
    controls and fixed effects. One row per bin.
    """
    from .regress import ModelSpec, wls_fit

    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    df = as_frame(panel)
    missing = [c for c in (spi, pfs, endogenous, *controls) if c not in df]
    if missing:
        raise KeyError(f"unknown column(s): {missing}")
    usable = df[[spi, pfs, endogenous, *controls, *fe]].notna().all(axis=1)
    values = df.loc[usable, pfs].to_numpy(dtype=float)
    edges = np.quantile(values, np.linspace(0, 1, n_bins + 1))
    bins = np.full(len(df), -1)
    bins[usable.to_numpy()] = np.clip(np.searchsorted(edges[1:-1], values, side="right"), 0, n_bins - 1)
    work = df.copy()
    terms, dummies = [], []
    for k in range(n_bins):
        members = bins == k
        if not members.any():
            raise ValueError(f"PFS bin {k} is empty")
        work[f"_bin{k}"] = members.astype(float)
        work[f"{spi}_x_bin{k}"] = work[spi].to_numpy(dtype=float) * members
        terms.append(f"{spi}_x_bin{k}")
        dummies.append(f"_bin{k}")
    work = work.loc[usable]
    # one bin intercept is the baseline when a constant or FE is present
    spec = ModelSpec(
        outcome=endogenous,
        regressors=(*terms, *dummies[1:], *controls),
        fe=tuple(fe),
        weight=weight,
        cluster=cluster,
    )
    fit = wls_fit(spec, work)
    rows = []
    for k, t in enumerate(terms):
        rows.append(
            {
                "bin": k,
                "pfs_low": edges[k],
                "pfs_high": edges[k + 1],
                "estimate": fit.params[t],
                "std_error": fit.bse[t],
                "n": int((bins == k).sum()),
            }
        )
    return pd.DataFrame(rows)
