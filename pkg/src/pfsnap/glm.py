"""Poisson quasi-MLE and logit via iteratively reweighted least squares.

Fixed effects are absorbed inside every IRLS step by demeaning the working
regression with the current working weights, which is numerically the same
as carrying one dummy per group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConvergenceError, SeparationError
from .regress import (
    Absorber,
    FitResult,
    ModelSpec,
    build_design,
    cluster_vcov,
    linear_predictor,
    recover_effects,
    wls_solve,
    _codes,
    _effects_dict,
    _fe_dof,
)

FAMILIES = ("poisson", "logit")
PROB_CLAMP = 1e-10
# |eta| beyond this means fitted probabilities within ~1e-13 of 0 or 1
SEPARATION_ETA = 30.0


@dataclass(frozen=True)
class GlmSpec(ModelSpec):
    family: str = "poisson"
    max_iter: int = 100
    tol: float = 1e-10

    def __post_init__(self):
        super().__post_init__()
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


def _deviance(family, y, eta, w):
    if family == "poisson":
        mu = np.exp(eta)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(y > 0, y * np.log(y / mu), 0.0)
        return float(2.0 * np.dot(w, term - (y - mu)))
    # -2 loglik of Bernoulli, written through eta for stability
    nll = y * np.logaddexp(0.0, -eta) + (1.0 - y) * np.logaddexp(0.0, eta)
    return float(2.0 * np.dot(w, nll))


def _working(family, y, eta, w):
    if family == "poisson":
        mu = np.exp(eta)
        var = mu
    else:
        mu = expit(eta)
        var = np.clip(mu * (1.0 - mu), PROB_CLAMP, None)
    return mu, var, w * var, eta + (y - mu) / var


def _drop_degenerate_groups(family, codes, y):
    """Rows kept after removing FE groups whose outcome pins the effect at infinity."""
    keep = np.ones(len(y), dtype=bool)
    while True:
        changed = False
        for c in codes:
            g = int(c.max()) + 1
            cnt = np.bincount(c[keep], minlength=g)
            s = np.bincount(c[keep], weights=y[keep], minlength=g)
            if family == "poisson":
                bad_group = (cnt > 0) & (s == 0)
            else:
                bad_group = (cnt > 0) & ((s == 0) | (s == cnt))
            bad = keep & bad_group[c]
            if bad.any():
                keep &= ~bad
                changed = True
        if not changed:
            return keep


def _fit(spec: GlmSpec, panel, family: str) -> FitResult:
    d = build_design(spec, panel)
    y = d.frame[spec.outcome].to_numpy(dtype=float)
    if family == "poisson":
        if np.any(y < 0):
            raise ValueError("Poisson QMLE requires a nonnegative outcome")
        if not np.any(y > 0):
            raise ValueError("all outcomes are zero")
    elif not np.all((y == 0) | (y == 1)):
        raise ValueError("logit requires a binary outcome")

    diag = dict(d.diagnostics)
    dropped = 0
    if d.fe_codes:
        keep = _drop_degenerate_groups(family, d.fe_codes, y)
        dropped = int(np.sum(~keep))
        if dropped:
            d.frame = d.frame.loc[keep]
            d.weights = d.weights[keep]
            d.cluster = d.cluster[keep] if d.cluster is not None else None
            d.fe_codes = _codes(d.frame[list(spec.fe)])
            y = y[keep]
    diag["n_dropped_constant_groups"] = dropped
    if len(y) == 0:
        raise ValueError("no observations left after dropping groups with constant outcome")

    X = d.matrix(d.regressors)
    w = d.weights
    n, k = X.shape
    ybar = float(np.average(y, weights=w))
    if family == "poisson":
        eta = np.full(n, np.log(ybar + 1e-12))
    else:
        p0 = min(max(ybar, PROB_CLAMP), 1.0 - PROB_CLAMP)
        eta = np.full(n, np.log(p0 / (1.0 - p0)))
    dev = _deviance(family, y, eta, w)
    path = [dev]
    converged = False
    for it in range(1, spec.max_iter + 1):
        mu, var, W, z = _working(family, y, eta, w)
        absorb = Absorber(d.fe_codes, W)
        zX = absorb(np.column_stack([z, X]))
        zt, Xt = zX[:, 0], zX[:, 1:]
        beta, cond = wls_solve(Xt, zt, W, d.regressors)
        eta_new = z - (zt - Xt @ beta)
        step = 1.0
        while True:
            cand = eta + step * (eta_new - eta)
            dev_c = _deviance(family, y, cand, w)
            if dev_c <= dev * (1 + 1e-12) + 1e-300 or step < 1e-10:
                break
            step *= 0.5
        change = float(np.abs(cand - eta).max())
        eta, dev = cand, dev_c
        path.append(dev)
        if family == "logit" and np.abs(eta).max() > SEPARATION_ETA:
            raise SeparationError(
                "complete or quasi-complete separation: linear predictor diverges "
                f"(max |eta| = {np.abs(eta).max():.1f}) while the likelihood keeps improving"
            )
        if change < spec.tol * (1.0 + np.abs(eta).max()):
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"IRLS did not converge in {spec.max_iter} iterations")

    # one more weighted solve at the solution: beta and the covariance both
    # use the final working weights
    mu, var, W, z = _working(family, y, eta, w)
    absorb = Absorber(d.fe_codes, W)
    zX = absorb(np.column_stack([z, X]))
    Xt = zX[:, 1:]
    beta, cond = wls_solve(Xt, zX[:, 0], W, d.regressors)
    eta_fit = eta
    work_resid = (y - mu) / var
    vcov = cluster_vcov(Xt, work_resid, W, d.cluster, spec.dof_adjust) if k else np.zeros((0, 0))

    score = X.T @ (w * (y - mu)) if k else np.zeros(0)
    denom = np.abs(X).T @ W if k else np.ones(0)
    grad = float(np.max(np.abs(score) / np.where(denom > 0, denom, 1.0))) if k else 0.0
    for c in d.fe_codes:
        gs = np.bincount(c, weights=w * (y - mu))
        gd = np.bincount(c, weights=W)
        grad = max(grad, float(np.max(np.abs(gs) / np.where(gd > 0, gd, 1.0))))

    null_eta = np.full(n, np.log(ybar) if family == "poisson" else np.log(ybar / (1 - ybar)) if 0 < ybar < 1 else 0.0)
    dev_null = _deviance(family, y, null_eta, w)
    diag.update(
        iterations=it,
        deviance=dev,
        null_deviance=dev_null,
        score_norm=grad,
        condition_number=cond if k else np.nan,
        n_clusters=len(np.unique(d.cluster)) if d.cluster is not None else n,
    )
    fixed = {}
    if d.fe_codes:
        effects = recover_effects(eta_fit - X @ beta, d.fe_codes, W)
        fixed = _effects_dict(spec, d, effects)
    result = FitResult(
        names=tuple(d.regressors),
        coef=beta,
        vcov=vcov,
        residuals=y - mu,
        fitted=mu,
        n_obs=n,
        r_squared=float(1.0 - dev / dev_null) if dev_null > 0 else np.nan,
        dof=int(n - k - _fe_dof(d.fe_codes)),
        diagnostics=diag,
        index=d.index,
        family=family,
        fixed_effects=fixed,
        path=tuple(path),
    )
    return result


def poisson_qmle(spec: GlmSpec, panel) -> FitResult:
    """Poisson quasi-maximum likelihood with absorbed fixed effects.

    Valid for any nonnegative outcome (counts, expenditures, squared
    residuals) as long as the conditional mean is exponential in the
    regressors. Groups of a fixed-effect dimension whose outcome is all zero
    are dropped and counted in ``diagnostics["n_dropped_constant_groups"]``.
    ``r_squared`` is the deviance ratio ``1 - D/D_null``.
    """
    return _fit(spec, panel, "poisson")


def logit_fit(spec: GlmSpec, panel) -> FitResult:
    """Weighted logit by IRLS.

    With fixed effects, groups whose outcome never varies carry no
    information and are dropped before fitting (count in diagnostics).
    Raises :class:`SeparationError` when the likelihood keeps improving
    along a diverging direction.
    """
    return _fit(spec, panel, "logit")


def predict_response(fit: FitResult, panel, family: str | None = None) -> np.ndarray:
    """Mean response ``exp(eta)`` (poisson) or ``1/(1+exp(-eta))`` (logit)."""
    family = family or fit.family
    eta = linear_predictor(fit, panel)
    if family == "poisson":
        return np.exp(eta)
    if family == "logit":
        return expit(eta)
    if family == "linear":
        return eta
    raise ValueError(f"unknown family {family!r}")
