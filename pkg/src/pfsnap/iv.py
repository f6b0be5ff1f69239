"""Instrumental-variable estimators for panel data.

Two-stage least squares is computed by explicit projection: every first
stage is a weighted regression of an endogenous column on the excluded
instruments and the controls (after fixed-effect absorption), and the
second stage replaces the endogenous columns by their fitted values. The
covariance uses structural residuals built from the actual endogenous
values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import stats

from .errors import IdentificationError, RankDeficiencyError
from .glm import GlmSpec, logit_fit
from .panel_store import as_frame
from .regress import FitResult, ModelSpec, build_design, cluster_vcov, wls_solve, _fe_dof

MODES = ("linear_2sls", "interaction_2sls", "three_step")
WEAK_F = 10.0


@dataclass(frozen=True)
class IVResult:
    """Structural estimates plus the first stages that produced them.

    ``structural`` holds the coefficients (endogenous columns first, then
    controls) with their cluster-robust covariance; its diagnostics carry
    ``kp_f``, ``mean_outcome`` and the weak-instrument flag.
    """

    structural: FitResult
    first_stages: tuple
    endogenous: tuple
    instruments: tuple
    kp_f: float
    n_obs: int
    mean_outcome: float
    mode: str = "linear_2sls"
    logit_stage: FitResult | None = None
    extra: dict = field(default_factory=dict)

    @property
    def params(self) -> pd.Series:
        return self.structural.params

    @property
    def bse(self) -> pd.Series:
        return self.structural.bse

    @property
    def vcov(self) -> np.ndarray:
        return self.structural.vcov

    @property
    def weak(self) -> bool:
        return not self.kp_f >= WEAK_F

    def to_csv(self, path) -> None:
        self.structural.to_csv(path)


def _as_tuple(x):
    if x is None:
        return ()
    return (x,) if isinstance(x, str) else tuple(x)


def _sqrtm_psd(A):
    vals, vecs = np.linalg.eigh((A + A.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def _partial(target, controls, w):
    """Weighted residual of ``target`` columns on ``controls``."""
    if controls.shape[1] == 0:
        return target
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(controls * sw[:, None], target * sw[:, None], rcond=None)
    return target - controls @ coef


def _cluster_meat_cross(Z, resids, w, cluster):
    """Per-cluster score sums ``sum_i w_i z_i e_ij`` for each equation j."""
    n = Z.shape[0]
    codes = np.arange(n) if cluster is None else pd.factorize(pd.Series(cluster), sort=True)[0]
    G = int(codes.max()) + 1
    sums = []
    for j in range(resids.shape[1]):
        s = np.zeros((G, Z.shape[1]))
        np.add.at(s, codes, (w * resids[:, j])[:, None] * Z)
        sums.append(s)
    return sums, G


def kp_rank_wald(Zp, Dp, E, w, cluster, n_params, dof_adjust=True, vcov=None):
    """Robust rank test of the first-stage coefficient matrix.

    Parameters
    ----------
    Zp : (n, m) excluded instruments, partialled on controls and FE.
    Dp : (n, p) endogenous columns, partialled the same way.
    E : (n, p) first-stage residuals.
    n_params : int
        Parameters per first-stage equation (for the small-sample factor).
    vcov : (m*p, m*p) array, optional
        Covariance of the stacked coefficient columns; defaults to the
        cluster-robust one. Passing the homoskedastic covariance turns the
        statistic into the minimum-eigenvalue one.

    Returns
    -------
    (wald, cd_min_eig) : the robust Wald statistic for the null that the
    coefficient matrix has rank ``p - 1``, and the homoskedastic
    minimum-eigenvalue statistic divided by ``m``.
    """
    n, m = Zp.shape
    p = Dp.shape[1]
    ZWZ = Zp.T @ (w[:, None] * Zp)
    bread = np.linalg.inv(ZWZ)
    Pi = bread @ (Zp.T @ (w[:, None] * Dp))  # (m, p)
    if vcov is None:
        sums, G = _cluster_meat_cross(Zp, E, w, cluster)
        V = np.zeros((m * p, m * p))
        for j in range(p):
            for k in range(p):
                V[j * m:(j + 1) * m, k * m:(k + 1) * m] = bread @ sums[j].T @ sums[k] @ bread
        if dof_adjust:
            V *= G / (G - 1) * (n - 1) / max(n - n_params, 1)
    else:
        V = np.asarray(vcov, dtype=float)

    sig = E.T @ (w[:, None] * E) / max(n - n_params, 1)
    proj = Dp.T @ (w[:, None] * Zp) @ Pi
    sig_isqrt = np.linalg.inv(_sqrtm_psd(sig)) if np.linalg.matrix_rank(sig) == p else None
    cd = np.inf if sig_isqrt is None else float(np.linalg.eigvalsh(sig_isqrt @ proj @ sig_isqrt).min() / m)

    if p == 1:
        pi = Pi[:, 0]
        try:
            return float(pi @ np.linalg.solve(V, pi)), cd
        except np.linalg.LinAlgError:
            return np.inf, cd

    # normalise so the statistic does not depend on the units of Z or D
    Gm = _sqrtm_psd(ZWZ)
    Fm = np.linalg.inv(_sqrtm_psd(E.T @ (w[:, None] * E)))
    theta = Gm @ Pi @ Fm.T
    U, _, Vt = np.linalg.svd(theta, full_matrices=True)
    Vv = Vt.T
    q = p - 1
    U22 = U[q:, q:]
    V22 = Vv[q:, q:]
    A_perp = U[:, q:] @ np.linalg.inv(U22) @ _sqrtm_psd(U22 @ U22.T)
    B_perp = _sqrtm_psd(V22 @ V22.T) @ np.linalg.inv(V22.T) @ Vv[:, q:].T
    lam = (A_perp.T @ theta @ B_perp.T).ravel(order="F")
    K = np.kron(B_perp, A_perp.T) @ np.kron(Fm, Gm)
    omega = K @ V @ K.T
    try:
        return float(lam @ np.linalg.solve(omega, lam)), cd
    except np.linalg.LinAlgError:
        return np.inf, cd


def _prepare(outcome, endogenous, instruments, spec: ModelSpec, panel):
    endogenous = _as_tuple(endogenous)
    instruments = _as_tuple(instruments)
    if not endogenous:
        raise ValueError("at least one endogenous column is required")
    if len(instruments) < len(endogenous):
        raise IdentificationError(
            f"{len(instruments)} excluded instrument(s) for {len(endogenous)} endogenous regressor(s)"
        )
    overlap = set(instruments) & set(spec.regressors)
    if overlap:
        raise IdentificationError(f"instrument(s) {sorted(overlap)} also appear as controls")
    if set(instruments) & set(endogenous):
        if list(instruments) != list(endogenous):
            raise IdentificationError("an endogenous column cannot instrument a different one")
    controls = tuple(c for c in spec.regressors if c not in endogenous)
    mcols = spec.mundlak_columns
    if spec.mundlak and mcols is None:
        mcols = tuple(dict.fromkeys((*controls, *instruments)))
        mcols = tuple(c for c in mcols if c not in endogenous)
    s = replace(spec, outcome=outcome, regressors=controls, mundlak_columns=mcols)
    extra = tuple(dict.fromkeys((*endogenous, *instruments)))
    d = build_design(s, panel, extra=extra)
    return s, d, endogenous, instruments


def tsls_fit(outcome, endogenous, instruments, spec: ModelSpec, panel, *, mode="linear_2sls") -> IVResult:
    """Two-stage least squares with absorbed fixed effects or Mundlak controls.

    Parameters
    ----------
    outcome : str
    endogenous : str or sequence of str
    instruments : str or sequence of str
        Excluded instruments; must not appear among ``spec.regressors``.
    spec : ModelSpec
        Supplies controls (``regressors``), fixed effects, weights, cluster
        and the Mundlak switch. ``spec.outcome`` is ignored. With Mundlak,
        the within-individual means of controls and instruments are added.

    Returns
    -------
    IVResult
        First-stage fitted values are kept as they are, negative values
        included. ``structural.r_squared`` is ``1 - SSR/SST`` on the
        absorbed scale and can be negative.
    """
    s, d, endogenous, instruments = _prepare(outcome, endogenous, instruments, spec, panel)
    frame = d.frame
    w = d.weights
    y = frame[outcome].to_numpy(dtype=float)
    D = np.column_stack([frame[c].to_numpy(dtype=float) for c in endogenous])
    Z = np.column_stack([frame[c].to_numpy(dtype=float) for c in instruments])
    X = d.matrix(d.regressors)
    n = len(y)
    p, m, kx = D.shape[1], Z.shape[1], X.shape[1]
    absorb = d.absorber()
    allcols = absorb(np.column_stack([y, D, Z, X]))
    yt = allcols[:, 0]
    Dt = allcols[:, 1:1 + p]
    Zt = allcols[:, 1 + p:1 + p + m]
    Xt = allcols[:, 1 + p + m:]
    fe_dof = _fe_dof(d.fe_codes)
    diag_base = dict(d.diagnostics)

    # first stages
    W1 = np.column_stack([Zt, Xt])
    names1 = [*instruments, *d.regressors]
    if n - W1.shape[1] <= 0:
        raise RankDeficiencyError("more first-stage parameters than observations", names1)
    first, Dhat, E = [], np.empty_like(Dt), np.empty_like(Dt)
    for j, col in enumerate(endogenous):
        coef, cond = wls_solve(W1, Dt[:, j], w, names1)
        resid = Dt[:, j] - W1 @ coef
        Dhat[:, j] = Dt[:, j] - resid
        E[:, j] = resid
        vc = cluster_vcov(W1, resid, w, d.cluster, s.dof_adjust)
        dbar = np.average(Dt[:, j], weights=w)
        sst = float(np.dot(w, (Dt[:, j] - dbar) ** 2))
        ssr = float(np.dot(w, resid**2))
        first.append(
            FitResult(
                names=tuple(names1),
                coef=coef,
                vcov=vc,
                residuals=resid,
                fitted=D[:, j] - resid,
                n_obs=n,
                r_squared=1.0 - ssr / sst if sst > 0 else np.nan,
                dof=int(n - W1.shape[1] - fe_dof),
                diagnostics={**diag_base, "condition_number": cond, "endogenous": j},
                index=d.index,
                family="linear",
            )
        )

    # second stage
    W2 = np.column_stack([Dhat, Xt])
    names2 = [*endogenous, *d.regressors]
    beta, cond2 = wls_solve(W2, yt, w, names2)
    resid = yt - np.column_stack([Dt, Xt]) @ beta
    vcov = cluster_vcov(W2, resid, w, d.cluster, s.dof_adjust)
    ybar_t = np.average(yt, weights=w)
    sst = float(np.dot(w, (yt - ybar_t) ** 2))
    ssr = float(np.dot(w, resid**2))
    r2 = 1.0 - ssr / sst if sst > 0 else np.nan

    # instrument strength
    Zp = _partial(Zt, Xt, w)
    Dp = _partial(Dt, Xt, w)
    dss = np.array([np.dot(w, Dp[:, j] ** 2) for j in range(p)])
    ess = np.array([np.dot(w, E[:, j] ** 2) for j in range(p)])
    if np.any(ess <= 1e-20 * np.maximum(dss, 1e-300)):
        wald, cd = np.inf, np.inf
    elif p == 1:
        zb = slice(0, m)
        pi = first[0].coef[zb]
        V = first[0].vcov[zb, zb]
        try:
            wald = float(pi @ np.linalg.solve(V, pi))
        except np.linalg.LinAlgError:
            wald = np.inf
        _, cd = kp_rank_wald(Zp, Dp, E, w, d.cluster, W1.shape[1], s.dof_adjust)
    else:
        wald, cd = kp_rank_wald(Zp, Dp, E, w, d.cluster, W1.shape[1], s.dof_adjust)
    kp_f = wald / m

    mean_outcome = float(np.average(y, weights=w))
    diag = {
        **diag_base,
        "condition_number": cond2,
        "kp_f": kp_f,
        "cd_min_eig": cd,
        "weak_instrument": float(not kp_f >= WEAK_F),
        "mean_outcome": mean_outcome,
        "n_clusters": len(np.unique(d.cluster)) if d.cluster is not None else n,
        "n_instruments": m,
    }
    structural = FitResult(
        names=tuple(names2),
        coef=beta,
        vcov=vcov,
        residuals=resid,
        fitted=y - resid,
        n_obs=n,
        r_squared=float(r2),
        dof=int(n - W2.shape[1] - fe_dof),
        diagnostics=diag,
        index=d.index,
        family="linear",
    )
    return IVResult(
        structural=structural,
        first_stages=tuple(first),
        endogenous=endogenous,
        instruments=instruments,
        kp_f=float(kp_f),
        n_obs=n,
        mean_outcome=mean_outcome,
        mode=mode,
    )


def first_stage_F(iv: IVResult) -> float:
    """Robust first-stage F for the excluded instruments.

    With one endogenous regressor this is the cluster-robust Wald statistic
    on the instruments divided by their count, which equals the squared
    robust t-statistic when there is a single instrument. With several it
    is the robust rank statistic divided by the instrument count. A first
    stage that fits perfectly returns ``inf``.
    """
    if not iv.first_stages:
        raise ValueError("IV result carries no first stage")
    return iv.kp_f


def _interact(frame, a, b, name):
    return frame[a].to_numpy(dtype=float) * frame[b].to_numpy(dtype=float), name


def interaction_iv(outcome, endogenous, group, instruments, spec: ModelSpec, panel) -> IVResult:
    """2SLS with endogenous-by-group interactions and matching instrument interactions.

    ``group`` is one indicator column or a list of indicators (e.g. quantile
    bins with the base bin omitted). Each endogenous column ``D`` gains
    ``D_x_g`` terms instrumented by ``Z_x_g``. Indicators that vary within
    no absorbed dimension also enter as controls. An indicator that is
    identically zero on the sample is dropped and its coefficient omitted;
    if every indicator is zero the fit is plain :func:`tsls_fit`.
    """
    df = as_frame(panel).copy()
    groups = _as_tuple(group)
    endogenous = _as_tuple(endogenous)
    instruments = _as_tuple(instruments)
    missing = [g for g in groups if g not in df]
    if missing:
        raise KeyError(f"unknown group column(s): {missing}")
    usable = df[[outcome, *endogenous, *instruments, *spec.regressors, *spec.fe]].notna().all(axis=1)
    if spec.sample:
        usable &= df[spec.sample].fillna(False).astype(bool)
    if spec.weight:
        usable &= df[spec.weight] > 0
    active = []
    for g in groups:
        gv = df.loc[usable, g].to_numpy(dtype=float)
        if np.all(gv == 0):
            continue
        if np.all(gv == gv[0]):
            raise ValueError(f"group indicator {g!r} is constant on the estimation sample")
        active.append(g)
    if not active:
        res = tsls_fit(outcome, endogenous, instruments, spec, df, mode="interaction_2sls")
        return replace(res, extra={"dropped_groups": groups})

    endo_all, inst_all, group_controls = list(endogenous), list(instruments), []
    for g in active:
        for dcol in endogenous:
            vals, name = _interact(df, dcol, g, f"{dcol}_x_{g}")
            df[name] = vals
            endo_all.append(name)
        for zcol in instruments:
            vals, name = _interact(df, zcol, g, f"{zcol}_x_{g}")
            df[name] = vals
            inst_all.append(name)
        absorbed = any(df.loc[usable].groupby(fe)[g].nunique().max() == 1 for fe in spec.fe)
        if not absorbed and g not in spec.regressors:
            group_controls.append(g)
    s = replace(spec, regressors=(*spec.regressors, *group_controls))
    res = tsls_fit(outcome, endo_all, inst_all, s, df, mode="interaction_2sls")
    return replace(res, extra={"groups": tuple(active), "dropped_groups": tuple(g for g in groups if g not in active)})


def three_step_iv(outcome, endogenous, instruments, spec: ModelSpec, panel, logit_spec: GlmSpec | None = None) -> IVResult:
    """Logit first stage, then 2SLS with the fitted probability as instrument.

    Step 1 fits a logit of the binary endogenous column on the instruments
    and controls. By default it uses the non-individual fixed effects of
    ``spec`` plus within-individual means of the controls, since a logit
    with individual effects discards every individual whose participation
    never changes. Steps 2 and 3 are :func:`tsls_fit` with the fitted
    probability as the single excluded instrument. Rows the logit cannot
    score are dropped and counted in ``extra``.
    """
    endogenous = _as_tuple(endogenous)
    if len(endogenous) != 1:
        raise ValueError("three-step IV takes exactly one binary endogenous column")
    dcol = endogenous[0]
    instruments = _as_tuple(instruments)
    df = as_frame(panel).copy()
    dv = df[dcol].dropna().to_numpy(dtype=float)
    if not np.all((dv == 0) | (dv == 1)):
        raise ValueError(f"{dcol!r} must be binary for the three-step estimator")
    controls = tuple(c for c in spec.regressors if c != dcol)
    if logit_spec is None:
        non_ind = tuple(f for f in spec.fe if f != spec.individual)
        use_mundlak = bool(controls) and (spec.mundlak or spec.individual in spec.fe)
        logit_spec = GlmSpec(
            outcome=dcol,
            regressors=(*instruments, *controls),
            fe=non_ind,
            weight=spec.weight,
            cluster=spec.cluster,
            mundlak=use_mundlak,
            mundlak_columns=controls if use_mundlak else None,
            individual=spec.individual,
            sample=spec.sample,
            family="logit",
        )
    step1 = logit_fit(logit_spec, df)
    pcol = f"{dcol}_prob"
    prob = np.full(len(df), np.nan)
    pos = df.index.get_indexer(step1.index)
    prob[pos] = step1.fitted
    df[pcol] = prob
    n_unscored = int(np.sum(np.isnan(prob) & df[[outcome, dcol, *instruments, *controls]].notna().all(axis=1).to_numpy()))
    res = tsls_fit(outcome, dcol, pcol, spec, df, mode="three_step")
    return replace(res, logit_stage=step1, extra={"n_unscored": n_unscored, "probability_column": pcol})


def exogeneity_diag(delta_spi, delta_unemp):
    """Pearson correlation of two aligned change series and its two-sided p-value.

    The p-value uses the exact t reference with ``N - 2`` degrees of freedom.
    Pairs with a missing value on either side are dropped.
    """
    a = np.asarray(delta_spi, dtype=float)
    b = np.asarray(delta_unemp, dtype=float)
    if a.shape != b.shape:
        raise ValueError("series must be aligned")
    keep = ~(np.isnan(a) | np.isnan(b))
    a, b = a[keep], b[keep]
    n = a.size
    if n < 3:
        raise ValueError("need at least 3 aligned pairs")
    da, db = a - a.mean(), b - b.mean()
    ssa, ssb = np.dot(da, da), np.dot(db, db)
    if ssa == 0 or ssb == 0:
        raise ValueError("zero variance in a series")
    r = float(np.clip(np.dot(da, db) / np.sqrt(ssa * ssb), -1.0, 1.0))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * np.sqrt((n - 2) / (1.0 - r * r))
    return r, float(2.0 * stats.t.sf(abs(t), n - 2))


def yearly_changes(frame: pd.DataFrame, column, unit="state_id", time="year") -> pd.Series:
    """Change in ``column`` from each unit's previous observed period."""
    ordered = frame.sort_values([unit, time], kind="mergesort")
    return ordered.groupby(unit, sort=False)[column].diff().reindex(frame.index)


def semi_elasticity(fit, income_coefficient: str, mean_income: float) -> float:
    """PFS change from a one-unit rise in log income, evaluated at mean income.

    ``fit`` may be a :class:`FitResult`, an :class:`IVResult` or any mapping
    from coefficient names to values.
    """
    if isinstance(fit, (FitResult, IVResult)):
        params = fit.params
    else:
        params = fit
    if income_coefficient not in params:
        raise KeyError(f"coefficient {income_coefficient!r} not in fit")
    return float(params[income_coefficient]) * float(mean_income)
