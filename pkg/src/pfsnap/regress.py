"""Weighted least squares with absorbed fixed effects and clustered errors.

Fixed effects are swept out by weighted alternating projections (one
group-demeaning pass per dimension, repeated until the columns stop
moving). Survey weights are analytic weights throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, sparse

from .errors import ConvergenceError, RankDeficiencyError
from .panel_store import as_frame

CONST = "const"


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of one regression.

    Parameters
    ----------
    outcome : str
        Dependent variable.
    regressors : sequence of str
        Right-hand-side columns. An intercept is added automatically when no
        fixed effect absorbs it.
    fe : sequence of str
        Columns whose levels are absorbed as fixed effects.
    weight : str or None
        Survey (analytic) weight column; ``None`` means unit weights.
    cluster : str or None
        Cluster column for the sandwich covariance. ``None`` treats every
        observation as its own cluster.
    mundlak : bool
        Append within-individual means of ``mundlak_columns`` (default: the
        regressors) instead of absorbing an individual effect. Columns that
        never vary within an individual get no mean term.
    sample : str or None
        Boolean column selecting the estimation sample.
    """

    outcome: str
    regressors: tuple = ()
    fe: tuple = ()
    weight: str | None = None
    cluster: str | None = "individual_id"
    mundlak: bool = False
    mundlak_columns: tuple | None = None
    individual: str = "individual_id"
    sample: str | None = None
    intercept: bool = True
    drop_singletons: bool = True
    dof_adjust: bool = True

    def __post_init__(self):
        object.__setattr__(self, "regressors", tuple(self.regressors))
        object.__setattr__(self, "fe", tuple(self.fe))
        if self.mundlak_columns is not None:
            object.__setattr__(self, "mundlak_columns", tuple(self.mundlak_columns))
        if self.outcome in self.regressors:
            raise ValueError(f"outcome {self.outcome!r} also listed as a regressor")
        if self.mundlak and self.individual in self.fe:
            raise ValueError("individual effect cannot be both absorbed and Mundlak-controlled")


@dataclass(frozen=True)
class FitResult:
    """Output of any estimator in the package.

    ``residuals`` and ``fitted`` are on the original outcome scale and are
    aligned with ``index`` (row labels of the estimation sample).
    """

    names: tuple
    coef: np.ndarray
    vcov: np.ndarray
    residuals: np.ndarray
    fitted: np.ndarray
    n_obs: int
    r_squared: float
    dof: int
    diagnostics: dict
    index: np.ndarray
    family: str = "linear"
    fixed_effects: dict = field(default_factory=dict)
    path: tuple = ()

    @property
    def params(self) -> pd.Series:
        return pd.Series(self.coef, index=list(self.names))

    @property
    def bse(self) -> pd.Series:
        return pd.Series(np.sqrt(np.clip(np.diag(self.vcov), 0, None)), index=list(self.names))

    @property
    def tvalues(self) -> pd.Series:
        return self.params / self.bse

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"name": list(self.names), "estimate": self.coef, "std_error": self.bse.to_numpy()}
        )

    def to_csv(self, path) -> None:
        """Write ``(name, estimate, std_error)`` rows followed by ``diag:`` rows."""
        table = self.to_frame()
        diag = pd.DataFrame(
            {
                "name": [f"diag:{k}" for k in sorted(self.diagnostics)],
                "estimate": [float(self.diagnostics[k]) for k in sorted(self.diagnostics)],
                "std_error": np.nan,
            }
        )
        extra = pd.DataFrame(
            {
                "name": ["diag:n_obs", "diag:r_squared", "diag:dof"],
                "estimate": [self.n_obs, self.r_squared, self.dof],
                "std_error": np.nan,
            }
        )
        pd.concat([table, extra, diag], ignore_index=True).to_csv(path, index=False, lineterminator="\n")


def read_fit_csv(path):
    """Inverse of :meth:`FitResult.to_csv`: returns ``(table, diagnostics)``."""
    df = pd.read_csv(path)
    is_diag = df["name"].str.startswith("diag:")
    diag = {n[5:]: v for n, v in zip(df.loc[is_diag, "name"], df.loc[is_diag, "estimate"])}
    return df.loc[~is_diag].reset_index(drop=True), diag


# ---------------------------------------------------------------------------
# fixed-effect absorption


def _codes(keys) -> list[np.ndarray]:
    if isinstance(keys, pd.DataFrame):
        cols = [keys[c] for c in keys.columns]
    elif isinstance(keys, pd.Series):
        cols = [keys]
    else:
        arr = np.asarray(keys)
        if arr.ndim == 1:
            arr = arr[:, None]
        cols = [arr[:, j] for j in range(arr.shape[1])]
    return [pd.factorize(pd.Series(c), sort=True)[0].astype(np.int64) for c in cols]


class Absorber:
    """Reusable weighted within-transformation for fixed group codes."""

    def __init__(self, codes: Sequence[np.ndarray], weights, tol=1e-10, max_sweeps=10_000):
        self.codes = [np.asarray(c, dtype=np.int64) for c in codes]
        self.n = len(self.codes[0]) if self.codes else len(weights)
        self.weights = np.asarray(weights, dtype=float)
        self.tol = tol
        self.max_sweeps = max_sweeps
        self._ind = []
        self._wsum = []
        rows = np.arange(self.n)
        for c in self.codes:
            g = int(c.max()) + 1 if c.size else 0
            ind = sparse.csr_matrix((np.ones(self.n), (c, rows)), shape=(g, self.n))
            wsum = ind @ self.weights
            self._ind.append(ind)
            self._wsum.append(np.where(wsum > 0, wsum, 1.0))

    def group_means(self, X, dim):
        return (self._ind[dim] @ (self.weights[:, None] * X)) / self._wsum[dim][:, None]

    def __call__(self, X):
        X = np.array(X, dtype=float, copy=True)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[:, None]
        if not self.codes or X.shape[1] == 0:
            return X[:, 0] if squeeze else X
        scale = np.maximum(np.abs(X).max(axis=0), 1.0)
        X /= scale
        sweeps = 0
        if len(self.codes) == 1:
            X -= self.group_means(X, 0)[self.codes[0]]
        else:
            while True:
                before = X.copy()
                for d, c in enumerate(self.codes):
                    X -= self.group_means(X, d)[c]
                sweeps += 1
                change = np.abs(X - before).max()
                if change < self.tol:
                    break
                if sweeps >= self.max_sweeps:
                    resid = max(np.abs(self.group_means(X, d)).max() for d in range(len(self.codes)))
                    raise ConvergenceError(
                        f"fixed-effect absorption did not converge in {sweeps} sweeps "
                        f"(max residual group mean {resid:.3g})"
                    )
        self.last_sweeps = sweeps
        X *= scale
        return X[:, 0] if squeeze else X

    def max_group_mean(self, X) -> float:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if not self.codes:
            return 0.0
        return float(max(np.abs(self.group_means(X, d)).max() for d in range(len(self.codes))))


def absorb_fe(data, fe_dims, weights=None, tol=1e-10, max_sweeps=10_000):
    """Weighted within-transformation of every column over all FE dimensions.

    Parameters
    ----------
    data : DataFrame or array (n, k)
    fe_dims : DataFrame, Series or array (n, d) of group keys
    weights : array (n,), optional

    Returns
    -------
    Same type as ``data`` with each column demeaned. Convergence is declared
    when no entry moves by more than ``tol`` (relative to the column's
    largest absolute value) in a full sweep.
    """
    codes = _codes(fe_dims)
    values = data.to_numpy(dtype=float) if isinstance(data, (pd.DataFrame, pd.Series)) else data
    n = len(values)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("negative weights")
    out = Absorber(codes, w, tol, max_sweeps)(values)
    if isinstance(data, pd.DataFrame):
        return pd.DataFrame(out, index=data.index, columns=data.columns)
    if isinstance(data, pd.Series):
        return pd.Series(out, index=data.index, name=data.name)
    return out


def _singleton_mask(codes: Sequence[np.ndarray]) -> np.ndarray:
    """Rows kept after iteratively dropping groups with a single member."""
    keep = np.ones(len(codes[0]), dtype=bool)
    while True:
        changed = False
        for c in codes:
            counts = np.bincount(c[keep], minlength=c.max() + 1)
            bad = keep & (counts[c] == 1)
            if bad.any():
                keep &= ~bad
                changed = True
        if not changed:
            return keep


def recover_effects(offset, codes, weights, tol=1e-12, max_sweeps=10_000):
    """Split a per-row sum of fixed effects into one effect per group.

    Solves ``offset ~ sum_d alpha_d[codes_d]`` by backfitting. The split is
    only identified up to additive normalisation across dimensions.
    """
    offset = np.asarray(offset, dtype=float)
    w = np.asarray(weights, dtype=float)
    effects = [np.zeros(int(c.max()) + 1) for c in codes]
    scale = max(np.abs(offset).max(), 1.0)
    for _ in range(max_sweeps):
        delta = 0.0
        for d, c in enumerate(codes):
            partial = offset - sum(effects[e][codes[e]] for e in range(len(codes)) if e != d)
            num = np.bincount(c, weights=w * partial, minlength=len(effects[d]))
            den = np.bincount(c, weights=w, minlength=len(effects[d]))
            new = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
            delta = max(delta, np.abs(new - effects[d]).max())
            effects[d] = new
        if delta < tol * scale:
            break
    return effects


# ---------------------------------------------------------------------------
# covariance and solves


def cluster_vcov(design, residuals, weights=None, cluster=None, dof_adjust=True, n_params=None):
    """Cluster-robust sandwich ``B (sum_g s_g s_g') B`` with ``B = (X'WX)^-1``.

    ``s_g`` sums the weighted score rows ``w_i x_i e_i`` within cluster g.
    With ``dof_adjust`` the meat is scaled by ``G/(G-1) * (N-1)/(N-K)``.
    ``cluster=None`` puts every observation in its own cluster, which gives
    the heteroskedasticity-robust (HC1) matrix.
    """
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    e = np.asarray(residuals, dtype=float)
    n, k = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if e.shape[0] != n or w.shape[0] != n:
        raise ValueError("design, residuals and weights must have the same length")
    codes = np.arange(n) if cluster is None else _codes(np.asarray(cluster))[0]
    if len(codes) != n:
        raise ValueError("cluster labels must match the number of rows")
    G = int(codes.max()) + 1
    if G < 2:
        raise ValueError("cluster-robust covariance needs at least 2 clusters")
    bread = np.linalg.inv(X.T @ (w[:, None] * X))
    scores = (w * e)[:, None] * X
    agg = sparse.csr_matrix((np.ones(n), (codes, np.arange(n))), shape=(G, n)) @ scores
    meat = agg.T @ agg
    if dof_adjust:
        K = k if n_params is None else n_params
        meat *= G / (G - 1) * (n - 1) / max(n - K, 1)
    V = bread @ meat @ bread
    return (V + V.T) / 2


def wls_solve(X, y, w, names, rank_tol=1e-10):
    """Weighted least squares via column-pivoted QR.

    Raises :class:`RankDeficiencyError` naming the columns that fall below
    ``rank_tol`` times the leading diagonal of R.
    """
    sw = np.sqrt(w)
    Xw = X * sw[:, None]
    yw = y * sw
    k = X.shape[1]
    if k == 0:
        return np.zeros(0), np.nan
    Q, R, piv = linalg.qr(Xw, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rank_tol * d[0])) if d[0] > 0 else 0
    if rank < k:
        bad = [names[j] for j in piv[rank:]]
        raise RankDeficiencyError(f"design is rank deficient; collinear column(s): {bad}", bad)
    beta = np.empty(k)
    beta[piv] = linalg.solve_triangular(R, Q.T @ yw)
    s = np.linalg.svd(R, compute_uv=False)
    return beta, float(s[0] / s[-1])


# ---------------------------------------------------------------------------
# design assembly


def absorbed_columns(panel, columns, fe, sample=None):
    """Columns that are constant within every level of some fixed-effect dimension.

    Such columns are collinear with the absorbed effects. Only rows where
    all of ``columns`` and ``fe`` are present (and ``sample`` is true, when
    given as a boolean mask) are considered.
    """
    df = as_frame(panel)
    columns, fe = list(columns), list(fe)
    if not fe or not columns:
        return []
    ok = df[columns + fe].notna().all(axis=1)
    if sample is not None:
        ok &= np.asarray(sample, dtype=bool)
    sub = df.loc[ok]
    out = []
    for c in columns:
        if any(sub.groupby(dim, sort=False)[c].nunique().max() <= 1 for dim in fe):
            out.append(c)
    return out


def mundlak_augment(panel, columns, individual="individual_id", suffix="_mean"):
    """Append the within-individual (unweighted) mean of each column."""
    df = as_frame(panel)
    missing = [c for c in columns if c not in df]
    if missing:
        raise KeyError(f"unknown column(s): {missing}")
    out = df.copy()
    grouped = df.groupby(individual, sort=False)
    for c in columns:
        out[f"{c}{suffix}"] = grouped[c].transform("mean")
    if hasattr(panel, "with_data"):
        return panel.with_data(out)
    return out


@dataclass
class Design:
    """Estimation sample after filtering, Mundlak augmentation and singleton drops."""

    frame: pd.DataFrame
    regressors: list
    weights: np.ndarray
    fe_codes: list
    cluster: np.ndarray | None
    diagnostics: dict

    @property
    def index(self):
        return self.frame.index.to_numpy()

    def absorber(self, weights=None):
        w = self.weights if weights is None else weights
        return Absorber(self.fe_codes, w)

    def matrix(self, names):
        cols = [np.ones(len(self.frame)) if n == CONST else self.frame[n].to_numpy(dtype=float) for n in names]
        return np.column_stack(cols) if cols else np.zeros((len(self.frame), 0))


def build_design(spec: ModelSpec, panel, extra=()) -> Design:
    """Assemble the estimation sample shared by every estimator."""
    df = as_frame(panel)
    regressors = list(spec.regressors)
    n_invariant = 0
    if spec.mundlak:
        mcols = list(spec.mundlak_columns) if spec.mundlak_columns is not None else list(spec.regressors)
        # the mean of a trait fixed within individual is the trait itself
        varying = [c for c in mcols if c in df and df.groupby(spec.individual, sort=False)[c].nunique().max() > 1]
        n_invariant = sum(c in df for c in mcols) - len(varying)
        mcols = varying + [c for c in mcols if c not in df]
        df = mundlak_augment(df, mcols, spec.individual)
        regressors += [f"{c}_mean" for c in mcols]
    needed = [spec.outcome, *regressors, *extra, *spec.fe]
    if spec.weight:
        needed.append(spec.weight)
    if spec.cluster:
        needed.append(spec.cluster)
    missing = [c for c in dict.fromkeys(needed) if c not in df]
    if missing:
        raise KeyError(f"unknown column(s): {missing}")
    keep = np.ones(len(df), dtype=bool)
    if spec.sample:
        keep &= df[spec.sample].fillna(False).astype(bool).to_numpy()
    for c in dict.fromkeys(needed):
        keep &= df[c].notna().to_numpy()
    w_all = np.ones(len(df)) if spec.weight is None else df[spec.weight].to_numpy(dtype=float)
    if np.any(w_all[keep] < 0):
        raise ValueError("negative weights")
    diag = {"n_rows_input": len(df), "n_dropped_missing": int(np.sum(~keep)), "n_mundlak_invariant": n_invariant}
    zero_w = keep & (w_all <= 0)
    diag["n_dropped_zero_weight"] = int(zero_w.sum())
    keep &= ~zero_w
    sub = df.loc[keep]
    codes = _codes(sub[list(spec.fe)]) if spec.fe else []
    if codes and spec.drop_singletons:
        mask = _singleton_mask(codes)
        diag["n_dropped_singletons"] = int(np.sum(~mask))
        if not mask.all():
            sub = sub.loc[mask]
            codes = _codes(sub[list(spec.fe)])
    else:
        diag["n_dropped_singletons"] = 0
    if len(sub) == 0:
        raise ValueError("empty estimation sample")
    w = np.ones(len(sub)) if spec.weight is None else sub[spec.weight].to_numpy(dtype=float)
    if w.sum() <= 0:
        raise ValueError("zero total weight")
    cl = sub[spec.cluster].to_numpy() if spec.cluster else None
    if not spec.fe and spec.intercept:
        regressors = [CONST, *regressors]
    return Design(sub, regressors, w, codes, cl, diag)


def _fe_dof(codes):
    if not codes:
        return 0
    return sum(int(c.max()) + 1 for c in codes) - (len(codes) - 1)


def _effects_dict(spec, design, effects):
    out = {}
    for name, c, eff in zip(spec.fe, design.fe_codes, effects):
        levels = pd.factorize(design.frame[name], sort=True)[1]
        out[name] = pd.Series(eff, index=levels, name=name)
    return out


def wls_fit(spec: ModelSpec, panel) -> FitResult:
    """Weighted least squares with absorbed fixed effects.

    Coefficients minimise the weighted sum of squared residuals on the
    FE-absorbed data; ``r_squared`` is computed on that absorbed scale. The
    covariance is cluster-robust on ``spec.cluster``.
    """
    d = build_design(spec, panel)
    y = d.frame[spec.outcome].to_numpy(dtype=float)
    X = d.matrix(d.regressors)
    absorb = d.absorber()
    yX = absorb(np.column_stack([y, X]))
    yt, Xt = yX[:, 0], yX[:, 1:]
    beta, cond = wls_solve(Xt, yt, d.weights, d.regressors)
    resid = yt - Xt @ beta
    n, k = Xt.shape
    if n - k <= 0:
        raise RankDeficiencyError("more parameters than observations", d.regressors)
    vcov = cluster_vcov(Xt, resid, d.weights, d.cluster, spec.dof_adjust)
    ybar = np.average(yt, weights=d.weights)
    sst = float(np.dot(d.weights, (yt - ybar) ** 2))
    ssr = float(np.dot(d.weights, resid**2))
    r2 = 1.0 - ssr / sst if sst > 0 else (1.0 if ssr == 0 else np.nan)
    fitted = y - resid
    diag = dict(d.diagnostics)
    diag["condition_number"] = cond
    diag["n_clusters"] = len(np.unique(d.cluster)) if d.cluster is not None else n
    fixed = {}
    if d.fe_codes:
        diag["absorb_sweeps"] = getattr(absorb, "last_sweeps", 0)
        effects = recover_effects(fitted - X @ beta, d.fe_codes, d.weights)
        fixed = _effects_dict(spec, d, effects)
    return FitResult(
        names=tuple(d.regressors),
        coef=beta,
        vcov=vcov,
        residuals=resid,
        fitted=fitted,
        n_obs=n,
        r_squared=float(r2),
        dof=int(n - k - _fe_dof(d.fe_codes)),
        diagnostics=diag,
        index=d.index,
        family="linear",
        fixed_effects=fixed,
    )


def linear_predictor(fit: FitResult, panel) -> np.ndarray:
    """``X b`` plus any recovered fixed effects; NaN for unseen FE levels."""
    df = as_frame(panel)
    missing = [n for n in fit.names if n != CONST and n not in df]
    if missing:
        raise KeyError(f"missing regressor column(s): {missing}")
    eta = np.zeros(len(df))
    for name, b in zip(fit.names, fit.coef):
        eta += b if name == CONST else b * df[name].to_numpy(dtype=float)
    for dim, effects in fit.fixed_effects.items():
        if dim not in df:
            raise KeyError(f"missing fixed-effect column {dim!r}")
        eta += df[dim].map(effects).to_numpy(dtype=float)
    return eta
