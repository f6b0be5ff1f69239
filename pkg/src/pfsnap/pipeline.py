"""End-to-end pipeline: ingest, SPI, PFS, estimation, quantile profiles, report.

Each stage reads its inputs from files and writes its outputs as CSV into
the output directory, so stages can run separately from the command line
and a full run is the same code path executed in order.

Config files are INI text (``configparser`` grammar)::

    [inputs]
    panel = panel.csv          ; relative paths resolve against the config file
    policy = policy.csv
    prevalence = prevalence.csv
    cpi = cpi.csv
    unemployment = unemployment.csv   ; optional

    [columns]                  ; optional role = csv column overrides
    food_exp_pc = foodexp

    [options]
    weights = survey           ; survey | none
    fe = absorb                ; absorb | mundlak
    spi = weighted             ; weighted | unweighted
    estimators = ols, 2sls, interaction, threestep
    taus = 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9
    controls = rp_age, rp_age_sq, ...
    group = low_income_flag
    n_bins = 5
    winsorize = 0.01
    cpi_base_year = 2019
    seed = 0

    [output]
    dir = results
"""

from __future__ import annotations

import configparser
import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .errors import PfsnapError, StageError
from .iv import exogeneity_diag, interaction_iv, semi_elasticity, three_step_iv, tsls_fit, yearly_changes
from .panel_store import DEFAULT_SCHEMA, deflate, load_panel, schema_from_mapping, weighted_summary, winsorize_top
from .pfs import build_pfs_table, mean_spec, read_prevalence
from .quantile import DEFAULT_TAUS, pfs_bin_first_stage, quantile_effect_profile
from .regress import ModelSpec, absorbed_columns, wls_fit
from .spi import SpiWeights, read_policy_csv, spi_table, validate_policy_panel, join_spi

ESTIMATORS = ("ols", "2sls", "interaction", "threestep")
STAGES = ("ingest", "spi", "pfs", "estimate", "quantile", "report")
DEFAULT_CONTROLS = (
    "rp_age",
    "rp_age_sq",
    "rp_female",
    "rp_white",
    "rp_married",
    "rp_employed",
    "rp_disabled",
    "rp_college",
    "hh_size",
    "pct_children",
    "income_k",
)
MONETARY = ("food_exp_pc", "income_pc", "tfp_cost")
WINSORIZED = ("food_exp_pc", "income_pc")
# Written precision; keeps output bytes stable against last-bit noise from
# threaded linear algebra.
FLOAT_FORMAT = "%.12g"

OUTPUTS = {
    "ingest": ("panel_clean.csv", "summary.csv"),
    "spi": ("spi.csv",),
    "pfs": ("pfs.csv", "cutoffs.csv"),
    "estimate": tuple(f"estimates_{e}.csv" for e in ESTIMATORS),
    "quantile": ("quantile_profile.csv", "pfs_bins.csv"),
    "report": ("diagnostics.csv", "manifest.json"),
}


@dataclass(frozen=True)
class PipelineConfig:
    """Everything that determines a pipeline run."""

    panel: str | None = None
    policy: str | None = None
    prevalence: str | None = None
    cpi: str | None = None
    unemployment: str | None = None
    out: str = "results"
    columns: tuple = ()
    weights: str = "survey"
    fe: str = "absorb"
    spi: str = "weighted"
    estimators: tuple = ESTIMATORS
    taus: tuple = DEFAULT_TAUS
    controls: tuple = DEFAULT_CONTROLS
    group: str = "low_income_flag"
    n_bins: int = 5
    winsorize: float = 0.01
    cpi_base_year: int = 2019
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(tuple(p) for p in self.columns))
        for name in ("estimators", "taus", "controls"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))
        if self.weights not in ("survey", "none"):
            raise ValueError("weights must be 'survey' or 'none'")
        if self.fe not in ("absorb", "mundlak"):
            raise ValueError("fe must be 'absorb' or 'mundlak'")
        if self.spi not in ("weighted", "unweighted"):
            raise ValueError("spi must be 'weighted' or 'unweighted'")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ValueError(f"unknown estimator(s) {unknown}; choose from {ESTIMATORS}")
        paths = [Path(p).resolve() for p in self.input_paths().values()]
        if len(set(paths)) != len(paths):
            raise ValueError("input paths must be distinct")
        if any(p == Path(self.out).resolve() for p in paths):
            raise ValueError("output directory coincides with an input path")
        if self.n_bins < 2:
            raise ValueError("n_bins must be at least 2")

    def input_paths(self) -> dict:
        keys = ("panel", "policy", "prevalence", "cpi", "unemployment")
        return {k: getattr(self, k) for k in keys if getattr(self, k)}

    @property
    def weight(self):
        return "weight" if self.weights == "survey" else None


def _split(text):
    return tuple(s.strip() for s in text.replace("\n", ",").split(",") if s.strip())


def load_config(path, **overrides) -> PipelineConfig:
    """Parse an INI config; keyword overrides win over file values (``None`` is ignored)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    cp.read(path, encoding="utf-8")
    base = path.parent
    kw = {}
    if cp.has_section("inputs"):
        for k, v in cp.items("inputs"):
            kw[k] = str((base / v).resolve()) if v else None
    if cp.has_section("columns"):
        kw["columns"] = tuple(cp.items("columns"))
    if cp.has_section("output") and cp.has_option("output", "dir"):
        kw["out"] = str((base / cp.get("output", "dir")).resolve())
    if cp.has_section("options"):
        opt = cp["options"]
        for k in ("weights", "fe", "spi", "group"):
            if k in opt:
                kw[k] = opt[k]
        for k in ("estimators", "controls"):
            if k in opt:
                kw[k] = _split(opt[k])
        if "taus" in opt:
            kw["taus"] = tuple(float(t) for t in _split(opt["taus"]))
        for k in ("n_bins", "cpi_base_year", "seed"):
            if k in opt:
                kw[k] = int(opt[k])
        if "winsorize" in opt:
            kw["winsorize"] = float(opt["winsorize"])
    unknown = set(kw) - {f for f in PipelineConfig.__dataclass_fields__}
    if unknown:
        raise ValueError(f"unknown config key(s): {sorted(unknown)}")
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**kw)


def write_config(cfg: PipelineConfig, path) -> None:
    """Write ``cfg`` as an INI file with paths relative to the file's directory."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        try:
            return str(Path(p).resolve().relative_to(base))
        except ValueError:
            return str(Path(p).resolve())

    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["inputs"] = {k: rel(v) for k, v in cfg.input_paths().items()}
    if cfg.columns:
        cp["columns"] = dict(cfg.columns)
    cp["options"] = {
        "weights": cfg.weights,
        "fe": cfg.fe,
        "spi": cfg.spi,
        "estimators": ", ".join(cfg.estimators),
        "taus": ", ".join(repr(float(t)) for t in cfg.taus),
        "controls": ", ".join(cfg.controls),
        "group": cfg.group,
        "n_bins": str(cfg.n_bins),
        "winsorize": repr(cfg.winsorize),
        "cpi_base_year": str(cfg.cpi_base_year),
        "seed": str(cfg.seed),
    }
    cp["output"] = {"dir": rel(cfg.out)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        cp.write(fh)


# ---------------------------------------------------------------------------
# helpers


def _write(df: pd.DataFrame, path) -> None:
    df.to_csv(path, index=False, lineterminator="\n", float_format=FLOAT_FORMAT, encoding="utf-8")


def _out(cfg) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(cfg, stage, *names) -> list[Path]:
    paths = [Path(cfg.out) / n for n in names]
    missing = [p.name for p in paths if not p.exists()]
    if missing:
        raise StageError(stage, f"missing dependency output(s) {missing}; run the earlier stage(s) first")
    return paths


def _write_diag(cfg, stage, items: dict) -> None:
    rows = [{"stage": stage, "key": k, "value": _fmt(v)} for k, v in items.items()]
    _write(pd.DataFrame(rows, columns=["stage", "key", "value"]), Path(cfg.out) / f"diagnostics_{stage}.csv")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return FLOAT_FORMAT % float(v)
    if isinstance(v, (list, tuple)):
        return ";".join(str(x) for x in v)
    return str(v)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _clean_panel(cfg, stage):
    (path,) = _need(cfg, stage, "panel_clean.csv")
    return load_panel(path).data


# ---------------------------------------------------------------------------
# stages


def stage_ingest(cfg: PipelineConfig) -> dict:
    """Validate the panel, deflate money to base-year dollars, cap the top tail."""
    if not cfg.panel:
        raise StageError("ingest", "no panel input configured")
    out = _out(cfg)
    schema = schema_from_mapping(dict(cfg.columns)) if cfg.columns else DEFAULT_SCHEMA
    panel = load_panel(cfg.panel, schema)
    if panel.violations:
        preview = "; ".join(f"line {ln} {role}={val}" for ln, role, val in panel.violations[:5])
        raise StageError("ingest", f"{len(panel.violations)} domain violation(s): {preview}")
    df = panel.data.copy()
    diag = {"n_rows": len(df), "n_individuals": int(df["individual_id"].nunique())}
    if cfg.cpi:
        cpi = pd.read_csv(cfg.cpi)
        if not {"year", "cpi"} <= set(cpi.columns):
            raise StageError("ingest", "CPI table needs columns 'year' and 'cpi'")
        series = dict(zip(cpi["year"].astype(int), cpi["cpi"].astype(float)))
        if cfg.cpi_base_year not in series:
            raise StageError("ingest", f"CPI series lacks the base year {cfg.cpi_base_year}")
        lacking = sorted(set(df["wave_year"].astype(int)) - set(series))
        if lacking:
            raise StageError("ingest", f"CPI series lacks wave year(s) {lacking}")
        cpi_t = df["wave_year"].map(series).to_numpy(dtype=float)
        for c in MONETARY:
            df[c] = deflate(df[c].to_numpy(dtype=float), cpi_t, series[cfg.cpi_base_year])
        diag["deflated_to"] = cfg.cpi_base_year
    if cfg.winsorize > 0:
        w = df["weight"].to_numpy(dtype=float) if cfg.weight else None
        for c in WINSORIZED:
            df[c] = winsorize_top(df[c].to_numpy(dtype=float), cfg.winsorize, w)
    df["income_k"] = df["income_pc"] / 1000.0
    _write(df, out / "panel_clean.csv")
    cols = [c for c in ("food_exp_pc", "income_k", "snap", *DEFAULT_CONTROLS[:-1], "low_income_flag") if c in df]
    summary = weighted_summary(df, list(dict.fromkeys(cols)), cfg.weight)
    _write(summary, out / "summary.csv")
    _write_diag(cfg, "ingest", diag)
    return diag


def stage_spi(cfg: PipelineConfig) -> dict:
    """Validate the policy panel and build both index variants."""
    if not cfg.policy:
        raise StageError("spi", "no policy input configured")
    out = _out(cfg)
    records = read_policy_csv(cfg.policy)
    report = validate_policy_panel(records)
    fatal = [r for r in report if r["kind"] != "gap"]
    if fatal:
        r = fatal[0]
        raise StageError("spi", f"{len(fatal)} invalid policy record(s); first: {r['state_id']}-{r['year']} {r['detail']}")
    table = spi_table(records)
    _write(table, out / "spi.csv")
    low, high = SpiWeights().bounds()
    diag = {
        "n_state_years": len(table),
        "n_gaps": sum(r["kind"] == "gap" for r in report),
        "weighted_scaling": "theoretical",
        "raw_low": low,
        "raw_high": high,
    }
    _write_diag(cfg, "spi", diag)
    return diag


def stage_pfs(cfg: PipelineConfig) -> dict:
    """Conditional mean and variance fits, PFS and calibrated cutoffs."""
    out = _out(cfg)
    df = _clean_panel(cfg, "pfs")
    if not cfg.prevalence:
        raise StageError("pfs/calibration", "no prevalence table configured for cutoff calibration")
    try:
        rates = read_prevalence(cfg.prevalence)
    except (FileNotFoundError, ValueError) as exc:
        raise StageError("pfs/calibration", f"cannot read prevalence table: {exc}") from exc
    spec = mean_spec(weight=cfg.weight)
    try:
        table, info = build_pfs_table(df, rates, spec)
    except KeyError as exc:
        raise StageError("pfs/calibration", f"prevalence table incomplete: {exc}") from exc
    _write(table, out / "pfs.csv")
    sched = info["cutoffs"]
    _write(sched.to_frame(), out / "cutoffs.csv")
    mean_fit = info["mean_fit"]
    lag = "food_exp_pc_lag2"
    diag = {
        "n_rows": info["n_rows"],
        "n_pfs": info["n_pfs"],
        "n_missing_lag": info["n_missing_lag"],
        "dropped_covariates": info["dropped_covariates"],
        "mean_pfs": _mean_pfs(table, df, cfg.weight),
        "lag_coef": float(mean_fit.params[lag]),
        "lag_sq_coef": float(mean_fit.params[f"{lag}_sq"]),
        "unattainable_years": sched.unattainable,
    }
    insecure = table["pfs"][table["food_insecure"] == 1]
    if len(insecure):
        q20 = float(np.quantile(table["pfs"], 0.2))
        diag["insecure_share_in_bottom20"] = float(np.mean(insecure <= q20))
    _write_diag(cfg, "pfs", diag)
    return diag


def _mean_pfs(table, panel, weight):
    if weight is None:
        return float(table["pfs"].mean())
    w = table.merge(panel[["individual_id", "wave_year", weight]], on=["individual_id", "wave_year"], how="left")
    return float(np.average(w["pfs"], weights=w[weight]))


def _analysis_frame(cfg, stage):
    clean, pfs_path, spi_path = _need(cfg, stage, "panel_clean.csv", "pfs.csv", "spi.csv")
    df = load_panel(clean).data
    pfs = pd.read_csv(pfs_path)[["individual_id", "wave_year", "pfs", "food_insecure"]]
    df = df.drop(columns=["pfs", "food_insecure"], errors="ignore").merge(
        pfs, on=["individual_id", "wave_year"], how="left", validate="one_to_one"
    )
    spi = pd.read_csv(spi_path, dtype={"state_id": str})
    df = join_spi(df, spi, cfg.spi, "spi")
    return df


def _iv_spec(cfg, df):
    """Outcome spec plus the list of controls dropped as absorbed."""
    controls = [c for c in cfg.controls if c in df]
    missing = [c for c in cfg.controls if c not in df]
    if cfg.fe == "absorb":
        fe = ("individual_id", "wave_year")
        sample = df[["pfs", "snap", "spi"]].notna().all(axis=1).to_numpy()
        dropped = absorbed_columns(df, controls, fe, sample)
        controls = [c for c in controls if c not in dropped]
        spec = ModelSpec("pfs", tuple(controls), fe=fe, weight=cfg.weight)
    else:
        dropped = []
        spec = ModelSpec("pfs", tuple(controls), fe=("wave_year",), weight=cfg.weight, mundlak=True)
    return spec, dropped, missing


def stage_estimate(cfg: PipelineConfig) -> dict:
    """OLS, 2SLS, interaction 2SLS and three-step IV of PFS on participation."""
    out = _out(cfg)
    df = _analysis_frame(cfg, "estimate")
    spec, dropped, missing = _iv_spec(cfg, df)
    diag = {"fe_mode": cfg.fe, "dropped_controls": dropped, "missing_controls": missing}
    income = "income_k" if "income_k" in spec.regressors else None
    mean_income = float(np.average(df["income_k"], weights=df["weight"] if cfg.weight else None)) if income else None
    results = {}
    for name in cfg.estimators:
        if name == "ols":
            fit = wls_fit(replace(spec, regressors=("snap", *spec.regressors)), df)
        elif name == "2sls":
            fit = tsls_fit("pfs", "snap", "spi", spec, df)
        elif name == "interaction":
            fit = interaction_iv("pfs", "snap", cfg.group, "spi", spec, df)
        else:
            fit = three_step_iv("pfs", "snap", "spi", spec, df)
        fit.to_csv(out / f"estimates_{name}.csv")
        results[name] = fit
        diag[f"{name}_snap"] = float(fit.params["snap"])
        if name != "ols":
            diag[f"{name}_kp_f"] = float(fit.kp_f)
            diag[f"{name}_weak"] = bool(fit.weak)
        if income:
            diag[f"{name}_semi_elasticity"] = semi_elasticity(fit, income, mean_income)
    # reformat through the shared float format for stable bytes
    for name in results:
        path = out / f"estimates_{name}.csv"
        _write(pd.read_csv(path), path)
    if cfg.unemployment:
        diag.update(_exogeneity(cfg))
    _write_diag(cfg, "estimate", diag)
    return diag


def _exogeneity(cfg) -> dict:
    spi = pd.read_csv(Path(cfg.out) / "spi.csv", dtype={"state_id": str})
    unemp = pd.read_csv(cfg.unemployment, dtype={"state_id": str})
    if not {"state_id", "year", "unemployment_rate"} <= set(unemp.columns):
        raise StageError("estimate", "unemployment table needs state_id, year, unemployment_rate")
    both = spi.merge(unemp, on=["state_id", "year"], how="inner")
    col = f"spi_{cfg.spi}"
    d_spi = yearly_changes(both, col)
    d_un = yearly_changes(both, "unemployment_rate")
    r, p = exogeneity_diag(d_spi.to_numpy(), d_un.to_numpy())
    return {"exogeneity_r": r, "exogeneity_p": p}


def stage_quantile(cfg: PipelineConfig) -> dict:
    """Quantile profile of PFS on instrumented participation, and per-bin first stages."""
    out = _out(cfg)
    df = _analysis_frame(cfg, "quantile")
    spec, _, _ = _iv_spec(cfg, df)
    iv = tsls_fit("pfs", "snap", "spi", spec, df)
    fs = iv.first_stages[0]
    snap_hat = np.full(len(df), np.nan)
    snap_hat[df.index.get_indexer(fs.index)] = fs.fitted
    df["snap_hat"] = snap_hat
    controls = [c for c in spec.regressors if c in df]
    sample = df.dropna(subset=["pfs", "snap_hat", *controls])
    # within-individual demeaning zeroes out time-invariant controls
    invariant = absorbed_columns(sample, controls, ("individual_id",))
    controls = [c for c in controls if c not in invariant]
    profile = quantile_effect_profile("pfs", "snap_hat", controls, cfg.taus, sample, weights=cfg.weight)
    _write(profile.to_frame(), out / "quantile_profile.csv")
    bins = pfs_bin_first_stage(
        df.dropna(subset=["pfs", "snap", "spi"]),
        "spi",
        "pfs",
        cfg.n_bins,
        controls=tuple(spec.regressors),
        fe=spec.fe,
        weight=cfg.weight,
    )
    _write(bins, out / "pfs_bins.csv")
    diag = {
        "n_taus": len(cfg.taus),
        "peak_tau": float(profile.taus[int(np.argmax(profile.estimates))]),
        "share_negative_linear_fit": float(np.mean(fs.fitted < 0)),
    }
    _write_diag(cfg, "quantile", diag)
    return diag


def stage_report(cfg: PipelineConfig) -> dict:
    """Merge stage diagnostics and write the manifest of inputs and outputs."""
    out = _out(cfg)
    parts = [pd.read_csv(out / f"diagnostics_{s}.csv", dtype=str, keep_default_na=False) for s in STAGES[:-1] if (out / f"diagnostics_{s}.csv").exists()]
    if not parts:
        raise StageError("report", "no stage diagnostics found; run the pipeline stages first")
    diag = pd.concat(parts, ignore_index=True)
    _write(diag, out / "diagnostics.csv")
    files = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "package_version": __version__,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "pandas": pd.__version__,
            "scipy": scipy.__version__,
        },
        "config_sha256": config_hash(cfg),
        "config": _portable_config(cfg),
        "inputs": {k: {"file": Path(v).name, "sha256": _sha256(v)} for k, v in cfg.input_paths().items()},
        "outputs": {name: _sha256(out / name) for name in files},
        "seed": cfg.seed,
        "spi_scaling": "theoretical",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"n_outputs": len(files) + 1}


def _portable_config(cfg) -> dict:
    """Config without filesystem paths, so the manifest does not depend on where files live."""
    d = asdict(cfg)
    for k in ("panel", "policy", "prevalence", "cpi", "unemployment", "out"):
        d.pop(k)
    d["columns"] = [list(p) for p in cfg.columns]
    d["estimators"], d["taus"], d["controls"] = list(cfg.estimators), list(cfg.taus), list(cfg.controls)
    return d


def config_hash(cfg: PipelineConfig) -> str:
    """SHA-256 over the portable config and the input file hashes."""
    payload = {
        "config": _portable_config(cfg),
        "inputs": {k: _sha256(v) for k, v in cfg.input_paths().items()},
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


STAGE_FUNCS = {
    "ingest": stage_ingest,
    "spi": stage_spi,
    "pfs": stage_pfs,
    "estimate": stage_estimate,
    "quantile": stage_quantile,
    "report": stage_report,
}


def run_stage(cfg: PipelineConfig, stage: str) -> dict:
    """Run one stage, attributing any failure to it."""
    try:
        return STAGE_FUNCS[stage](cfg)
    except StageError:
        raise
    except (PfsnapError, ValueError, KeyError, FileNotFoundError, np.linalg.LinAlgError) as exc:
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc


@dataclass
class ReportBundle:
    out: Path
    diagnostics: dict = field(default_factory=dict)

    @property
    def files(self) -> list[str]:
        return sorted(p.name for p in self.out.iterdir() if p.is_file())


def run_pipeline(cfg: PipelineConfig) -> ReportBundle:
    """Run every stage in order and return the output location and diagnostics."""
    diag = {}
    for stage in STAGES:
        diag[stage] = run_stage(cfg, stage)
    out = Path(cfg.out)
    return ReportBundle(out, diag)
