"""SNAP Policy Index from state-year policy records.

Ten administrative policies each push the index up (generous) or down
(restrictive). The unweighted index counts adoptions; the weighted index
uses fixed per-policy contributions. Both are mapped onto 1..10.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import pandas as pd

POLICIES = (
    "vehicle_exempt_some",
    "vehicle_exempt_all",
    "bbce",
    "noncitizen_restriction",
    "short_recert_share",
    "simplified_reporting",
    "online_application",
    "ebt_share",
    "fingerprint_required",
    "outreach_ad",
)
SHARE_POLICIES = ("short_recert_share", "ebt_share")
# alternatives: a state exempts some vehicles or all of them, never both
VEHICLE = ("vehicle_exempt_some", "vehicle_exempt_all")

# +1 raises participation (generous), -1 lowers it (restrictive)
SIGNS = {
    "vehicle_exempt_some": 1,
    "vehicle_exempt_all": 1,
    "bbce": 1,
    "noncitizen_restriction": -1,
    "short_recert_share": -1,
    "simplified_reporting": 1,
    "online_application": 1,
    "ebt_share": 1,
    "fingerprint_required": -1,
    "outreach_ad": 1,
}

UNWEIGHTED_OFFSET = 4.0


@dataclass(frozen=True)
class PolicyRecord:
    """Policy settings of one state in one year."""

    state_id: object
    year: int
    vehicle_exempt_some: float = 0.0
    vehicle_exempt_all: float = 0.0
    bbce: float = 0.0
    noncitizen_restriction: float = 0.0
    short_recert_share: float = 0.0
    simplified_reporting: float = 0.0
    online_application: float = 0.0
    ebt_share: float = 0.0
    fingerprint_required: float = 0.0
    outreach_ad: float = 0.0

    def values(self) -> np.ndarray:
        return np.array([float(getattr(self, p)) for p in POLICIES])

    def problems(self) -> list[str]:
        """Invariant violations as human-readable strings (empty when valid)."""
        out = []
        for p in POLICIES:
            v = float(getattr(self, p))
            if p in SHARE_POLICIES:
                if not 0.0 <= v <= 1.0:
                    out.append(f"{p}={v} outside [0, 1]")
            elif v not in (0.0, 1.0):
                out.append(f"{p}={v} is not binary")
        if float(self.vehicle_exempt_some) == 1.0 and float(self.vehicle_exempt_all) == 1.0:
            out.append("vehicle_exempt_some and vehicle_exempt_all are mutually exclusive")
        return out

    def validate(self):
        bad = self.problems()
        if bad:
            raise ValueError(f"invalid policy record {self.state_id}-{self.year}: " + "; ".join(bad))
        return self


@dataclass(frozen=True)
class SpiWeights:
    """Magnitude of each policy's contribution; signs come from ``SIGNS``."""

    vehicle_exempt_some: float = 1.624
    vehicle_exempt_all: float = 1.552
    bbce: float = 1.828
    noncitizen_restriction: float = 4.800
    short_recert_share: float = 3.180
    simplified_reporting: float = 1.132
    online_application: float = 0.456
    ebt_share: float = 0.276
    fingerprint_required: float = 1.864
    outreach_ad: float = 0.148

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"weight for {f.name} must be positive")

    def signed(self) -> np.ndarray:
        return np.array([SIGNS[p] * getattr(self, p) for p in POLICIES])

    def bounds(self) -> tuple[float, float]:
        """Smallest and largest attainable raw sums (one vehicle policy at most)."""
        signed = dict(zip(POLICIES, self.signed()))
        low = math.fsum(v for v in signed.values() if v < 0)
        best_vehicle = max(signed[v] for v in VEHICLE)
        high = math.fsum([best_vehicle, *(v for p, v in signed.items() if v > 0 and p not in VEHICLE)])
        return float(low), float(high)


def _signs() -> np.ndarray:
    return np.array([SIGNS[p] for p in POLICIES], dtype=float)


def unweighted_spi(record: PolicyRecord) -> float:
    """Generous adoptions minus restrictive adoptions, shifted by 4 into [1, 10]."""
    record.validate()
    return math.fsum(_signs() * record.values()) + UNWEIGHTED_OFFSET


def weighted_raw(record: PolicyRecord, weights: SpiWeights = SpiWeights()) -> float:
    """Signed weighted sum before rescaling.

    Summed with ``math.fsum`` so the result does not depend on summation
    order and the extreme records land exactly on the bounds.
    """
    record.validate()
    return math.fsum(weights.signed() * record.values())


def weighted_spi(record: PolicyRecord, weights: SpiWeights = SpiWeights()) -> float:
    """Weighted index affinely mapped so the attainable extremes become 1 and 10."""
    low, high = weights.bounds()
    raw = weighted_raw(record, weights)
    return 1.0 + 9.0 * (raw - low) / (high - low)


def validate_policy_panel(records) -> list[dict]:
    """Report duplicate state-years, invalid records and gaps in year series.

    Each entry is a dict with ``kind`` in {"duplicate", "violation", "gap"}
    and the offending ``state_id``/``year``. Gaps are judged against the
    modal spacing of years within the state.
    """
    report = []
    seen = {}
    by_state: dict = {}
    for r in records:
        key = (r.state_id, int(r.year))
        if key in seen:
            report.append({"kind": "duplicate", "state_id": r.state_id, "year": int(r.year), "detail": "repeated state-year"})
        seen[key] = r
        for msg in r.problems():
            report.append({"kind": "violation", "state_id": r.state_id, "year": int(r.year), "detail": msg})
        by_state.setdefault(r.state_id, set()).add(int(r.year))
    for state in sorted(by_state, key=str):
        years = sorted(by_state[state])
        if len(years) < 3:
            continue
        steps = np.diff(years)
        step = int(pd.Series(steps).mode().min())
        for a, b in zip(years[:-1], years[1:]):
            for missing in range(a + step, b, step):
                report.append({"kind": "gap", "state_id": state, "year": missing, "detail": f"no record between {a} and {b}"})
    return report


def records_from_frame(df: pd.DataFrame) -> list[PolicyRecord]:
    missing = [c for c in ("state_id", "year", *POLICIES) if c not in df]
    if missing:
        raise KeyError(f"policy table lacks column(s): {missing}")
    return [
        PolicyRecord(row["state_id"], int(row["year"]), *(float(row[p]) for p in POLICIES))
        for row in df.to_dict("records")
    ]


def read_policy_csv(path) -> list[PolicyRecord]:
    return records_from_frame(pd.read_csv(path, dtype={"state_id": str}))


def spi_table(records, weights: SpiWeights = SpiWeights()) -> pd.DataFrame:
    """One row per state-year with both index variants, sorted by state and year.

    Raises when any record is invalid.
    """
    rows = [
        {
            "state_id": r.state_id,
            "year": int(r.year),
            "spi_unweighted": unweighted_spi(r),
            "spi_weighted": weighted_spi(r, weights),
        }
        for r in records
    ]
    out = pd.DataFrame(rows, columns=["state_id", "year", "spi_unweighted", "spi_weighted"])
    return out.sort_values(["state_id", "year"], kind="mergesort").reset_index(drop=True)


def join_spi(panel_frame: pd.DataFrame, table: pd.DataFrame, variant="weighted", name="spi") -> pd.DataFrame:
    """Attach the chosen index variant to panel rows by (state_id, wave_year)."""
    if variant not in ("weighted", "unweighted"):
        raise ValueError("variant must be 'weighted' or 'unweighted'")
    src = table[["state_id", "year", f"spi_{variant}"]].rename(columns={"year": "wave_year", f"spi_{variant}": name})
    src = src.astype({"state_id": str})
    left = panel_frame.drop(columns=[name], errors="ignore")
    key = left["state_id"].astype(str)
    out = left.assign(_state_key=key).merge(
        src.rename(columns={"state_id": "_state_key"}), on=["_state_key", "wave_year"], how="left", validate="many_to_one"
    )
    out.index = panel_frame.index
    return out.drop(columns="_state_key")
