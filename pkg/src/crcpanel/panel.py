"""Balanced panel container, first differences, and per-unit projection algebra.

Every estimator downstream consumes the per-unit objects built here: the
matrix of first differences, the within-projector M that annihilates them,
the left-inverse map Q that recovers the slope vector, and the trim flag
that drops units whose differenced regressors carry too little variation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

__all__ = [
    "PanelData",
    "DifferencedUnit",
    "PanelDataError",
    "load_panel",
    "save_panel",
    "first_difference",
    "resolve_delta0",
    "trim_fraction",
]

# Singular values below RANK_RTOL * s_max count as zero when deciding the
# column rank of the differenced regressor matrix.
RANK_RTOL = 1e-10

# Floor for the automatic trim threshold (1% quantile rule).
DELTA0_FLOOR = 1e-8
DELTA0_QUANTILE = 0.01


class PanelDataError(ValueError):
    """Malformed input panel (unbalanced, non-numeric, wrong shapes)."""


@dataclass
class PanelData:
    """Balanced panel: outcomes, exogenous/endogenous regressors, instruments.

    Shapes: ``y`` (n, T), ``x1`` (n, T, d1), ``x2`` (n, T, d2), ``z`` (n, T, dz).
    Arrays are made read-only at construction; all operations on the panel are
    pure functions.
    """

    y: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    z: np.ndarray
    unit_ids: np.ndarray = None
    time_ids: np.ndarray = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        n, T = self.y.shape
        for name in ("x1", "x2", "z"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim == 2 and arr.shape == (n, T):
                arr = arr[:, :, None]
            if arr.size == 0:
                arr = arr.reshape(n, T, 0)
            if arr.shape[:2] != (n, T):
                raise PanelDataError(f"{name} has shape {arr.shape}, expected ({n}, {T}, .)")
            setattr(self, name, arr)
        if self.unit_ids is None:
            self.unit_ids = np.arange(n)
        if self.time_ids is None:
            self.time_ids = np.arange(1, T + 1)
        for arr in (self.y, self.x1, self.x2, self.z):
            if not np.all(np.isfinite(arr)):
                raise PanelDataError("panel contains non-finite values")
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def d1(self) -> int:
        return self.x1.shape[2]

    @property
    def d2(self) -> int:
        return self.x2.shape[2]

    @property
    def dz(self) -> int:
        return self.z.shape[2]

    @property
    def d_x(self) -> int:
        return self.d1 + self.d2

    @property
    def x(self) -> np.ndarray:
        """All regressors (n, T, d1 + d2), exogenous block first."""
        return np.concatenate([self.x1, self.x2], axis=2)

    def select_periods(self, periods) -> "PanelData":
        """Sub-panel restricted to the given period indices (0-based, sorted)."""
        idx = np.asarray(sorted(periods), dtype=int)
        return PanelData(
            y=self.y[:, idx].copy(),
            x1=self.x1[:, idx].copy(),
            x2=self.x2[:, idx].copy(),
            z=self.z[:, idx].copy(),
            unit_ids=self.unit_ids,
            time_ids=np.asarray(self.time_ids)[idx],
        )

    def with_outcome(self, y_new: np.ndarray) -> "PanelData":
        return PanelData(
            y=np.array(y_new, dtype=float),
            x1=self.x1.copy(),
            x2=self.x2.copy(),
            z=self.z.copy(),
            unit_ids=self.unit_ids,
            time_ids=self.time_ids,
        )

    def take_units(self, idx) -> "PanelData":
        idx = np.asarray(idx, dtype=int)
        return PanelData(
            y=self.y[idx].copy(),
            x1=self.x1[idx].copy(),
            x2=self.x2[idx].copy(),
            z=self.z[idx].copy(),
            unit_ids=np.asarray(self.unit_ids)[idx],
            time_ids=self.time_ids,
        )


def _group_columns(columns, prefix):
    cols = [c for c in columns if c.startswith(prefix + "_")]

    def colkey(c):
        try:
            return int(c[len(prefix) + 1 :])
        except ValueError as exc:
            raise PanelDataError(f"malformed column name {c!r}") from exc

    return sorted(cols, key=colkey)


def load_panel(path, schema: dict | None = None) -> PanelData:
    """Read a long-format CSV with columns unit,time,y,x1_*,x2_*,z_*.

    ``schema`` can rename the id/outcome columns, e.g.
    ``{"unit": "firm", "time": "year", "y": "sales"}``.  Every (unit, time)
    pair must appear exactly once; units are sorted by id and periods
    ascending.
    """
    schema = schema or {}
    unit_c = schema.get("unit", "unit")
    time_c = schema.get("time", "time")
    y_c = schema.get("y", "y")
    try:
        df = pd.read_csv(path)
    except Exception as exc:
        raise PanelDataError(f"cannot read {path}: {exc}") from exc
    for c in (unit_c, time_c, y_c):
        if c not in df.columns:
            raise PanelDataError(f"missing required column {c!r}")

    units = np.sort(df[unit_c].unique())
    times = np.sort(df[time_c].unique())
    n, T = len(units), len(times)
    if len(df) != n * T:
        counts = df.groupby(unit_c)[time_c].count()
        bad = counts.index[counts != T]
        raise PanelDataError(
            f"unbalanced panel: unit {bad[0]!r} has {counts[bad[0]]} rows, expected {T}"
        )
    key = df.duplicated(subset=[unit_c, time_c])
    if key.any():
        row = df[key].iloc[0]
        raise PanelDataError(f"duplicate cell (unit {row[unit_c]!r}, time {row[time_c]!r})")

    x1_cols = _group_columns(df.columns, schema.get("x1", "x1"))
    x2_cols = _group_columns(df.columns, schema.get("x2", "x2"))
    z_cols = _group_columns(df.columns, schema.get("z", "z"))

    value_cols = [y_c] + x1_cols + x2_cols + z_cols
    for c in value_cols:
        converted = pd.to_numeric(df[c], errors="coerce")
        bad = converted.isna() & df[c].notna()
        if bad.any():
            rownum = int(np.nonzero(bad.values)[0][0]) + 2  # 1-based incl. header
            raise PanelDataError(f"non-numeric value in column {c!r} at file row {rownum}")
        if converted.isna().any():
            raise PanelDataError(f"missing value in column {c!r}")
        df[c] = converted

    df = df.sort_values([unit_c, time_c], kind="mergesort")
    y = df[y_c].to_numpy().reshape(n, T)

    def block(cols):
        if not cols:
            return np.zeros((n, T, 0))
        return df[cols].to_numpy().reshape(n, T, len(cols))

    return PanelData(
        y=y, x1=block(x1_cols), x2=block(x2_cols), z=block(z_cols),
        unit_ids=units, time_ids=times,
    )


def save_panel(p: PanelData, path) -> None:
    """Write a panel to the long CSV format accepted by :func:`load_panel`."""
    n, T = p.n, p.T
    data = {
        "unit": np.repeat(np.asarray(p.unit_ids), T),
        "time": np.tile(np.asarray(p.time_ids), n),
        "y": p.y.reshape(-1),
    }
    for name, arr in (("x1", p.x1), ("x2", p.x2), ("z", p.z)):
        for j in range(arr.shape[2]):
            data[f"{name}_{j + 1}"] = arr[:, :, j].reshape(-1)
    pd.DataFrame(data).to_csv(path, index=False)


@dataclass
class DifferencedUnit:
    """First differences of one unit plus its projection algebra.

    ``M`` is the orthogonal projector onto the complement of the columns of
    ``Xdot`` (Moore-Penrose fallback when Xdot is rank-deficient); ``Q`` is
    the left inverse (Xdot'Xdot)^-1 Xdot', present only under full column
    rank.  ``delta`` flags units kept by the determinant trim.
    """

    index: int
    Xdot: np.ndarray
    ydot: np.ndarray
    M: np.ndarray
    Q: np.ndarray | None
    det: float
    delta: bool
    rank: int
    delta0: float

    def __post_init__(self):
        for arr in (self.Xdot, self.ydot, self.M):
            arr.setflags(write=False)
        if self.Q is not None:
            self.Q.setflags(write=False)


def resolve_delta0(dets: np.ndarray, delta0: float | None) -> float:
    """Trim threshold: explicit value, or the 1% det quantile floored at 1e-8."""
    if delta0 is not None:
        if delta0 < 0:
            raise ValueError("delta0 must be >= 0")
        return float(delta0)
    return float(max(np.quantile(np.asarray(dets, dtype=float), DELTA0_QUANTILE), DELTA0_FLOOR))


def first_difference(p: PanelData, delta0: float | None = None) -> list[DifferencedUnit]:
    """Per-unit first differences with projector, left inverse, and trim flag.

    ``delta0=None`` resolves the threshold by the quantile rule over this
    sample.  Rank deficiency is handled (pseudo-inverse projector, absent Q),
    never raised.
    """
    if p.T < 2:
        raise ValueError("first differences need T >= 2")
    x = p.x
    xdot = x[:, 1:, :] - x[:, :-1, :]  # (n, T-1, d_x)
    ydot = p.y[:, 1:] - p.y[:, :-1]
    n, tm1, d_x = xdot.shape

    svds = [np.linalg.svd(xdot[i], full_matrices=False) for i in range(n)]
    dets = np.empty(n)
    for i, (_, s, _) in enumerate(svds):
        s_full = np.zeros(d_x)
        s_full[: s.size] = s
        dets[i] = np.prod(s_full**2)
    d0 = resolve_delta0(dets, delta0)

    units = []
    for i in range(n):
        u, s, vt = svds[i]
        smax = s[0] if s.size else 0.0
        keep = s > RANK_RTOL * smax if smax > 0 else np.zeros(s.shape, bool)
        rank = int(np.sum(keep))
        ur = u[:, keep]
        m = np.eye(tm1) - ur @ ur.T
        q = None
        if rank == d_x and d_x > 0:
            q = (vt[keep].T / s[keep]) @ ur.T  # pinv(Xdot), equals (X'X)^-1 X'
        units.append(
            DifferencedUnit(
                index=i,
                Xdot=xdot[i].copy(),
                ydot=ydot[i].copy(),
                M=m,
                Q=q,
                det=float(dets[i]),
                delta=bool(dets[i] > d0),
                rank=rank,
                delta0=d0,
            )
        )
    return units


def trim_fraction(units: list[DifferencedUnit]) -> float:
    """Fraction of units dropped by the determinant trim."""
    if not units:
        raise ValueError("empty unit list")
    return float(np.mean([not u.delta for u in units]))
