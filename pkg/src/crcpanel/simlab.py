"""Monte Carlo laboratory: data-generating processes, comparison estimators,
and the replication harness.

Four named designs are provided.  The correlated-random-coefficient baseline
draws heterogeneous slopes that covary with the regressors and a sinusoidal
endogeneity term acting through first-stage residuals; the exogenous null
switches that term off; the discrete-controls design supports saturated
oracle checks; and the feedback design has a predetermined scalar regressor
whose innovations correlate with lagged disturbances.

All randomness flows through a counter-based generator (Philox, 64-bit
seeds); replicate seeds are the master seed XOR the replicate index, so runs
are reproducible replicate by replicate and independent of scheduling.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .ape import EstimationError, run_estimate
from .config import EstimationConfig
from .controls import known_controls
from .correction import SingularCorrectionError, eval_g_batch
from .panel import DifferencedUnit, PanelData, first_difference

__all__ = [
    "DgpSpec",
    "TruthRecord",
    "McResult",
    "generate",
    "true_g",
    "true_mu",
    "fdiv_estimator",
    "naive_crc_estimator",
    "run_replications",
    "g_band_table",
    "write_mc_outputs",
]

PRNG_NAME = "philox4x64"

DGP_NAMES = ("crc-baseline", "exogenous-null", "discrete-V-oracle", "ar1-feedback")

# Baseline slope mixing matrix and noise scale; the disturbance is mean-zero
# normal with variance 0.25, independent of everything else.
BASELINE_A = np.array([[2.0, 1.0], [1.0, 3.0]])
BASELINE_U_SD = 0.5

AR1_RHO = 0.6
AR1_FEEDBACK = 0.5  # loading of next-period innovation in the disturbance
AR1_MU_GAMMA = 0.5

DISCRETE_POINTS = np.array([-0.3, 0.0, 0.3])


@dataclass
class DgpSpec:
    """A fully seeded simulation design."""

    name: str
    n: int
    T: int = 4
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in DGP_NAMES:
            raise ValueError(f"unknown design {self.name!r}; choose from {DGP_NAMES}")


@dataclass
class TruthRecord:
    """Sealed latent draws enabling oracle checks.

    ``f`` holds the endogeneity term by period, ``u`` the idiosyncratic
    disturbance, and ``v`` the true stacked controls, so the outcome can be
    reconstructed exactly from the observables plus this record.
    """

    mu: np.ndarray  # (n, d_x)
    alpha: np.ndarray  # (n,)
    v: np.ndarray  # (n, dv)
    f: np.ndarray  # (n, T)
    u: np.ndarray  # (n, T)

    def rebuild_y(self, p: PanelData) -> np.ndarray:
        return (
            np.einsum("ntd,nd->nt", p.x, self.mu)
            + self.alpha[:, None]
            + self.f
            + self.u
        )


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))


def generate(spec: DgpSpec):
    """Draw one panel; returns (PanelData, TruthRecord)."""
    if spec.name in ("crc-baseline", "exogenous-null"):
        return _gen_baseline(spec, endo=spec.name == "crc-baseline")
    if spec.name == "discrete-V-oracle":
        return _gen_discrete(spec)
    return _gen_ar1(spec)


def _gen_baseline(spec: DgpSpec, endo: bool):
    n, T = spec.n, spec.T
    rng = _rng(spec.seed)
    a = np.asarray(spec.params.get("A", BASELINE_A), dtype=float)
    u_sd = float(spec.params.get("u_sd", BASELINE_U_SD))
    nu = rng.uniform(0.0, 1.0, size=(n, 2))
    mu = nu @ a.T
    xt1 = rng.uniform(0.0, 1.0, size=(n, T))
    zt = rng.uniform(0.0, 1.0, size=(n, T))
    v = rng.uniform(-0.5, 0.5, size=(n, T))
    u = rng.normal(0.0, u_sd, size=(n, T))
    x1 = 5.0 * mu[:, 0:1] ** 0.25 * xt1
    z = 5.0 * mu[:, 1:2] ** 0.25 * zt
    x2 = np.sqrt(x1 + z) + v
    f = np.sin(3.0 * v) if endo else np.zeros((n, T))
    y = x1 * mu[:, 0:1] + x2 * mu[:, 1:2] + f + u
    p = PanelData(y=y, x1=x1[:, :, None], x2=x2[:, :, None], z=z[:, :, None])
    return p, TruthRecord(mu=mu, alpha=np.zeros(n), v=v.copy(), f=f, u=u)


def _gen_discrete(spec: DgpSpec):
    n, T = spec.n, spec.T
    rng = _rng(spec.seed)
    pts = np.asarray(spec.params.get("points", DISCRETE_POINTS), dtype=float)
    group = rng.integers(0, pts.size, size=n)
    z = rng.uniform(0.0, 1.0, size=(n, T))
    u = rng.normal(0.0, 0.3, size=(n, T))
    mu_noise = rng.normal(0.0, 0.2, size=n)
    w = pts / max(np.abs(pts).max(), 1e-12)  # group loadings in [-1, 1]
    # per-period endogeneity amplitudes; mean over groups is zero by symmetry
    amp = 0.3 + 0.2 * np.arange(T) / max(T - 1, 1)
    v = np.tile(pts[group][:, None], (1, T))
    f = amp[None, :] * w[group][:, None]
    mu = 1.0 + 0.4 * w[group] + mu_noise
    x2 = z + v
    y = x2 * mu[:, None] + f + u
    p = PanelData(y=y, x1=np.zeros((n, T, 0)), x2=x2[:, :, None], z=z[:, :, None])
    return p, TruthRecord(mu=mu[:, None], alpha=np.zeros(n), v=v.copy(), f=f, u=u)


def _gen_ar1(spec: DgpSpec):
    n, T = spec.n, spec.T
    rng = _rng(spec.seed)
    rho = float(spec.params.get("rho", AR1_RHO))
    c = float(spec.params.get("feedback", AR1_FEEDBACK))
    gamma = float(spec.params.get("mu_gamma", AR1_MU_GAMMA))
    x1_draw = rng.normal(0.0, 1.0, size=n)
    eta = rng.normal(0.0, 1.0, size=(n, T - 1))  # innovations for t = 2..T
    e = rng.normal(0.0, np.sqrt(3.0) * c, size=(n, T))
    alpha = 0.4 * x1_draw + rng.normal(0.0, 0.3, size=n)
    x = np.empty((n, T))
    x[:, 0] = x1_draw
    for t in range(1, T):
        x[:, t] = rho * x[:, t - 1] + eta[:, t - 1]
    # disturbance loads on the NEXT innovation: corr(eps_t, eta_{t+1}) = 1/2
    f = np.zeros((n, T))
    f[:, : T - 1] = c * eta
    u = e
    mu = 1.0 + gamma * np.tanh(x1_draw)
    y = x * mu[:, None] + alpha[:, None] + f + u
    p = PanelData(y=y, x1=np.zeros((n, T, 0)), x2=x[:, :, None], z=np.zeros((n, T, 0)))
    return p, TruthRecord(mu=mu[:, None], alpha=alpha, v=eta.copy(), f=f, u=u)


def true_g(spec: DgpSpec, v: np.ndarray) -> np.ndarray:
    """True correction vector g(V) for a design, shape (m, T-1)."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    T = spec.T
    if spec.name == "crc-baseline":
        f = np.sin(3.0 * v)
        return f[:, 1:] - f[:, :-1]
    if spec.name == "exogenous-null":
        return np.zeros((v.shape[0], T - 1))
    if spec.name == "ar1-feedback":
        c = float(spec.params.get("feedback", AR1_FEEDBACK))
        f = np.zeros((v.shape[0], T))
        f[:, : T - 1] = c * v
        return f[:, 1:] - f[:, :-1]
    raise ValueError(f"no closed-form correction registered for {spec.name!r}")


def true_mu(spec: DgpSpec) -> np.ndarray:
    """Population mean of the slope vector for a design."""
    if spec.name in ("crc-baseline", "exogenous-null"):
        a = np.asarray(spec.params.get("A", BASELINE_A), dtype=float)
        return a @ np.array([0.5, 0.5])
    return np.array([1.0])


def fdiv_estimator(p: PanelData) -> np.ndarray:
    """Pooled two-stage least squares on first differences.

    Instruments are the differenced exogenous regressors and instruments;
    consistent only when the slopes are homogeneous.  Collapses to plain
    first-difference least squares when there is nothing to instrument.
    """
    dx1 = (p.x1[:, 1:, :] - p.x1[:, :-1, :]).reshape(-1, p.d1)
    dx2 = (p.x2[:, 1:, :] - p.x2[:, :-1, :]).reshape(-1, p.d2)
    dz = (p.z[:, 1:, :] - p.z[:, :-1, :]).reshape(-1, p.dz)
    dy = (p.y[:, 1:] - p.y[:, :-1]).reshape(-1)
    x = np.concatenate([dx1, dx2], axis=1)
    w = np.concatenate([dx1, dz], axis=1)
    if p.d2 == 0 or p.dz == 0:
        w = x
    if w.shape[1] < x.shape[1]:
        raise EstimationError("not enough instruments for the endogenous differences")
    sww = w.T @ w
    swx = w.T @ x
    swy = w.T @ dy
    try:
        a = np.linalg.solve(sww, swx)
        mid = swx.T @ a  # X'W (W'W)^-1 W'X
        rhs = swx.T @ np.linalg.solve(sww, swy)
        if np.linalg.cond(mid) > 1e12:
            raise np.linalg.LinAlgError("moment matrix ill conditioned")
        return np.linalg.solve(mid, rhs)
    except np.linalg.LinAlgError as exc:
        raise EstimationError(f"singular two-stage moment matrix: {exc}") from exc


def naive_crc_estimator(units: list[DifferencedUnit]) -> np.ndarray:
    """Trimmed mean of Q_i ydot_i; ignores time-varying endogeneity."""
    rows = [u.Q @ u.ydot for u in units if u.delta and u.Q is not None]
    if not rows:
        raise EstimationError("no full-rank untrimmed units for the uncorrected estimator")
    return np.mean(rows, axis=0)


@dataclass
class McResult:
    """Replication draws plus summary statistics."""

    spec: DgpSpec
    R: int
    estimators: list[str]
    draws: dict  # name -> (R, d) array, nan on failure
    ses: dict  # name -> (R, d) array, nan when not computed
    g_grid: np.ndarray | None
    g_draws: np.ndarray | None  # (R, len(grid)) first correction component
    failures: list
    summary: dict
    truth: np.ndarray

    def to_summary_dict(self) -> dict:
        return {
            "spec": {
                "name": self.spec.name,
                "n": self.spec.n,
                "T": self.spec.T,
                "seed": self.spec.seed,
                "params": {k: _jsonable(v) for k, v in self.spec.params.items()},
            },
            "prng": PRNG_NAME,
            "R": self.R,
            "truth": list(map(float, self.truth)),
            "estimators": self.summary,
            "n_failures": len(self.failures),
            "failures": self.failures[:20],
        }


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _band_grid(spec: DgpSpec) -> np.ndarray | None:
    """Default evaluation grid: first control coordinate sweeps, others zero."""
    if spec.name not in ("crc-baseline", "exogenous-null"):
        return None
    grid = np.zeros((50, spec.T))
    grid[:, 0] = np.linspace(-0.5, 0.5, 50)
    return grid


def _run_ape(p, config, truth=None, want_se=True):
    cv_override = None
    if truth is not None:  # oracle variant fed the true controls
        cv_override = known_controls(truth.v, mode=config.trim, sigma_frac=config.sigma)
    cfg = config if want_se else config.without_inference()
    return run_estimate(p, cfg, cv_override=cv_override, return_internals=True)


def run_replications(
    spec: DgpSpec,
    R: int,
    estimators: list[str],
    config: EstimationConfig | None = None,
    g_grid: np.ndarray | None = None,
    threads: int = 1,
    collect_g: bool | None = None,
) -> McResult:
    """Run R replicates of a design and apply each requested estimator.

    Estimator names: ``ape`` (the full two-step pipeline), ``ape-oracle``
    (same but fed the true controls), ``fdiv`` and ``crc`` (the comparison
    estimators).  Per-estimator failures are logged and recorded as NaN
    draws; the run aborts only if more than 20% of replicates fail.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    config = config or EstimationConfig()
    d = true_mu(spec).size
    if g_grid is None and (collect_g is None or collect_g):
        g_grid = _band_grid(spec)
    collect = g_grid is not None and ("ape" in estimators)

    draws = {name: np.full((R, d), np.nan) for name in estimators}
    ses = {name: np.full((R, d), np.nan) for name in estimators}
    g_draws = np.full((R, len(g_grid)), np.nan) if collect else None
    failures = []

    def one(r: int):
        sub = replace(spec, seed=spec.seed ^ r)
        p, truth = generate(sub)
        out = {}
        errs = []
        gvals = None
        units = None
        for name in estimators:
            try:
                if name == "ape":
                    est, internals = _run_ape(p, config, want_se=config.inference != "none")
                    out[name] = (est.mu_hat, est.se)
                    units = internals.get("units", units)
                    if collect and internals:
                        cv, ge = internals["cv"], internals["ge"]
                        gv, _ = eval_g_batch(ge, _clip_grid(g_grid, cv), on_singular="zero")
                        gvals = gv[:, 0]
                elif name == "ape-oracle":
                    est, _ = _run_ape(p, config, truth=truth, want_se=False)
                    out[name] = (est.mu_hat, None)
                elif name == "fdiv":
                    out[name] = (fdiv_estimator(p), None)
                elif name == "crc":
                    if units is None:
                        units = first_difference(p, config.delta0)
                    out[name] = (naive_crc_estimator(units), None)
                else:
                    raise ValueError(f"unknown estimator {name!r}")
            except (EstimationError, SingularCorrectionError, np.linalg.LinAlgError) as exc:
                errs.append((r, name, str(exc)))
        return r, out, errs, gvals

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(R)))
    else:
        results = [one(r) for r in range(R)]

    failed_replicates = set()
    for r, out, errs, gvals in results:
        for name, (v, s) in out.items():
            draws[name][r] = v
            if s is not None:
                ses[name][r] = s
        for err in errs:
            failures.append(err)
            failed_replicates.add(err[0])
        if gvals is not None and g_draws is not None:
            g_draws[r] = gvals

    if len(failed_replicates) > 0.2 * R:
        raise EstimationError(
            f"{len(failed_replicates)}/{R} replicates failed; first failures: "
            + "; ".join(str(f) for f in failures[:5])
        )

    summary = {}
    for name in estimators:
        arr = draws[name]
        ok = ~np.isnan(arr[:, 0])
        summary[name] = {
            "mean": arr[ok].mean(axis=0).tolist() if ok.any() else None,
            "sd": arr[ok].std(axis=0, ddof=1).tolist() if ok.sum() > 1 else None,
            "q5": np.quantile(arr[ok], 0.05, axis=0).tolist() if ok.any() else None,
            "q95": np.quantile(arr[ok], 0.95, axis=0).tolist() if ok.any() else None,
            "n_ok": int(ok.sum()),
        }
    return McResult(
        spec=spec,
        R=R,
        estimators=list(estimators),
        draws=draws,
        ses=ses,
        g_grid=g_grid if collect else None,
        g_draws=g_draws,
        failures=failures,
        summary=summary,
        truth=true_mu(spec),
    )


def _clip_grid(grid, cv):
    # grid points must lie in the fitted basis domain; clamp to the box
    box = cv.extended_box
    return np.clip(grid, box[:, 0], box[:, 1])


def g_band_table(mc: McResult, grid: np.ndarray | None = None) -> pd.DataFrame:
    """Pointwise mean and 5/95% quantiles of the fitted correction on the grid."""
    if mc.g_draws is None:
        raise ValueError("the replication run did not store correction draws")
    grid = mc.g_grid if grid is None else grid
    ok = ~np.isnan(mc.g_draws[:, 0])
    gd = mc.g_draws[ok]
    truth = true_g(mc.spec, grid)[:, 0]
    return pd.DataFrame(
        {
            "v1": grid[:, 0],
            "true_g": truth,
            "mean_ghat": gd.mean(axis=0),
            "q5": np.quantile(gd, 0.05, axis=0),
            "q95": np.quantile(gd, 0.95, axis=0),
        }
    )


def write_mc_outputs(mc: McResult, out_dir) -> dict:
    """Write mc_draws.csv, g_band.csv (when available) and summary.json."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name in mc.estimators:
        arr = mc.draws[name]
        sarr = mc.ses[name]
        for r in range(mc.R):
            for j in range(arr.shape[1]):
                rows.append(
                    {
                        "replicate": r,
                        "estimator": name,
                        "component": j + 1,
                        "value": arr[r, j],
                        "se": sarr[r, j],
                    }
                )
    paths = {}
    draws_path = out / "mc_draws.csv"
    pd.DataFrame(rows).to_csv(draws_path, index=False)
    paths["mc_draws"] = draws_path
    if mc.g_draws is not None:
        band_path = out / "g_band.csv"
        g_band_table(mc).to_csv(band_path, index=False)
        paths["g_band"] = band_path
    summary_path = out / "summary.json"
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(mc.to_summary_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["summary"] = summary_path
    return paths
