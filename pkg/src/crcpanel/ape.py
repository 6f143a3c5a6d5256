"""Final-stage estimators of average effects and their inference.

The trimmed average partial effect is the sample mean, over untrimmed units,
of the per-unit pseudo-coefficient Q_i (ydot_i - g(V_i)); the same per-unit
object yields the intercept mean and the effect of exogenous regressor
interventions.  Inference is either the plug-in asymptotic variance built
from sample analogs of the influence function, or an iid unit-level
bootstrap that reruns the entire pipeline, first stage included.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import EstimationConfig, build_basis_for
from .controls import (
    ControlVariableSet,
    fit_ar1_feedback_controls,
    fit_residual_controls,
)
from .correction import (
    GEstimate,
    SingularCorrectionError,
    eval_g_batch,
    eval_g_jacobian,
    fit_g,
)
from .panel import DifferencedUnit, PanelData, first_difference, trim_fraction
from .sieve import PowerBasis, SieveBasis, series_fit

__all__ = [
    "ApeEstimate",
    "InfluenceParts",
    "EstimationError",
    "estimate_ape",
    "estimate_alpha",
    "policy_effect",
    "estimate_common_b",
    "plug_in_variance",
    "bootstrap_variance",
    "run_estimate",
    "subset_average_ape",
]

COMMON_B_MAX_COND = 1e10
BOOTSTRAP_MAX_FAIL = 0.10


class EstimationError(RuntimeError):
    """Estimation cannot proceed (everything trimmed, singular moments, ...)."""


@dataclass
class ApeEstimate:
    """Trimmed average partial effect with diagnostics.

    ``mu_tilde`` holds the per-unit pseudo-coefficients for untrimmed units
    (row order follows ``used``); the conditional mean of the slopes given
    the regressors is identified by the same expression, which is why the
    per-unit values are worth exposing.
    """

    mu_hat: np.ndarray
    phi_hat: float
    alpha_hat: float | None = None
    se: np.ndarray | None = None
    cov: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    mu_tilde: np.ndarray | None = None
    used: np.ndarray | None = None


@dataclass
class InfluenceParts:
    """Sample analogs of the per-unit influence contributions.

    ``score`` rows are exactly mean-centered; the corrected map uses the
    per-unit pseudo-coefficient in the residual, which annihilates the
    leading residual term for untrimmed units by construction.
    """

    score: np.ndarray  # (n, d_x), mean-zero rows
    qtilde: np.ndarray  # (n, d_x, T-1) corrected map
    udot: np.ndarray  # (n, T-1) residuals
    g_jac: np.ndarray  # (n, T-1, dv) correction derivatives
    eq_at_v: np.ndarray  # (n, d_x, T-1) fitted E(Q^delta | V)
    slot_terms: np.ndarray  # (n, d_x) generated-regressor contribution
    g_fallback_units: list[int] = field(default_factory=list)


def _stack_units(units: list[DifferencedUnit]):
    m = np.stack([u.M for u in units])
    ydot = np.stack([u.ydot for u in units])
    delta = np.array([u.delta for u in units], dtype=bool)
    return m, ydot, delta


def _g_at_units(units, cv, ge):
    """Correction at every unit's controls; fail only for untrimmed units."""
    g, lam = eval_g_batch(ge, cv.Vhat, on_singular="zero")
    bad = lam < ge.eig_floor
    fallback = []
    for i in np.nonzero(bad)[0]:
        if units[i].delta:
            raise SingularCorrectionError(
                f"conditional projector numerically singular at untrimmed unit {i} "
                f"(lambda_min={lam[i]:.3e} < floor {ge.eig_floor:.1e})",
                lambda_min=float(lam[i]),
                unit=int(i),
            )
        fallback.append(int(i))
    return g, fallback


def estimate_ape(
    units: list[DifferencedUnit], cv: ControlVariableSet, ge: GEstimate
) -> ApeEstimate:
    """Trimmed mean of Q_i (ydot_i - g(V_i)) over untrimmed units."""
    n = len(units)
    delta = np.array([u.delta for u in units], dtype=bool)
    d_x = units[0].Xdot.shape[1]
    n_used = int(delta.sum())
    if n_used == 0:
        raise EstimationError("every unit was trimmed; cannot estimate the average effect")
    if n_used < d_x + 1:
        raise EstimationError(f"only {n_used} untrimmed units for {d_x} coefficients")
    g, fallback = _g_at_units(units, cv, ge)
    mu_tilde = np.empty((n_used, d_x))
    for row, i in enumerate(np.nonzero(delta)[0]):
        u = units[i]
        mu_tilde[row] = u.Q @ (u.ydot - g[i])
    mu_hat = mu_tilde.mean(axis=0)
    return ApeEstimate(
        mu_hat=mu_hat,
        phi_hat=float(delta.mean()),
        diagnostics={
            "min_eig": ge.min_eig,
            "trim_fraction": trim_fraction(units),
            "n_used": n_used,
            "delta0": units[0].delta0,
            "g_fallback_units": fallback,
        },
        mu_tilde=mu_tilde,
        used=np.nonzero(delta)[0],
    )


def estimate_alpha(
    p: PanelData, units: list[DifferencedUnit], cv: ControlVariableSet, ge: GEstimate
) -> float:
    """Mean intercept via period-1 levels: E(y_1 - x_1' mu_i)."""
    ape = estimate_ape(units, cv, ge)
    x1lev = p.x[:, 0, :]  # all regressors at the first period
    vals = p.y[ape.used, 0] - np.einsum("id,id->i", x1lev[ape.used], ape.mu_tilde)
    return float(vals.mean())


def policy_effect(
    p: PanelData,
    l,
    t: int,
    units: list[DifferencedUnit],
    cv: ControlVariableSet,
    ge: GEstimate,
) -> float:
    """Average outcome change when x_t is exogenously shifted to l(x_t)."""
    ape = estimate_ape(units, cv, ge)
    xt = p.x[:, t, :]
    lx = np.apply_along_axis(lambda row: np.asarray(l(row), dtype=float), 1, xt)
    if lx.shape != xt.shape:
        raise ValueError("the intervention must map d_x vectors to d_x vectors")
    shift = lx[ape.used] - xt[ape.used]
    return float(np.einsum("id,id->i", shift, ape.mu_tilde).mean())


def estimate_common_b(
    p: PanelData,
    L: np.ndarray,
    ZL: np.ndarray,
    units: list[DifferencedUnit],
    cv: ControlVariableSet,
    basisK: SieveBasis,
):
    """Homogeneous-coefficient block via partial-residual instrumenting.

    Both the outcome differences and the differences of the homogeneous
    regressors are purged of their conditional means given the controls
    (through the inverted projector fit), then the instruments' differences
    identify the coefficient from the projected moment equation.  Returns the
    coefficient, the outcome-residualized panel for the downstream
    random-coefficient stage, and the moment-matrix condition number.
    """
    L = np.asarray(L, dtype=float)
    ZL = np.asarray(ZL, dtype=float)
    if L.ndim == 2:
        L = L[:, :, None]
    if ZL.ndim == 2:
        ZL = ZL[:, :, None]
    n, T, d_l = L.shape
    ldot = L[:, 1:, :] - L[:, :-1, :]
    zdot = ZL[:, 1:, :] - ZL[:, :-1, :]

    ge = fit_g(units, cv, basisK)
    ml_resp = np.stack([u.M @ ldot[i] for i, u in enumerate(units)])  # (n, T-1, d_l)
    fit_ml = series_fit(cv.Vhat, ml_resp.reshape(n, -1), basisK)
    kl_at = fit_ml.predict(cv.Vhat).reshape(n, T - 1, d_l)

    m_at = ge.m_at(cv.Vhat)
    lam = np.linalg.eigvalsh(m_at)[:, 0]
    if lam.min() < ge.eig_floor:
        i = int(np.argmin(lam))
        raise SingularCorrectionError(
            f"conditional projector numerically singular at unit {i} during "
            f"homogeneous-block estimation (lambda_min={lam.min():.3e})",
            lambda_min=float(lam.min()),
            unit=i,
        )
    ky_at = ge.k_at(cv.Vhat)
    dydot = np.stack(
        [u.ydot - np.linalg.solve(m_at[i], ky_at[i]) for i, u in enumerate(units)]
    )
    dldot = np.stack(
        [ldot[i] - np.linalg.solve(m_at[i], kl_at[i]) for i, u in enumerate(units)]
    )

    mstack = np.stack([u.M for u in units])
    gmat = np.einsum("ntj,nts,nsl->jl", zdot, mstack, dldot)
    hvec = np.einsum("ntj,nts,ns->j", zdot, mstack, dydot)
    if gmat.shape[0] == gmat.shape[1]:
        cond = float(np.linalg.cond(gmat))
        if not np.isfinite(cond) or cond > COMMON_B_MAX_COND:
            raise EstimationError(
                f"moment matrix for the homogeneous block is near singular (cond={cond:.2e})"
            )
        b = np.linalg.solve(gmat, hvec)
    else:
        cond = float(np.linalg.cond(gmat))
        if not np.isfinite(cond) or cond > COMMON_B_MAX_COND:
            raise EstimationError(
                f"moment matrix for the homogeneous block is near singular (cond={cond:.2e})"
            )
        b, *_ = np.linalg.lstsq(gmat, hvec, rcond=None)
    y_resid = p.y - np.einsum("ntl,l->nt", L, b)
    return b, p.with_outcome(y_resid), cond


def plug_in_variance(
    units: list[DifferencedUnit],
    cv: ControlVariableSet,
    ge: GEstimate,
    ape: ApeEstimate,
):
    """Asymptotic covariance from sample analogs of the influence function.

    The score of unit i stacks three pieces: the centered trimmed
    pseudo-coefficient, the corrected-map residual term, and one
    generated-regressor term per control slot, obtained by regressing the
    corrected map times the correction derivative on the slot's conditioning
    design and multiplying by the slot residual.  The centering subtracts the
    sample mean of the stacked rows, so the rows average to zero exactly.
    Returns (cov, se, InfluenceParts).
    """
    n = len(units)
    d_x = units[0].Xdot.shape[1]
    tm1 = ge.tm1
    mstack, ydot, delta = _stack_units(units)
    phi = float(delta.mean())

    qdel = np.zeros((n, d_x, tm1))
    for i, u in enumerate(units):
        if u.delta:
            qdel[i] = u.Q

    eq_fit = series_fit(cv.Vhat, qdel.reshape(n, -1), ge.basisK)
    eq_at_v = eq_fit.predict(cv.Vhat).reshape(n, d_x, tm1)

    g, g_jac, lam = eval_g_jacobian(ge, cv.Vhat, on_singular="zero")
    bad = lam < ge.eig_floor
    fallback = []
    for i in np.nonzero(bad)[0]:
        if units[i].delta:
            raise SingularCorrectionError(
                f"conditional projector numerically singular at untrimmed unit {i}",
                lambda_min=float(lam[i]),
                unit=int(i),
            )
        fallback.append(int(i))

    m_at = ge.m_at(cv.Vhat)
    m_at = m_at.copy()
    m_at[bad] = np.eye(tm1)
    udot = np.einsum("nst,nt->ns", mstack, ydot - g)
    # E(Q^d|V) Mhat(V)^-1 M_i, the subtracted part of the corrected map
    minv_m = np.linalg.solve(m_at, mstack)
    sub = np.einsum("ndt,nts->nds", eq_at_v, minv_m)
    qtilde = qdel - sub
    term_resid = np.einsum("nds,ns->nd", qtilde, udot)

    slot_terms = np.zeros((n, d_x))
    for slot in cv.slots:
        cols = slot.cols
        dslot = cols.stop - cols.start
        resp = np.einsum("ndt,ntc->ndc", qtilde, g_jac[:, :, cols]).reshape(n, -1)
        basis = slot.basis
        if basis is None:
            basis = PowerBasis(slot.xi.shape[1], degree=2, box=None)
        fit = series_fit(slot.xi, resp, basis)
        fitted = fit.predict(slot.xi).reshape(n, d_x, dslot)
        slot_terms += np.einsum("ndc,nc->nd", fitted, cv.Vhat[:, cols])

    term_mu = np.zeros((n, d_x))
    if ape.mu_tilde is not None and ape.used is not None:
        term_mu[ape.used] = ape.mu_tilde
    raw = term_mu + term_resid + slot_terms
    score = raw - raw.mean(axis=0)

    omega0 = score.T @ score / n
    c = ((delta.astype(float) - phi)[:, None] * score).sum(axis=0) / n
    mu = ape.mu_hat
    xi = (
        omega0
        + np.outer(c, mu)
        + np.outer(mu, c)
        + (phi - phi**2) * np.outer(mu, mu)
    )
    cov = xi / (phi**2 * n)
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    cov = (v * np.maximum(w, 0.0)) @ v.T
    se = np.sqrt(np.diag(cov))
    parts = InfluenceParts(
        score=score,
        qtilde=qtilde,
        udot=udot,
        g_jac=g_jac,
        eq_at_v=eq_at_v,
        slot_terms=slot_terms,
        g_fallback_units=fallback,
    )
    return cov, se, parts


def bootstrap_variance(p: PanelData, pipeline, B: int, seed: int, threads: int = 1):
    """Unit-resampling bootstrap covariance of the point estimator.

    ``pipeline`` maps a PanelData to the coefficient vector and is rerun in
    full on every replicate (entire time paths resampled with replacement).
    Replicate seeds derive from the master seed by XOR with the replicate
    index, so results do not depend on the thread count.
    """
    if B < 50:
        raise ValueError("bootstrap needs B >= 50")
    n = p.n

    def one(b: int):
        rng = np.random.Generator(np.random.Philox(key=seed ^ b))
        idx = rng.integers(0, n, size=n)
        try:
            return np.asarray(pipeline(p.take_units(idx)), dtype=float)
        except (EstimationError, SingularCorrectionError, np.linalg.LinAlgError) as exc:
            return exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(B)))
    else:
        results = [one(b) for b in range(B)]

    draws = [r for r in results if not isinstance(r, Exception)]
    failures = [(b, str(r)) for b, r in enumerate(results) if isinstance(r, Exception)]
    if len(failures) > BOOTSTRAP_MAX_FAIL * B:
        detail = "; ".join(f"replicate {b}: {msg}" for b, msg in failures[:5])
        raise EstimationError(
            f"{len(failures)}/{B} bootstrap replicates failed ({detail} ...)"
        )
    arr = np.stack(draws)
    center = arr.mean(axis=0)
    cov = (arr - center).T @ (arr - center) / (len(draws) - 1)
    cov = np.atleast_2d(cov)
    return cov, np.sqrt(np.diag(cov))


def _controls_for(p: PanelData, config: EstimationConfig, cv_override=None):
    if cv_override is not None:
        return cv_override
    if config.provider == "ar1":
        return fit_ar1_feedback_controls(p, mode=config.trim, sigma_frac=config.sigma)
    xi_all = np.concatenate([p.x1, p.z], axis=2).reshape(p.n * p.T, -1)
    basisL = build_basis_for(config.first_stage, xi_all)
    return fit_residual_controls(p, basisL, mode=config.trim, sigma_frac=config.sigma)


def run_estimate(
    p: PanelData,
    config: EstimationConfig | None = None,
    cv_override: ControlVariableSet | None = None,
    return_internals: bool = False,
):
    """Full pipeline: controls, differencing, correction fit, APE, inference.

    ``return_internals`` additionally hands back the intermediate objects
    (controls, differenced units, correction fit) for diagnostics.
    """
    config = config or EstimationConfig()
    if p.T < p.d_x + 2:
        raise EstimationError(
            f"APE estimation needs T >= d_x + 2 periods (T={p.T}, d_x={p.d_x})"
        )
    if config.subset_average and p.T > p.d_x + 2:
        est = subset_average_ape(p, config)
        return (est, {}) if return_internals else est
    cv = _controls_for(p, config, cv_override)
    units = first_difference(p, config.delta0)
    basisK = build_basis_for(config.second_stage, cv.Vhat, box=cv.extended_box)
    ge = fit_g(units, cv, basisK, eig_floor=config.eig_floor)
    ape = estimate_ape(units, cv, ge)
    ape.alpha_hat = estimate_alpha(p, units, cv, ge)
    if config.inference == "plugin":
        ape.cov, ape.se, _ = plug_in_variance(units, cv, ge, ape)
    elif config.inference == "bootstrap":
        sub = config.without_inference()

        def pipe(pb: PanelData):
            return run_estimate(pb, sub, cv_override=None).mu_hat

        ape.cov, ape.se = bootstrap_variance(
            p, pipe, config.bootstrap_B, config.bootstrap_seed, threads=config.threads
        )
    if return_internals:
        return ape, {"cv": cv, "units": units, "ge": ge, "basisK": basisK}
    return ape


def subset_average_ape(p: PanelData, config: EstimationConfig) -> ApeEstimate:
    """Equal-weight average of the APE over all (d_x + 2)-period subsets.

    Each subset reruns the whole pipeline on its own periods, controls
    included.  Subsets where the correction fit loses invertibility are
    dropped and reported; only if every subset fails is the estimation
    aborted.
    """
    k = p.d_x + 2
    if p.T < k:
        raise EstimationError(f"need T >= d_x + 2 (T={p.T}, d_x={p.d_x})")
    sub_cfg = config.without_inference()
    sub_cfg.subset_average = False
    estimates = []
    dropped = []
    for tau in itertools.combinations(range(p.T), k):
        try:
            est = run_estimate(p.select_periods(tau), sub_cfg)
            estimates.append((tau, est))
        except (SingularCorrectionError, EstimationError) as exc:
            dropped.append((tau, str(exc)))
    if not estimates:
        raise EstimationError(
            f"all {len(dropped)} period subsets failed; first: {dropped[0][1]}"
        )
    mu = np.mean([e.mu_hat for _, e in estimates], axis=0)
    alpha = float(np.mean([e.alpha_hat for _, e in estimates]))
    phi = float(np.mean([e.phi_hat for _, e in estimates]))
    out = ApeEstimate(
        mu_hat=mu,
        phi_hat=phi,
        alpha_hat=alpha,
        diagnostics={
            "subsets_used": [tau for tau, _ in estimates],
            "subsets_dropped": dropped,
            "min_eig": min(e.diagnostics["min_eig"] for _, e in estimates),
            "trim_fraction": float(
                np.mean([e.diagnostics["trim_fraction"] for _, e in estimates])
            ),
            "n_used": int(np.mean([e.diagnostics["n_used"] for _, e in estimates])),
        },
    )
    if config.inference == "bootstrap":
        def pipe(pb: PanelData):
            return subset_average_ape(pb, sub_cfg).mu_hat

        out.cov, out.se = bootstrap_variance(
            p, pipe, config.bootstrap_B, config.bootstrap_seed, threads=config.threads
        )
    return out
