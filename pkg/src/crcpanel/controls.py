"""Generated control variables: first-stage residuals and trimming maps.

Two providers are implemented.  The residual provider regresses each
endogenous regressor on the exogenous regressors and instruments, period by
period, with a sieve basis; the controls are the stacked residuals.  The
autoregressive feedback provider targets predetermined scalar regressors:
it fits a pooled AR(1) and uses the innovation sequence as controls, with
the first observation playing the role of the instrument.

Trimming forces the generated values into the estimated support box, either
by hard componentwise projection (the estimation default) or by a smooth
1-Lipschitz map onto a slightly extended box.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .panel import PanelData
from .sieve import SeriesFit, SieveBasis, series_fit

__all__ = [
    "ControlSlot",
    "ControlVariableSet",
    "ControlsError",
    "smooth_tau",
    "box_trim",
    "smooth_trim",
    "fit_residual_controls",
    "fit_ar1_feedback_controls",
    "known_controls",
]

# |rho - 1| below this loses identification for the AR(1) provider.
RHO_UNIT_TOL = 1e-6


class ControlsError(ValueError):
    """First stage failed (degenerate design, non-identified dynamics)."""


def smooth_tau(x, lo, hi, sigma):
    """Smooth projection onto [lo - sigma, hi + sigma].

    Identity on [lo, hi]; outside, the overshoot u is mapped through
    sigma * (exp(-u^2/(2 sigma^2) + u/sigma) - 1), which has value 0, slope 1
    and curvature 0 at the boundary, so the composite map is twice
    differentiable and 1-Lipschitz.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if lo > hi:
        raise ValueError("lo must be <= hi")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)

    def tau(u):
        return sigma * (np.exp(-(u**2) / (2 * sigma**2) + u / sigma) - 1.0)

    below = x < lo
    above = x > hi
    out = np.array(x, dtype=float)
    out[below] = lo + tau(x[below] - lo)
    out[above] = hi - tau(hi - x[above])
    return float(out[0]) if scalar else out


def box_trim(v: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Componentwise projection onto the box (a contraction)."""
    return np.clip(v, box[:, 0], box[:, 1])


def smooth_trim(v: np.ndarray, box: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    out = np.empty_like(np.asarray(v, dtype=float))
    for d in range(box.shape[0]):
        out[..., d] = smooth_tau(v[..., d], box[d, 0], box[d, 1], sigma[d])
    return out


@dataclass
class ControlSlot:
    """One block of control coordinates and the conditioning design behind it.

    ``cols`` indexes the block inside the stacked control vector; ``xi`` is
    the (n, d_xi) conditioning design of its first-stage regression.  The
    inference step regresses influence terms on a basis in ``xi``.
    """

    cols: slice
    xi: np.ndarray
    basis: SieveBasis | None


@dataclass
class ControlVariableSet:
    """Trimmed generated controls with their support box and provenance."""

    Vhat: np.ndarray
    Vtilde: np.ndarray
    box: np.ndarray  # (dv, 2)
    mode: str  # "box" | "smooth"
    sigma: np.ndarray | None
    slots: list[ControlSlot]
    first_stage: list[SeriesFit] | None = None
    rho: float | None = None
    provider: str = "residual"

    @property
    def n(self) -> int:
        return self.Vhat.shape[0]

    @property
    def dv(self) -> int:
        return self.Vhat.shape[1]

    @property
    def extended_box(self) -> np.ndarray:
        """Box enlarged by sigma in smooth mode; the raw box otherwise."""
        if self.mode == "smooth":
            return np.column_stack(
                [self.box[:, 0] - self.sigma, self.box[:, 1] + self.sigma]
            )
        return self.box.copy()

    def trim(self, v: np.ndarray) -> np.ndarray:
        """Apply this set's trimming map to new control values."""
        if self.mode == "smooth":
            return smooth_trim(v, self.box, self.sigma)
        return box_trim(v, self.box)


def _finish(vtilde, slots, mode, sigma_frac, provider, first_stage=None, rho=None):
    box = np.column_stack([vtilde.min(axis=0), vtilde.max(axis=0)])
    width = box[:, 1] - box[:, 0]
    if np.all(width < 1e-10):
        warnings.warn(
            "control variables have (near) zero variation; endogeneity "
            "correction will be vacuous",
            stacklevel=3,
        )
    sigma = None
    vhat = box_trim(vtilde, box)
    if mode == "smooth":
        sigma = np.maximum(sigma_frac * width, 1e-12)
        vhat = smooth_trim(vtilde, box, sigma)
    elif mode != "box":
        raise ValueError(f"unknown trim mode {mode!r}")
    return ControlVariableSet(
        Vhat=vhat,
        Vtilde=vtilde,
        box=box,
        mode=mode,
        sigma=sigma,
        slots=slots,
        first_stage=first_stage,
        rho=rho,
        provider=provider,
    )


def fit_residual_controls(
    p: PanelData,
    basisL: SieveBasis,
    mode: str = "box",
    sigma_frac: float = 0.1,
) -> ControlVariableSet:
    """Controls as period-by-period sieve residuals of x2 on (x1, z).

    The stacked control vector has dimension T * d2; slot t covers the d2
    residual coordinates of period t.
    """
    if p.d2 < 1:
        raise ControlsError("residual provider needs at least one endogenous regressor")
    if p.d1 + p.dz < 1:
        raise ControlsError("residual provider needs exogenous regressors or instruments")
    n, T, d2 = p.n, p.T, p.d2
    vtilde = np.empty((n, T * d2))
    fits = []
    slots = []
    for t in range(T):
        xi_t = np.concatenate([p.x1[:, t, :], p.z[:, t, :]], axis=1)
        fit = series_fit(xi_t, p.x2[:, t, :], basisL)
        if fit.gram_rank == 0:
            raise ControlsError(f"degenerate first stage at period {t + 1}")
        vtilde[:, t * d2 : (t + 1) * d2] = p.x2[:, t, :] - fit.predict(xi_t)
        fits.append(fit)
        slots.append(ControlSlot(cols=slice(t * d2, (t + 1) * d2), xi=xi_t, basis=basisL))
    return _finish(vtilde, slots, mode, sigma_frac, "residual", first_stage=fits)


def fit_ar1_feedback_controls(
    p: PanelData,
    mode: str = "box",
    sigma_frac: float = 0.1,
) -> ControlVariableSet:
    """Controls as AR(1) innovations of a scalar predetermined regressor.

    A single autoregressive coefficient is estimated by pooled no-intercept
    least squares of x_{t+1} on x_t; the T-1 innovation residuals per unit
    are the controls, with x_1 acting as the (time-invariant) instrument.
    """
    if p.d_x != 1:
        raise ControlsError("AR(1) feedback provider requires a single scalar regressor")
    x = p.x[:, :, 0]
    lagged = x[:, :-1].reshape(-1)
    lead = x[:, 1:].reshape(-1)
    denom = float(lagged @ lagged)
    if denom <= 0:
        raise ControlsError("regressor has no variation; cannot fit dynamics")
    rho = float(lead @ lagged / denom)
    if abs(rho - 1.0) < RHO_UNIT_TOL:
        raise ControlsError(
            f"estimated autoregressive root {rho:.8f} is numerically one; "
            "unit-root dynamics are not identified"
        )
    vtilde = x[:, 1:] - rho * x[:, :-1]  # (n, T-1)
    slots = [
        ControlSlot(cols=slice(t, t + 1), xi=x[:, t : t + 1], basis=None)
        for t in range(p.T - 1)
    ]
    return _finish(vtilde, slots, mode, sigma_frac, "ar1", rho=rho)


def known_controls(v: np.ndarray, mode: str = "box", sigma_frac: float = 0.1) -> ControlVariableSet:
    """Wrap externally known control values (oracle runs, discrete designs)."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 2:
        raise ValueError("controls must be (n, dv)")
    return _finish(v.copy(), slots=[], mode=mode, sigma_frac=sigma_frac, provider="known")
