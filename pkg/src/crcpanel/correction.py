"""Second-stage fits of E(M|V) and E(M ydot|V) and their inversion.

Each entry of the within-projector and of the projected outcome differences
is regressed on one sieve basis in the generated controls; all component
regressions share a single design factorization.  The endogeneity-correction
function is the pointwise solve of the fitted matrix against the fitted
vector, guarded by an eigenvalue floor: where the fitted matrix loses
invertibility the model is not identified and we fail loudly rather than
return an exploding value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .controls import ControlVariableSet
from .panel import DifferencedUnit
from .sieve import SeriesFit, SieveBasis, series_fit

__all__ = [
    "GEstimate",
    "SweepResult",
    "SingularCorrectionError",
    "fit_g",
    "eval_g",
    "eval_g_batch",
    "eval_g_jacobian",
    "invertibility_sweep",
]

DEFAULT_EIG_FLOOR = 1e-4

# Sweep minima below this raise the diagnostic flag.
SWEEP_FLAG_LEVEL = 1e-3


class SingularCorrectionError(RuntimeError):
    """The fitted conditional projector is numerically singular somewhere."""

    def __init__(self, msg, lambda_min=None, unit=None):
        super().__init__(msg)
        self.lambda_min = lambda_min
        self.unit = unit


@dataclass
class GEstimate:
    """Fitted conditional projector, projected outcome means, and metadata.

    ``Mhat`` holds the (T-1)^2 componentwise fits (row-major), ``khat`` the
    T-1 outcome fits.  ``min_eig`` is the smallest eigenvalue of the
    symmetrized fitted projector over the sample controls.
    """

    Mhat: SeriesFit
    khat: SeriesFit
    basisK: SieveBasis
    tm1: int
    eig_floor: float
    min_eig: float

    def m_at(self, v: np.ndarray) -> np.ndarray:
        """Symmetrized fitted projector, shape (n, T-1, T-1)."""
        n = np.atleast_2d(v).shape[0]
        m = self.Mhat.predict(v).reshape(n, self.tm1, self.tm1)
        return 0.5 * (m + np.swapaxes(m, 1, 2))

    def k_at(self, v: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(v).shape[0]
        return self.khat.predict(v).reshape(n, self.tm1)


def fit_g(
    units: list[DifferencedUnit],
    cv: ControlVariableSet,
    basisK: SieveBasis,
    eig_floor: float = DEFAULT_EIG_FLOOR,
) -> GEstimate:
    """Regress every projector entry and projected outcome on the controls.

    The componentwise responses are stacked into one multi-response least
    squares problem so the design is factorized once.
    """
    n = len(units)
    if n != cv.n:
        raise ValueError("units and controls are not aligned")
    if basisK.dim_in != cv.dv:
        raise ValueError("basis dimension does not match the controls")
    tm1 = units[0].M.shape[0]
    resp = np.empty((n, tm1 * tm1 + tm1))
    for i, u in enumerate(units):
        resp[i, : tm1 * tm1] = u.M.reshape(-1)
        resp[i, tm1 * tm1 :] = u.M @ u.ydot
    fit = series_fit(cv.Vhat, resp, basisK)
    if fit.gram_rank == 0:
        raise SingularCorrectionError("second-stage design has rank zero")
    mhat = SeriesFit(
        basis=basisK,
        coeffs=fit.coeffs[:, : tm1 * tm1],
        gram_rank=fit.gram_rank,
        singular_values=fit.singular_values,
    )
    khat = SeriesFit(
        basis=basisK,
        coeffs=fit.coeffs[:, tm1 * tm1 :],
        gram_rank=fit.gram_rank,
        singular_values=fit.singular_values,
    )
    ge = GEstimate(
        Mhat=mhat, khat=khat, basisK=basisK, tm1=tm1, eig_floor=float(eig_floor), min_eig=np.nan
    )
    lam = np.linalg.eigvalsh(ge.m_at(cv.Vhat))[:, 0]
    ge.min_eig = float(lam.min())
    return ge


def eval_g_batch(ge: GEstimate, v: np.ndarray, on_singular: str = "raise"):
    """Solve the fitted system at many points; returns (g, lambda_min).

    ``on_singular`` is "raise" (default) or "zero", which substitutes a zero
    correction at failing points and lets the caller inspect ``lambda_min``.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    m = ge.m_at(v)
    k = ge.k_at(v)
    lam = np.linalg.eigvalsh(m)[:, 0]
    bad = lam < ge.eig_floor
    if np.any(bad):
        if on_singular == "raise":
            i = int(np.nonzero(bad)[0][0])
            raise SingularCorrectionError(
                f"conditional projector numerically singular at point {i} "
                f"(lambda_min={lam[i]:.3e} < floor {ge.eig_floor:.1e}); "
                "identification fails there",
                lambda_min=float(lam[i]),
                unit=i,
            )
        m = m.copy()
        m[bad] = np.eye(ge.tm1)
        k = k.copy()
        k[bad] = 0.0
    g = np.linalg.solve(m, k[:, :, None])[:, :, 0]
    return g, lam


def eval_g(ge: GEstimate, v: np.ndarray) -> np.ndarray:
    """Correction vector at a single point, shape (T-1,)."""
    g, _ = eval_g_batch(ge, np.atleast_2d(v))
    return g[0]


def eval_g_jacobian(ge: GEstimate, v: np.ndarray, on_singular: str = "raise"):
    """Derivative of the correction in every control coordinate.

    Returns (g, jac, lambda_min) with jac of shape (n, T-1, dv), obtained by
    differentiating the linear solve: dg = M^-1 (dk - dM g).  With
    ``on_singular="zero"`` failing points get a zero correction and zero
    derivative instead of raising.
    """
    v = np.atleast_2d(np.asarray(v, dtype=float))
    n, dv = v.shape
    tm1 = ge.tm1
    g, lam = eval_g_batch(ge, v, on_singular=on_singular)
    bad = lam < ge.eig_floor
    jbasis = ge.basisK.jacobian(v)  # (n, K, dv)
    dm = np.einsum("nkd,kq->nqd", jbasis, ge.Mhat.coeffs).reshape(n, tm1, tm1, dv)
    dm = 0.5 * (dm + np.swapaxes(dm, 1, 2))
    dk = np.einsum("nkd,kq->nqd", jbasis, ge.khat.coeffs)  # (n, tm1, dv)
    rhs = dk - np.einsum("nstd,nt->nsd", dm, g)
    m = ge.m_at(v)
    if np.any(bad):
        m = m.copy()
        m[bad] = np.eye(tm1)
        rhs = rhs.copy()
        rhs[bad] = 0.0
    jac = np.linalg.solve(m, rhs)
    return g, jac, lam


@dataclass
class SweepResult:
    """Minimum-eigenvalue diagnostic for the invertibility condition."""

    points: np.ndarray
    lambda_min: np.ndarray
    sample_min: float
    grid_min: float
    flagged: bool

    def rows(self):
        for p, lam in zip(self.points, self.lambda_min):
            yield list(p) + [float(lam)]


def invertibility_sweep(ge: GEstimate, grid: np.ndarray) -> SweepResult:
    """Smallest eigenvalue of the fitted projector over a grid of controls.

    The sample minimum (recorded at fit time) and the grid minimum are both
    reported: identification needs invertibility almost surely, estimation
    needs it uniformly, and the diagnostic does not decide which failure
    matters for the application.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    lam = np.linalg.eigvalsh(ge.m_at(grid))[:, 0]
    grid_min = float(lam.min())
    overall = min(grid_min, ge.min_eig)
    return SweepResult(
        points=grid,
        lambda_min=lam,
        sample_min=ge.min_eig,
        grid_min=grid_min,
        flagged=bool(overall < SWEEP_FLAG_LEVEL),
    )
