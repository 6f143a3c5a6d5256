"""Approximating-function bases and linear series regression.

Two basis families are provided: power series truncated by total degree and
tensor-product B-splines with per-dimension knot vectors.  Both expose the
design matrix and its analytic Jacobian, which downstream code needs to
differentiate fitted regression functions.  Fitting is plain least squares
through a rank-revealing SVD, so duplicated or collinear basis columns are
resolved by the minimum-norm solution instead of raising.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SieveBasis",
    "PowerBasis",
    "BSplineBasis",
    "IndicatorBasis",
    "SeriesFit",
    "CvResult",
    "make_basis",
    "quantile_knots",
    "series_fit",
    "loo_cv",
    "loo_cv_score",
    "select_basis",
]

# Hard cap on the number of basis functions; tensor products blow up fast.
MAX_DIM_OUT = 10_000

# Singular value s is kept when s^2 > GRAM_RCOND * max(s)^2, i.e. the Gram
# matrix eigenvalue cutoff is relative to its largest eigenvalue.
GRAM_RCOND = 1e-10


class SieveBasis:
    """A finite family of approximating functions on a box domain.

    Subclasses implement ``evaluate`` and ``jacobian``; everything else in the
    package only relies on this interface.
    """

    kind: str = "abstract"
    dim_in: int
    dim_out: int
    box: np.ndarray  # (dim_in, 2) per-dimension [lo, hi]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Design matrix, shape (n, dim_out), for points ``x`` of shape (n, dim_in)."""
        raise NotImplementedError

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """Partial derivatives, shape (n, dim_out, dim_in)."""
        raise NotImplementedError

    def _atleast_2d(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.dim_in == 1 else x[None, :]
        if x.shape[1] != self.dim_in:
            raise ValueError(f"expected points of dimension {self.dim_in}, got {x.shape[1]}")
        return x

    def __repr__(self) -> str:  # pragma: no cover - cosmetic
        return f"{type(self).__name__}(dim_in={self.dim_in}, dim_out={self.dim_out})"


class PowerBasis(SieveBasis):
    """All monomials of total degree <= degree, constant term first.

    Evaluation extrapolates naturally outside the box; the box is only kept
    for bookkeeping.  Extra user-listed exponent tuples can be appended after
    the full total-degree set.
    """

    kind = "power"

    def __init__(self, dim_in, degree, box=None, extra_terms=None):
        if degree < 1:
            raise ValueError("degree must be >= 1")
        self.dim_in = int(dim_in)
        self.degree = int(degree)
        exps = [
            e
            for e in itertools.product(range(degree + 1), repeat=self.dim_in)
            if sum(e) <= degree
        ]
        exps.sort(key=lambda e: (sum(e), e))
        if extra_terms:
            seen = set(exps)
            for e in extra_terms:
                e = tuple(int(v) for v in e)
                if len(e) != self.dim_in:
                    raise ValueError("extra term has wrong dimension")
                if e not in seen:
                    exps.append(e)
                    seen.add(e)
        self.exponents = np.array(exps, dtype=int)
        self.dim_out = len(exps)
        if self.dim_out > MAX_DIM_OUT:
            raise ValueError(f"basis size {self.dim_out} exceeds cap {MAX_DIM_OUT}")
        self.box = _as_box(box, self.dim_in)

    def evaluate(self, x):
        x = self._atleast_2d(x)
        # x ** e with broadcasting over (n, dim_out, dim_in); 0**0 == 1 as needed
        return np.prod(x[:, None, :] ** self.exponents[None, :, :], axis=2)

    def jacobian(self, x):
        x = self._atleast_2d(x)
        n = x.shape[0]
        jac = np.empty((n, self.dim_out, self.dim_in))
        for d in range(self.dim_in):
            exps_d = self.exponents.copy()
            coef = exps_d[:, d].astype(float)
            exps_d[:, d] = np.maximum(exps_d[:, d] - 1, 0)
            mono = np.prod(x[:, None, :] ** exps_d[None, :, :], axis=2)
            jac[:, :, d] = coef[None, :] * mono
        return jac


def _as_box(box, dim_in) -> np.ndarray:
    if box is None:
        box = np.tile([0.0, 1.0], (dim_in, 1))
    box = np.asarray(box, dtype=float).reshape(dim_in, 2)
    if np.any(box[:, 0] > box[:, 1]):
        raise ValueError("box lower bounds exceed upper bounds")
    return box


def _full_knots(lo: float, hi: float, interior, degree: int) -> np.ndarray:
    interior = np.asarray(interior, dtype=float)
    if interior.size and (np.any(np.diff(interior) <= 0)
                          or np.any(interior <= lo) or np.any(interior >= hi)):
        raise ValueError("interior knots must be strictly increasing inside (lo, hi)")
    return np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])


def _bspline_design_1d(x, knots, degree, deriv=False):
    """Cox-de Boor evaluation of all univariate B-splines on a clamped knot vector.

    Returns the (n, nbasis) design matrix, and with ``deriv`` also the matrix
    of first derivatives.  Input is clamped to the knot span, and the right
    endpoint is attached to the last nonempty interval so that the partition
    of unity holds on the closed interval.
    """
    x = np.asarray(x, dtype=float)
    lo, hi = knots[degree], knots[-degree - 1]
    x = np.clip(x, lo, hi)
    nb = len(knots) - degree - 1

    b = ((x[:, None] >= knots[None, :-1]) & (x[:, None] < knots[None, 1:])).astype(float)
    at_hi = x == hi
    if np.any(at_hi):
        last = np.max(np.nonzero(knots < hi)[0])  # start of last nonempty interval
        b[at_hi, :] = 0.0
        b[at_hi, last] = 1.0

    b_prev = None
    for d in range(1, degree + 1):
        m = len(knots) - d - 1
        den_l = knots[d : d + m] - knots[:m]
        den_r = knots[d + 1 : d + 1 + m] - knots[1 : 1 + m]
        wl = np.zeros((x.size, m))
        wr = np.zeros((x.size, m))
        nz = den_l > 0
        wl[:, nz] = (x[:, None] - knots[None, :m][:, nz]) / den_l[nz]
        nz = den_r > 0
        wr[:, nz] = (knots[None, d + 1 : d + 1 + m][:, nz] - x[:, None]) / den_r[nz]
        if d == degree:
            b_prev = b
        b = wl * b[:, :m] + wr * b[:, 1 : m + 1]

    if not deriv:
        return b
    if degree == 0:
        return b, np.zeros_like(b)
    # d/dx B_{j,k} = k [ B_{j,k-1}/(t_{j+k}-t_j) - B_{j+1,k-1}/(t_{j+k+1}-t_{j+1}) ]
    den_l = knots[degree : degree + nb] - knots[:nb]
    den_r = knots[degree + 1 : degree + 1 + nb] - knots[1 : 1 + nb]
    tl = np.zeros((x.size, nb))
    tr = np.zeros((x.size, nb))
    nz = den_l > 0
    tl[:, nz] = b_prev[:, :nb][:, nz] / den_l[nz]
    nz = den_r > 0
    tr[:, nz] = b_prev[:, 1 : nb + 1][:, nz] / den_r[nz]
    return b, degree * (tl - tr)


class BSplineBasis(SieveBasis):
    """Tensor product of univariate B-splines, one knot vector per dimension.

    The univariate families each sum to one on [lo, hi], hence so does the
    tensor product: the constant function is in the span even though no single
    element is constant.  Points outside the box are clamped before
    evaluation; generated regressors are trimmed upstream, so out-of-box
    inputs only occur through programming errors, which clamping makes
    harmless.
    """

    kind = "bspline"

    def __init__(self, dim_in, degree, box, knots=0):
        self.dim_in = int(dim_in)
        self.box = _as_box(box, self.dim_in)
        if np.isscalar(degree):
            degree = [int(degree)] * self.dim_in
        self.degrees = [int(d) for d in degree]
        if any(d < 1 for d in self.degrees):
            raise ValueError("degree must be >= 1")
        if knots is None:
            knots = 0
        if np.isscalar(knots):
            knots = [int(knots)] * self.dim_in
        self.knot_vectors = []
        for d in range(self.dim_in):
            lo, hi = self.box[d]
            kd = knots[d]
            if np.isscalar(kd):
                interior = np.linspace(lo, hi, int(kd) + 2)[1:-1]
            else:
                interior = np.asarray(kd, dtype=float)
            self.knot_vectors.append(_full_knots(lo, hi, interior, self.degrees[d]))
        self._nb = [len(t) - deg - 1 for t, deg in zip(self.knot_vectors, self.degrees)]
        self.dim_out = int(np.prod(self._nb))
        if self.dim_out > MAX_DIM_OUT:
            raise ValueError(f"basis size {self.dim_out} exceeds cap {MAX_DIM_OUT}")

    def _univariate(self, x, deriv):
        out = []
        for d in range(self.dim_in):
            out.append(
                _bspline_design_1d(x[:, d], self.knot_vectors[d], self.degrees[d], deriv=deriv)
            )
        return out

    def evaluate(self, x):
        x = self._atleast_2d(x)
        mats = self._univariate(x, deriv=False)
        out = mats[0]
        for m in mats[1:]:
            out = (out[:, :, None] * m[:, None, :]).reshape(x.shape[0], -1)
        return out

    def jacobian(self, x):
        x = self._atleast_2d(x)
        pairs = self._univariate(x, deriv=True)
        n = x.shape[0]
        jac = np.empty((n, self.dim_out, self.dim_in))
        for d in range(self.dim_in):
            out = pairs[0][1] if d == 0 else pairs[0][0]
            for j in range(1, self.dim_in):
                m = pairs[j][1] if j == d else pairs[j][0]
                out = (out[:, :, None] * m[:, None, :]).reshape(n, -1)
            jac[:, :, d] = out
        return jac


class IndicatorBasis(SieveBasis):
    """One indicator per support point; the saturated basis for discrete regressors.

    Useful for oracle checks where conditional means are exact group means.
    The Jacobian is zero (the functions are locally constant around each
    support point).
    """

    kind = "indicator"

    def __init__(self, points, tol=1e-8):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        self.points = pts
        self.tol = float(tol)
        self.dim_in = pts.shape[1]
        self.dim_out = pts.shape[0]
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        self.box = np.column_stack([lo, hi])

    def evaluate(self, x):
        x = self._atleast_2d(x)
        dist = np.linalg.norm(x[:, None, :] - self.points[None, :, :], axis=2)
        return (dist <= self.tol).astype(float)

    def jacobian(self, x):
        x = self._atleast_2d(x)
        return np.zeros((x.shape[0], self.dim_out, self.dim_in))


def make_basis(kind, dim_in, degree, box=None, knots=0, extra_terms=None) -> SieveBasis:
    """Construct a basis; ``knots`` is ignored for the power family."""
    if kind == "power":
        return PowerBasis(dim_in, degree, box=box, extra_terms=extra_terms)
    if kind == "bspline":
        if box is None:
            raise ValueError("bspline basis requires a domain box")
        return BSplineBasis(dim_in, degree, box, knots=knots)
    raise ValueError(f"unknown basis kind {kind!r}")


def quantile_knots(data: np.ndarray, n_knots: int) -> list[np.ndarray]:
    """Per-dimension interior knots at equally spaced sample quantiles."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    qs = np.linspace(0.0, 1.0, n_knots + 2)[1:-1]
    out = []
    for d in range(data.shape[1]):
        k = np.quantile(data[:, d], qs)
        # strictly increasing knots are required; drop duplicates from ties
        k = np.unique(k)
        lo, hi = data[:, d].min(), data[:, d].max()
        out.append(k[(k > lo) & (k < hi)])
    return out


@dataclass
class SeriesFit:
    """Least-squares fit of multi-response data on a sieve basis.

    ``coeffs`` has shape (dim_out, n_responses); ``gram_rank`` is the number
    of singular directions retained by the relative cutoff.
    """

    basis: SieveBasis
    coeffs: np.ndarray
    gram_rank: int
    singular_values: np.ndarray = field(repr=False, default=None)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.basis.evaluate(x) @ self.coeffs

    def predict_jacobian(self, x: np.ndarray) -> np.ndarray:
        """Derivative of each fitted response, shape (n, n_responses, dim_in)."""
        return np.einsum("nkd,km->nmd", self.basis.jacobian(x), self.coeffs)


def _design_svd(p: np.ndarray):
    u, s, vt = np.linalg.svd(p, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        keep = np.zeros(s.shape, dtype=bool)
    else:
        keep = s**2 > GRAM_RCOND * s[0] ** 2
    return u[:, keep], s[keep], vt[keep], s


def series_fit(x: np.ndarray, y: np.ndarray, basis: SieveBasis) -> SeriesFit:
    """Regress responses ``y`` (n, m) on the basis evaluated at ``x`` (n, dim_in)."""
    y = np.asarray(y, dtype=float)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    p = basis.evaluate(x)
    if y.shape[0] != p.shape[0]:
        raise ValueError("x and y have different numbers of rows")
    u, s, vt, s_all = _design_svd(p)
    coeffs = vt.T @ ((u.T @ y) / s[:, None]) if s.size else np.zeros((p.shape[1], y.shape[1]))
    return SeriesFit(basis=basis, coeffs=coeffs, gram_rank=int(s.size), singular_values=s_all)


@dataclass
class CvResult:
    score: float
    degenerate_units: list[int]


def loo_cv(x: np.ndarray, y: np.ndarray, basis: SieveBasis) -> CvResult:
    """Leave-one-out CV through the hat-matrix shortcut (no n refits).

    Units whose leverage is numerically one are scored by an explicit
    exclude-and-refit, since the shortcut divides by 1 - h_ii.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    p = basis.evaluate(x)
    u, s, vt, _ = _design_svd(p)
    coeffs = vt.T @ ((u.T @ y) / s[:, None]) if s.size else np.zeros((p.shape[1], y.shape[1]))
    resid = y - p @ coeffs
    h = np.sum(u**2, axis=1)
    degenerate = np.nonzero(h >= 1.0 - 1e-8)[0]
    ok = h < 1.0 - 1e-8
    score = float(np.sum((resid[ok] / (1.0 - h[ok])[:, None]) ** 2))
    n = p.shape[0]
    for i in degenerate:
        mask = np.ones(n, dtype=bool)
        mask[i] = False
        fit_i = series_fit(np.asarray(x)[mask], y[mask], basis)
        pred_i = fit_i.predict(np.asarray(x)[i : i + 1])
        score += float(np.sum((y[i] - pred_i[0]) ** 2))
    return CvResult(score=score, degenerate_units=[int(i) for i in degenerate])


def loo_cv_score(x: np.ndarray, y: np.ndarray, basis: SieveBasis) -> float:
    return loo_cv(x, y, basis).score


def select_basis(candidates, x, y) -> SieveBasis:
    """Return the CV argmin; exact ties break toward the smaller basis."""
    if not candidates:
        raise ValueError("empty candidate list")
    scored = [(loo_cv_score(x, y, b), b.dim_out, i) for i, b in enumerate(candidates)]
    scored.sort()
    return candidates[scored[0][2]]
