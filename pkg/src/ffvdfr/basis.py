"""B-spline bases, tensor-product bases and difference matrices.

Coefficient ordering for tensor products is t-fastest: the coefficient of
``phi_l(t) * psi_k(T)`` sits at index ``k * q + l``.  Every Kronecker
construction in the package relies on this convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

_DOMAIN_TOL = 1e-9


BOUNDARIES = ("extended", "clamped")


@dataclass(frozen=True)
class BSplineBasis:
    """B-spline basis with equally spaced knots on ``[lo, hi]``.

    Parameters
    ----------
    lo, hi : float
        Domain end points.
    interior_knots : int
        Number of interior knots.
    degree : int
        Polynomial degree (3 for cubic).
    boundary : {"extended", "clamped"}
        ``"extended"`` continues the equal knot spacing past both ends, so
        the Greville abscissae are equally spaced and second differences of
        the coefficients vanish exactly on straight lines.  ``"clamped"``
        repeats each end knot ``degree + 1`` times instead, which makes the
        end rows unit vectors but bends the difference-penalty null space
        near the boundary.
    """

    lo: float
    hi: float
    interior_knots: int
    degree: int = 3
    boundary: str = "extended"
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.lo) or not np.isfinite(self.hi) or not self.hi > self.lo:
            raise ValueError(f"degenerate domain [{self.lo}, {self.hi}]")
        if self.interior_knots < 0:
            raise ValueError("interior_knots must be >= 0")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}, got {self.boundary!r}")
        inner = np.linspace(self.lo, self.hi, self.interior_knots + 2)
        if self.boundary == "clamped":
            left, right = np.full(self.degree, float(self.lo)), np.full(self.degree, float(self.hi))
        else:
            h = (self.hi - self.lo) / (self.interior_knots + 1)
            steps = np.arange(self.degree, 0, -1)
            left, right = self.lo - h * steps, self.hi + h * steps[::-1]
        knots = np.concatenate([left, inner, right])
        knots[self.degree], knots[-self.degree - 1] = self.lo, self.hi
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def dimension(self) -> int:
        return self.interior_knots + self.degree + 1

    @property
    def domain(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        tol = _DOMAIN_TOL * max(1.0, abs(self.hi - self.lo))
        return (x >= self.lo - tol) & (x <= self.hi + tol)

    def __call__(self, points) -> np.ndarray:
        return eval_basis(self, points)

    def to_dict(self) -> dict:
        return {
            "lo": float(self.lo),
            "hi": float(self.hi),
            "interior_knots": int(self.interior_knots),
            "degree": int(self.degree),
            "boundary": self.boundary,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BSplineBasis":
        return cls(float(d["lo"]), float(d["hi"]), int(d["interior_knots"]), int(d["degree"]),
                   d.get("boundary", "extended"))


def make_basis(domain, interior_knots: int, degree: int = 3,
               boundary: str = "extended") -> BSplineBasis:
    """Build a basis on ``domain`` with equally spaced interior knots."""
    lo, hi = domain
    if degree < 1:
        raise ValueError("degree must be >= 1")
    return BSplineBasis(float(lo), float(hi), int(interior_knots), int(degree), boundary)


def basis_with_dimension(domain, dimension: int, degree: int = 3,
                         boundary: str = "extended") -> BSplineBasis:
    """Basis of a requested dimension; convenience over :func:`make_basis`."""
    if dimension < degree + 1:
        raise ValueError(f"dimension {dimension} < degree + 1 = {degree + 1}")
    return make_basis(domain, dimension - degree - 1, degree, boundary)


def eval_basis(basis: BSplineBasis, points) -> np.ndarray:
    """Evaluate every basis function at ``points``.

    Returns a dense ``(len(points), basis.dimension)`` array whose rows sum
    to one.  Points must lie in the closed domain; values within a tiny
    relative tolerance of an end point are snapped onto it.
    """
    x = np.atleast_1d(np.asarray(points, dtype=float))
    if x.ndim != 1:
        raise ValueError("points must be one-dimensional")
    if not np.all(basis.contains(x)):
        bad = x[~basis.contains(x)]
        raise ValueError(
            f"{bad.size} point(s) outside [{basis.lo}, {basis.hi}], e.g. {bad[0]!r}"
        )
    x = np.clip(x, basis.lo, basis.hi)
    if x.size == 0:
        return np.zeros((0, basis.dimension))
    if basis.degree == 0 and basis.interior_knots == 0:
        return np.ones((x.size, 1))
    return BSpline.design_matrix(x, basis.knots, basis.degree).toarray()


@dataclass(frozen=True)
class TensorBasis:
    """Tensor product of a t-marginal and a T-marginal basis.

    ``marginal_T`` may be ``None``, in which case the surface does not vary
    with T (the single-domain scalar-on-function case) and the dimension is q.
    """

    marginal_t: BSplineBasis
    marginal_T: BSplineBasis | None

    @property
    def q(self) -> int:
        return self.marginal_t.dimension

    @property
    def r(self) -> int:
        return 1 if self.marginal_T is None else self.marginal_T.dimension

    @property
    def dimension(self) -> int:
        return self.q * self.r

    def eval_T(self, T) -> np.ndarray:
        T = np.atleast_1d(np.asarray(T, dtype=float))
        if self.marginal_T is None:
            return np.ones((T.size, 1))
        return eval_basis(self.marginal_T, T)

    def to_dict(self) -> dict:
        return {
            "marginal_t": self.marginal_t.to_dict(),
            "marginal_T": None if self.marginal_T is None else self.marginal_T.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TensorBasis":
        mT = d["marginal_T"]
        return cls(
            BSplineBasis.from_dict(d["marginal_t"]),
            None if mT is None else BSplineBasis.from_dict(mT),
        )


def eval_tensor(basis: TensorBasis, t, T) -> np.ndarray:
    """Row of the bivariate basis at ``(t, T)``: ``kron(psi(T), phi(t))``."""
    phi = eval_basis(basis.marginal_t, [t])[0]
    psi = basis.eval_T([T])[0]
    return np.kron(psi, phi)


def eval_tensor_grid(basis: TensorBasis, t, T) -> np.ndarray:
    """Tensor rows at paired points; ``t`` and ``T`` have equal length."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    T = np.atleast_1d(np.asarray(T, dtype=float))
    if t.shape != T.shape:
        raise ValueError("t and T must have the same shape")
    phi = eval_basis(basis.marginal_t, t)
    psi = basis.eval_T(T)
    return (psi[:, :, None] * phi[:, None, :]).reshape(t.size, -1)


def difference_matrix(order: int, c: int) -> np.ndarray:
    """``(c - order) x c`` matrix of order-th finite differences."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if c <= order:
        raise ValueError(f"need c > order, got c={c}, order={order}")
    return np.diff(np.eye(c, dtype=int), n=order, axis=0)
