"""Penalized least-squares pre-smoothing of raw variable-domain curves."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ffvdfr.basis import BSplineBasis, basis_with_dimension, difference_matrix, eval_basis

MIN_OBSERVATIONS = 10
DEFAULT_LAMBDA_GRID = np.logspace(-5, 5, 31)


@dataclass
class VariableDomainDataset:
    """Left-aligned curves observed on subject-specific domains ``[0, T_i]``.

    Parameters
    ----------
    points : list of arrays
        Observation points per subject, strictly increasing and >= 0.
    values : list of arrays
        Raw curve values aligned with ``points``.
    y : array, optional
        Scalar responses.
    covariates : array (N, c), optional
        Scalar covariates.
    ids : list of str, optional
        Subject identifiers; defaults to ``"0", "1", ...``.
    """

    points: list
    values: list
    y: np.ndarray | None = None
    covariates: np.ndarray | None = None
    ids: list = None
    covariate_names: list = None
    min_observations: int = MIN_OBSERVATIONS

    def __post_init__(self):
        self.points = [np.asarray(p, dtype=float) for p in self.points]
        self.values = [np.asarray(v, dtype=float) for v in self.values]
        n = len(self.points)
        if len(self.values) != n:
            raise ValueError("points and values must have the same number of subjects")
        if self.ids is None:
            self.ids = [str(i) for i in range(n)]
        if len(self.ids) != n:
            raise ValueError("ids length does not match curve count")
        for sid, t, x in zip(self.ids, self.points, self.values):
            if t.shape != x.shape or t.ndim != 1:
                raise ValueError(f"subject {sid}: points and values differ in shape")
            if t.size < self.min_observations:
                raise ValueError(
                    f"subject {sid}: {t.size} observations, minimum is {self.min_observations}"
                )
            if np.any(t < 0) or np.any(np.diff(t) <= 0):
                raise ValueError(f"subject {sid}: points must be >= 0 and strictly increasing")
            if t[-1] <= 0:
                raise ValueError(f"subject {sid}: domain length must be positive")
            if not np.all(np.isfinite(x)):
                raise ValueError(f"subject {sid}: non-finite curve values")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float)
            if self.y.shape != (n,):
                raise ValueError(f"response length {self.y.size} does not match {n} curves")
        if self.covariates is not None:
            c = np.asarray(self.covariates, dtype=float)
            if c.ndim == 1:
                c = c[:, None]
            if c.shape[0] != n:
                raise ValueError("covariate rows do not match curve count")
            self.covariates = c
            if self.covariate_names is None:
                self.covariate_names = [f"c{j}" for j in range(c.shape[1])]

    def __len__(self):
        return len(self.points)

    @property
    def domains(self) -> np.ndarray:
        return np.array([t[-1] for t in self.points])

    def subset(self, index) -> "VariableDomainDataset":
        index = np.asarray(index)
        return VariableDomainDataset(
            points=[self.points[i] for i in index],
            values=[self.values[i] for i in index],
            y=None if self.y is None else self.y[index],
            covariates=None if self.covariates is None else self.covariates[index],
            ids=[self.ids[i] for i in index],
            covariate_names=self.covariate_names,
            min_observations=self.min_observations,
        )


@dataclass
class SmoothedCurveSet:
    """Per-subject curve bases, coefficients and selected smoothing parameters."""

    bases: list
    coefficients: np.ndarray  # (N, p)
    lambdas: np.ndarray
    gcv: np.ndarray
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.bases)

    @property
    def p(self) -> int:
        return self.coefficients.shape[1]

    @property
    def domains(self) -> np.ndarray:
        return np.array([b.hi for b in self.bases])

    def subset(self, index) -> "SmoothedCurveSet":
        index = np.asarray(index)
        return SmoothedCurveSet(
            bases=[self.bases[i] for i in index],
            coefficients=self.coefficients[index],
            lambdas=self.lambdas[index],
            gcv=self.gcv[index],
            ids=[self.ids[i] for i in index] if self.ids else [],
        )

    def evaluate(self, i: int, points) -> np.ndarray:
        return eval_basis(self.bases[i], points) @ self.coefficients[i]


def _penalty(p: int) -> np.ndarray:
    d = difference_matrix(2, p)
    return (d.T @ d).astype(float)


def _check_points(points, values, min_obs):
    t = np.asarray(points, dtype=float)
    x = np.asarray(values, dtype=float)
    if t.shape != x.shape:
        raise ValueError("points and values must have the same length")
    if t.size < min_obs:
        raise ValueError(f"{t.size} observations, minimum is {min_obs}")
    return t, x


def curve_basis(points, p: int, degree: int = 3) -> BSplineBasis:
    """Per-curve basis spanning ``[0, max(points)]``."""
    return basis_with_dimension((0.0, float(np.max(points))), p, degree)


def smooth_curve(points, values, p: int, lam: float, basis: BSplineBasis | None = None,
                 min_obs: int = MIN_OBSERVATIONS) -> np.ndarray:
    """Solve ``(Phi'Phi + lam D'D) a = Phi'x`` for the curve coefficients."""
    t, x = _check_points(points, values, min_obs)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    basis = basis or curve_basis(t, p)
    phi = eval_basis(basis, t)
    lhs = phi.T @ phi + lam * _penalty(basis.dimension)
    try:
        cf = linalg.cho_factor(lhs)
    except linalg.LinAlgError as exc:
        raise linalg.LinAlgError(
            "singular smoothing system; use a positive lambda or more points"
        ) from exc
    return linalg.cho_solve(cf, phi.T @ x)


def _gcv_path(phi, x, pen, grid):
    ptp = phi.T @ phi
    rhs = np.column_stack([phi.T @ x, ptp])
    out = []
    for lam in grid:
        sol = linalg.solve(ptp + lam * pen, rhs, assume_a="pos")
        rss = float(np.sum((x - phi @ sol[:, 0]) ** 2))
        out.append((rss, float(np.trace(sol[:, 1:]))))
    return out


def hat_trace(points, p: int, lam: float, basis: BSplineBasis | None = None) -> float:
    """Trace of the smoother matrix at ``lam``."""
    t = np.asarray(points, dtype=float)
    basis = basis or curve_basis(t, p)
    phi = eval_basis(basis, t)
    lhs = phi.T @ phi + lam * _penalty(basis.dimension)
    return float(np.trace(linalg.solve(lhs, phi.T @ phi)))


def gcv_score(points, values, p: int, lam: float, basis: BSplineBasis | None = None) -> float:
    """``m * RSS / (m - tr H)^2`` computed by a direct solve."""
    t, x = np.asarray(points, float), np.asarray(values, float)
    basis = basis or curve_basis(t, p)
    a = smooth_curve(t, x, p, lam, basis=basis, min_obs=0)
    rss = float(np.sum((x - eval_basis(basis, t) @ a) ** 2))
    tr = hat_trace(t, p, lam, basis)
    m = t.size
    if tr >= m:
        return np.inf
    return m * rss / (m - tr) ** 2


def select_lambda_gcv(points, values, p: int, grid=DEFAULT_LAMBDA_GRID,
                      basis: BSplineBasis | None = None) -> tuple[float, float]:
    """Grid search for the GCV-optimal smoothing parameter.

    Ties are broken toward the larger lambda.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    if np.any(grid <= 0):
        raise ValueError("lambda grid must be positive")
    t, x = np.asarray(points, float), np.asarray(values, float)
    basis = basis or curve_basis(t, p)
    phi = eval_basis(basis, t)
    m = t.size
    scores = np.full(grid.size, np.inf)
    for j, (rss, tr) in enumerate(_gcv_path(phi, x, _penalty(basis.dimension), grid)):
        if tr < m:
            scores[j] = m * rss / (m - tr) ** 2
    if not np.any(np.isfinite(scores)):
        raise ValueError("hat-matrix trace reaches the sample size on every grid value")
    best = np.min(scores)
    # scores within round-off of the best (relative to the data scale) count as ties
    ties = np.flatnonzero(scores <= best * (1 + 1e-10) + 1e-12 * float(np.mean(x**2)) + 1e-300)
    j = max(ties, key=lambda k: grid[k])
    return float(grid[j]), float(scores[j])


def smooth_all(data: VariableDomainDataset, p: int = 25, grid=DEFAULT_LAMBDA_GRID,
               degree: int = 3, rescale: bool = False) -> SmoothedCurveSet:
    """Smooth every curve with its own GCV-selected lambda.

    With ``rescale=True`` each curve's abscissae are mapped to ``[0, 1]``
    first (linear registration).
    """
    bases, coefs, lams, scores = [], [], [], []
    for sid, t, x in zip(data.ids, data.points, data.values):
        try:
            tt = t / t[-1] if rescale else t
            basis = basis_with_dimension((0.0, float(tt[-1])), p, degree)
            lam, score = select_lambda_gcv(tt, x, p, grid, basis=basis)
            a = smooth_curve(tt, x, p, lam, basis=basis, min_obs=data.min_observations)
        except (ValueError, linalg.LinAlgError) as exc:
            raise type(exc)(f"subject {sid}: {exc}") from exc
        bases.append(basis)
        coefs.append(a)
        lams.append(lam)
        scores.append(score)
    return SmoothedCurveSet(
        bases=bases,
        coefficients=np.array(coefs).reshape(len(bases), p),
        lambdas=np.array(lams),
        gcv=np.array(scores),
        ids=list(data.ids),
    )
