"""Scalar-on-function baseline fitted after linear registration to [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ffvdfr.basis import TensorBasis, basis_with_dimension, eval_basis
from ffvdfr.presmooth import DEFAULT_LAMBDA_GRID, SmoothedCurveSet, VariableDomainDataset, smooth_all
from ffvdfr.quadrature import assemble_psi
from ffvdfr.vdfr import PQLControls, VdfrFit, fit_design, predict_design


@dataclass
class RegisteredDataset:
    """Curves mapped onto ``[0, 1]`` by ``t -> t / T_i``; values untouched."""

    points: list
    values: list
    domains: np.ndarray
    ids: list

    def to_dataset(self, y=None, covariates=None, min_observations: int = 10):
        return VariableDomainDataset(
            points=self.points, values=self.values, y=y, covariates=covariates,
            ids=self.ids, min_observations=min_observations,
        )


def register_linear(data: VariableDomainDataset) -> RegisteredDataset:
    pts = []
    for sid, t in zip(data.ids, data.points):
        if t[-1] == 0:
            raise ValueError(f"subject {sid}: zero-length domain")
        pts.append(t / t[-1])
    return RegisteredDataset(points=pts, values=[v.copy() for v in data.values],
                             domains=data.domains.copy(), ids=list(data.ids))


def sof_tensor(q: int = 25, degree: int = 3) -> TensorBasis:
    return TensorBasis(basis_with_dimension((0.0, 1.0), q, degree), None)


def sof_design(curves: SmoothedCurveSet, q: int = 25) -> tuple[np.ndarray, TensorBasis]:
    """Rows ``a_i' int_0^1 phi(s) varphi(s)' ds`` for registered curves."""
    tensor = sof_tensor(q)
    return assemble_psi(curves, tensor, keep_blocks=False).a_psi, tensor


def smooth_registered(registered: RegisteredDataset, p: int = 25,
                      grid=DEFAULT_LAMBDA_GRID) -> SmoothedCurveSet:
    return smooth_all(registered.to_dataset(), p=p, grid=grid)


def fit_sof(registered: RegisteredDataset, y, covariates=None, family: str = "gaussian",
            p: int = 25, q: int = 25, controls: PQLControls | None = None,
            curves: SmoothedCurveSet | None = None) -> VdfrFit:
    """Fit ``eta = alpha + C gamma + int_0^1 X(s) beta(s) ds`` with one smoothing parameter.

    The returned fit's ``b`` holds the coefficients of beta(s) in the
    registered time scale; evaluate with :func:`sof_beta`.
    """
    curves = curves if curves is not None else smooth_registered(registered, p)
    a_psi, tensor = sof_design(curves, q)
    return fit_design(a_psi, y, tensor, family, covariates, controls)


def sof_beta(fit: VdfrFit, s) -> np.ndarray:
    return eval_basis(fit.tensor.marginal_t, s) @ fit.b


def predict_sof(fit: VdfrFit, curves: SmoothedCurveSet, covariates=None) -> np.ndarray:
    a_psi = assemble_psi(curves, fit.tensor, keep_blocks=False).a_psi
    return predict_design(fit, a_psi, covariates)
