"""Composite Simpson quadrature and the partial inner products Psi_i."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ffvdfr.basis import BSplineBasis, TensorBasis, eval_basis


def simpson_weights(lo: float, hi: float, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the composite Simpson rule on ``[lo, hi]``."""
    if not hi > lo:
        raise ValueError(f"need hi > lo, got [{lo}, {hi}]")
    if n_nodes < 3 or n_nodes % 2 == 0:
        raise ValueError(f"n_nodes must be odd and >= 3, got {n_nodes}")
    nodes = np.linspace(lo, hi, n_nodes)
    h = (hi - lo) / (n_nodes - 1)
    w = np.full(n_nodes, 2.0)
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return nodes, w * h / 3.0


def default_nodes(T: float) -> int:
    """Node rule ``max(20 * ceil(T) + 1, 1001)``; always odd.

    Products of cubic splines are piecewise degree 6, so Simpson is not
    exact; this density keeps Psi within ~1e-9 of the exact integral for
    domains up to a few hundred time units.
    """
    return max(20 * math.ceil(T) + 1, 1001)


def curve_gram(curve_basis: BSplineBasis, marginal_t: BSplineBasis, T_i: float,
               n_nodes: int | None = None) -> np.ndarray:
    """``(1/T_i) * int_0^T_i phi(t) varphi(t)' dt`` as a ``p x q`` matrix."""
    if T_i <= 0:
        raise ValueError("domain length must be positive")
    nodes, w = simpson_weights(0.0, T_i, default_nodes(T_i) if n_nodes is None else n_nodes)
    phi = eval_basis(curve_basis, nodes)
    varphi = eval_basis(marginal_t, nodes)
    return (phi * (w / T_i)[:, None]).T @ varphi


def partial_inner_product(curve_basis: BSplineBasis, tensor: TensorBasis, T_i: float,
                          n_nodes: int | None = None) -> np.ndarray:
    """Weighted partial inner product of a curve basis with ``M(t, T_i)``.

    Returns the ``p x (q*r)`` block ``(1/T_i) int_0^{T_i} phi(t) M(t, T_i) dt``.
    Since ``M(t, T_i) = kron(psi(T_i), varphi(t))`` and ``psi(T_i)`` is constant
    in t, the block factors into ``kron(psi(T_i), G_i)`` with ``G_i`` the
    curve/marginal Gram matrix.
    """
    if tensor.marginal_T is not None and not tensor.marginal_T.contains(T_i):
        raise ValueError(
            f"T_i={T_i} outside the coefficient T-domain "
            f"[{tensor.marginal_T.lo}, {tensor.marginal_T.hi}]"
        )
    if not curve_basis.contains(T_i) or not tensor.marginal_t.contains(T_i):
        raise ValueError(f"T_i={T_i} outside the curve or t-marginal domain")
    gram = curve_gram(curve_basis, tensor.marginal_t, T_i, n_nodes)
    psi = tensor.eval_T([T_i])[0]
    return np.kron(psi[None, :], gram)


@dataclass
class PsiMatrix:
    """Stacked Psi_i blocks and the contracted design rows ``a_i' Psi_i``."""

    blocks: list
    a_psi: np.ndarray  # (N, q*r)

    def __len__(self):
        return len(self.blocks)


def assemble_psi(curves, tensor: TensorBasis, n_nodes_rule=default_nodes,
                 keep_blocks: bool = True) -> PsiMatrix:
    """Build ``A Psi`` row by row; row i equals ``a_i' Psi_i``.

    ``curves`` is a :class:`~ffvdfr.presmooth.SmoothedCurveSet`;
    ``n_nodes_rule`` maps ``T_i`` to an odd Simpson node count.
    """
    n = len(curves)
    rows = np.empty((n, tensor.dimension))
    blocks = []
    for i, (basis, a) in enumerate(zip(curves.bases, curves.coefficients)):
        T_i = basis.hi
        try:
            if tensor.marginal_T is not None and not tensor.marginal_T.contains(T_i):
                raise ValueError(
                    f"T_i={T_i} outside the coefficient T-domain "
                    f"[{tensor.marginal_T.lo}, {tensor.marginal_T.hi}]"
                )
            psi = tensor.eval_T([T_i])[0]
            gram = curve_gram(basis, tensor.marginal_t, T_i, n_nodes_rule(T_i))
        except ValueError as exc:
            sid = curves.ids[i] if curves.ids else i
            raise ValueError(f"subject {sid}: {exc}") from exc
        rows[i] = np.kron(psi, a @ gram)
        if keep_blocks:
            blocks.append(np.kron(psi[None, :], gram))
    return PsiMatrix(blocks=blocks, a_psi=rows)
