"""Fully functional variable-domain functional regression.

The linear predictor is ``eta = alpha + C gamma + (A Psi) b`` where ``b`` holds
the tensor-product coefficients of the surface beta(t, T).  The anisotropic
difference penalty on ``b`` is turned into a mixed model through an orthogonal
eigenbasis transform, and the model is fitted by penalized quasi-likelihood
with Schall-type REML updates of the two variance components.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from ffvdfr.basis import (
    TensorBasis,
    basis_with_dimension,
    difference_matrix,
    eval_basis,
)
from ffvdfr.quadrature import PsiMatrix, assemble_psi, default_nodes

log = logging.getLogger(__name__)

FAMILIES = ("gaussian", "poisson")
RANK_COND_LIMIT = 1e10
COND_LIMIT = 1e10
EXACT_FIT_RTOL = 1e-10


class FitError(RuntimeError):
    """Raised when the PQL iteration cannot produce a usable fit."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class ConvergenceError(FitError):
    pass


# ---------------------------------------------------------------------------
# Design, penalty and mixed-model transform
# ---------------------------------------------------------------------------


def assemble_design(psi, covariates=None) -> np.ndarray:
    """Full design ``B = [1 | C | A Psi]``; theta is ordered (alpha, gamma, b)."""
    a_psi = psi.a_psi if isinstance(psi, PsiMatrix) else np.asarray(psi, dtype=float)
    n = a_psi.shape[0]
    cols = [np.ones((n, 1))]
    if covariates is not None:
        c = np.asarray(covariates, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.shape[0] != n:
            raise ValueError(f"covariates have {c.shape[0]} rows, design has {n}")
        cols.append(c)
    cols.append(a_psi)
    return np.hstack(cols)


@dataclass
class TensorPenalty:
    D_t: np.ndarray
    D_T: np.ndarray | None
    lambda_t: float
    lambda_T: float
    matrix: np.ndarray


def build_penalty(q: int, r: int, lambda_t: float, lambda_T: float) -> TensorPenalty:
    """``lambda_t (I_r x D_t'D_t) + lambda_T (D_T'D_T x I_q)``, t-fastest ordering.

    ``r = 1`` gives the univariate penalty ``lambda_t D_t'D_t``.
    """
    if q < 3 or (r != 1 and r < 3):
        raise ValueError(f"need q >= 3 and r >= 3 (or r == 1), got q={q}, r={r}")
    if lambda_t < 0 or lambda_T < 0:
        raise ValueError("smoothing parameters must be >= 0")
    d_t = difference_matrix(2, q)
    p_t = (d_t.T @ d_t).astype(float)
    mat = lambda_t * np.kron(np.eye(r), p_t)
    d_T = None
    if r > 1:
        d_T = difference_matrix(2, r)
        mat = mat + lambda_T * np.kron((d_T.T @ d_T).astype(float), np.eye(q))
    return TensorPenalty(d_t, d_T, float(lambda_t), float(lambda_T), mat)


def _split_eigen(c: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Null/penalized eigenvector blocks of the second-difference cross product."""
    d = difference_matrix(2, c).astype(float)
    vals, vecs = linalg.eigh(d.T @ d)
    order = np.argsort(vals)
    vals, vecs = vals[order], vecs[:, order]
    if not np.all(np.isfinite(vals)):
        raise linalg.LinAlgError("eigendecomposition of the difference penalty failed")
    # Orthonormal constant/linear pair, fixed for reproducibility.
    x = np.arange(c, dtype=float)
    u_n = np.column_stack([np.ones(c), x - x.mean()])
    u_n /= np.linalg.norm(u_n, axis=0)
    u_s = vecs[:, 2:]
    # project out any round-off leakage into the null space, then re-normalize
    u_s = u_s - u_n @ (u_n.T @ u_s)
    u_s /= np.linalg.norm(u_s, axis=0)
    flip = np.sign(u_s[np.argmax(np.abs(u_s), axis=0), np.arange(u_s.shape[1])])
    u_s = u_s * flip
    sigma = vals[2:]
    if np.any(sigma <= 0):
        raise linalg.LinAlgError("non-positive eigenvalue in the penalized block")
    return u_n, u_s, sigma


@dataclass
class MixedModelTransform:
    """Orthogonal transform ``T = [T_n | T_s]`` and the diagonal of ``T'PT``.

    ``prec_t`` and ``prec_T`` hold, for every column of ``T_s``, the
    coefficient of ``lambda_t`` and ``lambda_T`` in the diagonal of ``T'PT``.
    """

    q: int
    r: int
    U_tn: np.ndarray
    U_ts: np.ndarray
    U_Tn: np.ndarray
    U_Ts: np.ndarray
    sigma_t: np.ndarray
    sigma_T: np.ndarray
    T: np.ndarray
    n_null: int
    prec_t: np.ndarray
    prec_T: np.ndarray
    X: np.ndarray | None = None
    Z: np.ndarray | None = None

    @property
    def T_n(self) -> np.ndarray:
        return self.T[:, : self.n_null]

    @property
    def T_s(self) -> np.ndarray:
        return self.T[:, self.n_null:]

    @property
    def precisions(self) -> np.ndarray:
        """``(K, n_random)`` precision templates, one row per variance component."""
        if self.r == 1:
            return self.prec_t[None, :]
        return np.vstack([self.prec_t, self.prec_T])


@functools.lru_cache(maxsize=32)
def _transform_cached(q: int, r: int):
    u_tn, u_ts, s_t = _split_eigen(q)
    if r == 1:
        u_Tn, u_Ts, s_T = np.ones((1, 1)), np.zeros((1, 0)), np.zeros(0)
    else:
        u_Tn, u_Ts, s_T = _split_eigen(r)
    nTn, ntn = u_Tn.shape[1], u_tn.shape[1]
    blocks = [np.kron(u_Tn, u_tn)]
    prec_t, prec_T = [], []
    if r > 1:
        blocks.append(np.kron(u_Ts, u_tn))
        prec_t.append(np.zeros(s_T.size * ntn))
        prec_T.append(np.kron(s_T, np.ones(ntn)))
    blocks.append(np.kron(u_Tn, u_ts))
    prec_t.append(np.kron(np.ones(nTn), s_t))
    prec_T.append(np.zeros(nTn * s_t.size))
    if r > 1:
        blocks.append(np.kron(u_Ts, u_ts))
        prec_t.append(np.kron(np.ones(s_T.size), s_t))
        prec_T.append(np.kron(s_T, np.ones(s_t.size)))
    T = np.hstack(blocks)
    return (u_tn, u_ts, u_Tn, u_Ts, s_t, s_T, T, nTn * ntn,
            np.concatenate(prec_t), np.concatenate(prec_T))


def build_transform(q: int, r: int) -> MixedModelTransform:
    """Eigenbasis transform whose column blocks follow the null/penalized split.

    Column order: ``U_Tn x U_tn | U_Ts x U_tn | U_Tn x U_ts | U_Ts x U_ts``.
    """
    if q < 3 or (r != 1 and r < 3):
        raise ValueError(f"need q >= 3 and r >= 3 (or r == 1), got q={q}, r={r}")
    parts = _transform_cached(q, r)
    return MixedModelTransform(q, r, *[np.array(p) if isinstance(p, np.ndarray) else p
                                       for p in parts])


def _cond(m: np.ndarray) -> float:
    norms = np.linalg.norm(m, axis=0)
    if np.any(norms == 0):
        return np.inf
    return float(np.linalg.cond(m / norms))


def reparameterize(B: np.ndarray, transform: MixedModelTransform, n_lead: int | None = None):
    """Split the design into fixed (``X``) and random (``Z``) parts.

    ``n_lead`` is the number of leading unpenalized columns (intercept and
    covariates); by default everything before the surface block.  Null-space
    columns that make ``X`` numerically rank deficient are dropped.

    Returns ``(X, Z, kept)`` where ``kept`` indexes the retained ``T_n`` columns.
    """
    B = np.asarray(B, dtype=float)
    qr = transform.T.shape[0]
    if n_lead is None:
        n_lead = B.shape[1] - qr
    if B.shape[1] - n_lead != qr or n_lead < 0:
        raise ValueError(f"surface block has {B.shape[1] - n_lead} columns, expected {qr}")
    lead, surf = B[:, :n_lead], B[:, n_lead:]
    xn = surf @ transform.T_n
    z = surf @ transform.T_s
    # columns that are round-off relative to the surface block carry no signal,
    # though column scaling inside _cond would make them look independent
    live = np.linalg.norm(xn, axis=0) > 1e-9 * max(np.linalg.norm(surf), 1e-300)
    kept = list(np.flatnonzero(live))
    x = np.hstack([lead, xn[:, kept]])
    if not live.all() or _cond(x) > RANK_COND_LIMIT:
        kept = []
        x = lead
        for j in np.flatnonzero(live):
            trial = np.hstack([x, xn[:, [j]]])
            if _cond(trial) <= RANK_COND_LIMIT:
                x = trial
                kept.append(int(j))
        log.info("dropped null-space columns %s for rank", sorted(set(range(xn.shape[1])) - set(kept)))
    transform.X, transform.Z = x, z
    return x, z, kept


# ---------------------------------------------------------------------------
# Penalized quasi-likelihood
# ---------------------------------------------------------------------------


@dataclass
class PQLControls:
    """Iteration controls.

    ``fixed=True`` freezes the variance components (and the Gaussian
    dispersion) at their initial values.
    """

    tol: float = 1e-6
    max_iter: int = 200
    tau2_init: tuple | None = None
    phi_init: float = 1.0
    fixed: bool = False
    tau2_floor: float = 1e-10


@dataclass
class PQLResult:
    nu: np.ndarray
    delta: np.ndarray
    tau2: np.ndarray
    phi: float
    eta: np.ndarray
    mu: np.ndarray
    ed_components: np.ndarray
    ed_total: float
    iterations: int
    rel_change: float
    converged: bool
    trace: list = field(default_factory=list)


def _family_parts(family, y, eta):
    if family == "gaussian":
        mu = eta
        w = np.ones_like(eta)
        z = y
    else:
        with np.errstate(over="ignore"):
            mu = np.exp(eta)
        w = mu
        z = eta + (y - mu) / mu
    return mu, w, z


def _start_eta(family, y):
    if family == "gaussian":
        return np.full_like(y, y.mean())
    return np.log(y + 0.1)


def fit_pql(X, Z, y, family: str, precisions, controls: PQLControls | None = None) -> PQLResult:
    """PQL fit of ``eta = X nu + Z delta`` with ``G^-1 = sum_k precisions[k] / tau2_k``.

    Each iteration forms the IRLS working response, solves the mixed-model
    equations in observation space, and updates every ``tau2_k`` as
    ``delta' Lambda_k delta / ed_k``.  ``ed_k`` apportions the effective
    dimension of each random coefficient between the components in
    proportion to their share of its precision.
    """
    controls = controls or PQLControls()
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}, got {family!r}")
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    lam = np.atleast_2d(np.asarray(precisions, dtype=float))
    n = y.size
    if X.shape[0] != n or Z.shape[0] != n:
        raise ValueError("X, Z and y must have the same number of rows")
    if lam.shape[1] != Z.shape[1]:
        raise ValueError("precision templates do not match the columns of Z")
    if family == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
        raise ValueError("poisson family needs nonnegative integer responses")
    n_comp = lam.shape[0]
    tau2 = np.ones(n_comp) if controls.tau2_init is None else \
        np.asarray(controls.tau2_init, dtype=float).copy()
    if tau2.shape != (n_comp,) or np.any(tau2 <= 0):
        raise ValueError("tau2_init must hold one positive value per component")
    phi = float(controls.phi_init) if family == "gaussian" else 1.0
    eta = _start_eta(family, y)
    n_fixed = X.shape[1]
    trace = []

    if family == "gaussian" and not controls.fixed and n > n_fixed:
        # y already in the column space of X: REML's optimum is the boundary
        # (no random effect, zero dispersion), which the updates only approach
        # through round-off noise.  Return that limit directly.
        nu0 = np.linalg.lstsq(X, y, rcond=None)[0]
        resid = y - X @ nu0
        if np.linalg.norm(resid) <= EXACT_FIT_RTOL * np.linalg.norm(y):
            phi0 = max(float(resid @ resid) / (n - n_fixed), 1e-300)
            tau2_0 = np.full(n_comp, max(controls.tau2_floor * phi0, 1e-300))
            log.info("response reproduced by the fixed effects alone; variance components at 0")
            eta0 = X @ nu0
            return PQLResult(
                nu=nu0, delta=np.zeros(Z.shape[1]), tau2=tau2_0, phi=phi0, eta=eta0, mu=eta0,
                ed_components=np.zeros(n_comp), ed_total=float(n_fixed), iterations=1,
                rel_change=0.0, converged=True,
                trace=[{"iteration": 1, "tau2": tau2_0.tolist(), "phi": phi0,
                        "ed": float(n_fixed), "rel_change": 0.0}],
            )

    def solve(tau2, phi, w, z):
        # Work with W^1/2-scaled rows so the marginal covariance is phi*I + Zw G Zw',
        # which stays positive definite unless the weights span many decades.
        sw = np.sqrt(w)
        xw, zw, yw = X * sw[:, None], Z * sw[:, None], z * sw
        g = 1.0 / (lam / tau2[:, None]).sum(axis=0)
        v = zw @ (g[:, None] * zw.T)
        v[np.diag_indices(n)] += phi
        try:
            cf = linalg.cho_factor(v, check_finite=False)
            vx = linalg.cho_solve(cf, xw, check_finite=False)
            xcf = linalg.cho_factor(xw.T @ vx, check_finite=False)
        except linalg.LinAlgError:
            return solve_augmented(tau2, xw, zw, yw, g, phi)
        vz = linalg.cho_solve(cf, zw, check_finite=False)
        nu = linalg.cho_solve(xcf, vx.T @ yw, check_finite=False)
        pz = linalg.cho_solve(cf, yw - xw @ nu, check_finite=False)
        delta = g * (zw.T @ pz)
        pzz = vz - vx @ linalg.cho_solve(xcf, xw.T @ vz, check_finite=False)
        ed_rand = g * np.einsum("ij,ij->j", zw, pzz)
        if np.any(ed_rand < -1e-6) or np.any(ed_rand > 1 + 1e-6):
            # cancellation in V^-1: each ed_rand must lie in [0, 1]
            return solve_augmented(tau2, xw, zw, yw, g, phi)
        ed_comp = (lam / tau2[:, None]) @ (g * ed_rand)
        return nu, delta, ed_comp, n_fixed + float(ed_rand.sum())

    def solve_augmented(tau2, xw, zw, yw, g, phi):
        # Coefficient-space fallback: QR of the penalized least-squares system
        # [Xw Zw; 0 sqrt(phi/g)] [nu; delta] ~ [yw; 0].
        m = zw.shape[1]
        aug = np.zeros((n + m, n_fixed + m))
        aug[:n, :n_fixed] = xw
        aug[:n, n_fixed:] = zw
        aug[n:, n_fixed:] = np.diag(np.sqrt(phi / g))
        rhs = np.concatenate([yw, np.zeros(m)])
        q_, r_ = linalg.qr(aug, mode="economic", check_finite=False)
        if np.any(np.diag(r_) == 0):
            raise FitError("fixed-effect design is rank deficient", trace)
        coef = linalg.solve_triangular(r_, q_.T @ rhs, check_finite=False)
        if not np.all(np.isfinite(coef)):
            raise FitError("penalized least-squares solve produced non-finite values", trace)
        rinv = linalg.solve_triangular(r_, np.eye(r_.shape[0]), check_finite=False)
        c_diag = phi * np.einsum("ij,ij->i", rinv, rinv)[n_fixed:]
        ed_rand = np.clip(1.0 - c_diag / g, 0.0, 1.0)
        ed_comp = (lam / tau2[:, None]) @ (g * ed_rand)
        return coef[:n_fixed], coef[n_fixed:], ed_comp, n_fixed + float(ed_rand.sum())

    lam_min = np.array([row[row > 0].min() if np.any(row > 0) else 1.0 for row in lam])
    cap_prev = [np.full(n_comp, np.inf)]

    def schall(delta, ed_comp, phi, w):
        quad = lam @ delta**2
        new = np.where((ed_comp > 1e-12) & (quad > 0), quad / np.maximum(ed_comp, 1e-300), 0.0)
        # keep the penalized normal equations within COND_LIMIT of singular
        # (non-increasing across iterations so a binding cap cannot oscillate)
        scale = np.linalg.norm(Z * np.sqrt(w)[:, None], 2) ** 2 if Z.size else 0.0
        cap = cap_prev[0] if scale == 0 else np.minimum(COND_LIMIT * phi * lam_min / scale, cap_prev[0])
        cap_prev[0] = cap
        return np.clip(new, np.minimum(controls.tau2_floor * phi, cap), cap)

    def fixed_point_root(k, tau2, phi, w, z, floor, downward):
        def gap(s):
            trial = tau2.copy()
            trial[k] = np.exp(s)
            _, d_t, e_t, _ = solve(trial, phi, w, z)
            return float(np.log(max(schall(d_t, e_t, phi, w)[k], 1e-300)) - s)

        s0 = float(np.log(tau2[k]))
        if downward:
            lo = float(np.log(floor))
            if gap(lo) <= np.log1p(1e-6):
                return floor
            hi = s0
        else:
            lo, hi = s0, s0 + 1.0
            for _ in range(30):
                if gap(hi) < 0:
                    break
                lo, hi = hi, hi + 2.0
            else:
                return None
        try:
            return float(np.exp(optimize.brentq(gap, lo, hi, xtol=1e-10)))
        except ValueError:
            return None

    converged = False
    rel = np.inf
    history = [[np.log(t)] for t in tau2]
    last_ratio = [np.nan] * n_comp
    no_probe_until = np.zeros(n_comp, dtype=int)
    for it in range(1, controls.max_iter + 1):
        mu, w, z = _family_parts(family, y, eta)
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(z))):
            raise FitError(
                "non-finite working weights (Poisson overflow); clip the linear "
                "predictor of the simulated data or rescale the curves",
                trace,
            )
        nu, delta, ed_comp, ed_total = solve(tau2, phi, w, z)
        eta_new = X @ nu + Z @ delta

        tau2_new, phi_new = tau2, phi
        jumped = False
        if not controls.fixed:
            tau2_new = schall(delta, ed_comp, phi, w)
            if family == "gaussian":
                resid = float(np.sum(w * (z - eta_new) ** 2))
                phi_new = max(resid / max(n - ed_total, 1.0), 1e-300)
        d_tau = float(np.max(np.abs(tau2_new - tau2) / tau2))
        d_eta = float(np.linalg.norm(eta_new - eta) / (np.linalg.norm(eta) + 1e-10))
        d_phi = abs(phi_new - phi) / phi if family == "gaussian" else 0.0
        rel = max(d_tau, d_eta, d_phi)

        if not controls.fixed and rel >= controls.tol:
            floor = controls.tau2_floor * phi_new
            for k in range(n_comp):
                h = history[k]
                h.append(np.log(tau2_new[k]))
                if len(h) < 4 or tau2_new[k] <= floor:
                    continue
                d1, d2 = h[-2] - h[-3], h[-1] - h[-2]
                ratio = d2 / d1 if d1 != 0 else np.nan
                steady = np.isfinite(ratio) and abs(ratio - last_ratio[k]) < 0.01
                last_ratio[k] = ratio
                if not steady:
                    continue
                if 0.0 < ratio < 0.995:
                    # Aitken extrapolation of a linearly converging sequence (log scale)
                    step = float(np.clip(d2 * ratio / (1.0 - ratio), -5.0, 5.0))
                    tau2_new[k] = max(np.exp(h[-1] + step), floor)
                    history[k] = [np.log(tau2_new[k])]
                    last_ratio[k] = np.nan
                    jumped = True
                elif ratio >= 0.995 and it >= no_probe_until[k]:
                    # Near-unit ratio: the plain update crawls.  Solve the fixed-point
                    # equation for this component directly, others held where they are.
                    root = fixed_point_root(k, tau2_new, phi_new, w, z, floor, d2 < 0)
                    if root is None:
                        no_probe_until[k] = it + 10
                    else:
                        tau2_new[k] = root
                        history[k] = [np.log(root)]
                        jumped = True

        trace.append({"iteration": it, "tau2": tau2_new.tolist(), "phi": phi_new,
                      "ed": ed_total, "rel_change": rel})
        if family == "poisson":
            # damp large IRLS steps on the log scale; inactive near convergence
            step = float(np.max(np.abs(eta_new - eta)))
            if step > 5.0:
                eta_new = eta + (5.0 / step) * (eta_new - eta)
        tau2, phi, eta = tau2_new, phi_new, eta_new
        if controls.fixed and family == "gaussian":
            converged = True
            break
        if rel < controls.tol and not jumped:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"PQL did not converge in {controls.max_iter} iterations "
            f"(last relative change {rel:.3g})",
            trace,
        )
    eta = X @ nu + Z @ delta
    mu, _, _ = _family_parts(family, y, eta)
    return PQLResult(
        nu=nu, delta=delta, tau2=tau2, phi=phi, eta=eta, mu=mu,
        ed_components=ed_comp, ed_total=ed_total, iterations=len(trace),
        rel_change=rel, converged=converged, trace=trace,
    )


def deviance(family: str, y, mu) -> float:
    """Gaussian: ``N log(RSS/N)``; Poisson: the usual residual deviance."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if family == "gaussian":
        rss = float(np.sum((y - mu) ** 2))
        return y.size * np.log(max(rss, 1e-300) / y.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    return float(2.0 * np.sum(term - (y - mu)))


# ---------------------------------------------------------------------------
# High-level fit
# ---------------------------------------------------------------------------


@dataclass
class VdfrFit:
    """Fitted FF-VDFR model.

    ``b`` holds the surface coefficients in t-fastest order; ``theta`` is
    ``(alpha, gamma, b)``.
    """

    tensor: TensorBasis
    family: str
    alpha: float
    gamma: np.ndarray
    b: np.ndarray
    nu: np.ndarray
    delta: np.ndarray
    tau2_t: float
    tau2_T: float | None
    phi: float
    ed: float
    deviance: float
    aic: float
    iterations: int
    rel_change: float
    converged: bool
    kept_null: list
    fitted: np.ndarray
    covariate_names: list = field(default_factory=list)
    trace: list = field(default_factory=list, repr=False)

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([[self.alpha], self.gamma, self.b])

    def linear_predictor(self, a_psi, covariates=None) -> np.ndarray:
        eta = self.alpha + np.asarray(a_psi) @ self.b
        if self.gamma.size:
            if covariates is None:
                raise ValueError("model has covariates; pass new_covariates")
            c = np.asarray(covariates, dtype=float).reshape(len(eta), -1)
            eta = eta + c @ self.gamma
        return eta


def make_tensor(domains, q: int = 25, r: int = 25, T_domain=None, degree: int = 3) -> TensorBasis:
    """Coefficient basis: t-marginal on ``[0, T_max]``, T-marginal on ``T_domain``.

    ``T_domain`` defaults to ``[min T_i, max T_i]``; ``r = 1`` drops the T
    direction entirely.
    """
    domains = np.asarray(domains, dtype=float)
    lo, hi = (float(domains.min()), float(domains.max())) if T_domain is None else \
        (float(T_domain[0]), float(T_domain[1]))
    marginal_t = basis_with_dimension((0.0, hi), q, degree)
    if r == 1:
        return TensorBasis(marginal_t, None)
    if not hi > lo:
        raise ValueError("all curves share one domain length; use r=1 or pass T_domain")
    return TensorBasis(marginal_t, basis_with_dimension((lo, hi), r, degree))


def fit_design(a_psi, y, tensor: TensorBasis, family: str = "gaussian", covariates=None,
               controls: PQLControls | None = None, covariate_names=None) -> VdfrFit:
    """Fit from a precomputed ``A Psi`` matrix (rows aligned with ``y``)."""
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}, got {family!r}")
    a_psi = np.asarray(a_psi, dtype=float)
    y = np.asarray(y, dtype=float)
    if a_psi.shape[0] != y.size:
        raise ValueError("design rows and responses differ in length")
    B = assemble_design(a_psi, covariates)
    n_lead = B.shape[1] - tensor.dimension
    tr = build_transform(tensor.q, tensor.r)
    X, Z, kept = reparameterize(B, tr, n_lead)
    res = fit_pql(X, Z, y, family, tr.precisions, controls)
    nu_lead, nu_surf = res.nu[:n_lead], res.nu[n_lead:]
    b = tr.T_n[:, kept] @ nu_surf + tr.T_s @ res.delta
    dev = deviance(family, y, res.mu)
    names = list(covariate_names or [f"c{j}" for j in range(n_lead - 1)])
    return VdfrFit(
        tensor=tensor,
        family=family,
        alpha=float(nu_lead[0]),
        gamma=np.asarray(nu_lead[1:], dtype=float),
        b=b,
        nu=res.nu,
        delta=res.delta,
        tau2_t=float(res.tau2[0]),
        tau2_T=float(res.tau2[1]) if res.tau2.size > 1 else None,
        phi=res.phi,
        ed=res.ed_total,
        deviance=dev,
        aic=dev + 2.0 * res.ed_total,
        iterations=res.iterations,
        rel_change=res.rel_change,
        converged=res.converged,
        kept_null=kept,
        fitted=res.mu,
        covariate_names=names,
        trace=res.trace,
    )


def fit_vdfr(curves, y, covariates=None, family: str = "gaussian", q: int = 25, r: int = 25,
             T_domain=None, controls: PQLControls | None = None, covariate_names=None,
             n_nodes_rule=default_nodes) -> VdfrFit:
    """Smoothed curves in, fitted model out."""
    tensor = make_tensor(curves.domains, q, r, T_domain)
    psi = assemble_psi(curves, tensor, n_nodes_rule, keep_blocks=False)
    return fit_design(psi.a_psi, y, tensor, family, covariates, controls, covariate_names)


def beta_surface(fit: VdfrFit, t_grid, T_grid) -> np.ndarray:
    """``beta(t, T)`` on a grid, shape ``(len(T_grid), len(t_grid))``; NaN where t > T."""
    t_grid = np.asarray(t_grid, dtype=float)
    T_grid = np.asarray(T_grid, dtype=float)
    phi = eval_basis(fit.tensor.marginal_t, t_grid)
    psi = fit.tensor.eval_T(T_grid)
    coef = fit.b.reshape(fit.tensor.r, fit.tensor.q)  # [k, l], t fastest
    surf = psi @ coef @ phi.T
    surf[t_grid[None, :] > T_grid[:, None]] = np.nan
    return surf


def predict(fit: VdfrFit, new_curves, new_covariates=None, type: str = "response",
            n_nodes_rule=default_nodes) -> np.ndarray:
    """Predict responses (or the linear predictor with ``type="link"``)."""
    mT = fit.tensor.marginal_T
    if mT is not None:
        bad = [i for i, T in enumerate(new_curves.domains) if not mT.contains(T)]
        if bad:
            raise ValueError(
                f"{len(bad)} curve(s) have T outside the fitted range [{mT.lo}, {mT.hi}]"
            )
    psi = assemble_psi(new_curves, fit.tensor, n_nodes_rule, keep_blocks=False)
    return predict_design(fit, psi.a_psi, new_covariates, type)


def predict_design(fit: VdfrFit, a_psi, new_covariates=None, type: str = "response"):
    eta = fit.linear_predictor(a_psi, new_covariates)
    if type == "link" or fit.family == "gaussian":
        return eta
    return np.exp(eta)


def aic(fit: VdfrFit) -> float:
    """``deviance + 2 * effective dimension`` of a converged fit."""
    if not fit.converged:
        raise FitError("AIC requested for an unconverged fit")
    return fit.deviance + 2.0 * fit.ed
