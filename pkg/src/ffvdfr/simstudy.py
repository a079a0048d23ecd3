"""Simulation scenarios, error metrics and replicate orchestration."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from ffvdfr.baselines import register_linear, smooth_registered, sof_design
from ffvdfr.presmooth import VariableDomainDataset, smooth_all
from ffvdfr.quadrature import assemble_psi
from ffvdfr.vdfr import FitError, beta_surface, fit_design, make_tensor, predict_design

log = logging.getLogger(__name__)

DOMAIN_LAWS = ("uniform", "negbin")
FAMILIES = ("gaussian", "poisson")
SAMPLE_SIZES = (100, 200, 500)
NOISE_LEVELS = (0.0, 1.0)
BETAS = (1, 2, 3, 4)
T_MIN, T_MAX = 10, 100
NEGBIN_SIZE, NEGBIN_PROB = 1, 0.04
ETA_CLAMP = 20.0


@dataclass
class ScenarioConfig:
    n: int = 100
    family: str = "poisson"
    domain_law: str = "negbin"
    sigma_x: float = 0.0
    beta: int = 1
    replicates: int = 30
    seed: int = 0
    p: int = 25
    q: int = 25
    r: int = 25
    folds: int = 10

    def __post_init__(self):
        self.n, self.beta, self.replicates = int(self.n), int(self.beta), int(self.replicates)
        self.seed, self.folds = int(self.seed), int(self.folds)
        self.p, self.q, self.r = int(self.p), int(self.q), int(self.r)
        self.sigma_x = float(self.sigma_x)
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.domain_law not in DOMAIN_LAWS:
            raise ValueError(f"domain_law must be one of {DOMAIN_LAWS}, got {self.domain_law!r}")
        if self.beta not in BETAS:
            raise ValueError(f"beta must be one of {BETAS}, got {self.beta!r}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.n < self.folds:
            raise ValueError(f"n={self.n} is smaller than the fold count {self.folds}")
        if self.sigma_x < 0:
            raise ValueError("sigma_x must be >= 0")

    @property
    def scenario_id(self) -> str:
        noise = "smooth" if self.sigma_x == 0 else f"noisy{self.sigma_x:g}"
        return f"N{self.n}-{self.family}-{self.domain_law}-{noise}-beta{self.beta}"


def scenario_grid(**filters) -> list[ScenarioConfig]:
    """All 96 scenarios, optionally filtered, e.g. ``scenario_grid(family=["poisson"])``."""
    axes = {
        "n": SAMPLE_SIZES,
        "family": FAMILIES,
        "domain_law": DOMAIN_LAWS,
        "sigma_x": NOISE_LEVELS,
        "beta": BETAS,
    }
    for key, allowed in filters.items():
        if key not in axes:
            raise KeyError(f"unknown grid key {key!r}; accepted: {sorted(axes)}")
        axes[key] = tuple(allowed)
    out = []
    for n, fam, law, sx, b in itertools.product(*axes.values()):
        out.append(ScenarioConfig(n=n, family=fam, domain_law=law, sigma_x=sx, beta=b))
    return out


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def gen_domains(law: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Integer domain lengths in ``[10, 100]``."""
    if law == "uniform":
        T = np.rint(rng.uniform(T_MIN, T_MAX, size=n))
    elif law == "negbin":
        # failures before the first success; mean (1 - p) / p = 24 before truncation
        T = rng.negative_binomial(NEGBIN_SIZE, NEGBIN_PROB, size=n).astype(float)
    else:
        raise ValueError(f"unknown domain law {law!r}; accepted: {DOMAIN_LAWS}")
    return np.clip(T, T_MIN, T_MAX).astype(int)


def gen_curve(T_i: int, sigma_x: float, rng: np.random.Generator) -> np.ndarray:
    """Random trigonometric curve on ``t = 1..T_i`` plus optional white noise."""
    if T_i < 1:
        raise ValueError("T_i must be >= 1")
    t = np.arange(1, int(T_i) + 1, dtype=float)
    k = np.arange(1, 11, dtype=float)
    u = rng.normal(0.0, 1.0)
    v = rng.normal(0.0, 2.0 / k[:, None], size=(10, 2))
    arg = 2.0 * np.pi * np.outer(k, t) / 100.0
    x = u + v[:, 0] @ np.sin(arg) + v[:, 1] @ np.cos(arg)
    if sigma_x > 0:
        x = x + rng.normal(0.0, sigma_x, size=t.size)
    return x


def curve_variance(sigma_x: float) -> float:
    """Pointwise population variance of :func:`gen_curve`."""
    k = np.arange(1, 11)
    return float(1.0 + np.sum(4.0 / k**2) + sigma_x**2)


def true_beta(which: int, t, T_i, T_max):
    """The four simulation surfaces; ``T_max`` is the largest domain in the sample."""
    t = np.asarray(t, dtype=float)
    T_i = np.asarray(T_i, dtype=float)
    T = float(T_max)
    if which == 1:
        return 10.0 * t / T_i - 5.0
    if which == 2:
        return (1.0 - 2.0 * T_i / T) * (5.0 - 40.0 * (t / T_i - 0.5) ** 2)
    if which == 3:
        return 5.0 - 10.0 * (T_i - t) / T
    if which == 4:
        return np.sin(2.0 * np.pi * T_i / T) * (5.0 - 10.0 * (T_i - t) / T)
    raise ValueError(f"beta selector must be one of {BETAS}, got {which!r}")


def linear_predictors(curves, which: int, T_max=None) -> np.ndarray:
    """``eta_i = (1/T_i) sum_{t=1}^{T_i} X_i(t) beta(t, T_i)``."""
    domains = np.array([len(x) for x in curves])
    T_max = domains.max() if T_max is None else T_max
    eta = np.empty(len(curves))
    for i, x in enumerate(curves):
        T_i = len(x)
        t = np.arange(1, T_i + 1)
        eta[i] = np.sum(x * true_beta(which, t, T_i, T_max)) / T_i
    return eta


def gen_response(curves, which: int, family: str, rng: np.random.Generator, T_max=None):
    """Responses from the true curves.

    Returns ``(y, eta, n_clamped)``; for Poisson the linear predictor is
    clamped to ``[-20, 20]`` before exponentiation.
    """
    eta = linear_predictors(curves, which, T_max)
    if family == "gaussian":
        return eta + rng.normal(0.0, 1.0, size=eta.size), eta, 0
    if family == "poisson":
        clamped = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
        n_clamped = int(np.sum(clamped != eta))
        if n_clamped:
            log.warning("clamped %d linear predictor(s) to +-%g", n_clamped, ETA_CLAMP)
        return rng.poisson(np.exp(clamped)).astype(float), eta, n_clamped
    raise ValueError(f"family must be one of {FAMILIES}, got {family!r}")


@dataclass
class SimulatedData:
    dataset: VariableDomainDataset
    eta: np.ndarray
    T_max: int
    n_clamped: int


def simulate_dataset(config: ScenarioConfig, rng: np.random.Generator) -> SimulatedData:
    T = gen_domains(config.domain_law, config.n, rng)
    curves = [gen_curve(T_i, config.sigma_x, rng) for T_i in T]
    T_max = int(T.max())
    y, eta, n_clamped = gen_response(curves, config.beta, config.family, rng, T_max)
    ds = VariableDomainDataset(
        points=[np.arange(1, T_i + 1, dtype=float) for T_i in T],
        values=curves,
        y=y,
    )
    return SimulatedData(ds, eta, T_max, n_clamped)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def rmse_fold(y_true, y_hat) -> float:
    y_true = np.asarray(y_true, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y_true.shape != y_hat.shape or y_true.size == 0:
        raise ValueError("y_true and y_hat must be non-empty and equally shaped")
    return float(np.sqrt(np.mean((y_true - y_hat) ** 2)))


def fold_assignment(n: int, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Random partition into ``folds`` groups whose sizes differ by at most one."""
    if n < folds:
        raise ValueError(f"need at least {folds} observations for {folds}-fold CV, got {n}")
    labels = np.arange(n) % folds
    return labels[rng.permutation(n)]


def cv_10fold(y, fitter, rng: np.random.Generator, folds: int = 10):
    """K-fold CV.

    ``fitter(train_idx, test_idx)`` returns predictions for ``test_idx``.
    Returns ``(mean_rmse, per_fold_rmse, labels)``.
    """
    y = np.asarray(y, dtype=float)
    labels = fold_assignment(y.size, folds, rng)
    scores = []
    for j in range(folds):
        test = np.flatnonzero(labels == j)
        train = np.flatnonzero(labels != j)
        scores.append(rmse_fold(y[test], fitter(train, test)))
    return float(np.mean(scores)), scores, labels


def amse(beta_hat, which: int, T_max: int, beta_true=None) -> float:
    """Triangle-averaged squared error of an estimated surface.

    ``beta_hat(t, k)`` takes an array of t values and one domain length k.
    The sum runs over ``10 <= k <= T_max`` and ``1 <= t <= k`` and is divided
    by ``T_max * (T_max + 1)``.
    """
    T_max = int(T_max)
    truth = beta_true or (lambda t, k: true_beta(which, t, k, T_max))
    total = 0.0
    for k in range(T_MIN, T_max + 1):
        t = np.arange(1, k + 1, dtype=float)
        est = np.asarray(beta_hat(t, k), dtype=float)
        if est.shape != t.shape or not np.all(np.isfinite(est)):
            raise ValueError(f"estimated surface undefined on the row k={k}")
        total += float(np.sum((truth(t, k) - est) ** 2))
    return total / (T_max * (T_max + 1))


def surface_evaluator(fit):
    """Adapter turning a fit into a ``beta_hat(t, k)`` callable for :func:`amse`."""
    def f(t, k):
        return beta_surface(fit, t, [float(k)])[0]
    return f


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------


def replicate_rng(seed: int, replicate: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replicate, stream)))


@dataclass
class ReplicateResult:
    replicate: int
    seed: int
    rmse_ffvdfr: float = np.nan
    rmse_sof: float = np.nan
    amse_ffvdfr: float = np.nan
    T_max: int = 0
    n_clamped: int = 0
    converged: bool = False
    excluded: bool = False
    error: str = ""
    seconds: float = 0.0


def run_replicate(config: ScenarioConfig, replicate: int) -> ReplicateResult:
    """Generate one dataset and score FF-VDFR and SOF on it."""
    t0 = time.perf_counter()
    out = ReplicateResult(replicate=replicate, seed=config.seed)
    rng = replicate_rng(config.seed, replicate, 0)
    sim = simulate_dataset(config, rng)
    data = sim.dataset
    y = data.y
    out.T_max, out.n_clamped = sim.T_max, sim.n_clamped
    try:
        curves = smooth_all(data, p=config.p)
        tensor = make_tensor(curves.domains, config.q, config.r, T_domain=(T_MIN, sim.T_max))
        a_psi = assemble_psi(curves, tensor, keep_blocks=False).a_psi
        reg_curves = smooth_registered(register_linear(data), p=config.p)
        sof_x, sof_tensor = sof_design(reg_curves, config.q)

        def vdfr_fold(train, test):
            fit = fit_design(a_psi[train], y[train], tensor, config.family)
            return predict_design(fit, a_psi[test])

        def sof_fold(train, test):
            fit = fit_design(sof_x[train], y[train], sof_tensor, config.family)
            return predict_design(fit, sof_x[test])

        # both methods see the same folds
        out.rmse_ffvdfr, _, _ = cv_10fold(y, vdfr_fold, replicate_rng(config.seed, replicate, 1),
                                          config.folds)
        out.rmse_sof, _, _ = cv_10fold(y, sof_fold, replicate_rng(config.seed, replicate, 1),
                                       config.folds)
        full = fit_design(a_psi, y, tensor, config.family)
        out.amse_ffvdfr = amse(surface_evaluator(full), config.beta, sim.T_max)
        out.converged = True
    except (FitError, linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        out.excluded = True
        out.error = f"{type(exc).__name__}: {exc}"
        log.warning("replicate %d of %s excluded: %s", replicate, config.scenario_id, out.error)
    out.seconds = time.perf_counter() - t0
    return out


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    replicates: list = field(default_factory=list)

    def _values(self, name):
        return np.array([getattr(r, name) for r in self.replicates if not r.excluded])

    @property
    def n_excluded(self) -> int:
        return sum(r.excluded for r in self.replicates)

    def summary(self) -> dict:
        """Deterministic summary (timings excluded)."""
        stats = {}
        for name in ("rmse_ffvdfr", "rmse_sof", "amse_ffvdfr"):
            v = self._values(name)
            stats[name] = {
                "mean": float(np.mean(v)) if v.size else None,
                "sd": float(np.std(v, ddof=1)) if v.size > 1 else None,
            }
        kept = [r for r in self.replicates if not r.excluded]
        wins = sum(r.rmse_ffvdfr < r.rmse_sof for r in kept)
        return {
            "scenario": self.config.scenario_id,
            "config": asdict(self.config),
            "replicates": len(self.replicates),
            "excluded": self.n_excluded,
            "exclusions": [{"replicate": r.replicate, "error": r.error}
                           for r in self.replicates if r.excluded],
            "ffvdfr_beats_sof": wins,
            "clamped_predictors": int(sum(r.n_clamped for r in self.replicates)),
            **stats,
        }

    def timings(self) -> dict:
        return {
            "scenario": self.config.scenario_id,
            "total_seconds": float(sum(r.seconds for r in self.replicates)),
            "per_replicate": [r.seconds for r in self.replicates],
        }


def _run_one(args):
    config, rep = args
    return run_replicate(config, rep)


def run_scenario(config: ScenarioConfig, jobs: int = 1) -> ScenarioResult:
    """Run every replicate of ``config``; results are ordered by replicate index."""
    tasks = [(config, rep) for rep in range(config.replicates)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reps = list(ex.map(_run_one, tasks))
    else:
        reps = [_run_one(t) for t in tasks]
    return ScenarioResult(config=config, replicates=reps)
