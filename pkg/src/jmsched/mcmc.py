"""Posterior sampling: model fitting, conditional random-effect draws, DIC.

The fitting sampler is Metropolis-within-Gibbs: conjugate updates for the
dispersion, the random-effects covariance, and the smoothing parameters;
adaptive random-walk Metropolis blocks for the regression coefficient vectors
and for each subject's random effects (all subjects proposed and accepted
elementwise in one vectorized sweep).  Adaptation runs during burn-in only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import gammaln
from scipy.stats import invwishart

from . import model as md
from .errors import ConfigError, DataError, NumericError, SpecError
from .numerics import GK15, span_nodes

BLOCK_TARGET_RATE = 0.234
SCALAR_TARGET_RATE = 0.44
RE_WARMUP = 500
PROPOSAL_DF = 4.0


# ---------------------------------------------------------------------------
# Configuration types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PriorSet:
    """Diffuse/conjugate priors for every parameter block."""

    beta_variance: float = 100.0
    gamma_variance: float = 100.0
    alpha_variance: float = 100.0
    phi_shape: float = 0.01
    phi_rate: float = 0.01
    d_df_extra: int = 2              # inverse-Wishart df = q + d_df_extra, identity scale
    tau_shape: float = 1.0           # tau_h ~ Gamma(tau_shape, tau_hdelta)
    tau_delta_shape: float = 1e-3
    tau_delta_rate: float = 1e-3

    def __post_init__(self):
        for name in ("beta_variance", "gamma_variance", "alpha_variance", "phi_shape",
                     "phi_rate", "tau_shape", "tau_delta_shape", "tau_delta_rate"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"prior hyperparameter {name} must be positive")


@dataclass(frozen=True)
class McmcConfig:
    seed: int
    chains: int = 2
    iterations: int = 7000
    burn_in: int = 2000
    thin: int = 1
    adapt_window: int = 50

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if self.chains < 1:
            raise ConfigError("chains must be >= 1")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise ConfigError("burn_in must satisfy 0 <= burn_in < iterations")
        if self.adapt_window < 1:
            raise ConfigError("adapt_window must be >= 1")


@dataclass(frozen=True)
class ReCondition:
    """Conditioning information for random-effect draws: measurements plus
    survival past ``survival_until`` (which may predate a hypothetical
    measurement appended by the scheduling machinery)."""

    survival_until: float
    times: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float)) if np.size(self.times) else np.empty(0)
        y = np.atleast_1d(np.asarray(self.y, dtype=float)) if np.size(self.y) else np.empty(0)
        if times.shape != y.shape:
            raise DataError("condition times and values differ in length")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "survival_until", float(self.survival_until))

    @classmethod
    def from_history(cls, history, survival_until=None, extra=None) -> "ReCondition":
        times, y = history.times, history.y
        if extra is not None:
            u, y_u = extra
            times = np.append(times, u)
            y = np.append(y, y_u)
        if survival_until is None:
            survival_until = history.t
        return cls(survival_until, times, y)


# ---------------------------------------------------------------------------
# Posterior sample container
# ---------------------------------------------------------------------------

@dataclass
class PosteriorSamples:
    """Stacked MCMC draws (all chains, post burn-in, thinned)."""

    beta: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    gamma_h0: np.ndarray
    phi: np.ndarray
    tau_h: np.ndarray
    tau_hdelta: np.ndarray
    D: np.ndarray
    chain: np.ndarray
    iteration: np.ndarray
    ranef: np.ndarray = None          # (G, n_subjects, q) or None
    subject_ids: tuple = ()
    diagnostics: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    @property
    def n_random(self) -> int:
        return self.D.shape[1]

    def parameters(self, spec: md.JointModelSpec, g: int) -> md.Parameters:
        return md.Parameters(
            beta=self.beta[g], phi=float(self.phi[g]), D=self.D[g],
            gamma=self.gamma[g], alpha=self.alpha[g],
            baseline=spec.make_baseline(self.gamma_h0[g], float(self.tau_h[g])),
        )

    def mean_parameters(self, spec: md.JointModelSpec) -> md.Parameters:
        return md.Parameters(
            beta=self.beta.mean(0), phi=float(self.phi.mean()),
            D=self.D.mean(0), gamma=self.gamma.mean(0), alpha=self.alpha.mean(0),
            baseline=spec.make_baseline(self.gamma_h0.mean(0), float(self.tau_h.mean())),
        )

    @classmethod
    def degenerate(cls, theta: md.Parameters, n_draws: int) -> "PosteriorSamples":
        """A synthetic posterior concentrated at one parameter value."""
        rep = lambda a: np.repeat(np.asarray(a, float)[None, ...], n_draws, axis=0)
        return cls(
            beta=rep(theta.beta), gamma=rep(theta.gamma), alpha=rep(theta.alpha),
            gamma_h0=rep(theta.gamma_h0), phi=np.full(n_draws, theta.phi),
            tau_h=np.full(n_draws, theta.tau_h), tau_hdelta=np.ones(n_draws),
            D=rep(theta.D), chain=np.zeros(n_draws, dtype=int),
            iteration=np.arange(n_draws),
        )


def scalar_names(samples: PosteriorSamples, family: md.ExponentialFamily) -> list:
    names = [f"beta[{i}]" for i in range(samples.beta.shape[1])]
    names += [f"gamma[{i}]" for i in range(samples.gamma.shape[1])]
    names += [f"alpha[{i}]" for i in range(samples.alpha.shape[1])]
    names += [f"gamma_h0[{i}]" for i in range(samples.gamma_h0.shape[1])]
    if family.has_dispersion:
        names += ["sigma2"]
    q = samples.n_random
    names += [f"D[{i},{j}]" for i in range(q) for j in range(i + 1)]
    names += ["tau_h"]
    return names


def scalar_matrix(samples: PosteriorSamples, family: md.ExponentialFamily) -> np.ndarray:
    cols = [samples.beta, samples.gamma, samples.alpha, samples.gamma_h0]
    if family.has_dispersion:
        cols.append(samples.phi[:, None])
    q = samples.n_random
    tril = np.column_stack(
        [samples.D[:, i, j] for i in range(q) for j in range(i + 1)]
    )
    cols += [tril, samples.tau_h[:, None]]
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# Theta batches (posterior draws stacked for vectorized prediction)
# ---------------------------------------------------------------------------

class ThetaBatch:
    """Arrays of parameter draws with pre-factored covariance matrices."""

    def __init__(self, beta, gamma, alpha, gamma_h0, phi, D):
        self.beta = np.atleast_2d(np.asarray(beta, float))
        self.gamma = np.atleast_2d(np.asarray(gamma, float))
        self.alpha = np.atleast_2d(np.asarray(alpha, float))
        self.gamma_h0 = np.atleast_2d(np.asarray(gamma_h0, float))
        self.phi = np.atleast_1d(np.asarray(phi, float))
        self.D = np.asarray(D, float)
        if self.D.ndim == 2:
            self.D = self.D[None, ...]
        self.chol_D = np.linalg.cholesky(self.D)
        self.inv_D = np.linalg.inv(self.D)
        self.logdet_D = 2.0 * np.sum(np.log(np.diagonal(self.chol_D, axis1=1, axis2=2)), axis=1)

    @property
    def size(self) -> int:
        return self.beta.shape[0]

    @property
    def n_random(self) -> int:
        return self.D.shape[1]

    @classmethod
    def from_samples(cls, samples: PosteriorSamples, idx) -> "ThetaBatch":
        idx = np.asarray(idx, dtype=int)
        return cls(samples.beta[idx], samples.gamma[idx], samples.alpha[idx],
                   samples.gamma_h0[idx], samples.phi[idx], samples.D[idx])

    @classmethod
    def from_parameters(cls, theta: md.Parameters, size: int = 1) -> "ThetaBatch":
        rep = lambda a: np.repeat(np.asarray(a, float)[None, ...], size, axis=0)
        return cls(rep(theta.beta), rep(theta.gamma), rep(theta.alpha),
                   rep(theta.gamma_h0), np.full(size, theta.phi), rep(theta.D))

    def re_log_prior(self, b: np.ndarray) -> np.ndarray:
        """log N(b; 0, D) row by row."""
        quad = np.einsum("bi,bij,bj->b", b, self.inv_D, b)
        q = self.n_random
        return -0.5 * (q * math.log(2.0 * math.pi) + self.logdet_D + quad)


# ---------------------------------------------------------------------------
# Design bundles
# ---------------------------------------------------------------------------

class _DesignBundle:
    """Design matrices at a set of time points for one covariate profile."""

    def __init__(self, spec: md.JointModelSpec, assoc: md.AssociationForm,
                 cov_long: np.ndarray, times: np.ndarray, hazard: bool,
                 weights: np.ndarray = None):
        lspec = spec.longitudinal
        self.times = np.asarray(times, float)
        self.weights = weights
        self.need_eta = assoc.variant != "shared_random_effects"
        self.H = spec.baseline_matrix(self.times) if hazard else None
        self.X = lspec.fixed_matrix(self.times, cov_long)
        self.Z = lspec.random_matrix(self.times)
        self.dX = self.dZ = self.iX = self.iZ = None
        if hazard and assoc.needs_slope:
            self.dX = lspec.fixed_deriv_matrix(self.times)
            self.dZ = lspec.random_deriv_matrix(self.times)
        if hazard and assoc.needs_integral:
            self.iX = lspec.fixed_integral_matrix(self.times, cov_long)
            self.iZ = lspec.random_integral_matrix(self.times)


def _log_hazard_batch(bundle: _DesignBundle, assoc: md.AssociationForm,
                      th: ThetaBatch, b: np.ndarray, w_gamma: np.ndarray,
                      clamp: bool) -> np.ndarray:
    """log hazard at bundle.times for every draw; shape (n_times, B)."""
    lh = bundle.H @ th.gamma_h0.T + w_gamma[None, :]
    eta = slope = integral = None
    if bundle.need_eta:
        eta = bundle.X @ th.beta.T + bundle.Z @ b.T
    if bundle.dX is not None:
        slope = bundle.dX @ th.beta.T + bundle.dZ @ b.T
    if bundle.iX is not None:
        integral = bundle.iX @ th.beta.T + bundle.iZ @ b.T
    lh = lh + assoc.value(th.alpha, eta=eta, slope=slope, integral=integral, b=b)
    if clamp:
        return np.clip(lh, -md.LOG_HAZARD_BOUND, md.LOG_HAZARD_BOUND)
    return lh


def _long_terms_batch(family: md.ExponentialFamily, y: np.ndarray,
                      eta: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Measurement log densities; y (m,), eta (m, B), phi (B,) -> (m, B)."""
    if family.name == "gaussian":
        return -0.5 * np.log(2.0 * np.pi * phi)[None, :] - (y[:, None] - eta) ** 2 / (2.0 * phi)[None, :]
    return y[:, None] * eta - np.logaddexp(0.0, eta)


class _ConditionData:
    """Vectorized evaluator of p(b | survival past s, measurements, theta)."""

    def __init__(self, spec, assoc, covariates, condition: ReCondition):
        self.spec = spec
        self.assoc = assoc
        self.family = spec.longitudinal.family
        self.cov_long = md._covariate_row(covariates, spec.longitudinal.covariates)
        self.w = md._covariate_row(covariates, spec.hazard_covariates)
        self.condition = condition
        self.meas = _DesignBundle(spec, assoc, self.cov_long, condition.times, hazard=False)
        self._node_cache = {}
        self._point_cache = {}

    def w_gamma(self, th: ThetaBatch) -> np.ndarray:
        if self.w.size == 0:
            return np.zeros(th.size)
        return th.gamma @ self.w

    def _nodes(self, lower: float, upper: float) -> _DesignBundle:
        key = (float(lower), float(upper))
        if key not in self._node_cache:
            s, wq = span_nodes(lower, upper, self.spec.hazard_breakpoints, GK15)
            self._node_cache[key] = _DesignBundle(
                self.spec, self.assoc, self.cov_long, s, hazard=True, weights=wq)
        return self._node_cache[key]

    def _point(self, t: float) -> _DesignBundle:
        if t not in self._point_cache:
            self._point_cache[t] = _DesignBundle(
                self.spec, self.assoc, self.cov_long, np.array([t]), hazard=True)
        return self._point_cache[t]

    def cum_hazard(self, b, th, upper, lower=0.0) -> np.ndarray:
        if upper <= lower:
            return np.zeros(th.size)
        bundle = self._nodes(lower, upper)
        lh = _log_hazard_batch(bundle, self.assoc, th, b, self.w_gamma(th), clamp=True)
        return bundle.weights @ np.exp(lh)

    def log_hazard_at(self, t, b, th) -> np.ndarray:
        bundle = self._point(t)
        return _log_hazard_batch(bundle, self.assoc, th, b, self.w_gamma(th), clamp=True)[0]

    def _rowwise_log_hazard(self, times_flat, rows, b, th) -> np.ndarray:
        """log hazard where evaluation point k belongs to draw rows[k]."""
        spec, lspec = self.spec, self.spec.longitudinal
        lh = np.einsum("kq,kq->k", spec.baseline_matrix(times_flat), th.gamma_h0[rows])
        if self.w.size:
            lh = lh + (th.gamma @ self.w)[rows]
        eta = slope = integral = None
        if self.assoc.variant != "shared_random_effects":
            X = lspec.fixed_matrix(times_flat, self.cov_long)
            Z = lspec.random_matrix(times_flat)
            eta = np.einsum("kp,kp->k", X, th.beta[rows]) + np.einsum("kq,kq->k", Z, b[rows])
        if self.assoc.needs_slope:
            dX = lspec.fixed_deriv_matrix(times_flat)
            dZ = lspec.random_deriv_matrix(times_flat)
            slope = np.einsum("kp,kp->k", dX, th.beta[rows]) + np.einsum("kq,kq->k", dZ, b[rows])
        if self.assoc.needs_integral:
            iX = lspec.fixed_integral_matrix(times_flat, self.cov_long)
            iZ = lspec.random_integral_matrix(times_flat)
            integral = np.einsum("kp,kp->k", iX, th.beta[rows]) + np.einsum("kq,kq->k", iZ, b[rows])
        lh = lh + self.assoc.value(th.alpha[rows], eta=eta, slope=slope, integral=integral,
                                   b=b[rows])
        return np.clip(lh, -md.LOG_HAZARD_BOUND, md.LOG_HAZARD_BOUND)

    def log_hazard_rowwise(self, times, b, th) -> np.ndarray:
        """log hazard at a per-draw time; times, b rows, and draws align."""
        times = np.asarray(times, float)
        return self._rowwise_log_hazard(times, np.arange(times.size), b, th)

    def cum_hazard_rowwise(self, b, th, lower, upper) -> np.ndarray:
        """Hazard integral over per-draw intervals [lower_r, upper_r].

        Single-span Gauss-Kronrod per row; callers must ensure each interval
        does not cross a hazard breakpoint.
        """
        lower = np.asarray(lower, float)
        upper = np.asarray(upper, float)
        size = lower.size
        half = 0.5 * (upper - lower)
        center = 0.5 * (upper + lower)
        k = GK15.nodes.size
        s = (center[:, None] + half[:, None] * GK15.nodes[None, :]).ravel()
        w = (half[:, None] * GK15.weights[None, :]).ravel()
        rows = np.repeat(np.arange(size), k)
        lh = self._rowwise_log_hazard(s, rows, b, th)
        vals = np.where(w != 0.0, w * np.exp(lh), 0.0)
        return np.bincount(rows, weights=vals, minlength=size)

    def eta_at(self, t, b, th) -> np.ndarray:
        lspec = self.spec.longitudinal
        x = lspec.fixed_row(t, self.cov_long)
        z = lspec.random_row(t)
        return th.beta @ x + b @ z

    def log_target(self, b, th, extra=None) -> np.ndarray:
        """Unnormalized log p(b | measurements, survival past condition time).

        ``extra`` appends one hypothetical measurement as (time, values) where
        values is scalar or per-draw.
        """
        out = th.re_log_prior(b)
        if self.meas.times.size:
            eta = self.meas.X @ th.beta.T + self.meas.Z @ b.T
            out = out + _long_terms_batch(self.family, self.condition.y, eta, th.phi).sum(0)
        if extra is not None:
            u, y_u = extra
            eta_u = self.eta_at(u, b, th)
            y_u = np.broadcast_to(np.asarray(y_u, float), eta_u.shape)
            out = out + self._extra_terms(y_u, eta_u, th)
        out = out - self.cum_hazard(b, th, self.condition.survival_until)
        return out

    def _extra_terms(self, y_u, eta_u, th):
        if self.family.name == "gaussian":
            return -0.5 * np.log(2.0 * np.pi * th.phi) - (y_u - eta_u) ** 2 / (2.0 * th.phi)
        return y_u * eta_u - np.logaddexp(0.0, eta_u)


# ---------------------------------------------------------------------------
# Student-t proposals and the conditional random-effects sampler
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReProposal:
    """Independence-proposal parameters: multivariate t(df) at the target mode."""

    mean: np.ndarray
    cov: np.ndarray
    df: float = PROPOSAL_DF
    repaired: bool = False
    fallback: bool = False
    iterations: int = 0

    @property
    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.cov)


def _mvt_draw(rng, proposal: ReProposal, size: int) -> np.ndarray:
    q = proposal.mean.size
    z = rng.standard_normal((size, q))
    g = rng.chisquare(proposal.df, size)
    return proposal.mean + (z @ proposal.chol.T) * np.sqrt(proposal.df / g)[:, None]


def _mvt_logpdf(x, proposal: ReProposal) -> np.ndarray:
    q = proposal.mean.size
    df = proposal.df
    chol = proposal.chol
    dev = np.atleast_2d(x) - proposal.mean
    u = solve_triangular(chol, dev.T, lower=True)
    maha = np.sum(u * u, axis=0)
    const = (gammaln((df + q) / 2.0) - gammaln(df / 2.0)
             - 0.5 * q * math.log(df * math.pi) - np.sum(np.log(np.diag(chol))))
    return const - 0.5 * (df + q) * np.log1p(maha / df)


def _finite_difference_hessian(f, x, step=1e-4) -> np.ndarray:
    q = x.size
    H = np.zeros((q, q))
    for i in range(q):
        for j in range(i, q):
            ei = np.zeros(q)
            ej = np.zeros(q)
            ei[i] = step
            ej[j] = step
            H[i, j] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4.0 * step * step)
            H[j, i] = H[i, j]
    return 0.5 * (H + H.T)


def posterior_mode_re(history, condition: ReCondition, theta: md.Parameters,
                      spec: md.JointModelSpec, assoc: md.AssociationForm) -> ReProposal:
    """Mode and curvature of p(b | condition, theta), for the t proposal.

    Quasi-Newton maximization from 0; the covariance is the inverse of the
    symmetrized finite-difference Hessian at the mode, ridge-repaired if the
    Hessian is not positive definite.
    """
    cdata = _ConditionData(spec, assoc, history.covariates, condition)
    th1 = ThetaBatch.from_parameters(theta, 1)
    q = theta.n_random

    def negloglik(v):
        val = cdata.log_target(v[None, :], th1)[0]
        return -val if np.isfinite(val) else 1e300

    res = minimize(negloglik, np.zeros(q), method="BFGS")
    bhat = res.x
    if not np.all(np.isfinite(bhat)) or not np.isfinite(res.fun):
        return ReProposal(mean=np.zeros(q), cov=theta.D.copy(), fallback=True)
    H = _finite_difference_hessian(negloglik, bhat, step=1e-4)
    repaired = False
    ridge = 1e-6
    while True:
        try:
            np.linalg.cholesky(H)
            break
        except np.linalg.LinAlgError:
            if ridge > 1e-2:
                return ReProposal(mean=np.zeros(q), cov=theta.D.copy(), fallback=True)
            H = H + ridge * np.eye(q)
            ridge *= 10.0
            repaired = True
    V = np.linalg.inv(H)
    V = 0.5 * (V + V.T)
    return ReProposal(mean=bhat, cov=V, repaired=repaired, iterations=int(res.nit))


def _re_mh_draws(cdata: _ConditionData, th: ThetaBatch, proposal: ReProposal,
                 rng, warmup: int, extra=None, n_keep: int = 0):
    """Vectorized independence Metropolis-Hastings for the conditional REs.

    Runs ``warmup`` iterations on th.size parallel rows and returns the final
    states; with ``n_keep`` > 0 also collects that many post-warmup states of
    the (single-row) chain.
    """
    size = th.size
    b = np.broadcast_to(proposal.mean, (size, proposal.mean.size)).copy()
    lp = cdata.log_target(b, th, extra)
    lq = _mvt_logpdf(b, proposal)
    kept = []
    total = warmup + (n_keep if n_keep else 0)
    for it in range(total):
        cand = _mvt_draw(rng, proposal, size)
        lp_c = cdata.log_target(cand, th, extra)
        lq_c = _mvt_logpdf(cand, proposal)
        ratio = (lp_c - lp) - (lq_c - lq)
        accept = np.log(rng.random(size)) < ratio
        b[accept] = cand[accept]
        lp[accept] = lp_c[accept]
        lq[accept] = lq_c[accept]
        if n_keep and it >= warmup:
            kept.append(b.copy())
    if n_keep:
        return np.concatenate(kept, axis=0)
    return b


def sample_random_effects(history, condition: ReCondition, theta: md.Parameters,
                          spec: md.JointModelSpec, assoc: md.AssociationForm,
                          n_draws: int, seed=None, rng=None, warmup: int = RE_WARMUP,
                          proposal: ReProposal = None) -> np.ndarray:
    """MH chain targeting p(b | condition, theta); returns (n_draws, q).

    The proposal is a multivariate Student-t (4 df) centered at the target
    mode with the inverse negative Hessian as covariance; the first draw is
    taken after the internal warm-up.
    """
    if rng is None:
        rng = np.random.default_rng(seed)
    if proposal is None:
        proposal = posterior_mode_re(history, condition, theta, spec, assoc)
    cdata = _ConditionData(spec, assoc, history.covariates, condition)
    th = ThetaBatch.from_parameters(theta, 1)
    return _re_mh_draws(cdata, th, proposal, rng, warmup, n_keep=n_draws)


# ---------------------------------------------------------------------------
# Fitting machinery
# ---------------------------------------------------------------------------

class _FitData:
    """Precomputed designs and segment indices for the whole dataset."""

    def __init__(self, dataset: md.Dataset, spec: md.JointModelSpec,
                 assoc: md.AssociationForm):
        self.spec = spec
        self.assoc = assoc
        self.family = spec.longitudinal.family
        self.n = dataset.n
        lspec = spec.longitudinal
        self.p = lspec.n_fixed
        self.q = lspec.n_random
        self.pw = len(spec.hazard_covariates)
        self.n_alpha = assoc.n_params
        self.Q = spec.n_baseline
        if assoc.variant == "shared_random_effects" and assoc.n_params != self.q:
            raise SpecError(
                f"shared_random_effects needs {self.q} association parameters "
                f"(the random-effect dimension), got {assoc.n_params}"
            )

        self.W = np.array([s.covariate_row(spec.hazard_covariates) for s in dataset.subjects]
                          ).reshape(self.n, self.pw)
        self.delta = np.array([s.event for s in dataset.subjects], dtype=float)
        self.T = np.array([s.event_time for s in dataset.subjects])

        midx, y_all = [], []
        node_idx, node_w = [], []
        ev_bundles, node_bundles = [], []
        for i, s in enumerate(dataset.subjects):
            midx += [i] * s.n_obs
            y_all.append(s.y)
            cov_long = s.covariate_row(lspec.covariates)
            meas = _DesignBundle(spec, assoc, cov_long, s.times, hazard=False)
            ev = _DesignBundle(spec, assoc, cov_long, np.array([s.event_time]), hazard=True)
            sn, wn = span_nodes(0.0, s.event_time, spec.hazard_breakpoints, GK15)
            nodes = _DesignBundle(spec, assoc, cov_long, sn, hazard=True, weights=wn)
            node_idx += [i] * sn.size
            node_w.append(wn)
            ev_bundles.append(ev)
            node_bundles.append((meas, nodes))

        self.midx = np.array(midx, dtype=int)
        self.y = np.concatenate(y_all) if y_all else np.empty(0)
        self.family.check_response(self.y)
        self.nidx = np.array(node_idx, dtype=int)
        self.node_w = np.concatenate(node_w) if node_w else np.empty(0)

        meas_bundles = [mb for mb, _ in node_bundles]
        node_only = [nb for _, nb in node_bundles]
        self.Xm = np.concatenate([b.X for b in meas_bundles]) if self.midx.size else np.zeros((0, self.p))
        self.Zm = np.concatenate([b.Z for b in meas_bundles]) if self.midx.size else np.zeros((0, self.q))
        self.Hn = np.concatenate([b.H for b in node_only])
        self.Xn = np.concatenate([b.X for b in node_only])
        self.Zn = np.concatenate([b.Z for b in node_only])
        self.dXn = np.concatenate([b.dX for b in node_only]) if assoc.needs_slope else None
        self.dZn = np.concatenate([b.dZ for b in node_only]) if assoc.needs_slope else None
        self.iXn = np.concatenate([b.iX for b in node_only]) if assoc.needs_integral else None
        self.iZn = np.concatenate([b.iZ for b in node_only]) if assoc.needs_integral else None
        self.HT = np.concatenate([b.H for b in ev_bundles])
        self.XT = np.concatenate([b.X for b in ev_bundles])
        self.ZT = np.concatenate([b.Z for b in ev_bundles])
        self.dXT = np.concatenate([b.dX for b in ev_bundles]) if assoc.needs_slope else None
        self.dZT = np.concatenate([b.dZ for b in ev_bundles]) if assoc.needs_slope else None
        self.iXT = np.concatenate([b.iX for b in ev_bundles]) if assoc.needs_integral else None
        self.iZT = np.concatenate([b.iZ for b in ev_bundles]) if assoc.needs_integral else None

        self.K = spec.penalty_K()
        self.rho = spec.penalty.rank
        self.need_eta = assoc.variant != "shared_random_effects"

    def _features(self, X, Z, dX, dZ, iX, iZ, idx, beta, b):
        eta = slope = integral = None
        if self.need_eta:
            eta = X @ beta + np.sum(Z * b[idx], axis=1)
        if dX is not None:
            slope = dX @ beta + np.sum(dZ * b[idx], axis=1)
        if iX is not None:
            integral = iX @ beta + np.sum(iZ * b[idx], axis=1)
        return eta, slope, integral

    def per_subject_loglik(self, beta, gamma, alpha, gamma_h0, phi, b, strict=True):
        """Longitudinal + survival log likelihood per subject.

        In strict mode a subject whose log hazard exceeds the guard bound gets
        -inf (so MH proposals that diverge are rejected, never saturated); the
        non-strict mode clamps instead and is used for summaries of accepted
        states.
        """
        long_i = np.zeros(self.n)
        if self.midx.size:
            eta_m = self.Xm @ beta + np.sum(self.Zm * b[self.midx], axis=1)
            if self.family.name == "gaussian":
                terms = -0.5 * math.log(2.0 * math.pi * phi) - (self.y - eta_m) ** 2 / (2.0 * phi)
            else:
                terms = self.y * eta_m - np.logaddexp(0.0, eta_m)
            long_i = np.bincount(self.midx, weights=terms, minlength=self.n)

        w_gamma = self.W @ gamma if self.pw else np.zeros(self.n)
        eta, slope, integral = self._features(
            self.Xn, self.Zn, self.dXn, self.dZn, self.iXn, self.iZn, self.nidx, beta, b)
        lh_n = self.Hn @ gamma_h0 + w_gamma[self.nidx]
        lh_n = lh_n + self.assoc.value(alpha, eta=eta, slope=slope, integral=integral, b=b[self.nidx])
        etaT, slopeT, integralT = self._features(
            self.XT, self.ZT, self.dXT, self.dZT, self.iXT, self.iZT, np.arange(self.n), beta, b)
        lh_T = self.HT @ gamma_h0 + w_gamma
        lh_T = lh_T + self.assoc.value(alpha, eta=etaT, slope=slopeT, integral=integralT, b=b)
        bad_n = np.bincount(self.nidx, weights=(lh_n > md.LOG_HAZARD_BOUND).astype(float),
                            minlength=self.n) > 0
        bad = bad_n | (lh_T > md.LOG_HAZARD_BOUND)
        lh_n = np.clip(lh_n, -md.LOG_HAZARD_BOUND, md.LOG_HAZARD_BOUND)
        lh_T = np.clip(lh_T, -md.LOG_HAZARD_BOUND, md.LOG_HAZARD_BOUND)
        cum_i = np.bincount(self.nidx, weights=self.node_w * np.exp(lh_n), minlength=self.n)
        surv_i = self.delta * lh_T - cum_i
        out = long_i + surv_i
        if strict and np.any(bad):
            out = out.copy()
            out[bad] = -np.inf
        return out

    def re_log_prior(self, b, D):
        chol = np.linalg.cholesky(D)
        u = solve_triangular(chol, b.T, lower=True)
        quad = np.sum(u * u, axis=0)
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        return -0.5 * (self.q * math.log(2.0 * math.pi) + logdet + quad)


def _theta_block_prior(name, value, priors, K=None, rho=None, tau_h=None):
    if name == "beta":
        var = priors.beta_variance
    elif name == "gamma":
        var = priors.gamma_variance
    elif name == "alpha":
        var = priors.alpha_variance
    else:  # gamma_h0: smoothness prior
        return 0.5 * rho * math.log(tau_h) - 0.5 * tau_h * float(value @ K @ value)
    return md._normal_prior_logpdf(value, var)


class _AdaptiveBlock:
    """Random-walk proposal with running-covariance shape and RM scaling."""

    def __init__(self, dim: int, adapt_window: int):
        self.dim = dim
        self.target = SCALAR_TARGET_RATE if dim == 1 else BLOCK_TARGET_RATE
        self.log_scale = math.log(2.38 / math.sqrt(dim))
        self.adapt_window = adapt_window
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))
        self.chol = np.eye(dim)
        self.adapting = True

    def draw(self, rng) -> np.ndarray:
        return math.exp(self.log_scale) * (self.chol @ rng.standard_normal(self.dim))

    def record(self, acc_prob: float, x: np.ndarray):
        if not self.adapting:
            return
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += np.outer(delta, x - self.mean)
        gain = 1.0 / self.count**0.6
        self.log_scale += gain * (acc_prob - self.target)
        if self.count % self.adapt_window == 0 and self.count >= max(20, 2 * self.dim):
            cov = self.m2 / (self.count - 1) + 1e-9 * np.eye(self.dim)
            try:
                self.chol = np.linalg.cholesky(cov / np.mean(np.diag(cov)))
            except np.linalg.LinAlgError:
                pass

    def freeze(self):
        self.adapting = False


class _AdaptiveVector:
    """Per-subject scalar step sizes for the random-effect sweeps."""

    def __init__(self, n: int, dim: int):
        self.target = SCALAR_TARGET_RATE if dim == 1 else BLOCK_TARGET_RATE
        self.log_scales = np.full(n, math.log(2.38 / math.sqrt(dim)))
        self.count = 0
        self.adapting = True

    @property
    def scales(self):
        return np.exp(self.log_scales)

    def record(self, acc_probs: np.ndarray):
        if not self.adapting:
            return
        self.count += 1
        gain = 1.0 / self.count**0.6
        self.log_scales += gain * (acc_probs - self.target)

    def freeze(self):
        self.adapting = False


def _initial_state(fd: _FitData, priors: PriorSet, rng, freeze):
    state = {}
    if fd.family.name == "gaussian" and fd.midx.size:
        coef, *_ = np.linalg.lstsq(fd.Xm, fd.y, rcond=None)
        resid = fd.y - fd.Xm @ coef
        state["beta"] = coef
        state["phi"] = float(max(np.var(resid), 0.05))
    else:
        state["beta"] = np.zeros(fd.p)
        state["phi"] = 1.0
    state["gamma"] = np.zeros(fd.pw)
    state["alpha"] = np.zeros(fd.n_alpha)
    crude = max(float(fd.delta.sum()), 0.5) / float(fd.T.sum())
    gh = np.zeros(fd.Q)
    gh[0] = math.log(crude)
    state["gamma_h0"] = gh
    state["tau_h"] = 1.0
    state["tau_hdelta"] = 1.0
    state["D"] = np.eye(fd.q)
    state["b"] = np.zeros((fd.n, fd.q))
    # overdispersed starts per chain
    for name in ("beta", "gamma", "alpha"):
        state[name] = state[name] + 0.1 * rng.standard_normal(state[name].shape)
    state["gamma_h0"] = state["gamma_h0"] + 0.1 * rng.standard_normal(fd.Q)
    for name, value in freeze.items():
        key = "b" if name == "ranef" else name
        if key in ("phi", "tau_h", "tau_hdelta"):
            state[key] = float(value)
        else:
            state[key] = np.asarray(value, dtype=float).copy()
    return state


def _run_chain(fd: _FitData, priors: PriorSet, config: McmcConfig, chain_idx: int,
               freeze: dict):
    rng = np.random.default_rng([config.seed, chain_idx])
    state = _initial_state(fd, priors, rng, freeze)
    frozen = set(freeze.keys())
    gaussian = fd.family.name == "gaussian"

    blocks = {}
    for name, dim in (("beta", fd.p), ("gamma", fd.pw), ("alpha", fd.n_alpha),
                      ("gamma_h0", fd.Q)):
        if dim and name not in frozen:
            blocks[name] = _AdaptiveBlock(dim, config.adapt_window)
    b_prop = _AdaptiveVector(fd.n, fd.q) if "ranef" not in frozen else None

    def data_loglik(**over):
        return fd.per_subject_loglik(
            over.get("beta", state["beta"]), over.get("gamma", state["gamma"]),
            over.get("alpha", state["alpha"]), over.get("gamma_h0", state["gamma_h0"]),
            over.get("phi", state["phi"]), over.get("b", state["b"]), strict=True)

    def theta_prior(**over):
        out = 0.0
        for name in ("beta", "gamma", "alpha"):
            val = over.get(name, state[name])
            if val.size:
                out += _theta_block_prior(name, val, priors)
        out += _theta_block_prior("gamma_h0", over.get("gamma_h0", state["gamma_h0"]),
                                  priors, K=fd.K, rho=fd.rho, tau_h=state["tau_h"])
        return out

    per_subj = data_loglik()
    if not np.all(np.isfinite(per_subj)):
        raise NumericError(
            "log-hazard guard tripped at the initial state; the model diverges "
            "on this dataset")
    re_i = fd.re_log_prior(state["b"], state["D"])
    kept = {name: [] for name in
            ("beta", "gamma", "alpha", "gamma_h0", "phi", "tau_h", "tau_hdelta", "D", "b", "iteration")}
    chol_D = np.linalg.cholesky(state["D"])

    # joint move over every regression block: single-block updates cannot
    # follow the ridge between the association and the baseline intercept
    block_names = tuple(blocks)
    joint = None
    if len(block_names) > 1:
        joint = _AdaptiveBlock(sum(state[n].size for n in block_names), config.adapt_window)
        joint.log_scale -= 1.0  # start conservative; the ridge is narrow

    def split_joint(vec):
        parts = {}
        at = 0
        for n in block_names:
            size = state[n].size
            parts[n] = vec[at: at + size]
            at += size
        return parts

    # location sweeps trade a fixed-effect coordinate against all random
    # effects; the trajectory (hence the whole likelihood) is invariant for
    # feature-based associations, so the ratio involves only the priors
    sweep_ok = ("beta" not in frozen and "ranef" not in frozen
                and fd.assoc.variant != "shared_random_effects")
    sweep_props = [_AdaptiveVector(1, 1) for _ in range(fd.q)] if sweep_ok else []

    # rescaling move on (tau_h, penalized spline component): lets the
    # smoothing parameter jump scales without fighting the smoothness prior
    rescale_prop = None
    if "gamma_h0" not in frozen and "tau_h" not in frozen:
        pen = fd.K - fd.spec.penalty.ridge * np.eye(fd.Q)
        eigvals, eigvecs = np.linalg.eigh(pen)
        v_range = eigvecs[:, eigvals > 1e-9]
        rescale_prop = _AdaptiveVector(1, 1)

    def gh_prior(g, tau):
        return 0.5 * fd.rho * math.log(tau) - 0.5 * tau * float(g @ fd.K @ g)

    for it in range(config.iterations):
        # --- random effects, one vectorized sweep over subjects
        if b_prop is not None:
            z = rng.standard_normal((fd.n, fd.q))
            step = b_prop.scales[:, None] * (z @ chol_D.T)
            cand = state["b"] + step
            cand_subj = data_loglik(b=cand)
            cand_re = fd.re_log_prior(cand, state["D"])
            ratio = (cand_subj + cand_re) - (per_subj + re_i)
            accept = np.log(rng.random(fd.n)) < ratio
            state["b"][accept] = cand[accept]
            per_subj = np.where(accept, cand_subj, per_subj)
            re_i = np.where(accept, cand_re, re_i)
            b_prop.record(np.exp(np.minimum(ratio, 0.0)))

        # --- regression blocks (adaptive random-walk Metropolis); the spline
        # block gets extra sweeps, its ridge-shaped posterior mixes slowest
        cur_data = float(per_subj.sum())
        for name, block in blocks.items():
            for _ in range(3 if name == "gamma_h0" else 1):
                cand_val = state[name] + block.draw(rng)
                cand_subj = data_loglik(**{name: cand_val})
                delta = (float(cand_subj.sum()) + theta_prior(**{name: cand_val})) \
                    - (cur_data + theta_prior())
                acc_prob = math.exp(min(delta, 0.0)) if np.isfinite(delta) else 0.0
                if rng.random() < acc_prob:
                    state[name] = cand_val
                    per_subj = cand_subj
                    cur_data = float(cand_subj.sum())
                block.record(acc_prob, state[name])

        # --- one joint proposal across all regression blocks
        if joint is not None:
            current = np.concatenate([state[n] for n in block_names])
            cand_parts = split_joint(current + joint.draw(rng))
            cand_subj = data_loglik(**cand_parts)
            delta = (float(cand_subj.sum()) + theta_prior(**cand_parts)) \
                - (cur_data + theta_prior())
            acc_prob = math.exp(min(delta, 0.0)) if np.isfinite(delta) else 0.0
            if rng.random() < acc_prob:
                for n in block_names:
                    state[n] = cand_parts[n]
                per_subj = cand_subj
                cur_data = float(cand_subj.sum())
            joint.record(acc_prob, np.concatenate([state[n] for n in block_names]))

        # --- joint rescale of the smoothing parameter and the spline wiggle
        if rescale_prop is not None:
            log_c = float(rescale_prop.scales[0] * rng.standard_normal())
            c = math.exp(log_c)
            g = state["gamma_h0"]
            g_pen = v_range @ (v_range.T @ g)
            g_cand = (g - g_pen) + g_pen / math.sqrt(c)
            tau_cand = c * state["tau_h"]
            cand_subj = data_loglik(gamma_h0=g_cand)
            delta = (float(cand_subj.sum()) - cur_data
                     + gh_prior(g_cand, tau_cand) - gh_prior(g, state["tau_h"])
                     - state["tau_hdelta"] * (tau_cand - state["tau_h"])
                     + (1.0 - 0.5 * v_range.shape[1]) * log_c)
            acc_prob = math.exp(min(delta, 0.0)) if np.isfinite(delta) else 0.0
            if rng.random() < acc_prob:
                state["gamma_h0"] = g_cand
                state["tau_h"] = tau_cand
                per_subj = cand_subj
                cur_data = float(cand_subj.sum())
            rescale_prop.record(np.array([acc_prob]))

        # --- location sweeps beta[k] <-> b[:, k]
        for k, prop in enumerate(sweep_props):
            delta_k = float(prop.scales[0] * rng.standard_normal())
            b_cand = state["b"].copy()
            b_cand[:, k] -= delta_k
            cand_re = fd.re_log_prior(b_cand, state["D"])
            beta_k = state["beta"][k]
            dprior = -((beta_k + delta_k) ** 2 - beta_k**2) / (2.0 * priors.beta_variance)
            ratio = float(cand_re.sum() - re_i.sum()) + dprior
            acc_prob = math.exp(min(ratio, 0.0))
            if rng.random() < acc_prob:
                state["beta"] = state["beta"].copy()
                state["beta"][k] += delta_k
                state["b"] = b_cand
                re_i = cand_re
            prop.record(np.array([acc_prob]))

        # --- conjugate updates
        if gaussian and "phi" not in frozen and fd.midx.size:
            eta_m = fd.Xm @ state["beta"] + np.sum(fd.Zm * state["b"][fd.midx], axis=1)
            ssr = float(np.sum((fd.y - eta_m) ** 2))
            shape = priors.phi_shape + 0.5 * fd.midx.size
            rate = priors.phi_rate + 0.5 * ssr
            state["phi"] = float(rate / rng.gamma(shape))
            per_subj = data_loglik()
        if "D" not in frozen:
            scale = np.eye(fd.q) + state["b"].T @ state["b"]
            df = fd.q + priors.d_df_extra + fd.n
            state["D"] = invwishart.rvs(df=df, scale=scale, random_state=rng).reshape(fd.q, fd.q)
            chol_D = np.linalg.cholesky(state["D"])
            re_i = fd.re_log_prior(state["b"], state["D"])
        if "tau_h" not in frozen:
            g = state["gamma_h0"]
            rate = state["tau_hdelta"] + 0.5 * float(g @ fd.K @ g)
            state["tau_h"] = float(rng.gamma(priors.tau_shape + 0.5 * fd.rho) / rate)
        if "tau_hdelta" not in frozen:
            rate = priors.tau_delta_rate + state["tau_h"]
            state["tau_hdelta"] = float(rng.gamma(priors.tau_delta_shape + priors.tau_shape) / rate)

        if it + 1 == config.burn_in:
            for block in blocks.values():
                block.freeze()
            if b_prop is not None:
                b_prop.freeze()
            if joint is not None:
                joint.freeze()
            if rescale_prop is not None:
                rescale_prop.freeze()
            for prop in sweep_props:
                prop.freeze()

        if it >= config.burn_in and (it - config.burn_in) % config.thin == 0:
            for name in ("beta", "gamma", "alpha", "gamma_h0", "D", "b"):
                kept[name].append(np.array(state[name], copy=True))
            for name in ("phi", "tau_h", "tau_hdelta"):
                kept[name].append(float(state[name]))
            kept["iteration"].append(it)

    return kept


def fit(dataset: md.Dataset, spec: md.JointModelSpec, assoc: md.AssociationForm,
        priors: PriorSet, config: McmcConfig, freeze: dict = None) -> PosteriorSamples:
    """Sample the joint posterior of parameters and random effects.

    ``freeze`` maps block names (beta, gamma, alpha, gamma_h0, phi, D, tau_h,
    tau_hdelta, ranef) to fixed values; frozen blocks are never updated.
    """
    if dataset.n == 0:
        raise DataError("dataset is empty")
    freeze = dict(freeze or {})
    fd = _FitData(dataset, spec, assoc)
    flags = []
    if dataset.n_events == 0:
        flags.append("degenerate data: no events observed; survival parameters "
                     "are informed by the prior only")

    chains_kept = []
    for c in range(config.chains):
        chains_kept.append(_run_chain(fd, priors, config, c, freeze))

    def gather(name):
        return np.concatenate([np.asarray(k[name]) for k in chains_kept], axis=0)

    per_chain = len(chains_kept[0]["iteration"])
    samples = PosteriorSamples(
        beta=gather("beta"), gamma=gather("gamma"), alpha=gather("alpha"),
        gamma_h0=gather("gamma_h0"), phi=gather("phi"), tau_h=gather("tau_h"),
        tau_hdelta=gather("tau_hdelta"), D=gather("D"),
        ranef=gather("b"),
        chain=np.repeat(np.arange(config.chains), per_chain),
        iteration=gather("iteration").astype(int),
        subject_ids=tuple(s.id for s in dataset.subjects),
        flags=flags,
    )

    names = scalar_names(samples, fd.family)
    mat = scalar_matrix(samples, fd.family)
    by_chain = mat.reshape(config.chains, per_chain, -1)
    diagnostics = {}
    for j, name in enumerate(names):
        seqs = by_chain[:, :, j]
        diagnostics[name] = (split_rhat(seqs), effective_sample_size(seqs))
    samples.diagnostics = diagnostics
    worst = max((r for r, _ in diagnostics.values()), default=1.0)
    if worst > 1.1:
        offender = max(diagnostics, key=lambda k: diagnostics[k][0])
        samples.flags.append(
            f"non-convergence: Rhat for {offender} = {diagnostics[offender][0]:.3f} > 1.1")
    return samples


# ---------------------------------------------------------------------------
# DIC
# ---------------------------------------------------------------------------

def dic(samples: PosteriorSamples, dataset: md.Dataset, spec: md.JointModelSpec,
        assoc: md.AssociationForm) -> float:
    """Deviance information criterion at paired (theta, b) draws."""
    if samples.n_draws == 0:
        raise SpecError("posterior sample is empty")
    if samples.ranef is None:
        raise SpecError("DIC needs per-subject random-effect draws")
    fd = _FitData(dataset, spec, assoc)
    devs = np.empty(samples.n_draws)
    for g in range(samples.n_draws):
        ll = fd.per_subject_loglik(samples.beta[g], samples.gamma[g], samples.alpha[g],
                                   samples.gamma_h0[g], float(samples.phi[g]),
                                   samples.ranef[g], strict=False)
        devs[g] = -2.0 * float(ll.sum())
    dbar = float(devs.mean())
    ll_hat = fd.per_subject_loglik(samples.beta.mean(0), samples.gamma.mean(0),
                                   samples.alpha.mean(0), samples.gamma_h0.mean(0),
                                   float(samples.phi.mean()), samples.ranef.mean(0),
                                   strict=False)
    d_hat = -2.0 * float(ll_hat.sum())
    p_d = dbar - d_hat
    return dbar + p_d


# ---------------------------------------------------------------------------
# Convergence diagnostics
# ---------------------------------------------------------------------------

def split_rhat(seqs: np.ndarray) -> float:
    """Split-chain potential scale reduction factor; seqs is (chains, draws)."""
    seqs = np.atleast_2d(np.asarray(seqs, dtype=float))
    half = seqs.shape[1] // 2
    if half < 2:
        return 1.0
    parts = np.concatenate([seqs[:, :half], seqs[:, half: 2 * half]], axis=0)
    m, k = parts.shape
    within = parts.var(axis=1, ddof=1).mean()
    if within == 0.0 or not np.isfinite(within):
        return 1.0
    between = k * parts.mean(axis=1).var(ddof=1)
    var_plus = (k - 1) / k * within + between / k
    return float(np.sqrt(var_plus / within))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    spectrum = np.fft.rfft(xc, 2 * n)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum))[:n].real
    return acov / n


def effective_sample_size(seqs: np.ndarray) -> float:
    """Effective sample size across chains (Geyer initial monotone sequence)."""
    seqs = np.atleast_2d(np.asarray(seqs, dtype=float))
    m, n = seqs.shape
    if n < 4:
        return float(m * n)
    acovs = np.stack([_autocovariance(s) for s in seqs])
    mean_acov = acovs.mean(axis=0)
    within = seqs.var(axis=1, ddof=1).mean()
    if within == 0.0 or not np.isfinite(within):
        return float(m * n)
    between = seqs.mean(axis=1).var(ddof=1) if m > 1 else 0.0
    var_plus = within * (n - 1) / n + between
    rho = 1.0 - (within - mean_acov) / var_plus
    tau = 1.0
    prev_pair = np.inf
    for k in range(1, n // 2):
        pair = rho[2 * k - 1] + rho[2 * k]
        if pair < 0:
            break
        pair = min(pair, prev_pair)
        prev_pair = pair
        tau += 2.0 * pair
    return float(min(m * n, m * n / tau))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def write_draws_csv(samples: PosteriorSamples, spec: md.JointModelSpec, path) -> None:
    """One row per draw; header names every scalar parameter."""
    names = scalar_names(samples, spec.longitudinal.family)
    mat = scalar_matrix(samples, spec.longitudinal.family)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "iteration", *names])
        for g in range(samples.n_draws):
            writer.writerow([int(samples.chain[g]), int(samples.iteration[g]),
                             *[repr(float(v)) for v in mat[g]]])


def read_draws_csv(path, spec: md.JointModelSpec) -> PosteriorSamples:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader]
    cols = {name: j for j, name in enumerate(header)}
    G = len(rows)
    data = np.array([[float(v) for v in r] for r in rows]) if G else np.zeros((0, len(header)))

    def block(prefix):
        idx = []
        k = 0
        while f"{prefix}[{k}]" in cols:
            idx.append(cols[f"{prefix}[{k}]"])
            k += 1
        return data[:, idx] if idx else np.zeros((G, 0))

    q = 0
    while f"D[{q},{q}]" in cols:
        q += 1
    D = np.zeros((G, q, q))
    for i in range(q):
        for j in range(i + 1):
            D[:, i, j] = data[:, cols[f"D[{i},{j}]"]]
            D[:, j, i] = D[:, i, j]
    phi = data[:, cols["sigma2"]] if "sigma2" in cols else np.ones(G)
    return PosteriorSamples(
        beta=block("beta"), gamma=block("gamma"), alpha=block("alpha"),
        gamma_h0=block("gamma_h0"), phi=phi, tau_h=data[:, cols["tau_h"]],
        tau_hdelta=np.ones(G), D=D,
        chain=data[:, cols["chain"]].astype(int),
        iteration=data[:, cols["iteration"]].astype(int),
    )


def write_ranef_csv(samples: PosteriorSamples, path) -> None:
    if samples.ranef is None:
        raise SpecError("samples carry no random-effect draws")
    G, n, q = samples.ranef.shape
    names = [f"b[{sid},{k}]" for sid in samples.subject_ids for k in range(q)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "iteration", *names])
        flat = samples.ranef.reshape(G, n * q)
        for g in range(G):
            writer.writerow([int(samples.chain[g]), int(samples.iteration[g]),
                             *[repr(float(v)) for v in flat[g]]])


def read_ranef_csv(path):
    """Returns (subject_ids, ranef array (G, n, q))."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader]
    ids, ks = [], []
    for name in header[2:]:
        body = name[2:-1]
        sid, k = body.rsplit(",", 1)
        ids.append(sid)
        ks.append(int(k))
    q = max(ks) + 1 if ks else 1
    subject_ids = tuple(dict.fromkeys(ids))
    n = len(subject_ids)
    G = len(rows)
    flat = np.array([[float(v) for v in r[2:]] for r in rows]) if G else np.zeros((0, n * q))
    return subject_ids, flat.reshape(G, n, q)


def write_diagnostics_report(samples: PosteriorSamples, path) -> None:
    with open(path, "w") as fh:
        fh.write("parameter rhat ess\n")
        for name, (rhat, ess) in samples.diagnostics.items():
            fh.write(f"{name} {rhat:.4f} {ess:.1f}\n")
        for flag in samples.flags:
            fh.write(f"flag: {flag}\n")
