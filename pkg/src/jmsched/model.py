"""Model specification, linear predictors, hazards, survival, and log densities.

A joint model couples a generalized linear mixed model for a repeatedly
measured outcome with a relative-risk model whose hazard depends on features
of the subject-specific trajectory (value, slope, integral, or the random
effects themselves) on top of a penalized B-spline log baseline hazard.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import expit, gammaln
from scipy.stats import invwishart

from .errors import DataError, DomainError, NumericError, SpecError
from .numerics import (
    GK15,
    BSplineBasis,
    DifferencePenalty,
    NaturalCubicBasis,
    bspline_eval,
    bspline_matrix,
    mapped_nodes,
    ncs_deriv,
    ncs_deriv_matrix,
    ncs_eval,
    ncs_matrix,
    penalty_matrix,
    span_nodes,
)

LOG_HAZARD_BOUND = 700.0

ASSOCIATION_VARIANTS = (
    "current_value",
    "slope",
    "value_and_slope",
    "cumulative",
    "shared_random_effects",
)


# ---------------------------------------------------------------------------
# Outcome families
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExponentialFamily:
    """Outcome family with its canonical one-to-one monotonic link.

    gaussian uses the identity link with free dispersion phi (the error
    variance); bernoulli uses the logit link with dispersion fixed at 1.
    """

    name: str

    def __post_init__(self):
        if self.name not in ("gaussian", "bernoulli"):
            raise SpecError(f"unknown family '{self.name}' (gaussian or bernoulli)")

    @property
    def has_dispersion(self) -> bool:
        return self.name == "gaussian"

    def check_response(self, y) -> None:
        y = np.asarray(y, dtype=float)
        if self.name == "bernoulli" and not np.all((y == 0.0) | (y == 1.0)):
            raise DataError("bernoulli responses must be 0 or 1")

    def mean(self, eta):
        if self.name == "gaussian":
            return eta
        return expit(eta)

    def sample(self, rng, eta, phi):
        if self.name == "gaussian":
            return float(eta + math.sqrt(phi) * rng.standard_normal())
        return float(rng.random() < self.mean(eta))


GAUSSIAN = ExponentialFamily("gaussian")
BERNOULLI = ExponentialFamily("bernoulli")


def long_log_density(family: ExponentialFamily, y, eta, phi: float = 1.0):
    """Log density of one longitudinal measurement given its linear predictor."""
    family.check_response(y)
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family.name == "gaussian":
        out = -0.5 * np.log(2.0 * np.pi * phi) - (y - eta) ** 2 / (2.0 * phi)
    else:
        out = y * eta - np.logaddexp(0.0, eta)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Time effects for the longitudinal design
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearTime:
    """Single feature t."""

    n_terms = 1
    breakpoints = ()

    def terms(self, t):
        return np.array([t], dtype=float)

    def derivs(self, t):
        return np.array([1.0])

    def terms_matrix(self, ts):
        return np.asarray(ts, dtype=float)[:, None]

    def derivs_matrix(self, ts):
        return np.ones((np.size(ts), 1))


@dataclass(frozen=True)
class PolynomialTime:
    """Features t, t^2, ..., t^degree."""

    degree: int

    def __post_init__(self):
        if self.degree < 1:
            raise SpecError("polynomial time effect needs degree >= 1")

    @property
    def n_terms(self):
        return self.degree

    breakpoints = ()

    def terms(self, t):
        return np.array([t ** k for k in range(1, self.degree + 1)])

    def derivs(self, t):
        return np.array([k * t ** (k - 1) for k in range(1, self.degree + 1)])

    def terms_matrix(self, ts):
        ts = np.asarray(ts, dtype=float)
        return np.column_stack([ts ** k for k in range(1, self.degree + 1)])

    def derivs_matrix(self, ts):
        ts = np.asarray(ts, dtype=float)
        return np.column_stack([k * ts ** (k - 1) for k in range(1, self.degree + 1)])


@dataclass(frozen=True)
class SplineTime:
    """Natural cubic spline features of time."""

    basis: NaturalCubicBasis

    @property
    def n_terms(self):
        return self.basis.num_basis

    @property
    def breakpoints(self):
        return self.basis.interior_knots

    def terms(self, t):
        return ncs_eval(self.basis, t)

    def derivs(self, t):
        return ncs_deriv(self.basis, t)

    def terms_matrix(self, ts):
        return ncs_matrix(self.basis, ts)

    def derivs_matrix(self, ts):
        return ncs_deriv_matrix(self.basis, ts)


# ---------------------------------------------------------------------------
# Longitudinal submodel
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LongitudinalSpec:
    """Design builders for the mixed model.

    The fixed row is [1, time features, covariates]; the random row is
    [1, first `random_time_terms` time features], so the random design is a
    sub-feature-set of the fixed one and supports derivative evaluation.
    """

    family: ExponentialFamily
    time_effect: object = None  # LinearTime, PolynomialTime, SplineTime, or None
    covariates: tuple = ()
    random_time_terms: int = None  # default: all time terms

    def __post_init__(self):
        n_time = self.time_effect.n_terms if self.time_effect is not None else 0
        rt = self.random_time_terms
        if rt is None:
            rt = n_time
        if not 0 <= rt <= n_time:
            raise SpecError(
                f"random_time_terms must lie in [0, {n_time}], got {rt}"
            )
        object.__setattr__(self, "random_time_terms", int(rt))
        object.__setattr__(self, "covariates", tuple(self.covariates))

    @property
    def n_time_terms(self) -> int:
        return self.time_effect.n_terms if self.time_effect is not None else 0

    @property
    def n_fixed(self) -> int:
        return 1 + self.n_time_terms + len(self.covariates)

    @property
    def n_random(self) -> int:
        return 1 + self.random_time_terms

    @property
    def time_breakpoints(self):
        return self.time_effect.breakpoints if self.time_effect is not None else ()

    def _time_terms(self, t):
        if self.time_effect is None:
            return np.empty(0)
        return np.asarray(self.time_effect.terms(t), dtype=float)

    def _time_derivs(self, t):
        if self.time_effect is None:
            return np.empty(0)
        return np.asarray(self.time_effect.derivs(t), dtype=float)

    def fixed_row(self, t, cov_values) -> np.ndarray:
        cov_values = np.asarray(cov_values, dtype=float)
        if cov_values.shape != (len(self.covariates),):
            raise SpecError(
                f"expected {len(self.covariates)} longitudinal covariates, "
                f"got {cov_values.shape}"
            )
        return np.concatenate([[1.0], self._time_terms(t), cov_values])

    def fixed_deriv_row(self, t, cov_values=None) -> np.ndarray:
        return np.concatenate(
            [[0.0], self._time_derivs(t), np.zeros(len(self.covariates))]
        )

    def random_row(self, t) -> np.ndarray:
        return np.concatenate([[1.0], self._time_terms(t)[: self.random_time_terms]])

    def random_deriv_row(self, t) -> np.ndarray:
        return np.concatenate([[0.0], self._time_derivs(t)[: self.random_time_terms]])

    def fixed_integral_row(self, t, cov_values) -> np.ndarray:
        """Componentwise integral of the fixed row over [0, t]."""
        cov_values = np.asarray(cov_values, dtype=float)
        terms = self._time_integrals(np.array([t]))[0]
        return np.concatenate([[t], terms, cov_values * t])

    def random_integral_row(self, t) -> np.ndarray:
        terms = self._time_integrals(np.array([t]))[0, : self.random_time_terms]
        return np.concatenate([[t], terms])

    # --- vectorized builders -------------------------------------------------

    def _time_terms_matrix(self, ts):
        if self.time_effect is None:
            return np.zeros((np.size(ts), 0))
        return np.asarray(self.time_effect.terms_matrix(ts), dtype=float)

    def _time_derivs_matrix(self, ts):
        if self.time_effect is None:
            return np.zeros((np.size(ts), 0))
        return np.asarray(self.time_effect.derivs_matrix(ts), dtype=float)

    def _time_integrals(self, ts) -> np.ndarray:
        """Cumulative integrals of each time feature from 0 to every t."""
        ts = np.asarray(ts, dtype=float)
        if self.n_time_terms == 0:
            return np.zeros((ts.size, 0))
        edges = np.unique(np.concatenate(
            [[0.0], ts, [c for c in self.time_breakpoints if 0.0 < c < ts.max(initial=0.0)]]))
        edges = edges[edges >= 0.0]
        nodes, widths = [], []
        for lo, hi in zip(edges[:-1], edges[1:]):
            x, w = mapped_nodes(GK15, lo, hi)
            nodes.append(x)
            widths.append(w)
        if nodes:
            all_nodes = np.concatenate(nodes)
            all_w = np.concatenate(widths)
            vals = self._time_terms_matrix(all_nodes)
            k = GK15.nodes.size
            seg = np.repeat(np.arange(len(nodes)), k)
            increments = np.zeros((len(nodes), self.n_time_terms))
            np.add.at(increments, seg, all_w[:, None] * vals)
            cum = np.concatenate([np.zeros((1, self.n_time_terms)),
                                  np.cumsum(increments, axis=0)])
        else:
            cum = np.zeros((1, self.n_time_terms))
        pos = np.searchsorted(edges, ts)
        return cum[pos]

    def fixed_matrix(self, ts, cov_values) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        cov_values = np.asarray(cov_values, dtype=float)
        ones = np.ones((ts.size, 1))
        covs = np.broadcast_to(cov_values, (ts.size, cov_values.size))
        return np.column_stack([ones, self._time_terms_matrix(ts), covs])

    def random_matrix(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        return np.column_stack([np.ones((ts.size, 1)),
                                self._time_terms_matrix(ts)[:, : self.random_time_terms]])

    def fixed_deriv_matrix(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        return np.column_stack([np.zeros((ts.size, 1)), self._time_derivs_matrix(ts),
                                np.zeros((ts.size, len(self.covariates)))])

    def random_deriv_matrix(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        return np.column_stack([np.zeros((ts.size, 1)),
                                self._time_derivs_matrix(ts)[:, : self.random_time_terms]])

    def fixed_integral_matrix(self, ts, cov_values) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        cov_values = np.asarray(cov_values, dtype=float)
        ints = self._time_integrals(ts)
        return np.column_stack([ts[:, None], ints, np.outer(ts, cov_values)])

    def random_integral_matrix(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        ints = self._time_integrals(ts)[:, : self.random_time_terms]
        return np.column_stack([ts[:, None], ints])


# ---------------------------------------------------------------------------
# Association between trajectory and hazard
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AssociationForm:
    """Which trajectory features enter the log relative risk."""

    variant: str
    n_params: int = None

    def __post_init__(self):
        if self.variant not in ASSOCIATION_VARIANTS:
            raise SpecError(
                f"unknown association variant '{self.variant}'; "
                f"valid: {', '.join(ASSOCIATION_VARIANTS)}"
            )
        arity = {"current_value": 1, "slope": 1, "value_and_slope": 2, "cumulative": 1}
        n = self.n_params
        if self.variant == "shared_random_effects":
            if n is None or n < 1:
                raise SpecError(
                    "shared_random_effects needs n_params = random-effect dimension"
                )
        else:
            if n is None:
                n = arity[self.variant]
            elif n != arity[self.variant]:
                raise SpecError(
                    f"{self.variant} takes {arity[self.variant]} association "
                    f"parameter(s), got {n}"
                )
        object.__setattr__(self, "n_params", int(n))

    @property
    def needs_slope(self) -> bool:
        return self.variant in ("slope", "value_and_slope")

    @property
    def needs_integral(self) -> bool:
        return self.variant == "cumulative"

    def value(self, alpha, eta=None, slope=None, integral=None, b=None):
        """f(features; alpha); broadcasts over leading axes of the features."""
        alpha = np.asarray(alpha, dtype=float)
        if alpha.shape[-1] != self.n_params:
            raise SpecError(
                f"association '{self.variant}' expects {self.n_params} "
                f"parameter(s), got {alpha.shape[-1]}"
            )
        if self.variant == "current_value":
            return alpha[..., 0] * eta
        if self.variant == "slope":
            return alpha[..., 0] * slope
        if self.variant == "value_and_slope":
            return alpha[..., 0] * eta + alpha[..., 1] * slope
        if self.variant == "cumulative":
            return alpha[..., 0] * integral
        return np.sum(alpha * b, axis=-1)


# ---------------------------------------------------------------------------
# Baseline hazard
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BaselineHazard:
    """Penalized-spline log baseline hazard.

    ``coefficients[0]`` is the intercept; the remaining entries multiply the
    B-spline basis functions.  The difference penalty runs over the full
    coefficient vector (the intercept direction lies in the null space of the
    unridged penalty).
    """

    basis: BSplineBasis
    coefficients: np.ndarray
    penalty: DifferencePenalty
    smoothing: float

    def __post_init__(self):
        coefs = np.asarray(self.coefficients, dtype=float)
        if coefs.shape != (self.basis.num_basis + 1,):
            raise SpecError(
                f"baseline needs {self.basis.num_basis + 1} coefficients "
                f"(intercept + basis), got {coefs.shape}"
            )
        if self.penalty.dim != coefs.size:
            raise SpecError(
                f"penalty dim {self.penalty.dim} != coefficient length {coefs.size}"
            )
        if not self.smoothing > 0:
            raise SpecError("smoothing parameter must be positive")
        object.__setattr__(self, "coefficients", coefs)

    def design_row(self, t) -> np.ndarray:
        # constant extrapolation outside the spline support (clamped time);
        # simulated event times may land beyond the last observed time
        lo, hi = self.basis.boundary_knots
        return np.concatenate([[1.0], bspline_eval(self.basis, min(max(t, lo), hi))])

    def log_h0(self, t) -> float:
        return float(self.design_row(t) @ self.coefficients)


def default_baseline_basis(observed_times, n_coefficients: int = 15, degree: int = 3) -> BSplineBasis:
    """B-spline basis with interior knots at quantiles of the observed times.

    ``n_coefficients`` counts the intercept plus the spline functions, so the
    basis itself has ``n_coefficients - 1`` functions.
    """
    times = np.asarray(observed_times, dtype=float)
    if times.size == 0 or np.any(times <= 0):
        raise SpecError("baseline knots need positive observed times")
    n_basis = n_coefficients - 1
    n_interior = n_basis - degree - 1
    if n_interior < 0:
        raise SpecError(
            f"n_coefficients={n_coefficients} too small for degree {degree}"
        )
    hi = float(np.max(times)) * (1.0 + 1e-9)
    if n_interior:
        qs = np.quantile(times, np.arange(1, n_interior + 1) / (n_interior + 1))
        qs = np.clip(qs, hi * 1e-6, hi * (1 - 1e-6))
        # nudge ties apart; quantile knots must be strictly ascending
        for k in range(1, len(qs)):
            if qs[k] <= qs[k - 1]:
                qs[k] = qs[k - 1] + 1e-8 * hi
        interior = tuple(qs)
    else:
        interior = ()
    return BSplineBasis(degree=degree, interior_knots=interior, boundary_knots=(0.0, hi))


# ---------------------------------------------------------------------------
# Joint model specification and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JointModelSpec:
    """Full model definition minus the parameter values."""

    longitudinal: LongitudinalSpec
    baseline_basis: BSplineBasis
    hazard_covariates: tuple = ()
    penalty_order: int = 2
    penalty_ridge: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "hazard_covariates", tuple(self.hazard_covariates))

    @property
    def n_baseline(self) -> int:
        return self.baseline_basis.num_basis + 1

    @property
    def penalty(self) -> DifferencePenalty:
        return DifferencePenalty(self.penalty_order, self.n_baseline, self.penalty_ridge)

    def penalty_K(self) -> np.ndarray:
        return penalty_matrix(self.penalty)

    def make_baseline(self, coefficients, smoothing) -> BaselineHazard:
        return BaselineHazard(self.baseline_basis, np.asarray(coefficients, float),
                              self.penalty, float(smoothing))

    def baseline_row(self, t) -> np.ndarray:
        return self.baseline_matrix(np.array([t]))[0]

    def baseline_matrix(self, ts) -> np.ndarray:
        # clamped evaluation: the log baseline is held at its boundary value
        # outside the spline support
        lo, hi = self.baseline_basis.boundary_knots
        ts = np.clip(np.asarray(ts, dtype=float), lo, hi)
        return np.column_stack([np.ones((ts.size, 1)), bspline_matrix(self.baseline_basis, ts)])

    @property
    def hazard_breakpoints(self):
        """Knot locations splitting the hazard integrals into smooth spans."""
        return tuple(sorted(set(self.baseline_basis.interior_knots)
                            | set(self.longitudinal.time_breakpoints)))


@dataclass(frozen=True)
class Parameters:
    """One realization of the full parameter vector."""

    beta: np.ndarray
    phi: float
    D: np.ndarray
    gamma: np.ndarray
    alpha: np.ndarray
    baseline: BaselineHazard

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float)) if np.size(self.gamma) else np.empty(0)
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        if not self.phi > 0:
            raise SpecError(f"dispersion must be positive, got {self.phi}")
        if D.shape[0] != D.shape[1] or not np.allclose(D, D.T, atol=1e-10):
            raise SpecError("D must be a symmetric matrix")
        try:
            np.linalg.cholesky(D)
        except np.linalg.LinAlgError:
            raise SpecError("D must be positive definite") from None
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "D", D)

    @property
    def gamma_h0(self) -> np.ndarray:
        return self.baseline.coefficients

    @property
    def tau_h(self) -> float:
        return self.baseline.smoothing

    @property
    def n_random(self) -> int:
        return self.D.shape[0]


# ---------------------------------------------------------------------------
# Observed data
# ---------------------------------------------------------------------------

def _covariate_row(covariates, names) -> np.ndarray:
    try:
        return np.array([float(covariates[n]) for n in names])
    except KeyError as exc:
        raise DataError(f"missing covariate {exc.args[0]!r}") from None


@dataclass(frozen=True)
class Subject:
    """One subject: measurements, observed event/censoring time, covariates."""

    id: str
    times: np.ndarray
    y: np.ndarray
    event_time: float
    event: int
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if times.shape != y.shape:
            raise DataError(f"subject {self.id}: times and values differ in length")
        if times.size and (np.any(np.diff(times) < 0) or times[0] < 0):
            raise DataError(f"subject {self.id}: measurement times must be ascending and >= 0")
        if not self.event_time > 0:
            raise DataError(f"subject {self.id}: observed time must be positive")
        if times.size and times[-1] > self.event_time:
            raise DataError(
                f"subject {self.id}: measurement time {times[-1]} exceeds "
                f"observed time {self.event_time}"
            )
        if self.event not in (0, 1):
            raise DataError(f"subject {self.id}: event indicator must be 0 or 1")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "event_time", float(self.event_time))
        object.__setattr__(self, "event", int(self.event))

    @property
    def n_obs(self) -> int:
        return self.times.size

    def covariate_row(self, names) -> np.ndarray:
        return _covariate_row(self.covariates, names)

    def __eq__(self, other):
        if not isinstance(other, Subject):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.y, other.y)
            and self.event_time == other.event_time
            and self.event == other.event
            and dict(self.covariates) == dict(other.covariates)
        )

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    subjects: tuple

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def n_events(self) -> int:
        return sum(s.event for s in self.subjects)

    def observed_times(self) -> np.ndarray:
        return np.array([s.event_time for s in self.subjects])

    def get(self, subject_id: str) -> Subject:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise DataError(f"unknown subject id {subject_id!r}")

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return len(self.subjects) == len(other.subjects) and all(
            a == b for a, b in zip(self.subjects, other.subjects)
        )

    __hash__ = None


@dataclass(frozen=True)
class SubjectHistory:
    """A (possibly new) subject observed event-free up to the landmark time."""

    covariates: dict
    times: np.ndarray
    y: np.ndarray
    t: float

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float)) if np.size(self.times) else np.empty(0)
        y = np.atleast_1d(np.asarray(self.y, dtype=float)) if np.size(self.y) else np.empty(0)
        if times.shape != y.shape:
            raise DataError("history times and values differ in length")
        if times.size and times[-1] > self.t:
            raise DataError(f"history has a measurement at {times[-1]} after the landmark {self.t}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", float(self.t))

    @classmethod
    def from_subject(cls, subject: Subject, t: float) -> "SubjectHistory":
        keep = subject.times <= t
        return cls(dict(subject.covariates), subject.times[keep], subject.y[keep], t)

    def covariate_row(self, names) -> np.ndarray:
        return _covariate_row(self.covariates, names)


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------

def _long_covs(spec: LongitudinalSpec, subject) -> np.ndarray:
    return _covariate_row(subject.covariates, spec.covariates)


def linear_predictor(spec: LongitudinalSpec, subject, b, beta, t) -> float:
    """eta(t) = x(t).beta + z(t).b."""
    beta = np.asarray(beta, dtype=float)
    b = np.asarray(b, dtype=float)
    x = spec.fixed_row(t, _long_covs(spec, subject))
    z = spec.random_row(t)
    if beta.shape != x.shape:
        raise SpecError(f"beta has length {beta.size}, design expects {x.size}")
    if b.shape != z.shape:
        raise SpecError(f"b has length {b.size}, random design expects {z.size}")
    return float(x @ beta + z @ b)


def predictor_slope(spec: LongitudinalSpec, subject, b, beta, t) -> float:
    """d eta / dt via the analytic time-basis derivatives."""
    beta = np.asarray(beta, dtype=float)
    b = np.asarray(b, dtype=float)
    dx = spec.fixed_deriv_row(t)
    dz = spec.random_deriv_row(t)
    if beta.shape != dx.shape:
        raise SpecError(f"beta has length {beta.size}, design expects {dx.size}")
    if b.shape != dz.shape:
        raise SpecError(f"b has length {b.size}, random design expects {dz.size}")
    return float(dx @ beta + dz @ b)


def predictor_integral(spec: LongitudinalSpec, subject, b, beta, t) -> float:
    """Integral of eta over [0, t]."""
    if t == 0.0:
        return 0.0
    ix = spec.fixed_integral_row(t, _long_covs(spec, subject))
    iz = spec.random_integral_row(t)
    return float(ix @ np.asarray(beta, float) + iz @ np.asarray(b, float))


# ---------------------------------------------------------------------------
# Hazard and survival
# ---------------------------------------------------------------------------

def log_hazard_at_times(theta: Parameters, spec: JointModelSpec, assoc: AssociationForm,
                        subject, b, times) -> np.ndarray:
    """Vectorized log hazard at an array of positive times."""
    times = np.asarray(times, dtype=float)
    lspec = spec.longitudinal
    b = np.asarray(b, dtype=float)
    out = spec.baseline_matrix(times) @ theta.gamma_h0
    w = _covariate_row(subject.covariates, spec.hazard_covariates)
    if w.size:
        out = out + float(w @ theta.gamma)
    eta = slope = integral = None
    if assoc.variant != "shared_random_effects":
        cov = _long_covs(lspec, subject)
        eta = lspec.fixed_matrix(times, cov) @ theta.beta + lspec.random_matrix(times) @ b
    if assoc.needs_slope:
        slope = lspec.fixed_deriv_matrix(times) @ theta.beta + lspec.random_deriv_matrix(times) @ b
    if assoc.needs_integral:
        cov = _long_covs(lspec, subject)
        integral = (lspec.fixed_integral_matrix(times, cov) @ theta.beta
                    + lspec.random_integral_matrix(times) @ b)
    return out + assoc.value(theta.alpha, eta=eta, slope=slope, integral=integral, b=b)


def log_hazard(theta: Parameters, spec: JointModelSpec, assoc: AssociationForm,
               subject, b, t) -> float:
    """log h(t) = log h0(t) + gamma.w + f(trajectory features, b; alpha)."""
    if not t > 0:
        raise DomainError(f"hazard is defined for t > 0, got t={t}")
    return float(log_hazard_at_times(theta, spec, assoc, subject, b, np.array([t]))[0])


def cumulative_hazard(theta, spec, assoc, subject, b, t, lower: float = 0.0) -> float:
    """Integral of the hazard over [lower, t] by composite Gauss-Kronrod."""
    if t < lower:
        raise DomainError(f"needs t >= {lower}, got {t}")
    if t == lower:
        return 0.0
    nodes, weights = span_nodes(lower, t, spec.hazard_breakpoints, GK15)
    lh = log_hazard_at_times(theta, spec, assoc, subject, b, nodes)
    if np.max(lh) > LOG_HAZARD_BOUND:
        s = nodes[np.argmax(lh)]
        raise NumericError(f"hazard overflow (log h = {np.max(lh):.1f}) at s={s}")
    return float(weights @ np.exp(np.maximum(lh, -LOG_HAZARD_BOUND)))


def survival(theta, spec, assoc, subject, b, t) -> float:
    """S(t) = exp(-integral of the hazard over [0, t]); S(0) = 1."""
    if t < 0:
        raise DomainError(f"survival needs t >= 0, got {t}")
    return math.exp(-cumulative_hazard(theta, spec, assoc, subject, b, t))


def surv_log_density(theta, spec, assoc, subject: Subject, b) -> float:
    """delta * log h(T) - integral of the hazard over [0, T]."""
    out = -cumulative_hazard(theta, spec, assoc, subject, b, subject.event_time)
    if subject.event:
        out += log_hazard(theta, spec, assoc, subject, b, subject.event_time)
    return out


# ---------------------------------------------------------------------------
# Posterior building blocks
# ---------------------------------------------------------------------------

def mvn_logpdf(x, cov) -> float:
    """Multivariate normal log density at x with mean 0."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    factor = cho_factor(cov, lower=True)
    quad = float(x @ cho_solve(factor, x))
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return -0.5 * (x.size * math.log(2.0 * math.pi) + logdet + quad)


def _normal_prior_logpdf(values, variance) -> float:
    values = np.atleast_1d(np.asarray(values, dtype=float))
    if values.size == 0:
        return 0.0
    return float(
        -0.5 * values.size * math.log(2.0 * math.pi * variance)
        - np.sum(values**2) / (2.0 * variance)
    )


def _gamma_logpdf(x, shape, rate) -> float:
    return float(shape * math.log(rate) - gammaln(shape) + (shape - 1.0) * math.log(x) - rate * x)


def _inv_gamma_logpdf(x, shape, rate) -> float:
    return float(shape * math.log(rate) - gammaln(shape) - (shape + 1.0) * math.log(x) - rate / x)


def log_prior(theta: Parameters, spec: JointModelSpec, priors, tau_hdelta: float = 1.0) -> float:
    """log p(theta) under diffuse normal / conjugate priors and the spline penalty."""
    q = theta.n_random
    out = _normal_prior_logpdf(theta.beta, priors.beta_variance)
    out += _normal_prior_logpdf(theta.gamma, priors.gamma_variance)
    out += _normal_prior_logpdf(theta.alpha, priors.alpha_variance)
    if spec.longitudinal.family.has_dispersion:
        out += _inv_gamma_logpdf(theta.phi, priors.phi_shape, priors.phi_rate)
    out += float(invwishart.logpdf(theta.D, q + priors.d_df_extra, np.eye(q)))
    # improper smoothness prior on the baseline coefficients
    K = spec.penalty_K()
    g = theta.gamma_h0
    out += 0.5 * spec.penalty.rank * math.log(theta.tau_h)
    out -= 0.5 * theta.tau_h * float(g @ K @ g)
    out += _gamma_logpdf(theta.tau_h, priors.tau_shape, tau_hdelta)
    out += _gamma_logpdf(tau_hdelta, priors.tau_delta_shape, priors.tau_delta_rate)
    return out


def log_posterior_unnormalized(theta: Parameters, dataset: Dataset, ranef,
                               spec: JointModelSpec, assoc: AssociationForm,
                               priors, tau_hdelta: float = 1.0) -> float:
    """Joint log density of data, random effects, and parameters (up to a constant)."""
    ranef = np.atleast_2d(np.asarray(ranef, dtype=float))
    if ranef.shape != (dataset.n, theta.n_random):
        raise SpecError(
            f"random effects must be {dataset.n} x {theta.n_random}, got {ranef.shape}"
        )
    total = 0.0
    for subject, b in zip(dataset.subjects, ranef):
        for t_l, y_l in zip(subject.times, subject.y):
            eta = linear_predictor(spec.longitudinal, subject, b, theta.beta, t_l)
            total += float(long_log_density(spec.longitudinal.family, y_l, eta, theta.phi))
        total += surv_log_density(theta, spec, assoc, subject, b)
        total += mvn_logpdf(b, theta.D)
    return total + log_prior(theta, spec, priors, tau_hdelta)
