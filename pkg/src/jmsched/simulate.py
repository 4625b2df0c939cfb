"""Synthetic datasets from a fully specified joint model.

Event times come from the same inversion sampler used for prediction, so a
simulated cohort follows the model exactly and parameter-recovery and
scheduling tests have a ground truth to compare against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as md
from .dynpred import simulate_event_time, simulate_future_measurement
from .errors import ConfigError, DataError

COVARIATE_KINDS = ("bernoulli", "normal", "uniform", "constant")


@dataclass(frozen=True)
class SimulationDesign:
    """Everything needed to draw a cohort: truth, visit plan, censoring."""

    n_subjects: int
    parameters: md.Parameters
    spec: md.JointModelSpec
    assoc: md.AssociationForm
    visit_times: tuple
    seed: int
    visit_jitter: float = 0.1
    censor_admin: float = None        # administrative censoring time, None = never
    censor_rate: float = None         # independent exponential censoring rate
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be >= 1")
        if not self.visit_times:
            raise ConfigError("the visit schedule is empty")
        if self.censor_admin is not None and not self.censor_admin > 0:
            raise ConfigError("administrative censoring time must be positive")
        if self.censor_rate is not None and not self.censor_rate > 0:
            raise ConfigError("censoring rate must be positive")
        if self.visit_jitter < 0:
            raise ConfigError("visit jitter must be nonnegative")
        for name, kind in self.covariates.items():
            if kind[0] not in COVARIATE_KINDS:
                raise ConfigError(
                    f"covariate {name!r} has unknown kind {kind[0]!r}; "
                    f"valid: {', '.join(COVARIATE_KINDS)}")
        object.__setattr__(self, "visit_times", tuple(float(v) for v in self.visit_times))


def _draw_covariates(design: SimulationDesign, rng) -> dict:
    out = {}
    for name, kind in design.covariates.items():
        tag = kind[0]
        if tag == "bernoulli":
            out[name] = float(rng.random() < kind[1])
        elif tag == "normal":
            out[name] = float(kind[1] + kind[2] * rng.standard_normal())
        elif tag == "uniform":
            out[name] = float(rng.uniform(kind[1], kind[2]))
        else:
            out[name] = float(kind[1])
    return out


def generate_dataset(design: SimulationDesign) -> md.Dataset:
    """Draw the cohort; per-subject RNG substreams keep generation order-free."""
    theta = design.parameters
    chol = np.linalg.cholesky(theta.D)
    subjects = []
    for i in range(design.n_subjects):
        rng = np.random.default_rng([design.seed, i])
        covs = _draw_covariates(design, rng)
        b = chol @ rng.standard_normal(theta.n_random)
        cap = 100.0 * max(design.censor_admin or 0.0, max(design.visit_times), 5.0)
        t_star, _ = simulate_event_time(theta, design.spec, design.assoc, covs, b,
                                        0.0, rng, cap=cap)
        censor = np.inf
        if design.censor_admin is not None:
            censor = design.censor_admin
        if design.censor_rate is not None:
            censor = min(censor, rng.exponential(1.0 / design.censor_rate))
        observed = min(t_star, censor)
        event = int(t_star <= censor)

        visits = np.array(design.visit_times, dtype=float)
        if design.visit_jitter > 0:
            visits = visits + rng.uniform(-design.visit_jitter, design.visit_jitter,
                                          size=visits.size)
        visits = np.unique(np.clip(visits, 0.0, None))
        visits = visits[visits <= observed]
        holder = md.SubjectHistory(covs, np.empty(0), np.empty(0), t=0.0)
        values = np.array([
            simulate_future_measurement(design.spec, holder, b, theta, float(v), rng)
            for v in visits
        ])
        subjects.append(md.Subject(
            id=f"s{i:04d}", times=visits, y=values,
            event_time=float(observed), event=event, covariates=covs,
        ))
    return md.Dataset(tuple(subjects))


# ---------------------------------------------------------------------------
# Truth manifest
# ---------------------------------------------------------------------------

def _truth_items(theta: md.Parameters):
    for i, v in enumerate(theta.beta):
        yield f"beta[{i}]", v
    for i, v in enumerate(theta.gamma):
        yield f"gamma[{i}]", v
    for i, v in enumerate(theta.alpha):
        yield f"alpha[{i}]", v
    for i, v in enumerate(theta.gamma_h0):
        yield f"gamma_h0[{i}]", v
    yield "sigma2", theta.phi
    q = theta.n_random
    for i in range(q):
        for j in range(i + 1):
            yield f"D[{i},{j}]", theta.D[i, j]
    yield "tau_h", theta.tau_h


def truth_report(design: SimulationDesign) -> str:
    """Flat key=value manifest of every scalar in the true parameter vector."""
    lines = [f"{name}={float(value)!r}" for name, value in _truth_items(design.parameters)]
    return "\n".join(lines) + "\n"


def parse_truth(text: str) -> dict:
    out = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"truth manifest line {ln} is not key=value: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = float(value)
    return out


def parameters_from_truth(values: dict, spec: md.JointModelSpec) -> md.Parameters:
    """Rebuild a Parameters object from a parsed truth manifest."""
    def block(prefix):
        out = []
        k = 0
        while f"{prefix}[{k}]" in values:
            out.append(values[f"{prefix}[{k}]"])
            k += 1
        return np.array(out)

    q = 0
    while f"D[{q},{q}]" in values:
        q += 1
    D = np.zeros((q, q))
    for i in range(q):
        for j in range(i + 1):
            D[i, j] = D[j, i] = values[f"D[{i},{j}]"]
    return md.Parameters(
        beta=block("beta"), phi=values.get("sigma2", 1.0), D=D,
        gamma=block("gamma"), alpha=block("alpha"),
        baseline=spec.make_baseline(block("gamma_h0"), values.get("tau_h", 1.0)),
    )
