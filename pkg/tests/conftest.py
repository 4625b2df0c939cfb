import numpy as np
import pytest

from jmsched.mcmc import McmcConfig, PriorSet, fit
from jmsched.model import (
    GAUSSIAN,
    AssociationForm,
    JointModelSpec,
    LinearTime,
    LongitudinalSpec,
    Parameters,
)
from jmsched.numerics import BSplineBasis
from jmsched.simulate import SimulationDesign, generate_dataset


def gaussian_joint_model(interior=(2.0, 5.0, 8.0), upper=12.0):
    lspec = LongitudinalSpec(family=GAUSSIAN, time_effect=LinearTime(), covariates=())
    basis = BSplineBasis(degree=3, interior_knots=interior, boundary_knots=(0.0, upper))
    spec = JointModelSpec(longitudinal=lspec, baseline_basis=basis,
                          hazard_covariates=("w",))
    return spec, AssociationForm("current_value")


def true_parameters(spec, lam=0.07, alpha=0.25, gamma=0.5):
    gh = np.zeros(spec.n_baseline)
    gh[0] = np.log(lam)
    return Parameters(
        beta=np.array([3.6, 0.25]), phi=0.25, D=np.diag([0.35, 0.02]),
        gamma=np.array([gamma]), alpha=np.array([alpha]),
        baseline=spec.make_baseline(gh, 1.0),
    )


@pytest.fixture(scope="session")
def small_joint():
    """One simulated cohort with a short (but converged enough) fit,
    shared by the prediction and scheduling tests."""
    spec, assoc = gaussian_joint_model()
    theta = true_parameters(spec)
    design = SimulationDesign(
        n_subjects=80, parameters=theta, spec=spec, assoc=assoc,
        visit_times=(0.0, 0.5, 1.0, 2.0, 4.0, 6.0, 8.0), seed=20,
        censor_admin=10.0, covariates={"w": ("bernoulli", 0.5)},
    )
    dataset = generate_dataset(design)
    config = McmcConfig(seed=77, chains=2, iterations=1500, burn_in=600, thin=1)
    samples = fit(dataset, spec, assoc, PriorSet(), config)
    return {
        "spec": spec, "assoc": assoc, "theta": theta, "design": design,
        "dataset": dataset, "samples": samples, "config": config,
    }
