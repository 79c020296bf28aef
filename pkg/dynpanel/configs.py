#! /usr/bin/env python3
"""Configuration models for simulation and Monte Carlo experiments."""

from typing import Annotated, Literal, Optional

from conflator import ConfigModel, EnvVar
from pydantic import Field, field_validator, model_validator

EstimatorName = Literal["ols", "within", "ah-diff", "ah-level", "ab1", "ab2"]
TestName = Literal["sargan", "ar1", "ar2"]


class XProcessConfig(ConfigModel):
    """Law of the exogenous regressors: independent stationary AR(1) per column."""

    rho: Annotated[
        float,
        Field(description="AR(1) coefficient of each exogenous regressor", gt=-1.0, lt=1.0),
    ] = 0.5

    sigma: Annotated[
        float,
        Field(description="Innovation standard deviation of each exogenous regressor", ge=0.0),
    ] = 1.0


class DGPConfig(ConfigModel):
    """Dynamic panel data-generating process ``y_it = alpha y_it-1 + x_it'beta + mu_i + v_it``."""

    n_entities: Annotated[
        int,
        Field(description="Number of entities N", ge=1),
        EnvVar("N_ENTITIES"),
    ] = 100

    n_periods: Annotated[
        int,
        Field(description="Number of periods T after the initial observation", ge=2),
        EnvVar("N_PERIODS"),
    ] = 5

    alpha: Annotated[
        float,
        Field(description="Autoregressive coefficient, |alpha| < 1", gt=-1.0, lt=1.0),
        EnvVar("ALPHA"),
    ] = 0.5

    beta: Annotated[
        list[float],
        Field(description="Coefficients of the exogenous regressors x1, x2, ..."),
    ] = []

    sigma_mu: Annotated[
        float,
        Field(description="Standard deviation of the entity effect", ge=0.0),
        EnvVar("SIGMA_MU"),
    ] = 1.0

    sigma_v: Annotated[
        float,
        Field(description="Standard deviation of the idiosyncratic error", ge=0.0),
        EnvVar("SIGMA_V"),
    ] = 1.0

    init: Annotated[
        Literal["stationary", "fixed_zero", "custom"],
        Field(description="Initial condition of y_i0"),
    ] = "stationary"

    cov0: Annotated[
        Optional[float],
        Field(description="cov(y_i0, mu_i) for the custom initial condition"),
    ] = None

    x_process: XProcessConfig = XProcessConfig()

    error_law: Annotated[
        Literal["gaussian", "student_t"],
        Field(description="Law of v_it; student_t is rescaled to unit variance"),
    ] = "gaussian"

    t_df: Annotated[
        float,
        Field(description="Degrees of freedom of the student_t error law", gt=2.0),
    ] = 5.0

    burn_in: Annotated[
        int,
        Field(description="Discarded periods before y_i0 when exogenous regressors are present", ge=0),
    ] = 50

    seed: Annotated[
        int,
        Field(description="Root seed of the simulation"),
        EnvVar("SEED"),
    ] = 0

    @model_validator(mode="after")
    def _check_custom_init(self) -> "DGPConfig":
        if self.init == "custom":
            if self.cov0 is None:
                raise ValueError("init 'custom' requires cov0")
            if self.sigma_mu == 0.0 and self.cov0 != 0.0:
                raise ValueError("cov0 must be 0 when sigma_mu is 0")
        return self


class ExperimentConfig(DGPConfig):
    """Monte Carlo experiment: a DGP plus the estimators and tests to evaluate."""

    replications: Annotated[
        int,
        Field(description="Number of Monte Carlo replications"),
        EnvVar("REPLICATIONS"),
    ] = 100

    estimators: Annotated[
        list[EstimatorName],
        Field(description="Estimators evaluated in every replication"),
    ] = ["ols", "within"]

    tests: Annotated[
        list[TestName],
        Field(description="Specification tests whose rejection rates are reported"),
    ] = []

    test_estimator: Annotated[
        Literal["ab1", "ab2"],
        Field(description="GMM fit the specification tests are computed on"),
    ] = "ab2"

    workers: Annotated[
        int,
        Field(description="Worker processes; results do not depend on it", ge=1),
        EnvVar("WORKERS"),
    ] = 1

    @field_validator("replications")
    @classmethod
    def _check_replications(cls, value: int) -> int:
        if value < 2:
            raise ValueError(f"replications ≥ 2 required, got {value}")
        return value

    @field_validator("estimators")
    @classmethod
    def _check_estimators(cls, value: list[str]) -> list[str]:
        if len(set(value)) != len(value):
            raise ValueError("estimators must not repeat")
        return value
