"""Shared builders for small synthetic datasets used across the test suite."""

import numpy as np

from zinmf import distributions as dist
from zinmf import model


def make_dataset(seed=0, n_studies=2, n_variables=6, subjects=(8, 5), mean=2.0):
  """Small valid dataset with Poisson counts and one standardized covariate."""
  rng = np.random.default_rng(seed)
  studies = []
  for s in range(n_studies):
    n = subjects[s]
    counts = rng.poisson(mean, size=(n_variables, n))
    covariates = np.column_stack([np.ones(n), rng.normal(size=n)])
    studies.append(model.StudyData(
        counts=counts,
        covariates=covariates,
        subject_ids=[f"s{s + 1}_{i:03d}" for i in range(n)],
        covariate_names=["intercept", "x1"],
    ))
  return model.CountDataset(
      studies=studies,
      variable_names=[f"v{p:02d}" for p in range(n_variables)],
  )


def small_hyper(**overrides):
  base = dict(alpha_m=1.0, beta_m=1.0, alpha_w=2.0, beta_w=2.0, c=3.0,
              epsilon=0.4, gamma1_theta=6.0, gamma2_theta=10.0,
              tau0=2.0, L_star=3, R=2, beta0=(0.8, 0.0))
  base.update(overrides)
  return model.HyperParameters(**base)


def seeded_state(data, hp, seed=1, **kwargs):
  rng = dist.RngStream(seed, dist.CHECK_STREAM)
  return model.init_state(data, hp, rng, **kwargs), rng
