"""Synthetic benchmark generators.

Four scenarios, all seed-deterministic through a dedicated stream:

1. Small multi-study design: 5 patterns with disjoint variable supports,
   a fixed pattern-by-study sharing design, half of the subjects expressing
   each present pattern, 25% structural zeros.
2. Wider design: 50 variables, Dirichlet loading columns, and pattern
   inclusion probabilities driven by a binary and a continuous covariate.
3. Real-data-shaped design: 22 variables, unequal study sizes, three score
   clusters per pattern with covariate-dependent stick-breaking membership,
   and a per-variable structural-zero profile spanning low to very high.
clustering. Scenario 1 or 2 backbone where the first pattern's scores come
   from three Gamma clusters with covariate-dependent membership; true
   labels are recorded for partition recovery benchmarks.

Every generator returns (CountDataset, ScenarioTruth). Counts are Poisson
draws at the true rates with independent structural-zero masking applied on
top, which is exactly the data model the sampler assumes.
"""

from dataclasses import dataclass, field

import numpy as np

from . import distributions as dist
from .model import CountDataset, StudyData, stick_log_weights

# canonical sharing design for scenario 1: two globally shared patterns,
# two partially shared, one study-specific
SCENARIO1_SHARING = np.array([
    [1, 1, 1],
    [1, 1, 1],
    [1, 1, 0],
    [0, 1, 1],
    [0, 0, 1],
], dtype=np.int8)

SCENARIO3_SUBJECTS = (946, 460, 304)
# three score clusters: low / moderate / high intake, Gamma (shape, rate)
SCENARIO3_CLUSTERS = ((1.0, 0.25), (10.0, 2.0), (10.0, 0.2))
CLUSTERING_CLUSTERS = ((1.0, 0.25), (10.0, 1.0), (10.0, 0.2))


@dataclass
class ScenarioTruth:
  """Everything needed to score an estimate against the generator."""

  W_true: np.ndarray            # (P, K) true loadings
  H_true: list                  # per study (K, N_s) true scores
  zero_mask: list               # per study (P, N_s), 1 = structurally zeroed
  sharing: np.ndarray           # (K, S) binary design
  cluster_labels: list          # per study (K, N_s); 0 = not applicable
  covariates: list              # per study (N_s, Q), intercept first
  generator_config: dict = field(default_factory=dict)


def _scaled(n, scale):
  if not 0 < scale <= 1:
    raise ValueError(f"scale must be in (0, 1], got {scale}")
  return max(1, int(round(n * scale)))


def _disjoint_loadings(n_variables, n_patterns):
  """Equal-weight columns on consecutive disjoint supports, columns sum 1."""
  sizes = np.full(n_patterns, n_variables // n_patterns)
  sizes[:n_variables % n_patterns] += 1
  loadings = np.zeros((n_variables, n_patterns))
  start = 0
  for k, size in enumerate(sizes):
    loadings[start:start + size, k] = 1.0 / size
    start += size
  return loadings


def _poisson_counts(loadings, scores, mask, rng):
  rates = loadings @ scores
  counts = rng.generator.poisson(rates).astype(np.int64)
  counts[mask == 1] = 0
  return counts


def _subject_ids(s, n):
  return [f"s{s + 1}_{i:04d}" for i in range(n)]


def _variable_names(n):
  return [f"v{p:02d}" for p in range(n)]


def generate_scenario1(seed, scale=1.0):
  n_studies, n_variables, n_patterns = 3, 20, 5
  n_subjects = [_scaled(100, scale)] * n_studies
  include_prob, score_shape, score_rate, zero_rate = 0.5, 10.0, 0.2, 0.25
  rng = dist.RngStream(seed, dist.SIMULATION_STREAM)
  loadings = _disjoint_loadings(n_variables, n_patterns)

  studies, scores, masks, labels, covariates = [], [], [], [], []
  for s, n in enumerate(n_subjects):
    included = rng.generator.random((n_patterns, n)) < include_prob
    h = dist.sample_gamma(score_shape, score_rate, rng, size=(n_patterns, n))
    h = h * included * SCENARIO1_SHARING[:, s][:, None]
    mask = (rng.generator.random((n_variables, n)) < zero_rate).astype(np.int8)
    counts = _poisson_counts(loadings, h, mask, rng)
    x = np.ones((n, 1))
    studies.append(StudyData(counts=counts, covariates=x,
                             subject_ids=_subject_ids(s, n),
                             covariate_names=["intercept"]))
    scores.append(h)
    masks.append(mask)
    labels.append(np.zeros((n_patterns, n), dtype=np.int64))
    covariates.append(x)

  config = dict(scenario="1", seed=seed, scale=scale, n_studies=n_studies,
                n_variables=n_variables, n_patterns=n_patterns,
                n_subjects=n_subjects, include_prob=include_prob,
                score_shape=score_shape, score_rate=score_rate,
                zero_rate=zero_rate, sharing=SCENARIO1_SHARING.tolist())
  data = CountDataset(studies=studies,
                      variable_names=_variable_names(n_variables))
  truth = ScenarioTruth(W_true=loadings, H_true=scores, zero_mask=masks,
                        sharing=SCENARIO1_SHARING.copy(),
                        cluster_labels=labels, covariates=covariates,
                        generator_config=config)
  return data, truth


def generate_scenario2(seed, scale=1.0):
  n_studies, n_variables, n_patterns = 3, 50, 5
  n_subjects = [_scaled(100, scale)] * n_studies
  score_shape, score_rate, zero_rate = 10.0, 0.2, 0.25
  incl_coefs = np.array([0.0, 1.0, 1.0])   # intercept, binary, continuous
  rng = dist.RngStream(seed, dist.SIMULATION_STREAM)
  concentration = 0.5
  loadings = rng.generator.dirichlet(
      np.full(n_variables, concentration), size=n_patterns).T
  sharing = np.ones((n_patterns, n_studies), dtype=np.int8)

  studies, scores, masks, labels, covariates = [], [], [], [], []
  for s, n in enumerate(n_subjects):
    x_bin = (rng.generator.random(n) < 0.5).astype(float)
    x_cont = rng.generator.standard_normal(n)
    x = np.column_stack([np.ones(n), x_bin, x_cont])
    p_include = dist.standard_normal_cdf(x @ incl_coefs)
    included = rng.generator.random((n_patterns, n)) < p_include[None, :]
    h = dist.sample_gamma(score_shape, score_rate, rng, size=(n_patterns, n))
    h = h * included
    mask = (rng.generator.random((n_variables, n)) < zero_rate).astype(np.int8)
    counts = _poisson_counts(loadings, h, mask, rng)
    studies.append(StudyData(counts=counts, covariates=x,
                             subject_ids=_subject_ids(s, n),
                             covariate_names=["intercept", "x1", "x2"]))
    scores.append(h)
    masks.append(mask)
    labels.append(np.zeros((n_patterns, n), dtype=np.int64))
    covariates.append(x)

  config = dict(scenario="2", seed=seed, scale=scale, n_studies=n_studies,
                n_variables=n_variables, n_patterns=n_patterns,
                n_subjects=n_subjects, concentration=concentration,
                inclusion_coefs=incl_coefs.tolist(), score_shape=score_shape,
                score_rate=score_rate, zero_rate=zero_rate,
                sharing=sharing.tolist())
  data = CountDataset(studies=studies,
                      variable_names=_variable_names(n_variables))
  truth = ScenarioTruth(W_true=loadings, H_true=scores, zero_mask=masks,
                        sharing=sharing, cluster_labels=labels,
                        covariates=covariates, generator_config=config)
  return data, truth


def _stick_membership(coefs, x, rng):
  """Draw 1-based cluster labels from stick-breaking weights.

  coefs: (K, L-1, Q); x: (N, Q). Returns (K, N) labels in 1..L.
  """
  weights = np.exp(stick_log_weights(coefs, x))        # (K, L, N)
  cdf = np.cumsum(weights, axis=1)
  cdf[:, -1, :] = 1.0 + 1e-9
  u = rng.generator.random((weights.shape[0], 1, weights.shape[2]))
  return 1 + (cdf >= u).argmax(axis=1).astype(np.int64)


def generate_scenario3(seed, scale=1.0):
  n_studies, n_variables, n_patterns = 3, 22, 5
  n_subjects = [_scaled(n, scale) for n in SCENARIO3_SUBJECTS]
  cluster_params = np.array(SCENARIO3_CLUSTERS)
  n_levels = len(cluster_params)
  # per-variable structural-zero rates, log-spaced low to very high
  zero_profile = np.geomspace(0.07, 0.95, n_variables)
  rng = dist.RngStream(seed, dist.SIMULATION_STREAM)
  loadings = _disjoint_loadings(n_variables, n_patterns)
  sharing = np.ones((n_patterns, n_studies), dtype=np.int8)

  studies, scores, masks, labels, covariates = [], [], [], [], []
  for s, n in enumerate(n_subjects):
    x = np.column_stack([np.ones(n), rng.generator.standard_normal(n)])
    membership_coefs = rng.generator.standard_normal(
        (n_patterns, n_levels - 1, x.shape[1]))
    d = _stick_membership(membership_coefs, x, rng)
    shape = cluster_params[d - 1, 0]
    rate = cluster_params[d - 1, 1]
    h = dist.sample_gamma(shape, rate, rng)
    mask = (rng.generator.random((n_variables, n))
            < zero_profile[:, None]).astype(np.int8)
    counts = _poisson_counts(loadings, h, mask, rng)
    studies.append(StudyData(counts=counts, covariates=x,
                             subject_ids=_subject_ids(s, n),
                             covariate_names=["intercept", "x1"]))
    scores.append(h)
    masks.append(mask)
    labels.append(d)
    covariates.append(x)

  config = dict(scenario="3", seed=seed, scale=scale, n_studies=n_studies,
                n_variables=n_variables, n_patterns=n_patterns,
                n_subjects=n_subjects,
                cluster_params=cluster_params.tolist(),
                zero_profile=zero_profile.tolist(), sharing=sharing.tolist(),
                membership="probit stick-breaking, coefs ~ N(0, I) per study")
  data = CountDataset(studies=studies,
                      variable_names=_variable_names(n_variables))
  truth = ScenarioTruth(W_true=loadings, H_true=scores, zero_mask=masks,
                        sharing=sharing, cluster_labels=labels,
                        covariates=covariates, generator_config=config)
  return data, truth


def generate_clustering_scenario(seed, base=1, scale=1.0):
  """Scenario 1 or 2 backbone with three score clusters on pattern 1."""
  if base not in (1, 2):
    raise ValueError(f"base must be 1 or 2, got {base}")
  n_studies, n_patterns = 3, 5
  n_variables = 20 if base == 1 else 50
  n_subjects = [_scaled(100, scale)] * n_studies
  cluster_params = np.array(CLUSTERING_CLUSTERS)
  include_prob, score_shape, score_rate, zero_rate = 0.5, 10.0, 0.2, 0.25
  rng = dist.RngStream(seed, dist.SIMULATION_STREAM)

  if base == 1:
    loadings = _disjoint_loadings(n_variables, n_patterns)
    sharing = SCENARIO1_SHARING.copy()
    covariate_names = ["intercept", "x1"]
  else:
    loadings = rng.generator.dirichlet(
        np.full(n_variables, 0.5), size=n_patterns).T
    sharing = np.ones((n_patterns, n_studies), dtype=np.int8)
    covariate_names = ["intercept", "x1", "x2"]

  # fixed membership effects on the last (continuous) covariate, chosen so
  # all three clusters keep substantial mass at standard-normal covariates
  n_cov = len(covariate_names)
  membership_coefs = np.zeros((1, 2, n_cov))
  membership_coefs[0, 0, 0], membership_coefs[0, 0, -1] = -0.3, 1.0
  membership_coefs[0, 1, 0], membership_coefs[0, 1, -1] = 0.2, -1.0

  studies, scores, masks, labels, covariates = [], [], [], [], []
  for s, n in enumerate(n_subjects):
    if base == 1:
      x = np.column_stack([np.ones(n), rng.generator.standard_normal(n)])
    else:
      x_bin = (rng.generator.random(n) < 0.5).astype(float)
      x = np.column_stack([np.ones(n), x_bin,
                           rng.generator.standard_normal(n)])
    d1 = _stick_membership(membership_coefs, x, rng)[0]
    shape = cluster_params[d1 - 1, 0]
    rate = cluster_params[d1 - 1, 1]
    h = np.empty((n_patterns, n))
    h[0] = dist.sample_gamma(shape, rate, rng)
    included = rng.generator.random((n_patterns - 1, n)) < include_prob
    rest = dist.sample_gamma(score_shape, score_rate, rng,
                             size=(n_patterns - 1, n))
    h[1:] = rest * included * sharing[1:, s][:, None]
    mask = (rng.generator.random((n_variables, n)) < zero_rate).astype(np.int8)
    counts = _poisson_counts(loadings, h, mask, rng)
    d = np.zeros((n_patterns, n), dtype=np.int64)
    d[0] = d1
    studies.append(StudyData(counts=counts, covariates=x,
                             subject_ids=_subject_ids(s, n),
                             covariate_names=covariate_names))
    scores.append(h)
    masks.append(mask)
    labels.append(d)
    covariates.append(x)

  config = dict(scenario="clustering", seed=seed, base=base, scale=scale,
                n_studies=n_studies, n_variables=n_variables,
                n_patterns=n_patterns, n_subjects=n_subjects,
                cluster_params=cluster_params.tolist(),
                membership_coefs=membership_coefs.tolist(),
                include_prob=include_prob, score_shape=score_shape,
                score_rate=score_rate, zero_rate=zero_rate,
                sharing=sharing.tolist())
  data = CountDataset(studies=studies,
                      variable_names=_variable_names(n_variables))
  truth = ScenarioTruth(W_true=loadings, H_true=scores, zero_mask=masks,
                        sharing=sharing, cluster_labels=labels,
                        covariates=covariates, generator_config=config)
  return data, truth
