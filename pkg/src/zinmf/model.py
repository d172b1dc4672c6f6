"""Model state, priors and the joint density.

Data model: counts m[p, i] for variable p and subject i in study s follow a
zero-inflated Poisson factorization,

  m ~ pi[p, s] * delta_0 + (1 - pi[p, s]) * Poisson((loadings @ scores_s)[p, i]),

with shared loadings across studies. Each pattern's scores are drawn from a
finite set of Gamma levels: level 1 is a pinned low-mean "spike" (the pattern
is effectively off for that subject) and the remaining levels have
inverse-gamma distributed means. Level membership follows a probit
stick-breaking process driven by subject covariates.

Augmented variables: excess-zero indicators (which zeros are structural),
per-pattern latent count splits (Poisson thinning), and one-sided truncated
normal probit variables that make the coefficient updates conjugate.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, log_ndtr, xlog1py, xlogy

from . import distributions as dist


# ---------------------------------------------------------------------------
# data containers


@dataclass
class StudyData:
  """Counts (variables x subjects) and covariates (subjects x covariates)."""

  counts: np.ndarray
  covariates: np.ndarray
  subject_ids: list
  covariate_names: list

  @property
  def n_subjects(self):
    return self.counts.shape[1]

  @property
  def n_covariates(self):
    return self.covariates.shape[1]


@dataclass
class CountDataset:
  studies: list
  variable_names: list

  @property
  def n_studies(self):
    return len(self.studies)

  @property
  def n_variables(self):
    return len(self.variable_names)


@dataclass
class Violation:
  """One machine-checkable problem, with enough coordinates to locate it."""

  code: str
  study: int | None = None
  detail: str = ""

  def __str__(self):
    where = f" study={self.study}" if self.study is not None else ""
    return f"{self.code}{where}: {self.detail}"


@dataclass
class HyperParameters:
  """Prior settings. Gamma/Poisson rates, inverse-gamma scales.

  beta0 holds the prior mean of the *intercept* coefficient for each
  stick level (non-intercept coefficients have prior mean zero) and tau0 is
  the prior precision of every coefficient.
  """

  alpha_m: float = 1.0
  beta_m: float = 1.0
  alpha_w: float = 1.0
  beta_w: float = 25.0
  c: float = 10.0
  epsilon: float = 0.5
  gamma1_theta: float = 1.5
  gamma2_theta: float = 20.0
  tau0: float = 5.0
  L_star: int = 5
  R: int = 5
  beta0: tuple = None

  def __post_init__(self):
    if self.beta0 is None:
      self.beta0 = (1.5,) + (0.0,) * (self.L_star - 2)
    self.beta0 = tuple(float(b) for b in self.beta0)

  def validate(self):
    for name in ("alpha_m", "beta_m", "alpha_w", "beta_w", "c", "epsilon",
                 "gamma1_theta", "gamma2_theta", "tau0"):
      if not getattr(self, name) > 0:
        raise ValueError(f"{name} must be positive")
    if self.c < 2:
      raise ValueError("c must be at least 2")
    if self.epsilon > 0.5:
      raise ValueError("epsilon must be at most 0.5")
    if self.L_star < 2:
      raise ValueError("L_star must be at least 2")
    if self.R < 1:
      raise ValueError("R must be at least 1")
    if len(self.beta0) != self.L_star - 1:
      raise ValueError("beta0 must have one entry per stick level (L_star - 1)")
    return self

  def level_shapes(self):
    """Gamma shape per score level: 1 for the spike, c elsewhere."""
    return np.concatenate([[1.0], np.full(self.L_star - 1, float(self.c))])

  def coef_prior_mean(self, n_covariates):
    mean = np.zeros((self.L_star - 1, n_covariates))
    mean[:, 0] = self.beta0
    return mean


@dataclass
class LatentState:
  """Complete sampler state. Cluster labels are 1-based (level 1 = spike)."""

  loadings: np.ndarray          # (P, K), positive
  scores: list                  # per study (K, N_s), positive
  excess_zero: list             # per study (P, N_s), 0/1
  latent_counts: list           # per study (P, K, N_s), non-negative ints
  zero_prob: list               # per study (P,)
  cluster: list                 # per study (K, N_s), values in 1..L_star
  cluster_means: np.ndarray     # (K, L_star), column 0 pinned to epsilon
  coefs: list                   # per study (K, L_star - 1, Q_s)
  probit_latent: list           # per study (K, L_star - 1, N_s), NaN = undefined

  @property
  def n_patterns(self):
    return self.loadings.shape[1]

  def copy(self):
    return LatentState(
        loadings=self.loadings.copy(),
        scores=[h.copy() for h in self.scores],
        excess_zero=[a.copy() for a in self.excess_zero],
        latent_counts=[z.copy() for z in self.latent_counts],
        zero_prob=[p.copy() for p in self.zero_prob],
        cluster=[d.copy() for d in self.cluster],
        cluster_means=self.cluster_means.copy(),
        coefs=[b.copy() for b in self.coefs],
        probit_latent=[y.copy() for y in self.probit_latent],
    )


@dataclass
class ChainOutput:
  """Thinned draws plus posterior summaries for one chain."""

  loadings_draws: np.ndarray        # (T, P, K)
  zero_prob_draws: list             # per study (T, P)
  cluster_draws: list               # per study (T, K, N_s) int8
  pattern_score_mean_draws: list    # per study (T, K)
  score_draws: list | None          # per study (T, K, N_s); stored on request
  loadings_median: np.ndarray       # (P, K)
  scores_median: list               # per study (K, N_s)
  zero_prob_median: list            # per study (P,)
  zero_prob_low: list               # per study (P,), 2.5% quantile
  zero_prob_high: list              # per study (P,), 97.5% quantile
  prevalence: np.ndarray            # (K, S)
  meta: dict = field(default_factory=dict)

  @property
  def n_draws(self):
    return self.loadings_draws.shape[0]

  @property
  def n_studies(self):
    return len(self.zero_prob_draws)


# ---------------------------------------------------------------------------
# dataset validation


def validate_dataset(data):
  """Return a list of Violations; empty means the dataset is usable."""
  out = []
  n_var = data.n_variables
  if data.n_studies == 0:
    out.append(Violation("no-studies"))
  for s, study in enumerate(data.studies):
    m, x = study.counts, study.covariates
    if m.ndim != 2:
      out.append(Violation("counts-not-matrix", s, f"ndim={m.ndim}"))
      continue
    if m.shape[0] != n_var:
      out.append(Violation(
          "variable-dimension-mismatch", s,
          f"counts have {m.shape[0]} rows, expected {n_var}"))
    if not np.issubdtype(m.dtype, np.integer):
      if not np.all(np.isfinite(m)) or np.any(m != np.floor(m)):
        out.append(Violation("counts-not-integer", s))
    if np.any(np.asarray(m) < 0):
      p, i = np.argwhere(np.asarray(m) < 0)[0]
      out.append(Violation("negative-count", s, f"at variable {p}, subject {i}"))
    if x.ndim != 2 or x.shape[0] != m.shape[1]:
      out.append(Violation(
          "subject-dimension-mismatch", s,
          f"covariates have {x.shape[0]} rows, counts have {m.shape[1]} subjects"))
      continue
    if not np.all(np.isfinite(x)):
      out.append(Violation("nonfinite-covariate", s))
    elif x.shape[1] == 0 or not np.all(x[:, 0] == 1.0):
      out.append(Violation("missing-intercept", s,
                           "first covariate column must be all ones"))
    if len(study.subject_ids) != m.shape[1]:
      out.append(Violation("subject-id-length-mismatch", s))
    if len(study.covariate_names) != x.shape[1]:
      out.append(Violation("covariate-name-length-mismatch", s))
  return out


# ---------------------------------------------------------------------------
# shared conditional draws (used by initialization and by the sweep kernels)


def split_latent_counts(counts, loadings, scores, excess_zero, rng):
  """Split counts over patterns proportionally to loading*score.

  Cells flagged as excess zeros contribute nothing (their counts are zero by
  construction), so the split runs on counts * (1 - excess_zero).
  """
  weights = loadings[:, :, None] * scores[None, :, :]   # (P, K, N)
  totals = np.asarray(counts, dtype=np.int64) * (1 - excess_zero)
  split = dist.multinomial_split(totals, np.moveaxis(weights, 1, 2), rng)
  return np.moveaxis(split, 2, 1)                        # back to (P, K, N)


def sample_probit_latents(coefs, covariates, cluster, rng):
  """Draw the truncated-normal probit variables consistent with the labels.

  For stick level l (1-based): positive if the label equals l, negative if
  the label exceeds l, undefined (NaN) below it.
  """
  n_patterns, n_levels, _ = coefs.shape
  n_subjects = covariates.shape[0]
  linpred = np.einsum("klq,nq->kln", coefs, covariates)
  out = np.full((n_patterns, n_levels, n_subjects), np.nan)
  for l in range(n_levels):
    level = l + 1
    mean = linpred[:, l, :]
    u = np.maximum(rng.generator.random(mean.shape), np.finfo(float).tiny)
    pos = dist.truncated_normal_positive(mean, u)
    neg = dist.truncated_normal_negative(mean, u)
    lab = cluster
    out[:, l, :] = np.where(lab == level, pos, np.where(lab > level, neg, np.nan))
  return out


def stick_log_weights(coefs, covariates):
  """Log stick-breaking weights per pattern, level and subject: (K, L, N).

  Level l < L gets log Phi(eta_l) + sum_{r<l} log(1 - Phi(eta_r)); the last
  level is the leftover stick. Computed with log_ndtr so extreme linear
  predictors stay finite.
  """
  linpred = np.einsum("klq,nq->kln", coefs, covariates)
  log_go = log_ndtr(linpred)          # enter level l
  log_stay = log_ndtr(-linpred)       # continue past level l
  n_patterns, n_levels, n_subjects = linpred.shape
  prefix = np.concatenate(
      [np.zeros((n_patterns, 1, n_subjects)), np.cumsum(log_stay, axis=1)], axis=1)
  out = np.empty((n_patterns, n_levels + 1, n_subjects))
  out[:, :n_levels, :] = prefix[:, :n_levels, :] + log_go
  out[:, n_levels, :] = prefix[:, n_levels, :]
  return out


# ---------------------------------------------------------------------------
# initialization


def init_state(data, hp, rng, *, pinned_zero_inflation=False,
               pinned_cluster_level=None):
  """Prior-consistent overdispersed start.

  Scores start at the prior predictive scale (Gamma with the prior mean of
  a non-spike level) rather than from their level-conditional prior, so
  chains begin spread out but on the right order of magnitude. The pinned_*
  arguments support the degenerate baseline configuration (no zero
  inflation, a single always-on Gamma level).
  """
  hp.validate()
  n_var, n_patterns, n_levels = data.n_variables, hp.R, hp.L_star

  loadings = dist.sample_gamma(hp.alpha_w, hp.beta_w, rng, size=(n_var, n_patterns))
  cluster_means = np.empty((n_patterns, n_levels))
  cluster_means[:, 0] = hp.epsilon
  cluster_means[:, 1:] = dist.sample_inverse_gamma(
      hp.gamma1_theta, hp.gamma2_theta, rng, size=(n_patterns, n_levels - 1))

  if hp.gamma1_theta > 1.0:
    typical_mean = hp.gamma2_theta / (hp.gamma1_theta - 1.0)
  else:
    typical_mean = hp.gamma2_theta

  scores, excess, latent, zero_prob, cluster, coefs, probit = [], [], [], [], [], [], []
  for study in data.studies:
    n_sub = study.n_subjects
    n_cov = study.n_covariates
    if pinned_zero_inflation:
      pi = np.zeros(n_var)
      a = np.zeros((n_var, n_sub), dtype=np.int8)
    else:
      pi = dist.sample_beta(hp.alpha_m, hp.beta_m, rng, size=n_var)
      u = rng.generator.random((n_var, n_sub))
      a = ((study.counts == 0) & (u < pi[:, None])).astype(np.int8)

    prior_mean = hp.coef_prior_mean(n_cov)
    b = prior_mean[None, :, :] + rng.generator.standard_normal(
        (n_patterns, n_levels - 1, n_cov)) / np.sqrt(hp.tau0)

    if pinned_cluster_level is None:
      d = rng.generator.integers(1, n_levels + 1, size=(n_patterns, n_sub))
    else:
      d = np.full((n_patterns, n_sub), int(pinned_cluster_level))
    y = sample_probit_latents(b, study.covariates, d, rng)

    h = dist.sample_gamma(hp.c, hp.c / typical_mean, rng, size=(n_patterns, n_sub))
    z = split_latent_counts(study.counts, loadings, h, a, rng)

    zero_prob.append(pi)
    excess.append(a)
    coefs.append(b)
    cluster.append(d)
    probit.append(y)
    scores.append(h)
    latent.append(z)

  return LatentState(
      loadings=loadings, scores=scores, excess_zero=excess,
      latent_counts=latent, zero_prob=zero_prob, cluster=cluster,
      cluster_means=cluster_means, coefs=coefs, probit_latent=probit)


# ---------------------------------------------------------------------------
# joint density


def log_joint(data, hp, state, include_probit_latent=True):
  """Log of the augmented joint density at the current state.

  With include_probit_latent=True the stick-breaking part is represented
  through the truncated-normal augmentation (labels are the deterministic
  sign pattern of the probit variables). With False the probit variables
  are integrated out and the labels contribute their stick weights
  directly; that is the version the label kernel is checked against.

  Returns -inf when the state violates a hard constraint of the augmented
  model (count sums, indicator structure, spike pinning, sign pattern).
  """
  if not np.all(state.cluster_means[:, 0] == hp.epsilon):
    return -np.inf
  total = 0.0
  total += dist.log_gamma_pdf(state.loadings, hp.alpha_w, hp.beta_w).sum()
  total += dist.log_inverse_gamma_pdf(
      state.cluster_means[:, 1:], hp.gamma1_theta, hp.gamma2_theta).sum()
  shapes = hp.level_shapes()

  for s, study in enumerate(data.studies):
    pi = state.zero_prob[s]
    a = state.excess_zero[s]
    z = state.latent_counts[s]
    h = state.scores[s]
    d = state.cluster[s]
    b = state.coefs[s]
    m = np.asarray(study.counts, dtype=np.int64)

    # structural constraints of the augmentation
    if np.any(z < 0) or np.any(z.sum(axis=1) != m * (1 - a)):
      return -np.inf
    if np.any(a & (m != 0)):
      return -np.inf

    # zero-inflation prior and indicator likelihood; pinned pi = 0 is the
    # degenerate configuration, where indicators are all off and contribute 0
    if np.all(pi == 0.0):
      if np.any(a != 0):
        return -np.inf
    else:
      total += dist.log_beta_pdf(pi, hp.alpha_m, hp.beta_m).sum()
      total += (xlogy(a, pi[:, None]) + xlog1py(1 - a, -pi[:, None])).sum()

    # Poisson split likelihood on non-structural cells
    rates = state.loadings[:, :, None] * h[None, :, :]
    keep = (1 - a)[:, None, :]
    total += (keep * (xlogy(z, rates) - rates - gammaln(z + 1.0))).sum()

    # scores given level membership
    ck = shapes[d - 1]
    th = np.take_along_axis(state.cluster_means, d - 1, axis=1)
    total += dist.log_gamma_pdf(h, ck, ck / th).sum()

    # coefficient priors
    prior_mean = hp.coef_prior_mean(study.n_covariates)
    total += dist.log_normal_pdf(b, prior_mean[None, :, :], hp.tau0).sum()

    if include_probit_latent:
      y = state.probit_latent[s]
      linpred = np.einsum("klq,nq->kln", b, study.covariates)
      levels = np.arange(1, hp.L_star)[None, :, None]
      lab = d[:, None, :]
      want_pos = lab == levels
      want_neg = lab > levels
      defined = ~np.isnan(y)
      if np.any(defined != (want_pos | want_neg)):
        return -np.inf
      if np.any(want_pos & defined & (y <= 0)):
        return -np.inf
      if np.any(want_neg & defined & (y >= 0)):
        return -np.inf
      total += np.where(defined, dist.log_normal_pdf(y, linpred, 1.0), 0.0).sum()
    else:
      logw = stick_log_weights(b, study.covariates)
      total += np.take_along_axis(logw, (d - 1)[:, None, :], axis=1).sum()

  return float(total)


# ---------------------------------------------------------------------------
# state auditing (debug mode)


def state_audit(data, hp, state, pinned_zero_inflation=False):
  """Check every structural invariant of the state; return Violations."""
  out = []
  n_levels = hp.L_star
  if not np.all(state.loadings > 0) or not np.all(np.isfinite(state.loadings)):
    out.append(Violation("loadings-not-positive"))
  if not np.all(state.cluster_means[:, 0] == hp.epsilon):
    out.append(Violation("spike-mean-not-pinned"))
  if not np.all(state.cluster_means > 0):
    out.append(Violation("cluster-means-not-positive"))

  for s, study in enumerate(data.studies):
    m = np.asarray(study.counts, dtype=np.int64)
    a = state.excess_zero[s]
    z = state.latent_counts[s]
    h = state.scores[s]
    d = state.cluster[s]
    pi = state.zero_prob[s]
    y = state.probit_latent[s]

    if not np.all(np.isfinite(h)) or not np.all(h > 0):
      out.append(Violation("scores-not-positive", s))
    if pinned_zero_inflation:
      if np.any(pi != 0) or np.any(a != 0):
        out.append(Violation("zero-inflation-not-pinned", s))
    elif np.any(pi <= 0) or np.any(pi >= 1):
      out.append(Violation("zero-probability-out-of-range", s))
    if not np.all((a == 0) | (a == 1)):
      out.append(Violation("indicator-not-binary", s))
    if np.any(a & (m != 0)):
      out.append(Violation("indicator-on-nonzero-count", s))
    if np.any(z < 0):
      out.append(Violation("negative-latent-count", s))
    if np.any(z.sum(axis=1) != m * (1 - a)):
      out.append(Violation("count-sum-mismatch", s))
    if np.any((d < 1) | (d > n_levels)):
      out.append(Violation("cluster-label-out-of-range", s))

    levels = np.arange(1, n_levels)[None, :, None]
    lab = d[:, None, :]
    defined = ~np.isnan(y)
    if np.any(defined != (lab >= levels)):
      out.append(Violation("probit-defined-mismatch", s))
    else:
      if np.any(defined & (lab == levels) & ~(y > 0)):
        out.append(Violation("probit-sign-mismatch", s, "expected positive"))
      if np.any(defined & (lab > levels) & ~(y < 0)):
        out.append(Violation("probit-sign-mismatch", s, "expected negative"))

    weights = np.exp(stick_log_weights(state.coefs[s], study.covariates))
    if np.max(np.abs(weights.sum(axis=1) - 1.0)) > 1e-12:
      out.append(Violation("stick-weights-not-simplex", s))
  return out
