"""Gibbs kernels and the chain driver.

The sweep order is fixed: latent count splits, excess-zero indicators, zero
probabilities, loadings, cluster labels, probit variables, coefficients,
cluster means, scores. The label kernel marginalizes the probit variables
and the probit draw immediately follows, so the pair is one joint draw of
(labels, probit) from their exact conditional; nothing reads the probit
variables in between.

Every kernel is split into a pure "params" function returning the
conditional's parameters and a thin sampling wrapper. The params functions
are what the conjugacy oracle evaluates against the joint density, so the
exact formulas the sampler draws from are the ones being verified.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, xlogy

from . import distributions as dist
from . import model
from . import stickprocess

SWEEP_BLOCKS = (
    "latent_counts", "excess_zero", "zero_prob", "loadings",
    "cluster", "probit", "coefs", "cluster_means", "scores",
)


@dataclass
class SweepPlan:
  """Which blocks a sweep runs, plus pinned values for disabled machinery."""

  enabled: dict = field(default_factory=lambda: dict.fromkeys(SWEEP_BLOCKS, True))
  pinned_zero_inflation: bool = False
  pinned_cluster_level: int | None = None

  def __post_init__(self):
    unknown = set(self.enabled) - set(SWEEP_BLOCKS)
    if unknown:
      raise ValueError(f"unknown sweep blocks: {sorted(unknown)}")
    for name in SWEEP_BLOCKS:
      self.enabled.setdefault(name, True)

  @classmethod
  def none(cls):
    return cls(enabled=dict.fromkeys(SWEEP_BLOCKS, False))

  @classmethod
  def degenerate(cls):
    """Plain Poisson-Gamma factorization: no zero inflation, one active
    Gamma score level (level 2, whose mean is still learned conjugately)."""
    enabled = dict.fromkeys(SWEEP_BLOCKS, True)
    for name in ("excess_zero", "zero_prob", "cluster", "probit", "coefs"):
      enabled[name] = False
    return cls(enabled=enabled, pinned_zero_inflation=True,
               pinned_cluster_level=2)


@dataclass
class RunConfig:
  iterations: int
  burn_in: int
  thin: int = 1
  seed: int = 0
  chain_id: int = 0
  store_scores: bool = False
  prune: bool = False
  audit_every: int = 0
  warm_start: bool = True

  def validate(self):
    if self.iterations < 0 or self.burn_in < 0:
      raise ValueError("iterations and burn_in must be non-negative")
    if self.thin < 1:
      raise ValueError("thin must be at least 1")
    return self

  def stored_sweeps(self):
    """1-based sweep indices kept after burn-in and thinning."""
    return [t for t in range(1, self.iterations + 1)
            if t > self.burn_in and (t - self.burn_in) % self.thin == 0]


class _PruneTracker:
  """Freezes a pattern at the spike after sustained full spike occupancy."""

  def __init__(self, n_patterns, occupancy=0.99, patience=200):
    self.occupancy = occupancy
    self.patience = patience
    self.run_lengths = np.zeros(n_patterns, dtype=int)
    self.frozen = np.zeros(n_patterns, dtype=bool)

  def observe(self, state):
    spike = np.concatenate([d == 1 for d in state.cluster], axis=1)
    frac = spike.mean(axis=1)
    above = frac > self.occupancy
    self.run_lengths = np.where(above, self.run_lengths + 1, 0)
    newly = (~self.frozen) & (self.run_lengths >= self.patience)
    if np.any(newly):
      self.frozen |= newly
      for d in state.cluster:
        d[newly, :] = 1
    return newly


# ---------------------------------------------------------------------------
# kernel 1: latent count splits


def latent_count_weights(state, s):
  """Per-cell split weights over patterns, (P, K, N)."""
  return state.loadings[:, :, None] * state.scores[s][None, :, :]


def update_latent_counts(state, data, rng):
  for s, study in enumerate(data.studies):
    state.latent_counts[s] = model.split_latent_counts(
        study.counts, state.loadings, state.scores[s], state.excess_zero[s], rng)


# ---------------------------------------------------------------------------
# kernel 2: excess-zero indicators


def excess_zero_log_odds(state, data, s):
  """log P(a=1) - log P(a=0) at zero-count cells, (P, N)."""
  lam = latent_count_weights(state, s).sum(axis=1)
  pi = state.zero_prob[s][:, None]
  return np.log(pi) - np.log1p(-pi) + lam


def update_excess_zero(state, data, rng):
  for s, study in enumerate(data.studies):
    p_on = expit(excess_zero_log_odds(state, data, s))
    u = rng.generator.random(p_on.shape)
    # only true zero cells can carry an excess-zero flag; their count splits
    # are all zero already, so no cleanup of latent counts is needed
    state.excess_zero[s] = ((study.counts == 0) & (u < p_on)).astype(np.int8)


# ---------------------------------------------------------------------------
# kernel 3: zero probabilities


def zero_prob_params(state, data, hp, s):
  a = state.excess_zero[s]
  flagged = a.sum(axis=1)
  return hp.alpha_m + flagged, hp.beta_m + a.shape[1] - flagged


def update_zero_prob(state, data, hp, rng):
  for s in range(data.n_studies):
    a_post, b_post = zero_prob_params(state, data, hp, s)
    state.zero_prob[s] = dist.sample_beta(a_post, b_post, rng)


# ---------------------------------------------------------------------------
# kernel 4: loadings


def loading_params(state, data, hp):
  shape = np.full(state.loadings.shape, hp.alpha_w)
  rate = np.full(state.loadings.shape, hp.beta_w)
  for s in range(data.n_studies):
    shape += state.latent_counts[s].sum(axis=2)
    rate += (1 - state.excess_zero[s]) @ state.scores[s].T
  return shape, rate


def update_loadings(state, data, hp, rng):
  shape, rate = loading_params(state, data, hp)
  state.loadings = dist.sample_gamma(shape, rate, rng)


# ---------------------------------------------------------------------------
# kernel 5: cluster labels (probit variables marginalized out)


def compute_stick_weights(coefs, covariates):
  """Level weights (K, L, N) from coefficients (K, L-1, Q) and covariates (N, Q).

  Rows over the level axis sum to one: the last level takes the leftover
  stick mass.
  """
  return np.exp(model.stick_log_weights(coefs, covariates))


def cluster_log_probs(state, data, hp, s):
  """Unnormalized log conditional over levels, (K, L, N)."""
  logw = model.stick_log_weights(state.coefs[s], data.studies[s].covariates)
  shapes = hp.level_shapes()
  rates = shapes[None, :] / state.cluster_means        # (K, L)
  h = state.scores[s]
  loglik = dist.log_gamma_pdf(
      h[:, None, :], shapes[None, :, None], rates[:, :, None])
  return logw + loglik


def update_cluster(state, data, hp, rng, frozen=None):
  for s in range(data.n_studies):
    logp = cluster_log_probs(state, data, hp, s)
    logp -= logp.max(axis=1, keepdims=True)
    prob = np.exp(logp)
    prob /= prob.sum(axis=1, keepdims=True)
    cdf = np.cumsum(prob, axis=1)
    cdf[:, -1, :] = 1.0 + 1e-9
    u = rng.generator.random((prob.shape[0], 1, prob.shape[2]))
    labels = 1 + np.argmax(cdf >= u, axis=1)
    if frozen is not None and np.any(frozen):
      labels[frozen, :] = 1
    state.cluster[s] = labels.astype(np.int64)


# ---------------------------------------------------------------------------
# kernel 6: probit variables


def probit_means(state, data, s):
  return np.einsum("klq,nq->kln", state.coefs[s], data.studies[s].covariates)


def update_probit(state, data, rng):
  for s, study in enumerate(data.studies):
    state.probit_latent[s] = model.sample_probit_latents(
        state.coefs[s], study.covariates, state.cluster[s], rng)


# ---------------------------------------------------------------------------
# kernel 7: coefficients


def coef_params(state, data, hp, s, k, level_index):
  """Posterior mean and precision of one coefficient vector.

  Conditions on subjects at the level or beyond it, i.e. exactly those whose
  probit variable for this level is defined.
  """
  study = data.studies[s]
  sel = state.cluster[s][k] >= level_index + 1
  x = study.covariates[sel]
  y = state.probit_latent[s][k, level_index, sel]
  prior_mean = hp.coef_prior_mean(study.n_covariates)[level_index]
  precision = hp.tau0 * np.eye(study.n_covariates) + x.T @ x
  mean = np.linalg.solve(precision, hp.tau0 * prior_mean + x.T @ y)
  return mean, precision


def update_coefs(state, data, hp, rng):
  for s in range(data.n_studies):
    b = state.coefs[s]
    for k in range(state.n_patterns):
      for l in range(b.shape[1]):
        mean, precision = coef_params(state, data, hp, s, k, l)
        upper = np.linalg.cholesky(precision).T
        noise = rng.generator.standard_normal(mean.shape[0])
        b[k, l] = mean + solve_triangular(upper, noise, lower=False)


# ---------------------------------------------------------------------------
# kernel 8: cluster means


def cluster_mean_params(state, hp):
  """Inverse-gamma (shape, scale) for each non-spike level, (K, L-1) each."""
  n_patterns, n_levels = state.cluster_means.shape
  members = np.zeros((n_patterns, n_levels - 1))
  score_sum = np.zeros((n_patterns, n_levels - 1))
  for s in range(len(state.cluster)):
    d = state.cluster[s]
    h = state.scores[s]
    for l in range(1, n_levels):
      hit = d == (l + 1)
      members[:, l - 1] += hit.sum(axis=1)
      score_sum[:, l - 1] += (h * hit).sum(axis=1)
  shape = hp.gamma1_theta + hp.c * members
  scale = hp.gamma2_theta + hp.c * score_sum
  return shape, scale


def update_cluster_means(state, hp, rng):
  shape, scale = cluster_mean_params(state, hp)
  state.cluster_means[:, 1:] = dist.sample_inverse_gamma(shape, scale, rng)


# ---------------------------------------------------------------------------
# kernel 9: scores


def score_params(state, data, hp, s):
  """Gamma (shape, rate) for every score in study s, (K, N) each."""
  shapes = hp.level_shapes()
  d = state.cluster[s]
  ck = shapes[d - 1]
  th = np.take_along_axis(state.cluster_means, d - 1, axis=1)
  keep = 1 - state.excess_zero[s]
  shape = ck + np.einsum("pkn,pn->kn", state.latent_counts[s], keep)
  rate = ck / th + state.loadings.T @ keep
  return shape, rate


def update_scores(state, data, hp, rng):
  for s in range(data.n_studies):
    shape, rate = score_params(state, data, hp, s)
    state.scores[s] = dist.sample_gamma(shape, rate, rng)


# ---------------------------------------------------------------------------
# sweep and chain driver


def gibbs_sweep(state, data, hp, rng, plan=None, prune_tracker=None):
  """One systematic scan over all enabled blocks, mutating state in place."""
  plan = plan or SweepPlan()
  on = plan.enabled
  if on["latent_counts"]:
    update_latent_counts(state, data, rng)
  if on["excess_zero"]:
    update_excess_zero(state, data, rng)
  if on["zero_prob"]:
    update_zero_prob(state, data, hp, rng)
  if on["loadings"]:
    update_loadings(state, data, hp, rng)
  if on["cluster"]:
    frozen = prune_tracker.frozen if prune_tracker is not None else None
    update_cluster(state, data, hp, rng, frozen=frozen)
    if prune_tracker is not None:
      prune_tracker.observe(state)
  if on["probit"]:
    update_probit(state, data, rng)
  if on["coefs"]:
    update_coefs(state, data, hp, rng)
  if on["cluster_means"]:
    update_cluster_means(state, hp, rng)
  if on["scores"]:
    update_scores(state, data, hp, rng)
  return state


def active_pattern_count(state, threshold=0.05):
  """Patterns with at least `threshold` of pooled subjects off the spike."""
  off = np.concatenate([d > 1 for d in state.cluster], axis=1)
  return int((off.mean(axis=1) >= threshold).sum())


def _multiplicative_fit(counts, rank, gen, iterations, restarts, floor=1e-12):
  """Best-of-`restarts` KL multiplicative-update fit at a fixed rank."""
  best = None
  for _ in range(max(1, restarts)):
    loadings = gen.random((counts.shape[0], rank)) + 0.1
    scores = gen.random((rank, counts.shape[1])) + 0.1
    for _ in range(iterations):
      ratio = counts / np.maximum(loadings @ scores, floor)
      loadings *= (ratio @ scores.T) / np.maximum(
          scores.sum(axis=1)[None, :], floor)
      ratio = counts / np.maximum(loadings @ scores, floor)
      scores *= (loadings.T @ ratio) / np.maximum(
          loadings.sum(axis=0)[:, None], floor)
    fitted = np.maximum(loadings @ scores, floor)
    divergence = float(np.sum(xlogy(counts, counts / fitted) - counts
                              + fitted))
    if best is None or divergence < best[0]:
      best = (divergence, loadings, scores)
  return best


def pilot_factorization(counts, max_patterns, rng, iterations=200, restarts=4):
  """Crude multiplicative-update factorization with rank selection.

  Used only to pick the chain's starting point: a prior draw starts the
  chain in a diffuse regime where the zero-inflation indicators absorb the
  misfit and single-site moves take very long to separate the patterns.
  Multiplicative updates have local minima of their own, so a few restarts
  are run per rank and the lowest-divergence fit kept.

  Ranks 1..max_patterns are swept and the kept rank is the largest one
  whose marginal divergence gain still clears the BIC cost of the extra
  component, (P + N - 2r + 1) / 2 * log(P * N). Excess zeros make counts
  overdispersed, so spurious components earn far more than the AIC-style
  (P + N) / 2; the log factor keeps them out while true components, whose
  gains grow with the data, still clear it at these sizes. Erring low is
  fine: leftover structure pulls a spare pattern out of the spike early in
  the run, while a junk component started active never collapses back.
  Returns (loadings, scores) at the selected rank, loading columns summing
  to 1.
  """
  counts = np.asarray(counts, dtype=float)
  gen = rng.generator
  floor = 1e-12
  n_rows, n_cols = counts.shape
  log_cells = np.log(n_rows * n_cols)
  fits = [_multiplicative_fit(counts, rank, gen, iterations, restarts)
          for rank in range(1, max_patterns + 1)]
  kept = 1
  for rank in range(2, max_patterns + 1):
    threshold = 0.5 * (n_rows + n_cols - 2 * rank + 1) * log_cells
    if fits[rank - 2][0] - fits[rank - 1][0] >= threshold:
      kept = rank
  _, loadings, scores = fits[kept - 1]
  colsums = np.maximum(loadings.sum(axis=0), floor)
  # all-zero variables underflow to exactly 0; keep the state audit happy
  return (np.maximum(loadings / colsums, 1e-10),
          np.maximum(scores * colsums[:, None], 1e-8))


def warm_start_state(state, data, hp, rng, plan):
  """Move a freshly initialized state to a data-informed starting point.

  Loadings and scores for the pilot's selected rank come from the pilot
  factorization of the pooled counts; those slots start with every subject
  off the spike (level 2) so the first sweeps sort subjects between spike
  and active levels. Slots beyond the selected rank start empty: spiked,
  with essentially zero loadings, so they win no count splits and stay
  quiet unless leftover structure slowly recruits them. Prior-sized spare
  loadings are a poor start: they compete for counts from sweep one and
  consolidate residual noise into persistently active junk patterns.
  Count splits are redrawn to match; excess-zero indicators and all pinned
  blocks are left alone.
  """
  pooled = np.concatenate([st.counts for st in data.studies], axis=1)
  loadings, scores = pilot_factorization(pooled, hp.R, rng)
  kept = loadings.shape[1]
  state.loadings[:, :kept] = loadings
  if kept < hp.R:
    state.loadings[:, kept:] = 1e-8
  offset = 0
  for s, study in enumerate(data.studies):
    n = study.n_subjects
    state.scores[s][:kept] = scores[:, offset:offset + n]
    if kept < hp.R:
      state.scores[s][kept:] = dist.sample_gamma(
          1.0, 1.0 / hp.epsilon, rng, size=(hp.R - kept, n))
    offset += n
    if plan.pinned_cluster_level is None:
      state.cluster[s][:kept] = 2
      state.cluster[s][kept:] = 1
      state.probit_latent[s] = model.sample_probit_latents(
          state.coefs[s], study.covariates, state.cluster[s], rng)
    state.latent_counts[s] = model.split_latent_counts(
        study.counts, state.loadings, state.scores[s],
        state.excess_zero[s], rng)
  return state


def config_digest(data, hp, run):
  payload = {
      "hyper": {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in vars(hp).items()},
      "run": {k: v for k, v in vars(run).items()},
      "shape": [list(study.counts.shape) for study in data.studies],
  }
  text = json.dumps(payload, sort_keys=True)
  return hashlib.sha256(text.encode()).hexdigest()[:16]


def run_chain(data, hp, run, progress_sink=None, plan=None):
  """Run one chain and return its thinned draws and summaries.

  Deterministic given (data, hp, run): the stream key is derived from the
  seed and chain id only. progress_sink, when given, is called once per
  sweep with (sweep_index, diagnostics dict).
  """
  hp.validate()
  run.validate()
  problems = model.validate_dataset(data)
  if problems:
    raise ValueError("invalid dataset: " + "; ".join(str(v) for v in problems))
  plan = plan or SweepPlan()
  started = time.time()
  rng = dist.RngStream(run.seed, dist.CHAIN_STREAM + run.chain_id)
  state = model.init_state(
      data, hp, rng,
      pinned_zero_inflation=plan.pinned_zero_inflation,
      pinned_cluster_level=plan.pinned_cluster_level)
  if run.warm_start:
    warm_start_state(state, data, hp, rng, plan)
  tracker = _PruneTracker(hp.R) if run.prune else None

  keep = set(run.stored_sweeps())
  kept_loadings, kept_pi, kept_cluster, kept_scores = [], [], [], []
  for t in range(1, run.iterations + 1):
    gibbs_sweep(state, data, hp, rng, plan=plan, prune_tracker=tracker)
    if run.audit_every and t % run.audit_every == 0:
      problems = model.state_audit(
          data, hp, state, pinned_zero_inflation=plan.pinned_zero_inflation)
      if problems:
        raise RuntimeError(
            f"state audit failed at sweep {t}: "
            + "; ".join(str(v) for v in problems))
    if progress_sink is not None:
      progress_sink(t, {
          "log_joint": model.log_joint(data, hp, state),
          "active_patterns": active_pattern_count(state),
      })
    if t in keep:
      kept_loadings.append(state.loadings.copy())
      kept_pi.append([p.copy() for p in state.zero_prob])
      kept_cluster.append([d.astype(np.int8) for d in state.cluster])
      kept_scores.append([h.copy() for h in state.scores])

  n_draws = len(kept_loadings)
  n_studies = data.n_studies
  loadings_draws = (np.stack(kept_loadings) if n_draws
                    else np.zeros((0, data.n_variables, hp.R)))
  zero_prob_draws, cluster_draws, score_draws, mean_score_draws = [], [], [], []
  scores_median = []
  for s in range(n_studies):
    n_sub = data.studies[s].n_subjects
    if n_draws:
      pi_s = np.stack([snap[s] for snap in kept_pi])
      d_s = np.stack([snap[s] for snap in kept_cluster])
      h_s = np.stack([snap[s] for snap in kept_scores])
    else:
      pi_s = np.zeros((0, data.n_variables))
      d_s = np.zeros((0, hp.R, n_sub), dtype=np.int8)
      h_s = np.zeros((0, hp.R, n_sub))
    zero_prob_draws.append(pi_s)
    cluster_draws.append(d_s)
    mean_score_draws.append(h_s.mean(axis=2) if n_draws else np.zeros((0, hp.R)))
    score_draws.append(h_s)
    scores_median.append(np.median(h_s, axis=0) if n_draws
                         else np.zeros((hp.R, n_sub)))

  prevalence = stickprocess.spike_escape_fraction(cluster_draws)
  out = model.ChainOutput(
      loadings_draws=loadings_draws,
      zero_prob_draws=zero_prob_draws,
      cluster_draws=cluster_draws,
      pattern_score_mean_draws=mean_score_draws,
      score_draws=score_draws if run.store_scores else None,
      loadings_median=(np.median(loadings_draws, axis=0) if n_draws
                       else np.full((data.n_variables, hp.R), np.nan)),
      scores_median=scores_median,
      zero_prob_median=[np.median(p, axis=0) if n_draws else np.full(data.n_variables, np.nan)
                        for p in zero_prob_draws],
      zero_prob_low=[np.quantile(p, 0.025, axis=0) if n_draws else np.full(data.n_variables, np.nan)
                     for p in zero_prob_draws],
      zero_prob_high=[np.quantile(p, 0.975, axis=0) if n_draws else np.full(data.n_variables, np.nan)
                      for p in zero_prob_draws],
      prevalence=prevalence,
      meta={
          "iterations": run.iterations,
          "burn_in": run.burn_in,
          "thin": run.thin,
          "seed": run.seed,
          "chain_id": run.chain_id,
          "n_draws": n_draws,
          "n_patterns": hp.R,
          "n_levels": hp.L_star,
          "store_scores": run.store_scores,
          "prune": run.prune,
          "frozen_patterns": (tracker.frozen.nonzero()[0].tolist()
                              if tracker is not None else []),
          "config_digest": config_digest(data, hp, run),
          "runtime_s": round(time.time() - started, 3),
      })
  return out
