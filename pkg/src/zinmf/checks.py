"""Internal correctness checks for the sampler.

Two independent certifications:

1. Conditional/joint consistency. For every kernel, the log of the full
   conditional evaluated at two candidate values of one coordinate (all else
   fixed) must differ by exactly the joint log-density difference. The
   conditional parameters come from the same functions the kernels draw
   from, so the formulas being verified are the ones actually used. The
   label kernel is checked against the probit-marginalized joint, because
   that kernel deliberately integrates the probit variables out.

2. Simulator agreement. A forward simulator draws (latents, data) from the
   model; a successive-conditional simulator alternates one Gibbs sweep with
   a fresh draw of (indicators, count splits, data) given the remaining
   latents. Both leave the same joint distribution invariant, so every
   latent's first and second moments must agree within Monte Carlo error.

Both run on a deliberately tiny configuration (1 study, 2 variables,
2 patterns, 3 subjects, 2 levels, 2 covariates) so full sweeps cost
microseconds and the joint density is cheap to evaluate exactly.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, log_ndtr, logsumexp, xlogy

from . import distributions as dist
from . import model, sampler

KERNELS = (
    "latent_counts", "excess_zero", "zero_prob", "loadings",
    "cluster", "probit", "coefs", "cluster_means", "scores",
)


def tiny_hyper():
  """Moment-friendly settings: level-mean shape 6 keeps fourth moments
  finite, so variance comparisons have finite Monte Carlo error."""
  return model.HyperParameters(
      alpha_m=1.0, beta_m=1.0, alpha_w=2.0, beta_w=2.0, c=3.0, epsilon=0.4,
      gamma1_theta=6.0, gamma2_theta=10.0, tau0=2.0, L_star=2, R=2,
      beta0=(0.8,))


def tiny_template():
  """Fixed covariates for the tiny configuration; counts start at zero."""
  covariates = np.array([[1.0, -0.5], [1.0, 0.3], [1.0, 1.2]])
  study = model.StudyData(
      counts=np.zeros((2, 3), dtype=np.int64),
      covariates=covariates,
      subject_ids=["t_000", "t_001", "t_002"],
      covariate_names=["intercept", "x1"],
  )
  return model.CountDataset(studies=[study], variable_names=["v00", "v01"])


# ---------------------------------------------------------------------------
# forward simulator


def forward_draw(template, hp, rng):
  """Exact draw of (state, data) from the generative model."""
  n_var = template.n_variables
  n_patterns, n_levels = hp.R, hp.L_star
  loadings = dist.sample_gamma(hp.alpha_w, hp.beta_w, rng,
                               size=(n_var, n_patterns))
  cluster_means = np.empty((n_patterns, n_levels))
  cluster_means[:, 0] = hp.epsilon
  cluster_means[:, 1:] = dist.sample_inverse_gamma(
      hp.gamma1_theta, hp.gamma2_theta, rng, size=(n_patterns, n_levels - 1))
  shapes = hp.level_shapes()

  studies, scores, excess, latent, zero_prob, cluster, coefs, probit = (
      [], [], [], [], [], [], [], [])
  for study in template.studies:
    n_sub, n_cov = study.n_subjects, study.n_covariates
    pi = dist.sample_beta(hp.alpha_m, hp.beta_m, rng, size=n_var)
    prior_mean = hp.coef_prior_mean(n_cov)
    b = prior_mean[None, :, :] + rng.generator.standard_normal(
        (n_patterns, n_levels - 1, n_cov)) / np.sqrt(hp.tau0)

    # sequential stick construction: the label is the first level whose
    # probit variable is positive, or the last level if none is
    linpred = np.einsum("klq,nq->kln", b, study.covariates)
    y = linpred + rng.generator.standard_normal(linpred.shape)
    positive = y > 0
    any_pos = positive.any(axis=1)
    first = positive.argmax(axis=1)
    d = np.where(any_pos, first + 1, n_levels).astype(np.int64)
    level_idx = np.arange(1, n_levels)[None, :, None]
    y = np.where(level_idx > d[:, None, :], np.nan, y)

    ck = shapes[d - 1]
    th = np.take_along_axis(cluster_means, d - 1, axis=1)
    h = dist.sample_gamma(ck, ck / th, rng)

    u = rng.generator.random((n_var, n_sub))
    a = (u < pi[:, None]).astype(np.int8)
    rates = loadings[:, :, None] * h[None, :, :]
    z = rng.generator.poisson(rates) * (1 - a)[:, None, :]
    counts = z.sum(axis=1)

    studies.append(model.StudyData(
        counts=counts, covariates=study.covariates,
        subject_ids=study.subject_ids, covariate_names=study.covariate_names))
    zero_prob.append(pi)
    coefs.append(b)
    cluster.append(d)
    probit.append(y)
    scores.append(h)
    excess.append(a)
    latent.append(z.astype(np.int64))

  state = model.LatentState(
      loadings=loadings, scores=scores, excess_zero=excess,
      latent_counts=latent, zero_prob=zero_prob, cluster=cluster,
      cluster_means=cluster_means, coefs=coefs, probit_latent=probit)
  data = model.CountDataset(studies=studies,
                            variable_names=template.variable_names)
  return state, data


def refresh_data(state, data, hp, rng):
  """Redraw (indicators, count splits, counts) given the other latents."""
  for s, study in enumerate(data.studies):
    pi = state.zero_prob[s]
    u = rng.generator.random(study.counts.shape)
    a = (u < pi[:, None]).astype(np.int8)
    rates = state.loadings[:, :, None] * state.scores[s][None, :, :]
    z = rng.generator.poisson(rates) * (1 - a)[:, None, :]
    state.excess_zero[s] = a
    state.latent_counts[s] = z.astype(np.int64)
    study.counts = z.sum(axis=1)


# ---------------------------------------------------------------------------
# conditional log densities, evaluated from the kernels' own parameters


def _cond_latent_counts(state, data, hp, coord, value):
  s, p, i = coord
  weights = sampler.latent_count_weights(state, s)[p, :, i]
  prob = weights / weights.sum()
  total = value.sum()
  return float(gammaln(total + 1) - gammaln(value + 1.0).sum()
               + xlogy(value, prob).sum())


def _cond_excess_zero(state, data, hp, coord, value):
  s, p, i = coord
  log_on = np.log(state.zero_prob[s][p])
  log_off = (np.log1p(-state.zero_prob[s][p])
             - sampler.latent_count_weights(state, s)[p, :, i].sum())
  norm = np.logaddexp(log_on, log_off)
  return float((log_on if value == 1 else log_off) - norm)


def _cond_zero_prob(state, data, hp, coord, value):
  s, p = coord
  a_post, b_post = sampler.zero_prob_params(state, data, hp, s)
  return float(dist.log_beta_pdf(value, a_post[p], b_post[p]))


def _cond_loadings(state, data, hp, coord, value):
  p, k = coord
  shape, rate = sampler.loading_params(state, data, hp)
  return float(dist.log_gamma_pdf(value, shape[p, k], rate[p, k]))


def _cond_cluster(state, data, hp, coord, value):
  s, k, i = coord
  logp = sampler.cluster_log_probs(state, data, hp, s)[k, :, i]
  return float(logp[value - 1] - logsumexp(logp))


def _cond_probit(state, data, hp, coord, value):
  s, k, l, i = coord
  mu = sampler.probit_means(state, data, s)[k, l, i]
  label = state.cluster[s][k, i]
  if label == l + 1:
    return float(dist.log_normal_pdf(value, mu, 1.0) - log_ndtr(mu))
  if label > l + 1:
    return float(dist.log_normal_pdf(value, mu, 1.0) - log_ndtr(-mu))
  raise ValueError("probit variable undefined below the label")


def _cond_coefs(state, data, hp, coord, value):
  s, k, l = coord
  mean, precision = sampler.coef_params(state, data, hp, s, k, l)
  diff = np.asarray(value) - mean
  _, logdet = np.linalg.slogdet(precision)
  return float(0.5 * logdet - 0.5 * len(mean) * np.log(2 * np.pi)
               - 0.5 * diff @ precision @ diff)


def _cond_cluster_means(state, data, hp, coord, value):
  k, col = coord                      # col >= 1: non-spike column
  shape, scale = sampler.cluster_mean_params(state, hp)
  return float(dist.log_inverse_gamma_pdf(value, shape[k, col - 1],
                                          scale[k, col - 1]))


def _cond_scores(state, data, hp, coord, value):
  s, k, i = coord
  shape, rate = sampler.score_params(state, data, hp, s)
  return float(dist.log_gamma_pdf(value, shape[k, i], rate[k, i]))


_CONDITIONALS = {
    "latent_counts": _cond_latent_counts,
    "excess_zero": _cond_excess_zero,
    "zero_prob": _cond_zero_prob,
    "loadings": _cond_loadings,
    "cluster": _cond_cluster,
    "probit": _cond_probit,
    "coefs": _cond_coefs,
    "cluster_means": _cond_cluster_means,
    "scores": _cond_scores,
}


# ---------------------------------------------------------------------------
# coordinate and candidate-value proposals


def _propose(kernel, state, data, hp, rng):
  """Pick a coordinate and two valid candidate values for it.

  Returns None when the state has no cell satisfying the kernel's
  precondition (caller draws a fresh state)."""
  gen = rng.generator
  s = int(gen.integers(data.n_studies))
  study = data.studies[s]
  n_var, n_sub = study.counts.shape
  n_patterns, n_levels = hp.R, hp.L_star

  if kernel == "latent_counts":
    cells = [(t, p, i) for t, st in enumerate(data.studies)
             for p, i in np.argwhere((np.asarray(st.counts) > 0)
                                     & (state.excess_zero[t] == 0))]
    if not cells:
      return None
    s, p, i = cells[gen.integers(len(cells))]
    weights = sampler.latent_count_weights(state, s)[p, :, i]
    total = int(data.studies[s].counts[p, i])
    v1 = dist.sample_multinomial(total, weights, rng)
    v2 = dist.sample_multinomial(total, weights, rng)
    return (s, int(p), int(i)), v1, v2
  if kernel == "excess_zero":
    cells = [(t, p, i) for t, st in enumerate(data.studies)
             for p, i in np.argwhere(np.asarray(st.counts) == 0)]
    if not cells:
      return None
    s, p, i = cells[gen.integers(len(cells))]
    return (s, int(p), int(i)), 1, 0
  if kernel == "zero_prob":
    p = int(gen.integers(n_var))
    a_post, b_post = sampler.zero_prob_params(state, data, hp, s)
    return (s, p), float(dist.sample_beta(a_post[p], b_post[p], rng)), \
        float(dist.sample_beta(a_post[p], b_post[p], rng))
  if kernel == "loadings":
    p, k = int(gen.integers(n_var)), int(gen.integers(n_patterns))
    shape, rate = sampler.loading_params(state, data, hp)
    return (p, k), float(dist.sample_gamma(shape[p, k], rate[p, k], rng)), \
        float(dist.sample_gamma(shape[p, k], rate[p, k], rng))
  if kernel == "cluster":
    k, i = int(gen.integers(n_patterns)), int(gen.integers(n_sub))
    levels = 1 + gen.permutation(n_levels)[:2]
    return (s, k, i), int(levels[0]), int(levels[1])
  if kernel == "probit":
    defined = np.argwhere(~np.isnan(state.probit_latent[s]))
    k, l, i = defined[gen.integers(len(defined))]
    mu = sampler.probit_means(state, data, s)[k, l, i]
    side = "positive" if state.cluster[s][k, i] == l + 1 else "negative"
    v1 = float(dist.sample_truncated_normal(mu, side, rng))
    v2 = float(dist.sample_truncated_normal(mu, side, rng))
    return (s, int(k), int(l), int(i)), v1, v2
  if kernel == "coefs":
    k = int(gen.integers(n_patterns))
    l = int(gen.integers(n_levels - 1))
    mean, precision = sampler.coef_params(state, data, hp, s, k, l)
    upper = np.linalg.cholesky(precision).T
    draw = lambda: mean + np.linalg.solve(upper, gen.standard_normal(len(mean)))
    return (s, k, l), draw(), draw()
  if kernel == "cluster_means":
    k = int(gen.integers(n_patterns))
    col = 1 + int(gen.integers(n_levels - 1))
    shape, scale = sampler.cluster_mean_params(state, hp)
    draw = lambda: float(dist.sample_inverse_gamma(
        shape[k, col - 1], scale[k, col - 1], rng))
    return (k, col), draw(), draw()
  if kernel == "scores":
    k, i = int(gen.integers(n_patterns)), int(gen.integers(n_sub))
    shape, rate = sampler.score_params(state, data, hp, s)
    draw = lambda: float(dist.sample_gamma(shape[k, i], rate[k, i], rng))
    return (s, k, i), draw(), draw()
  raise ValueError(f"unknown kernel {kernel!r}")


def _with_value(state, kernel, coord, value):
  out = state.copy()
  if kernel == "latent_counts":
    s, p, i = coord
    out.latent_counts[s][p, :, i] = value
  elif kernel == "excess_zero":
    s, p, i = coord
    out.excess_zero[s][p, i] = value
  elif kernel == "zero_prob":
    s, p = coord
    out.zero_prob[s][p] = value
  elif kernel == "loadings":
    p, k = coord
    out.loadings[p, k] = value
  elif kernel == "cluster":
    s, k, i = coord
    out.cluster[s][k, i] = value
  elif kernel == "probit":
    s, k, l, i = coord
    out.probit_latent[s][k, l, i] = value
  elif kernel == "coefs":
    s, k, l = coord
    out.coefs[s][k, l] = value
  elif kernel == "cluster_means":
    k, col = coord
    out.cluster_means[k, col] = value
  elif kernel == "scores":
    s, k, i = coord
    out.scores[s][k, i] = value
  else:
    raise ValueError(f"unknown kernel {kernel!r}")
  return out


@dataclass
class KernelCheck:
  kernel: str
  n_pairs: int
  max_error: float
  ok: bool


def check_kernel(kernel, n_pairs=100, seed=0, tolerance=1e-8):
  """Compare conditional and joint log-density differences for one kernel.

  The error reported is |delta_conditional - delta_joint| normalized by
  max(1, |delta_joint|), maximized over value pairs.
  """
  hp = tiny_hyper().validate()
  template = tiny_template()
  rng = dist.RngStream(seed, dist.CHECK_STREAM + 1)
  # the label kernel integrates the probit variables out, so it is checked
  # against the marginal joint; every other kernel against the full one
  include_probit = kernel != "cluster"
  worst = 0.0
  pairs_done = 0
  while pairs_done < n_pairs:
    state, data = forward_draw(template, hp, rng)
    proposal = _propose(kernel, state, data, hp, rng)
    if proposal is None:
      continue
    coord, v1, v2 = proposal
    cond = _CONDITIONALS[kernel]
    delta_cond = (cond(_with_value(state, kernel, coord, v1), data, hp, coord, v1)
                  - cond(_with_value(state, kernel, coord, v2), data, hp, coord, v2))
    s1 = _with_value(state, kernel, coord, v1)
    s2 = _with_value(state, kernel, coord, v2)
    delta_joint = (model.log_joint(data, hp, s1, include_probit_latent=include_probit)
                   - model.log_joint(data, hp, s2, include_probit_latent=include_probit))
    err = abs(delta_cond - delta_joint) / max(1.0, abs(delta_joint))
    worst = max(worst, err)
    pairs_done += 1
  return KernelCheck(kernel=kernel, n_pairs=n_pairs, max_error=worst,
                     ok=worst <= tolerance)


def conjugacy_report(n_pairs=100, seed=0, tolerance=1e-8):
  """Run the conditional/joint check for all nine kernels."""
  return [check_kernel(kernel, n_pairs=n_pairs, seed=seed + j,
                       tolerance=tolerance)
          for j, kernel in enumerate(KERNELS)]


# ---------------------------------------------------------------------------
# simulator agreement ("getting it right")


def tracked_labels(hp, template):
  labels = []
  study = template.studies[0]
  n_var, n_sub = study.counts.shape
  labels += [f"zero_prob[{p}]" for p in range(n_var)]
  labels += [f"loading[{p},{k}]" for p in range(n_var) for k in range(hp.R)]
  labels += [f"score[{k},{i}]" for k in range(hp.R) for i in range(n_sub)]
  labels += [f"level_mean[{k},{c}]" for k in range(hp.R)
             for c in range(1, hp.L_star)]
  labels += [f"coef[{k},{l},{q}]" for k in range(hp.R)
             for l in range(hp.L_star - 1) for q in range(study.n_covariates)]
  return labels


def _tracked_vector(state):
  return np.concatenate([
      state.zero_prob[0],
      state.loadings.ravel(),
      state.scores[0].ravel(),
      state.cluster_means[:, 1:].ravel(),
      state.coefs[0].ravel(),
  ])


def _batch_se(series, n_batches=100):
  n = series.shape[0]
  n_batches = min(n_batches, max(2, n // 2))
  size = n // n_batches
  trimmed = series[:n_batches * size].reshape(n_batches, size, -1)
  means = trimmed.mean(axis=1)
  return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


@dataclass
class MomentReport:
  labels: list
  z_first: np.ndarray
  z_second: np.ndarray
  rounds: int
  ok: bool

  @property
  def max_z(self):
    return float(max(np.max(self.z_first), np.max(self.z_second)))


def geweke_report(rounds=50_000, seed=0, z_limit=4.0):
  """Forward vs successive-conditional moment agreement on the tiny model.

  Both simulators target the same joint, so for every tracked latent the
  first and second moments must agree within z_limit combined standard
  errors (iid on the forward side, batch means on the Markov side).
  """
  hp = tiny_hyper().validate()
  template = tiny_template()

  fwd_rng = dist.RngStream(seed, dist.CHECK_STREAM + 2)
  fwd = np.empty((rounds, len(_tracked_vector(
      forward_draw(template, hp, fwd_rng)[0]))))
  for r in range(rounds):
    state, _ = forward_draw(template, hp, fwd_rng)
    fwd[r] = _tracked_vector(state)

  sc_rng = dist.RngStream(seed, dist.CHECK_STREAM + 3)
  state, data = forward_draw(template, hp, sc_rng)
  sc = np.empty_like(fwd)
  for r in range(rounds):
    sampler.gibbs_sweep(state, data, hp, sc_rng)
    refresh_data(state, data, hp, sc_rng)
    sc[r] = _tracked_vector(state)

  def z_scores(f, s):
    se = np.sqrt((f.std(axis=0, ddof=1) / np.sqrt(rounds)) ** 2
                 + _batch_se(s) ** 2)
    return np.abs(f.mean(axis=0) - s.mean(axis=0)) / se

  z1 = z_scores(fwd, sc)
  z2 = z_scores(fwd ** 2, sc ** 2)
  ok = bool(np.max(z1) <= z_limit and np.max(z2) <= z_limit)
  return MomentReport(labels=tracked_labels(hp, template),
                      z_first=z1, z_second=z2, rounds=rounds, ok=ok)
