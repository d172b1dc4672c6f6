"""Posterior summaries of pattern activity.

A pattern is "on" for a subject when the subject's score sits in any level
above the spike. Prevalence in a study is the fraction of subjects whose
posterior probability of the spike level is below one half; a pattern is
active in a study when that prevalence reaches the activity threshold.
"""

from dataclasses import dataclass

import numpy as np


def spike_escape_fraction(cluster_draws):
  """Prevalence matrix (patterns x studies) from stored label draws.

  cluster_draws: per-study arrays of shape (draws, patterns, subjects).
  NaN when there are no stored draws.
  """
  n_studies = len(cluster_draws)
  n_patterns = cluster_draws[0].shape[1] if n_studies else 0
  out = np.full((n_patterns, n_studies), np.nan)
  for s, draws in enumerate(cluster_draws):
    if draws.shape[0] == 0:
      continue
    spike_prob = (draws == 1).mean(axis=0)        # (patterns, subjects)
    out[:, s] = (spike_prob < 0.5).mean(axis=1)
  return out


def cluster_membership_probabilities(chain, k, s):
  """Empirical level frequencies for pattern k in study s, (subjects x levels).

  Rows sum to one: every stored draw assigns each subject exactly one level.
  """
  draws = chain.cluster_draws[s][:, k, :]         # (draws, subjects)
  n_levels = chain.meta["n_levels"]
  if draws.shape[0] == 0:
    raise ValueError("chain has no stored draws")
  levels = np.arange(1, n_levels + 1)
  return (draws[:, :, None] == levels[None, None, :]).mean(axis=0)


@dataclass
class PrevalenceReport:
  prevalence: np.ndarray          # (patterns, studies)
  activity_threshold: float
  active_in: list                 # per pattern: sorted study indices
  global_active_count: int


def pattern_prevalence(chain, activity_threshold=0.05):
  """Prevalence per (pattern, study) plus the induced activity sets."""
  prevalence = spike_escape_fraction(chain.cluster_draws)
  active_in = [sorted(np.flatnonzero(row >= activity_threshold).tolist())
               for row in prevalence]
  count = sum(1 for studies in active_in if studies)
  return PrevalenceReport(
      prevalence=prevalence,
      activity_threshold=activity_threshold,
      active_in=active_in,
      global_active_count=count,
  )
