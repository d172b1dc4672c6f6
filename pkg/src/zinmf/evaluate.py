"""Metrics for scoring fits against ground truth.

Pattern recovery is judged by cosine matching of loading columns, score and
reconstruction error on the matched factorization, pattern-count recovery
through prevalence, and partition recovery through the adjusted Rand index
against a variation-of-information point estimate of the cluster structure.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import stickprocess


def cosine_similarity(u, v):
  u = np.asarray(u, dtype=float)
  v = np.asarray(v, dtype=float)
  nu, nv = np.linalg.norm(u), np.linalg.norm(v)
  if nu == 0.0 or nv == 0.0:
    raise ValueError("cosine similarity undefined for a zero vector")
  return float(u @ v / (nu * nv))


def _cosine_matrix(W_est, W_true):
  est = np.asarray(W_est, dtype=float)
  true = np.asarray(W_true, dtype=float)
  if est.shape[0] != true.shape[0]:
    raise ValueError("row dimension mismatch: "
                     f"{est.shape[0]} vs {true.shape[0]}")
  norm_est = np.linalg.norm(est, axis=0)
  norm_true = np.linalg.norm(true, axis=0)
  if np.any(norm_est == 0) or np.any(norm_true == 0):
    raise ValueError("cosine similarity undefined for a zero column")
  return (est.T @ true) / np.outer(norm_est, norm_true)


@dataclass
class MatchResult:
  """Injective map from estimated to true columns, with the full cosine
  table and the leftovers on both sides."""

  assignment: dict              # estimated index -> true index
  similarities: np.ndarray      # (K_est, K_true) cosine table
  unmatched_estimated: set
  unmatched_true: set

  def matched_similarity(self, true_index):
    for est, true in self.assignment.items():
      if true == true_index:
        return float(self.similarities[est, true])
    return None


def match_patterns(W_est, W_true, match_threshold=0.8, method="greedy"):
  """Match estimated loading columns to true ones by cosine similarity.

  Greedy takes pairs in descending similarity; "optimal" solves the
  assignment problem instead. Pairs below the threshold stay unmatched
  either way.
  """
  sims = _cosine_matrix(W_est, W_true)
  n_est, n_true = sims.shape
  assignment = {}
  if method == "greedy":
    order = sorted(((-sims[e, t], e, t)
                    for e in range(n_est) for t in range(n_true)))
    used_est, used_true = set(), set()
    for neg_sim, e, t in order:
      if -neg_sim < match_threshold:
        break
      if e in used_est or t in used_true:
        continue
      assignment[e] = t
      used_est.add(e)
      used_true.add(t)
  elif method == "optimal":
    rows, cols = linear_sum_assignment(-sims)
    for e, t in zip(rows, cols):
      if sims[e, t] >= match_threshold:
        assignment[int(e)] = int(t)
  else:
    raise ValueError(f"unknown matching method {method!r}")
  return MatchResult(
      assignment=assignment,
      similarities=sims,
      unmatched_estimated=set(range(n_est)) - set(assignment),
      unmatched_true=set(range(n_true)) - set(assignment.values()),
  )


def score_error(H_est, H_true, W_est, match, true_loadings=None):
  """Frobenius distance between matched score rows on the normalized scale.

  Each estimated score row is multiplied by its loading-column sum, making
  the comparison invariant to the usual column/row rescaling ambiguity.
  True rows are rescaled the same way when true_loadings is given; the
  bundled generators emit colsum-1 loadings, so by default truth is taken
  as already normalized.
  """
  if not match.assignment:
    raise ValueError("score error needs at least one matched pattern")
  est_colsums = np.asarray(W_est, dtype=float).sum(axis=0)
  true_colsums = (np.asarray(true_loadings, dtype=float).sum(axis=0)
                  if true_loadings is not None else None)
  total = 0.0
  for h_est, h_true in zip(H_est, H_true):
    for e, t in match.assignment.items():
      est_row = est_colsums[e] * np.asarray(h_est[e], dtype=float)
      true_row = np.asarray(h_true[t], dtype=float)
      if true_colsums is not None:
        true_row = true_colsums[t] * true_row
      total += np.sum((est_row - true_row) ** 2)
  return float(np.sqrt(total))


def reconstruction_error(W_est, H_est, W_true, H_true):
  """Frobenius distance between fitted and true mean matrices, all studies.

  No matching needed: the product is invariant to column order.
  """
  total = 0.0
  for h_est, h_true in zip(H_est, H_true):
    diff = np.asarray(W_est) @ np.asarray(h_est) \
        - np.asarray(W_true) @ np.asarray(h_true)
    total += np.sum(diff ** 2)
  return float(np.sqrt(total))


def adjusted_rand_index(labels_a, labels_b):
  a = np.asarray(labels_a).ravel()
  b = np.asarray(labels_b).ravel()
  if a.shape != b.shape or a.size < 2:
    raise ValueError("label vectors must have equal length >= 2")
  _, a_codes = np.unique(a, return_inverse=True)
  _, b_codes = np.unique(b, return_inverse=True)
  table = np.zeros((a_codes.max() + 1, b_codes.max() + 1), dtype=np.int64)
  np.add.at(table, (a_codes, b_codes), 1)

  def comb2(x):
    return x * (x - 1) / 2.0

  sum_cells = comb2(table).sum()
  sum_rows = comb2(table.sum(axis=1)).sum()
  sum_cols = comb2(table.sum(axis=0)).sum()
  n_pairs = comb2(a.size)
  expected = sum_rows * sum_cols / n_pairs
  max_index = 0.5 * (sum_rows + sum_cols)
  if max_index == expected:
    # both partitions trivial (all singletons or all one cluster)
    return 1.0 if sum_cells == expected else 0.0
  return float((sum_cells - expected) / (max_index - expected))


def tertile_baseline(scores):
  """Labels 1-3 by empirical tertile; values at or below a threshold go to
  the lower group, so all-equal scores collapse to label 1."""
  scores = np.asarray(scores, dtype=float)
  if scores.size < 3:
    raise ValueError("tertile baseline needs at least 3 subjects")
  lo, hi = np.quantile(scores, [1.0 / 3.0, 2.0 / 3.0])
  return (1 + (scores > lo).astype(np.int64) + (scores > hi)).astype(np.int64)


def co_clustering_matrix(label_draws):
  """Posterior co-clustering frequencies from (T, N) label draws."""
  draws = np.asarray(label_draws)
  if draws.ndim != 2 or draws.shape[0] == 0:
    raise ValueError("label draws must be a nonempty (T, N) array")
  same = draws[:, :, None] == draws[:, None, :]
  return same.mean(axis=0)


def _pattern_label_draws(chain, k, study=None):
  if chain.cluster_draws is None or len(chain.cluster_draws) == 0:
    raise ValueError("chain has no stored cluster draws")
  if study is None:
    return np.concatenate([d[:, k, :] for d in chain.cluster_draws], axis=1)
  return chain.cluster_draws[study][:, k, :]


def variation_of_information_bound(labels, similarity):
  """Expected variation-of-information lower bound of one candidate
  partition against a co-clustering matrix (Jensen's inequality applied
  clusterwise), in bits, averaged per subject."""
  labels = np.asarray(labels)
  n = labels.size
  same = labels[:, None] == labels[None, :]
  sizes = same.sum(axis=1).astype(float)
  sim_totals = similarity.sum(axis=1)
  sim_within = np.where(same, similarity, 0.0).sum(axis=1)
  log2 = np.log(2.0)
  terms = (np.log(sizes) + np.log(sim_totals) - 2.0 * np.log(sim_within))
  return float(terms.sum() / (n * log2))


def partition_point_estimate(chain, k, study=None):
  """Point-estimate partition for pattern k: the sampled partition
  minimizing the variation-of-information bound against the posterior
  co-clustering matrix. study=None pools subjects across studies."""
  draws = _pattern_label_draws(chain, k, study=study)
  similarity = co_clustering_matrix(draws)
  candidates = np.unique(draws, axis=0)
  losses = [variation_of_information_bound(c, similarity) for c in candidates]
  return candidates[int(np.argmin(losses))].copy()


def pattern_count(chain, activity_threshold=0.05):
  """Number of patterns active (escaping the spike for at least the
  threshold fraction of subjects) in at least one study."""
  report = stickprocess.pattern_prevalence(
      chain, activity_threshold=activity_threshold)
  return int(report.global_active_count)
