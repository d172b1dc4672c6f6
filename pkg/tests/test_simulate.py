"""Generator contracts: dimensions, distributions, masking, determinism."""

import numpy as np
import pytest

from zinmf import simulate
from zinmf.model import validate_dataset


def _counts_match_rates(data, truth):
  """Aggregate Poisson z-score over unmasked cells, per study."""
  zs = []
  for study, h, mask in zip(data.studies, truth.H_true, truth.zero_mask):
    rates = truth.W_true @ h
    keep = mask == 0
    total_rate = rates[keep].sum()
    zs.append((study.counts[keep].sum() - total_rate) / np.sqrt(total_rate))
  return np.array(zs)


# ---------------------------------------------------------------------------
# scenario 1


def test_scenario1_dimensions():
  data, truth = simulate.generate_scenario1(7)
  assert [st.counts.shape for st in data.studies] == [(20, 100)] * 3
  assert truth.W_true.shape == (20, 5)
  assert truth.sharing.shape == (5, 3)
  assert validate_dataset(data) == []


def test_scenario1_supports_are_disjoint():
  _, truth = simulate.generate_scenario1(5)
  gram = truth.W_true.T @ truth.W_true
  off_diagonal = gram - np.diag(np.diag(gram))
  assert np.all(off_diagonal == 0.0)


def test_scenario1_structural_zero_rate():
  _, truth = simulate.generate_scenario1(7)
  for mask in truth.zero_mask:
    assert 0.18 <= mask.mean() <= 0.32


def test_scenario1_nonzero_score_mean():
  _, truth = simulate.generate_scenario1(7)
  nonzero = np.concatenate([h[h > 0] for h in truth.H_true])
  assert abs(nonzero.mean() - 50.0) < 3.0


def test_scenario1_sharing_zeroes_absent_patterns():
  _, truth = simulate.generate_scenario1(3)
  for s, h in enumerate(truth.H_true):
    for k in range(truth.sharing.shape[0]):
      if truth.sharing[k, s] == 0:
        assert np.all(h[k] == 0.0)
      else:
        assert np.count_nonzero(h[k]) > 0


def test_scenario1_counts_are_poisson_at_true_rates():
  data, truth = simulate.generate_scenario1(7)
  assert np.all(np.abs(_counts_match_rates(data, truth)) < 4.0)


def test_scenario1_masked_cells_are_zero():
  data, truth = simulate.generate_scenario1(9)
  for study, mask in zip(data.studies, truth.zero_mask):
    assert np.all(study.counts[mask == 1] == 0)


def test_scenario1_deterministic():
  a, _ = simulate.generate_scenario1(11)
  b, _ = simulate.generate_scenario1(11)
  for sa, sb in zip(a.studies, b.studies):
    np.testing.assert_array_equal(sa.counts, sb.counts)
    np.testing.assert_array_equal(sa.covariates, sb.covariates)


def test_scenario1_seed_changes_data():
  a, _ = simulate.generate_scenario1(11)
  b, _ = simulate.generate_scenario1(12)
  assert not np.array_equal(a.studies[0].counts, b.studies[0].counts)


def test_scenario1_scale_shrinks_subjects():
  data, truth = simulate.generate_scenario1(7, scale=0.5)
  assert [st.n_subjects for st in data.studies] == [50, 50, 50]
  assert all(np.all(lbl == 0) for lbl in truth.cluster_labels)


# ---------------------------------------------------------------------------
# scenario 2


def test_scenario2_dirichlet_columns_sum_to_one():
  data, truth = simulate.generate_scenario2(7)
  assert [st.counts.shape for st in data.studies] == [(50, 100)] * 3
  np.testing.assert_allclose(truth.W_true.sum(axis=0), 1.0, atol=1e-12)


def test_scenario2_binary_covariate_frequency():
  data, _ = simulate.generate_scenario2(7)
  x1 = np.concatenate([st.covariates[:, 1] for st in data.studies])
  assert set(np.unique(x1)) == {0.0, 1.0}
  assert abs(x1.mean() - 0.5) < 0.05


def test_scenario2_inclusion_depends_on_binary_covariate():
  data, truth = simulate.generate_scenario2(7)
  x1 = np.concatenate([st.covariates[:, 1] for st in data.studies])
  # pool inclusion indicators over patterns within each stratum
  incl = np.concatenate([(h > 0).T for h in truth.H_true])   # (N_total, K)
  on, off = incl[x1 == 1].mean(), incl[x1 == 0].mean()
  n_on = incl[x1 == 1].size
  n_off = incl[x1 == 0].size
  pooled = (incl[x1 == 1].sum() + incl[x1 == 0].sum()) / (n_on + n_off)
  z = (on - off) / np.sqrt(pooled * (1 - pooled) * (1 / n_on + 1 / n_off))
  assert z > 3.0


def test_scenario2_counts_match_rates():
  data, truth = simulate.generate_scenario2(13)
  assert np.all(np.abs(_counts_match_rates(data, truth)) < 4.0)


# ---------------------------------------------------------------------------
# scenario 3


def test_scenario3_full_scale_dimensions():
  data, _ = simulate.generate_scenario3(7)
  assert [st.counts.shape for st in data.studies] == [
      (22, 946), (22, 460), (22, 304)]


def test_scenario3_scaled_dimensions():
  data, _ = simulate.generate_scenario3(7, scale=0.2)
  assert [st.n_subjects for st in data.studies] == [189, 92, 61]


def test_scenario3_cluster_score_means():
  _, truth = simulate.generate_scenario3(7, scale=0.2)
  h = np.concatenate([x.ravel() for x in truth.H_true])
  d = np.concatenate([x.ravel() for x in truth.cluster_labels])
  assert set(np.unique(d)) == {1, 2, 3}
  for label, expected in ((1, 4.0), (2, 5.0), (3, 50.0)):
    assert abs(h[d == label].mean() - expected) < 0.2 * expected


def test_scenario3_zero_profile_spans_stated_range():
  _, truth = simulate.generate_scenario3(7, scale=0.2)
  profile = np.asarray(truth.generator_config["zero_profile"])
  assert profile.min() == pytest.approx(0.07)
  assert profile.max() == pytest.approx(0.95)
  per_variable = np.concatenate(truth.zero_mask, axis=1).mean(axis=1)
  assert per_variable[0] < 0.2 and per_variable[-1] > 0.85


def test_scenario3_counts_match_rates():
  data, truth = simulate.generate_scenario3(29, scale=0.2)
  assert np.all(np.abs(_counts_match_rates(data, truth)) < 4.0)


def test_scenario3_rejects_bad_scale():
  with pytest.raises(ValueError, match="scale"):
    simulate.generate_scenario3(7, scale=0.0)
  with pytest.raises(ValueError, match="scale"):
    simulate.generate_scenario3(7, scale=1.5)


# ---------------------------------------------------------------------------
# clustering variant


def test_clustering_scenario_cluster_means():
  _, truth = simulate.generate_clustering_scenario(7, base=1)
  h = np.concatenate([x[0] for x in truth.H_true])
  d = np.concatenate([x[0] for x in truth.cluster_labels])
  for label, expected in ((1, 4.0), (2, 10.0), (3, 50.0)):
    assert abs(h[d == label].mean() - expected) < 0.2 * expected


def test_clustering_scenario_all_clusters_nonempty():
  for seed in range(5):
    _, truth = simulate.generate_clustering_scenario(seed, base=1)
    d = np.concatenate([x[0] for x in truth.cluster_labels])
    assert set(np.unique(d)) == {1, 2, 3}


def test_clustering_scenario_other_patterns_unlabeled():
  _, truth = simulate.generate_clustering_scenario(7, base=1)
  for lbl in truth.cluster_labels:
    assert np.all(lbl[1:] == 0)
    assert np.all(lbl[0] > 0)


def test_clustering_scenario_base2_backbone():
  data, truth = simulate.generate_clustering_scenario(7, base=2)
  assert data.studies[0].counts.shape == (50, 100)
  np.testing.assert_allclose(truth.W_true.sum(axis=0), 1.0, atol=1e-12)
  assert data.studies[0].covariates.shape[1] == 3


def test_clustering_scenario_membership_tracks_covariate():
  _, truth = simulate.generate_clustering_scenario(7, base=1)
  x = np.concatenate([c[:, -1] for c in truth.covariates])
  d = np.concatenate([lbl[0] for lbl in truth.cluster_labels])
  # positive effect on the first stick: high covariate favors cluster 1
  assert x[d == 1].mean() > x[d == 3].mean() + 0.5


def test_clustering_scenario_rejects_bad_base():
  with pytest.raises(ValueError, match="base"):
    simulate.generate_clustering_scenario(7, base=3)


def test_clustering_scenario_deterministic():
  a, ta = simulate.generate_clustering_scenario(4, base=1)
  b, tb = simulate.generate_clustering_scenario(4, base=1)
  for sa, sb in zip(a.studies, b.studies):
    np.testing.assert_array_equal(sa.counts, sb.counts)
  for la, lb in zip(ta.cluster_labels, tb.cluster_labels):
    np.testing.assert_array_equal(la, lb)
