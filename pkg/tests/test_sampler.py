"""Kernel parameter arithmetic, sweep plumbing and chain driver behavior."""

import numpy as np
import pytest
from scipy.special import expit

from zinmf import distributions as dist
from zinmf import model, sampler
from helpers import make_dataset, seeded_state, small_hyper


def fitted_state(seed=21, **hyper):
  data = make_dataset(seed=seed)
  hp = small_hyper(**hyper)
  state, rng = seeded_state(data, hp, seed=seed)
  return data, hp, state, rng


# ---------------------------------------------------------------------------
# conjugate parameter arithmetic, worked by hand


def test_loading_params_worked_example():
  # one variable, one pattern: alpha_w=1, beta_w=25, count sum 100,
  # score-weighted exposure 75  ->  Gamma(101, 100)
  data = make_dataset(n_studies=1, n_variables=1, subjects=(4,))
  hp = small_hyper(alpha_w=1.0, beta_w=25.0, R=1)
  state, _ = seeded_state(data, hp)
  state.excess_zero[0][:] = 0
  state.latent_counts[0] = np.array([[[40, 30, 20, 10]]], dtype=np.int64)
  state.scores[0] = np.array([[30.0, 20.0, 15.0, 10.0]])  # sums to 75
  shape, rate = sampler.loading_params(state, data, hp)
  assert shape[0, 0] == pytest.approx(101.0)
  assert rate[0, 0] == pytest.approx(100.0)


def test_loading_params_skip_flagged_cells():
  data = make_dataset(n_studies=1, n_variables=1, subjects=(2,))
  data.studies[0].counts[:] = 0
  hp = small_hyper(alpha_w=1.0, beta_w=25.0, R=1)
  state, _ = seeded_state(data, hp)
  state.excess_zero[0] = np.array([[1, 0]], dtype=np.int8)
  state.latent_counts[0][:] = 0
  state.scores[0] = np.array([[100.0, 7.0]])
  _, rate = sampler.loading_params(state, data, hp)
  # flagged subject contributes no exposure
  assert rate[0, 0] == pytest.approx(25.0 + 7.0)


def test_score_params_worked_example():
  # level 2 with c=10 and level mean 2; count sum 30, loading exposure 4
  #   ->  Gamma(10 + 30, 10/2 + 4) = Gamma(40, 9)
  data = make_dataset(n_studies=1, n_variables=2, subjects=(1,))
  hp = small_hyper(c=10.0, R=1)
  state, _ = seeded_state(data, hp)
  state.excess_zero[0][:] = 0
  state.cluster[0][:] = 2
  state.cluster_means[0] = [hp.epsilon, 2.0, 5.0]
  state.latent_counts[0] = np.array([[[18]], [[12]]], dtype=np.int64)
  state.loadings = np.array([[1.5], [2.5]])
  shape, rate = sampler.score_params(state, data, hp, 0)
  assert shape[0, 0] == pytest.approx(40.0)
  assert rate[0, 0] == pytest.approx(9.0)


def test_score_params_spike_level_uses_unit_shape():
  data = make_dataset(n_studies=1, n_variables=2, subjects=(1,))
  hp = small_hyper(R=1, epsilon=0.4)
  state, _ = seeded_state(data, hp)
  state.excess_zero[0][:] = 1
  data.studies[0].counts[:] = 0
  state.latent_counts[0][:] = 0
  state.cluster[0][:] = 1
  shape, rate = sampler.score_params(state, data, hp, 0)
  # all cells flagged: conditional falls back to the spike prior Gamma(1, 1/eps)
  assert shape[0, 0] == pytest.approx(1.0)
  assert rate[0, 0] == pytest.approx(1.0 / 0.4)


def test_cluster_mean_params_worked_example():
  # c=10, gamma1=1.5, gamma2=20; level 2 has 7 members with score sum 21
  #   ->  InvGamma(1.5 + 70, 20 + 210)
  data = make_dataset(n_studies=1, n_variables=2, subjects=(9,))
  hp = small_hyper(c=10.0, gamma1_theta=1.5, gamma2_theta=20.0, R=1, L_star=3,
                   beta0=(0.8, 0.0))
  state, _ = seeded_state(data, hp)
  d = np.ones((1, 9), dtype=np.int64)
  d[0, :7] = 2
  state.cluster[0] = d
  h = np.full((1, 9), 5.0)
  h[0, :7] = 3.0                      # members of level 2 sum to 21
  state.scores[0] = h
  shape, scale = sampler.cluster_mean_params(state, hp)
  assert shape[0, 0] == pytest.approx(71.5)
  assert scale[0, 0] == pytest.approx(230.0)


def test_coef_params_worked_example():
  # intercept-only: tau0=5, prior mean 0, two observed subjects with
  # probit values (2, 4)  ->  precision 7, mean 6/7
  data = make_dataset(n_studies=1, n_variables=2, subjects=(2,))
  data.studies[0].covariates = np.ones((2, 1))
  data.studies[0].covariate_names = ["intercept"]
  hp = small_hyper(tau0=5.0, beta0=(0.0, 0.0))
  state, _ = seeded_state(data, hp)
  state.cluster[0][:] = 2             # both subjects past level 1
  state.probit_latent[0][:, 0, :] = [[-2.0, -4.0], [-2.0, -4.0]]
  state.probit_latent[0][0, 0, :] = [2.0, 4.0]
  mean, precision = sampler.coef_params(state, data, hp, 0, 0, 0)
  assert precision[0, 0] == pytest.approx(7.0)
  assert mean[0] == pytest.approx(6.0 / 7.0)


def test_coef_params_empty_selection_returns_prior():
  data = make_dataset(n_studies=1, n_variables=2, subjects=(3,))
  hp = small_hyper(tau0=2.0, L_star=3, beta0=(0.8, 0.0))
  state, _ = seeded_state(data, hp)
  state.cluster[0][:] = 1             # nobody reaches level 2
  mean, precision = sampler.coef_params(state, data, hp, 0, 0, 1)
  assert np.allclose(precision, 2.0 * np.eye(2))
  assert np.allclose(mean, [0.0, 0.0])


def test_zero_prob_params_counts_flags():
  data = make_dataset(n_studies=1, n_variables=1, subjects=(10,))
  hp = small_hyper(alpha_m=1.0, beta_m=1.0)
  state, _ = seeded_state(data, hp)
  flags = np.zeros((1, 10), dtype=np.int8)
  flags[0, :3] = 1
  state.excess_zero[0] = flags
  a_post, b_post = sampler.zero_prob_params(state, data, hp, 0)
  assert a_post[0] == pytest.approx(4.0)
  assert b_post[0] == pytest.approx(8.0)


def test_excess_zero_posterior_worked_example():
  # count 0, pi = 0.5, Poisson mean ln 3  ->  P(flag) = 0.75
  data = make_dataset(n_studies=1, n_variables=1, subjects=(1,))
  data.studies[0].counts[:] = 0
  hp = small_hyper(R=1)
  state, _ = seeded_state(data, hp)
  state.zero_prob[0] = np.array([0.5])
  state.loadings = np.array([[1.0]])
  state.scores[0] = np.array([[np.log(3.0)]])
  p_on = expit(sampler.excess_zero_log_odds(state, data, 0))
  assert p_on[0, 0] == pytest.approx(0.75, abs=1e-12)


def test_stick_weights_balanced_at_zero_predictor():
  coefs = np.zeros((1, 2, 1))
  covariates = np.ones((1, 1))
  weights = sampler.compute_stick_weights(coefs, covariates)
  assert np.allclose(weights[0, :, 0], [0.5, 0.25, 0.25])


def test_cluster_log_probs_prefers_matching_level():
  data, hp, state, _ = fitted_state()
  state.cluster_means[:, 1] = 50.0
  state.cluster_means[:, 2] = 1.0
  state.scores[0][0, 0] = 50.0
  logp = sampler.cluster_log_probs(state, data, hp, 0)
  assert logp[0, 1, 0] > logp[0, 0, 0]
  assert logp[0, 1, 0] > logp[0, 2, 0]


# ---------------------------------------------------------------------------
# sweep plumbing


def test_disabled_plan_leaves_state_unchanged():
  data, hp, state, rng = fitted_state()
  before = state.copy()
  sampler.gibbs_sweep(state, data, hp, rng, plan=sampler.SweepPlan.none())
  assert np.array_equal(before.loadings, state.loadings)
  for s in range(data.n_studies):
    assert np.array_equal(before.scores[s], state.scores[s])
    assert np.array_equal(before.cluster[s], state.cluster[s])
    assert np.array_equal(before.latent_counts[s], state.latent_counts[s])


def test_sweep_preserves_invariants():
  data, hp, state, rng = fitted_state()
  for _ in range(25):
    sampler.gibbs_sweep(state, data, hp, rng)
  assert model.state_audit(data, hp, state) == []


def test_degenerate_sweep_preserves_pinning():
  data = make_dataset(seed=22)
  hp = small_hyper()
  state, rng = seeded_state(data, hp, seed=22, pinned_zero_inflation=True,
                            pinned_cluster_level=2)
  plan = sampler.SweepPlan.degenerate()
  for _ in range(25):
    sampler.gibbs_sweep(state, data, hp, rng, plan=plan)
  assert all(np.all(p == 0) for p in state.zero_prob)
  assert all(np.all(d == 2) for d in state.cluster)
  assert model.state_audit(data, hp, state, pinned_zero_inflation=True) == []


def test_unknown_block_rejected():
  with pytest.raises(ValueError):
    sampler.SweepPlan(enabled={"flux_capacitor": True})


# ---------------------------------------------------------------------------
# storage policy and chain driver


def test_stored_sweep_indices():
  run = sampler.RunConfig(iterations=10, burn_in=5, thin=2)
  assert run.stored_sweeps() == [7, 9]
  assert len(run.stored_sweeps()) == 2


def test_run_chain_deterministic_and_summarized():
  data = make_dataset(seed=23)
  hp = small_hyper()
  run = sampler.RunConfig(iterations=30, burn_in=10, thin=2, seed=17)
  out1 = sampler.run_chain(data, hp, run)
  out2 = sampler.run_chain(data, hp, run)
  assert np.array_equal(out1.loadings_draws, out2.loadings_draws)
  assert np.array_equal(out1.cluster_draws[1], out2.cluster_draws[1])
  assert out1.n_draws == 10
  assert out1.loadings_median.shape == (data.n_variables, hp.R)
  assert out1.prevalence.shape == (hp.R, data.n_studies)
  assert np.all(out1.zero_prob_low[0] <= out1.zero_prob_median[0])
  assert np.all(out1.zero_prob_median[0] <= out1.zero_prob_high[0])
  assert out1.meta["n_draws"] == 10
  assert out1.score_draws is None

  other_chain = sampler.RunConfig(iterations=30, burn_in=10, thin=2, seed=17,
                                  chain_id=1)
  out3 = sampler.run_chain(data, hp, other_chain)
  assert not np.array_equal(out1.loadings_draws, out3.loadings_draws)


def test_run_chain_stores_scores_on_request():
  data = make_dataset(seed=24)
  hp = small_hyper()
  run = sampler.RunConfig(iterations=6, burn_in=2, thin=1, seed=3,
                          store_scores=True)
  out = sampler.run_chain(data, hp, run)
  assert out.score_draws is not None
  assert out.score_draws[0].shape == (4, hp.R, data.studies[0].n_subjects)


def test_run_chain_audit_mode_passes():
  data = make_dataset(seed=25)
  hp = small_hyper()
  run = sampler.RunConfig(iterations=10, burn_in=5, thin=1, seed=4,
                          audit_every=1)
  out = sampler.run_chain(data, hp, run)
  assert out.n_draws == 5


def test_run_chain_rejects_invalid_dataset():
  data = make_dataset(seed=26)
  data.studies[0].counts[0, 0] = -2
  with pytest.raises(ValueError, match="negative-count"):
    sampler.run_chain(data, small_hyper(),
                      sampler.RunConfig(iterations=2, burn_in=0))


def test_progress_sink_called_each_sweep():
  data = make_dataset(seed=27)
  hp = small_hyper()
  seen = []
  run = sampler.RunConfig(iterations=5, burn_in=2, thin=1, seed=5)
  sampler.run_chain(data, hp, run,
                    progress_sink=lambda t, info: seen.append((t, info)))
  assert [t for t, _ in seen] == [1, 2, 3, 4, 5]
  assert all(np.isfinite(info["log_joint"]) for _, info in seen)
  assert all(0 <= info["active_patterns"] <= hp.R for _, info in seen)


def test_prune_tracker_freezes_after_sustained_spike():
  tracker = sampler._PruneTracker(2, occupancy=0.99, patience=5)
  data = make_dataset(seed=28)
  hp = small_hyper()
  state, _ = seeded_state(data, hp, seed=28)
  for d in state.cluster:
    d[0, :] = 1                      # pattern 0 fully on the spike
    d[1, :] = 2
  for _ in range(4):
    assert not tracker.observe(state).any()
  assert tracker.observe(state)[0]
  assert tracker.frozen.tolist() == [True, False]
  # frozen patterns stay pinned through later label updates
  rng = dist.RngStream(1, dist.CHECK_STREAM + 9)
  sampler.update_cluster(state, data, hp, rng, frozen=tracker.frozen)
  assert all(np.all(d[0, :] == 1) for d in state.cluster)


# ---------------------------------------------------------------------------
# warm start


def planted_rank2_counts(seed=7):
  rng = np.random.default_rng(seed)
  loadings = np.zeros((12, 2))
  loadings[:6, 0] = loadings[6:, 1] = 1 / 6
  scores = np.zeros((2, 60))
  scores[0, :30] = scores[1, 30:] = 90.0
  scores += rng.gamma(2.0, 0.5, size=scores.shape)
  return rng.poisson(loadings @ scores)


def test_pilot_selects_planted_rank():
  counts = planted_rank2_counts()
  rng = dist.RngStream(5, dist.CHECK_STREAM + 3)
  loadings, scores = sampler.pilot_factorization(counts, 4, rng)
  assert loadings.shape == (12, 2)
  assert scores.shape == (2, 60)
  assert np.allclose(loadings.sum(axis=0), 1.0)
  assert np.all(loadings > 0) and np.all(scores > 0)
  fitted = (loadings @ scores).ravel()
  assert np.corrcoef(fitted, counts.ravel())[0, 1] > 0.9


def test_pilot_rank_capped_by_max_patterns():
  counts = planted_rank2_counts()
  rng = dist.RngStream(5, dist.CHECK_STREAM + 3)
  loadings, _ = sampler.pilot_factorization(counts, 1, rng)
  assert loadings.shape[1] == 1


def test_pilot_deterministic_for_fixed_stream():
  counts = planted_rank2_counts()
  runs = [sampler.pilot_factorization(counts, 4,
                                      dist.RngStream(5, dist.CHECK_STREAM + 3))
          for _ in range(2)]
  assert np.array_equal(runs[0][0], runs[1][0])
  assert np.array_equal(runs[0][1], runs[1][1])


def test_warm_start_spare_slots_start_spiked():
  # pure noise counts: the pilot keeps one pattern and slot 2 starts empty
  data = make_dataset(seed=4)
  hp = small_hyper()
  state, rng = seeded_state(data, hp, seed=4)
  sampler.warm_start_state(state, data, hp, rng, sampler.SweepPlan())
  assert np.all(state.loadings[:, 1] == 1e-8)
  for s in range(data.n_studies):
    assert np.all(state.cluster[s][0] == 2)
    assert np.all(state.cluster[s][1] == 1)
  assert model.state_audit(data, hp, state) == []


def test_warm_start_respects_pinned_cluster():
  data = make_dataset(seed=4)
  hp = small_hyper()
  state, rng = seeded_state(data, hp, seed=4)
  before = [d.copy() for d in state.cluster]
  sampler.warm_start_state(state, data, hp, rng, sampler.SweepPlan.degenerate())
  assert all(np.array_equal(a, b) for a, b in zip(before, state.cluster))
