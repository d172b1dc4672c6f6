"""Command-line interface.

Subcommands: simulate | fit | evaluate | selfcheck. Exit codes: 0 success,
1 data or validation failure, 2 usage or config error.

Fit settings come from three layers: built-in defaults, then a flat JSON
config file (--config), then explicit flags. Unknown config keys are
rejected rather than ignored. --threads only schedules work (results do not
depend on it) so it is a flag, not a config key.
"""

import argparse
import json
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, checks, evaluate, fileio, simulate
from .model import HyperParameters, validate_dataset
from .sampler import RunConfig, SweepPlan, run_chain

_HYPER_KEYS = ("alpha_m", "beta_m", "alpha_w", "beta_w", "c", "epsilon",
               "gamma1_theta", "gamma2_theta", "tau0", "L_star", "R", "beta0")
_RUN_KEYS = ("iterations", "burn_in", "thin", "seed", "chains",
             "store_scores", "prune", "degenerate", "audit_every",
             "warm_start")

_RUN_DEFAULTS = dict(iterations=2000, burn_in=1000, thin=5, seed=0, chains=1,
                     store_scores=False, prune=False, degenerate=False,
                     audit_every=0, warm_start=True)


def _utc_now():
  return datetime.now(timezone.utc).isoformat()


def _fail(message, code):
  print(f"error: {message}", file=sys.stderr)
  return code


def _load_config(path):
  try:
    with open(path) as fh:
      config = json.load(fh)
  except json.JSONDecodeError as exc:
    raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
  if not isinstance(config, dict):
    raise ValueError(f"config {path} must be a JSON object")
  allowed = set(_HYPER_KEYS) | set(_RUN_KEYS)
  unknown = sorted(set(config) - allowed)
  if unknown:
    raise ValueError(f"unknown config keys: {', '.join(unknown)} "
                     f"(allowed: {', '.join(sorted(allowed))})")
  return config


def _fit_settings(args):
  """Defaults <- config file <- explicit flags."""
  config = _load_config(args.config) if args.config else {}
  run = dict(_RUN_DEFAULTS)
  run.update({k: config[k] for k in _RUN_KEYS if k in config})
  for key in ("iterations", "burn_in", "thin", "seed", "chains"):
    value = getattr(args, key)
    if value is not None:
      run[key] = value
  if args.prune:
    run["prune"] = True
  if args.store_scores:
    run["store_scores"] = True
  if args.degenerate:
    run["degenerate"] = True

  hyper_kwargs = {k: config[k] for k in _HYPER_KEYS if k in config}
  if "beta0" in hyper_kwargs and hyper_kwargs["beta0"] is not None:
    hyper_kwargs["beta0"] = tuple(hyper_kwargs["beta0"])
  hp = HyperParameters(**hyper_kwargs)
  hp.validate()
  return hp, run


def _hyper_echo(hp):
  return dict(alpha_m=hp.alpha_m, beta_m=hp.beta_m, alpha_w=hp.alpha_w,
              beta_w=hp.beta_w, c=hp.c, epsilon=hp.epsilon,
              gamma1_theta=hp.gamma1_theta, gamma2_theta=hp.gamma2_theta,
              tau0=hp.tau0, L_star=hp.L_star, R=hp.R,
              beta0=list(hp.beta0) if hp.beta0 is not None else None)


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args):
  started = _utc_now()
  generators = {
      "1": lambda: simulate.generate_scenario1(args.seed, scale=args.scale),
      "2": lambda: simulate.generate_scenario2(args.seed, scale=args.scale),
      "3": lambda: simulate.generate_scenario3(args.seed, scale=args.scale),
      "clustering": lambda: simulate.generate_clustering_scenario(
          args.seed, base=args.base, scale=args.scale),
  }
  try:
    data, truth = generators[args.scenario]()
    out_dir = Path(args.out)
    fileio.write_dataset(out_dir, data)
    fileio.write_truth(out_dir, data, truth)
  except (OSError, ValueError) as exc:
    return _fail(str(exc), 2)
  fileio.write_manifest(out_dir, "simulate", truth.generator_config,
                        inputs={}, started=started, finished=_utc_now(),
                        version=__version__)
  print(f"wrote scenario {args.scenario} (seed {args.seed}, "
        f"scale {args.scale}) to {out_dir}")
  return 0


# ---------------------------------------------------------------------------
# fit


def _run_one_chain(payload):
  data, hp, run_kwargs, degenerate = payload
  plan = SweepPlan.degenerate() if degenerate else None
  return run_chain(data, hp, RunConfig(**run_kwargs), plan=plan)


def cmd_fit(args):
  started = _utc_now()
  try:
    hp, run = _fit_settings(args)
  except (ValueError, OSError) as exc:
    return _fail(str(exc), 2)

  try:
    with warnings.catch_warnings(record=True) as caught:
      warnings.simplefilter("always")
      data = fileio.read_dataset(args.data)
    for w in caught:
      print(f"warning: {w.message}", file=sys.stderr)
  except (OSError, ValueError) as exc:
    return _fail(str(exc), 1)

  violations = validate_dataset(data)
  if violations:
    for v in violations:
      print(f"invalid dataset: {v}", file=sys.stderr)
    return 1

  n_chains = run.pop("chains")
  degenerate = run.pop("degenerate")
  threads = args.threads
  payloads = []
  for c in range(n_chains):
    run_kwargs = dict(run, chain_id=c)
    payloads.append((data, hp, run_kwargs, degenerate))

  try:
    if threads > 1 and n_chains > 1:
      with ProcessPoolExecutor(max_workers=min(threads, n_chains)) as pool:
        chains = list(pool.map(_run_one_chain, payloads))
    else:
      chains = [_run_one_chain(p) for p in payloads]
  except (ValueError, RuntimeError) as exc:
    return _fail(str(exc), 1)

  out_dir = Path(args.out)
  try:
    out_dir.mkdir(parents=True, exist_ok=True)
    for c, chain in enumerate(chains, start=1):
      fileio.write_chain(out_dir / f"chain_{c}", data, chain)
  except OSError as exc:
    return _fail(str(exc), 2)

  inputs = {p.name: fileio.sha256_file(p)
            for p in sorted(Path(args.data).glob("study_*.csv"))}
  config_echo = {
      "hyper": _hyper_echo(hp),
      "run": dict(run, chains=n_chains, degenerate=degenerate),
      "data_dir": str(args.data),
  }
  fileio.write_manifest(out_dir, "fit", config_echo, inputs=inputs,
                        started=started, finished=_utc_now(),
                        version=__version__)
  for c, chain in enumerate(chains, start=1):
    print(f"chain {c}: {chain.n_draws} draws stored, "
          f"runtime {chain.meta['runtime_s']:.1f}s")
  return 0


# ---------------------------------------------------------------------------
# evaluate


def _metric_rows(chain, truth, threshold):
  truth_patterns = truth.W_true.shape[1]
  match = evaluate.match_patterns(chain.loadings_median, truth.W_true,
                                  match_threshold=threshold)
  rows = []
  for t in range(truth_patterns):
    sim = match.matched_similarity(t)
    rows.append(("cosine_similarity", f"pattern_{t + 1}", None,
                 np.nan if sim is None else sim))
  rows.append(("matched_patterns", None, None, len(match.assignment)))
  if match.assignment:
    rows.append(("score_error", None, None,
                 evaluate.score_error(chain.scores_median, truth.H_true,
                                      chain.loadings_median, match,
                                      true_loadings=truth.W_true)))
  else:
    rows.append(("score_error", None, None, np.nan))
  rows.append(("reconstruction_error", None, None,
               evaluate.reconstruction_error(
                   chain.loadings_median, chain.scores_median,
                   truth.W_true, truth.H_true)))
  rows.append(("pattern_count", None, None, evaluate.pattern_count(chain)))

  labeled = [t for t in range(truth_patterns)
             if any(np.any(lbl[t] > 0) for lbl in truth.cluster_labels)]
  for t in labeled:
    true_labels = np.concatenate([lbl[t] for lbl in truth.cluster_labels])
    inverse = {t_: e for e, t_ in match.assignment.items()}
    if t not in inverse:
      rows.append(("ari_point_estimate", f"pattern_{t + 1}", None, np.nan))
      rows.append(("ari_tertile_baseline", f"pattern_{t + 1}", None, np.nan))
      continue
    e = inverse[t]
    estimate = evaluate.partition_point_estimate(chain, e, study=None)
    rows.append(("ari_point_estimate", f"pattern_{t + 1}", None,
                 evaluate.adjusted_rand_index(estimate, true_labels)))
    pooled_scores = np.concatenate([h[e] for h in chain.scores_median])
    baseline = evaluate.tertile_baseline(pooled_scores)
    rows.append(("ari_tertile_baseline", f"pattern_{t + 1}", None,
                 evaluate.adjusted_rand_index(baseline, true_labels)))
  return rows


def cmd_evaluate(args):
  started = _utc_now()
  fit_dir = Path(args.fit)
  chain_dir = fit_dir / f"chain_{args.chain}"
  if not chain_dir.exists():
    chain_dir = fit_dir
  try:
    chain = fileio.read_chain(chain_dir)
    truth = fileio.read_truth(args.truth)
    rows = _metric_rows(chain, truth, args.threshold)
  except (OSError, ValueError) as exc:
    return _fail(str(exc), 1)

  out_dir = Path(args.out)
  try:
    out_dir.mkdir(parents=True, exist_ok=True)
    fileio.write_metrics_csv(out_dir / "metrics.csv", rows)
  except OSError as exc:
    return _fail(str(exc), 2)
  inputs = {f"fit/{p.name}": fileio.sha256_file(p)
            for p in sorted(chain_dir.iterdir()) if p.is_file()}
  inputs.update({f"truth/{p.name}": fileio.sha256_file(p)
                 for p in sorted(Path(args.truth).glob("truth_*"))})
  fileio.write_manifest(out_dir, "evaluate",
                        {"fit": str(args.fit), "truth": str(args.truth),
                         "chain": args.chain, "threshold": args.threshold},
                        inputs=inputs, started=started, finished=_utc_now(),
                        version=__version__)
  for metric, pattern, study, value in rows:
    scope = f" {pattern}" if pattern else ""
    print(f"{metric}{scope}: {value}")
  return 0


# ---------------------------------------------------------------------------
# selfcheck


def cmd_selfcheck(args):
  all_ok = True
  for report in checks.conjugacy_report(n_pairs=args.pairs, seed=args.seed):
    status = "PASS" if report.ok else "FAIL"
    print(f"kernel {report.kernel}: {status} "
          f"(max rel err {report.max_error:.2e}, {report.n_pairs} pairs)")
    all_ok &= report.ok
  moments = checks.geweke_report(rounds=args.rounds, seed=args.seed)
  status = "PASS" if moments.ok else "FAIL"
  print(f"joint-distribution test: {status} "
        f"(max |z| {moments.max_z:.2f}, {moments.rounds} rounds)")
  all_ok &= moments.ok
  return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# parser


def build_parser():
  parser = argparse.ArgumentParser(
      prog="zinmf",
      description="Zero-inflated multi-study NMF: simulate, fit, evaluate.")
  parser.add_argument("--version", action="version", version=__version__)
  sub = parser.add_subparsers(dest="command", required=True)

  sim = sub.add_parser("simulate", help="generate benchmark data")
  sim.add_argument("--scenario", required=True,
                   choices=["1", "2", "3", "clustering"])
  sim.add_argument("--seed", type=int, default=0)
  sim.add_argument("--scale", type=float, default=1.0,
                   help="shrink study sizes by this factor (0 < scale <= 1)")
  sim.add_argument("--base", type=int, default=1, choices=[1, 2],
                   help="backbone scenario for the clustering variant")
  sim.add_argument("--out", required=True)
  sim.set_defaults(func=cmd_simulate)

  fit = sub.add_parser("fit", help="run the Gibbs sampler on a dataset")
  fit.add_argument("--data", required=True)
  fit.add_argument("--out", required=True)
  fit.add_argument("--config", help="flat JSON config file")
  fit.add_argument("--seed", type=int)
  fit.add_argument("--iterations", type=int)
  fit.add_argument("--burn-in", dest="burn_in", type=int)
  fit.add_argument("--thin", type=int)
  fit.add_argument("--chains", type=int)
  fit.add_argument("--threads", type=int,
                   default=int(os.environ.get("ZINMF_THREADS", "1")))
  fit.add_argument("--prune", action="store_true",
                   help="freeze patterns stuck in the spike")
  fit.add_argument("--store-scores", action="store_true",
                   help="store full per-subject score draws")
  fit.add_argument("--degenerate", action="store_true",
                   help="plain Poisson-Gamma baseline: no zero inflation, "
                        "single score component")
  fit.set_defaults(func=cmd_fit)

  ev = sub.add_parser("evaluate", help="score a fit against ground truth")
  ev.add_argument("--fit", required=True)
  ev.add_argument("--truth", required=True)
  ev.add_argument("--out", required=True)
  ev.add_argument("--chain", type=int, default=1)
  ev.add_argument("--threshold", type=float, default=0.8,
                  help="cosine threshold for pattern matching")
  ev.set_defaults(func=cmd_evaluate)

  check = sub.add_parser("selfcheck", help="run sampler correctness checks")
  check.add_argument("--pairs", type=int, default=100,
                     help="state pairs per kernel for the conditional/joint "
                          "check")
  check.add_argument("--rounds", type=int, default=50_000,
                     help="rounds for the joint-distribution test")
  check.add_argument("--seed", type=int, default=0)
  check.set_defaults(func=cmd_selfcheck)
  return parser


def main(argv=None):
  args = build_parser().parse_args(argv)
  return args.func(args)


if __name__ == "__main__":
  sys.exit(main())
