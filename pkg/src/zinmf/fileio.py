"""File formats for datasets, ground truth, and fit outputs.

Layouts:
  study_<s>_counts.csv      variables x subjects, first column = variable name
  study_<s>_covariates.csv  subjects x covariates, first column = subject id
  truth_*.csv / truth_config.json   generator output
  chain_<c>/                 medians and prevalence as CSV, thinned draws as
                             npz, meta as JSON
  manifest.json              config echo, input/output digests, timestamps

Floats are written with repr, which round-trips exactly; everything here is
deterministic so reruns are byte-identical (timestamps live only in the
manifest).
"""

import csv
import hashlib
import json
import warnings
from pathlib import Path

import numpy as np

from .model import ChainOutput, CountDataset, StudyData
from .simulate import ScenarioTruth


def _format(value, integer=False):
  if integer:
    return str(int(value))
  return repr(float(value))


def write_matrix_csv(path, matrix, corner, row_labels, col_labels,
                     integer=False):
  matrix = np.asarray(matrix)
  if matrix.shape != (len(row_labels), len(col_labels)):
    raise ValueError(f"matrix shape {matrix.shape} does not match labels "
                     f"({len(row_labels)}, {len(col_labels)})")
  with open(path, "w", newline="") as fh:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow([corner, *col_labels])
    for label, row in zip(row_labels, matrix):
      writer.writerow([label, *(_format(v, integer) for v in row)])


def read_matrix_csv(path, integer=False):
  with open(path, newline="") as fh:
    rows = list(csv.reader(fh))
  if not rows or len(rows) < 2:
    raise ValueError(f"{path}: empty or header-only matrix file")
  col_labels = rows[0][1:]
  row_labels = [r[0] for r in rows[1:]]
  cast = int if integer else float
  values = np.array([[cast(v) for v in r[1:]] for r in rows[1:]],
                    dtype=np.int64 if integer else float)
  return row_labels, col_labels, values


def sha256_file(path):
  digest = hashlib.sha256()
  with open(path, "rb") as fh:
    for block in iter(lambda: fh.read(1 << 16), b""):
      digest.update(block)
  return digest.hexdigest()


def write_json(path, payload):
  with open(path, "w") as fh:
    json.dump(payload, fh, indent=2, sort_keys=True)
    fh.write("\n")


def read_json(path):
  with open(path) as fh:
    return json.load(fh)


# ---------------------------------------------------------------------------
# datasets


def write_dataset(out_dir, data):
  out_dir = Path(out_dir)
  out_dir.mkdir(parents=True, exist_ok=True)
  written = []
  for s, study in enumerate(data.studies, start=1):
    counts_path = out_dir / f"study_{s}_counts.csv"
    write_matrix_csv(counts_path, study.counts, "variable",
                     data.variable_names, study.subject_ids, integer=True)
    cov_path = out_dir / f"study_{s}_covariates.csv"
    write_matrix_csv(cov_path, study.covariates, "subject_id",
                     study.subject_ids, study.covariate_names)
    written += [counts_path, cov_path]
  return written


def read_dataset(data_dir):
  """Load study_<s>_*.csv pairs; prepends a unit intercept (with a warning)
  when the covariates file lacks one."""
  data_dir = Path(data_dir)
  counts_files = sorted(data_dir.glob("study_*_counts.csv"),
                        key=lambda p: int(p.stem.split("_")[1]))
  if not counts_files:
    raise FileNotFoundError(f"no study_<s>_counts.csv found in {data_dir}")
  studies = []
  variable_names = None
  for counts_path in counts_files:
    s = int(counts_path.stem.split("_")[1])
    cov_path = data_dir / f"study_{s}_covariates.csv"
    if not cov_path.exists():
      raise FileNotFoundError(
          f"missing intercept/covariates file for study {s}: expected "
          f"{cov_path.name} next to {counts_path.name}")
    var_names, subject_ids, counts = read_matrix_csv(counts_path,
                                                     integer=True)
    cov_subjects, cov_names, covariates = read_matrix_csv(cov_path)
    if cov_subjects != subject_ids:
      raise ValueError(f"study {s}: covariate subject ids do not match "
                       "the counts header")
    if "intercept" not in cov_names:
      warnings.warn(f"study {s}: no intercept column; prepending one")
      cov_names = ["intercept", *cov_names]
      covariates = np.column_stack([np.ones(len(subject_ids)), covariates])
    if variable_names is None:
      variable_names = var_names
    elif var_names != variable_names:
      raise ValueError(f"study {s}: variable names differ across studies")
    studies.append(StudyData(counts=counts, covariates=covariates,
                             subject_ids=subject_ids,
                             covariate_names=cov_names))
  return CountDataset(studies=studies, variable_names=variable_names)


# ---------------------------------------------------------------------------
# ground truth


def _pattern_names(k):
  return [f"pattern_{j + 1}" for j in range(k)]


def write_truth(out_dir, data, truth):
  out_dir = Path(out_dir)
  out_dir.mkdir(parents=True, exist_ok=True)
  n_patterns = truth.W_true.shape[1]
  patterns = _pattern_names(n_patterns)
  studies = [f"study_{s + 1}" for s in range(len(truth.H_true))]
  write_matrix_csv(out_dir / "truth_loadings.csv", truth.W_true, "variable",
                   data.variable_names, patterns)
  write_matrix_csv(out_dir / "truth_sharing.csv", truth.sharing, "pattern",
                   patterns, studies, integer=True)
  for s, study in enumerate(data.studies, start=1):
    ids = study.subject_ids
    write_matrix_csv(out_dir / f"truth_scores_study_{s}.csv",
                     truth.H_true[s - 1], "pattern", patterns, ids)
    write_matrix_csv(out_dir / f"truth_zero_mask_study_{s}.csv",
                     truth.zero_mask[s - 1], "variable", data.variable_names,
                     ids, integer=True)
    write_matrix_csv(out_dir / f"truth_cluster_labels_study_{s}.csv",
                     truth.cluster_labels[s - 1], "pattern", patterns, ids,
                     integer=True)
  write_json(out_dir / "truth_config.json", truth.generator_config)


def read_truth(truth_dir):
  truth_dir = Path(truth_dir)
  _, patterns, loadings = read_matrix_csv(truth_dir / "truth_loadings.csv")
  _, _, sharing = read_matrix_csv(truth_dir / "truth_sharing.csv",
                                  integer=True)
  scores, masks, labels, covariates = [], [], [], []
  s = 1
  while (truth_dir / f"truth_scores_study_{s}.csv").exists():
    _, _, h = read_matrix_csv(truth_dir / f"truth_scores_study_{s}.csv")
    _, _, mask = read_matrix_csv(
        truth_dir / f"truth_zero_mask_study_{s}.csv", integer=True)
    _, _, lbl = read_matrix_csv(
        truth_dir / f"truth_cluster_labels_study_{s}.csv", integer=True)
    scores.append(h)
    masks.append(mask.astype(np.int8))
    labels.append(lbl)
    s += 1
  config = read_json(truth_dir / "truth_config.json")
  # covariates live in the dataset files, written alongside by cmd_simulate
  for s in range(1, len(scores) + 1):
    cov_path = truth_dir / f"study_{s}_covariates.csv"
    if cov_path.exists():
      _, _, x = read_matrix_csv(cov_path)
      covariates.append(x)
  return ScenarioTruth(W_true=loadings, H_true=scores, zero_mask=masks,
                       sharing=sharing.astype(np.int8),
                       cluster_labels=labels, covariates=covariates,
                       generator_config=config)


# ---------------------------------------------------------------------------
# chain outputs


def write_chain(chain_dir, data, chain):
  chain_dir = Path(chain_dir)
  chain_dir.mkdir(parents=True, exist_ok=True)
  n_patterns = chain.loadings_median.shape[1]
  patterns = _pattern_names(n_patterns)
  studies = [f"study_{s + 1}" for s in range(chain.n_studies)]
  write_matrix_csv(chain_dir / "loadings_median.csv", chain.loadings_median,
                   "variable", data.variable_names, patterns)
  for s, study in enumerate(data.studies, start=1):
    write_matrix_csv(chain_dir / f"scores_median_study_{s}.csv",
                     chain.scores_median[s - 1], "pattern", patterns,
                     study.subject_ids)
    summary = np.column_stack([chain.zero_prob_median[s - 1],
                               chain.zero_prob_low[s - 1],
                               chain.zero_prob_high[s - 1]])
    write_matrix_csv(chain_dir / f"zero_prob_study_{s}.csv", summary,
                     "variable", data.variable_names,
                     ["median", "q025", "q975"])
  write_matrix_csv(chain_dir / "prevalence.csv", chain.prevalence, "pattern",
                   patterns, studies)

  arrays = {"loadings_draws": chain.loadings_draws}
  for s in range(chain.n_studies):
    arrays[f"zero_prob_draws_study_{s + 1}"] = chain.zero_prob_draws[s]
    arrays[f"cluster_draws_study_{s + 1}"] = chain.cluster_draws[s]
    arrays[f"pattern_score_mean_draws_study_{s + 1}"] = \
        chain.pattern_score_mean_draws[s]
    if chain.score_draws is not None:
      arrays[f"score_draws_study_{s + 1}"] = chain.score_draws[s]
  np.savez(chain_dir / "draws.npz", **arrays)

  meta = {k: v for k, v in chain.meta.items() if k != "runtime_s"}
  write_json(chain_dir / "meta.json", meta)


def read_chain(chain_dir):
  chain_dir = Path(chain_dir)
  meta = read_json(chain_dir / "meta.json")
  _, _, loadings_median = read_matrix_csv(chain_dir / "loadings_median.csv")
  _, _, prevalence = read_matrix_csv(chain_dir / "prevalence.csv")
  with np.load(chain_dir / "draws.npz") as npz:
    loadings_draws = npz["loadings_draws"]
    zero_prob_draws, cluster_draws, mean_draws, score_draws = [], [], [], []
    scores_median, zp_median, zp_low, zp_high = [], [], [], []
    s = 1
    while f"zero_prob_draws_study_{s}" in npz:
      zero_prob_draws.append(npz[f"zero_prob_draws_study_{s}"])
      cluster_draws.append(npz[f"cluster_draws_study_{s}"])
      mean_draws.append(npz[f"pattern_score_mean_draws_study_{s}"])
      if f"score_draws_study_{s}" in npz:
        score_draws.append(npz[f"score_draws_study_{s}"])
      _, _, h_med = read_matrix_csv(
          chain_dir / f"scores_median_study_{s}.csv")
      scores_median.append(h_med)
      _, _, zp = read_matrix_csv(chain_dir / f"zero_prob_study_{s}.csv")
      zp_median.append(zp[:, 0])
      zp_low.append(zp[:, 1])
      zp_high.append(zp[:, 2])
      s += 1
  return ChainOutput(
      loadings_draws=loadings_draws, zero_prob_draws=zero_prob_draws,
      cluster_draws=cluster_draws, pattern_score_mean_draws=mean_draws,
      score_draws=score_draws or None, loadings_median=loadings_median,
      scores_median=scores_median, zero_prob_median=zp_median,
      zero_prob_low=zp_low, zero_prob_high=zp_high, prevalence=prevalence,
      meta=meta)


# ---------------------------------------------------------------------------
# metrics and manifest


def write_metrics_csv(path, rows):
  """rows: iterable of (metric, pattern, study, value); pattern/study may be
  None for global metrics."""
  with open(path, "w", newline="") as fh:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["metric", "pattern", "study", "value"])
    for metric, pattern, study, value in rows:
      writer.writerow([
          metric,
          "" if pattern is None else pattern,
          "" if study is None else study,
          _format(value, integer=isinstance(value, (int, np.integer))),
      ])


def write_manifest(out_dir, command, config, inputs, started, finished,
                   version):
  """Digest inventory of every output file plus a full config echo."""
  out_dir = Path(out_dir)
  outputs = {}
  for path in sorted(out_dir.rglob("*")):
    if path.is_file() and path.name != "manifest.json":
      outputs[path.relative_to(out_dir).as_posix()] = sha256_file(path)
  payload = {
      "tool": "zinmf",
      "version": version,
      "command": command,
      "started_utc": started,
      "finished_utc": finished,
      "config": config,
      "inputs": inputs,
      "outputs": outputs,
  }
  write_json(out_dir / "manifest.json", payload)
  return payload
