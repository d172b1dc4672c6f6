"""Random draws and log densities shared by every sampling kernel.

Conventions: Gamma and Poisson quantities are parameterized by shape and
*rate* (inverse scale) throughout; the inverse gamma by shape and scale, so
that 1/X ~ Gamma(shape, rate=scale). Truncated normals have unit variance
and are truncated at zero to one side.

Streams are counter-based: ``RngStream(seed, stream_id)`` wraps a Philox
generator keyed by the pair, so the same pair reproduces the same draw
sequence bit for bit and distinct stream ids give independent streams
without any coordination between them.
"""

import numpy as np
from scipy import special

# Stream-id blocks. Chains use ids counted from CHAIN_STREAM, scenario
# generators from SIMULATION_STREAM, internal checks from CHECK_STREAM, so a
# fit never replays the stream that generated its data.
CHAIN_STREAM = 0
SIMULATION_STREAM = 1 << 48
CHECK_STREAM = 1 << 49

_TINY = np.finfo(float).tiny


class RngStream:
  """One reproducible random stream identified by (seed, stream_id).

  Both ids are taken modulo 2**64 and form the Philox key, so streams are
  independent by construction rather than by spacing a shared sequence.
  """

  def __init__(self, seed, stream_id=0):
    self.seed = int(seed) % (1 << 64)
    self.stream_id = int(stream_id) % (1 << 64)
    key = np.array([self.seed, self.stream_id], dtype=np.uint64)
    self.generator = np.random.Generator(np.random.Philox(key=key))

  def __repr__(self):
    return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def _require_positive(name, value):
  value = np.asarray(value, dtype=float)
  if not np.all(value > 0):
    raise ValueError(f"{name} must be positive")
  return value


def sample_gamma(shape, rate, rng, size=None):
  """Gamma draw with the given shape and rate (not scale).

  Draws are floored at the smallest positive float: numpy can underflow to
  exactly zero for very small shapes, and zero is outside the support of
  every Gamma density evaluated downstream.
  """
  shape = _require_positive("shape", shape)
  rate = _require_positive("rate", rate)
  draw = rng.generator.gamma(shape, 1.0 / rate, size=size)
  return np.maximum(draw, _TINY)


def sample_beta(a, b, rng, size=None):
  """Beta draw, clamped to the open interval so log(x) and log1p(-x) stay finite."""
  a = _require_positive("a", a)
  b = _require_positive("b", b)
  draw = rng.generator.beta(a, b, size=size)
  return np.clip(draw, _TINY, 1.0 - 1e-16)


def sample_inverse_gamma(shape, scale, rng, size=None):
  """Inverse-gamma draw: the reciprocal of a Gamma(shape, rate=scale) draw."""
  return 1.0 / sample_gamma(shape, scale, rng, size=size)


def multinomial_split(totals, weights, rng):
  """Split integer totals across the last axis of `weights`, proportionally.

  Implemented as a binomial cascade, which is both the conditional draw used
  by the sampler and numerically indifferent to the exact float sum of the
  normalized weights. `totals` must broadcast against `weights[..., k]`.
  Weights must be positive wherever the corresponding total is positive.
  """
  weights = np.asarray(weights, dtype=float)
  ncat = weights.shape[-1]
  remaining = np.broadcast_to(np.asarray(totals, dtype=np.int64),
                              weights.shape[:-1]).copy()
  remaining_weight = weights.sum(axis=-1)
  if np.any((remaining > 0) & (remaining_weight <= 0)):
    raise ValueError("degenerate weights: positive total with zero total weight")
  out = np.zeros(weights.shape, dtype=np.int64)
  for k in range(ncat - 1):
    with np.errstate(divide="ignore", invalid="ignore"):
      frac = np.where(remaining_weight > 0,
                      weights[..., k] / remaining_weight, 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    draw = rng.generator.binomial(remaining, frac)
    out[..., k] = draw
    remaining = remaining - draw
    remaining_weight = np.maximum(remaining_weight - weights[..., k], 0.0)
  out[..., -1] = remaining
  return out


def sample_multinomial(total, weights, rng):
  """Multinomial draw of `total` items over a 1-D weight vector.

  Weights may contain zeros (those cells get no mass) but must not be all
  zero; they are normalized internally.
  """
  weights = np.asarray(weights, dtype=float)
  if weights.ndim != 1:
    raise ValueError("weights must be one-dimensional")
  if np.any(weights < 0) or np.any(~np.isfinite(weights)):
    raise ValueError("weights must be finite and non-negative")
  if weights.sum() <= 0:
    raise ValueError("degenerate weights: no positive entry")
  total = int(total)
  if total < 0:
    raise ValueError("total must be non-negative")
  out = np.zeros(weights.shape, dtype=np.int64)
  positive = np.flatnonzero(weights > 0)
  out[positive] = multinomial_split(total, weights[positive], rng)
  return out


def _uniform_open(rng, size):
  # rng.random lives in [0, 1); push exact zeros into the open interval.
  return np.maximum(rng.generator.random(size), _TINY)


def truncated_normal_positive(mean, u):
  """Inverse-CDF positive-side draw given uniforms, robust deep in the tail.

  Works in survival space: if X ~ N(mean, 1) | X > 0 then
  P(X > x) / P(X > 0) = Phi(mean - x) / Phi(mean), solved for x with
  ndtri_exp so that means as low as -30 still give finite positive draws.
  """
  mean = np.asarray(mean, dtype=float)
  value = mean - special.ndtri_exp(np.log(u) + special.log_ndtr(mean))
  return np.maximum(value, _TINY)


def truncated_normal_negative(mean, u):
  """Mirror image of the positive-side draw: X ~ N(mean, 1) | X < 0."""
  mean = np.asarray(mean, dtype=float)
  value = mean + special.ndtri_exp(np.log(u) + special.log_ndtr(-mean))
  return np.minimum(value, -_TINY)


def sample_truncated_normal(mean, side, rng, size=None):
  """Unit-variance normal draw truncated to one side of zero.

  side is "positive" (support (0, inf)) or "negative" (support (-inf, 0)).
  """
  mean = np.asarray(mean, dtype=float)
  if size is None:
    size = mean.shape
  u = _uniform_open(rng, size)
  if side == "positive":
    return truncated_normal_positive(mean, u)
  if side == "negative":
    return truncated_normal_negative(mean, u)
  raise ValueError(f"side must be 'positive' or 'negative', got {side!r}")


def log_poisson_pmf(count, mean_value):
  """Poisson log pmf via the log-gamma function; exact at count 0."""
  count = np.asarray(count)
  mean_value = np.asarray(mean_value, dtype=float)
  return special.xlogy(count, mean_value) - mean_value - special.gammaln(count + 1.0)


def log_gamma_pdf(x, shape, rate):
  """Gamma log density in shape/rate form; -inf off the support."""
  x = np.asarray(x, dtype=float)
  shape = np.asarray(shape, dtype=float)
  rate = np.asarray(rate, dtype=float)
  with np.errstate(divide="ignore", invalid="ignore"):
    core = (special.xlogy(shape, rate) - special.gammaln(shape)
            + special.xlogy(shape - 1.0, x) - rate * x)
  return np.where(x > 0, core, -np.inf)


def log_beta_pdf(x, a, b):
  x = np.asarray(x, dtype=float)
  inside = (x > 0) & (x < 1)
  with np.errstate(divide="ignore", invalid="ignore"):
    core = (special.xlogy(np.asarray(a, float) - 1.0, x)
            + special.xlog1py(np.asarray(b, float) - 1.0, -x)
            - special.betaln(a, b))
  return np.where(inside, core, -np.inf)


def log_inverse_gamma_pdf(x, shape, scale):
  x = np.asarray(x, dtype=float)
  with np.errstate(divide="ignore", invalid="ignore"):
    core = (special.xlogy(shape, scale) - special.gammaln(shape)
            - special.xlogy(np.asarray(shape, float) + 1.0, x)
            - np.asarray(scale, float) / x)
  return np.where(x > 0, core, -np.inf)


def log_normal_pdf(x, mean, precision=1.0):
  """Normal log density parameterized by precision (inverse variance)."""
  x = np.asarray(x, dtype=float)
  precision = np.asarray(precision, dtype=float)
  return 0.5 * (np.log(precision) - np.log(2.0 * np.pi)) \
      - 0.5 * precision * (x - np.asarray(mean, float)) ** 2


def standard_normal_cdf(x):
  """Phi(x). erfc-based, so Phi(-37) is still strictly positive."""
  return special.ndtr(np.asarray(x, dtype=float))
