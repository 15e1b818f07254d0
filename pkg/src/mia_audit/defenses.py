"""Prediction-time defenses and their privacy budgets."""

from __future__ import annotations

import dataclasses
import hashlib
import math

import numpy as np

from mia_audit.dp_train import PrivacyBudget
from mia_audit.errors import InvalidParameterError
from mia_audit.model import ModelParams, forward_logits
from mia_audit.numeric import RngStream, as_generator, l2_clip
from mia_audit.victim import AccessMode, VictimAccess

S_PERCENTILE = 60
DP_LOGITS_GRID = (1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2)
RR_REVEAL_PROBABILITY = 0.75


@dataclasses.dataclass(frozen=True)
class DpLogitsConfig:
  """Logit clipping norm ``S``, noise multiplier ``m = sigma / S``, budget q."""

  clip_norm: float
  noise_multiplier: float
  query_budget: int = 1
  delta: float | None = None

  def __post_init__(self):
    if not self.clip_norm > 0:
      raise InvalidParameterError('clip norm S must be > 0')
    if self.noise_multiplier < 0:
      raise InvalidParameterError('noise multiplier must be >= 0')
    if self.query_budget < 1:
      raise InvalidParameterError('query budget must be >= 1')
    if self.delta is not None and not 0 < self.delta < 1:
      raise InvalidParameterError('delta must lie in (0, 1)')


@dataclasses.dataclass(frozen=True)
class RrConfig:
  """Randomized-response settings.

  Attributes:
    n_classes: Number of labels ``C``.
    seed: Seed of the deployment's response randomness.
    consistent: Answer repeated identical queries identically, so an
      adversary cannot average the noise away by asking again. Each distinct
      input then receives a single randomized response, which is what the
      ``ln(3 (C - 1))`` guarantee covers. ``False`` flips fresh coins on
      every query.
  """

  n_classes: int
  seed: int = 0
  consistent: bool = True

  def __post_init__(self):
    if self.n_classes < 2:
      raise InvalidParameterError('randomized response needs >= 2 classes')


def nearest_rank_percentile(values, percent: float) -> float:
  """Smallest value with at least ``percent``% of the data at or below it."""
  v = np.sort(np.asarray(values, dtype=float).ravel())
  if v.size == 0:
    raise InvalidParameterError('percentile of an empty set')
  rank = max(1, math.ceil(percent / 100.0 * v.size))
  return float(v[rank - 1])


def choose_S(params: ModelParams, records) -> float:
  """Logit clipping norm: 60th nearest-rank percentile of logit L2 norms."""
  x = getattr(records, 'features', records)
  x = np.atleast_2d(np.asarray(x, dtype=float))
  if x.shape[0] == 0:
    raise InvalidParameterError('need calibration records to choose S')
  norms = np.linalg.norm(forward_logits(params, x), axis=1)
  return nearest_rank_percentile(norms, S_PERCENTILE)


def dp_logits_perturb(logits, cfg: DpLogitsConfig, rng) -> np.ndarray:
  """Clips logits to norm S, then adds N(0, (m S)^2) to every coordinate."""
  clipped = l2_clip(logits, cfg.clip_norm)
  if cfg.noise_multiplier == 0:
    return clipped
  sigma = cfg.noise_multiplier * cfg.clip_norm
  return clipped + sigma * as_generator(rng).standard_normal(clipped.shape)


def dp_logits_epsilon(cfg: DpLogitsConfig, dataset_size: int) -> PrivacyBudget:
  """Epsilon of the Gaussian mechanism over ``q`` answers.

  ``eps = (q / m) * sqrt(2 ln(1.25 / delta))`` with ``delta = 1 / |D|``
  unless the config overrides it. Zero noise gives an unbounded epsilon.
  """
  delta = cfg.delta if cfg.delta is not None else 1.0 / dataset_size
  if cfg.noise_multiplier == 0:
    return PrivacyBudget(math.inf, delta, 'gaussian')
  eps = (cfg.query_budget / cfg.noise_multiplier) * math.sqrt(
      2 * math.log(1.25 / delta))
  return PrivacyBudget(eps, delta, 'gaussian')


def dp_logits_defense(params: ModelParams, cfg: DpLogitsConfig, rng,
                      mode: AccessMode = AccessMode.POSTERIOR) -> VictimAccess:
  """Wraps the victim so every answer uses freshly noised logits.

  Each distinct input may be answered at most ``cfg.query_budget`` times.
  """
  gen = as_generator(rng)
  return VictimAccess(params, mode,
                      logit_transform=lambda l: dp_logits_perturb(l, cfg, gen),
                      per_point_budget=cfg.query_budget)


def argmax_defense(params: ModelParams) -> VictimAccess:
  """Publishes only the top-1 label; posterior requests fail closed."""
  return VictimAccess(params, AccessMode.LABEL_ONLY)


def rr_apply(labels, cfg: RrConfig, rng):
  """Randomized response over ``C`` labels with two fair coins.

  First coin tails, or both coins heads: the true label. Otherwise a label
  drawn uniformly from the other ``C - 1`` classes. The true label therefore
  survives with probability 3/4.
  """
  y = np.asarray(labels, dtype=np.int64)
  scalar = y.ndim == 0
  y = np.atleast_1d(y)
  if y.size and (y.min() < 0 or y.max() >= cfg.n_classes):
    raise InvalidParameterError(f'label outside [0, {cfg.n_classes})')
  gen = as_generator(rng)
  coins = gen.integers(0, 2, size=(y.size, 2))
  other = gen.integers(0, cfg.n_classes - 1, size=y.size)
  other = other + (other >= y)
  keep = (coins[:, 0] == 0) | (coins[:, 1] == 1)
  out = np.where(keep, y, other)
  return int(out[0]) if scalar else out


def _keyed_rr(labels: np.ndarray, inputs: np.ndarray, cfg: RrConfig,
              key: bytes) -> np.ndarray:
  # Coins and the replacement class come from a keyed hash of the input, so
  # the response is a fixed function of (key, input).
  digests = np.frombuffer(b''.join(
      hashlib.blake2b(row.tobytes(), digest_size=16, key=key).digest()
      for row in np.ascontiguousarray(inputs, dtype=np.float64)),
                          dtype=np.uint64).reshape(-1, 2)
  coin1 = digests[:, 0] & 1
  coin2 = (digests[:, 0] >> 1) & 1
  # 64-bit modulo bias is below 2**-58 for any realistic class count.
  other = (digests[:, 1] % np.uint64(cfg.n_classes - 1)).astype(np.int64)
  y = np.asarray(labels, dtype=np.int64)
  other = other + (other >= y)
  keep = (coin1 == 0) | (coin2 == 1)
  return np.where(keep, y, other)


def rr_defense(params: ModelParams, cfg: RrConfig, rng=None) -> VictimAccess:
  """Label-only access whose labels pass through randomized response.

  Args:
    params: Victim parameters.
    cfg: Mechanism settings.
    rng: Source of the deployment's randomness; defaults to ``cfg.seed``.
  """
  gen = as_generator(rng if rng is not None else RngStream(cfg.seed))
  if cfg.consistent:
    key = gen.bytes(32)
    transform = lambda y, x: _keyed_rr(y, x, cfg, key)
  else:
    transform = lambda y, x: rr_apply(y, cfg, gen)
  return VictimAccess(params, AccessMode.RR_LABEL, label_transform=transform)


def rr_epsilon(cfg: RrConfig) -> PrivacyBudget:
  """``(ln(3 (C - 1)), 0)``."""
  return PrivacyBudget(math.log(3 * (cfg.n_classes - 1)), 0.0,
                       'randomized-response')


def rr_expected_accuracy(base_accuracy: float, n_classes: int) -> float:
  if n_classes < 2:
    raise InvalidParameterError('randomized response needs >= 2 classes')
  if not 0 <= base_accuracy <= 1:
    raise InvalidParameterError('accuracy must lie in [0, 1]')
  return (RR_REVEAL_PROBABILITY * base_accuracy +
          (1 - RR_REVEAL_PROBABILITY) / (n_classes - 1) * (1 - base_accuracy))


def defense_report(name: str, budget: PrivacyBudget | None, q: int | None,
                   **parameters) -> dict:
  return {
      'name': name,
      'parameters': parameters,
      'epsilon': None if budget is None else budget.epsilon,
      'delta': None if budget is None else budget.delta,
      'q': q,
  }
