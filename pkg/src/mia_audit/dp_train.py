"""DP-SGD: per-example clipping, Gaussian noise and privacy accounting.

The accountant tracks Renyi differential privacy of the sampled Gaussian
mechanism at integer orders and converts to (epsilon, delta) with the
standard ``rdp + log(1/delta) / (order - 1)`` bound. It is a conservative
stand-in for the moments accountant, so its epsilons are upper bounds and
will not match moments-accountant values digit for digit.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import special

from mia_audit.data import Dataset
from mia_audit.errors import InvalidParameterError
from mia_audit.model import (MlpArchitecture, ModelParams, TrainConfig,
                             TrainHistory, backprop, fit,
                             per_example_sq_norms, summed_gradient)
from mia_audit.numeric import as_generator, clip_factors

ACCOUNTANT_METHOD = 'rdp-sampled-gaussian'
DPSGD_GRID = (5e-4, 1e-3, 5e-3, 0.01, 0.05, 0.1, 0.5, 1.0)
RDP_ORDERS = tuple(range(2, 65)) + (80, 96, 128, 160, 192, 256, 384, 512)


@dataclasses.dataclass(frozen=True)
class PrivacyBudget:
  epsilon: float
  delta: float
  method: str = ''

  @property
  def unbounded(self) -> bool:
    return math.isinf(self.epsilon)


@dataclasses.dataclass(frozen=True)
class DpSgdConfig:
  """DP-SGD knobs.

  Attributes:
    clip_norm: Per-example gradient clipping bound ``C``; ``math.inf``
      disables clipping (only valid with zero noise).
    noise_multiplier: ``m = sigma / C``.
    lot_size: Examples per noisy update ``L``; replaces the training batch
      size.
    delta: Target delta; ``None`` means ``1 / |train set|``.
    optimizer: Update rule applied to the noisy gradient, ``'sgd'`` or
      ``'adam'``; overrides the training config's optimiser.
  """

  clip_norm: float = 1.0
  noise_multiplier: float = 0.0
  lot_size: int = 64
  delta: float | None = None
  optimizer: str = 'sgd'

  def __post_init__(self):
    if not self.clip_norm > 0:
      raise InvalidParameterError(f'clip norm must be > 0, got {self.clip_norm}')
    if self.noise_multiplier < 0:
      raise InvalidParameterError('noise multiplier must be >= 0')
    if math.isinf(self.clip_norm) and self.noise_multiplier > 0:
      raise InvalidParameterError('noise requires a finite clip norm')
    if self.lot_size < 1:
      raise InvalidParameterError('lot size must be >= 1')
    if self.delta is not None and not 0 < self.delta < 1:
      raise InvalidParameterError('delta must lie in (0, 1)')
    if self.optimizer not in ('sgd', 'adam'):
      raise InvalidParameterError(f'unknown optimizer {self.optimizer!r}')

  @property
  def noise_std(self) -> float:
    return 0.0 if self.noise_multiplier == 0 else (
        self.noise_multiplier * self.clip_norm)


def dpsgd_step(per_example_grads: np.ndarray, cfg: DpSgdConfig,
               rng) -> np.ndarray:
  """Clips each row to ``cfg.clip_norm``, sums, adds noise, divides by L.

  Args:
    per_example_grads: Array of shape (L, P), one flattened gradient per row.
    cfg: Clipping and noise settings.
    rng: Source of the Gaussian noise.

  Returns:
    The noisy mean gradient of shape (P,).
  """
  g = np.atleast_2d(np.asarray(per_example_grads, dtype=float))
  if g.shape[0] == 0:
    raise InvalidParameterError('empty lot')
  factors = clip_factors(np.linalg.norm(g, axis=1), cfg.clip_norm)
  total = (g * factors[:, None]).sum(axis=0)
  if cfg.noise_std > 0:
    total = total + cfg.noise_std * as_generator(rng).standard_normal(
        total.shape[0])
  return total / g.shape[0]


class ClippedNoisyGradient:
  """Gradient oracle for :func:`mia_audit.model.fit` implementing DP-SGD.

  Per-example gradient norms come from the per-example layer inputs and
  output deltas: for a dense layer the gradient of example ``i`` is the outer
  product ``a_i d_i^T`` whose norm is ``|a_i| |d_i|``. The clipped sum is
  then ``a^T (s * d)`` with ``s`` the per-example clip factors. Noise is one
  standard-normal vector over all parameters in layer order, matching
  :func:`dpsgd_step` on the flattened gradients.

  Attributes:
    clipped_norms: Norm of every clipped per-example gradient, one array per
      step.
  """

  def __init__(self, cfg: DpSgdConfig):
    self.cfg = cfg
    self.clipped_norms: list[np.ndarray] = []

  def __call__(self, params: ModelParams, x, y, gen) -> list[np.ndarray]:
    inputs, deltas = backprop(params, x, y)
    norms = np.sqrt(per_example_sq_norms(inputs, deltas))
    factors = clip_factors(norms, self.cfg.clip_norm)
    self.clipped_norms.append(norms * factors)
    grads = summed_gradient(inputs, deltas, factors)
    if self.cfg.noise_std > 0:
      noise = gen.standard_normal(sum(g.size for g in grads)).astype(
          grads[0].dtype, copy=False)
      offset = 0
      for i, g in enumerate(grads):
        grads[i] = g + self.cfg.noise_std * noise[offset:offset + g.size
                                                  ].reshape(g.shape)
        offset += g.size
    return [g / len(y) for g in grads]

  def all_clipped_norms(self) -> np.ndarray:
    if not self.clipped_norms:
      return np.zeros(0)
    return np.concatenate(self.clipped_norms)


@dataclasses.dataclass
class DpSgdResult:
  params: ModelParams
  budget: PrivacyBudget
  history: TrainHistory
  clipped_norms: np.ndarray
  report: dict


def train_dpsgd(arch: MlpArchitecture, train_set: Dataset,
                config: TrainConfig, dp: DpSgdConfig, rng=None) -> DpSgdResult:
  """Trains with DP-SGD through the same loop as plain training.

  Lots are the minibatches of a fresh random permutation each epoch, of size
  ``dp.lot_size``. With ``noise_multiplier == 0`` and ``clip_norm == inf`` the
  result is bit-identical to :func:`mia_audit.model.train` run with
  ``batch_size == dp.lot_size``, ``optimizer == dp.optimizer`` and the same
  randomness.
  """
  config = dataclasses.replace(config, batch_size=dp.lot_size,
                               optimizer=dp.optimizer)
  oracle = ClippedNoisyGradient(dp)
  params, history = fit(arch, train_set, config, rng, gradient=oracle)
  delta = dp.delta if dp.delta is not None else 1.0 / len(train_set)
  budget = account_epsilon(dp, history.steps, history.n_fit, delta=delta)
  report = accountant_report(dp, history.steps, history.n_fit, budget)
  return DpSgdResult(params, budget, history, oracle.all_clipped_norms(),
                     report)


def _log_add(a: float, b: float) -> float:
  lo, hi = min(a, b), max(a, b)
  if lo == -math.inf:
    return hi
  return hi + math.log1p(math.exp(lo - hi))


def _log_a_integer(q: float, sigma: float, order: int) -> float:
  # log E[(p/q)^order] for the sampled Gaussian, expanded binomially.
  log_a = -math.inf
  log_q, log_1mq = math.log(q), math.log1p(-q)
  for i in range(order + 1):
    term = (special.gammaln(order + 1) - special.gammaln(i + 1) -
            special.gammaln(order - i + 1) + i * log_q +
            (order - i) * log_1mq + (i * i - i) / (2 * sigma**2))
    log_a = _log_add(log_a, term)
  return log_a


def rdp_sampled_gaussian(q: float, sigma: float, order: int) -> float:
  """RDP of one step of the Gaussian mechanism on a q-subsample."""
  if q == 0:
    return 0.0
  if sigma == 0:
    return math.inf
  if q == 1:
    return order / (2 * sigma**2)
  return _log_a_integer(q, sigma, order) / (order - 1)


def account_epsilon(cfg: DpSgdConfig, steps: int, dataset_size: int,
                    delta: float | None = None) -> PrivacyBudget:
  """(epsilon, delta) after ``steps`` noisy updates at rate L / dataset_size.

  Args:
    cfg: DP-SGD settings; only the noise multiplier and lot size are used.
    steps: Number of noisy updates.
    dataset_size: Records the lots are drawn from.
    delta: Overrides ``cfg.delta``; the default is ``1 / dataset_size``.

  Returns:
    The budget; epsilon is ``inf`` when ``noise_multiplier == 0``.
  """
  if steps < 0:
    raise InvalidParameterError('steps must be >= 0')
  if dataset_size < 1:
    raise InvalidParameterError('dataset size must be >= 1')
  if delta is None:
    delta = cfg.delta if cfg.delta is not None else 1.0 / dataset_size
  if steps == 0:
    return PrivacyBudget(0.0, delta, ACCOUNTANT_METHOD)
  if cfg.noise_multiplier == 0:
    return PrivacyBudget(math.inf, delta, ACCOUNTANT_METHOD)
  q = min(1.0, cfg.lot_size / dataset_size)
  log_inv_delta = math.log(1 / delta)
  eps = min(steps * rdp_sampled_gaussian(q, cfg.noise_multiplier, a) +
            log_inv_delta / (a - 1) for a in RDP_ORDERS)
  return PrivacyBudget(float(max(eps, 0.0)), delta, ACCOUNTANT_METHOD)


def accountant_report(cfg: DpSgdConfig, steps: int, dataset_size: int,
                      budget: PrivacyBudget) -> dict:
  return {
      'mechanism': 'dp-sgd',
      'method': budget.method,
      'm': cfg.noise_multiplier,
      'C': cfg.clip_norm,
      'L': cfg.lot_size,
      'steps': steps,
      'sampling_rate': min(1.0, cfg.lot_size / dataset_size),
      'delta': budget.delta,
      'epsilon': budget.epsilon,
  }
