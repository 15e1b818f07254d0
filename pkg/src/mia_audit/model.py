"""Fully connected ReLU classifier with softmax cross-entropy training.

The training loop in :func:`fit` is shared by plain and DP-SGD training: the
only difference between the two is the gradient oracle passed in, so with
noise and clipping disabled both produce bit-identical parameters.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from typing import Callable, Sequence

import numpy as np

from mia_audit.data import Dataset
from mia_audit.errors import DataFormatError, DivergenceError, InvalidParameterError
from mia_audit.numeric import RngStream, argmax_tiebreak, as_generator, softmax

CHECKPOINT_FORMAT = 'mia-audit/mlp'
CHECKPOINT_VERSION = 1


@dataclasses.dataclass(frozen=True)
class MlpArchitecture:
  """Layer layout; ``widths`` lists every layer's output size, ending in C."""

  input_dim: int
  widths: tuple[int, ...]
  activation: str = 'relu'

  def __post_init__(self):
    object.__setattr__(self, 'widths', tuple(int(w) for w in self.widths))
    if self.input_dim < 1 or not self.widths or min(self.widths) < 1:
      raise InvalidParameterError(f'bad architecture {self}')
    if self.activation != 'relu':
      raise InvalidParameterError('only relu hidden activations are supported')

  @property
  def n_classes(self) -> int:
    return self.widths[-1]

  @property
  def shapes(self) -> list[tuple[int, int]]:
    dims = (self.input_dim,) + self.widths
    return list(zip(dims[:-1], dims[1:]))

  @classmethod
  def default(cls, input_dim: int, n_classes: int,
              hidden: Sequence[int] = (64, 32)) -> 'MlpArchitecture':
    return cls(input_dim, tuple(hidden) + (n_classes,))


@dataclasses.dataclass(frozen=True, eq=False)
class ModelParams:
  """Weights ``W[l]`` of shape (fan_in, fan_out) and biases ``b[l]``."""

  arch: MlpArchitecture
  weights: tuple[np.ndarray, ...]
  biases: tuple[np.ndarray, ...]

  def __post_init__(self):
    if len(self.weights) != len(self.arch.shapes) or len(self.biases) != len(
        self.weights):
      raise InvalidParameterError('parameter count does not match architecture')
    for w, b, shape in zip(self.weights, self.biases, self.arch.shapes):
      if w.shape != shape or b.shape != (shape[1],):
        raise InvalidParameterError(
            f'parameter shapes {w.shape}, {b.shape} do not match {shape}')

  def arrays(self) -> list[np.ndarray]:
    out = []
    for w, b in zip(self.weights, self.biases):
      out += [w, b]
    return out

  @classmethod
  def from_arrays(cls, arch: MlpArchitecture,
                  arrays: Sequence[np.ndarray]) -> 'ModelParams':
    return cls(arch, tuple(arrays[0::2]), tuple(arrays[1::2]))

  def equals(self, other: 'ModelParams') -> bool:
    return self.arch == other.arch and all(
        np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclasses.dataclass(frozen=True)
class TrainConfig:
  """Optimisation settings.

  Early stopping holds out ``val_fraction`` of the training records, stops
  after ``patience`` epochs without a validation-accuracy improvement and
  restores the best parameters seen.
  """

  learning_rate: float = 1e-3
  max_epochs: int = 50
  batch_size: int = 64
  patience: int = 5
  val_fraction: float = 0.1
  optimizer: str = 'adam'
  precision: str = 'float64'
  seed: int = 0

  def __post_init__(self):
    if self.learning_rate < 0:
      raise InvalidParameterError('learning_rate must be >= 0')
    if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
      raise InvalidParameterError('max_epochs, batch_size, patience must be >= 1')
    if not 0 <= self.val_fraction < 1:
      raise InvalidParameterError('val_fraction must lie in [0, 1)')
    if self.optimizer not in ('adam', 'sgd'):
      raise InvalidParameterError(f'unknown optimizer {self.optimizer!r}')
    if self.precision not in ('float32', 'float64'):
      raise InvalidParameterError(f'unknown precision {self.precision!r}')


@dataclasses.dataclass
class TrainHistory:
  train_accuracy: list[float] = dataclasses.field(default_factory=list)
  val_accuracy: list[float] = dataclasses.field(default_factory=list)
  loss: list[float] = dataclasses.field(default_factory=list)
  best_epoch: int = 0
  steps: int = 0
  n_fit: int = 0

  @property
  def epochs(self) -> int:
    return len(self.loss)


def init_params(arch: MlpArchitecture, rng, dtype=np.float64) -> ModelParams:
  """He-normal weights, zero biases."""
  gen = as_generator(rng)
  weights, biases = [], []
  for fan_in, fan_out in arch.shapes:
    w = gen.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)
    weights.append(w.astype(dtype, copy=False))
    biases.append(np.zeros(fan_out, dtype=dtype))
  return ModelParams(arch, tuple(weights), tuple(biases))


def _as_batch(params: ModelParams, x) -> tuple[np.ndarray, bool]:
  x = np.asarray(x, dtype=params.weights[0].dtype)
  single = x.ndim == 1
  x = np.atleast_2d(x)
  if x.shape[1] != params.arch.input_dim:
    raise InvalidParameterError(
        f'input dimension {x.shape[1]} != model dimension '
        f'{params.arch.input_dim}')
  return x, single


def forward_logits(params: ModelParams, x) -> np.ndarray:
  """Logits for one record (1-D) or a batch (2-D)."""
  h, single = _as_batch(params, x)
  last = len(params.weights) - 1
  for i, (w, b) in enumerate(zip(params.weights, params.biases)):
    h = h @ w + b
    if i < last:
      h = np.maximum(h, 0.0)
  return h[0] if single else h


def posterior(params: ModelParams, x) -> np.ndarray:
  return softmax(forward_logits(params, x))


def predict_label(params: ModelParams, x):
  return argmax_tiebreak(forward_logits(params, x))


def accuracy(params: ModelParams, ds: Dataset) -> float:
  if len(ds) == 0:
    raise InvalidParameterError('accuracy of an empty dataset')
  return float(np.mean(predict_label(params, ds.features) == ds.labels))


def cross_entropy(params: ModelParams, x, y) -> float:
  logits = forward_logits(params, np.atleast_2d(x))
  z = logits - logits.max(axis=1, keepdims=True)
  logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
  return float(-np.mean(logp[np.arange(len(y)), y]))


def backprop(params: ModelParams, x: np.ndarray, y: np.ndarray):
  """Layer inputs and per-example output deltas of the cross-entropy loss.

  Returns:
    ``(inputs, deltas)``: for each layer ``l``, ``inputs[l]`` has shape
    (n, fan_in) and ``deltas[l]`` has shape (n, fan_out). The gradient of
    example ``i``'s loss is ``outer(inputs[l][i], deltas[l][i])`` for the
    weights and ``deltas[l][i]`` for the bias.
  """
  inputs, pre = [], []
  h = x
  last = len(params.weights) - 1
  for i, (w, b) in enumerate(zip(params.weights, params.biases)):
    inputs.append(h)
    z = h @ w + b
    pre.append(z)
    h = np.maximum(z, 0.0) if i < last else z
  delta = softmax(h)
  delta[np.arange(len(y)), y] -= 1.0
  deltas = [None] * len(params.weights)
  for i in range(last, -1, -1):
    deltas[i] = delta
    if i > 0:
      delta = (delta @ params.weights[i].T) * (pre[i - 1] > 0)
  return inputs, deltas


def per_example_sq_norms(inputs, deltas) -> np.ndarray:
  """Squared L2 norm of each example's full gradient vector."""
  total = 0.0
  for a, d in zip(inputs, deltas):
    dd = np.einsum('ij,ij->i', d, d)
    total = total + np.einsum('ij,ij->i', a, a) * dd + dd
  return total


def summed_gradient(inputs, deltas, scale=None) -> list[np.ndarray]:
  """Sum over examples of (optionally rescaled) per-example gradients."""
  grads = []
  for a, d in zip(inputs, deltas):
    if scale is not None:
      d = d * scale[:, None]
    grads += [a.T @ d, d.sum(axis=0)]
  return grads


def mean_gradient(params: ModelParams, x, y, rng=None) -> list[np.ndarray]:
  """Gradient of the mean cross-entropy over the batch."""
  inputs, deltas = backprop(params, x, y)
  n = len(y)
  return [g / n for g in summed_gradient(inputs, deltas)]


class _Adam:

  def __init__(self, arrays, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
    self.m = [np.zeros_like(a) for a in arrays]
    self.v = [np.zeros_like(a) for a in arrays]
    self.t = 0

  def step(self, arrays, grads):
    self.t += 1
    c1 = 1 - self.beta1**self.t
    c2 = 1 - self.beta2**self.t
    out = []
    for i, (p, g) in enumerate(zip(arrays, grads)):
      self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
      self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
      out.append(p - self.lr * (self.m[i] / c1) /
                 (np.sqrt(self.v[i] / c2) + self.eps))
    return out


class _Sgd:

  def __init__(self, arrays, lr):
    self.lr = lr

  def step(self, arrays, grads):
    return [p - self.lr * g for p, g in zip(arrays, grads)]


GradientOracle = Callable[[ModelParams, np.ndarray, np.ndarray,
                           np.random.Generator], list]


def fit(arch: MlpArchitecture, train_set: Dataset, config: TrainConfig,
        rng=None, gradient: GradientOracle = mean_gradient,
        on_step: Callable[[int], None] | None = None):
  """Minibatch training loop with early stopping.

  Args:
    arch: Network layout; its input and output sizes must match the data.
    train_set: Training records.
    config: Optimiser and early-stopping settings.
    rng: Randomness for initialisation, the validation hold-out, minibatch
      order and anything the gradient oracle draws. Defaults to a stream
      seeded with ``config.seed``.
    gradient: Callable returning the update direction for one minibatch.
    on_step: Called after each parameter update with the step count.

  Returns:
    ``(params, history)``.
  """
  if len(train_set) == 0:
    raise InvalidParameterError('cannot train on an empty dataset')
  if arch.input_dim != train_set.dim or arch.n_classes != train_set.n_classes:
    raise InvalidParameterError('architecture does not match the dataset')
  gen = as_generator(rng if rng is not None else RngStream(config.seed))
  dtype = np.dtype(config.precision)
  params = init_params(arch, gen, dtype)
  n = len(train_set)
  order = gen.permutation(n)
  n_val = int(round(config.val_fraction * n)) if n >= 10 else 0
  val_idx, fit_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
  features = train_set.features.astype(dtype, copy=False)
  x_fit, y_fit = features[fit_idx], train_set.labels[fit_idx]
  x_val, y_val = features[val_idx], train_set.labels[val_idx]

  arrays = params.arrays()
  if config.optimizer == 'adam':
    opt = _Adam(arrays, config.learning_rate)
  else:
    opt = _Sgd(arrays, config.learning_rate)
  history = TrainHistory(n_fit=len(fit_idx))
  best, best_val, wait = params, -1.0, 0
  for epoch in range(config.max_epochs):
    perm = gen.permutation(len(fit_idx))
    for start in range(0, len(perm), config.batch_size):
      batch = perm[start:start + config.batch_size]
      grads = gradient(params, x_fit[batch], y_fit[batch], gen)
      arrays = opt.step(arrays, grads)
      params = ModelParams.from_arrays(arch, arrays)
      history.steps += 1
      if on_step is not None:
        on_step(history.steps)
    loss = cross_entropy(params, x_fit, y_fit)
    if not math.isfinite(loss):
      raise DivergenceError(epoch + 1, loss)
    history.loss.append(loss)
    history.train_accuracy.append(
        float(np.mean(predict_label(params, x_fit) == y_fit)))
    if n_val == 0:
      best, history.best_epoch = params, epoch + 1
      continue
    val_acc = float(np.mean(predict_label(params, x_val) == y_val))
    history.val_accuracy.append(val_acc)
    if val_acc >= best_val:
      best, best_val, wait = params, val_acc, 0
      history.best_epoch = epoch + 1
    else:
      wait += 1
      if wait >= config.patience:
        break
  return best, history


def train(arch: MlpArchitecture, train_set: Dataset, config: TrainConfig,
          rng=None):
  """Non-private training; see :func:`fit`."""
  return fit(arch, train_set, config, rng)


def params_to_dict(params: ModelParams) -> dict:
  arch = params.arch
  return {
      'format': CHECKPOINT_FORMAT,
      'version': CHECKPOINT_VERSION,
      'dtype': str(params.weights[0].dtype),
      'architecture': {
          'input_dim': arch.input_dim,
          'widths': list(arch.widths),
          'activation': arch.activation,
      },
      'layers': [{
          'weight_shape': list(w.shape),
          'weight': [float(v) for v in w.ravel()],
          'bias': [float(v) for v in b],
      } for w, b in zip(params.weights, params.biases)],
  }


def params_from_dict(doc: dict) -> ModelParams:
  if doc.get('format') != CHECKPOINT_FORMAT:
    raise DataFormatError(f'not a model checkpoint: {doc.get("format")!r}')
  if doc.get('version') != CHECKPOINT_VERSION:
    raise DataFormatError(f'unsupported checkpoint version {doc.get("version")}')
  a = doc['architecture']
  arch = MlpArchitecture(a['input_dim'], tuple(a['widths']), a['activation'])
  dtype = np.dtype(doc.get('dtype', 'float64'))
  if dtype not in (np.float32, np.float64):
    raise DataFormatError(f'unsupported checkpoint dtype {dtype}')
  weights = tuple(
      np.array(layer['weight'], dtype=dtype).reshape(layer['weight_shape'])
      for layer in doc['layers'])
  biases = tuple(np.array(layer['bias'], dtype=dtype) for layer in doc['layers'])
  return ModelParams(arch, weights, biases)


def save_checkpoint(params: ModelParams, path: str | os.PathLike) -> None:
  with open(path, 'w', encoding='utf-8') as fh:
    json.dump(params_to_dict(params), fh)
    fh.write('\n')


def load_checkpoint(path: str | os.PathLike) -> ModelParams:
  with open(path, encoding='utf-8') as fh:
    return params_from_dict(json.load(fh))
