"""Black-box query interface to a trained classifier.

Every adversary talks to the victim through :class:`VictimAccess`, which
enforces what the deployment publishes (full posteriors or labels only),
applies any prediction-time defense and counts queries.
"""

from __future__ import annotations

import enum
import hashlib
import threading
from typing import Callable

import numpy as np

from mia_audit.errors import DefenseError, QueryBudgetExceeded
from mia_audit.model import ModelParams, forward_logits
from mia_audit.numeric import argmax_tiebreak, softmax


class AccessMode(str, enum.Enum):
  POSTERIOR = 'posterior'
  LABEL_ONLY = 'label_only'
  RR_LABEL = 'rr_label'


LogitTransform = Callable[[np.ndarray], np.ndarray]
# Receives the batch of labels and the inputs they answer.
LabelTransform = Callable[[np.ndarray, np.ndarray], np.ndarray]


class VictimAccess:
  """Counts and filters queries to a victim model.

  Args:
    params: The victim's parameters; never exposed to callers.
    mode: What the deployment publishes.
    logit_transform: Applied to a batch of logits before any output is
      derived (prediction-time noise).
    label_transform: Called as ``f(labels, inputs)`` on a batch before it is
      returned (randomized response).
    per_point_budget: Maximum number of answers for any single input; a
      query that would exceed it raises :class:`QueryBudgetExceeded`.
  """

  def __init__(self, params: ModelParams, mode: AccessMode = AccessMode.POSTERIOR,
               logit_transform: LogitTransform | None = None,
               label_transform: LabelTransform | None = None,
               per_point_budget: int | None = None):
    self._params = params
    self.mode = AccessMode(mode)
    self._logit_transform = logit_transform
    self._label_transform = label_transform
    self.per_point_budget = per_point_budget
    self._point_counts: dict[bytes, int] = {}
    self._queries = 0
    self._lock = threading.Lock()

  @property
  def queries(self) -> int:
    return self._queries

  @property
  def n_classes(self) -> int:
    return self._params.arch.n_classes

  @property
  def input_dim(self) -> int:
    return self._params.arch.input_dim

  def _charge(self, x: np.ndarray) -> None:
    with self._lock:
      if self.per_point_budget is not None:
        digests = [hashlib.blake2b(row.tobytes(), digest_size=16).digest()
                   for row in x]
        pending: dict[bytes, int] = {}
        for d in digests:
          pending[d] = pending.get(d, 0) + 1
          if self._point_counts.get(d, 0) + pending[d] > self.per_point_budget:
            raise QueryBudgetExceeded(
                f'per-point query budget of {self.per_point_budget} exhausted')
        for d, k in pending.items():
          self._point_counts[d] = self._point_counts.get(d, 0) + k
      self._queries += x.shape[0]

  def _logits(self, x: np.ndarray) -> np.ndarray:
    logits = forward_logits(self._params, x)
    if self._logit_transform is not None:
      logits = self._logit_transform(logits)
    return logits

  def posterior(self, x) -> np.ndarray:
    """Posterior vectors for a batch of inputs.

    Raises:
      DefenseError: if the deployment publishes labels only.
    """
    if self.mode is not AccessMode.POSTERIOR:
      raise DefenseError(f'victim publishes labels only ({self.mode.value})')
    x = np.atleast_2d(np.asarray(x, dtype=float))
    self._charge(x)
    return softmax(self._logits(x))

  def label(self, x) -> np.ndarray:
    """Published labels for a batch of inputs."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    self._charge(x)
    labels = argmax_tiebreak(self._logits(x))
    if self._label_transform is not None:
      labels = self._label_transform(labels, x)
    return np.asarray(labels, dtype=np.int64)
