"""Threshold-free attack AUC and classification accuracy."""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.stats import rankdata

from mia_audit.data import Dataset
from mia_audit.errors import InvalidParameterError
from mia_audit.model import ModelParams, predict_label


@dataclasses.dataclass(frozen=True)
class AucResult:
  auc: float
  n_members: int
  n_nonmembers: int


def auc(scores, is_member=None) -> AucResult:
  """Probability that a random member outscores a random non-member.

  Ties count one half. Computed from average ranks (the Mann-Whitney U
  statistic), which equals the trapezoidal area under the ROC curve.

  Args:
    scores: Membership scores, higher meaning more member-like, or an object
      with ``scores`` and ``is_member`` attributes.
    is_member: Ground-truth membership flags.
  """
  if is_member is None:
    scores, is_member = scores.scores, scores.is_member
  s = np.asarray(scores, dtype=float)
  m = np.asarray(is_member, dtype=bool)
  if s.shape != m.shape:
    raise InvalidParameterError('scores and membership flags differ in shape')
  n1 = int(m.sum())
  n0 = m.size - n1
  if n1 == 0 or n0 == 0:
    raise InvalidParameterError('AUC needs at least one member and one '
                                'non-member')
  ranks = rankdata(s, method='average')
  u = ranks[m].sum() - n1 * (n1 + 1) / 2.0
  return AucResult(float(u / (n1 * n0)), n1, n0)


def accuracy(model, ds: Dataset) -> float:
  """Fraction of records whose published label equals the ground truth.

  ``model`` is either :class:`ModelParams` or anything with a ``label``
  method (a possibly defended :class:`~mia_audit.victim.VictimAccess`).
  """
  if len(ds) == 0:
    raise InvalidParameterError('accuracy of an empty dataset')
  if isinstance(model, ModelParams):
    predicted = predict_label(model, ds.features)
  else:
    predicted = model.label(ds.features)
  return float(np.mean(np.asarray(predicted) == ds.labels))
