"""Membership adversaries.

* LRN: a shadow model plus a binary classifier over sorted posteriors.
* LRN-Free: the maximum posterior entry, thresholded later by the AUC.
* Sampling: rebuilds a posterior surrogate from the labels of perturbed
  copies of a record, so it works when the victim publishes labels only.
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import os
from typing import Sequence

import numpy as np

from mia_audit.data import Dataset, FeatureKind, FourWaySplit
from mia_audit.errors import InvalidParameterError
from mia_audit.metrics import auc
from mia_audit.model import (MlpArchitecture, ModelParams, TrainConfig,
                             posterior, train)
from mia_audit.numeric import as_generator
from mia_audit.victim import AccessMode, VictimAccess

ATTACK_HIDDEN = 64
DEFAULT_SAMPLES = 100
GAUSSIAN_GRID = tuple(round(i * 0.01, 10) for i in range(21))
BITFLIP_GRID = tuple(round(i * 0.005, 10) for i in range(21))
# Bounds the (records x samples x dim) perturbation block held in memory.
_MAX_BLOCK = 4_000_000


class PerturbationKind(str, enum.Enum):
  GAUSSIAN = 'gaussian'
  BITFLIP = 'bitflip'


@dataclasses.dataclass(frozen=True)
class PerturbationConfig:
  """How the sampling adversary perturbs a record.

  Attributes:
    kind: ``gaussian`` adds N(0, scale**2) per coordinate; ``bitflip`` flips
      each binary coordinate with probability ``scale``.
    scale: Perturbation scale ``p``.
    n_samples: Perturbed copies queried per record ``N``.
  """

  kind: PerturbationKind = PerturbationKind.BITFLIP
  scale: float = 0.0
  n_samples: int = DEFAULT_SAMPLES

  def __post_init__(self):
    object.__setattr__(self, 'kind', PerturbationKind(self.kind))
    if self.scale < 0:
      raise InvalidParameterError('perturbation scale must be >= 0')
    if self.kind is PerturbationKind.BITFLIP and self.scale > 1:
      raise InvalidParameterError('bit-flip probability must lie in [0, 1]')
    if self.n_samples < 1:
      raise InvalidParameterError('need at least one sample per record')

  def with_scale(self, scale: float) -> 'PerturbationConfig':
    return dataclasses.replace(self, scale=scale)

  @staticmethod
  def default_grid(kind) -> tuple[float, ...]:
    if PerturbationKind(kind) is PerturbationKind.GAUSSIAN:
      return GAUSSIAN_GRID
    return BITFLIP_GRID

  @staticmethod
  def for_dataset(ds: Dataset, **kwargs) -> 'PerturbationConfig':
    kind = (PerturbationKind.BITFLIP if ds.kind is FeatureKind.BINARY else
            PerturbationKind.GAUSSIAN)
    return PerturbationConfig(kind, **kwargs)


@dataclasses.dataclass(frozen=True)
class PosteriorEstimate:
  """Label histograms of the perturbed queries, one row per record."""

  counts: np.ndarray
  n_samples: int

  @property
  def probabilities(self) -> np.ndarray:
    return self.counts / self.n_samples


@dataclasses.dataclass(frozen=True, eq=False)
class MembershipScores:
  """Scores for a pool of records; higher means more member-like."""

  record_ids: np.ndarray
  scores: np.ndarray
  is_member: np.ndarray
  adversary: str
  p: float | None = None
  n_samples: int | None = None

  CSV_HEADER = ('record_id', 'score', 'member', 'adversary', 'p', 'N')

  def to_csv(self, path: str | os.PathLike) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as fh:
      writer = csv.writer(fh, lineterminator='\n')
      writer.writerow(self.CSV_HEADER)
      p = '' if self.p is None else repr(float(self.p))
      n = '' if self.n_samples is None else int(self.n_samples)
      for rid, s, m in zip(self.record_ids, self.scores, self.is_member):
        writer.writerow([int(rid), repr(float(s)), int(m), self.adversary, p, n])

  @classmethod
  def from_csv(cls, path: str | os.PathLike) -> 'MembershipScores':
    with open(path, newline='', encoding='utf-8') as fh:
      rows = list(csv.DictReader(fh))
    if not rows:
      raise InvalidParameterError(f'{path}: no scores')
    first = rows[0]
    return cls(
        np.array([int(r['record_id']) for r in rows]),
        np.array([float(r['score']) for r in rows]),
        np.array([r['member'] == '1' for r in rows]),
        first['adversary'],
        float(first['p']) if first['p'] else None,
        int(first['N']) if first['N'] else None,
    )


def _pool(split: FourWaySplit, victim_side: bool = True):
  members, nonmembers = ((split.victim_train, split.victim_test) if victim_side
                         else (split.shadow_train, split.shadow_test))
  x = np.concatenate([members.features, nonmembers.features])
  is_member = np.r_[np.ones(len(members), bool), np.zeros(len(nonmembers), bool)]
  return x, is_member


def _records(records) -> np.ndarray:
  if isinstance(records, Dataset):
    return records.features
  return np.atleast_2d(np.asarray(records, dtype=float))


def train_shadow(split: FourWaySplit, arch: MlpArchitecture,
                 config: TrainConfig, rng=None) -> ModelParams:
  """Trains the adversary's surrogate on ``shadow_train`` only.

  Uses exactly the victim's training procedure.
  """
  params, _ = train(arch, split.shadow_train, config, rng)
  return params


def attack_features(posteriors: np.ndarray) -> np.ndarray:
  """Posterior entries sorted in descending order."""
  return -np.sort(-np.atleast_2d(posteriors), axis=1)


@dataclasses.dataclass(frozen=True)
class BinaryAttackModel:
  """One-hidden-layer member/non-member classifier over sorted posteriors.

  The network has two output logits; the member probability is the softmax
  of the pair, i.e. a sigmoid of their difference.
  """

  params: ModelParams

  def score(self, posteriors: np.ndarray) -> np.ndarray:
    return posterior(self.params, attack_features(posteriors))[:, 1]


def lrn_train(shadow: ModelParams, split: FourWaySplit,
              config: TrainConfig | None = None, rng=None) -> BinaryAttackModel:
  """Fits the attack classifier on shadow posteriors.

  Records from ``shadow_train`` are labelled members, ``shadow_test``
  non-members.
  """
  if len(split.shadow_train) == 0 or len(split.shadow_test) == 0:
    raise InvalidParameterError('attack training needs members and '
                                'non-members')
  x, is_member = _pool(split, victim_side=False)
  feats = attack_features(posterior(shadow, x))
  attack_set = Dataset(feats, is_member.astype(np.int64), 2)
  arch = MlpArchitecture(feats.shape[1], (ATTACK_HIDDEN, 2))
  params, _ = train(arch, attack_set, config or TrainConfig(), rng)
  return BinaryAttackModel(params)


def lrn_score(model: BinaryAttackModel, access: VictimAccess,
              records) -> np.ndarray:
  """Attack-classifier member probability on the victim's posteriors."""
  return model.score(access.posterior(_records(records)))


def lrnfree_score(access: VictimAccess, records) -> np.ndarray:
  """Largest posterior entry per record."""
  return access.posterior(_records(records)).max(axis=1)


def perturb(x, cfg: PerturbationConfig, rng) -> np.ndarray:
  """Applies ``cfg``'s perturbation independently to each coordinate.

  Args:
    x: One record (1-D) or a batch (2-D).
    cfg: Perturbation kind and scale; ``n_samples`` is ignored.
    rng: Randomness source; untouched when ``cfg.scale == 0``.

  Raises:
    InvalidParameterError: for bit flips on non-binary features.
  """
  x = np.asarray(x, dtype=float)
  if cfg.kind is PerturbationKind.BITFLIP and not np.all((x == 0) | (x == 1)):
    raise InvalidParameterError('bit-flip perturbation needs binary features')
  if cfg.scale == 0:
    return x.copy()
  gen = as_generator(rng)
  if cfg.kind is PerturbationKind.GAUSSIAN:
    return x + cfg.scale * gen.standard_normal(x.shape)
  flips = gen.random(x.shape) < cfg.scale
  return np.where(flips, 1.0 - x, x)


def sampling_estimate(access: VictimAccess, records, cfg: PerturbationConfig,
                      rng) -> PosteriorEstimate:
  """Label histograms over ``N`` perturbed copies of each record.

  Issues exactly ``len(records) * N`` label queries. Randomness is consumed
  record by record, so results do not depend on internal batching.
  """
  x = _records(records)
  gen = as_generator(rng)
  n, c = cfg.n_samples, access.n_classes
  counts = np.zeros((x.shape[0], c), dtype=np.int64)
  chunk = max(1, _MAX_BLOCK // (n * x.shape[1]))
  for start in range(0, x.shape[0], chunk):
    block = x[start:start + chunk]
    copies = perturb(np.repeat(block, n, axis=0), cfg, gen)
    labels = access.label(copies).reshape(block.shape[0], n)
    rows = np.repeat(np.arange(block.shape[0]), n)
    np.add.at(counts[start:start + block.shape[0]], (rows, labels.ravel()), 1)
  return PosteriorEstimate(counts, n)


def _label_only(params: ModelParams) -> VictimAccess:
  return VictimAccess(params, AccessMode.LABEL_ONLY)


def calibrate_p(shadow: ModelParams, split: FourWaySplit,
                grid: Sequence[float], template: PerturbationConfig,
                rng) -> tuple[float, list[tuple[float, float]]]:
  """Picks the perturbation scale that maximises the attack AUC on the shadow.

  The shadow is queried through a label-only interface on ``shadow_train``
  (members) and ``shadow_test`` (non-members); the victim is never touched.

  Returns:
    ``(p_star, table)`` where ``table`` lists ``(p, auc)`` in grid order. Ties
    resolve to the smaller ``p``.
  """
  if len(grid) == 0:
    raise InvalidParameterError('empty perturbation grid')
  gen = as_generator(rng)
  access = _label_only(shadow)
  x, is_member = _pool(split, victim_side=False)
  table = []
  for p in grid:
    est = sampling_estimate(access, x, template.with_scale(p), gen)
    table.append((float(p), auc(est.probabilities.max(axis=1),
                                is_member).auc))
  best = max(table, key=lambda row: (row[1], -row[0]))
  return best[0], table


def sampling_attack(access: VictimAccess, split: FourWaySplit, p_star: float,
                    template: PerturbationConfig, rng,
                    attack_model: BinaryAttackModel | None = None
                    ) -> MembershipScores:
  """Scores ``victim_train`` (members) and ``victim_test`` from labels alone.

  The default back-end is LRN-Free on the label histogram; passing an
  ``attack_model`` scores the histogram with the LRN classifier instead.
  """
  cfg = template.with_scale(p_star)
  x, is_member = _pool(split)
  probs = sampling_estimate(access, x, cfg, rng).probabilities
  if attack_model is None:
    scores, name = probs.max(axis=1), 'sampling'
  else:
    scores, name = attack_model.score(probs), 'sampling-lrn'
  return MembershipScores(np.arange(len(x)), scores, is_member, name,
                          float(p_star), cfg.n_samples)


def score_victim_pool(adversary: str, access: VictimAccess,
                      split: FourWaySplit,
                      attack_model: BinaryAttackModel | None = None
                      ) -> MembershipScores:
  """Runs a posterior-based adversary over ``victim_train`` and ``victim_test``."""
  x, is_member = _pool(split)
  # Repeated records are queried once and share the answer, so a per-input
  # query budget is spent only on distinct inputs.
  unique, inverse = np.unique(x, axis=0, return_inverse=True)
  if adversary == 'lrnfree':
    scores = lrnfree_score(access, unique)
  elif adversary == 'lrn':
    if attack_model is None:
      raise InvalidParameterError('LRN scoring needs a trained attack model')
    scores = lrn_score(attack_model, access, unique)
  else:
    raise InvalidParameterError(f'unknown posterior adversary {adversary!r}')
  scores = scores[inverse.ravel()]
  return MembershipScores(np.arange(len(x)), scores, is_member, adversary)
