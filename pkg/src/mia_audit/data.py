"""Synthetic datasets, CSV ingestion and the four-way victim/shadow split."""

from __future__ import annotations

import csv
import dataclasses
import enum
import os

import numpy as np

from mia_audit.errors import DataFormatError, InvalidParameterError
from mia_audit.numeric import RngStream, as_generator


class FeatureKind(str, enum.Enum):
  CONTINUOUS = 'continuous'
  BINARY = 'binary'


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
  """Labeled records stored as a feature matrix and a label vector.

  Attributes:
    features: Array of shape ``(n, dim)``.
    labels: Integer array of shape ``(n,)`` with values in ``[0, n_classes)``.
    n_classes: Number of classes ``C``.
    kind: Whether features are real-valued or in {0, 1}.
  """

  features: np.ndarray
  labels: np.ndarray
  n_classes: int
  kind: FeatureKind = FeatureKind.CONTINUOUS

  def __post_init__(self):
    x = np.array(self.features, dtype=float, ndmin=2)
    y = np.array(self.labels, dtype=np.int64).reshape(-1)
    kind = FeatureKind(self.kind)
    if x.shape[0] != y.shape[0]:
      raise DataFormatError(
          f'{x.shape[0]} feature rows but {y.shape[0]} labels')
    if x.shape[1] == 0:
      raise DataFormatError('feature dimension must be positive')
    if not np.all(np.isfinite(x)):
      raise DataFormatError('features must be finite')
    if y.size and (y.min() < 0 or y.max() >= self.n_classes):
      raise DataFormatError(f'labels must lie in [0, {self.n_classes})')
    if kind is FeatureKind.BINARY and not np.all((x == 0) | (x == 1)):
      raise DataFormatError('binary dataset has features outside {0, 1}')
    x.setflags(write=False)
    y.setflags(write=False)
    object.__setattr__(self, 'features', x)
    object.__setattr__(self, 'labels', y)
    object.__setattr__(self, 'kind', kind)

  def __len__(self) -> int:
    return self.labels.shape[0]

  @property
  def dim(self) -> int:
    return self.features.shape[1]

  def subset(self, index) -> 'Dataset':
    return Dataset(self.features[index], self.labels[index], self.n_classes,
                   self.kind)

  def equals(self, other: 'Dataset') -> bool:
    return (self.n_classes == other.n_classes and self.kind == other.kind
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels))


@dataclasses.dataclass(frozen=True)
class FourWaySplit:
  victim_train: Dataset
  victim_test: Dataset
  shadow_train: Dataset
  shadow_test: Dataset

  def parts(self) -> tuple[Dataset, Dataset, Dataset, Dataset]:
    return (self.victim_train, self.victim_test, self.shadow_train,
            self.shadow_test)


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
  """Parameters of a synthetic classification task.

  Attributes:
    n_classes: Class count ``C``.
    dim: Feature dimension ``D``.
    per_class: Records generated per class. Fewer records per class means
      more overfitting and a stronger membership signal.
    separation: Continuous tasks only. Scale of the class means relative to
      the unit within-class noise.
    flip_rate: Binary tasks only. Per-bit probability of flipping a record
      away from its class template.
    class_divergence: Binary tasks only. Class templates are a shared random
      base with each bit independently flipped with this probability, so
      small values make classes hard to tell apart. 0.5 gives independent
      uniform templates.
    seed: Generator seed.
  """

  n_classes: int
  dim: int
  per_class: int
  separation: float = 1.0
  flip_rate: float = 0.05
  class_divergence: float = 0.01
  seed: int = 0

  def __post_init__(self):
    for name in ('n_classes', 'dim', 'per_class'):
      if getattr(self, name) < 1:
        raise InvalidParameterError(f'{name} must be positive')
    if self.separation < 0:
      raise InvalidParameterError('separation must be >= 0')
    if not 0 <= self.flip_rate <= 1:
      raise InvalidParameterError('flip_rate must lie in [0, 1]')
    if not 0 <= self.class_divergence <= 1:
      raise InvalidParameterError('class_divergence must lie in [0, 1]')


def _class_labels(spec: SyntheticSpec) -> np.ndarray:
  return np.repeat(np.arange(spec.n_classes), spec.per_class)


def gen_continuous(spec: SyntheticSpec) -> Dataset:
  """Gaussian clusters: ``x = separation * mu_c + N(0, I)``.

  Each class mean ``mu_c`` is drawn once from N(0, I).
  """
  rng = RngStream(spec.seed, 1).generator()
  means = rng.standard_normal((spec.n_classes, spec.dim))
  labels = _class_labels(spec)
  noise = rng.standard_normal((labels.size, spec.dim))
  features = spec.separation * means[labels] + noise
  return Dataset(features, labels, spec.n_classes, FeatureKind.CONTINUOUS)


def gen_binary(spec: SyntheticSpec) -> Dataset:
  """Bernoulli class templates in {0,1}^D with independent per-bit flips."""
  rng = RngStream(spec.seed, 2).generator()
  base = rng.random(spec.dim) < 0.5
  templates = (base ^ (rng.random((spec.n_classes, spec.dim))
                       < spec.class_divergence)).astype(float)
  labels = _class_labels(spec)
  flips = rng.random((labels.size, spec.dim)) < spec.flip_rate
  features = np.where(flips, 1.0 - templates[labels], templates[labels])
  return Dataset(features, labels, spec.n_classes, FeatureKind.BINARY)


def split4(ds: Dataset, rng) -> FourWaySplit:
  """Random permutation cut into four contiguous quarters.

  When ``len(ds)`` is not divisible by four the earlier parts take one extra
  record each, so sizes differ by at most one.
  """
  n = len(ds)
  if n < 4:
    raise InvalidParameterError(f'need at least 4 records to split, got {n}')
  perm = as_generator(rng).permutation(n)
  base, extra = divmod(n, 4)
  sizes = [base + (i < extra) for i in range(4)]
  bounds = np.cumsum([0] + sizes)
  parts = [ds.subset(np.sort(perm[bounds[i]:bounds[i + 1]]))
           for i in range(4)]
  return FourWaySplit(*parts)


def load_csv(path: str | os.PathLike, kind: FeatureKind | str,
             n_classes: int) -> Dataset:
  """Reads a dataset whose last column is the integer label.

  The first row is a header and is skipped.

  Raises:
    DataFormatError: on malformed rows (the message names the 1-based file
      line), labels outside ``[0, n_classes)`` or non-binary values in a
      binary dataset.
  """
  kind = FeatureKind(kind)
  rows, labels = [], []
  width = None
  with open(path, newline='', encoding='utf-8') as fh:
    reader = csv.reader(fh)
    next(reader, None)
    for lineno, row in enumerate(reader, start=2):
      if not row:
        continue
      if len(row) < 2:
        raise DataFormatError(f'line {lineno}: expected features and a label')
      if width is None:
        width = len(row)
      elif len(row) != width:
        raise DataFormatError(
            f'line {lineno}: expected {width} columns, got {len(row)}')
      try:
        feats = [float(v) for v in row[:-1]]
        label = int(row[-1])
      except ValueError as exc:
        raise DataFormatError(f'line {lineno}: {exc}') from None
      if not 0 <= label < n_classes:
        raise DataFormatError(
            f'line {lineno}: label {label} outside [0, {n_classes})')
      if kind is FeatureKind.BINARY and any(v not in (0.0, 1.0) for v in feats):
        raise DataFormatError(f'line {lineno}: binary feature not in {{0, 1}}')
      rows.append(feats)
      labels.append(label)
  if not rows:
    raise DataFormatError(f'{path}: no records')
  return Dataset(np.array(rows), np.array(labels), n_classes, kind)


def save_csv(ds: Dataset, path: str | os.PathLike) -> None:
  """Writes ``ds`` in the format read by :func:`load_csv`.

  Floats are written with ``repr`` so a load round-trip is lossless.
  """
  with open(path, 'w', newline='', encoding='utf-8') as fh:
    writer = csv.writer(fh, lineterminator='\n')
    writer.writerow([f'x{i}' for i in range(ds.dim)] + ['label'])
    for x, y in zip(ds.features, ds.labels):
      writer.writerow([repr(float(v)) for v in x] + [int(y)])
