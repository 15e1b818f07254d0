"""Seeded numerics used throughout the toolkit.

Randomness flows from :class:`RngStream`, a (seed, stream id) pair that maps
to a Philox counter-based generator. Philox output depends only on its key and
counter, so draw sequences are identical across platforms; Gaussian draws use
numpy's ziggurat transform on top of it.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from mia_audit.errors import InvalidParameterError

_MASK64 = (1 << 64) - 1


@dataclasses.dataclass(frozen=True)
class RngStream:
  """Immutable handle for a reproducible random stream.

  Attributes:
    seed: 64-bit experiment seed.
    stream: 64-bit stream id; distinct ids give independent sequences.
  """

  seed: int
  stream: int = 0

  def generator(self) -> np.random.Generator:
    """Returns a fresh generator positioned at the start of this stream."""
    ss = np.random.SeedSequence([self.seed & _MASK64, self.stream & _MASK64])
    return np.random.Generator(np.random.Philox(ss))

  def fork(self, stream: int | str) -> 'RngStream':
    """Derives a child stream; string ids are hashed deterministically."""
    if isinstance(stream, str):
      stream = _fnv1a(stream)
    return RngStream(self.seed, (self.stream * 1_000_003 + stream) & _MASK64)


def _fnv1a(text: str) -> int:
  h = 0xCBF29CE484222325
  for byte in text.encode():
    h = ((h ^ byte) * 0x100000001B3) & _MASK64
  return h


def as_generator(rng: RngStream | np.random.Generator) -> np.random.Generator:
  if isinstance(rng, RngStream):
    return rng.generator()
  return rng


def gaussian_sample(rng, mean: float, sigma: float, n: int) -> np.ndarray:
  """Draws ``n`` i.i.d. samples from N(mean, sigma**2).

  Args:
    rng: An :class:`RngStream` or numpy ``Generator``.
    mean: Distribution mean.
    sigma: Standard deviation, must be non-negative.
    n: Number of draws.

  Returns:
    Array of shape ``(n,)``. ``sigma == 0`` yields ``n`` copies of ``mean``
    without consuming randomness.
  """
  if sigma < 0:
    raise InvalidParameterError(f'sigma must be >= 0, got {sigma}')
  if sigma == 0:
    return np.full(n, float(mean))
  return mean + sigma * as_generator(rng).standard_normal(n)


def softmax(logits: np.ndarray) -> np.ndarray:
  """Row-wise softmax with max subtraction; accepts 1-D or 2-D input."""
  z = np.asarray(logits)
  if z.dtype.kind != 'f':
    z = z.astype(float)
  z = z - z.max(axis=-1, keepdims=True)
  e = np.exp(z)
  return e / e.sum(axis=-1, keepdims=True)


def l2_clip(v: np.ndarray, bound: float) -> np.ndarray:
  """Scales ``v`` by ``min(1, bound / ||v||_2)``.

  Works row-wise on 2-D input. ``bound`` may be ``inf`` to disable clipping.
  """
  if not bound > 0:
    raise InvalidParameterError(f'clip bound must be > 0, got {bound}')
  v = np.asarray(v, dtype=float)
  norms = np.linalg.norm(v, axis=-1, keepdims=True)
  return v * clip_factors(norms, bound)


def clip_factors(norms: np.ndarray, bound: float) -> np.ndarray:
  """Per-norm scaling ``min(1, bound / norm)``; exactly 1.0 inside the ball.

  Floating inputs keep their precision, so float32 training stays float32.
  """
  norms = np.asarray(norms)
  if norms.dtype.kind != 'f':
    norms = norms.astype(float)
  cast = norms.dtype.type(bound)
  # Never let a narrower dtype round the bound up.
  if float(cast) > bound:
    cast = np.nextafter(cast, cast.dtype.type(0))
  bound = cast
  with np.errstate(divide='ignore', invalid='ignore'):
    factors = np.where(norms > bound, bound / norms, norms.dtype.type(1))
    # Round down where norm * factor would land one ulp above the bound.
    factors = np.where(norms * factors > bound, np.nextafter(factors, 0),
                       factors)
  return factors


def argmax_tiebreak(v: np.ndarray) -> int | np.ndarray:
  """Index of the maximum, lowest index on ties; row-wise for 2-D input."""
  v = np.asarray(v)
  if v.size == 0 or v.shape[-1] == 0:
    raise InvalidParameterError('argmax of an empty vector')
  idx = np.argmax(v, axis=-1)
  return int(idx) if v.ndim == 1 else idx
