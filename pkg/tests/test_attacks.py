import numpy as np
import pytest

from mia_audit.attacks import (BITFLIP_GRID, GAUSSIAN_GRID, BinaryAttackModel,
                               MembershipScores, PerturbationConfig,
                               PerturbationKind, PosteriorEstimate,
                               attack_features, calibrate_p, lrn_score,
                               lrn_train, lrnfree_score, perturb,
                               sampling_attack, sampling_estimate,
                               train_shadow)
from mia_audit.data import Dataset, FourWaySplit, SyntheticSpec, gen_continuous, split4
from mia_audit.errors import DefenseError, InvalidParameterError
from mia_audit.metrics import auc
from mia_audit.model import (MlpArchitecture, ModelParams, TrainConfig,
                             accuracy, init_params, predict_label, train)
from mia_audit.numeric import RngStream
from mia_audit.victim import AccessMode, VictimAccess


def _linear(weights, bias=None):
  """Identity ReLU layer followed by ``x @ weights + bias``."""
  w = np.asarray(weights, dtype=float)
  b = np.zeros(w.shape[1]) if bias is None else np.asarray(bias, dtype=float)
  d = w.shape[0]
  arch = MlpArchitecture(d, (d, w.shape[1]))
  return ModelParams(arch, (np.eye(d), w), (np.zeros(d), b))


@pytest.fixture(scope='module')
def blob_split():
  ds = gen_continuous(SyntheticSpec(3, 5, 80, separation=4.0, seed=9))
  return split4(ds, RngStream(1))


def test_grids():
  assert len(GAUSSIAN_GRID) == len(BITFLIP_GRID) == 21
  assert GAUSSIAN_GRID[-1] == 0.2 and BITFLIP_GRID[-1] == 0.1
  assert BITFLIP_GRID[3] == 0.015


@pytest.mark.parametrize('kwargs', [dict(scale=-0.1),
                                    dict(kind='bitflip', scale=1.5),
                                    dict(n_samples=0)])
def test_perturbation_config_validation(kwargs):
  with pytest.raises(InvalidParameterError):
    PerturbationConfig(**kwargs)


@pytest.mark.parametrize('kind', list(PerturbationKind))
def test_zero_scale_leaves_record(kind):
  x = np.array([0.0, 1.0, 1.0, 0.0])
  np.testing.assert_array_equal(perturb(x, PerturbationConfig(kind, 0.0),
                                        RngStream(0)), x)


def test_full_bitflip_inverts():
  x = np.array([0.0, 1.0, 1.0, 0.0])
  np.testing.assert_array_equal(
      perturb(x, PerturbationConfig('bitflip', 1.0), RngStream(0)), 1 - x)


def test_bitflip_frequency():
  x = np.zeros((100, 1000))
  out = perturb(x, PerturbationConfig('bitflip', 0.1), RngStream(4))
  assert abs(out.mean() - 0.1) < 0.02


def test_gaussian_perturbation_std():
  out = perturb(np.zeros((200, 500)), PerturbationConfig('gaussian', 0.3),
                RngStream(2))
  assert abs(out.std() - 0.3) < 0.003


def test_bitflip_rejects_continuous_records():
  with pytest.raises(InvalidParameterError):
    perturb([0.5, 1.0], PerturbationConfig('bitflip', 0.1), RngStream(0))


def test_estimate_arithmetic():
  est = PosteriorEstimate(np.array([[25, 75]]), 100)
  np.testing.assert_array_equal(est.probabilities, [[0.25, 0.75]])


def test_constant_label_victim_gives_one_hot():
  params = _linear(np.zeros((2, 5)), [0, 0, 0, 1, 0])
  access = VictimAccess(params, AccessMode.LABEL_ONLY)
  est = sampling_estimate(access, np.ones((3, 2)),
                          PerturbationConfig('gaussian', 1.0, 40), RngStream(0))
  np.testing.assert_array_equal(est.probabilities, np.eye(5)[[3, 3, 3]])
  assert access.queries == 120


def test_zero_scale_estimate_is_predicted_label(blob_split):
  params = init_params(MlpArchitecture.default(5, 3), RngStream(3))
  x = blob_split.victim_train.features[:20]
  est = sampling_estimate(VictimAccess(params, AccessMode.LABEL_ONLY), x,
                          PerturbationConfig('gaussian', 0.0, 7), RngStream(0))
  np.testing.assert_array_equal(est.counts.argmax(axis=1),
                                predict_label(params, x))
  assert np.all(est.counts.max(axis=1) == 7)


def test_estimate_entries_are_multiples_of_inverse_n(blob_split):
  params = init_params(MlpArchitecture.default(5, 3), RngStream(3))
  est = sampling_estimate(VictimAccess(params), blob_split.victim_test.features,
                          PerturbationConfig('gaussian', 2.0, 13), RngStream(1))
  p = est.probabilities
  np.testing.assert_allclose(p * 13, np.round(p * 13), atol=1e-12)
  np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_estimate_converges_to_smoothed_posterior():
  # Two classes split by relu(x0) + relu(x1) > 0.3.
  params = _linear([[1.0, 0.0], [1.0, 0.0]], [0.0, 0.3])
  x = np.array([[0.1, 0.1], [0.4, 0.2]])
  p = 0.5
  est = sampling_estimate(VictimAccess(params, AccessMode.LABEL_ONLY), x,
                          PerturbationConfig('gaussian', p, 10**5),
                          RngStream(8)).probabilities
  # Monte Carlo oracle on an independent stream with 10**6 draws.
  gen = np.random.default_rng(123)
  for i, row in enumerate(x):
    noisy = row + p * gen.standard_normal((10**6, 2))
    s = np.maximum(noisy, 0).sum(axis=1)
    oracle = np.mean(s > 0.3)
    assert abs(est[i, 0] - oracle) * 2 <= 0.02


def test_estimate_is_independent_of_batching(monkeypatch, blob_split):
  import mia_audit.attacks as attacks
  params = init_params(MlpArchitecture.default(5, 3), RngStream(3))
  x = blob_split.victim_test.features[:30]
  cfg = PerturbationConfig('gaussian', 1.0, 11)
  full = sampling_estimate(VictimAccess(params), x, cfg, RngStream(5)).counts
  monkeypatch.setattr(attacks, '_MAX_BLOCK', 11 * 5 * 4)
  chunked = sampling_estimate(VictimAccess(params), x, cfg, RngStream(5)).counts
  np.testing.assert_array_equal(full, chunked)


def test_lrnfree_scores():
  access = VictimAccess(_linear([[0.0, np.log(4.0)]]))
  np.testing.assert_allclose(lrnfree_score(access, [[1.0]]), [0.8])
  uniform = VictimAccess(_linear(np.zeros((1, 4))))
  np.testing.assert_allclose(lrnfree_score(uniform, [[1.0], [2.0]]), 0.25)


def test_lrnfree_range(blob_split):
  params = init_params(MlpArchitecture.default(5, 3), RngStream(0))
  s = lrnfree_score(VictimAccess(params), blob_split.victim_train)
  assert np.all((s >= 1 / 3) & (s <= 1))


def test_attack_features_sorted_descending():
  np.testing.assert_array_equal(attack_features([[0.1, 0.7, 0.2]]),
                                [[0.7, 0.2, 0.1]])


@pytest.mark.parametrize('fn', ['lrnfree', 'lrn'])
def test_label_only_access_fails_closed(fn, blob_split):
  params = init_params(MlpArchitecture.default(5, 3), RngStream(0))
  access = VictimAccess(params, AccessMode.LABEL_ONLY)
  with pytest.raises(DefenseError):
    if fn == 'lrnfree':
      lrnfree_score(access, blob_split.victim_train)
    else:
      model = BinaryAttackModel(init_params(MlpArchitecture(3, (64, 2)),
                                            RngStream(0)))
      lrn_score(model, access, blob_split.victim_train)
  assert access.queries == 0


def test_shadow_matches_victim_procedure(blob_split):
  arch = MlpArchitecture.default(5, 3)
  cfg = TrainConfig(max_epochs=3)
  mirrored = FourWaySplit(blob_split.shadow_train, blob_split.shadow_test,
                          blob_split.victim_train, blob_split.victim_test)
  shadow = train_shadow(mirrored, arch, cfg, RngStream(2))
  victim, _ = train(arch, mirrored.shadow_train, cfg, RngStream(2))
  assert shadow.equals(victim)


def test_shadow_never_sees_victim_records(blob_split, monkeypatch):
  import mia_audit.attacks as attacks
  seen = []
  monkeypatch.setattr(attacks, 'train',
                      lambda arch, ds, cfg, rng: (seen.append(ds), train(
                          arch, ds, cfg, rng))[1])
  train_shadow(blob_split, MlpArchitecture.default(5, 3),
               TrainConfig(max_epochs=1), RngStream(0))
  assert len(seen) == 1 and seen[0] is blob_split.shadow_train


def test_shadow_learns_separable_data():
  ds = gen_continuous(SyntheticSpec(2, 2, 200, separation=10.0, seed=1))
  split = split4(ds, RngStream(0))
  shadow = train_shadow(split, MlpArchitecture.default(2, 2),
                        TrainConfig(learning_rate=0.01), RngStream(1))
  assert accuracy(shadow, split.shadow_train) >= 0.99


def _split_with_ids(n, dim=3, c=4):
  rng = np.random.default_rng(0)

  def part():
    return Dataset(rng.random((n, dim)), rng.integers(0, c, n), c)

  return FourWaySplit(part(), part(), part(), part())


def test_lrn_separates_confident_members(monkeypatch):
  import mia_audit.attacks as attacks
  split = _split_with_ids(150)
  members = split.shadow_train.features
  c = 4

  def fake_posterior(params, x):
    is_member = np.array([np.any(np.all(members == row, axis=1)) for row in x])
    return np.where(is_member[:, None], np.eye(c)[0], np.full(c, 1 / c))

  real = attacks.posterior
  monkeypatch.setattr(attacks, 'posterior', lambda p, x: (
      fake_posterior(p, x) if p is None else real(p, x)))
  model = lrn_train(None, split, TrainConfig(learning_rate=0.01), RngStream(0))
  s = model.score(np.vstack([np.tile(np.eye(c)[0], (150, 1)),
                             np.full((150, c), 1 / c)]))
  assert auc(s, np.r_[np.ones(150, bool), np.zeros(150, bool)]).auc > 0.99


def test_lrn_without_signal_is_chance(monkeypatch):
  import mia_audit.attacks as attacks
  split = _split_with_ids(300)
  gen = np.random.default_rng(1)
  real = attacks.posterior
  monkeypatch.setattr(
      attacks, 'posterior', lambda p, x: (gen.dirichlet(np.ones(4), len(x))
                                          if p is None else real(p, x)))
  model = lrn_train(None, split, TrainConfig(), RngStream(0))
  probs = gen.dirichlet(np.ones(4), 600)
  s = model.score(probs)
  assert abs(auc(s, np.r_[np.ones(300, bool), np.zeros(300, bool)]).auc -
             0.5) < 0.05


def test_lrn_scores_are_probabilities(blob_split):
  arch = MlpArchitecture.default(5, 3)
  shadow = train_shadow(blob_split, arch, TrainConfig(max_epochs=5),
                        RngStream(0))
  model = lrn_train(shadow, blob_split, TrainConfig(max_epochs=5),
                    RngStream(1))
  again = lrn_train(shadow, blob_split, TrainConfig(max_epochs=5),
                    RngStream(1))
  assert model.params.equals(again.params)
  s = lrn_score(model, VictimAccess(shadow), blob_split.victim_train)
  assert np.all((s >= 0) & (s <= 1))


def test_lrn_needs_both_classes(blob_split):
  empty = FourWaySplit(blob_split.victim_train, blob_split.victim_test,
                       blob_split.shadow_train,
                       blob_split.shadow_test.subset(slice(0, 0)))
  with pytest.raises(InvalidParameterError):
    lrn_train(init_params(MlpArchitecture.default(5, 3), RngStream(0)), empty)


def test_calibration_zero_grid(blob_split):
  shadow = init_params(MlpArchitecture.default(5, 3), RngStream(0))
  p, table = calibrate_p(shadow, blob_split, [0.0],
                         PerturbationConfig('gaussian', 0, 5), RngStream(0))
  assert p == 0.0 and len(table) == 1 and table[0][1] == 0.5


def test_calibration_is_deterministic_and_prefers_small_ties(blob_split):
  shadow = init_params(MlpArchitecture.default(5, 3), RngStream(0))
  args = (shadow, blob_split, [0.0, 0.5, 1.0], PerturbationConfig(
      'gaussian', 0, 5))
  first = calibrate_p(*args, RngStream(3))
  assert first == calibrate_p(*args, RngStream(3))
  p, table = first
  best = max(a for _, a in table)
  assert p == min(q for q, a in table if a == best)


def test_calibration_rejects_empty_grid(blob_split):
  shadow = init_params(MlpArchitecture.default(5, 3), RngStream(0))
  with pytest.raises(InvalidParameterError):
    calibrate_p(shadow, blob_split, [], PerturbationConfig(), RngStream(0))


def test_sampling_attack_on_constant_victim_is_chance(blob_split):
  params = _linear(np.zeros((5, 3)), [1, 0, 0])
  access = VictimAccess(params, AccessMode.LABEL_ONLY)
  scores = sampling_attack(access, blob_split, 0.1,
                           PerturbationConfig('gaussian', 0, 10), RngStream(0))
  assert auc(scores).auc == 0.5
  n = len(blob_split.victim_train) + len(blob_split.victim_test)
  assert access.queries == n * 10


def test_sampling_attack_works_label_only(blob_split):
  params, _ = train(MlpArchitecture.default(5, 3), blob_split.victim_train,
                    TrainConfig(max_epochs=5))
  access = VictimAccess(params, AccessMode.LABEL_ONLY)
  scores = sampling_attack(access, blob_split, 0.5,
                           PerturbationConfig('gaussian', 0, 20), RngStream(0))
  assert scores.adversary == 'sampling' and scores.n_samples == 20
  assert np.all((scores.scores >= 0) & (scores.scores <= 1))


def test_scores_csv_round_trip(tmp_path):
  s = MembershipScores(np.arange(4), np.array([0.1, 0.9, 1 / 3, 0.5]),
                       np.array([True, True, False, False]), 'sampling', 0.015,
                       100)
  s.to_csv(tmp_path / 's.csv')
  back = MembershipScores.from_csv(tmp_path / 's.csv')
  np.testing.assert_array_equal(back.scores, s.scores)
  np.testing.assert_array_equal(back.is_member, s.is_member)
  assert (back.adversary, back.p, back.n_samples) == ('sampling', 0.015, 100)
  header = (tmp_path / 's.csv').read_text().splitlines()[0]
  assert header == 'record_id,score,member,adversary,p,N'
