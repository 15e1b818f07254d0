import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mia_audit.data import SyntheticSpec, gen_continuous
from mia_audit.dp_train import (ACCOUNTANT_METHOD, ClippedNoisyGradient,
                                DpSgdConfig, account_epsilon, dpsgd_step,
                                rdp_sampled_gaussian, train_dpsgd)
from mia_audit.errors import InvalidParameterError
from mia_audit.model import (MlpArchitecture, TrainConfig, accuracy,
                             init_params, mean_gradient, train)
from mia_audit.numeric import RngStream


def test_inside_ball_gives_exact_mean():
  g = np.array([[0.1, 0.2], [0.3, -0.1], [0.0, 0.5]])
  out = dpsgd_step(g, DpSgdConfig(clip_norm=1.0), RngStream(0))
  np.testing.assert_array_equal(out, g.sum(axis=0) / 3)


def test_single_gradient_is_rescaled():
  out = dpsgd_step([[3.0, 4.0]], DpSgdConfig(clip_norm=1.0, lot_size=1),
                   RngStream(0))
  np.testing.assert_allclose(out, [0.6, 0.8], rtol=0, atol=1e-15)


def test_noise_std_matches_mechanism():
  cfg = DpSgdConfig(clip_norm=1.0, noise_multiplier=1.0, lot_size=100)
  gen = RngStream(7).generator()
  draws = np.array([dpsgd_step(np.zeros((100, 3)), cfg, gen)
                    for _ in range(10**4)])
  np.testing.assert_allclose(draws.std(axis=0), 0.01, rtol=0.03)


def test_empty_lot_rejected():
  with pytest.raises(InvalidParameterError):
    dpsgd_step(np.zeros((0, 3)), DpSgdConfig(), RngStream(0))


@pytest.mark.parametrize('kwargs', [
    dict(clip_norm=0.0), dict(clip_norm=-1.0), dict(noise_multiplier=-0.1),
    dict(clip_norm=math.inf, noise_multiplier=1.0), dict(lot_size=0),
    dict(delta=1.0), dict(optimizer='rmsprop')
])
def test_invalid_config(kwargs):
  with pytest.raises(InvalidParameterError):
    DpSgdConfig(**kwargs)


def _flat(grads):
  return np.concatenate([g.ravel() for g in grads])


@pytest.mark.parametrize('clip,noise', [(0.05, 0.0), (0.5, 1.3), (math.inf, 0)])
def test_oracle_matches_per_record_backward_passes(clip, noise):
  arch = MlpArchitecture(5, (7, 6, 3))
  params = init_params(arch, RngStream(1))
  rng = np.random.default_rng(2)
  x = rng.standard_normal((12, 5))
  y = rng.integers(0, 3, 12)
  cfg = DpSgdConfig(clip_norm=clip, noise_multiplier=noise, lot_size=12)
  per_record = np.array([_flat(mean_gradient(params, x[i:i + 1], y[i:i + 1]))
                         for i in range(12)])
  expected = dpsgd_step(per_record, cfg, RngStream(3).generator())
  oracle = ClippedNoisyGradient(cfg)
  got = _flat(oracle(params, x, y, RngStream(3).generator()))
  np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-13)
  norms = np.linalg.norm(per_record, axis=1)
  np.testing.assert_allclose(oracle.clipped_norms[0], np.minimum(norms, clip),
                             rtol=1e-10)


def _task():
  return gen_continuous(SyntheticSpec(4, 6, 100, separation=3.0, seed=3))


def test_zero_noise_without_clipping_reproduces_plain_training():
  arch = MlpArchitecture.default(6, 4)
  cfg = TrainConfig(max_epochs=4, batch_size=32, optimizer='sgd',
                    learning_rate=0.05, seed=11)
  plain, _ = train(arch, _task(), cfg)
  dp = train_dpsgd(arch, _task(), cfg,
                   DpSgdConfig(clip_norm=math.inf, lot_size=32))
  assert dp.params.equals(plain)
  assert dp.budget.unbounded


def test_zero_noise_parity_with_adam():
  arch = MlpArchitecture.default(6, 4)
  cfg = TrainConfig(max_epochs=3, batch_size=16, seed=2)
  plain, _ = train(arch, _task(), cfg)
  dp = train_dpsgd(arch, _task(), cfg,
                   DpSgdConfig(clip_norm=math.inf, lot_size=16,
                               optimizer='adam'))
  assert dp.params.equals(plain)


def test_huge_noise_gives_chance_accuracy():
  spec = SyntheticSpec(10, 6, 60, separation=3.0, seed=3)
  data = gen_continuous(spec)
  test = gen_continuous(dataclasses.replace(spec, per_class=300))
  arch = MlpArchitecture.default(6, 10)

  def mean_acc(m):
    return np.mean([
        accuracy(
            train_dpsgd(arch, data,
                        TrainConfig(max_epochs=10, learning_rate=0.1,
                                    val_fraction=0.0, seed=s),
                        DpSgdConfig(noise_multiplier=m)).params, test)
        for s in range(8)
    ])

  assert mean_acc(0.0) > 0.8
  assert abs(mean_acc(100.0) - 0.1) < 0.1


@pytest.mark.parametrize('m', [0.0, 0.5, 4.0])
def test_clipped_norms_never_exceed_bound(m):
  res = train_dpsgd(MlpArchitecture.default(6, 4), _task(),
                    TrainConfig(max_epochs=3, learning_rate=0.1),
                    DpSgdConfig(clip_norm=0.3, noise_multiplier=m, lot_size=8))
  assert res.clipped_norms.size > 0
  assert np.all(res.clipped_norms <= 0.3)


def test_dp_training_is_deterministic():
  args = (MlpArchitecture.default(6, 4), _task(), TrainConfig(max_epochs=2),
          DpSgdConfig(noise_multiplier=1.0))
  a, b = train_dpsgd(*args), train_dpsgd(*args)
  assert a.params.equals(b.params)
  assert a.budget == b.budget


def test_report_fields():
  res = train_dpsgd(MlpArchitecture.default(6, 4), _task(),
                    TrainConfig(max_epochs=1),
                    DpSgdConfig(noise_multiplier=1.0, lot_size=40))
  rep = res.report
  assert rep['method'] == ACCOUNTANT_METHOD
  assert rep['steps'] == res.history.steps == 9
  assert rep['sampling_rate'] == pytest.approx(40 / 360)
  assert rep['delta'] == pytest.approx(1 / 400)
  assert rep['epsilon'] == res.budget.epsilon


def test_zero_steps_is_free():
  assert account_epsilon(DpSgdConfig(noise_multiplier=1.0), 0, 100).epsilon == 0


def test_zero_noise_is_unbounded():
  budget = account_epsilon(DpSgdConfig(), 10, 100)
  assert budget.unbounded and budget.delta == 0.01


def test_full_batch_rdp_is_gaussian_rdp():
  assert rdp_sampled_gaussian(1.0, 2.0, 5) == 5 / 8


def test_small_q_rdp_below_full_batch():
  for order in (2, 8, 32):
    assert rdp_sampled_gaussian(0.01, 1.0, order) < order / 2


@settings(max_examples=40, deadline=None)
@given(m=st.floats(0.05, 20), steps=st.integers(1, 5000),
       lot=st.integers(1, 500))
def test_epsilon_monotone(m, steps, lot):
  cfg = DpSgdConfig(noise_multiplier=m, lot_size=lot)
  eps = account_epsilon(cfg, steps, 1000).epsilon
  assert account_epsilon(cfg, 2 * steps, 1000).epsilon >= eps
  louder = DpSgdConfig(noise_multiplier=m * 1.5, lot_size=lot)
  assert account_epsilon(louder, steps, 1000).epsilon <= eps


def test_tiny_noise_at_image_scale_is_astronomical():
  # 15000 victim records, 10% held out, lots of 64, 50 epochs.
  steps = math.ceil(13500 / 64) * 50
  eps = account_epsilon(DpSgdConfig(noise_multiplier=0.001, lot_size=64),
                        steps, 13500, delta=1 / 15000).epsilon
  assert 1e9 <= eps < 1e11


def test_zero_noise_parity_in_float32():
  arch = MlpArchitecture.default(6, 4)
  cfg = TrainConfig(max_epochs=3, batch_size=16, optimizer='sgd',
                    learning_rate=0.05, precision='float32', seed=4)
  plain, _ = train(arch, _task(), cfg)
  dp = train_dpsgd(arch, _task(), cfg,
                   DpSgdConfig(clip_norm=math.inf, lot_size=16))
  assert dp.params.weights[0].dtype == np.float32
  assert dp.params.equals(plain)
