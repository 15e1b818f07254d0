import dataclasses
import json
import math

import numpy as np
import pytest

from mia_audit.data import FeatureKind, SyntheticSpec
from mia_audit.errors import InvalidParameterError
from mia_audit.evaluation import (CSV_COLUMNS, NullAdversary, OracleAdversary,
                                  Scenario, SweepRow, check_compatibility,
                                  emit_report, evaluate_attack, make_adversary,
                                  prepare, read_rows_csv, run_sweep)
from mia_audit.model import TrainConfig
from mia_audit.numeric import RngStream
from mia_audit.victim import VictimAccess


def _scenario(**kwargs):
  # Overlapping clusters and no early stopping: an overfit toy victim.
  base = dict(task=SyntheticSpec(4, 10, 100, separation=0.3, seed=0),
              kind=FeatureKind.CONTINUOUS, hidden=(128,),
              train=TrainConfig(learning_rate=0.01, max_epochs=100,
                                val_fraction=0.0),
              attack_train=TrainConfig(max_epochs=5), n_samples=10,
              p_grid=(0.0, 0.5))
  base.update(kwargs)
  return Scenario(**base)


@pytest.fixture(scope='module')
def contexts():
  return [prepare(_scenario(), s) for s in range(2)]


def test_null_adversary_is_chance():
  vals = []
  for seed in range(5):
    ctx = prepare(_scenario(task=SyntheticSpec(2, 2, 400, seed=1),
                            train=TrainConfig(max_epochs=1)), seed)
    assert len(ctx.split.victim_train) >= 200
    vals.append(evaluate_attack(NullAdversary(RngStream(seed)),
                                VictimAccess(ctx.victim), ctx.split).auc)
  assert abs(np.mean(vals) - 0.5) <= 0.05


def test_oracle_adversary_is_perfect(contexts):
  ctx = contexts[0]
  res = evaluate_attack(OracleAdversary(), VictimAccess(ctx.victim), ctx.split)
  assert res.auc == 1.0
  assert res.n_members == len(ctx.split.victim_train)


def test_overfit_victim_leaks(contexts):
  ctx = contexts[0]
  res = evaluate_attack(make_adversary('lrnfree', ctx),
                        VictimAccess(ctx.victim), ctx.split)
  assert res.auc > 0.7


def test_zero_grid_is_baseline(contexts):
  out = run_sweep('dplogits', [0.0], contexts, 'lrnfree')
  base = run_sweep('none', [0.0], contexts, 'lrnfree')
  assert len(out.rows) == 1
  assert dataclasses.replace(out.rows[0], defense='none') == base.rows[0]
  assert math.isinf(out.rows[0].epsilon)


def test_rows_sorted_and_averaged(contexts):
  out = run_sweep('dplogits', [0.5, 0.0, 0.05], contexts, 'lrnfree')
  assert [r.param for r in out.rows] == [0.0, 0.05, 0.5]
  assert all(r.seed == 'mean' for r in out.rows)
  assert len(out.cells) == 6
  mid = [c for c in out.cells if c.param == 0.05]
  assert out.rows[1].auc == pytest.approx(np.mean([c.auc for c in mid]))
  assert out.rows[1].epsilon == pytest.approx(
      1 / 0.05 * math.sqrt(2 * math.log(1.25 * 100)))


def test_accuracy_non_increasing_in_noise(contexts):
  rows = run_sweep('dplogits', [0.0, 0.1, 1.0, 10.0], contexts,
                   'lrnfree').rows
  for a, b in zip(rows, rows[1:]):
    assert b.accuracy <= a.accuracy + 0.03
  assert rows[-1].auc < rows[0].auc


def test_dpsgd_sweep(contexts):
  rows = run_sweep('dpsgd', [0.0, 1.0], contexts, 'lrnfree').rows
  assert math.isinf(rows[0].epsilon) and math.isfinite(rows[1].epsilon)
  assert rows[1].delta == pytest.approx(1 / 100)


def test_label_only_sweeps(contexts):
  rr = run_sweep('rr', [0.0, 0.25], contexts, 'sampling').rows
  assert rr[1].epsilon == pytest.approx(math.log(9))
  assert rr[1].accuracy < rr[0].accuracy
  assert rr[0].queries == 200 * 10
  samp = run_sweep('sampling', [0.0, 0.5], contexts, 'sampling').rows
  assert [r.param for r in samp] == [0.0, 0.5]
  arg = run_sweep('argmax', [0], contexts, 'sampling').rows
  assert 0 <= arg[0].auc <= 1 and math.isinf(arg[0].epsilon)


@pytest.mark.parametrize('defense, adversary', [('argmax', 'lrnfree'),
                                                ('argmax', 'lrn'),
                                                ('rr', 'lrnfree'),
                                                ('sampling', 'lrnfree')])
def test_incompatible_pairs(defense, adversary):
  assert check_compatibility(defense, adversary)
  with pytest.raises(InvalidParameterError):
    run_sweep(defense, [0.0], [object()], adversary)


def test_compatible_pairs():
  assert check_compatibility('argmax', 'sampling') == []
  assert check_compatibility('dplogits', 'lrn') == []


def test_invalid_grids(contexts):
  for defense, grid in [('dpsgd', []), ('dpsgd', [-1.0]), ('rr', [0.5]),
                        ('none', [0.1]), ('dplogits', [0.1, 0.1])]:
    with pytest.raises(InvalidParameterError):
      run_sweep(defense, grid, contexts, 'lrnfree')


def test_empty_report(tmp_path):
  csv_path, json_path = emit_report([], {'seeds': []}, tmp_path / 'r')
  assert open(csv_path).read() == ','.join(CSV_COLUMNS) + '\n'
  doc = json.load(open(json_path))
  assert doc['rows'] == [] and doc['schema_version'] == 1


def test_report_round_trip_and_determinism(tmp_path):
  rows = [SweepRow('dpsgd', 0.0, 'mean', 0.9, 0.71, math.inf, 0.0, 200.0),
          SweepRow('dpsgd', 0.1, 3, 1 / 3, 0.5, 12.5, 1e-3, 200.0)]
  meta = {'config_hash': 'abc', 'seeds': [3]}
  a = emit_report(rows, meta, tmp_path / 'a.csv')
  b = emit_report(rows, meta, tmp_path / 'b')
  assert read_rows_csv(a[0]) == rows
  for x, y in zip(a, b):
    assert open(x, 'rb').read() == open(y, 'rb').read()
  doc = json.load(open(a[1]))
  assert doc['rows'][0]['epsilon'] == 'inf'
  assert doc['config_hash'] == 'abc' and doc['seeds'] == [3]


def test_sweep_is_deterministic(tmp_path):
  ctx_a = [prepare(_scenario(), 4)]
  ctx_b = [prepare(_scenario(), 4)]
  a = run_sweep('dplogits', [0.0, 0.1], ctx_a, 'lrnfree')
  b = run_sweep('dplogits', [0.0, 0.1], ctx_b, 'lrnfree')
  assert a.rows == b.rows and a.cells == b.cells
