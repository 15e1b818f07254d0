"""Attack evaluation, defense sweeps and report emission.

A :class:`Scenario` describes one experiment. For each seed,
:func:`prepare` builds a :class:`SeedContext` holding the data, the 4-way
split, the victim, the shadow and, on demand, the LRN attack classifier and
the calibrated perturbation scale. :func:`sweep` then evaluates one defense
family over a parameter grid on those contexts.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from typing import Protocol, Sequence

import numpy as np

from mia_audit import attacks, defenses
from mia_audit.attacks import (BinaryAttackModel, MembershipScores,
                               PerturbationConfig)
from mia_audit.data import (Dataset, FeatureKind, FourWaySplit, SyntheticSpec,
                            gen_binary, gen_continuous, load_csv, split4)
from mia_audit.dp_train import DpSgdConfig, PrivacyBudget, train_dpsgd
from mia_audit.errors import InvalidParameterError
from mia_audit.metrics import AucResult, accuracy, auc
from mia_audit.model import (MlpArchitecture, ModelParams, TrainConfig,
                             TrainHistory, train)
from mia_audit.numeric import RngStream
from mia_audit.victim import AccessMode, VictimAccess

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ('defense', 'param', 'seed', 'accuracy', 'auc', 'epsilon',
               'delta', 'queries')
ADVERSARIES = ('lrn', 'lrnfree', 'sampling', 'sampling-lrn', 'null', 'oracle')
LABEL_ADVERSARIES = ('sampling', 'sampling-lrn', 'null', 'oracle')
DEFENSES = ('none', 'argmax', 'rr', 'dplogits', 'dpsgd', 'sampling')
# Families whose victim publishes labels only.
LABEL_ONLY_DEFENSES = ('argmax', 'rr', 'sampling')
_UNBOUNDED = PrivacyBudget(math.inf, 0.0, 'none')


@dataclasses.dataclass(frozen=True)
class Scenario:
  """One experiment, independent of the seed.

  Attributes:
    task: Synthetic task; its ``seed`` is offset by the experiment seed so
      every seed sees fresh data.
    kind: Feature kind of the synthetic task.
    csv_path: Load records from this CSV instead of generating them.
    csv_classes: Class count of the CSV data.
    hidden: Hidden widths of victim and shadow.
    train: Victim and shadow training settings.
    attack_train: Training settings of the LRN attack classifier.
    n_samples: Perturbed copies per record for the sampling adversary.
    p_grid: Calibration grid; ``None`` picks the default for the kind.
    dp: DP-SGD template; the sweep replaces its noise multiplier.
    dp_train: Training settings for DP-SGD victims; ``None`` reuses
      ``train``.
  """

  task: SyntheticSpec | None = None
  kind: FeatureKind = FeatureKind.BINARY
  csv_path: str | None = None
  csv_classes: int | None = None
  hidden: tuple[int, ...] = (64, 32)
  train: TrainConfig = TrainConfig()
  attack_train: TrainConfig = TrainConfig()
  n_samples: int = attacks.DEFAULT_SAMPLES
  p_grid: tuple[float, ...] | None = None
  dp: DpSgdConfig = DpSgdConfig()
  dp_train: TrainConfig | None = None

  def __post_init__(self):
    object.__setattr__(self, 'kind', FeatureKind(self.kind))
    if (self.task is None) == (self.csv_path is None):
      raise InvalidParameterError('give exactly one of task and csv_path')
    if self.csv_path is not None and self.csv_classes is None:
      raise InvalidParameterError('CSV data needs csv_classes')

  def dataset(self, seed: int) -> Dataset:
    if self.csv_path is not None:
      return load_csv(self.csv_path, self.kind, self.csv_classes)
    spec = dataclasses.replace(self.task, seed=self.task.seed + seed)
    if self.kind is FeatureKind.BINARY:
      return gen_binary(spec)
    return gen_continuous(spec)

  def perturbation(self) -> PerturbationConfig:
    kind = (attacks.PerturbationKind.BITFLIP if self.kind is FeatureKind.BINARY
            else attacks.PerturbationKind.GAUSSIAN)
    return PerturbationConfig(kind, 0.0, self.n_samples)

  def grid(self) -> tuple[float, ...]:
    if self.p_grid is not None:
      return tuple(self.p_grid)
    return PerturbationConfig.default_grid(self.perturbation().kind)


@dataclasses.dataclass
class SeedContext:
  """Per-seed artifacts; the attack model and p* are built on first use."""

  scenario: Scenario
  seed: int
  split: FourWaySplit
  arch: MlpArchitecture
  victim: ModelParams
  victim_history: TrainHistory
  shadow: ModelParams
  _attack_model: BinaryAttackModel | None = None
  _calibration: tuple[float, list] | None = None

  def stream(self, name: str) -> RngStream:
    return RngStream(self.seed).fork(name)

  @property
  def attack_model(self) -> BinaryAttackModel:
    if self._attack_model is None:
      self._attack_model = attacks.lrn_train(self.shadow, self.split,
                                             self.scenario.attack_train,
                                             self.stream('attack-model'))
    return self._attack_model

  @property
  def calibration(self) -> tuple[float, list]:
    """``(p_star, [(p, shadow auc), ...])``."""
    if self._calibration is None:
      self._calibration = attacks.calibrate_p(self.shadow, self.split,
                                              self.scenario.grid(),
                                              self.scenario.perturbation(),
                                              self.stream('calibrate'))
    return self._calibration

  @property
  def p_star(self) -> float:
    return self.calibration[0]


def prepare(scenario: Scenario, seed: int,
            victim: ModelParams | None = None,
            shadow: ModelParams | None = None) -> SeedContext:
  """Generates data, splits it and trains victim and shadow for one seed.

  Args:
    scenario: The experiment.
    seed: Experiment seed.
    victim: Previously trained victim to reuse instead of training.
    shadow: Previously trained shadow to reuse instead of training.
  """
  root = RngStream(seed)
  ds = scenario.dataset(seed)
  split = split4(ds, root.fork('split'))
  arch = MlpArchitecture.default(ds.dim, ds.n_classes, scenario.hidden)
  history = TrainHistory()
  if victim is None:
    victim, history = train(arch, split.victim_train, scenario.train,
                            root.fork('victim'))
  if shadow is None:
    shadow = attacks.train_shadow(split, arch, scenario.train,
                                  root.fork('shadow'))
  for name, params in (('victim', victim), ('shadow', shadow)):
    if params.arch != arch:
      raise InvalidParameterError(f'{name} architecture does not match the '
                                  'scenario')
  return SeedContext(scenario, seed, split, arch, victim, history, shadow)


class Adversary(Protocol):
  name: str

  def scores(self, access: VictimAccess,
             split: FourWaySplit) -> MembershipScores:
    ...


def _pool_flags(split: FourWaySplit) -> np.ndarray:
  return np.r_[np.ones(len(split.victim_train), bool),
               np.zeros(len(split.victim_test), bool)]


@dataclasses.dataclass
class NullAdversary:
  """Guesses uniformly at random without querying the victim."""

  rng: RngStream
  name: str = 'null'

  def scores(self, access, split):
    flags = _pool_flags(split)
    s = self.rng.generator().random(flags.size)
    return MembershipScores(np.arange(flags.size), s, flags, self.name)


@dataclasses.dataclass
class OracleAdversary:
  """Reads the ground truth; an upper bound for harness checks."""

  name: str = 'oracle'

  def scores(self, access, split):
    flags = _pool_flags(split)
    return MembershipScores(np.arange(flags.size), flags.astype(float), flags,
                            self.name)


@dataclasses.dataclass
class PosteriorAdversary:
  """LRN (with an attack model) or LRN-Free over victim posteriors."""

  name: str
  attack_model: BinaryAttackModel | None = None

  def scores(self, access, split):
    return attacks.score_victim_pool(self.name, access, split,
                                     self.attack_model)


@dataclasses.dataclass
class SamplingAdversary:
  """Label-only adversary at a fixed perturbation scale."""

  p: float
  template: PerturbationConfig
  rng: RngStream
  attack_model: BinaryAttackModel | None = None

  @property
  def name(self) -> str:
    return 'sampling' if self.attack_model is None else 'sampling-lrn'

  def scores(self, access, split):
    return attacks.sampling_attack(access, split, self.p, self.template,
                                   self.rng.generator(), self.attack_model)


def make_adversary(name: str, ctx: SeedContext,
                   p: float | None = None) -> Adversary:
  """Builds a named adversary from a seed's artifacts.

  Args:
    name: One of :data:`ADVERSARIES`.
    ctx: Artifacts of the seed under attack.
    p: Perturbation scale for sampling adversaries; defaults to the
      shadow-calibrated ``p*``.
  """
  if name == 'null':
    return NullAdversary(ctx.stream('null'))
  if name == 'oracle':
    return OracleAdversary()
  if name == 'lrnfree':
    return PosteriorAdversary('lrnfree')
  if name == 'lrn':
    return PosteriorAdversary('lrn', ctx.attack_model)
  if name in ('sampling', 'sampling-lrn'):
    model = ctx.attack_model if name == 'sampling-lrn' else None
    return SamplingAdversary(ctx.p_star if p is None else p,
                             ctx.scenario.perturbation(),
                             ctx.stream(f'sampling:{p}'), model)
  raise InvalidParameterError(f'unknown adversary {name!r}')


def evaluate_attack(adversary: Adversary, access: VictimAccess,
                    split: FourWaySplit) -> AucResult:
  """AUC of ``adversary`` with members ``victim_train``, non-members
  ``victim_test``."""
  return auc(adversary.scores(access, split))


@dataclasses.dataclass(frozen=True)
class SweepRow:
  """One privacy/utility point; ``seed`` is ``'mean'`` for averaged rows."""

  defense: str
  param: float
  seed: int | str
  accuracy: float
  auc: float
  epsilon: float
  delta: float
  queries: float


@dataclasses.dataclass
class SweepOutcome:
  rows: list[SweepRow]
  cells: list[SweepRow]
  defense_reports: list[dict]


def check_compatibility(defense: str, adversary: str) -> list[str]:
  """Problems with pairing ``adversary`` against ``defense``."""
  problems = []
  if defense not in DEFENSES:
    problems.append(f'unknown defense {defense!r}')
  if adversary not in ADVERSARIES:
    problems.append(f'unknown adversary {adversary!r}')
  if problems:
    return problems
  if defense in LABEL_ONLY_DEFENSES and adversary not in LABEL_ADVERSARIES:
    problems.append(f'{adversary} needs posterior access, which the '
                    f'{defense} defense withholds; use a sampling adversary')
  if defense == 'sampling' and not adversary.startswith('sampling'):
    problems.append('the sampling sweep needs a sampling adversary')
  return problems


def check_grid(defense: str, grid: Sequence[float]) -> list[str]:
  problems = []
  if len(grid) == 0:
    problems.append('empty parameter grid')
  for v in grid:
    if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
      problems.append(f'grid value {v!r} must be a finite number >= 0')
  if defense in ('none', 'argmax') and any(v != 0 for v in grid):
    problems.append(f'the {defense} defense takes no parameter; use grid [0]')
  if defense == 'rr' and any(
      v not in (0, 1 - defenses.RR_REVEAL_PROBABILITY) for v in grid):
    problems.append('randomized response grid values must be 0 (off) or 0.25')
  if len(set(grid)) != len(grid):
    problems.append('duplicate grid values')
  return problems


def _queries_q(adversary: str, ctx: SeedContext) -> int:
  # Answers per audited point charged to the DP-Logits budget.
  if adversary == 'lrn':
    return len(ctx.split.victim_train) + len(ctx.split.victim_test)
  if adversary.startswith('sampling'):
    # A record present k times in the pool is probed k * N times.
    pool = np.concatenate([ctx.split.victim_train.features,
                           ctx.split.victim_test.features])
    _, counts = np.unique(pool, axis=0, return_counts=True)
    return ctx.scenario.n_samples * int(counts.max())
  return 1


@dataclasses.dataclass
class Defended:
  """A victim behind one defense setting.

  Attributes:
    access: What the adversary queries.
    utility: What accuracy is measured on; a separate instance so utility
      queries never spend the adversary's budget.
    budget: Privacy guarantee of the setting.
    report: Defense description for the run report.
  """

  access: VictimAccess
  utility: VictimAccess | ModelParams
  budget: PrivacyBudget
  report: dict


def access_mode(defense: str, adversary: str) -> AccessMode:
  label_mode = adversary in LABEL_ADVERSARIES and adversary != 'oracle'
  if label_mode or defense in LABEL_ONLY_DEFENSES:
    return AccessMode.LABEL_ONLY
  return AccessMode.POSTERIOR


def defend(defense: str, param: float, ctx: SeedContext,
           adversary: str) -> Defended:
  """Wraps the seed's victim in ``defense`` at strength ``param``.

  A parameter of 0 always means the defense is off, so that setting
  reproduces the undefended baseline of its access mode.
  """
  split = ctx.split
  victim = ctx.victim
  mode = access_mode(defense, adversary)
  if defense == 'dpsgd' and param > 0:
    dp = dataclasses.replace(ctx.scenario.dp, noise_multiplier=param)
    result = train_dpsgd(ctx.arch, split.victim_train,
                         ctx.scenario.dp_train or ctx.scenario.train, dp,
                         ctx.stream(f'dpsgd:{param!r}'))
    report = defenses.defense_report(defense, result.budget, None,
                                     param=param)
    report['accountant'] = result.report
    return Defended(VictimAccess(result.params, mode), result.params,
                    result.budget, report)
  if defense == 'dplogits' and param > 0:
    s = defenses.choose_S(victim, split.victim_train)
    q = _queries_q(adversary, ctx)
    cfg = defenses.DpLogitsConfig(s, param, q)
    budget = defenses.dp_logits_epsilon(cfg, len(split.victim_train))
    access = defenses.dp_logits_defense(victim, cfg,
                                        ctx.stream(f'dplogits:{param!r}'), mode)
    # Test sets may repeat a record; each copy is a separate utility query.
    utility = defenses.dp_logits_defense(
        victim, dataclasses.replace(cfg, query_budget=len(split.victim_test)),
        ctx.stream(f'dplogits-utility:{param!r}'), AccessMode.LABEL_ONLY)
    report = defenses.defense_report(
        defense, budget, q, param=param, S=s,
        query_degraded=adversary.startswith('sampling'))
    return Defended(access, utility, budget, report)
  if defense == 'rr' and param > 0:
    cfg = defenses.RrConfig(ctx.arch.n_classes, seed=ctx.seed)
    budget = defenses.rr_epsilon(cfg)
    return Defended(defenses.rr_defense(victim, cfg, ctx.stream('rr')),
                    defenses.rr_defense(victim, cfg, ctx.stream('rr-utility')),
                    budget, defenses.defense_report(defense, budget, 1,
                                                    param=param))
  return Defended(VictimAccess(victim, mode), victim, _UNBOUNDED,
                  defenses.defense_report(defense, None, None, param=param))


def evaluate_cell(defense: str, param: float, ctx: SeedContext,
                  adversary: str) -> tuple[SweepRow, dict]:
  """Attacks one (defense parameter, seed) cell; see :func:`defend`."""
  d = defend(defense, param, ctx, adversary)
  adv = make_adversary(adversary, ctx,
                       p=param if defense == 'sampling' else None)
  result = evaluate_attack(adv, d.access, ctx.split)
  row = SweepRow(defense, float(param), ctx.seed,
                 accuracy(d.utility, ctx.split.victim_test), result.auc,
                 d.budget.epsilon, d.budget.delta, d.access.queries)
  return row, dict(d.report, seed=ctx.seed)


def _average(cells: list[SweepRow]) -> SweepRow:
  first = cells[0]
  return SweepRow(first.defense, first.param, 'mean',
                  float(np.mean([c.accuracy for c in cells])),
                  float(np.mean([c.auc for c in cells])),
                  float(np.mean([c.epsilon for c in cells])),
                  float(np.mean([c.delta for c in cells])),
                  float(np.mean([c.queries for c in cells])))


def run_sweep(defense: str, grid: Sequence[float],
              contexts: Sequence[SeedContext],
              adversary: str = 'lrnfree') -> SweepOutcome:
  """Evaluates every (parameter, seed) cell and averages over seeds.

  Rows come out in increasing noise order, which for every family is
  increasing parameter value.
  """
  problems = check_compatibility(defense, adversary) + check_grid(defense, grid)
  if not contexts:
    problems.append('no seeds')
  if problems:
    raise InvalidParameterError('; '.join(problems))
  rows, cells, reports = [], [], []
  for param in sorted(float(v) for v in grid):
    group = []
    for ctx in contexts:
      cell, report = evaluate_cell(defense, param, ctx, adversary)
      group.append(cell)
      reports.append(report)
    cells += group
    rows.append(_average(group))
  return SweepOutcome(rows, cells, reports)


def sweep(defense: str, grid: Sequence[float], seeds: Sequence[int],
          scenario: Scenario, adversary: str = 'lrnfree') -> list[SweepRow]:
  """Seed-averaged rows for one defense family; see :func:`run_sweep`."""
  return run_sweep(defense, grid, [prepare(scenario, s) for s in seeds],
                   adversary).rows


def _num(v: float) -> str:
  if isinstance(v, float) and math.isinf(v):
    return 'inf' if v > 0 else '-inf'
  return repr(float(v))


def jsonable(v):
  if isinstance(v, float) and not math.isfinite(v):
    return 'inf' if v > 0 else ('-inf' if v < 0 else 'nan')
  if isinstance(v, dict):
    return {str(k): jsonable(x) for k, x in v.items()}
  if isinstance(v, (list, tuple)):
    return [jsonable(x) for x in v]
  if isinstance(v, np.generic):
    return jsonable(v.item())
  if isinstance(v, os.PathLike):
    return os.fspath(v)
  return v


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
  buf = io.StringIO()
  writer = csv.writer(buf, lineterminator='\n')
  writer.writerow(CSV_COLUMNS)
  for r in rows:
    writer.writerow([r.defense, _num(r.param), r.seed, _num(r.accuracy),
                     _num(r.auc), _num(r.epsilon), _num(r.delta),
                     _num(r.queries)])
  return buf.getvalue()


def read_rows_csv(path: str | os.PathLike) -> list[SweepRow]:
  with open(path, newline='', encoding='utf-8') as fh:
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
      raise InvalidParameterError(f'unexpected report columns in {path}')
    rows = []
    for rec in reader:
      seed = rec['seed']
      rows.append(
          SweepRow(rec['defense'], float(rec['param']),
                   seed if seed == 'mean' else int(seed),
                   float(rec['accuracy']), float(rec['auc']),
                   float(rec['epsilon']), float(rec['delta']),
                   float(rec['queries'])))
  return rows


def report_document(rows: Sequence[SweepRow], metadata: dict,
                    cells: Sequence[SweepRow] = (),
                    defense_reports: Sequence[dict] = ()) -> dict:
  return jsonable({
      'schema_version': REPORT_SCHEMA_VERSION,
      'config_hash': metadata.get('config_hash'),
      'seeds': list(metadata.get('seeds', ())),
      'seed_averaging': 'rows are means over seeds; per-seed values in cells',
      'metadata': metadata,
      'rows': [dataclasses.asdict(r) for r in rows],
      'cells': [dataclasses.asdict(c) for c in cells],
      'accountant': list(defense_reports),
  })


def emit_report(rows: Sequence[SweepRow], metadata: dict,
                path: str | os.PathLike, cells: Sequence[SweepRow] = (),
                defense_reports: Sequence[dict] = ()) -> tuple[str, str]:
  """Writes ``<path>.csv`` and ``<path>.json``.

  Both files are pure functions of the arguments: keys are sorted, floats
  use ``repr`` and unbounded values are spelled ``"inf"``.

  Returns:
    The two file paths.
  """
  base = os.fspath(path)
  for suffix in ('.csv', '.json'):
    if base.endswith(suffix):
      base = base[:-len(suffix)]
  csv_path, json_path = base + '.csv', base + '.json'
  with open(csv_path, 'w', newline='', encoding='utf-8') as fh:
    fh.write(rows_to_csv(rows))
  doc = report_document(rows, metadata, cells, defense_reports)
  with open(json_path, 'w', encoding='utf-8') as fh:
    json.dump(doc, fh, sort_keys=True, indent=2, allow_nan=False)
    fh.write('\n')
  return csv_path, json_path
