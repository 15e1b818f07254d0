"""``mia-audit`` command line.

Subcommands (each takes ``--config``):

* ``train``: trains victim and shadow per seed and writes checkpoints.
* ``attack``: scores ``victim_train`` / ``victim_test`` with the configured
  adversary, writing a score CSV per seed and the AUCs.
* ``defend``: measures defended utility and privacy budget over the grid.
* ``sweep``: attacks every grid point and writes ``report.csv`` and
  ``report.json``.
* ``report``: merges the stage outputs found in the output directory.

Exit status is 0 on success, 2 when the configuration is invalid and 1 when
a stage fails; diagnostics name the failing stage.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
from importlib import metadata

import jsonschema
import numpy as np
import scipy

from mia_audit import __version__, config as cfglib
from mia_audit.errors import ConfigError
from mia_audit.evaluation import (SeedContext, access_mode, defend,
                                  emit_report, jsonable, make_adversary,
                                  prepare, run_sweep)
from mia_audit.metrics import accuracy, auc
from mia_audit.model import load_checkpoint, save_checkpoint
from mia_audit.victim import VictimAccess

EXIT_OK, EXIT_STAGE_ERROR, EXIT_CONFIG_ERROR = 0, 1, 2
STAGE_FILES = {'train': 'train.json', 'attack': 'attack.json',
               'defend': 'defend.json', 'sweep': 'report.json'}


class StageError(RuntimeError):

  def __init__(self, stage: str, message: str):
    super().__init__(message)
    self.stage = stage


def _write_json(path: str, doc: dict) -> None:
  with open(path, 'w', encoding='utf-8') as fh:
    json.dump(jsonable(doc), fh, sort_keys=True, indent=2, allow_nan=False)
    fh.write('\n')


def _seed_dir(out: str, seed: int) -> str:
  path = os.path.join(out, f'seed-{seed}')
  os.makedirs(path, exist_ok=True)
  return path


def _contexts(cfg: dict, out: str) -> list[SeedContext]:
  """Per-seed artifacts, reusing checkpoints written by ``train``."""
  scenario = cfglib.build_scenario(cfg)
  contexts = []
  for seed in cfg['seeds']:
    loaded = {}
    for role in ('victim', 'shadow'):
      path = os.path.join(out, f'seed-{seed}', f'{role}.json')
      if os.path.exists(path):
        loaded[role] = load_checkpoint(path)
    contexts.append(prepare(scenario, seed, **loaded))
  return contexts


def run_train(cfg: dict, out: str) -> dict:
  scenario = cfglib.build_scenario(cfg)
  rows = []
  for seed in cfg['seeds']:
    ctx = prepare(scenario, seed)
    d = _seed_dir(out, ctx.seed)
    save_checkpoint(ctx.victim, os.path.join(d, 'victim.json'))
    save_checkpoint(ctx.shadow, os.path.join(d, 'shadow.json'))
    split = ctx.split
    rows.append({
        'seed': ctx.seed,
        'victim_train_accuracy': accuracy(ctx.victim, split.victim_train),
        'victim_test_accuracy': accuracy(ctx.victim, split.victim_test),
        'shadow_train_accuracy': accuracy(ctx.shadow, split.shadow_train),
        'shadow_test_accuracy': accuracy(ctx.shadow, split.shadow_test),
        'epochs': ctx.victim_history.epochs,
        'best_epoch': ctx.victim_history.best_epoch,
    })
  doc = {'stage': 'train', 'seeds': rows}
  _write_json(os.path.join(out, STAGE_FILES['train']), doc)
  return doc


def run_attack(cfg: dict, out: str) -> dict:
  name = cfglib.adversary_name(cfg)
  rows = []
  for ctx in _contexts(cfg, out):
    adv = make_adversary(name, ctx)
    access = VictimAccess(ctx.victim, access_mode('none', name))
    scores = adv.scores(access, ctx.split)
    scores.to_csv(os.path.join(_seed_dir(out, ctx.seed), f'scores-{name}.csv'))
    res = auc(scores)
    row = {'seed': ctx.seed, 'auc': res.auc, 'members': res.n_members,
           'nonmembers': res.n_nonmembers, 'queries': access.queries}
    if name.startswith('sampling'):
      row['p_star'], row['calibration'] = ctx.calibration
    rows.append(row)
  doc = {'stage': 'attack', 'adversary': name, 'seeds': rows,
         'mean_auc': float(np.mean([r['auc'] for r in rows]))}
  _write_json(os.path.join(out, STAGE_FILES['attack']), doc)
  return doc


def run_defend(cfg: dict, out: str) -> dict:
  name, adversary = cfglib.defense_name(cfg), cfglib.adversary_name(cfg)
  rows = []
  contexts = _contexts(cfg, out)
  for param in sorted(cfglib.defense_grid(cfg)):
    for ctx in contexts:
      d = defend(name, param, ctx, adversary)
      rows.append({'param': param, 'seed': ctx.seed,
                   'accuracy': accuracy(d.utility, ctx.split.victim_test),
                   'epsilon': d.budget.epsilon, 'delta': d.budget.delta,
                   'defense': d.report})
  doc = {'stage': 'defend', 'defense': name, 'rows': rows}
  _write_json(os.path.join(out, STAGE_FILES['defend']), doc)
  return doc


def run_sweep_stage(cfg: dict, out: str) -> dict:
  name, adversary = cfglib.defense_name(cfg), cfglib.adversary_name(cfg)
  outcome = run_sweep(name, cfglib.defense_grid(cfg), _contexts(cfg, out),
                      adversary)
  meta = {'config_hash': cfglib.config_hash(cfg), 'seeds': cfg['seeds'],
          'defense': name, 'adversary': adversary,
          'multi_seed_averaging': True}
  emit_report(outcome.rows, meta, os.path.join(out, 'report'), outcome.cells,
              outcome.defense_reports)
  return {'rows': len(outcome.rows)}


def run_report(cfg: dict, out: str) -> dict:
  merged = {'config_hash': cfglib.config_hash(cfg), 'seeds': cfg['seeds']}
  for stage, fname in STAGE_FILES.items():
    path = os.path.join(out, fname)
    if os.path.exists(path):
      with open(path, encoding='utf-8') as fh:
        merged[stage] = json.load(fh)
  if len(merged) == 2:
    raise StageError('report', f'no stage outputs found in {out}')
  _write_json(os.path.join(out, 'merged.json'), merged)
  return merged


STAGES = {'train': run_train, 'attack': run_attack, 'defend': run_defend,
          'sweep': run_sweep_stage, 'report': run_report}
STAGE_HELP = {
    'train': 'train victim and shadow models and write checkpoints',
    'attack': 'score victim members and non-members with the adversary',
    'defend': 'measure defended accuracy and privacy budget over the grid',
    'sweep': 'attack every defense setting and write report.csv/json',
    'report': 'merge stage outputs into merged.json',
}


def versions() -> dict:
  return {
      'mia_audit': __version__,
      'python': platform.python_version(),
      'numpy': np.__version__,
      'scipy': scipy.__version__,
      'jsonschema': metadata.version('jsonschema'),
  }


def write_manifest(cfg: dict, out: str, command: str) -> None:
  _write_json(os.path.join(out, f'manifest-{command}.json'), {
      'command': command,
      'config': cfg,
      'config_hash': cfglib.config_hash(cfg),
      'seeds': cfg['seeds'],
      'versions': versions(),
  })


def build_parser() -> argparse.ArgumentParser:
  parser = argparse.ArgumentParser(
      prog='mia-audit',
      description='Membership-inference audits of classifiers under defenses.')
  parser.add_argument('--version', action='version',
                      version=f'%(prog)s {__version__}')
  sub = parser.add_subparsers(dest='command', required=True)
  for name in STAGES:
    p = sub.add_parser(name, help=STAGE_HELP[name])
    p.add_argument('--config', required=True, help='experiment JSON file')
    p.add_argument('--out', help='output directory (overrides the config and '
                   f'${cfglib.OUTPUT_ENV})')
    p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                   help='override a config value; dotted keys reach nested '
                   'fields, values parse as JSON')
  return parser


def main(argv: list[str] | None = None) -> int:
  args = build_parser().parse_args(argv)
  try:
    cfg = cfglib.apply_overrides(cfglib.load_config(args.config), args.set)
    cfglib.validate(cfg)
  except ConfigError as exc:
    print(f'error [stage=config]: {len(exc.problems)} problem(s)',
          file=sys.stderr)
    for problem in exc.problems:
      print(f'  - {problem}', file=sys.stderr)
    return EXIT_CONFIG_ERROR
  out = cfglib.output_dir(cfg, args.out)
  try:
    os.makedirs(out, exist_ok=True)
    write_manifest(cfg, out, args.command)
    STAGES[args.command](cfg, out)
  except StageError as exc:
    print(f'error [stage={exc.stage}]: {exc}', file=sys.stderr)
    return EXIT_STAGE_ERROR
  except (ValueError, OSError, ArithmeticError, PermissionError,
          jsonschema.ValidationError) as exc:
    print(f'error [stage={args.command}]: {type(exc).__name__}: {exc}',
          file=sys.stderr)
    return EXIT_STAGE_ERROR
  print(f'{args.command}: wrote {out}')
  return EXIT_OK


if __name__ == '__main__':
  sys.exit(main())
