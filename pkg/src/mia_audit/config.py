"""Experiment configuration: schema validation, overrides and hashing.

Configurations are JSON documents validated against the schema shipped as
``config.schema.json``. Validation reports every violation at once, covering
both the schema and cross-field rules such as adversary/defense
compatibility.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
from importlib import resources

import jsonschema

from mia_audit import attacks, defenses, dp_train, evaluation
from mia_audit.data import FeatureKind, SyntheticSpec
from mia_audit.dp_train import DpSgdConfig
from mia_audit.errors import ConfigError, InvalidParameterError
from mia_audit.evaluation import Scenario
from mia_audit.model import TrainConfig

OUTPUT_ENV = 'MIA_AUDIT_OUTPUT_DIR'
DEFAULT_OUTPUT_DIR = 'mia-audit-out'
DEFAULT_GRIDS = {
    'none': (0.0,),
    'argmax': (0.0,),
    'rr': (0.0, 1 - defenses.RR_REVEAL_PROBABILITY),
    'dplogits': (0.0,) + defenses.DP_LOGITS_GRID,
    'dpsgd': (0.0,) + dp_train.DPSGD_GRID,
}


def schema() -> dict:
  text = resources.files('mia_audit').joinpath('config.schema.json').read_text(
      encoding='utf-8')
  return json.loads(text)


def load_config(path: str | os.PathLike) -> dict:
  try:
    with open(path, encoding='utf-8') as fh:
      return json.load(fh)
  except json.JSONDecodeError as exc:
    raise ConfigError([f'{path}: invalid JSON ({exc})']) from exc
  except OSError as exc:
    raise ConfigError([f'{path}: {exc.strerror}']) from exc


def apply_overrides(cfg: dict, assignments: list[str]) -> dict:
  """Applies ``KEY=VALUE`` flags; dotted keys reach into nested objects.

  Values parse as JSON when possible and are strings otherwise.
  """
  out = copy.deepcopy(cfg)
  problems = []
  for item in assignments:
    key, sep, raw = item.partition('=')
    if not sep or not key:
      problems.append(f'override {item!r} is not KEY=VALUE')
      continue
    try:
      value = json.loads(raw)
    except json.JSONDecodeError:
      value = raw
    node = out
    *parents, leaf = key.split('.')
    for part in parents:
      node = node.setdefault(part, {})
      if not isinstance(node, dict):
        problems.append(f'override {key!r}: {part!r} is not an object')
        break
    else:
      node[leaf] = value
  if problems:
    raise ConfigError(problems)
  return out


def _path(error: jsonschema.ValidationError) -> str:
  return '/'.join(str(p) for p in error.absolute_path) or '<root>'


def defense_name(cfg: dict) -> str:
  return cfg.get('defense', {}).get('name', 'none')


def adversary_name(cfg: dict) -> str:
  default = 'sampling' if defense_name(cfg) in (
      evaluation.LABEL_ONLY_DEFENSES) else 'lrnfree'
  return cfg.get('attack', {}).get('adversary', default)


def defense_grid(cfg: dict) -> tuple[float, ...]:
  d = cfg.get('defense', {})
  if 'grid' in d:
    return tuple(float(v) for v in d['grid'])
  name = defense_name(cfg)
  if name == 'sampling':
    return tuple(build_scenario(cfg).grid())
  return DEFAULT_GRIDS[name]


def validate(cfg: dict) -> None:
  """Raises :class:`ConfigError` listing every problem with ``cfg``."""
  validator = jsonschema.Draft202012Validator(schema())
  problems = [f'{_path(e)}: {e.message}'
              for e in sorted(validator.iter_errors(cfg), key=str)]
  if problems:
    raise ConfigError(problems)
  defense, adversary = defense_name(cfg), adversary_name(cfg)
  problems += evaluation.check_compatibility(defense, adversary)
  binary = cfg['data']['kind'] == 'binary'
  if binary and any(p > 1 for p in cfg.get('attack', {}).get('p_grid', ())):
    problems.append('attack/p_grid: bit-flip rates must be <= 1')
  if binary and defense == 'sampling' and any(
      p > 1 for p in cfg.get('defense', {}).get('grid', ())):
    problems.append('defense/grid: bit-flip rates must be <= 1')
  if 'grid' in cfg.get('defense', {}):
    problems += [f'defense/grid: {p}' for p in evaluation.check_grid(
        defense, cfg['defense']['grid'])]
  if problems:
    raise ConfigError(problems)
  try:
    build_scenario(cfg)
  except InvalidParameterError as exc:
    raise ConfigError([str(exc)]) from exc


def _train(section: dict | None, base: TrainConfig) -> TrainConfig:
  return dataclasses.replace(base, **(section or {}))


def build_scenario(cfg: dict) -> Scenario:
  data = cfg['data']
  kind = FeatureKind(data['kind'])
  train = _train(cfg.get('train'), TrainConfig())
  attack = cfg.get('attack', {})
  d = cfg.get('defense', {})
  dp = DpSgdConfig(clip_norm=d.get('clip_norm', 1.0),
                   lot_size=d.get('lot_size', 64),
                   optimizer=d.get('optimizer', 'sgd'))
  common = dict(
      kind=kind,
      hidden=tuple(cfg.get('model', {}).get('hidden', (64, 32))),
      train=train,
      attack_train=_train(attack.get('train'), TrainConfig()),
      n_samples=attack.get('n_samples', attacks.DEFAULT_SAMPLES),
      p_grid=tuple(attack['p_grid']) if 'p_grid' in attack else None,
      dp=dp,
      dp_train=_train(d['train'], train) if 'train' in d else None,
  )
  if 'csv' in data:
    return Scenario(csv_path=data['csv'], csv_classes=data['n_classes'],
                    **common)
  spec = SyntheticSpec(
      **{k: v for k, v in data.items() if k != 'kind'})
  return Scenario(task=spec, **common)


def canonical_json(cfg: dict) -> str:
  return json.dumps(cfg, sort_keys=True, separators=(',', ':'))


def config_hash(cfg: dict) -> str:
  """SHA-256 of the canonical config; the output directory is excluded."""
  body = {k: v for k, v in cfg.items() if k != 'output_dir'}
  return hashlib.sha256(canonical_json(body).encode()).hexdigest()


def output_dir(cfg: dict, override: str | None = None) -> str:
  return (override or cfg.get('output_dir') or os.environ.get(OUTPUT_ENV) or
          DEFAULT_OUTPUT_DIR)
