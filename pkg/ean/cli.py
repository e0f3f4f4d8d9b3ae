# (c) Copyright [2017] Hewlett Packard Enterprise Development LP
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
"""
Command line interface: `python -m ean <command> [options]`.

Commands:
    generate-data     write the synthetic train/val splits
    train             train a model, checkpoint after every epoch
    eval              centre-clip accuracy of a checkpoint
    count-flops       analytic FLOPs / parameter report of a model config
    inspect-kernels   per-sample EAB kernel weights (and SOI-Tr saliency maps) as JSON lines
    scale-sweep       kernel-weight shift under 1.6x zoom and 2x frame rate

Results go to stdout (JSON with --json), logs to stderr. On failure a single JSON line
{"error", "message", "hint"} is written to stderr and the exit status is 1.
"""
import argparse
import json
import logging
import os
import sys
import typing

import pandas as pd

from ean.experiments import scale_shift_sweep, inspect_kernels
from ean.io import FormatError, load_config, read_jsonl, save_json, write_jsonl
from ean.network import ConfigError, ModelConfig, build_model
from ean.profiler import ModelSummary, count, placement_sweep
from ean.synthetic import SyntheticSpec, VideoDataset, generate
from ean.training import TrainConfig, evaluate, fit, restore

__ALL__ = ['main', 'build_parser', 'error_record']

logger = logging.getLogger(__name__)

SECTIONS = ('model', 'train', 'data', 'synthetic')
DEFAULT_DATA_ROOT = 'data'


def _settings(args: argparse.Namespace) -> dict:
    config = load_config(args.config) if args.config else {}
    unknown = sorted(set(config) - set(SECTIONS))
    if unknown:
        raise ConfigError("Unknown config sections: {} (allowed: {}).".format(unknown, list(SECTIONS)))
    return config


def _model_config(args: argparse.Namespace, config: dict) -> ModelConfig:
    values = dict(config.get('model', {}))
    if args.seed is not None:
        values['seed'] = args.seed
    return ModelConfig.from_dict(values)


def _train_config(args: argparse.Namespace, config: dict) -> TrainConfig:
    values = dict(config.get('train', {}))
    if args.seed is not None:
        values['seed'] = args.seed
    return TrainConfig.from_dict(values)


def _data_root(config: dict) -> str:
    return config.get('data', {}).get('root', DEFAULT_DATA_ROOT)


def _dataset(config: dict, split: str) -> VideoDataset:
    return VideoDataset(os.path.join(_data_root(config), split))


def _checkpoint(args: argparse.Namespace) -> str:
    if not args.checkpoint:
        raise FileNotFoundError("No checkpoint given; pass --checkpoint DIR (written by 'train').")
    return args.checkpoint


def _emit(args: argparse.Namespace, payload: typing.Any, text: typing.Optional[str] = None) -> None:
    if args.json or text is None:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def cmd_generate_data(args: argparse.Namespace) -> None:
    config = _settings(args)
    values = dict(config.get('synthetic', {}))
    if args.seed is not None:
        values['seed'] = args.seed
    spec = SyntheticSpec.from_dict(values)
    root = args.out or _data_root(config)
    manifests = {split: generate(spec, os.path.join(root, split), split, progress=args.verbose)
                 for split in ('train', 'val')}
    _emit(args, {'root': root, 'manifests': manifests, 'num_classes': spec.num_classes,
                 'patterns': spec.patterns},
          "Generated dataset in '{}' ({}).".format(root, ', '.join(spec.patterns)))


def cmd_train(args: argparse.Namespace) -> None:
    config = _settings(args)
    model_cfg, train_cfg = _model_config(args, config), _train_config(args, config)
    checkpoint = args.checkpoint or args.out or 'checkpoint'
    train_set, val_set = _dataset(config, 'train'), _dataset(config, 'val')
    history_path = os.path.join(checkpoint, 'history.jsonl')
    if args.resume:
        model, optimizer, _, meta = restore(checkpoint)
        start_epoch, rng_state = int(meta.get('epoch', 0)), meta.get('rng', {}).get('sampling')
        history = read_jsonl(history_path)[:start_epoch] if os.path.isfile(history_path) else []
        logger.info("Resuming '%s' after epoch %d.", checkpoint, start_epoch)
    else:
        model, optimizer, start_epoch, rng_state, history = build_model(model_cfg), None, 0, None, []
    logger.info("Training %s (%d parameters) on %d videos.", model.cfg.backbone, model.num_params(), len(train_set))
    history += fit(model, train_set, train_cfg, val_set, checkpoint=checkpoint, optimizer=optimizer,
                   start_epoch=start_epoch, progress=args.verbose, rng_state=rng_state)
    write_jsonl(history_path, history)
    _emit(args, {'checkpoint': checkpoint, 'history': history[-1]},
          "Checkpoint '{}': {}".format(checkpoint, history[-1]))


def cmd_eval(args: argparse.Namespace) -> None:
    config = _settings(args)
    model, _, _, meta = restore(_checkpoint(args))
    result = evaluate(model, _dataset(config, 'val'))
    payload = dict(result.to_dict(), checkpoint=args.checkpoint, epoch=meta.get('epoch'))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        save_json(os.path.join(args.out, 'eval.json'), payload)
    _emit(args, payload, "Accuracy: {:.4f} ({} videos)".format(result.accuracy, len(result.labels)))


def cmd_count_flops(args: argparse.Namespace) -> None:
    config = _settings(args)
    if args.sweep:
        sweep = placement_sweep(_model_config(args, config) if 'model' in config else None)
        _emit(args, json.loads(sweep.to_json(orient='records')), sweep.to_string(index=False))
        return
    cfg = _model_config(args, config)
    summary = ModelSummary(cfg, verbose=args.verbose)
    report = count(cfg)
    with pd.option_context('display.max_rows', None, 'display.width', 160):
        text = '\n\n'.join([
            summary.detailed_summary(flops='G', num_params='M').to_string(index=False),
            summary.module_totals().to_string(index=False),
            json.dumps(report.to_dict()['deltas'], indent=2, sort_keys=True)
        ])
    _emit(args, report.to_dict(), text)


def cmd_inspect_kernels(args: argparse.Namespace) -> None:
    config = _settings(args)
    model, _, _, _ = restore(_checkpoint(args))
    kernels, maps = inspect_kernels(model, _dataset(config, 'val'), saliency=args.saliency)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        files = {'kernel_weights': os.path.join(args.out, 'kernel_weights.jsonl')}
        write_jsonl(files['kernel_weights'], kernels)
        if args.saliency:
            files['saliency'] = os.path.join(args.out, 'saliency.jsonl')
            write_jsonl(files['saliency'], maps)
        _emit(args, {'files': files, 'num_records': len(kernels) + len(maps)},
              "Wrote {} records to '{}'.".format(len(kernels) + len(maps), args.out))
    else:
        write_jsonl(sys.stdout, kernels + maps)


def cmd_scale_sweep(args: argparse.Namespace) -> None:
    config = _settings(args)
    model, _, _, _ = restore(_checkpoint(args))
    records, summary = scale_shift_sweep(model, _dataset(config, 'val'), progress=args.verbose)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_jsonl(os.path.join(args.out, 'scale_sweep.jsonl'), records)
        save_json(os.path.join(args.out, 'scale_sweep_summary.json'), summary)
    _emit(args, summary, json.dumps(summary, indent=2, sort_keys=True))


# Alternative command names accepted by the parser.
ALIASES = {'scale-sweep': ['fig10-sweep']}

COMMANDS = {
    'generate-data': (cmd_generate_data, 'Generate the synthetic motion-only dataset.'),
    'train': (cmd_train, 'Train a model and write checkpoints.'),
    'eval': (cmd_eval, 'Evaluate a checkpoint on the validation split.'),
    'count-flops': (cmd_count_flops, 'Report analytic FLOPs and parameters.'),
    'inspect-kernels': (cmd_inspect_kernels, 'Export per-sample EAB kernel weights.'),
    'scale-sweep': (cmd_scale_sweep, 'Kernel-weight shift under spatial zoom and frame-rate change.')
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help='JSON config file (see docs/schemas.md).')
    common.add_argument('--seed', type=int, default=None, help='Overrides every seed in the config.')
    common.add_argument('--out', type=str, default=None, help='Output directory.')
    common.add_argument('--checkpoint', type=str, default=None, help='Checkpoint directory.')
    common.add_argument('--json', action='store_true', default=False, help='Print results as JSON.')
    common.add_argument('--verbose', action='store_true', default=False, help='Debug logging and progress bars.')

    parser = argparse.ArgumentParser(prog='ean', description='Event adaptive network toolkit.')
    subparsers = parser.add_subparsers(dest='command')
    subparsers.required = True
    for name, (func, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, parents=[common], help=help_text, description=help_text,
                                    aliases=ALIASES.get(name, []))
        sub.set_defaults(func=func)
        if name == 'count-flops':
            sub.add_argument('--sweep', action='store_true', default=False,
                             help='Report the four EAB / SOI-Tr placements instead of one config.')
        if name == 'inspect-kernels':
            sub.add_argument('--saliency', action='store_true', default=False, help='Also export saliency maps.')
        if name == 'train':
            sub.add_argument('--resume', action='store_true', default=False,
                             help='Continue the run saved in --checkpoint.')
    return parser


def error_record(err: BaseException) -> dict:
    if isinstance(err, FileNotFoundError):
        hint = "Check the path; run 'generate-data' to create a dataset or 'train' to create a checkpoint."
    elif isinstance(err, ConfigError):
        hint = 'See docs/schemas.md for config keys and legal values.'
    elif isinstance(err, FormatError):
        hint = 'The file is corrupt or was not written by ean; regenerate it.'
    elif isinstance(err, OSError):
        hint = 'Check file permissions and free disk space.'
    else:
        hint = 'Run with --verbose for details.'
    return {'error': type(err).__name__, 'message': str(err), 'hint': hint}


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        args.func(args)
    except Exception as err:
        logger.debug("Command '%s' failed.", args.command, exc_info=True)
        print(json.dumps(error_record(err), sort_keys=True), file=sys.stderr)
        return 1
    return 0
