import io
import json
import os
import tempfile
from contextlib import redirect_stderr, redirect_stdout
from unittest import TestCase

from ean.cli import build_parser, error_record, main
from ean.io import FormatError, read_jsonl
from ean.network import ConfigError


def run(*argv):
    stdout, stderr = io.StringIO(), io.StringIO()
    with redirect_stdout(stdout), redirect_stderr(stderr):
        status = main(list(argv))
    return status, stdout.getvalue(), stderr.getvalue()


def last_json_line(text: str) -> dict:
    return json.loads(text.strip().splitlines()[-1])


class TestCli(TestCase):
    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def write_config(self, config: dict) -> str:
        path = os.path.join(self.tmp.name, 'config.json')
        with open(path, 'w') as stream:
            json.dump(config, stream)
        return path

    def test_parser(self):
        args = build_parser().parse_args(['count-flops', '--sweep', '--json'])
        self.assertTrue(args.sweep and args.json)
        self.assertEqual('fig10-sweep', build_parser().parse_args(['fig10-sweep']).command)
        with redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit):
                build_parser().parse_args(['predict'])

    def test_count_flops(self):
        config = self.write_config({'model': {'preset': 'resnet50-shape'}})
        status, stdout, _ = run('count-flops', '--config', config, '--json')
        self.assertEqual(0, status)
        report = json.loads(stdout)
        self.assertEqual([8, 3, 224, 224], report['input_shape'])
        self.assertTrue(1.87 <= report['deltas']['eab']['flops'] <= 2.53)
        self.assertTrue(34.2 <= report['num_params'] <= 37.8)

    def test_count_flops_sweep(self):
        status, stdout, _ = run('count-flops', '--sweep', '--json')
        self.assertEqual(0, status)
        rows = json.loads(stdout)
        self.assertEqual(['A', 'B', 'C', 'D'], [row['row'] for row in rows])
        added = [row['delta_flops'] for row in rows]
        self.assertEqual(sorted(added), added)

    def test_count_flops_text(self):
        status, stdout, _ = run('count-flops')
        self.assertEqual(0, status)
        self.assertIn('TOTAL', stdout)
        self.assertIn('gFLOPs', stdout)

    def test_missing_checkpoint(self):
        status, stdout, stderr = run('eval', '--checkpoint', os.path.join(self.tmp.name, 'missing'))
        self.assertEqual(1, status)
        self.assertEqual('', stdout)
        error = last_json_line(stderr)
        self.assertEqual({'error', 'message', 'hint'}, set(error))
        self.assertEqual('FileNotFoundError', error['error'])

    def test_bad_placement(self):
        config = self.write_config({'model': {'preset': 'tiny', 'eab_after_stages': [7]}})
        status, _, stderr = run('count-flops', '--config', config)
        self.assertEqual(1, status)
        error = last_json_line(stderr)
        self.assertEqual('ConfigError', error['error'])
        self.assertIn('1, 2, 3, 4, 5', error['message'])

    def test_bad_config_file(self):
        config = self.write_config({'optimizer': {}})
        self.assertEqual('ConfigError', last_json_line(run('count-flops', '--config', config)[2])['error'])
        path = os.path.join(self.tmp.name, 'broken.json')
        with open(path, 'w') as stream:
            stream.write('{')
        self.assertEqual('FormatError', last_json_line(run('count-flops', '--config', path)[2])['error'])

    def test_error_record(self):
        self.assertIn('docs/schemas.md', error_record(ConfigError('bad'))['hint'])
        self.assertIn('regenerate', error_record(FormatError('bad'))['hint'])
        self.assertEqual({'error': 'RuntimeError', 'message': 'boom', 'hint': 'Run with --verbose for details.'},
                         error_record(RuntimeError('boom')))

    def test_pipeline(self):
        data, checkpoint, out = (os.path.join(self.tmp.name, name) for name in ('data', 'ckpt', 'out'))
        config = self.write_config({
            'model': {'preset': 'tiny', 'input_size': [32, 32]},
            'train': {'preset': 'tiny', 'epochs': 1, 'batch_size': 4},
            'data': {'root': data},
            'synthetic': {'videos_per_class': 2, 'val_videos_per_class': 1, 'frames': 8, 'canvas': 32,
                          'object_size': [4, 8]}
        })
        status, stdout, _ = run('generate-data', '--config', config, '--json')
        self.assertEqual(0, status)
        self.assertEqual(4, json.loads(stdout)['num_classes'])
        self.assertEqual(8, len(read_jsonl(os.path.join(data, 'train', 'manifest.jsonl'))))

        status, stdout, _ = run('train', '--config', config, '--checkpoint', checkpoint, '--json')
        self.assertEqual(0, status)
        self.assertEqual(1, json.loads(stdout)['history']['epoch'])
        self.assertEqual(1, len(read_jsonl(os.path.join(checkpoint, 'history.jsonl'))))

        status, stdout, _ = run('eval', '--config', config, '--checkpoint', checkpoint, '--json')
        self.assertEqual(0, status)
        result = json.loads(stdout)
        self.assertEqual(4, result['num_videos'])
        self.assertEqual(1, result['epoch'])
        status, stdout, _ = run('eval', '--config', config, '--checkpoint', checkpoint, '--json')
        self.assertEqual(0, status)
        again = json.loads(stdout)
        self.assertEqual(result['accuracy'], again['accuracy'])
        self.assertEqual(result['predictions'], again['predictions'])

        status, stdout, _ = run('inspect-kernels', '--config', config, '--checkpoint', checkpoint, '--saliency',
                                '--out', out, '--json')
        self.assertEqual(0, status)
        kernels = read_jsonl(os.path.join(out, 'kernel_weights.jsonl'))
        self.assertEqual(4 * 4 * 6, len(kernels))
        self.assertEqual({'sample_id', 'branch', 'weight', 'block'}, set(kernels[0]))
        self.assertEqual(4 * 4 * 4, len(read_jsonl(os.path.join(out, 'saliency.jsonl'))))

        status, stdout, _ = run('scale-sweep', '--config', config, '--checkpoint', checkpoint, '--out', out, '--json')
        self.assertEqual(0, status)
        summary = json.loads(stdout)
        self.assertEqual({'s1_up', 's5_down'}, set(summary['zoom']))
        self.assertEqual({'t1_up', 't5_down'}, set(summary['frame_rate']))
        records = read_jsonl(os.path.join(out, 'scale_sweep.jsonl'))
        self.assertEqual({'original', 'zoom', 'frame_rate'}, {r['condition'] for r in records})

    def test_generate_default_counts(self):
        data = os.path.join(self.tmp.name, 'data')
        config = self.write_config({'data': {'root': data},
                                    'synthetic': {'frames': 8, 'canvas': 32, 'object_size': [4, 8]}})
        status, _, _ = run('generate-data', '--config', config)
        self.assertEqual(0, status)
        train = read_jsonl(os.path.join(data, 'train', 'manifest.jsonl'))
        self.assertEqual(400, len(train))
        self.assertEqual([100] * 4, [sum(1 for r in train if r['label'] == k) for k in range(4)])
        self.assertEqual(100, len(read_jsonl(os.path.join(data, 'val', 'manifest.jsonl'))))

    def test_resume(self):
        data, checkpoint = os.path.join(self.tmp.name, 'data'), os.path.join(self.tmp.name, 'ckpt')
        model = {'preset': 'tiny', 'input_size': [32, 32]}
        synthetic = {'videos_per_class': 1, 'val_videos_per_class': 1, 'frames': 8, 'canvas': 32,
                     'object_size': [4, 8]}
        config = self.write_config({'model': model, 'train': {'preset': 'tiny', 'epochs': 1, 'batch_size': 4},
                                    'data': {'root': data}, 'synthetic': synthetic})
        self.assertEqual(0, run('generate-data', '--config', config)[0])
        self.assertEqual(0, run('train', '--config', config, '--checkpoint', checkpoint)[0])
        config = self.write_config({'model': model, 'train': {'preset': 'tiny', 'epochs': 2, 'batch_size': 4},
                                    'data': {'root': data}, 'synthetic': synthetic})
        status, stdout, _ = run('train', '--config', config, '--checkpoint', checkpoint, '--resume', '--json')
        self.assertEqual(0, status)
        self.assertEqual(2, json.loads(stdout)['history']['epoch'])
        self.assertEqual([1, 2], [r['epoch'] for r in read_jsonl(os.path.join(checkpoint, 'history.jsonl'))])
