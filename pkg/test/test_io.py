import io
import os
import struct
import tempfile
from unittest import TestCase

import numpy as np

from ean.io import (FormatError, decode_tensor, encode_tensor, load_checkpoint, load_config, load_tensor, read_jsonl,
                    save_checkpoint, save_tensor, write_jsonl)


class TestTensorFormat(TestCase):
    def test_encode_decode(self):
        array = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        blob = encode_tensor(array)
        self.assertEqual(b'EANT', blob[:4])
        self.assertEqual(4 + 4 + 1 + 1 + 3 * 8 + 24 * 4, len(blob))
        self.assertEqual((1, 0, 3), struct.unpack_from('<IBB', blob, 4))
        decoded = decode_tensor(blob)
        self.assertEqual(np.float32, decoded.dtype)
        self.assertTrue(np.array_equal(array, decoded))

    def test_float64_and_scalar(self):
        decoded = decode_tensor(encode_tensor(np.float64(2.5)))
        self.assertEqual((), decoded.shape)
        self.assertEqual(np.float64, decoded.dtype)
        self.assertEqual(2.5, float(decoded))

    def test_errors(self):
        blob = encode_tensor(np.ones((2, 2), dtype=np.float32))
        with self.assertRaisesRegex(FormatError, 'magic'):
            decode_tensor(b'NOPE' + blob[4:])
        with self.assertRaisesRegex(FormatError, 'version'):
            decode_tensor(blob[:4] + struct.pack('<I', 2) + blob[8:])
        with self.assertRaises(FormatError):
            decode_tensor(blob[:6])
        with self.assertRaises(FormatError):
            decode_tensor(blob[:-1])
        with self.assertRaises(FormatError):
            decode_tensor(blob[:8] + bytes([7]) + blob[9:])
        with self.assertRaises(FormatError):
            encode_tensor(np.ones(3, dtype=np.int32))

    def test_files(self):
        with tempfile.TemporaryDirectory() as root:
            path = os.path.join(root, 'x.eant')
            save_tensor(path, np.eye(3))
            self.assertTrue(np.array_equal(np.eye(3), load_tensor(path)))
            with self.assertRaises(FileNotFoundError):
                load_tensor(os.path.join(root, 'missing.eant'))


class TestJson(TestCase):
    def test_jsonl(self):
        records = [{'sample_id': 0, 'branch': 'S-1', 'weight': 1.5}, {'sample_id': 1, 'branch': 'T-3', 'weight': 0.0}]
        stream = io.StringIO()
        self.assertEqual(2, write_jsonl(stream, records))
        self.assertEqual(2, len(stream.getvalue().splitlines()))
        with tempfile.TemporaryDirectory() as root:
            path = os.path.join(root, 'records.jsonl')
            write_jsonl(path, records)
            self.assertEqual(records, read_jsonl(path))

    def test_load_config(self):
        with tempfile.TemporaryDirectory() as root:
            path = os.path.join(root, 'config.json')
            with open(path, 'w') as stream:
                stream.write('{"model": {"preset": "tiny"}}')
            self.assertEqual({'model': {'preset': 'tiny'}}, load_config(path))
            with open(path, 'w') as stream:
                stream.write('{"model": ')
            with self.assertRaises(FormatError):
                load_config(path)
            with open(path, 'w') as stream:
                stream.write('[1, 2]')
            with self.assertRaises(FormatError):
                load_config(path)
            with self.assertRaises(FileNotFoundError):
                load_config(os.path.join(root, 'missing.json'))


class TestCheckpoint(TestCase):
    def test_round_trip(self):
        params = {'classifier.weight': np.ones((4, 2), dtype=np.float32), 'eabs.1.up.weight': np.zeros(3)}
        buffers = {'backbone.stem.bn.running_mean': np.full(4, 0.5, dtype=np.float32)}
        optimizer = {'classifier.weight': np.full((4, 2), 0.1, dtype=np.float32)}
        with tempfile.TemporaryDirectory() as root:
            path = os.path.join(root, 'ckpt')
            save_checkpoint(path, params, buffers, optimizer, {'epoch': 2, 'step': 10, 'lr': 0.01},
                            {'model': {'preset': 'tiny'}})
            state = load_checkpoint(path)
            with self.assertRaises(FileNotFoundError):
                load_checkpoint(os.path.join(root, 'missing'))
        self.assertEqual(set(params), set(state['params']))
        for name, array in params.items():
            self.assertEqual(array.dtype, state['params'][name].dtype)
            self.assertTrue(np.array_equal(array, state['params'][name]))
        self.assertTrue(np.array_equal(buffers['backbone.stem.bn.running_mean'],
                                       state['buffers']['backbone.stem.bn.running_mean']))
        self.assertTrue(np.array_equal(optimizer['classifier.weight'], state['optimizer']['classifier.weight']))
        self.assertEqual({'epoch': 2, 'step': 10, 'lr': 0.01}, state['optimizer_meta'])
        self.assertEqual({'model': {'preset': 'tiny'}}, state['config'])
