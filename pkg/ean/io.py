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
File formats.

Tensor file ('.eant'):
    magic       4 bytes  b'EANT'
    version     u32 LE   1
    kind        u8       0 = float32, 1 = float64
    rank        u8
    extents     rank x u64 LE
    payload     row-major, little-endian IEEE-754

Checkpoint directory:
    params/<name>.eant      trainable parameters
    buffers/<name>.eant     batch norm running statistics
    optimizer/<name>.eant   momentum buffers
    optimizer.json          {"epoch": int, "step": int, "lr": float}
    config.json             configuration the model was built from
"""
import json
import logging
import os
import struct
import typing

import numpy as np

__ALL__ = ['FormatError', 'save_tensor', 'load_tensor', 'write_jsonl', 'read_jsonl', 'save_checkpoint',
           'load_checkpoint', 'load_config', 'save_json']

logger = logging.getLogger(__name__)

MAGIC = b'EANT'
VERSION = 1
KIND_CODES = {np.dtype('<f4'): 0, np.dtype('<f8'): 1}
CODE_KINDS = {code: dtype for dtype, code in KIND_CODES.items()}
_HEADER = struct.Struct('<4sIBB')


class FormatError(ValueError):
    """ A file does not follow the expected format. """


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder('<')
    if dtype not in KIND_CODES:
        raise FormatError("Unsupported element kind: '{}' (must be float32 or float64).".format(array.dtype))
    header = _HEADER.pack(MAGIC, VERSION, KIND_CODES[dtype], array.ndim)
    extents = struct.pack('<{}Q'.format(array.ndim), *array.shape)
    return header + extents + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_tensor(blob: bytes, source: str = '<bytes>') -> np.ndarray:
    if len(blob) < _HEADER.size:
        raise FormatError("Truncated tensor header in '{}'.".format(source))
    magic, version, kind, rank = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError("Bad magic {!r} in '{}' (expected {!r}).".format(magic, source, MAGIC))
    if version != VERSION:
        raise FormatError("Unknown tensor format version {} in '{}' (supported: {}).".format(version, source, VERSION))
    if kind not in CODE_KINDS:
        raise FormatError("Unknown element kind code {} in '{}'.".format(kind, source))
    offset = _HEADER.size + 8 * rank
    if len(blob) < offset:
        raise FormatError("Truncated tensor extents in '{}'.".format(source))
    shape = struct.unpack_from('<{}Q'.format(rank), blob, _HEADER.size)
    dtype = CODE_KINDS[kind]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise FormatError("Payload of '{}' has {} bytes, shape {} requires {}.".format(
            source, len(blob) - offset, shape, expected))
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape).astype(dtype.newbyteorder('='))


def save_tensor(path: str, array: np.ndarray) -> None:
    try:
        with open(path, 'wb') as stream:
            stream.write(encode_tensor(array))
    except OSError as err:
        raise type(err)("Cannot write tensor file '{}': {}".format(path, err)) from err


def load_tensor(path: str) -> np.ndarray:
    try:
        with open(path, 'rb') as stream:
            blob = stream.read()
    except OSError as err:
        raise type(err)("Cannot read tensor file '{}': {}".format(path, err)) from err
    return decode_tensor(blob, path)


def write_jsonl(path_or_stream: typing.Union[str, typing.TextIO], records: typing.Iterable[typing.Mapping]) -> int:
    """ Writes one JSON object per line. Returns number of records. """
    def _write(stream) -> int:
        count = 0
        for record in records:
            stream.write(json.dumps(record, sort_keys=True) + '\n')
            count += 1
        return count
    if not isinstance(path_or_stream, str):
        return _write(path_or_stream)
    try:
        with open(path_or_stream, 'w') as stream:
            return _write(stream)
    except OSError as err:
        raise type(err)("Cannot write '{}': {}".format(path_or_stream, err)) from err


def read_jsonl(path: str) -> typing.List[dict]:
    try:
        with open(path) as stream:
            return [json.loads(line) for line in stream if line.strip()]
    except OSError as err:
        raise type(err)("Cannot read '{}': {}".format(path, err)) from err


def save_json(path: str, obj: typing.Any) -> None:
    try:
        with open(path, 'w') as stream:
            json.dump(obj, stream, indent=2, sort_keys=True)
    except OSError as err:
        raise type(err)("Cannot write '{}': {}".format(path, err)) from err


def load_config(path: str) -> dict:
    """ Loads a JSON configuration file (see docs/schemas.md). """
    try:
        with open(path) as stream:
            config = json.load(stream)
    except OSError as err:
        raise type(err)("Cannot read config file '{}': {}".format(path, err)) from err
    except json.JSONDecodeError as err:
        raise FormatError("Config file '{}' is not valid JSON: {}".format(path, err)) from err
    if not isinstance(config, dict):
        raise FormatError("Config file '{}' must contain a JSON object, found {}.".format(path, type(config).__name__))
    return config


def _save_arrays(directory: str, arrays: typing.Mapping[str, np.ndarray]) -> None:
    os.makedirs(directory, exist_ok=True)
    for name, array in arrays.items():
        save_tensor(os.path.join(directory, name + '.eant'), array)


def _load_arrays(directory: str) -> typing.Dict[str, np.ndarray]:
    if not os.path.isdir(directory):
        return {}
    return {file_name[:-len('.eant')]: load_tensor(os.path.join(directory, file_name))
            for file_name in sorted(os.listdir(directory)) if file_name.endswith('.eant')}


def save_checkpoint(path: str, params: typing.Mapping[str, np.ndarray], buffers: typing.Mapping[str, np.ndarray],
                    optimizer: typing.Mapping[str, np.ndarray], optimizer_meta: typing.Mapping[str, typing.Any],
                    config: typing.Mapping[str, typing.Any]) -> None:
    os.makedirs(path, exist_ok=True)
    _save_arrays(os.path.join(path, 'params'), params)
    _save_arrays(os.path.join(path, 'buffers'), buffers)
    _save_arrays(os.path.join(path, 'optimizer'), optimizer)
    save_json(os.path.join(path, 'optimizer.json'), dict(optimizer_meta))
    save_json(os.path.join(path, 'config.json'), dict(config))
    logger.info("Checkpoint saved to '%s' (%d parameter tensors).", path, len(params))


def load_checkpoint(path: str) -> typing.Dict[str, typing.Any]:
    """ Returns {'params', 'buffers', 'optimizer', 'optimizer_meta', 'config'}. """
    if not os.path.isdir(path) or not os.path.isdir(os.path.join(path, 'params')):
        raise FileNotFoundError("Checkpoint directory '{}' not found or has no 'params' folder.".format(path))
    return {
        'params': _load_arrays(os.path.join(path, 'params')),
        'buffers': _load_arrays(os.path.join(path, 'buffers')),
        'optimizer': _load_arrays(os.path.join(path, 'optimizer')),
        'optimizer_meta': load_config(os.path.join(path, 'optimizer.json')),
        'config': load_config(os.path.join(path, 'config.json'))
    }
