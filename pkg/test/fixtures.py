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
Reference fusion variants written without a fusion matrix. They reuse the branch layers of an EAB so
that the block with the equivalent matrix must reproduce them exactly.

Object pooling variants for SOI-Tr replace the learned saliency maps with fixed regions or with one
token per spatial position.
"""
import numpy as np

from ean.modules.eab import EAB
from ean.modules.soitr import SOITR, pool_objects
from ean.ops import pool3d
from ean.tensor import Tensor, concat, no_grad, split

__ALL__ = ['spatial_outputs', 'temporal_outputs', 'incep_block', 'two_plus_one_d', 'channel_shuffle',
           'shuffle_permutation', 'static_matrix', 'fixed_region_maps', 'all_position_maps',
           'interactions_with_maps']


def spatial_outputs(eab: EAB, h: Tensor) -> np.ndarray:
    with no_grad():
        parts = split(h, eab.cfg.group_count, axis=1)
        return np.concatenate([branch(part).data for branch, part in zip(eab.spatial, parts)], axis=1)


def temporal_outputs(eab: EAB, y: np.ndarray) -> np.ndarray:
    with no_grad():
        parts = split(Tensor(y, dtype=y.dtype), eab.cfg.group_count, axis=1)
        return np.concatenate([branch(part).data for branch, part in zip(eab.temporal, parts)], axis=1)


def incep_block(eab: EAB, x: Tensor) -> np.ndarray:
    """ Independent (2+1)D branch pairs of growing size, max-pool branch and residual; no channel mixing. """
    with no_grad():
        h = eab.down(x)
        parts = split(h, eab.cfg.group_count, axis=1)
        y = concat([t(s(part)) for s, t, part in zip(eab.spatial, eab.temporal, parts)], axis=1)
        if eab.cfg.include_maxpool_branch:
            y = y + pool3d(h, 'max', 3, 1)
        return (x + eab.up(y)).data


def two_plus_one_d(eab: EAB, h: Tensor, blocks: np.ndarray) -> np.ndarray:
    """ Group j's spatial output is mixed by its own [C'/G, C'/G] matrix before its temporal convolution. """
    y = spatial_outputs(eab, h)
    parts = np.split(y, eab.cfg.group_count, axis=1)
    mixed = [np.einsum('oc,bcthw->bothw', block, part) for block, part in zip(blocks, parts)]
    return temporal_outputs(eab, np.concatenate(mixed, axis=1).astype(y.dtype))


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(eab: EAB, h: Tensor, groups: int) -> np.ndarray:
    y = spatial_outputs(eab, h)
    batch, channels = y.shape[:2]
    shuffled = y.reshape((batch, groups, channels // groups) + y.shape[2:]).swapaxes(1, 2).reshape(y.shape)
    return temporal_outputs(eab, np.ascontiguousarray(shuffled))


def static_matrix(eab: EAB, h: Tensor, m: np.ndarray) -> np.ndarray:
    """ One fusion matrix shared by all samples. """
    y = spatial_outputs(eab, h)
    return temporal_outputs(eab, np.einsum('oc,bcthw->bothw', m, y).astype(y.dtype))


def fixed_region_maps(batch: int, frames: int, height: int, width: int, rows: int = 2, cols: int = 2) -> np.ndarray:
    """ Uniform maps over a rows x cols grid of image regions, [B, rows * cols, T, H, W]. """
    maps = np.zeros((batch, rows * cols, frames, height, width))
    for i, row_cells in enumerate(np.array_split(np.arange(height), rows)):
        for j, col_cells in enumerate(np.array_split(np.arange(width), cols)):
            maps[:, i * cols + j, :, row_cells[0]:row_cells[-1] + 1, col_cells[0]:col_cells[-1] + 1] = \
                1.0 / (len(row_cells) * len(col_cells))
    return maps


def all_position_maps(batch: int, frames: int, height: int, width: int) -> np.ndarray:
    """ One-hot maps, one object per spatial position, [B, H * W, T, H, W]. """
    eye = np.eye(height * width).reshape(height * width, 1, height, width)
    return np.broadcast_to(eye, (batch, height * width, frames, height, width)).copy()


def interactions_with_maps(soitr: SOITR, x: Tensor, maps: np.ndarray) -> Tensor:
    """ SOI-Tr interaction tokens with `maps` in place of the saliency network. """
    with no_grad():
        reduced = soitr.down(x)
        tokens = pool_objects(reduced, Tensor(maps, dtype=reduced.dtype), soitr.embedding)
        for block in soitr.blocks:
            tokens = block(tokens)
        return tokens
