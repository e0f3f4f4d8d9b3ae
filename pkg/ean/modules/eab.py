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
Event adaptive block.

The block input X [B, C, T, H, W] is projected to C' bottleneck channels and split into G groups.
Group j goes through a spatial convolution of size (2j - 1) x (2j - 1); the concatenated result is
mixed per sample by a C' x C' fusion matrix M (the same matrix at every site); the mixed tensor is
split again and group i goes through a temporal convolution of size 2i - 1. M is regressed from X by
a small 3D network (`EspNet`) and starts as the identity matrix, in which case the block is a static
Inception-like set of (2+1)D branches.

Kernels of size >= 5 are realized as 3-tap kernels with dilation (size - 1) / 2.
"""
import logging
import math
import typing
from dataclasses import dataclass

import numpy as np

from ean.layers import Conv3d, ConvBlock, Linear
from ean.model import Module
from ean.ops import ConvSpec, pool3d, global_avg_pool
from ean.tensor import Tensor, add, concat, matmul, reshape, split

__ALL__ = ['EabConfig', 'EspNet', 'EAB', 'esp_strides', 'kernel_weights', 'kernel_weight_records', 'branch_labels']

logger = logging.getLogger(__name__)

FUSION_MODES = ('dynamic', 'identity')


def esp_strides(extents: typing.Sequence[int]) -> typing.Tuple[int, int, int]:
    """ Per-axis stride of both ESP-Net 5x5x5 convolutions: 2, or 1 on axes shorter than 5. """
    return tuple(2 if n >= 5 else 1 for n in extents)


@dataclass
class EabConfig(object):
    in_channels: int
    group_count: int = 3
    reduction: int = 4
    projection_groups: int = 4
    esp_reduction: int = 16
    esp_kernel: int = 5
    include_maxpool_branch: bool = True
    inter_relu: bool = True
    fusion: str = 'dynamic'

    def __post_init__(self) -> None:
        if self.fusion not in FUSION_MODES:
            raise ValueError("Invalid fusion mode: '{}' (must be one of {}).".format(self.fusion, FUSION_MODES))
        if self.group_count <= 0:
            raise ValueError("Number of kernel groups must be positive, got {}.".format(self.group_count))
        if self.in_channels % self.projection_groups != 0:
            raise ValueError("Block channels {} are not divisible by projection groups {}.".format(
                self.in_channels, self.projection_groups))
        if self.fusion == 'dynamic' and self.in_channels < self.esp_reduction:
            raise ValueError("ESP-Net needs at least {} input channels, got {}.".format(self.esp_reduction,
                                                                                       self.in_channels))

    @property
    def bottleneck_channels(self) -> int:
        """ C' = C / reduction rounded to a multiple of lcm(G, projection groups). """
        unit = self.group_count * self.projection_groups // math.gcd(self.group_count, self.projection_groups)
        return max(1, int(round(self.in_channels / self.reduction / unit))) * unit

    @property
    def group_channels(self) -> int:
        return self.bottleneck_channels // self.group_count

    @property
    def esp_channels(self) -> int:
        return self.in_channels // self.esp_reduction

    def kernels(self) -> typing.List[typing.Tuple[int, int]]:
        """ (taps, dilation) of the j-th branch, j = 1..G; the same sizes serve space and time. """
        kernels = []
        for j in range(1, self.group_count + 1):
            size = 2 * j - 1
            kernels.append((size, 1) if size < 5 else (3, (size - 1) // 2))
        return kernels


def branch_labels(group_count: int) -> typing.List[str]:
    sizes = [2 * j - 1 for j in range(1, group_count + 1)]
    return ['S-{}'.format(s) for s in sizes] + ['T-{}'.format(s) for s in sizes]


class EspNet(Module):
    """ Event scale perceiving network: X [B, C, T, H, W] -> M [B, C', C']. """
    def __init__(self, name: str, cfg: EabConfig, rng: np.random.Generator) -> None:
        super().__init__(name)
        channels, k = cfg.esp_channels, cfg.esp_kernel
        self.bottleneck_channels = cfg.bottleneck_channels
        self.reduce = ConvBlock(name + '/reduce', cfg.in_channels, channels, ConvSpec.full(1), rng)
        self.conv1 = ConvBlock(name + '/conv1', channels, channels, ConvSpec.full(k, groups=channels), rng)
        self.conv2 = ConvBlock(name + '/conv2', channels, channels, ConvSpec.full(k, groups=channels), rng)
        self.fc = Linear(name + '/fc', channels, self.bottleneck_channels ** 2, rng, init='zeros')

    def forward(self, x: Tensor) -> Tensor:
        stride = esp_strides(x.shape[2:])
        h = self.reduce(x)
        h = self.conv2(self.conv1(h, stride), stride)
        h = self.fc(global_avg_pool(h))
        size = self.bottleneck_channels
        m = reshape(h, (x.shape[0], size, size))
        return add(m, Tensor.wrap(np.eye(size, dtype=m.dtype)))


class EAB(Module):
    """ Residual event adaptive block; output shape equals input shape. """
    def __init__(self, name: str, cfg: EabConfig, rng: np.random.Generator) -> None:
        super().__init__(name)
        self.cfg = cfg
        c_in, c_mid, c_grp = cfg.in_channels, cfg.bottleneck_channels, cfg.group_channels
        groups = cfg.projection_groups
        self.down = ConvBlock(name + '/down', c_in, c_mid, ConvSpec.full(1, groups=groups), rng)
        self.spatial = [
            ConvBlock(name + '/spatial{}'.format(j), c_grp, c_grp, ConvSpec.spatial(k, dilation=d), rng,
                      activation=cfg.inter_relu)
            for j, (k, d) in enumerate(cfg.kernels(), 1)
        ]
        self.temporal = [
            Conv3d(name + '/temporal{}'.format(i), c_grp, c_grp, ConvSpec.temporal(k, dilation=d), rng)
            for i, (k, d) in enumerate(cfg.kernels(), 1)
        ]
        self.esp = EspNet(name + '/esp', cfg, rng) if cfg.fusion == 'dynamic' else None
        self.up = Conv3d(name + '/up', c_mid, c_in, ConvSpec.full(1, groups=groups), rng, init='zeros')

    def fusion_matrix(self, x: Tensor) -> typing.Optional[Tensor]:
        return self.esp(x) if self.esp is not None else None

    def synthesize_and_apply(self, x: Tensor, m: typing.Optional[Tensor]) -> Tensor:
        """ Spatial branches -> per-sample channel mixing by `m` -> temporal branches.

        Args:
            x: Bottleneck features [B, C', T, H, W].
            m: Fusion matrices [B, C', C'] or None for identity fusion.
        """
        groups = self.cfg.group_count
        if x.shape[1] % groups != 0:
            raise ValueError("Bottleneck channels {} are not divisible by {} groups.".format(x.shape[1], groups))
        y = concat([branch(part) for branch, part in zip(self.spatial, split(x, groups, axis=1))], axis=1)
        if m is not None:
            batch, channels = y.shape[:2]
            if m.shape != (batch, channels, channels):
                raise ValueError("Fusion matrix shape {} does not match features {}.".format(m.shape, y.shape))
            y = reshape(matmul(m, reshape(y, (batch, channels, -1))), y.shape)
        return concat([branch(part) for branch, part in zip(self.temporal, split(y, groups, axis=1))], axis=1)

    def forward(self, x: Tensor, trace: typing.Optional[dict] = None) -> Tensor:
        h = self.down(x)
        m = self.fusion_matrix(x)
        if trace is not None and m is not None:
            trace[self.name] = np.array(m.data)
        y = self.synthesize_and_apply(h, m)
        if self.cfg.include_maxpool_branch:
            y = add(y, pool3d(h, 'max', 3, 1))
        return add(x, self.up(y))


def kernel_weights(m: np.ndarray, group_count: int) -> typing.List[typing.Dict[str, float]]:
    """ Per sample, the summed |M| entries connected to every branch.

    Spatial branch j feeds the columns of group j, temporal branch i reads the rows of group i.
    """
    m = np.abs(np.asarray(m, dtype=np.float64))
    if m.ndim == 2:
        m = m[None]
    size = m.shape[-1]
    if m.shape[-2] != size or size % group_count != 0:
        raise ValueError("Fusion matrix shape {} is not square or not divisible by {} groups.".format(
            m.shape, group_count))
    width = size // group_count
    labels = branch_labels(group_count)
    weights = []
    for sample in m:
        spatial = [float(sample[:, j * width:(j + 1) * width].sum()) for j in range(group_count)]
        temporal = [float(sample[i * width:(i + 1) * width, :].sum()) for i in range(group_count)]
        weights.append(dict(zip(labels, spatial + temporal)))
    return weights


def kernel_weight_records(m: np.ndarray, group_count: int, sample_ids: typing.Optional[typing.Sequence] = None,
                          block: typing.Optional[str] = None) -> typing.List[dict]:
    """ JSON-lines records {sample_id, branch, weight[, block]}. """
    records = []
    per_sample = kernel_weights(m, group_count)
    sample_ids = list(range(len(per_sample))) if sample_ids is None else list(sample_ids)
    for sample_id, weights in zip(sample_ids, per_sample):
        for branch, weight in weights.items():
            record = {'sample_id': sample_id, 'branch': branch, 'weight': weight}
            if block is not None:
                record['block'] = block
            records.append(record)
    return records
