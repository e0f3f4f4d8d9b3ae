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
Sparse object interaction transformer.

    X [B, C, T, H, W]
      -> down-projection to C'' = C / 4                      (ConvBlock 1x1x1)
      -> saliency maps O [B, N, T, H, W], softmax over H*W   (SaliencyNet)
      -> object tokens F [B, T*N, C''] = sum_hw (E_t + X_t) * O_nt
      -> two transformer blocks (BN -> MHSA -> add, BN -> FF -> add)
      -> X' = GAP(X) + up(mean_tokens(F'))                   (fuse_global)

Tokens are ordered frame-major: token t * N + n belongs to object n in frame t.
"""
import logging
import typing
from dataclasses import dataclass

import numpy as np

from ean.layers import Conv3d, ConvBlock, BatchNorm, Linear
from ean.model import Module
from ean.ops import ConvSpec, AttentionParams, multihead_self_attention, global_avg_pool
from ean.tensor import Parameter, ShapeError, Tensor, add, matmul, reshape, relu, softmax, transpose

__ALL__ = ['SoiTrConfig', 'SaliencyNet', 'TransformerBlock', 'SOITR', 'pool_objects', 'saliency_records']

logger = logging.getLogger(__name__)


@dataclass
class SoiTrConfig(object):
    in_channels: int
    frames: int
    height: int
    width: int
    num_objects: int = 4
    reduction: int = 4
    saliency_reduction: int = 8
    heads: int = 4
    blocks: int = 2
    feed_forward: bool = True
    ff_expansion: float = 1.875
    embedding_std: float = 0.02

    def __post_init__(self) -> None:
        if self.bottleneck_channels % self.saliency_reduction != 0:
            raise ValueError("SOI-Tr bottleneck channels {} are not divisible by {}.".format(
                self.bottleneck_channels, self.saliency_reduction))
        if self.bottleneck_channels % self.heads != 0:
            raise ValueError("SOI-Tr bottleneck channels {} are not divisible by {} heads.".format(
                self.bottleneck_channels, self.heads))

    @property
    def bottleneck_channels(self) -> int:
        return self.in_channels // self.reduction

    @property
    def saliency_channels(self) -> int:
        return self.bottleneck_channels // self.saliency_reduction

    @property
    def ff_hidden(self) -> int:
        return int(round(self.ff_expansion * self.bottleneck_channels))

    @property
    def num_tokens(self) -> int:
        return self.frames * self.num_objects


class SaliencyNet(Module):
    """ Four-layer CNN regressing N spatially normalized object maps per frame. """
    def __init__(self, name: str, in_channels: int, hidden: int, num_objects: int, rng: np.random.Generator) -> None:
        super().__init__(name)
        self.conv1 = ConvBlock(name + '/conv1', in_channels, hidden, ConvSpec.full(1), rng)
        self.conv2 = ConvBlock(name + '/conv2', hidden, hidden, ConvSpec.temporal(3), rng)
        self.conv3 = ConvBlock(name + '/conv3', hidden, hidden, ConvSpec.spatial(5), rng)
        self.conv4 = Conv3d(name + '/conv4', hidden, num_objects, ConvSpec.full(1), rng, bias=True)

    def forward(self, x: Tensor) -> Tensor:
        logits = self.conv4(self.conv3(self.conv2(self.conv1(x))))
        batch, objects, frames, height, width = logits.shape
        maps = softmax(reshape(logits, (batch, objects, frames, height * width)), axis=-1)
        return reshape(maps, logits.shape)


def pool_objects(x: Tensor, maps: Tensor, embedding: Tensor) -> Tensor:
    """ Saliency-weighted spatial sums of position-embedded features.

    Args:
        x: Reduced features [B, C'', T, H, W].
        maps: Saliency maps [B, N, T, H, W].
        embedding: Positional embedding [T, C'', H, W].

    Returns:
        Object tokens [B, T * N, C''].
    """
    batch, channels, frames, height, width = x.shape
    if maps.ndim != 5 or maps.shape[0] != batch or maps.shape[2:] != (frames, height, width):
        raise ShapeError("Saliency maps {} do not match features {}.".format(maps.shape, x.shape))
    if embedding.shape != (frames, channels, height, width):
        raise ShapeError("Positional embedding {} does not match features {} (expecting {}).".format(
            embedding.shape, x.shape, (frames, channels, height, width)))
    objects = maps.shape[1]
    features = add(x, transpose(embedding, (1, 0, 2, 3)))
    features = reshape(transpose(features, (0, 2, 3, 4, 1)), (batch, frames, height * width, channels))
    weights = reshape(transpose(maps, (0, 2, 1, 3, 4)), (batch, frames, objects, height * width))
    return reshape(matmul(weights, features), (batch, frames * objects, channels))


class TransformerBlock(Module):
    """ Pre-norm residual block with batch normalization over (batch x tokens). """
    def __init__(self, name: str, dim: int, heads: int, ff_hidden: typing.Optional[int],
                 rng: np.random.Generator) -> None:
        super().__init__(name)
        self.heads = heads
        self.norm1 = BatchNorm(name + '/norm1', dim, axis=-1)
        self.query = Linear(name + '/query', dim, dim, rng)
        self.key = Linear(name + '/key', dim, dim, rng)
        self.value = Linear(name + '/value', dim, dim, rng)
        self.output = Linear(name + '/output', dim, dim, rng, init='zeros')
        if ff_hidden:
            self.norm2 = BatchNorm(name + '/norm2', dim, axis=-1)
            self.ff1 = Linear(name + '/ff1', dim, ff_hidden, rng)
            self.ff2 = Linear(name + '/ff2', ff_hidden, dim, rng, init='zeros')
        else:
            self.norm2 = self.ff1 = self.ff2 = None

    def attention_params(self) -> AttentionParams:
        return AttentionParams(self.query.weight, self.key.weight, self.value.weight, self.output.weight,
                               self.query.bias, self.key.bias, self.value.bias, self.output.bias)

    def forward(self, tokens: Tensor, return_attention: bool = False):
        mixed, attention = multihead_self_attention(self.norm1(tokens), self.attention_params(), self.heads,
                                                    return_weights=True)
        tokens = add(tokens, mixed)
        if self.ff1 is not None:
            tokens = add(tokens, self.ff2(relu(self.ff1(self.norm2(tokens)))))
        return (tokens, attention) if return_attention else tokens


class SOITR(Module):
    """ SOI-Tr insertion.

    After the last stage, `global_features` returns X' [B, C]. After an intermediate stage, `forward`
    returns X + up(mean token) broadcast over (T, H, W); its global average equals X'.
    """
    def __init__(self, name: str, cfg: SoiTrConfig, rng: np.random.Generator) -> None:
        super().__init__(name)
        self.cfg = cfg
        dim = cfg.bottleneck_channels
        self.down = ConvBlock(name + '/down', cfg.in_channels, dim, ConvSpec.full(1), rng)
        self.saliency = SaliencyNet(name + '/saliency', dim, cfg.saliency_channels, cfg.num_objects, rng)
        self.embedding = Parameter(rng.normal(0.0, cfg.embedding_std, size=(cfg.frames, dim, cfg.height, cfg.width)))
        ff_hidden = cfg.ff_hidden if cfg.feed_forward else None
        self.blocks = [TransformerBlock(name + '/block{}'.format(i + 1), dim, cfg.heads, ff_hidden, rng)
                       for i in range(cfg.blocks)]
        self.up = Linear(name + '/up', dim, cfg.in_channels, rng, init='zeros')

    def _check_input(self, x: Tensor) -> None:
        expected = (self.cfg.in_channels, self.cfg.frames, self.cfg.height, self.cfg.width)
        if x.ndim != 5 or x.shape[1:] != expected:
            raise ShapeError("SOI-Tr '{}' expects [B, {}, {}, {}, {}] features, got {}.".format(
                self.name, *expected, x.shape))

    def interactions(self, x: Tensor, trace: typing.Optional[dict] = None) -> Tensor:
        """ Returns interaction tokens F' [B, T * N, C'']. """
        self._check_input(x)
        reduced = self.down(x)
        maps = self.saliency(reduced)
        if trace is not None:
            trace[self.name] = np.array(maps.data)
        tokens = pool_objects(reduced, maps, self.embedding)
        for block in self.blocks:
            tokens = block(tokens)
        return tokens

    def fuse_global(self, x: Tensor, tokens: Tensor) -> Tensor:
        return add(global_avg_pool(x), self.up(tokens.mean(axis=1)))

    def global_features(self, x: Tensor, trace: typing.Optional[dict] = None) -> Tensor:
        return self.fuse_global(x, self.interactions(x, trace))

    def forward(self, x: Tensor, trace: typing.Optional[dict] = None) -> Tensor:
        context = self.up(self.interactions(x, trace).mean(axis=1))
        return add(x, reshape(context, context.shape + (1, 1, 1)))


def saliency_records(maps: np.ndarray, sample_ids: typing.Optional[typing.Sequence] = None,
                     block: typing.Optional[str] = None) -> typing.List[dict]:
    """ JSON-lines records {sample_id, object_n, frame_t, map[, block]}, maps [B, N, T, H, W]. """
    maps = np.asarray(maps)
    sample_ids = list(range(maps.shape[0])) if sample_ids is None else list(sample_ids)
    records = []
    for sample_id, sample in zip(sample_ids, maps):
        for n in range(sample.shape[0]):
            for t in range(sample.shape[1]):
                record = {'sample_id': sample_id, 'object_n': n, 'frame_t': t,
                          'map': [float(v) for v in sample[n, t].reshape(-1)]}
                if block is not None:
                    record['block'] = block
                records.append(record)
    return records
