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
Parameterized building blocks. Weight initializers:
    'he'        normal, std = sqrt(2 / fan_in), used for convolutions followed by ReLU
    'uniform'   U(-1/sqrt(fan_in), 1/sqrt(fan_in)), default for linear layers
    'zeros'     zero weights, used for the last projection of every residual insertion
    'identity'  centre tap 1 on matching channels (depthwise or square weights only)
"""
import dataclasses
import math
import typing

import numpy as np

from ean.model import Module
from ean.ops import ConvSpec, BatchNormState, conv, batchnorm, linear
from ean.tensor import Tensor, Parameter, add, reshape, relu

__ALL__ = ['init_weights', 'Conv3d', 'BatchNorm', 'Linear', 'ConvBlock']


def init_weights(shape: typing.Tuple[int, ...], init: str, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    if init == 'he':
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    if init == 'uniform':
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)
    if init == 'zeros':
        return np.zeros(shape)
    if init == 'identity':
        weights = np.zeros(shape)
        centre = tuple(k // 2 for k in shape[2:])
        depthwise = shape[1] == 1
        for c in range(shape[0] if depthwise else min(shape[0], shape[1])):
            weights[(c, 0 if depthwise else c) + centre] = 1.0
        return weights
    raise ValueError("Invalid initializer: '{}' (must be one of 'he', 'uniform', 'zeros', 'identity').".format(init))


class Conv3d(Module):
    """ Convolution layer, weights [C_out, C_in / groups, kT, kH, kW]. """
    def __init__(self, name: str, in_channels: int, out_channels: int, spec: ConvSpec, rng: np.random.Generator,
                 bias: bool = False, init: str = 'he') -> None:
        super().__init__(name)
        if in_channels % spec.groups != 0 or out_channels % spec.groups != 0:
            raise ValueError("Channel/group mismatch in '{}': in_channels={}, out_channels={}, groups={}.".format(
                name, in_channels, out_channels, spec.groups))
        self.in_channels, self.out_channels, self.spec = in_channels, out_channels, spec
        shape = (out_channels, in_channels // spec.groups) + spec.kernel
        self.weight = Parameter(init_weights(shape, init, shape[1] * spec.volume, rng))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor, stride: typing.Optional[typing.Tuple[int, int, int]] = None) -> Tensor:
        spec = self.spec if stride is None else dataclasses.replace(self.spec, stride=stride)
        y = conv(x, self.weight, spec)
        if self.bias is not None:
            y = add(y, reshape(self.bias, (1, -1, 1, 1, 1)))
        return y


class BatchNorm(Module):
    """ Batch normalization over all axes but `axis`. """
    def __init__(self, name: str, channels: int, axis: int = 1) -> None:
        super().__init__(name)
        self.state = BatchNormState(channels)
        self.axis = axis
        self.weight = self.state.gamma
        self.bias = self.state.beta

    def own_buffers(self) -> typing.Dict[str, np.ndarray]:
        return {'running_mean': self.state.running_mean, 'running_var': self.state.running_var}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        current = self.own_buffers().get(name)
        if current is None:
            return super().set_buffer(name, value)
        value = np.array(value, dtype=current.dtype)
        if value.shape != current.shape:
            raise ValueError("Buffer '{}' of '{}' expects shape {}, got {}.".format(name, self.name, current.shape,
                                                                                     value.shape))
        setattr(self.state, name, value)

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.state, self.training, self.axis)


class Linear(Module):
    """ Affine layer, weights [d_in, d_out]. """
    def __init__(self, name: str, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init: str = 'uniform') -> None:
        super().__init__(name)
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(init_weights((d_in, d_out), init, d_in, rng))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """ Convolution (no bias) -> batch norm -> optional ReLU. """
    def __init__(self, name: str, in_channels: int, out_channels: int, spec: ConvSpec, rng: np.random.Generator,
                 activation: bool = True, init: str = 'he') -> None:
        super().__init__(name)
        self.conv = Conv3d(name + '/conv', in_channels, out_channels, spec, rng, bias=False, init=init)
        self.bn = BatchNorm(name + '/bn', out_channels)
        self.activation = activation

    @property
    def spec(self) -> ConvSpec:
        return self.conv.spec

    def forward(self, x: Tensor, stride: typing.Optional[typing.Tuple[int, int, int]] = None) -> Tensor:
        x = self.bn(self.conv(x, stride))
        return relu(x) if self.activation else x
