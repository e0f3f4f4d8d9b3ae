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
import collections
import logging
import typing

import numpy as np

from ean.tensor import Parameter, ShapeError

__ALL__ = ['Module']

logger = logging.getLogger(__name__)


class Module(object):
    """ A base class for all network parts.

    Sub-modules and parameters are discovered from instance attributes (in assignment order).
    Lists and dicts of modules are supported and named `<attr>.<index or key>`.
    """
    def __init__(self, name: str) -> None:
        self.name = name
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> typing.Iterator[typing.Tuple[str, 'Module']]:
        for attr, value in vars(self).items():
            if isinstance(value, Module):
                yield attr, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield '{}.{}'.format(attr, i), item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield '{}.{}'.format(attr, key), item

    def modules(self) -> typing.Iterator['Module']:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def own_parameters(self) -> typing.Iterator[typing.Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if isinstance(value, Parameter):
                yield attr, value

    def own_buffers(self) -> typing.Dict[str, np.ndarray]:
        """ Non-trainable state (e.g. running statistics). """
        return {}

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError("Module '{}' has no buffer '{}'.".format(self.name, name))

    def named_parameters(self, prefix: str = '') -> typing.Iterator[typing.Tuple[str, Parameter]]:
        for attr, param in self.own_parameters():
            yield prefix + attr, param
        for attr, child in self.children():
            yield from child.named_parameters(prefix + attr + '.')

    def named_buffers(self, prefix: str = '') -> typing.Iterator[typing.Tuple[str, np.ndarray]]:
        for attr, buffer in self.own_buffers().items():
            yield prefix + attr, buffer
        for attr, child in self.children():
            yield from child.named_buffers(prefix + attr + '.')

    def parameters(self) -> typing.List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def num_params(self) -> int:
        return int(sum(param.size for param in self.parameters()))

    def train(self, mode: bool = True) -> 'Module':
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> typing.Dict[str, np.ndarray]:
        return collections.OrderedDict((name, np.array(param.data)) for name, param in self.named_parameters())

    def buffers_dict(self) -> typing.Dict[str, np.ndarray]:
        return collections.OrderedDict((name, np.array(buffer)) for name, buffer in self.named_buffers())

    def load_state_dict(self, state: typing.Mapping[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing, unexpected = set(params) - set(state), set(state) - set(params)
            if missing or unexpected:
                raise KeyError("State dict mismatch for '{}': missing={}, unexpected={}.".format(
                    self.name, sorted(missing), sorted(unexpected)))
        for name, values in state.items():
            if name in params:
                try:
                    params[name].assign(values)
                except ShapeError as err:
                    raise ShapeError("Parameter '{}': {}".format(name, err))

    def load_buffers(self, buffers: typing.Mapping[str, np.ndarray]) -> None:
        owners = {}
        for prefix, module in self._prefixed_modules():
            for attr in module.own_buffers():
                owners[prefix + attr] = (module, attr)
        for name, values in buffers.items():
            if name not in owners:
                raise KeyError("Unknown buffer '{}' for module '{}'.".format(name, self.name))
            module, attr = owners[name]
            module.set_buffer(attr, values)

    def _prefixed_modules(self, prefix: str = '') -> typing.Iterator[typing.Tuple[str, 'Module']]:
        yield prefix, self
        for attr, child in self.children():
            yield from child._prefixed_modules(prefix + attr + '.')

    def __repr__(self) -> str:
        return '{}(name={}, params={})'.format(type(self).__name__, self.name, self.num_params())
