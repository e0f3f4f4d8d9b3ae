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
Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every differentiable operation appends a node to the active `Graph`; outside a
`Graph` context nothing is recorded. Nodes are appended after their inputs, so
`backward` simply walks the graph of the loss in reverse order. Operations never
mutate their inputs; a tensor's array is read-only.

Element kind is float32 by default. Tests switch to float64 with
`precision('float64')` so that finite differences are meaningful.
"""
import contextlib
import logging
import threading
import typing

import numpy as np

__ALL__ = ['ShapeError', 'GraphError', 'Tensor', 'Parameter', 'Graph', 'MacCounter',
           'precision', 'no_grad', 'count_macs', 'record_macs', 'current_graph', 'default_dtype',
           'add', 'sub', 'mul', 'div', 'neg', 'power', 'relu', 'exp', 'log', 'sqrt', 'sum', 'mean',
           'reshape', 'transpose', 'concat', 'getitem', 'matmul', 'softmax', 'log_softmax',
           'backward', 'finite_diff_grad', 'unbroadcast', 'zeros', 'ones']

logger = logging.getLogger(__name__)

Shape = typing.Tuple[int, ...]
Operand = typing.Union['Tensor', float, int, np.ndarray]

ELEMENT_KINDS = {'f32': np.dtype(np.float32), 'f64': np.dtype(np.float64)}


class ShapeError(ValueError):
    """ Operand shapes are not compatible. """


class GraphError(ValueError):
    """ Invalid use of the computation graph. """


class _State(threading.local):
    def __init__(self) -> None:
        super().__init__()
        self.dtype = ELEMENT_KINDS['f32']
        self.grad_enabled = True
        self.graph = None
        self.mac_counter = None


_state = _State()


def default_dtype() -> np.dtype:
    return _state.dtype


@contextlib.contextmanager
def precision(dtype: typing.Union[str, type, np.dtype]) -> typing.Iterator[np.dtype]:
    """ Set element kind of newly created tensors ('float32' or 'float64'). """
    dtype = np.dtype(dtype)
    if dtype not in ELEMENT_KINDS.values():
        raise ValueError("Invalid element kind: '{}' (must be float32 or float64).".format(dtype))
    previous, _state.dtype = _state.dtype, dtype
    try:
        yield dtype
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad() -> typing.Iterator[None]:
    previous, _state.grad_enabled = _state.grad_enabled, False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class MacCounter(object):
    """ Counts multiply-accumulate operations executed by conv and matmul. """
    def __init__(self) -> None:
        self.macs = 0

    def add(self, macs: int) -> None:
        self.macs += int(macs)


@contextlib.contextmanager
def count_macs() -> typing.Iterator[MacCounter]:
    counter = MacCounter()
    previous, _state.mac_counter = _state.mac_counter, counter
    try:
        yield counter
    finally:
        _state.mac_counter = previous


def record_macs(macs: int) -> None:
    if _state.mac_counter is not None:
        _state.mac_counter.add(macs)


class Node(object):
    """ One recorded operation: tag, input tensors and the vector-Jacobian product. """
    __slots__ = ('graph', 'index', 'tag', 'inputs', 'backward')

    def __init__(self, graph: 'Graph', index: int, tag: str, inputs: typing.Sequence['Tensor'],
                 backward: typing.Callable[[np.ndarray], typing.Sequence[typing.Optional[np.ndarray]]]) -> None:
        self.graph = graph
        self.index = index
        self.tag = tag
        self.inputs = tuple(inputs)
        self.backward = backward


class Graph(object):
    """ Append-only list of nodes. Can be used as a context manager to make it active. """
    def __init__(self) -> None:
        self.nodes: typing.List[Node] = []
        self._previous = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, tag: str, inputs: typing.Sequence['Tensor'], backward) -> Node:
        node = Node(self, len(self.nodes), tag, inputs, backward)
        self.nodes.append(node)
        return node

    def clear(self) -> None:
        # Tensors may outlive the graph, invalidate their handles.
        for node in self.nodes:
            node.index = None
        self.nodes = []

    def __enter__(self) -> 'Graph':
        self._previous, _state.graph = _state.graph, self
        return self

    def __exit__(self, *args) -> None:
        self.clear()
        _state.graph, self._previous = self._previous, None


def current_graph() -> typing.Optional[Graph]:
    """ The innermost active graph, None outside every `Graph` context. """
    return _state.graph


class Tensor(object):
    """ Immutable n-dimensional array that may participate in a computation graph.

    Args:
        data: Array-like values. Always copied.
        requires_grad: If true, `backward` computes a gradient for this tensor.
        dtype: Element kind. Defaults to the active precision.
    """
    # Make numpy defer to our reflected operators (np.float32(2) * tensor).
    __array_ufunc__ = None

    def __init__(self, data: typing.Any, requires_grad: bool = False,
                 dtype: typing.Optional[typing.Union[str, np.dtype]] = None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else _state.dtype
        array = np.array(data, dtype=dtype)
        array.setflags(write=False)
        self._data = array
        self.requires_grad = requires_grad
        self.node: typing.Optional[Node] = None
        self.grad: typing.Optional[np.ndarray] = None

    @classmethod
    def wrap(cls, array: np.ndarray, node: typing.Optional[Node] = None) -> 'Tensor':
        """ Wraps an array produced by an operation without copying it. """
        tensor = Tensor.__new__(Tensor)
        array = np.asarray(array)
        array.setflags(write=False)
        tensor._data = array
        tensor.requires_grad = node is not None
        tensor.node = node
        tensor.grad = None
        return tensor

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Shape:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def element_kind(self) -> str:
        return 'f64' if self._data.dtype == ELEMENT_KINDS['f64'] else 'f32'

    def item(self) -> float:
        return self._data.item()

    def __repr__(self) -> str:
        return 'Tensor(shape={}, kind={}, requires_grad={})'.format(self.shape, self.element_kind,
                                                                   self.requires_grad)

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other: Operand) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: Operand) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: Operand) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: Operand) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: Operand) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: Operand) -> 'Tensor':
        return mul(other, self)

    def __truediv__(self, other: Operand) -> 'Tensor':
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> 'Tensor':
        return div(other, self)

    def __neg__(self) -> 'Tensor':
        return neg(self)

    def __pow__(self, exponent: float) -> 'Tensor':
        return power(self, exponent)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, index) -> 'Tensor':
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self) -> 'Tensor':
        return relu(self)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)

    def backward(self) -> typing.Dict['Tensor', np.ndarray]:
        return backward(self)


class Parameter(Tensor):
    """ A trainable leaf tensor. Optimizers replace its values between steps with `assign`. """
    def __init__(self, data: typing.Any, dtype: typing.Optional[typing.Union[str, np.dtype]] = None) -> None:
        super().__init__(data, requires_grad=True, dtype=dtype)

    def assign(self, values: np.ndarray) -> None:
        array = np.array(values, dtype=self.dtype)
        if array.shape != self.shape:
            raise ShapeError("Cannot assign shape {} to parameter of shape {}.".format(array.shape, self.shape))
        array.setflags(write=False)
        self._data = array

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return 'Parameter(shape={}, kind={})'.format(self.shape, self.element_kind)


def zeros(shape: Shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape: Shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    """ Sums `grad` over the axes that were broadcast to reach its shape from `shape`. """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _operands(a: Operand, b: Operand) -> typing.Tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise ValueError("Invalid argument types: '{}' and '{}' (one must be 'Tensor').".format(type(a), type(b)))
    like = a if isinstance(a, Tensor) else b
    if not isinstance(a, Tensor):
        a = Tensor.wrap(np.array(a, dtype=like.dtype))
    if not isinstance(b, Tensor):
        b = Tensor.wrap(np.array(b, dtype=like.dtype))
    _check_kinds(a, b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("Cannot broadcast shapes {} and {}.".format(a.shape, b.shape))
    return a, b


def _check_kinds(*tensors: Tensor) -> None:
    kinds = {t.dtype for t in tensors}
    if len(kinds) > 1:
        raise GraphError("Mixed element kinds in one graph: {}.".format(sorted(str(k) for k in kinds)))


def _result(tag: str, array: np.ndarray, inputs: typing.Sequence[Tensor], backward) -> Tensor:
    node = None
    graph = _state.graph
    if graph is not None and _state.grad_enabled and any(t.requires_grad for t in inputs):
        node = graph.record(tag, inputs, backward)
    return Tensor.wrap(array, node)


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)
    return _result('add', a.data + b.data, (a, b), backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)
    return _result('sub', a.data - b.data, (a, b), backward)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)
    return _result('mul', a.data * b.data, (a, b), backward)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _operands(a, b)

    def backward(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * a.data / (b.data * b.data), b.shape)
    return _result('div', a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result('neg', -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = np.asarray(exponent, dtype=a.dtype)

    def backward(g):
        return g * exponent * np.power(a.data, exponent - 1),
    return _result('power', np.power(a.data, exponent), (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return g * mask,
    return _result('relu', np.where(mask, a.data, np.zeros((), dtype=a.dtype)), (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result('exp', out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result('log', np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result('sqrt', out, (a,), lambda g: (g / (2 * out),))


def _normalize_axes(axis, ndim: int) -> typing.Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, a.shape),
    return _result('sum', np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g / np.asarray(count, dtype=a.dtype), a.shape),
    return _result('mean', np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), (a,), backward)


def reshape(a: Tensor, shape: typing.Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("Cannot reshape {} into {}.".format(a.shape, tuple(shape)))
    return _result('reshape', out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: typing.Optional[typing.Sequence[int]] = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result('transpose', a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: typing.Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _check_kinds(*tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("Cannot concatenate shapes {} along axis {}.".format([t.shape for t in tensors], axis))
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _result('concat', out, tensors, backward)


def split(a: Tensor, sections: int, axis: int = 0) -> typing.List[Tensor]:
    """ Splits `a` into `sections` equal chunks along `axis`. """
    extent = a.shape[axis]
    if extent % sections != 0:
        raise ShapeError("Cannot split extent {} of shape {} into {} equal parts.".format(extent, a.shape, sections))
    step = extent // sections
    chunks = []
    for i in range(sections):
        index = [slice(None)] * a.ndim
        index[axis] = slice(i * step, (i + 1) * step)
        chunks.append(getitem(a, tuple(index)))
    return chunks


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return full,
    return _result('getitem', np.array(a.data[index]), (a,), backward)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """ Batched matrix product over the two trailing axes, leading axes broadcast. """
    _check_kinds(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands, got {} and {}.".format(a.shape, b.shape))
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("Inner dimensions do not agree: {} and {}.".format(a.shape, b.shape))
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("Cannot broadcast batch dimensions of {} and {}.".format(a.shape, b.shape))
    record_macs(int(np.prod(batch)) * a.shape[-2] * a.shape[-1] * b.shape[-1])

    def backward(g):
        grad_a = unbroadcast(np.matmul(g, _swap(b.data)), a.shape) if a.requires_grad else None
        grad_b = unbroadcast(np.matmul(_swap(a.data), g), b.shape) if b.requires_grad else None
        return grad_a, grad_b
    return _result('matmul', np.matmul(a.data, b.data), (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return out * (g - (g * out).sum(axis=axis, keepdims=True)),
    return _result('softmax', out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True),
    return _result('log_softmax', out, (a,), backward)


def backward(loss: Tensor, retain_graph: bool = False) -> typing.Dict[Tensor, np.ndarray]:
    """ Reverse-mode pass from a scalar loss.

    Visits graph nodes in exact reverse append order and accumulates gradients of every leaf that
    requires them into `leaf.grad`. Unless `retain_graph` is set, the graph is released afterwards.

    Returns:
        Mapping from leaf tensors to the gradient computed by this call.
    """
    if loss.size != 1:
        raise GraphError("Loss must be a scalar, got shape {}.".format(loss.shape))
    if loss.node is None or loss.node.index is None:
        raise GraphError("Loss does not belong to an active graph.")
    graph = loss.node.graph
    grads: typing.Dict[int, np.ndarray] = {loss.node.index: np.ones(loss.shape, dtype=loss.dtype)}
    leaves: typing.Dict[int, typing.Tuple[Tensor, np.ndarray]] = {}
    for index in range(loss.node.index, -1, -1):
        grad_out = grads.pop(index, None)
        if grad_out is None:
            continue
        node = graph.nodes[index]
        for tensor, grad in zip(node.inputs, node.backward(grad_out)):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.node is not None:
                if tensor.node.index is None or tensor.node.graph is not graph:
                    continue
                previous = grads.get(tensor.node.index)
                grads[tensor.node.index] = grad if previous is None else previous + grad
            else:
                previous = leaves.get(id(tensor))
                leaves[id(tensor)] = (tensor, grad if previous is None else previous[1] + grad)
    if not retain_graph:
        graph.clear()

    gradients = {}
    for tensor, grad in leaves.values():
        grad = np.array(grad, dtype=tensor.dtype)
        tensor.grad = grad if tensor.grad is None else tensor.grad + grad
        gradients[tensor] = grad
    return gradients


def finite_diff_grad(f: typing.Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4,
                     indices: typing.Optional[typing.Iterable[typing.Tuple[int, ...]]] = None) -> Tensor:
    """ Central-difference gradient of a scalar function.

    Args:
        f: Function of one tensor returning a scalar tensor.
        x: Point to evaluate the gradient at.
        eps: Perturbation.
        indices: Optional subset of element indices to perturb; others stay zero.
    """
    base = np.array(x.data)
    grad = np.zeros(x.shape, dtype=x.dtype)
    with no_grad():
        for index in (indices if indices is not None else np.ndindex(*x.shape)):
            plus, minus = base.copy(), base.copy()
            plus[index] += eps
            minus[index] -= eps
            grad[index] = (f(Tensor(plus, dtype=x.dtype)).item() - f(Tensor(minus, dtype=x.dtype)).item()) / (2 * eps)
    return Tensor(grad, dtype=x.dtype)
