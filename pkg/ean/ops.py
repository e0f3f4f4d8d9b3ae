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
Neural network primitives over video tensors of shape [Batch, Channels, Time, Height, Width].

Convolution and pooling unroll receptive fields into columns (im2col) and reduce them with a
matrix multiply. Each of them has a loop oracle (`conv_oracle`, `pool3d_oracle`,
`attention_oracle`) written directly from the definition, used by tests.
"""
import itertools
import math
import typing
from dataclasses import dataclass

import numpy as np

from ean.tensor import (Tensor, Parameter, ShapeError, _result, _check_kinds, record_macs, matmul, reshape,
                        transpose, softmax, log_softmax, mul, add)

__ALL__ = ['ConvSpec', 'conv', 'conv_oracle', 'pool3d', 'pool3d_oracle', 'global_avg_pool', 'BatchNormState',
           'batchnorm', 'linear', 'AttentionParams', 'multihead_self_attention', 'attention_oracle', 'dropout',
           'cross_entropy', 'same_pads']

Triple = typing.Tuple[int, int, int]
Pads = typing.Tuple[typing.Tuple[int, int], typing.Tuple[int, int], typing.Tuple[int, int]]

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _triple(value: typing.Union[int, typing.Sequence[int]]) -> Triple:
    if isinstance(value, int):
        return value, value, value
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ValueError("Invalid per-axis value: '{}' (must have 3 entries for T, H, W).".format(value))
    return value


def same_pads(extents: typing.Sequence[int], kernel: Triple, stride: Triple, dilation: Triple) -> Pads:
    """ Zero padding for which output extent = ceil(input extent / stride). Extra padding goes after. """
    pads = []
    for n, k, s, d in zip(extents, kernel, stride, dilation):
        out = -(-n // s)
        total = max((out - 1) * s + d * (k - 1) + 1 - n, 0)
        pads.append((total // 2, total - total // 2))
    return tuple(pads)


def _output_extents(extents: typing.Sequence[int], kernel: Triple, stride: Triple, dilation: Triple,
                    pads: Pads) -> Triple:
    out = []
    for n, k, s, d, (before, after) in zip(extents, kernel, stride, dilation, pads):
        extent = (n + before + after - d * (k - 1) - 1) // s + 1
        if extent <= 0:
            raise ShapeError("Kernel {} does not fit input extents {}.".format(kernel, tuple(extents)))
        out.append(extent)
    return tuple(out)


@dataclass(frozen=True)
class ConvSpec(object):
    """ Convolution geometry over (T, H, W).

    `kind` constrains which axes the kernel may span: 'spatial-2d' convolves H and W independently per
    time step, 'temporal-1d' convolves T independently per spatial site, 'full-3d' spans all three.
    """
    kind: str
    kernel: Triple
    stride: Triple = (1, 1, 1)
    dilation: Triple = (1, 1, 1)
    groups: int = 1
    padding: typing.Union[str, Pads] = 'same'

    KINDS = ('spatial-2d', 'temporal-1d', 'full-3d')

    def __post_init__(self) -> None:
        if self.kind not in ConvSpec.KINDS:
            raise ValueError("Invalid convolution kind: '{}' (must be one of {}).".format(self.kind, ConvSpec.KINDS))
        for name in ('kernel', 'stride', 'dilation'):
            object.__setattr__(self, name, _triple(getattr(self, name)))
        if any(k <= 0 or k % 2 == 0 for k in self.kernel):
            raise ValueError("Kernel extents must be positive and odd, got {}.".format(self.kernel))
        if any(s <= 0 for s in self.stride) or any(d <= 0 for d in self.dilation):
            raise ValueError("Stride and dilation must be positive, got {} and {}.".format(self.stride, self.dilation))
        if self.groups <= 0:
            raise ValueError("Number of groups must be positive, got {}.".format(self.groups))
        if self.kind == 'spatial-2d' and (self.kernel[0] != 1 or self.stride[0] != 1):
            raise ValueError("A spatial-2d convolution cannot span time (kernel={}, stride={}).".format(
                self.kernel, self.stride))
        if self.kind == 'temporal-1d' and (self.kernel[1:] != (1, 1) or self.stride[1:] != (1, 1)):
            raise ValueError("A temporal-1d convolution cannot span space (kernel={}, stride={}).".format(
                self.kernel, self.stride))

    @staticmethod
    def spatial(kernel: typing.Union[int, typing.Tuple[int, int]], stride: int = 1, dilation: int = 1,
                groups: int = 1) -> 'ConvSpec':
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        return ConvSpec('spatial-2d', (1, kh, kw), (1, stride, stride), (1, dilation, dilation), groups)

    @staticmethod
    def temporal(kernel: int, stride: int = 1, dilation: int = 1, groups: int = 1) -> 'ConvSpec':
        return ConvSpec('temporal-1d', (kernel, 1, 1), (stride, 1, 1), (dilation, 1, 1), groups)

    @staticmethod
    def full(kernel: typing.Union[int, Triple], stride: typing.Union[int, Triple] = 1,
             dilation: typing.Union[int, Triple] = 1, groups: int = 1) -> 'ConvSpec':
        return ConvSpec('full-3d', _triple(kernel), _triple(stride), _triple(dilation), groups)

    @property
    def volume(self) -> int:
        return self.kernel[0] * self.kernel[1] * self.kernel[2]

    @property
    def receptive_field(self) -> Triple:
        return tuple(k + (k - 1) * (d - 1) for k, d in zip(self.kernel, self.dilation))

    def pads(self, extents: typing.Sequence[int]) -> Pads:
        if self.padding == 'same':
            return same_pads(extents, self.kernel, self.stride, self.dilation)
        return tuple(tuple(p) for p in self.padding)

    def output_extents(self, extents: typing.Sequence[int]) -> Triple:
        return _output_extents(extents, self.kernel, self.stride, self.dilation, self.pads(extents))


def _check_conv(x: Tensor, w: Tensor, spec: ConvSpec) -> None:
    if x.ndim != 5:
        raise ShapeError("Expecting a video tensor [B, C, T, H, W], got shape {}.".format(x.shape))
    if w.ndim != 5:
        raise ShapeError("Expecting weights [C_out, C_in/groups, kT, kH, kW], got shape {}.".format(w.shape))
    in_channels, out_channels, groups = x.shape[1], w.shape[0], spec.groups
    if in_channels % groups != 0 or out_channels % groups != 0:
        raise ValueError("Channel/group mismatch: in_channels={}, out_channels={}, groups={}.".format(
            in_channels, out_channels, groups))
    if w.shape[1] != in_channels // groups:
        raise ValueError("Channel/group mismatch: weights expect {} input channels per group, input provides "
                         "{} ({} channels, {} groups).".format(w.shape[1], in_channels // groups, in_channels, groups))
    if w.shape[2:] != spec.kernel:
        raise ShapeError("Weight kernel {} does not match spec kernel {}.".format(w.shape[2:], spec.kernel))


def _windows(kernel: Triple, stride: Triple, dilation: Triple,
             out: Triple) -> typing.Iterator[typing.Tuple[slice, slice, slice]]:
    """ For every kernel tap (in T, H, W order), the slice of the padded input it reads. """
    for taps in itertools.product(*(range(k) for k in kernel)):
        yield tuple(slice(tap * d, tap * d + (n - 1) * s + 1, s) for tap, d, n, s in zip(taps, dilation, out, stride))


def _im2col(padded: np.ndarray, kernel: Triple, stride: Triple, dilation: Triple, out: Triple) -> np.ndarray:
    """ [B, C, T', H', W'] -> [B, C, K, To, Ho, Wo] where K is the kernel volume. """
    return np.stack([padded[(Ellipsis,) + window] for window in _windows(kernel, stride, dilation, out)], axis=2)


def _col2im(cols: np.ndarray, padded_shape: typing.Tuple[int, ...], kernel: Triple, stride: Triple,
            dilation: Triple, out: Triple) -> np.ndarray:
    padded = np.zeros(padded_shape, dtype=cols.dtype)
    for k, window in enumerate(_windows(kernel, stride, dilation, out)):
        padded[(Ellipsis,) + window] += cols[:, :, k]
    return padded


def _crop(padded: np.ndarray, pads: Pads) -> np.ndarray:
    index = tuple(slice(before, padded.shape[2 + i] - after) for i, (before, after) in enumerate(pads))
    return padded[(Ellipsis,) + index]


def conv(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """ Grouped, dilated, strided convolution with zero padding.

    Args:
        x: Input [B, C_in, T, H, W].
        w: Weights [C_out, C_in / groups, kT, kH, kW].
        spec: Geometry.

    Returns:
        Output [B, C_out, To, Ho, Wo].
    """
    _check_kinds(x, w)
    _check_conv(x, w, spec)
    batch, in_channels = x.shape[:2]
    out_channels, groups = w.shape[0], spec.groups
    pads = spec.pads(x.shape[2:])
    out = spec.output_extents(x.shape[2:])
    length = out[0] * out[1] * out[2]
    depth = (in_channels // groups) * spec.volume

    padded = np.pad(x.data, ((0, 0), (0, 0)) + pads)
    cols = _im2col(padded, spec.kernel, spec.stride, spec.dilation, out).reshape(batch, groups, depth, length)
    weights = w.data.reshape(groups, out_channels // groups, depth)
    record_macs(batch * out_channels * length * depth)
    y = np.matmul(weights, cols).reshape((batch, out_channels) + out)

    def backward(g):
        g = g.reshape(batch, groups, out_channels // groups, length)
        grad_w = np.matmul(g, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        grad_x = None
        if x.requires_grad:
            grad_cols = np.matmul(np.swapaxes(weights, -1, -2), g)
            grad_cols = grad_cols.reshape((batch, in_channels, spec.volume) + out)
            grad_x = _crop(_col2im(grad_cols, padded.shape, spec.kernel, spec.stride, spec.dilation, out), pads)
        return grad_x, grad_w
    return _result('conv', y, (x, w), backward)


def conv_oracle(x: Tensor, w: Tensor, spec: ConvSpec) -> Tensor:
    """ Direct nested-loop definition of `conv`. Slow; for small tensors only. """
    _check_conv(x, w, spec)
    xs, ws = x.data, w.data
    batch, in_channels, *extents = xs.shape
    out_channels, group_in = ws.shape[:2]
    group_out = out_channels // spec.groups
    pads = spec.pads(extents)
    out = spec.output_extents(extents)
    y = np.zeros((batch, out_channels) + out, dtype=xs.dtype)
    for b, co, ot, oh, ow in itertools.product(range(batch), range(out_channels), *(range(n) for n in out)):
        group = co // group_out
        acc = 0.0
        for ci in range(group_in):
            c = group * group_in + ci
            for kt, kh, kw in itertools.product(*(range(k) for k in spec.kernel)):
                t = ot * spec.stride[0] + kt * spec.dilation[0] - pads[0][0]
                h = oh * spec.stride[1] + kh * spec.dilation[1] - pads[1][0]
                v = ow * spec.stride[2] + kw * spec.dilation[2] - pads[2][0]
                if 0 <= t < extents[0] and 0 <= h < extents[1] and 0 <= v < extents[2]:
                    acc += xs[b, c, t, h, v] * ws[co, ci, kt, kh, kw]
        y[b, co, ot, oh, ow] = acc
    return Tensor(y, dtype=xs.dtype)


def pool3d(x: Tensor, kind: str, kernel: typing.Union[int, Triple], stride: typing.Union[int, Triple] = 1,
           padding: typing.Union[str, Pads] = 'same') -> Tensor:
    """ Max or average pooling over (T, H, W).

    Max pooling pads with -inf; average pooling divides by the number of valid (non-pad) positions.
    """
    if kind not in ('max', 'avg'):
        raise ValueError("Invalid pooling kind: '{}' (must be 'max' or 'avg').".format(kind))
    kernel, stride, dilation = _triple(kernel), _triple(stride), (1, 1, 1)
    extents = x.shape[2:]
    pads = same_pads(extents, kernel, stride, dilation) if padding == 'same' else tuple(tuple(p) for p in padding)
    out = _output_extents(extents, kernel, stride, dilation, pads)
    fill = -np.inf if kind == 'max' else 0
    padded = np.pad(x.data, ((0, 0), (0, 0)) + pads, constant_values=fill)
    cols = _im2col(padded, kernel, stride, dilation, out)

    if kind == 'max':
        argmax = np.expand_dims(cols.argmax(axis=2), 2)
        y = np.take_along_axis(cols, argmax, axis=2)[:, :, 0]

        def backward(g):
            grad_cols = np.zeros(cols.shape, dtype=cols.dtype)
            np.put_along_axis(grad_cols, argmax, np.expand_dims(g, 2), axis=2)
            return _crop(_col2im(grad_cols, padded.shape, kernel, stride, dilation, out), pads),
        return _result('max_pool3d', y, (x,), backward)

    valid = np.pad(np.ones((1, 1) + tuple(extents), dtype=x.dtype), ((0, 0), (0, 0)) + pads)
    counts = _im2col(valid, kernel, stride, dilation, out).sum(axis=2)
    y = cols.sum(axis=2) / counts

    def backward(g):
        grad_cols = np.broadcast_to(np.expand_dims(g / counts, 2), cols.shape)
        return _crop(_col2im(grad_cols, padded.shape, kernel, stride, dilation, out), pads),
    return _result('avg_pool3d', y, (x,), backward)


def pool3d_oracle(x: Tensor, kind: str, kernel: typing.Union[int, Triple],
                  stride: typing.Union[int, Triple] = 1) -> Tensor:
    kernel, stride = _triple(kernel), _triple(stride)
    xs = x.data
    extents = xs.shape[2:]
    pads = same_pads(extents, kernel, stride, (1, 1, 1))
    out = _output_extents(extents, kernel, stride, (1, 1, 1), pads)
    y = np.zeros(xs.shape[:2] + out, dtype=xs.dtype)
    for b, c, ot, oh, ow in itertools.product(range(xs.shape[0]), range(xs.shape[1]), *(range(n) for n in out)):
        values = []
        for kt, kh, kw in itertools.product(*(range(k) for k in kernel)):
            t = ot * stride[0] + kt - pads[0][0]
            h = oh * stride[1] + kh - pads[1][0]
            v = ow * stride[2] + kw - pads[2][0]
            if 0 <= t < extents[0] and 0 <= h < extents[1] and 0 <= v < extents[2]:
                values.append(xs[b, c, t, h, v])
        y[b, c, ot, oh, ow] = max(values) if kind == 'max' else math.fsum(values) / len(values)
    return Tensor(y, dtype=xs.dtype)


def global_avg_pool(x: Tensor, axes: typing.Sequence[int] = (2, 3, 4)) -> Tensor:
    """ Mean over the named non-channel axes. """
    axes = tuple(a % x.ndim for a in axes)
    if 1 in axes or 0 in axes:
        raise ValueError("Global pooling axes {} must exclude batch and channel axes.".format(axes))
    return x.mean(axis=axes)


class BatchNormState(object):
    """ Per-channel affine parameters and running statistics. """
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> None:
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=self.gamma.dtype)
        self.running_var = np.ones(channels, dtype=self.gamma.dtype)


def batchnorm(x: Tensor, state: BatchNormState, training: bool, axis: int = 1) -> Tensor:
    """ Batch normalization over every axis except `axis`.

    In training mode normalizes with biased batch statistics and updates the running statistics
    (unbiased variance) with `state.momentum`. In eval mode uses running statistics and has no side
    effects.
    """
    axis = axis % x.ndim
    if x.shape[axis] != state.channels:
        raise ValueError("Channel mismatch: input has {} channels on axis {}, state has {}.".format(
            x.shape[axis], axis, state.channels))
    _check_kinds(x, state.gamma, state.beta)
    axes = tuple(i for i in range(x.ndim) if i != axis)
    shape = [1] * x.ndim
    shape[axis] = state.channels
    gamma, beta = state.gamma.data.reshape(shape), state.beta.data.reshape(shape)

    if training:
        mean = x.data.mean(axis=axes, keepdims=True)
        var = np.square(x.data - mean).mean(axis=axes, keepdims=True)
        count = x.size // state.channels
        momentum = state.momentum
        state.running_mean = ((1 - momentum) * state.running_mean + momentum * mean.reshape(-1)).astype(x.dtype)
        unbiased = var.reshape(-1) * count / max(count - 1, 1)
        state.running_var = ((1 - momentum) * state.running_var + momentum * unbiased).astype(x.dtype)
    else:
        mean, var = state.running_mean.reshape(shape), state.running_var.reshape(shape)
    inv_std = 1.0 / np.sqrt(var + np.asarray(state.eps, dtype=x.dtype))
    normalized = (x.data - mean) * inv_std

    def backward(g):
        grad_gamma = (g * normalized).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        grad_norm = g * gamma
        if training:
            grad_x = inv_std * (grad_norm - grad_norm.mean(axis=axes, keepdims=True) -
                                normalized * (grad_norm * normalized).mean(axis=axes, keepdims=True))
        else:
            grad_x = grad_norm * inv_std
        return grad_x, grad_gamma, grad_beta
    return _result('batchnorm', gamma * normalized + beta, (x, state.gamma, state.beta), backward)


def linear(x: Tensor, w: Tensor, b: typing.Optional[Tensor] = None) -> Tensor:
    """ Affine map on the trailing axis. Weights are [d_in, d_out]. """
    if x.shape[-1] != w.shape[0]:
        raise ShapeError("Linear input dimension {} does not match weights {}.".format(x.shape[-1], w.shape))
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), w), (-1,))
    else:
        y = matmul(x, w)
    return y if b is None else add(y, b)


@dataclass
class AttentionParams(object):
    """ Query/key/value/output projections, weights [d, d], optional biases [d]. """
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: typing.Optional[Tensor] = None
    b_k: typing.Optional[Tensor] = None
    b_v: typing.Optional[Tensor] = None
    b_o: typing.Optional[Tensor] = None


def multihead_self_attention(tokens: Tensor, params: AttentionParams, heads: int,
                             return_weights: bool = False) -> typing.Union[Tensor, typing.Tuple[Tensor, Tensor]]:
    """ Scaled dot-product self-attention over [B, L, d] tokens.

    Scores are scaled by 1/sqrt(d / heads). No positional terms, so the operator is equivariant to
    token permutations.
    """
    batch, length, dim = tokens.shape
    if dim % heads != 0:
        raise ValueError("Token dimension {} is not divisible by number of heads {}.".format(dim, heads))
    head_dim = dim // heads

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, length, heads, head_dim)), (0, 2, 1, 3))

    q = split_heads(linear(tokens, params.w_q, params.b_q))
    k = split_heads(linear(tokens, params.w_k, params.b_k))
    v = split_heads(linear(tokens, params.w_v, params.b_v))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    weights = softmax(scores, axis=-1)
    mixed = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (batch, length, dim))
    out = linear(mixed, params.w_o, params.b_o)
    return (out, weights) if return_weights else out


def attention_oracle(tokens: Tensor, params: AttentionParams, heads: int) -> Tensor:
    """ Explicit score/softmax/mix loops for `multihead_self_attention`. """
    def project(w, b, x):
        y = np.array([[sum(x[i, k] * w[k, j] for k in range(w.shape[0])) for j in range(w.shape[1])]
                      for i in range(x.shape[0])])
        return y if b is None else y + b.data

    xs = tokens.data
    batch, length, dim = xs.shape
    head_dim = dim // heads
    out = np.zeros_like(xs)
    for b in range(batch):
        q = project(params.w_q.data, params.b_q, xs[b])
        k = project(params.w_k.data, params.b_k, xs[b])
        v = project(params.w_v.data, params.b_v, xs[b])
        mixed = np.zeros((length, dim))
        for h in range(heads):
            cols = slice(h * head_dim, (h + 1) * head_dim)
            for i in range(length):
                scores = [sum(q[i, cols][c] * k[j, cols][c] for c in range(head_dim)) / math.sqrt(head_dim)
                          for j in range(length)]
                top = max(scores)
                e = [math.exp(s - top) for s in scores]
                total = math.fsum(e)
                for j in range(length):
                    mixed[i, cols] += (e[j] / total) * v[j, cols]
        out[b] = project(params.w_o.data, params.b_o, mixed)
    return Tensor(out, dtype=xs.dtype)


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """ Inverted dropout: identity in eval mode. """
    if not training or rate == 0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / np.asarray(1.0 - rate, dtype=x.dtype)
    return mul(x, Tensor.wrap(keep))


def cross_entropy(logits: Tensor, labels: typing.Sequence[int]) -> Tensor:
    """ Mean negative log-likelihood of integer `labels` under softmax(`logits`), logits [B, K]. """
    labels = np.asarray(labels, dtype=np.int64)
    batch, num_classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError("Expecting {} labels, got shape {}.".format(batch, labels.shape))
    invalid = labels[(labels < 0) | (labels >= num_classes)]
    if invalid.size > 0:
        raise ValueError("Label {} out of range [0, {}).".format(int(invalid[0]), num_classes))
    one_hot = np.zeros((batch, num_classes), dtype=logits.dtype)
    one_hot[np.arange(batch), labels] = -1.0 / batch
    return mul(log_softmax(logits, axis=-1), Tensor.wrap(one_hot)).sum()
