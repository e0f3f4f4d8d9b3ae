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
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ean.modules.eab import esp_strides
from ean.network import STAGES, ModelConfig
from ean.ops import ConvSpec

__ALL__ = ['Summary', 'ModelSummary', 'CostReport', 'count', 'deltas', 'placement_sweep', 'PLACEMENTS']

logger = logging.getLogger(__name__)

# Rows of the EAB / SOI-Tr location study: (label, EAB stages, SOI-Tr stages).
PLACEMENTS = [
    ('A', {1, 2}, {3, 4, 5}),
    ('B', {1, 2, 3}, {4, 5}),
    ('C', {1, 2, 3, 4}, {5}),
    ('D', {1, 2, 3, 4, 5}, set())
]

INSERTIONS = ('eab', 'soitr', 'lmc')


class Summary(object):
    """ Layer summary. """
    def __init__(self, **kwargs) -> None:
        self.name = kwargs.get('name', '')
        self.module = kwargs.get('module', '')
        self.out_shape = kwargs.get('out_shape', None)
        self.num_params = kwargs.get('num_params', 0)
        self.flops = kwargs.get('flops', 0)

    def to_dict(self, **overrides) -> dict:
        dict_repr = {'name': self.name, 'module': self.module, 'out_shape': self.out_shape, 'flops': self.flops,
                     'num_params': self.num_params}
        dict_repr.update(overrides)
        return dict_repr


class ModelSummary(object):
    """
    FLOPs are computed for batch size = 1 by shape inference over a ModelConfig; no weights are created.
    One multiply-accumulate is one FLOP. Only convolutions, linear layers and matrix products are
    counted, which are exactly the operations the executor reports under `ean.tensor.count_macs`.
    Batch normalization, activations, pooling, softmax and element-wise operations are free.

    What if batch size > 1?
       - For batch size B, multiply FLOPs by B.
    """
    SCALERS = {'B': 1, 'k': 1e3, 'M': 1e6, 'G': 1e9}
    FLOPS = {'B': 'FLOPs', 'k': 'kFLOPs', 'M': 'mFLOPs', 'G': 'gFLOPs'}
    PARAMS = {'B': 'params', 'k': 'kParams', 'M': 'mParams', 'G': 'gParams'}

    def debug(self, message: str, *kwargs) -> None:
        if self.verbose:
            print(message.format(*kwargs))

    def add(self, summary: Summary) -> None:
        if not isinstance(summary, Summary):
            raise ValueError("Invalid argument type: '{}' (must be 'Summary').".format(type(summary)))
        self.layers.append(summary)
        self.model.flops += summary.flops
        self.model.num_params += summary.num_params

    def add_conv(self, name: str, module: str, in_channels: int, out_channels: int, spec: ConvSpec,
                 extents: typing.Sequence[int], bias: bool = False, repeat_count: int = 1) -> typing.Tuple[int, ...]:
        """ Weights [C_out, C_in / groups, kT, kH, kW]; returns output extents (T, H, W). """
        if in_channels % spec.groups != 0 or out_channels % spec.groups != 0:
            raise ValueError("Cannot resolve layer '{}': channels {} -> {} are not divisible by {} groups.".format(
                name, in_channels, out_channels, spec.groups))
        if any(n <= 0 for n in extents):
            raise ValueError("Cannot resolve layer '{}': empty input extents {}.".format(name, tuple(extents)))
        out = tuple(spec.output_extents(extents))
        filter_flops = (in_channels // spec.groups) * spec.volume
        flops = repeat_count * out_channels * int(np.prod(out)) * filter_flops
        num_params = out_channels * filter_flops + (out_channels if bias else 0)
        self.debug("Found conv layer: name={}, kind={}, out_shape={}, flops={}.", name, spec.kind,
                   (out_channels,) + out, flops)
        self.add(Summary(name=name, module=module, out_shape=(out_channels,) + out, flops=flops, num_params=num_params))
        return out

    def add_bn(self, name: str, module: str, channels: int, out_shape: typing.Tuple) -> None:
        self.add(Summary(name=name, module=module, out_shape=out_shape, num_params=2 * channels))

    def add_conv_block(self, name: str, module: str, in_channels: int, out_channels: int, spec: ConvSpec,
                       extents: typing.Sequence[int]) -> typing.Tuple[int, ...]:
        out = self.add_conv(name + '/conv', module, in_channels, out_channels, spec, extents)
        self.add_bn(name + '/bn', module, out_channels, (out_channels,) + out)
        return out

    def add_linear(self, name: str, module: str, d_in: int, d_out: int, positions: int = 1, bias: bool = True,
                   out_shape: typing.Optional[typing.Tuple] = None) -> None:
        """ Weights [d_in, d_out] applied at `positions` vectors. """
        flops = positions * d_in * d_out
        self.debug("Found linear layer: name={}, d_in={}, d_out={}, positions={}.", name, d_in, d_out, positions)
        self.add(Summary(name=name, module=module, out_shape=out_shape or (d_out,), flops=flops,
                         num_params=d_in * d_out + (d_out if bias else 0)))

    def add_matmul(self, name: str, module: str, flops: int, out_shape: typing.Tuple) -> None:
        self.add(Summary(name=name, module=module, out_shape=out_shape, flops=flops))

    def add_param(self, name: str, module: str, shape: typing.Tuple) -> None:
        self.add(Summary(name=name, module=module, out_shape=shape, num_params=int(np.prod(shape))))

    def add_stem(self) -> None:
        cfg = self.cfg
        out = self.add_conv_block('conv1', 'backbone', 3, cfg.stem_channels, ConvSpec.spatial(7, stride=2),
                                  (cfg.segments,) + tuple(cfg.input_size))
        out = ConvSpec.spatial(3, stride=2).output_extents(out)
        self.add(Summary(name='pool1', module='backbone', out_shape=(cfg.stem_channels,) + tuple(out)))

    def add_residual_unit(self, name: str, in_channels: int, out_channels: int, stride: int, dim_match: bool,
                          extents: typing.Sequence[int]) -> typing.Tuple[int, ...]:
        width = out_channels // 4
        if not dim_match:
            self.add_conv_block(name + '/branch1', 'backbone', in_channels, out_channels,
                                ConvSpec.spatial(1, stride=stride), extents)
        self.add_conv_block(name + '/branch2a', 'backbone', in_channels, width, ConvSpec.full(1), extents)
        self.add_conv(name + '/temporal', 'backbone', width, width, ConvSpec.temporal(3, groups=width), extents)
        out = self.add_conv_block(name + '/branch2b', 'backbone', width, width, ConvSpec.spatial(3, stride=stride),
                                  extents)
        self.add_conv_block(name + '/branch2c', 'backbone', width, out_channels, ConvSpec.full(1), out)
        return out

    def add_stage(self, stage: int) -> None:
        cfg = self.cfg
        in_channels, _, height, width = cfg.stage_shapes()[stage - 1]
        channels, depth = cfg.stage_channels[stage - 2], cfg.stage_depths[stage - 2]
        extents = self.add_residual_unit('res{}a'.format(stage), in_channels, channels, cfg.stage_strides(stage),
                                         False, (cfg.segments, height, width))
        for j in range(depth - 1):
            extents = self.add_residual_unit('res{}b{}'.format(stage, j + 1), channels, channels, 1, True, extents)

    def add_eab(self, stage: int) -> None:
        eab = self.cfg.eab_config(stage)
        channels, frames, height, width = self.cfg.stage_shapes()[stage]
        module, extents = 'eab@{}'.format(stage), (frames, height, width)
        sites = int(np.prod(extents))
        c_mid, c_grp = eab.bottleneck_channels, eab.group_channels
        self.add_conv_block(module + '/down', module, channels, c_mid,
                            ConvSpec.full(1, groups=eab.projection_groups), extents)
        if eab.fusion == 'dynamic':
            esp = eab.esp_channels
            spec = ConvSpec.full(eab.esp_kernel, stride=esp_strides(extents), groups=esp)
            self.add_conv_block(module + '/esp/reduce', module, channels, esp, ConvSpec.full(1), extents)
            reduced = self.add_conv_block(module + '/esp/conv1', module, esp, esp, spec, extents)
            self.add_conv_block(module + '/esp/conv2', module, esp, esp, spec, reduced)
            self.add_linear(module + '/esp/fc', module, esp, c_mid * c_mid, out_shape=(c_mid, c_mid))
        for j, (k, d) in enumerate(eab.kernels(), 1):
            self.add_conv_block(module + '/spatial{}'.format(j), module, c_grp, c_grp, ConvSpec.spatial(k, dilation=d),
                                extents)
        if eab.fusion == 'dynamic':
            self.add_matmul(module + '/fusion', module, c_mid * c_mid * sites, (c_mid,) + extents)
        for i, (k, d) in enumerate(eab.kernels(), 1):
            self.add_conv(module + '/temporal{}'.format(i), module, c_grp, c_grp, ConvSpec.temporal(k, dilation=d),
                          extents)
        self.add_conv(module + '/up', module, c_mid, channels, ConvSpec.full(1, groups=eab.projection_groups), extents)

    def add_soitr(self, stage: int) -> None:
        soi = self.cfg.soitr_config(stage)
        channels, frames, height, width = self.cfg.stage_shapes()[stage]
        module, extents = 'soitr@{}'.format(stage), (frames, height, width)
        dim, hidden, tokens = soi.bottleneck_channels, soi.saliency_channels, soi.num_tokens
        self.add_conv_block(module + '/down', module, channels, dim, ConvSpec.full(1), extents)
        self.add_conv_block(module + '/saliency/conv1', module, dim, hidden, ConvSpec.full(1), extents)
        self.add_conv_block(module + '/saliency/conv2', module, hidden, hidden, ConvSpec.temporal(3), extents)
        self.add_conv_block(module + '/saliency/conv3', module, hidden, hidden, ConvSpec.spatial(5), extents)
        self.add_conv(module + '/saliency/conv4', module, hidden, soi.num_objects, ConvSpec.full(1), extents, bias=True)
        self.add_param(module + '/embedding', module, (frames, dim, height, width))
        self.add_matmul(module + '/pool', module, frames * soi.num_objects * height * width * dim, (tokens, dim))
        for b in range(1, soi.blocks + 1):
            name = module + '/block{}'.format(b)
            self.add_bn(name + '/norm1', module, dim, (tokens, dim))
            for projection in ('query', 'key', 'value'):
                self.add_linear(name + '/' + projection, module, dim, dim, tokens, out_shape=(tokens, dim))
            self.add_matmul(name + '/scores', module, tokens * tokens * dim, (soi.heads, tokens, tokens))
            self.add_matmul(name + '/mix', module, tokens * tokens * dim, (tokens, dim))
            self.add_linear(name + '/output', module, dim, dim, tokens, out_shape=(tokens, dim))
            if soi.feed_forward:
                self.add_bn(name + '/norm2', module, dim, (tokens, dim))
                self.add_linear(name + '/ff1', module, dim, soi.ff_hidden, tokens, out_shape=(tokens, soi.ff_hidden))
                self.add_linear(name + '/ff2', module, soi.ff_hidden, dim, tokens, out_shape=(tokens, dim))
        self.add_linear(module + '/up', module, dim, channels, out_shape=(channels,))

    def add_lmc(self) -> None:
        lmc = self.cfg.lmc_config()
        height, width = self.cfg.input_size
        rows, cols = height // lmc.patch, width // lmc.patch
        segments = self.cfg.segments
        codes = segments * lmc.steps
        self.add_linear('lmc/encoder', 'lmc', lmc.patch_dim, lmc.latent, codes * rows * cols,
                        out_shape=(codes, lmc.latent, rows, cols))
        spec, extents = ConvSpec.full(3, groups=lmc.groups), (lmc.steps, rows, cols)
        self.add_conv('lmc/reason1', 'lmc', lmc.latent, lmc.latent, spec, extents, repeat_count=segments)
        if lmc.reason_norm:
            self.add_bn('lmc/norm', 'lmc', lmc.latent, (lmc.latent,) + extents)
        self.add_conv('lmc/reason2', 'lmc', lmc.latent, lmc.latent, spec, extents, repeat_count=segments)
        self.add_linear('lmc/decoder', 'lmc', lmc.latent, lmc.decoded_dim, codes * rows * cols,
                        out_shape=(lmc.out_channels, segments, rows * lmc.decoded_patch, cols * lmc.decoded_patch))

    def add_insertions(self, stage: int) -> None:
        if stage in self.cfg.eab_after_stages:
            self.add_eab(stage)
        if stage in self.cfg.soitr_after_stages:
            self.add_soitr(stage)

    def detailed_summary(self, **column_scalers) -> pd.DataFrame:
        """ Per-layer table plus a TOTAL row, e.g. `detailed_summary(flops='G', num_params='M')`. """
        df = pd.DataFrame(
            [layer.to_dict() for layer in self.layers] + [self.model.to_dict(name='TOTAL')],
            columns=['name', 'module', 'out_shape', 'flops', 'num_params']
        )
        for column in column_scalers:
            scaler_unit = column_scalers[column]
            if column not in ('flops', 'num_params') or scaler_unit not in ModelSummary.SCALERS:
                raise ValueError("Invalid scaler: {}='{}' (columns are 'flops' and 'num_params', units are {}).".format(
                    column, scaler_unit, sorted(ModelSummary.SCALERS)))
            df[column] = df[column] / ModelSummary.SCALERS[scaler_unit]
            labels = ModelSummary.FLOPS if column == 'flops' else ModelSummary.PARAMS
            df.rename(columns={column: labels[scaler_unit]}, inplace=True)
        return df

    def module_totals(self) -> pd.DataFrame:
        """ FLOPs and parameters per module ('backbone', 'eab@s', 'soitr@s', 'lmc', 'classifier'). """
        df = self.detailed_summary()
        df = df[df['name'] != 'TOTAL']
        return df.groupby('module', sort=False)[['flops', 'num_params']].sum().reset_index()

    def summary(self, batch_size: int = 1, flops_units: str = 'G', params_units: str = 'M') -> dict:
        flops_units = flops_units or 'B'
        params_units = params_units or 'B'
        return {'name': self.model.name, 'batch': batch_size, 'input_shape': self.input_shape,
                'flops': batch_size * self.model.flops / ModelSummary.SCALERS[flops_units],
                'num_parameters': self.model.num_params / ModelSummary.SCALERS[params_units]}

    def __init__(self, cfg: ModelConfig, verbose: bool = False) -> None:
        if not isinstance(cfg, ModelConfig):
            raise ValueError("Invalid argument type: '{}' (must be 'ModelConfig').".format(type(cfg)))
        self.cfg = cfg
        self.layers = []  # Per-layer statistics
        self.verbose = verbose  # If true, print layers used in computations
        frame = (3,) + tuple(cfg.input_size)
        self.input_shape = (cfg.segments,) + ((cfg.frames_per_segment,) if cfg.lmc_enabled else ()) + frame
        self.model = Summary(name=cfg.backbone, out_shape=(cfg.num_classes,))

        self.add_stem()
        if cfg.lmc_enabled:
            self.add_lmc()
        self.add_insertions(1)
        for stage in STAGES[1:]:
            self.add_stage(stage)
            self.add_insertions(stage)
        self.add_linear('classifier', 'classifier', cfg.stage_channels[-1], cfg.num_classes,
                        out_shape=(cfg.num_classes,))


@dataclass
class CostReport(object):
    """ Totals and per-module costs of one sample; `layers` holds the per-layer table. """
    name: str
    input_shape: typing.Tuple[int, ...]
    flops: int
    num_params: int
    modules: typing.Dict[str, typing.Dict[str, int]]
    layers: typing.Optional[pd.DataFrame] = field(default=None, repr=False, compare=False)

    def to_dict(self, flops_units: str = 'G', params_units: str = 'M') -> dict:
        flops_scale, params_scale = ModelSummary.SCALERS[flops_units], ModelSummary.SCALERS[params_units]
        return {
            'name': self.name,
            'input_shape': list(self.input_shape),
            'flops': self.flops / flops_scale,
            'num_params': self.num_params / params_scale,
            'flops_units': flops_units,
            'params_units': params_units,
            'modules': {module: {'flops': cost['flops'] / flops_scale, 'num_params': cost['num_params'] / params_scale}
                        for module, cost in self.modules.items()},
            'deltas': {kind: {'flops': cost['flops'] / flops_scale, 'num_params': cost['num_params'] / params_scale}
                       for kind, cost in deltas(self).items()}
        }


def count(cfg: ModelConfig, verbose: bool = False) -> CostReport:
    summary = ModelSummary(cfg, verbose)
    modules = collections.OrderedDict(
        (row.module, {'flops': int(row.flops), 'num_params': int(row.num_params)})
        for row in summary.module_totals().itertuples(index=False)
    )
    report = CostReport(cfg.backbone, summary.input_shape, int(summary.model.flops), int(summary.model.num_params),
                        modules, summary.detailed_summary())
    logger.debug("Counted '%s': %d FLOPs, %d parameters over %d layers.", cfg.backbone, report.flops,
                 report.num_params, len(summary.layers))
    return report


def deltas(report: CostReport) -> typing.Dict[str, typing.Dict[str, int]]:
    """ Cost added by every kind of insertion ('eab', 'soitr', 'lmc') and by all of them ('total'). """
    result = {kind: {'flops': 0, 'num_params': 0} for kind in INSERTIONS + ('total',)}
    for module, cost in report.modules.items():
        kind = module.split('@')[0]
        if kind in INSERTIONS:
            for key in ('flops', 'num_params'):
                result[kind][key] += cost[key]
                result['total'][key] += cost[key]
    return result


def placement_sweep(cfg: typing.Optional[ModelConfig] = None) -> pd.DataFrame:
    """ Costs of the four EAB / SOI-Tr placements over the same backbone (default: resnet50-shape, RGB). """
    cfg = cfg or ModelConfig.from_preset('resnet50-shape')
    rows = []
    for label, eab_stages, soitr_stages in PLACEMENTS:
        report = count(cfg.replace(eab_after_stages=set(eab_stages), soitr_after_stages=set(soitr_stages)))
        delta = deltas(report)['total']
        rows.append({'row': label, 'eab_after_stages': sorted(eab_stages), 'soitr_after_stages': sorted(soitr_stages),
                     'flops': report.flops, 'num_params': report.num_params, 'delta_flops': delta['flops'],
                     'delta_params': delta['num_params']})
    return pd.DataFrame(rows, columns=['row', 'eab_after_stages', 'soitr_after_stages', 'flops', 'num_params',
                                       'delta_flops', 'delta_params'])
