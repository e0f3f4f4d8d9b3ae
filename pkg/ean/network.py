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
EAN assembly.

Stage 1 is the stem (7x7 stride-2 convolution and 3x3 stride-2 max pooling, applied per frame).
Stages 2..5 are bottleneck residual stages; every bottleneck unit runs a 3-tap channel-wise temporal
convolution before its 3x3 convolution. EABs and SOI-Tr are appended after the configured stages.
A SOI-Tr after stage 5 produces the global representation; otherwise it is global average pooling.
"""
import copy
import dataclasses
import logging
import math
import typing
from dataclasses import dataclass, field

import numpy as np

from ean.layers import Conv3d, ConvBlock, Linear
from ean.model import Module
from ean.modules.eab import EAB, EabConfig
from ean.modules.lmc import LMC, LmcConfig, fuse_conv1
from ean.modules.soitr import SOITR, SoiTrConfig
from ean.ops import ConvSpec, dropout, global_avg_pool, pool3d
from ean.tensor import ShapeError, Tensor, add, getitem, relu, transpose

__ALL__ = ['ConfigError', 'ModelConfig', 'Backbone', 'ResidualUnit', 'EAN', 'build_model', 'plain_config',
           'STAGES']

logger = logging.getLogger(__name__)

STAGES = (1, 2, 3, 4, 5)


class ConfigError(ValueError):
    """ Invalid model or experiment configuration. """


@dataclass
class ModelConfig(object):
    """ Declarative architecture description shared by the executor and the profiler. """
    backbone: str = 'tiny'
    stem_channels: int = 48
    stage_channels: typing.List[int] = field(default_factory=lambda: [48, 96, 96, 192])
    stage_depths: typing.List[int] = field(default_factory=lambda: [1, 1, 1, 1])
    input_size: typing.Tuple[int, int] = (64, 64)
    segments: int = 4
    frames_per_segment: int = 1
    eab_after_stages: typing.Set[int] = field(default_factory=lambda: {1, 2, 3, 4})
    soitr_after_stages: typing.Set[int] = field(default_factory=lambda: {5})
    lmc_enabled: bool = False
    num_classes: int = 4
    dropout: float = 0.5
    fusion: str = 'dynamic'
    group_count: int = 3
    include_maxpool_branch: bool = True
    inter_relu: bool = True
    soitr_feed_forward: bool = True
    ff_expansion: float = 1.875
    reason_norm: bool = True
    seed: int = 0

    PRESETS: typing.ClassVar[typing.Dict[str, dict]] = {
        'tiny': {
            'backbone': 'tiny', 'stem_channels': 48, 'stage_channels': [48, 96, 96, 192],
            'stage_depths': [1, 1, 1, 1], 'input_size': (64, 64), 'segments': 4, 'num_classes': 4
        },
        'resnet50-shape': {
            'backbone': 'resnet50-shape', 'stem_channels': 64, 'stage_channels': [256, 512, 1024, 2048],
            'stage_depths': [3, 4, 6, 3], 'input_size': (224, 224), 'segments': 8, 'num_classes': 174
        }
    }

    def __post_init__(self) -> None:
        self.input_size = tuple(self.input_size)
        self.stage_channels = list(self.stage_channels)
        self.stage_depths = list(self.stage_depths)
        self.eab_after_stages = set(self.eab_after_stages)
        self.soitr_after_stages = set(self.soitr_after_stages)
        self.validate()

    @classmethod
    def from_preset(cls, name: str, **overrides) -> 'ModelConfig':
        if name not in cls.PRESETS:
            raise ConfigError("Unknown preset: '{}' (must be one of {}).".format(name, sorted(cls.PRESETS)))
        values = copy.deepcopy(cls.PRESETS[name])
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_dict(cls, values: typing.Mapping[str, typing.Any]) -> 'ModelConfig':
        """ Builds a config from a 'model' config-file section; 'preset' selects base values. """
        values = dict(values)
        preset = values.pop('preset', None)
        if 'soitr_after_stage' in values:
            stage = values.pop('soitr_after_stage')
            values['soitr_after_stages'] = [] if stage is None else [stage]
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError("Unknown model config keys: {} (allowed: {}).".format(unknown, sorted(known)))
        try:
            return cls.from_preset(preset, **values) if preset is not None else cls(**values)
        except TypeError as err:
            raise ConfigError("Invalid model config: {}".format(err)) from err

    def to_dict(self) -> dict:
        values = dataclasses.asdict(self)
        values['input_size'] = list(self.input_size)
        values['eab_after_stages'] = sorted(self.eab_after_stages)
        values['soitr_after_stages'] = sorted(self.soitr_after_stages)
        return values

    def replace(self, **changes) -> 'ModelConfig':
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ConfigError("Expecting 4 residual stages, got channels={} and depths={}.".format(
                self.stage_channels, self.stage_depths))
        if any(c % 4 != 0 for c in self.stage_channels) or any(d <= 0 for d in self.stage_depths):
            raise ConfigError("Stage channels must be multiples of 4 and depths positive: {}, {}.".format(
                self.stage_channels, self.stage_depths))
        for what, stages in (('EAB', self.eab_after_stages), ('SOI-Tr', self.soitr_after_stages)):
            illegal = sorted(s for s in stages if s not in STAGES)
            if illegal:
                raise ConfigError("Invalid {} placement {} (legal stages are {}).".format(
                    what, illegal, ', '.join(str(s) for s in STAGES)))
        shared = self.eab_after_stages & self.soitr_after_stages
        if shared:
            raise ConfigError("EAB and SOI-Tr placements overlap at stages {} (legal stages are {}).".format(
                sorted(shared), ', '.join(str(s) for s in STAGES)))
        if self.lmc_enabled != (self.frames_per_segment == 5):
            raise ConfigError("frames_per_segment must be 5 iff LMC is enabled (lmc_enabled={}, "
                              "frames_per_segment={}).".format(self.lmc_enabled, self.frames_per_segment))
        if self.lmc_enabled and any(n % 32 != 0 for n in self.input_size):
            raise ConfigError("LMC requires input extents that are multiples of 32, got {}.".format(self.input_size))
        if self.segments <= 0 or self.num_classes <= 0:
            raise ConfigError("Segments and classes must be positive, got {} and {}.".format(
                self.segments, self.num_classes))
        if not 0 <= self.dropout < 1:
            raise ConfigError("Dropout rate must be in [0, 1), got {}.".format(self.dropout))
        try:
            for stage in sorted(self.eab_after_stages):
                self.eab_config(stage)
            for stage in sorted(self.soitr_after_stages):
                self.soitr_config(stage)
            if self.lmc_enabled:
                self.lmc_config()
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def stage_shapes(self) -> typing.Dict[int, typing.Tuple[int, int, int, int]]:
        """ Per-sample (C, T, H, W) after each stage. """
        height, width = self.input_size
        # Stem convolution and max pooling, both stride 2.
        height, width = math.ceil(math.ceil(height / 2) / 2), math.ceil(math.ceil(width / 2) / 2)
        shapes = {1: (self.stem_channels, self.segments, height, width)}
        for stage, channels in enumerate(self.stage_channels, 2):
            if stage > 2:
                height, width = math.ceil(height / 2), math.ceil(width / 2)
            shapes[stage] = (channels, self.segments, height, width)
        return shapes

    def eab_config(self, stage: int) -> EabConfig:
        return EabConfig(self.stage_shapes()[stage][0], group_count=self.group_count,
                         include_maxpool_branch=self.include_maxpool_branch, inter_relu=self.inter_relu,
                         fusion=self.fusion)

    def soitr_config(self, stage: int) -> SoiTrConfig:
        channels, frames, height, width = self.stage_shapes()[stage]
        return SoiTrConfig(channels, frames, height, width, feed_forward=self.soitr_feed_forward,
                           ff_expansion=self.ff_expansion)

    def lmc_config(self) -> LmcConfig:
        return LmcConfig(out_channels=self.stem_channels, reason_norm=self.reason_norm)

    def stage_strides(self, stage: int) -> int:
        return 1 if stage == 2 else 2


def plain_config(cfg: ModelConfig) -> ModelConfig:
    """ The same backbone without any insertion (RGB input). """
    return cfg.replace(eab_after_stages=set(), soitr_after_stages=set(), lmc_enabled=False, frames_per_segment=1)


class ResidualUnit(Module):
    """ Bottleneck unit: 1x1 -> temporal 3x1x1 (channel-wise) -> 3x3 (strided) -> 1x1, plus shortcut. """
    def __init__(self, name: str, in_channels: int, out_channels: int, stride: int, dim_match: bool,
                 rng: np.random.Generator) -> None:
        super().__init__(name)
        width = out_channels // 4
        self.branch1 = None if dim_match else ConvBlock(name + '/branch1', in_channels, out_channels,
                                                        ConvSpec.spatial(1, stride=stride), rng, activation=False)
        self.branch2a = ConvBlock(name + '/branch2a', in_channels, width, ConvSpec.full(1), rng)
        self.temporal = Conv3d(name + '/temporal', width, width, ConvSpec.temporal(3, groups=width), rng,
                               init='identity')
        self.branch2b = ConvBlock(name + '/branch2b', width, width, ConvSpec.spatial(3, stride=stride), rng)
        self.branch2c = ConvBlock(name + '/branch2c', width, out_channels, ConvSpec.full(1), rng, activation=False)

    def forward(self, x: Tensor) -> Tensor:
        shortcut = x if self.branch1 is None else self.branch1(x)
        h = self.branch2c(self.branch2b(self.temporal(self.branch2a(x))))
        return relu(add(shortcut, h))


class Backbone(Module):
    def __init__(self, name: str, cfg: ModelConfig, rng: np.random.Generator) -> None:
        super().__init__(name)
        self.stem = ConvBlock('conv1', 3, cfg.stem_channels, ConvSpec.spatial(7, stride=2), rng)
        self.stages = []
        in_channels = cfg.stem_channels
        for stage, (channels, depth) in enumerate(zip(cfg.stage_channels, cfg.stage_depths), 2):
            units = [ResidualUnit('res{}a'.format(stage), in_channels, channels, cfg.stage_strides(stage), False, rng)]
            for j in range(depth - 1):
                units.append(ResidualUnit('res{}b{}'.format(stage, j + 1), channels, channels, 1, True, rng))
            self.stages.append(units)
            in_channels = channels

    def children(self):
        yield 'stem', self.stem
        for stage, units in enumerate(self.stages, 2):
            for j, unit in enumerate(units):
                yield 'stage{}.{}'.format(stage, j), unit

    def run_stem(self, x: Tensor) -> Tensor:
        return pool3d(self.stem(x), 'max', (1, 3, 3), (1, 2, 2))

    def run_stage(self, stage: int, x: Tensor) -> Tensor:
        for unit in self.stages[stage - 2]:
            x = unit(x)
        return x


class EAN(Module):
    """ EAN_RGB (sparse clips [B, N, 3, H, W]) or EAN_RGB+LMC (dense clips [B, N, 5, 3, H, W]).

    Backbone and classifier weights come from the seed stream [seed, 0], insertions from [seed, 1],
    so a model and its `plain_config` counterpart share backbone weights.
    """
    def __init__(self, cfg: ModelConfig) -> None:
        super().__init__('EAN')
        self.cfg = cfg
        backbone_rng = np.random.default_rng([cfg.seed, 0])
        insertion_rng = np.random.default_rng([cfg.seed, 1])
        self.dropout_rng = np.random.default_rng([cfg.seed, 2])

        self.backbone = Backbone('backbone', cfg, backbone_rng)
        self.classifier = Linear('classifier', cfg.stage_channels[-1], cfg.num_classes, backbone_rng)
        self.lmc = LMC('lmc', cfg.lmc_config(), insertion_rng) if cfg.lmc_enabled else None
        self.eabs = {str(s): EAB('eab@{}'.format(s), cfg.eab_config(s), insertion_rng)
                     for s in sorted(cfg.eab_after_stages)}
        self.soitrs = {str(s): SOITR('soitr@{}'.format(s), cfg.soitr_config(s), insertion_rng)
                       for s in sorted(cfg.soitr_after_stages)}
        logger.debug("Built %s with %d parameters (EAB at %s, SOI-Tr at %s, LMC=%s).", self.name, self.num_params(),
                     sorted(cfg.eab_after_stages), sorted(cfg.soitr_after_stages), cfg.lmc_enabled)

    def _check_input(self, clips: Tensor) -> None:
        cfg = self.cfg
        frame = (3,) + tuple(cfg.input_size)
        expected = (cfg.segments,) + ((cfg.frames_per_segment,) if cfg.lmc_enabled else ()) + frame
        if clips.shape[1:] != expected:
            raise ShapeError("Expecting clips of shape [B, {}], got {}.".format(', '.join(map(str, expected)),
                                                                                clips.shape))

    def _insertions(self, stage: int, x: Tensor, trace: typing.Optional[dict]) -> Tensor:
        key = str(stage)
        if key in self.eabs:
            x = self.eabs[key](x, trace)
        if key in self.soitrs and stage != 5:
            x = self.soitrs[key](x, trace)
        return x

    def features(self, clips: Tensor, trace: typing.Optional[dict] = None) -> Tensor:
        """ Global video representation X' [B, C5]. """
        self._check_input(clips)
        frames = getitem(clips, (slice(None), slice(None), 0)) if self.cfg.lmc_enabled else clips
        x = self.backbone.run_stem(transpose(frames, (0, 2, 1, 3, 4)))
        if self.lmc is not None:
            x = fuse_conv1(self.lmc(clips), x)
        x = self._insertions(1, x, trace)
        for stage in STAGES[1:]:
            x = self._insertions(stage, self.backbone.run_stage(stage, x), trace)
        if '5' in self.soitrs:
            return self.soitrs['5'].global_features(x, trace)
        return global_avg_pool(x)

    def forward(self, clips: Tensor, trace: typing.Optional[dict] = None) -> Tensor:
        features = dropout(self.features(clips, trace), self.cfg.dropout, self.dropout_rng, self.training)
        return self.classifier(features)


def build_model(cfg: ModelConfig) -> EAN:
    return EAN(cfg)
