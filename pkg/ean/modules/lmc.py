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
Latent motion code.

A dense segment of 5 frames gives 4 RGB differences. Every difference is cut into non-overlapping
patch x patch tiles, each tile is mapped to a `latent`-dim code by a shared linear layer, the codes of
the 4 steps are refined by two grouped 3D convolutions over (step, grid row, grid column), and each
code is decoded to a (C / 4) x q x q feature patch with q = patch / stem stride. Decoded steps are
stacked on channels and added to the stem feature of the segment's first frame.

Full scale: (5, 3, 224, 224) -> (4, 3, 224, 224) -> (4, 128, 7, 7) -> (4, 128, 7, 7) -> (64, 56, 56).
"""
import logging
from dataclasses import dataclass

import numpy as np

from ean.layers import BatchNorm, Conv3d, Linear
from ean.model import Module
from ean.ops import ConvSpec
from ean.tensor import ShapeError, Tensor, add, getitem, relu, reshape, transpose

__ALL__ = ['LmcConfig', 'LMC', 'rgb_diff', 'fuse_conv1']

logger = logging.getLogger(__name__)


@dataclass
class LmcConfig(object):
    out_channels: int = 64
    stem_stride: int = 4
    patch: int = 32
    latent: int = 128
    groups: int = 16
    frames: int = 5
    reason_norm: bool = True

    def __post_init__(self) -> None:
        if self.latent % self.groups != 0:
            raise ValueError("Latent size {} is not divisible by {} groups.".format(self.latent, self.groups))
        if self.out_channels % self.steps != 0:
            raise ValueError("Stem channels {} are not divisible by {} difference steps.".format(
                self.out_channels, self.steps))
        if self.patch % self.stem_stride != 0:
            raise ValueError("Patch size {} is not divisible by stem stride {}.".format(self.patch, self.stem_stride))

    @property
    def steps(self) -> int:
        return self.frames - 1

    @property
    def step_channels(self) -> int:
        return self.out_channels // self.steps

    @property
    def decoded_patch(self) -> int:
        return self.patch // self.stem_stride

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def decoded_dim(self) -> int:
        return self.step_channels * self.decoded_patch ** 2


def rgb_diff(frames: Tensor, axis: int = -4) -> Tensor:
    """ Differences of consecutive frames along the frame axis ([..., F, 3, H, W] -> [..., F - 1, 3, H, W]). """
    axis = axis % frames.ndim
    later = [slice(None)] * frames.ndim
    earlier = [slice(None)] * frames.ndim
    later[axis], earlier[axis] = slice(1, None), slice(None, -1)
    return getitem(frames, tuple(later)) - getitem(frames, tuple(earlier))


def fuse_conv1(motion: Tensor, conv1_features: Tensor) -> Tensor:
    if motion.shape != conv1_features.shape:
        raise ShapeError("Motion feature {} does not match Conv1 feature {}.".format(motion.shape,
                                                                                      conv1_features.shape))
    return add(conv1_features, motion)


class LMC(Module):
    def __init__(self, name: str, cfg: LmcConfig, rng: np.random.Generator) -> None:
        super().__init__(name)
        self.cfg = cfg
        spec = ConvSpec.full(3, groups=cfg.groups)
        self.encoder = Linear(name + '/encoder', cfg.patch_dim, cfg.latent, rng)
        self.reason1 = Conv3d(name + '/reason1', cfg.latent, cfg.latent, spec, rng)
        self.norm = BatchNorm(name + '/norm', cfg.latent) if cfg.reason_norm else None
        self.reason2 = Conv3d(name + '/reason2', cfg.latent, cfg.latent, spec, rng)
        self.decoder = Linear(name + '/decoder', cfg.latent, cfg.decoded_dim, rng)

    def encode_latent(self, diffs: Tensor) -> Tensor:
        """ [S, 3, H, W] -> [S, latent, H / patch, W / patch]. """
        count, channels, height, width = diffs.shape
        p = self.cfg.patch
        if height % p != 0 or width % p != 0:
            raise ValueError("Input extents {}x{} must be multiples of the patch size {}.".format(height, width, p))
        rows, cols = height // p, width // p
        patches = reshape(diffs, (count, channels, rows, p, cols, p))
        patches = reshape(transpose(patches, (0, 2, 4, 1, 3, 5)), (count, rows, cols, channels * p * p))
        return transpose(self.encoder(patches), (0, 3, 1, 2))

    def motion_reason(self, codes: Tensor) -> Tensor:
        """ [B, steps, latent, P_h, P_w] -> same shape. """
        x = transpose(codes, (0, 2, 1, 3, 4))
        x = self.reason1(x)
        if self.norm is not None:
            x = relu(self.norm(x))
        x = self.reason2(x)
        return transpose(x, (0, 2, 1, 3, 4))

    def decode_motion(self, codes: Tensor) -> Tensor:
        """ [B, steps, latent, P_h, P_w] -> [B, steps * C_step, P_h * q, P_w * q]. """
        batch, steps, _, rows, cols = codes.shape
        channels, q = self.cfg.step_channels, self.cfg.decoded_patch
        decoded = self.decoder(transpose(codes, (0, 1, 3, 4, 2)))
        decoded = reshape(decoded, (batch, steps, rows, cols, channels, q, q))
        decoded = transpose(decoded, (0, 1, 4, 2, 5, 3, 6))
        return reshape(decoded, (batch, steps * channels, rows * q, cols * q))

    def forward(self, segments: Tensor) -> Tensor:
        """ Motion features for dense clips.

        Args:
            segments: [B, N, F, 3, H, W] normalized frames.

        Returns:
            [B, C, N, H / stem_stride, W / stem_stride] motion features, aligned with the stem output.
        """
        batch, num_segments, frames, channels, height, width = segments.shape
        if frames != self.cfg.frames:
            raise ShapeError("LMC expects {} frames per segment, got {}.".format(self.cfg.frames, frames))
        diffs = rgb_diff(reshape(segments, (batch * num_segments, frames, channels, height, width)), axis=1)
        steps = frames - 1
        codes = self.encode_latent(reshape(diffs, (batch * num_segments * steps, channels, height, width)))
        codes = reshape(codes, (batch * num_segments, steps) + codes.shape[1:])
        motion = self.decode_motion(self.motion_reason(codes))
        motion = reshape(motion, (batch, num_segments) + motion.shape[1:])
        return transpose(motion, (0, 2, 1, 3, 4))
