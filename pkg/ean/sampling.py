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
Segment-based frame sampling.

A video of L frames is divided into N groups of L // N frames; the last group also takes the
remainder. Training picks a random window (dense) or frame (sparse) per group, evaluation the
centred one. Groups shorter than the window repeat their last frame.
"""
import logging
import typing
from dataclasses import dataclass

import numpy as np

__ALL__ = ['SamplingPlan', 'segment_bounds', 'sample_frames', 'sparse_clip']

MODES = ('train', 'eval')

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SamplingPlan(object):
    segments: int
    mode: str = 'train'
    dense: bool = False
    window: int = 5

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError("Invalid sampling mode: '{}' (must be one of {}).".format(self.mode, MODES))
        if self.segments <= 0 or self.window <= 0:
            raise ValueError("Segments and window must be positive, got {} and {}.".format(self.segments,
                                                                                       self.window))

    @property
    def frames_per_segment(self) -> int:
        return self.window if self.dense else 1

    @property
    def total_frames(self) -> int:
        """ Frames in one sampled clip. """
        return self.segments * self.frames_per_segment


def segment_bounds(video_len: int, segments: int) -> typing.List[typing.Tuple[int, int]]:
    if video_len < segments:
        raise ValueError("Video of {} frames cannot be split into {} segments.".format(video_len, segments))
    length = video_len // segments
    bounds = [(i * length, (i + 1) * length) for i in range(segments)]
    bounds[-1] = (bounds[-1][0], video_len)
    return bounds


def sample_frames(video_len: int, plan: SamplingPlan,
                  rng: typing.Optional[np.random.Generator] = None) -> typing.List[typing.List[int]]:
    """ Frame indices, one list per segment (`plan.window` indices if dense, else one). """
    if plan.mode == 'train' and rng is None:
        raise ValueError("Train-mode sampling requires a random generator.")
    if plan.dense and video_len < plan.total_frames:
        logger.debug("Video of %d frames is shorter than a %d-frame dense clip; windows repeat their last frame.",
                     video_len, plan.total_frames)
    indices = []
    for start, end in segment_bounds(video_len, plan.segments):
        length = end - start
        if plan.dense:
            if length >= plan.window:
                slack = length - plan.window
                offset = int(rng.integers(0, slack + 1)) if plan.mode == 'train' else slack // 2
                indices.append(list(range(start + offset, start + offset + plan.window)))
            else:
                indices.append([start + min(k, length - 1) for k in range(plan.window)])
        else:
            offset = int(rng.integers(0, length)) if plan.mode == 'train' else length // 2
            indices.append([start + offset])
    return indices


def sparse_clip(indices: typing.Sequence[typing.Sequence[int]]) -> typing.List[int]:
    """ First frame of every segment. """
    return [group[0] for group in indices]
