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
Synthetic motion-only action videos.

Every class shares the same object appearance (a square of one colour over a noisy uniform
background) and differs only in how the object moves, so single frames carry no class information.

On disk:
    <root>/videos/<index>.eant   frames x 3 x H x W, float32 in [0, 1]
    <root>/manifest.jsonl        {"path": "videos/<index>.eant", "label": int, "direction_sensitive": bool}
"""
import logging
import os
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from ean.io import load_tensor, read_jsonl, save_tensor, write_jsonl
from ean.sampling import SamplingPlan, sample_frames, sparse_clip

__ALL__ = ['PATTERNS', 'SyntheticSpec', 'render_video', 'generate', 'VideoDataset', 'zoom_spatial',
           'change_frame_rate', 'worker_threads']

logger = logging.getLogger(__name__)

# Pattern name -> direction sensitive (horizontal flip changes the class).
PATTERNS = {
    'left_to_right': True,
    'right_to_left': True,
    'top_to_bottom': True,
    'bottom_to_top': True,
    'approach': False,
    'fall_off_edge': True
}

MANIFEST = 'manifest.jsonl'
SPLITS = ('train', 'val')
APPROACH_GROWTH = 2.0
MEAN, STD = 0.5, 0.25


def worker_threads() -> int:
    """ Worker thread cap from EAN_THREADS (default: min(4, number of CPUs)). """
    value = os.environ.get('EAN_THREADS')
    if value is None:
        return min(4, os.cpu_count() or 1)
    try:
        threads = int(value)
    except ValueError:
        raise ValueError("Invalid EAN_THREADS value: '{}' (must be a positive integer).".format(value))
    if threads <= 0:
        raise ValueError("Invalid EAN_THREADS value: '{}' (must be a positive integer).".format(value))
    return threads


@dataclass
class SyntheticSpec(object):
    num_classes: int = 4
    videos_per_class: int = 100
    val_videos_per_class: int = 25
    frames: int = 16
    canvas: int = 64
    object_size: typing.Tuple[int, int] = (10, 16)
    speed: typing.Tuple[float, float] = (1.5, 3.0)
    patterns: typing.List[str] = field(
        default_factory=lambda: ['left_to_right', 'right_to_left', 'approach', 'fall_off_edge'])
    direction_sensitive: typing.Optional[typing.List[bool]] = None
    colour: typing.Tuple[float, float, float] = (0.9, 0.7, 0.4)
    background: float = 0.3
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        self.object_size = tuple(self.object_size)
        self.speed = tuple(self.speed)
        self.colour = tuple(self.colour)
        unknown = [p for p in self.patterns if p not in PATTERNS]
        if unknown:
            raise ValueError("Unknown motion patterns {} (must be from {}).".format(unknown, sorted(PATTERNS)))
        if len(self.patterns) != self.num_classes:
            raise ValueError("Expecting one pattern per class: {} classes, {} patterns.".format(
                self.num_classes, len(self.patterns)))
        if self.direction_sensitive is None:
            self.direction_sensitive = [PATTERNS[p] for p in self.patterns]
        if len(self.direction_sensitive) != self.num_classes:
            raise ValueError("Expecting one direction-sensitivity flag per class, got {}.".format(
                self.direction_sensitive))
        low, high = self.object_size
        if not 0 < low <= high < self.canvas // 2:
            raise ValueError("Object size range {} must be within (0, {}).".format(self.object_size,
                                                                                   self.canvas // 2))
        if self.frames < 2:
            raise ValueError("Videos need at least 2 frames, got {}.".format(self.frames))

    @classmethod
    def from_dict(cls, values: typing.Mapping[str, typing.Any]) -> 'SyntheticSpec':
        try:
            return cls(**values)
        except TypeError as err:
            raise ValueError("Invalid synthetic data config: {}".format(err)) from err

    @property
    def num_videos(self) -> int:
        return self.num_classes * self.videos_per_class


def _draw(frame: np.ndarray, top: float, left: float, size: float, colour: np.ndarray) -> None:
    canvas = frame.shape[-1]
    top, left, size = int(round(top)), int(round(left)), max(1, int(round(size)))
    rows = slice(max(top, 0), min(top + size, canvas))
    cols = slice(max(left, 0), min(left + size, canvas))
    if rows.start < rows.stop and cols.start < cols.stop:
        frame[:, rows, cols] = colour[:, None, None]


def render_video(pattern: str, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """ One video [frames, 3, canvas, canvas], float32 in [0, 1]. """
    frames, canvas = spec.frames, spec.canvas
    size = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
    speed = float(rng.uniform(*spec.speed))
    colour = np.array(spec.colour)
    video = np.full((frames, 3, canvas, canvas), spec.background)
    travel = canvas - size
    progress = np.arange(frames) / (frames - 1)

    if pattern in ('left_to_right', 'right_to_left', 'top_to_bottom', 'bottom_to_top'):
        span = min(speed * (frames - 1), travel)
        start = rng.uniform(0, travel - span)
        cross = rng.uniform(0, travel)
        for f in range(frames):
            along = start + span * progress[f]
            if pattern in ('right_to_left', 'bottom_to_top'):
                along = travel - along
            top, left = (cross, along) if pattern in ('left_to_right', 'right_to_left') else (along, cross)
            _draw(video[f], top, left, size, colour)
    elif pattern == 'approach':
        # Grows from size / sqrt(2) to size * sqrt(2); the middle frame shows the shared size.
        largest = size * APPROACH_GROWTH ** 0.5
        centre_y, centre_x = rng.uniform(largest / 2, canvas - largest / 2, size=2)
        for f in range(frames):
            current = size * APPROACH_GROWTH ** (progress[f] - 0.5)
            _draw(video[f], centre_y - current / 2, centre_x - current / 2, current, colour)
    elif pattern == 'fall_off_edge':
        # Slides right along a ledge, drops under constant acceleration once past its edge and lands on the floor.
        top = rng.uniform(0, canvas / 3)
        left = rng.uniform(0, canvas / 4)
        edge = rng.uniform(canvas / 2, 3 * canvas / 4 - size / 2)
        for f in range(frames):
            x = min(left + speed * f, travel)
            y = top
            if x > edge:
                dt = (x - edge) / speed
                y = min(top + speed * dt * dt, travel)
            _draw(video[f], y, x, size, colour)
    else:
        raise ValueError("Unknown motion pattern: '{}'.".format(pattern))

    video += rng.normal(0.0, spec.noise, size=video.shape)
    return np.clip(video, 0.0, 1.0).astype(np.float32)


def generate(spec: SyntheticSpec, out_dir: str, split: str = 'train', threads: typing.Optional[int] = None,
             progress: bool = False) -> str:
    """ Writes one split and returns its manifest path. Output does not depend on the thread count.

    The train split has `videos_per_class` videos per class, the val split `val_videos_per_class`;
    the splits draw from independent seed streams.
    """
    if split not in SPLITS:
        raise ValueError("Invalid split: '{}' (must be one of {}).".format(split, SPLITS))
    num_videos = spec.num_classes * (spec.videos_per_class if split == 'train' else spec.val_videos_per_class)
    videos_dir = os.path.join(out_dir, 'videos')
    try:
        os.makedirs(videos_dir, exist_ok=True)
    except OSError as err:
        raise type(err)("Cannot create dataset directory '{}': {}".format(videos_dir, err)) from err
    seeds = np.random.SeedSequence([spec.seed, SPLITS.index(split)]).spawn(num_videos)

    def _work(index: int) -> dict:
        label = index % spec.num_classes
        video = render_video(spec.patterns[label], spec, np.random.default_rng(seeds[index]))
        path = 'videos/{:05d}.eant'.format(index)
        save_tensor(os.path.join(out_dir, path), video)
        return {'path': path, 'label': label, 'direction_sensitive': bool(spec.direction_sensitive[label])}

    threads = threads or worker_threads()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        records = list(tqdm(pool.map(_work, range(num_videos)), total=num_videos,
                            desc='generate {}'.format(split), disable=not progress))
    manifest = os.path.join(out_dir, MANIFEST)
    write_jsonl(manifest, records)
    logger.info("Generated %d %s videos (%d classes) in '%s' with %d threads.", len(records), split,
                spec.num_classes, out_dir, threads)
    return manifest


def zoom_spatial(video: np.ndarray, factor: float = 1.6) -> np.ndarray:
    """ Zoom into the frame centre by `factor`, keeping the frame size. """
    height, width = video.shape[-2:]
    zoomed = ndimage.zoom(video, (1, 1, factor, factor), order=1)
    top, left = (zoomed.shape[-2] - height) // 2, (zoomed.shape[-1] - width) // 2
    return np.ascontiguousarray(zoomed[..., top:top + height, left:left + width], dtype=video.dtype)


def change_frame_rate(video: np.ndarray, factor: float = 2.0) -> np.ndarray:
    """ Resample time by `factor` (linear interpolation), keeping the central original-length span. """
    frames = video.shape[0]
    resampled = ndimage.zoom(video, (factor, 1, 1, 1), order=1)
    start = max((resampled.shape[0] - frames) // 2, 0)
    return np.ascontiguousarray(resampled[start:start + frames], dtype=video.dtype)


class VideoDataset(object):
    """ Manifest-backed dataset. Frames are normalized with mean 0.5 and std 0.25 at load time. """
    def __init__(self, root: str) -> None:
        self.root = root
        manifest = os.path.join(root, MANIFEST)
        if not os.path.isfile(manifest):
            raise FileNotFoundError("Dataset manifest '{}' not found; run 'generate-data' first.".format(manifest))
        self.records = read_jsonl(manifest)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([record['label'] for record in self.records], dtype=np.int64)

    def raw_video(self, index: int) -> np.ndarray:
        return load_tensor(os.path.join(self.root, self.records[index]['path']))

    def video(self, index: int,
              transform: typing.Optional[typing.Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
        video = self.raw_video(index)
        if transform is not None:
            video = transform(video)
        return ((video - MEAN) / STD).astype(np.float32)

    def clip(self, index: int, plan: SamplingPlan, rng: typing.Optional[np.random.Generator] = None,
             augment: bool = False,
             transform: typing.Optional[typing.Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
        """ [N, 3, H, W] sparse clip or [N, window, 3, H, W] dense clip. """
        video = self.video(index, transform)
        groups = sample_frames(len(video), plan, rng)
        clip = video[np.array(groups)] if plan.dense else video[sparse_clip(groups)]
        if augment and not self.records[index]['direction_sensitive'] and rng.random() < 0.5:
            clip = np.ascontiguousarray(clip[..., ::-1])
        return clip

    def batch(self, indices: typing.Sequence[int], plan: SamplingPlan, rng: typing.Optional[np.random.Generator] = None,
              augment: bool = False,
              transform: typing.Optional[typing.Callable[[np.ndarray], np.ndarray]] = None
              ) -> typing.Tuple[np.ndarray, np.ndarray]:
        clips = np.stack([self.clip(i, plan, rng, augment, transform) for i in indices])
        return clips, self.labels[np.asarray(indices, dtype=np.int64)]

    def batches(self, plan: SamplingPlan, batch_size: int, rng: typing.Optional[np.random.Generator] = None,
                shuffle: bool = False, augment: bool = False,
                transform: typing.Optional[typing.Callable[[np.ndarray], np.ndarray]] = None
                ) -> typing.Iterator[typing.Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """ Yields (indices, clips, labels). """
        order = rng.permutation(len(self)) if shuffle else np.arange(len(self))
        for start in range(0, len(order), batch_size):
            indices = order[start:start + batch_size]
            clips, labels = self.batch(indices, plan, rng, augment, transform)
            yield indices, clips, labels
