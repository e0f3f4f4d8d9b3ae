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
Kernel-weight inspection and the scale-shift sweep.

The sweep evaluates every video three ways (unmodified, 1.6x spatial zoom, 2x frame rate) and
reports, per EAB branch, the mean share of |M| mass the branch receives among the branches of the
same kind (spatial or temporal).
"""
import functools
import logging
import typing

import numpy as np
from tqdm import tqdm

from ean.modules.eab import branch_labels, kernel_weight_records, kernel_weights
from ean.modules.soitr import saliency_records
from ean.network import EAN, ConfigError
from ean.sampling import SamplingPlan
from ean.synthetic import VideoDataset, change_frame_rate, zoom_spatial
from ean.tensor import Tensor, no_grad
from ean.training import sampling_plan

__ALL__ = ['traced_forward', 'inspect_kernels', 'branch_shares', 'scale_shift_sweep', 'CONDITIONS']

logger = logging.getLogger(__name__)

CONDITIONS = {
    'original': None,
    'zoom': functools.partial(zoom_spatial, factor=1.6),
    'frame_rate': functools.partial(change_frame_rate, factor=2.0)
}


def traced_forward(model: EAN, clips: np.ndarray) -> dict:
    """ Eval-mode forward pass returning {block name: fusion matrices or saliency maps}. """
    was_training = model.training
    model.eval()
    trace = {}
    try:
        with no_grad():
            model(Tensor(clips), trace)
    finally:
        model.train(was_training)
    return trace


def _batches(dataset: VideoDataset, indices: typing.Sequence[int], plan: SamplingPlan, batch_size: int,
             transform=None) -> typing.Iterator[typing.Tuple[typing.List[int], np.ndarray]]:
    for start in range(0, len(indices), batch_size):
        chunk = list(indices[start:start + batch_size])
        clips, _ = dataset.batch(chunk, plan, transform=transform)
        yield chunk, clips


def inspect_kernels(model: EAN, dataset: VideoDataset, indices: typing.Optional[typing.Sequence[int]] = None,
                    batch_size: int = 16, saliency: bool = False) -> typing.Tuple[typing.List[dict], typing.List[dict]]:
    """ Kernel-weight records for every EAB and, optionally, saliency-map records for every SOI-Tr. """
    if not model.eabs:
        raise ConfigError("Model has no EAB to inspect (eab_after_stages is empty).")
    indices = list(range(len(dataset))) if indices is None else list(indices)
    plan = sampling_plan(model.cfg, 'eval')
    kernels, maps = [], []
    for chunk, clips in _batches(dataset, indices, plan, batch_size):
        trace = traced_forward(model, clips)
        for eab in model.eabs.values():
            if eab.name in trace:
                kernels.extend(kernel_weight_records(trace[eab.name], eab.cfg.group_count, chunk, block=eab.name))
        if saliency:
            for soitr in model.soitrs.values():
                maps.extend(saliency_records(trace[soitr.name], chunk, block=soitr.name))
    return kernels, maps


def branch_shares(weights: typing.Mapping[str, float]) -> typing.Dict[str, float]:
    """ Normalizes spatial ('S-*') and temporal ('T-*') branch weights separately to sum to one. """
    shares = {}
    for kind in ('S', 'T'):
        keys = [k for k in weights if k.startswith(kind + '-')]
        total = sum(weights[k] for k in keys)
        for k in keys:
            shares[k] = weights[k] / total if total > 0 else 0.0
    return shares


def scale_shift_sweep(model: EAN, dataset: VideoDataset, indices: typing.Optional[typing.Sequence[int]] = None,
                batch_size: int = 16, progress: bool = False) -> typing.Tuple[typing.List[dict], dict]:
    """ Mean branch shares per condition and the direction of their shift.

    Returns:
        (records, summary) where records are {condition, block, branch, share} ('all' block is the
        mean over blocks) and summary is {"zoom": {"s1_up", "s5_down"}, "frame_rate": {"t1_up", "t5_down"}}.
    """
    eabs = [eab for eab in model.eabs.values() if eab.esp is not None]
    if not eabs:
        raise ConfigError("The scale-shift sweep needs EABs with dynamic fusion (fusion='dynamic').")
    indices = list(range(len(dataset))) if indices is None else list(indices)
    plan = sampling_plan(model.cfg, 'eval')
    group_count = eabs[0].cfg.group_count
    labels = branch_labels(group_count)

    means: typing.Dict[str, typing.Dict[str, typing.Dict[str, float]]] = {}
    for condition, transform in tqdm(CONDITIONS.items(), desc='conditions', disable=not progress):
        sums = {eab.name: dict.fromkeys(labels, 0.0) for eab in eabs}
        seen = 0
        for chunk, clips in _batches(dataset, indices, plan, batch_size, transform):
            trace = traced_forward(model, clips)
            for eab in eabs:
                for sample in kernel_weights(trace[eab.name], group_count):
                    for branch, share in branch_shares(sample).items():
                        sums[eab.name][branch] += share
            seen += len(chunk)
        per_block = {block: {b: total / seen for b, total in values.items()} for block, values in sums.items()}
        per_block['all'] = {b: float(np.mean([per_block[eab.name][b] for eab in eabs])) for b in labels}
        means[condition] = per_block
        logger.info("Condition '%s': %s", condition, {b: round(v, 4) for b, v in per_block['all'].items()})

    records = [{'condition': condition, 'block': block, 'branch': branch, 'share': share}
               for condition, blocks in means.items() for block, shares in blocks.items()
               for branch, share in shares.items()]
    small, large = labels[0][2:], labels[group_count - 1][2:]
    base, zoom, rate = means['original']['all'], means['zoom']['all'], means['frame_rate']['all']
    summary = {
        'zoom': {'s1_up': zoom['S-' + small] > base['S-' + small], 's5_down': zoom['S-' + large] < base['S-' + large]},
        'frame_rate': {'t1_up': rate['T-' + small] > base['T-' + small],
                       't5_down': rate['T-' + large] < base['T-' + large]}
    }
    return records, summary
