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
SGD training loop, evaluation and checkpoints.

Checkpoint directory:
    params/<name>.eant      model parameters
    buffers/<name>.eant     batch normalization running statistics
    optimizer/<name>.eant   momentum buffers
    optimizer.json          {"epoch", "step", "lr"}
    config.json             {"model": {...}, "train": {...}}
"""
import copy
import dataclasses
import logging
import typing
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from ean.io import load_checkpoint, save_checkpoint
from ean.model import Module
from ean.network import EAN, ConfigError, ModelConfig, build_model
from ean.ops import cross_entropy
from ean.sampling import SamplingPlan
from ean.synthetic import VideoDataset
from ean.tensor import Graph, Parameter, Tensor, backward, no_grad

__ALL__ = ['TrainConfig', 'learning_rate', 'SGD', 'train_step', 'evaluate', 'EvalResult', 'fit', 'sampling_plan',
           'save_training_state', 'restore']

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig(object):
    epochs: int = 30
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: typing.List[int] = field(default_factory=lambda: [20, 26])
    gamma: float = 0.1
    seed: int = 0
    eval_every: int = 1
    augment: bool = True

    PRESETS: typing.ClassVar[typing.Dict[str, dict]] = {
        'tiny': {'epochs': 30, 'batch_size': 16, 'milestones': [20, 26]},
        'resnet50-shape': {'epochs': 70, 'batch_size': 64, 'milestones': [40, 50, 60]}
    }

    def __post_init__(self) -> None:
        self.milestones = sorted(int(m) for m in self.milestones)
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("Epochs and batch size must be positive, got {} and {}.".format(self.epochs,
                                                                                             self.batch_size))
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("Invalid optimizer settings: lr={}, momentum={}, weight_decay={}.".format(
                self.lr, self.momentum, self.weight_decay))

    @classmethod
    def from_dict(cls, values: typing.Mapping[str, typing.Any]) -> 'TrainConfig':
        values = dict(values)
        preset = values.pop('preset', None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError("Unknown train config keys: {} (allowed: {}).".format(unknown, sorted(known)))
        if preset is not None:
            if preset not in cls.PRESETS:
                raise ConfigError("Unknown preset: '{}' (must be one of {}).".format(preset, sorted(cls.PRESETS)))
            base = copy.deepcopy(cls.PRESETS[preset])
            base.update(values)
            values = base
        return cls(**values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """ Step decay: lr * gamma^(number of milestones reached), epochs counted from 0. """
    return cfg.lr * cfg.gamma ** sum(1 for m in cfg.milestones if epoch >= m)


class SGD(object):
    """ Momentum SGD with L2 weight decay.

        g = grad + weight_decay * p
        buf = momentum * buf + g        (buf = g on the first step)
        p = p - lr * buf
    """
    def __init__(self, model: Module, momentum: float = 0.9, weight_decay: float = 5e-4) -> None:
        self.params: typing.Dict[str, Parameter] = dict(model.named_parameters())
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: typing.Dict[str, np.ndarray] = {}
        self.steps = 0

    def step(self, lr: float) -> None:
        for name, param in self.params.items():
            if param.grad is None:
                continue
            grad = param.grad + self.weight_decay * param.data if self.weight_decay else param.grad
            buf = self.buffers.get(name)
            buf = np.array(grad) if buf is None else self.momentum * buf + grad
            self.buffers[name] = buf
            if lr != 0:
                param.assign(param.data - lr * buf)
        self.steps += 1

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()

    def state_dict(self) -> typing.Dict[str, np.ndarray]:
        return {name: np.array(buf) for name, buf in self.buffers.items()}

    def load_state_dict(self, state: typing.Mapping[str, np.ndarray]) -> None:
        unknown = sorted(set(state) - set(self.params))
        if unknown:
            raise KeyError("Momentum buffers for unknown parameters: {}.".format(unknown))
        for name, buf in state.items():
            if buf.shape != self.params[name].shape:
                raise ValueError("Momentum buffer '{}' has shape {}, expecting {}.".format(
                    name, buf.shape, self.params[name].shape))
        self.buffers = {name: np.array(buf, dtype=self.params[name].dtype) for name, buf in state.items()}


def sampling_plan(cfg: ModelConfig, mode: str) -> SamplingPlan:
    return SamplingPlan(cfg.segments, mode=mode, dense=cfg.lmc_enabled, window=cfg.frames_per_segment)


def train_step(model: EAN, optimizer: SGD, clips: np.ndarray, labels: np.ndarray,
               lr: float) -> typing.Tuple[float, np.ndarray]:
    """ One SGD step on a batch. Returns the loss and the logits. """
    model.train()
    optimizer.zero_grad()
    with Graph():
        logits = model(Tensor(clips))
        loss = cross_entropy(logits, labels)
        backward(loss)
    optimizer.step(lr)
    return loss.item(), np.array(logits.data)


@dataclass
class EvalResult(object):
    accuracy: float
    predictions: np.ndarray
    labels: np.ndarray

    def to_dict(self) -> dict:
        return {'accuracy': self.accuracy, 'num_videos': int(len(self.labels)),
                'predictions': [int(p) for p in self.predictions]}


def evaluate(model: EAN, dataset: VideoDataset, plan: typing.Optional[SamplingPlan] = None, batch_size: int = 16,
             transform: typing.Optional[typing.Callable[[np.ndarray], np.ndarray]] = None) -> EvalResult:
    """ Centre-clip accuracy. Leaves the model's training flag as it was. """
    plan = plan or sampling_plan(model.cfg, 'eval')
    was_training = model.training
    model.eval()
    predictions = []
    try:
        with no_grad():
            for _, clips, _ in dataset.batches(plan, batch_size, transform=transform):
                predictions.append(np.argmax(model(Tensor(clips)).data, axis=1))
    finally:
        model.train(was_training)
    predictions = np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)
    labels = dataset.labels
    accuracy = float(np.mean(predictions == labels)) if len(labels) else 0.0
    return EvalResult(accuracy, predictions, labels)


def save_training_state(path: str, model: EAN, optimizer: SGD, train_cfg: TrainConfig, epoch: int,
                        lr: float, rng: typing.Optional[np.random.Generator] = None) -> None:
    """ Writes weights, momentum buffers and the random streams needed to resume at `epoch`. """
    streams = {'dropout': model.dropout_rng.bit_generator.state}
    if rng is not None:
        streams['sampling'] = rng.bit_generator.state
    save_checkpoint(path, model.state_dict(), model.buffers_dict(), optimizer.state_dict(),
                    {'epoch': epoch, 'step': optimizer.steps, 'lr': lr, 'rng': streams},
                    {'model': model.cfg.to_dict(), 'train': train_cfg.to_dict()})


def restore(path: str) -> typing.Tuple[EAN, SGD, TrainConfig, dict]:
    """ Rebuilds model, optimizer and training config from a checkpoint directory. """
    state = load_checkpoint(path)
    config = state['config']
    if 'model' not in config:
        raise ConfigError("Checkpoint '{}' has no 'model' section in config.json.".format(path))
    model = build_model(ModelConfig.from_dict(config['model']))
    model.load_state_dict(state['params'])
    model.load_buffers(state['buffers'])
    train_cfg = TrainConfig.from_dict(config.get('train', {}))
    optimizer = SGD(model, train_cfg.momentum, train_cfg.weight_decay)
    optimizer.load_state_dict(state['optimizer'])
    optimizer.steps = int(state['optimizer_meta'].get('step', 0))
    streams = state['optimizer_meta'].get('rng', {})
    if 'dropout' in streams:
        model.dropout_rng.bit_generator.state = streams['dropout']
    logger.debug("Restored '%s' at epoch %s.", path, state['optimizer_meta'].get('epoch'))
    return model, optimizer, train_cfg, state['optimizer_meta']


def fit(model: EAN, train_set: VideoDataset, cfg: TrainConfig, val_set: typing.Optional[VideoDataset] = None,
        checkpoint: typing.Optional[str] = None, optimizer: typing.Optional[SGD] = None, start_epoch: int = 0,
        progress: bool = False, rng_state: typing.Optional[dict] = None) -> typing.List[dict]:
    """ Trains for `cfg.epochs` epochs and returns one history record per epoch.

    A run restored with `restore` continues from `start_epoch` with the sampling stream saved in the
    checkpoint (`meta['rng']['sampling']` passed as `rng_state`).
    """
    optimizer = optimizer or SGD(model, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 3])
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    plan = sampling_plan(model.cfg, 'train')
    history = []
    for epoch in range(start_epoch, cfg.epochs):
        lr = learning_rate(cfg, epoch)
        losses, correct, seen = [], 0, 0
        batches = train_set.batches(plan, cfg.batch_size, rng=rng, shuffle=True, augment=cfg.augment)
        total = -(-len(train_set) // cfg.batch_size)
        for _, clips, labels in tqdm(batches, total=total, desc='epoch {}'.format(epoch + 1), disable=not progress):
            loss, logits = train_step(model, optimizer, clips, labels, lr)
            losses.append(loss)
            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            seen += len(labels)
        record = {'epoch': epoch + 1, 'lr': lr, 'loss': float(np.mean(losses)), 'train_accuracy': correct / seen}
        if val_set is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            record['val_accuracy'] = evaluate(model, val_set, batch_size=cfg.batch_size).accuracy
        logger.info("Epoch %d/%d: lr=%g loss=%.4f train_acc=%.3f val_acc=%s", epoch + 1, cfg.epochs, lr,
                    record['loss'], record['train_accuracy'],
                    '{:.3f}'.format(record['val_accuracy']) if 'val_accuracy' in record else 'n/a')
        history.append(record)
        if checkpoint is not None:
            save_training_state(checkpoint, model, optimizer, cfg, epoch + 1, lr, rng)
    return history
