import logging
import os
from typing import Dict, List, Optional, Tuple

import numpy as np

from lpnum.common.config import TrainConfig
from lpnum.common.context import ParameterClass
from lpnum.common.data import Dataset
from lpnum.common.models import EpochMetrics, OpTally, epochs_to_threshold
from lpnum.common.network import NetworkState, backward, forward, layer_histograms, loss
from lpnum.common.qformats import FloatFormat, quantize
from lpnum.common.recorder import Recorder

logger = logging.getLogger("rich")

POT = FloatFormat(6, 0)
_SLOTS = (
    ("weights", ParameterClass.WEIGHTS, ParameterClass.WEIGHT_UPDATES),
    ("biases", ParameterClass.BIASES, ParameterClass.BIAS_UPDATES),
)


def hyperparameters(cfg: TrainConfig) -> Tuple[float, float, float]:
    """
    (learning rate, momentum, weight decay); rounded to the nearest power of two when
    `pot_hyperparameters` is set so that every update product becomes a shift.
    """
    values = cfg.learning_rate, cfg.momentum, cfg.weight_decay
    if cfg.pot_hyperparameters:
        return tuple(quantize(v, POT) for v in values)
    return values


def sgd_step(state: NetworkState, gradients: Dict[str, Dict[str, np.ndarray]], cfg: TrainConfig,
             key: Optional[Tuple] = None) -> Dict[str, float]:
    """
    u = momentum * u_prev - lr * (g + weight_decay * w), computed wide; u is constrained to the
    update format and kept as the momentum buffer, then w = quantize(w + u).

    Returns the mean magnitude of the update actually applied to each layer's weights.
    """
    key = key if key is not None else ("train", state.step)
    lr, mu, wd = hyperparameters(cfg)
    product = "shift" if cfg.pot_hyperparameters else "mul"
    applied: Dict[str, float] = {}
    for layer in state.topology.parametric:
        for slot, value_cls, update_cls in _SLOTS:
            w = state.params[layer.name][slot]
            values, updates = (layer.name, value_cls), (layer.name, update_cls)
            grads = (f"{layer.name}.{slot}", ParameterClass.GRADIENTS)
            decayed = gradients[layer.name][slot] + wd * state.align(w, values, grads)
            u = mu * state.align(state.momentum[layer.name][slot], updates, grads) - lr * decayed
            u = state.quantize(u, layer.name, update_cls, key)
            updated = state.quantize(w + state.align(u, updates, values), layer.name, value_cls, key)
            state.tally.record(product, 3 * w.size)
            state.tally.record("add", 3 * w.size)
            if slot == "weights":
                applied[layer.name] = float(np.mean(np.abs(updated - w)))
            state.momentum[layer.name][slot] = u
            state.params[layer.name][slot] = updated
    if state.debug:
        state.assert_conformance()
    return applied


def evaluate(state: NetworkState, ds: Dataset, batch_size: int = 100,
             return_logits: bool = False):
    """
    Test accuracy in percent with dropout in inference mode. Ops spent here are not added to
    the state's training tally.
    """
    if len(ds) == 0:
        raise ValueError("Cannot evaluate on an empty dataset")
    training_tally, state.tally = state.tally, OpTally()
    all_logits = []
    correct = 0
    try:
        for i, start in enumerate(range(0, len(ds), batch_size)):
            images = ds.images.data[start:start + batch_size]
            logits, _ = forward(state, images, training=False, key=("eval", state.epoch, i))
            correct += int(np.sum(np.argmax(logits, axis=1) == ds.labels[start:start + batch_size]))
            if return_logits:
                all_logits.append(logits)
    finally:
        state.tally = training_tally
    accuracy = 100.0 * correct / len(ds)
    if return_logits:
        return accuracy, np.concatenate(all_logits)
    return accuracy


class Trainer:

    def __init__(self, state: NetworkState, train_set: Dataset, test_set: Dataset, config: TrainConfig,
                 recorder: Optional[Recorder] = None, histograms: bool = False, checkpoint_dir: str = None):
        self.state = state
        self.train_set = train_set
        self.test_set = test_set
        self.config = config
        self.recorder = recorder
        self.histograms = histograms
        self.checkpoint_dir = checkpoint_dir
        self.metrics: List[EpochMetrics] = []
        state.record_activations = histograms

    def train_epoch(self, epoch: int) -> Tuple[float, Dict[str, float]]:
        state, cfg = self.state, self.config
        order = state.rng.stream("shuffle", epoch).permutation(len(self.train_set))
        losses = []
        updates: Dict[str, List[float]] = {}
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            key = ("train", state.step)
            logits, cache = forward(state, self.train_set.images.data[batch], training=True, key=key)
            losses.append(loss(logits, self.train_set.labels[batch]))
            grads = backward(state, cache, self.train_set.labels[batch])
            for layer, value in sgd_step(state, grads, cfg, key).items():
                updates.setdefault(layer, []).append(value)
            state.step += 1
        return float(np.mean(losses)), {layer: float(np.mean(v)) for layer, v in updates.items()}

    def _checkpoint(self, epoch: int, final: bool = False) -> None:
        if not self.checkpoint_dir:
            return
        every = self.config.checkpoint_every
        if every and epoch % every == 0:
            self.state.save_checkpoint(os.path.join(self.checkpoint_dir, f"epoch-{epoch:03d}"))
        if final or (every and epoch % every == 0):
            self.state.save_checkpoint(os.path.join(self.checkpoint_dir, "latest"))

    def _emit(self, metrics: EpochMetrics) -> None:
        self.metrics.append(metrics)
        if self.recorder:
            self.recorder.write_epoch(metrics)
            if self.histograms:
                self.recorder.write_histograms(metrics.epoch, layer_histograms(self.state))

    def run(self) -> List[EpochMetrics]:
        state, cfg = self.state, self.config
        if cfg.epochs == 0:
            accuracy = evaluate(state, self.test_set, cfg.batch_size)
            logger.info("Untrained accuracy: %.2f%%", accuracy)
            self._emit(EpochMetrics(epoch=0, train_loss=None, test_accuracy=accuracy,
                                    contexts=state.contexts.snapshot()))
        first = state.epoch + 1
        for epoch in range(first, cfg.epochs + 1):
            tally_before = OpTally().merge(state.tally)
            train_loss, updates = self.train_epoch(epoch)
            state.epoch = epoch
            accuracy = evaluate(state, self.test_set, cfg.batch_size)
            ops = {k: state.tally[k] - tally_before[k] for k in state.tally.counts}
            self._emit(EpochMetrics(epoch=epoch, train_loss=train_loss, test_accuracy=accuracy,
                                    contexts=state.contexts.snapshot(), ops=ops, mean_update=updates))
            logger.info("Epoch %d/%d: loss %.4f, test accuracy %.2f%%", epoch, cfg.epochs, train_loss, accuracy)
            self._checkpoint(epoch, final=epoch == cfg.epochs)
        reached = epochs_to_threshold(self.metrics)
        if reached is not None:
            logger.info("Reached 70%% test accuracy at epoch %d", reached)
        return self.metrics


def train(state: NetworkState, train_set: Dataset, test_set: Dataset, cfg: TrainConfig,
          recorder: Optional[Recorder] = None, histograms: bool = False,
          checkpoint_dir: str = None) -> List[EpochMetrics]:
    return Trainer(state, train_set, test_set, cfg, recorder, histograms, checkpoint_dir).run()
