"""Supervised source pretraining on clean procedural scenes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import segnet
from .bench.metrics import ConfusionMatrix
from .bench.scenes import SceneConfig
from .bench.stream import clean_stream
from .errors import ConfigError, NonFiniteError
from .numerics import AdamState, adam_step
from .seeding import PURPOSES, STREAM_PRETRAIN, derive_rng
from .segnet import Model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 6
    scenes: int = 400
    batch_size: int = 4
    lr: float = 2e-3
    heldout_scenes: int = 64

    def validate(self) -> "PretrainConfig":
        if self.epochs < 0:
            raise ConfigError(f"pretrain.epochs must be >= 0, got {self.epochs}")
        if self.scenes < 1 or self.batch_size < 1 or self.heldout_scenes < 1:
            raise ConfigError("pretrain.scenes, pretrain.batch_size and pretrain.heldout_scenes must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"pretrain.lr must be positive, got {self.lr}")
        return self


@dataclass
class EpochLog:
    epoch: int
    step: int
    loss: float


def evaluate_clean(model: Model, scene: SceneConfig, count: int, seed: int = 0) -> ConfusionMatrix:
    """Single-scale deterministic predictions on held-out clean scenes."""
    cm = ConfusionMatrix(model.cfg.num_classes)
    for s in clean_stream(scene, count, seed, heldout=True):
        cm.update(segnet.predict_probs(model, s.image).argmax(axis=0), s.label)
    return cm


def pretrain(model: Model, scene: SceneConfig, cfg: PretrainConfig, seed: int = 0,
             on_step=None) -> list[EpochLog]:
    """Mini-batch cross-entropy training, in place on ``model``.

    The scene pool and the per-epoch order are fixed by ``seed``; head dropout
    is active during training. Batches are formed by summing per-image
    gradients. A non-finite loss aborts with the offending epoch and step.
    """
    cfg.validate()
    data = [(s.image, s.label) for s in clean_stream(scene, cfg.scenes, seed)]
    adam = AdamState.zeros(model.num_params, dtype=model.params.dtype, lr=cfg.lr)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = derive_rng(seed, STREAM_PRETRAIN, epoch, "order").permutation(len(data))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grad = np.zeros_like(model.params)
            batch_loss = 0.0
            for i in batch:
                image, label = data[i]
                drop = (seed, STREAM_PRETRAIN, step, PURPOSES["dropout"], int(i))
                try:
                    with nx.Graph() as g:
                        probs = nx.softmax_over_channels(segnet.forward(model, image, dropout_seed=drop))
                        loss = nx.pixel_nll(probs, label)
                    grad += model.flat_grad(nx.backward(g, loss))
                except NonFiniteError as exc:
                    raise NonFiniteError(f"pretraining diverged at epoch {epoch}, step {step}: {exc}") from exc
                batch_loss += loss.item()
            grad /= len(batch)
            adam_step(model.params, grad, adam, None)
            batch_loss /= len(batch)
            total += batch_loss * len(batch)
            if on_step is not None:
                on_step(epoch, step, batch_loss)
            step += 1
        history.append(EpochLog(epoch, step, total / len(data)))
        log.info("epoch %d  loss %.4f", epoch, total / len(data))
    return history
