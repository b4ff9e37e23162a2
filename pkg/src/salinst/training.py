"""Training loop: seeded momentum-SGD over the multi-task loss, one image
per step, with horizontal-flip augmentation and a step learning-rate drop."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Sample, augment_hflip
from .model import SalientSegModel

log = logging.getLogger(__name__)


def build_model(config: RunConfig, seed: Optional[int] = None) -> SalientSegModel:
    rng = np.random.default_rng(config.train.seed if seed is None else seed)
    return SalientSegModel(config.backbone, config.seg, config.mask, rng=rng)


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Single-image steps occasionally produce gradient spikes an order of
    magnitude above the typical norm; unclipped, one such step can push a
    whole backbone stage into the dead-ReLU regime it never recovers from.
    Returns the pre-clip norm. max_norm <= 0 disables clipping.
    """
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def lr_at(step: int, config: RunConfig) -> float:
    tc = config.train
    if step >= tc.lr_drop_step:
        return tc.learning_rate / tc.lr_drop_factor
    return tc.learning_rate


def train_model(train_set: Sequence[Sample], config: RunConfig,
                seed: Optional[int] = None, model: Optional[SalientSegModel] = None,
                log_path=None) -> SalientSegModel:
    if not train_set:
        raise ValueError("train_model: empty training set")
    tc = config.train
    seed = tc.seed if seed is None else seed
    if model is None:
        model = build_model(config, seed=seed)
    rng = np.random.default_rng([seed, 1])
    state = T.OptimState(learning_rate=tc.learning_rate, momentum=tc.momentum,
                         weight_decay=tc.weight_decay)
    logger = None
    if log_path is not None:
        from .losses import LossLogger
        logger = LossLogger(log_path)

    order = rng.permutation(len(train_set))
    for step in range(tc.steps):
        if step and step % len(train_set) == 0:
            order = rng.permutation(len(train_set))
        sample = train_set[order[step % len(train_set)]]
        if rng.random() < tc.hflip_prob:
            sample = augment_hflip(sample)
        T.zero_grads(model.params)
        loss, bundle = model.training_loss(sample)
        loss.backward()
        clip_gradients(model.params, tc.clip_norm)
        state.learning_rate = lr_at(step, config)
        T.sgd_step(model.params, state)
        if logger is not None and (step % tc.log_every == 0 or step == tc.steps - 1):
            logger.log(step, bundle, state.learning_rate)
        if step % 200 == 0:
            log.info("step %d: loss %.4f (obj %.4f coord %.4f seg %.4f)",
                     step, bundle.total, bundle.l_obj, bundle.l_coord, bundle.l_seg)
    return model


def run_inference(model: SalientSegModel, samples: Sequence[Sample], config: RunConfig):
    detections = []
    for s in samples:
        detections.extend(model.infer(s.image, s.id, config.infer))
    return detections
