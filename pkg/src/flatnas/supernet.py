"""Weight-sharing supernet trained by uniform single-path sampling."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, batches
from .errors import NonFiniteGradient, NonFiniteLoss
from .nncore import OptimizerConfig, ParamSet, backward_step, cosine_lr, init_params, required_names
from .searchspace import Genotype, SearchSpaceSpec, random_genotype

log = logging.getLogger(__name__)


@dataclass
class SuperNet:
    space: SearchSpaceSpec
    shared_params: ParamSet
    initial_snapshot: ParamSet
    input_dim: int
    num_classes: int
    epoch: int = 0
    velocity: dict = field(default_factory=dict, repr=False)


def build_supernet(
    space: SearchSpaceSpec, input_dim: int, num_classes: int, rng: np.random.Generator
) -> SuperNet:
    params = init_params(space, input_dim, num_classes, rng)
    # ParamSet arrays are read-only, so sharing them with the snapshot is safe
    return SuperNet(space, params, params.copy(), input_dim, num_classes)


def sample_uniform_path(space: SearchSpaceSpec, rng: np.random.Generator) -> Genotype:
    return random_genotype(space, rng)


def train_supernet(
    net: SuperNet,
    train_data: Dataset,
    cfg: OptimizerConfig,
    rng: np.random.Generator,
    on_epoch: Callable[[int, float], None] | None = None,
    sample_log: list[Genotype] | None = None,
) -> SuperNet:
    """Run ``cfg.epochs`` epochs of single-path training; one path per mini-batch.

    The shuffle seed is the first draw from ``rng``; path samples follow. The
    learning rate is annealed per epoch with :func:`cosine_lr`.
    """
    if len(train_data.indices("train")) == 0:
        raise ValueError("training split is empty")
    shuffle_seed = int(rng.integers(2**63 - 1))
    params = net.shared_params
    velocity = {k: v.copy() for k, v in net.velocity.items()}
    step = 0
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg)
        losses = []
        for batch in batches(train_data, "train", cfg.batch_size, shuffle_seed, epoch):
            path = sample_uniform_path(net.space, rng)
            if sample_log is not None:
                sample_log.append(path)
            try:
                params, loss = backward_step(params, path, net.space, batch, lr, cfg, velocity, step=step)
            except NonFiniteLoss as exc:
                raise NonFiniteGradient(str(exc), step) from exc
            losses.append(loss)
            step += 1
        mean_loss = float(np.mean(losses))
        log.debug("supernet epoch %d lr %.5f loss %.5f", epoch, lr, mean_loss)
        if on_epoch is not None:
            on_epoch(epoch, mean_loss)
    return dataclasses.replace(
        net, shared_params=params, epoch=net.epoch + cfg.epochs, velocity=velocity
    )


def _extract(net: SuperNet, source: ParamSet, g: Genotype) -> ParamSet:
    net.space.validate(g)
    return source.subset(required_names(g, net.space))


def extract_subnet(net: SuperNet, g: Genotype) -> ParamSet:
    """Stem, head and the blocks selected by ``g``, copied out of the trained weights."""
    return _extract(net, net.shared_params, g)


def extract_initial_subnet(net: SuperNet, g: Genotype) -> ParamSet:
    return _extract(net, net.initial_snapshot, g)
