"""Toy architectures for surrogates and victims, with training presets."""

from __future__ import annotations

from .diffnet import FLATTEN, L2NORMALIZE, RELU, EmbeddingNetwork, build_network, conv2d, dense
from .embedding import TrainConfig

EMBEDDING_DIM = 16

ARCHITECTURES = {
    "conv_small": [conv2d(8, 3, 2), RELU, conv2d(8, 3, 2), RELU, FLATTEN,
                   dense(EMBEDDING_DIM), L2NORMALIZE],
    "conv_wide": [conv2d(12, 3, 1), RELU, conv2d(8, 3, 2), RELU, FLATTEN,
                  dense(32), RELU, dense(EMBEDDING_DIM), L2NORMALIZE],
    "mlp": [FLATTEN, dense(64), RELU, dense(EMBEDDING_DIM), L2NORMALIZE],
}

# per-architecture SGD settings that train reliably on the synthetic identities
TRAIN_PRESETS = {
    "conv_small": dict(margin=0.5, epochs=60, lr=0.2, batch_size=32),
    "conv_wide": dict(margin=0.5, epochs=60, lr=0.2, batch_size=32),
    "mlp": dict(margin=0.5, epochs=60, lr=0.05, batch_size=32),
}


def make_network(arch: str, input_shape: tuple, seed: int) -> EmbeddingNetwork:
    try:
        layers = ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}") from None
    return build_network(layers, input_shape, seed=seed)


def train_config(arch: str, seed: int, **overrides) -> TrainConfig:
    kw = dict(TRAIN_PRESETS.get(arch, {}))
    kw.update(overrides)
    return TrainConfig(loss=kw.pop("loss", "triplet"), seed=seed, **kw)
