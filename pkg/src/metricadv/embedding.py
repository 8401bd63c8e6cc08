"""Metric-embedding training and centroid inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

from .diffnet import ArgumentError, EmbeddingNetwork, forward

log = logging.getLogger(__name__)

Label = Hashable


class DatasetError(ValueError):
    pass


class LookupFailure(KeyError):
    """Unknown label or empty reference set."""

    def __str__(self):
        return str(self.args[0]) if self.args else "lookup failure"


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray
    label: Label


class ReferenceSet:
    """Labeled gallery with a label -> member-position index."""

    def __init__(self, items: Iterable[LabeledImage]):
        self.items = tuple(items)
        index: dict = {}
        for pos, item in enumerate(self.items):
            index.setdefault(item.label, []).append(pos)
        self.index = {k: tuple(v) for k, v in index.items()}

    @classmethod
    def from_arrays(cls, images: Sequence[np.ndarray], labels: Sequence[Label]) -> "ReferenceSet":
        return cls(LabeledImage(np.asarray(x, dtype=np.float64), y) for x, y in zip(images, labels))

    def __len__(self):
        return len(self.items)

    def __contains__(self, label):
        return label in self.index

    @property
    def labels(self) -> list:
        return sorted(self.index)

    def members(self, label: Label) -> np.ndarray:
        if label not in self.index:
            raise LookupFailure(f"label {label!r} not in reference set")
        return np.stack([self.items[i].pixels for i in self.index[label]])

    def merged(self, other: "ReferenceSet") -> "ReferenceSet":
        return ReferenceSet(self.items + other.items)


class EmbeddedGallery:
    """Gallery embeddings and centroids under one network, computed once."""

    def __init__(self, net: EmbeddingNetwork, ref: ReferenceSet):
        if len(ref) == 0:
            raise LookupFailure("empty reference set")
        self.net = net
        self.ref = ref
        self.labels = ref.labels
        self.embeddings = {y: net.forward_batch(ref.members(y)) for y in self.labels}
        self.centroids = np.stack([self.embeddings[y].mean(axis=0) for y in self.labels])

    def __contains__(self, label):
        return label in self.embeddings

    def members(self, label: Label) -> np.ndarray:
        try:
            return self.embeddings[label]
        except KeyError:
            raise LookupFailure(f"label {label!r} not in reference set") from None

    def centroid(self, label: Label) -> np.ndarray:
        if label not in self.embeddings:
            raise LookupFailure(f"label {label!r} not in reference set")
        return self.centroids[self.labels.index(label)]

    def ranking(self, emb: np.ndarray) -> list[tuple[float, Label]]:
        dists = np.linalg.norm(self.centroids - emb, axis=1)
        # stable tie-break on label id
        return sorted(zip(dists.tolist(), self.labels), key=lambda t: (t[0], t[1]))

    def predict_embedding(self, emb: np.ndarray) -> Label:
        return self.ranking(emb)[0][1]

    def top_n_embedding(self, emb: np.ndarray, n: int) -> list:
        if not 1 <= n <= len(self.labels):
            raise ArgumentError(f"n={n} outside [1, {len(self.labels)}]")
        return [y for _, y in self.ranking(emb)[:n]]


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "triplet"
    margin: float = 0.2
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("triplet", "contrastive"):
            raise ArgumentError(f"unknown loss {self.loss!r}")
        if self.margin <= 0:
            raise ArgumentError("margin must be positive")
        if self.lr <= 0:
            raise ArgumentError("learning rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ArgumentError("epochs >= 0 and batch_size >= 1 required")


# -- distances and losses -----------------------------------------------------

def pair_distance(net: EmbeddingNetwork, x1: np.ndarray, x2: np.ndarray) -> float:
    return float(np.linalg.norm(forward(net, x1) - forward(net, x2)))


def contrastive_loss(net, sample, other, gamma: float) -> float:
    """Squared distance for same-label pairs, ``[gamma - d^2]_+`` otherwise."""
    (x, y), (x1, y1) = sample, other
    d2 = pair_distance(net, x, x1) ** 2
    if y == y1:
        return d2
    return max(gamma - d2, 0.0)


def triplet_loss(net, anchor, positive, negative, gamma: float) -> float:
    (x, y), (x1, y1), (x2, y2) = anchor, positive, negative
    if y1 != y:
        raise ArgumentError("positive must share the anchor label")
    if y2 == y:
        raise ArgumentError("negative must have a different label than the anchor")
    d1 = pair_distance(net, x, x1) ** 2
    d2 = pair_distance(net, x, x2) ** 2
    return max(d1 - d2 + gamma, 0.0)


def _triplet_batch(ea, ep, en, gamma):
    dp = ea - ep
    dn = ea - en
    raw = np.sum(dp * dp, axis=1) - np.sum(dn * dn, axis=1) + gamma
    active = (raw > 0.0)[:, None]
    ga = 2.0 * (en - ep) * active
    gp = -2.0 * dp * active
    gn = 2.0 * dn * active
    return np.maximum(raw, 0.0), ga, gp, gn


def _contrastive_batch(e1, e2, same, gamma):
    diff = e1 - e2
    d2 = np.sum(diff * diff, axis=1)
    neg_active = (~same) & (gamma - d2 > 0.0)
    loss = np.where(same, d2, np.maximum(gamma - d2, 0.0))
    scale = np.where(same, 2.0, np.where(neg_active, -2.0, 0.0))[:, None]
    g1 = scale * diff
    return loss, g1, -g1


# -- training ----------------------------------------------------------------

def _check_dataset(dataset: Sequence[LabeledImage], loss: str) -> dict:
    by_label: dict = {}
    for i, item in enumerate(dataset):
        by_label.setdefault(item.label, []).append(i)
    if len(by_label) < 2:
        raise DatasetError("training needs at least two labels")
    if loss == "triplet" and min(len(v) for v in by_label.values()) < 2:
        raise DatasetError("triplet mining needs at least two images per label")
    return {k: np.array(v) for k, v in by_label.items()}


def train(net: EmbeddingNetwork, dataset: Sequence[LabeledImage], cfg: TrainConfig,
          history: list | None = None) -> EmbeddingNetwork:
    """Train a copy of ``net`` with plain SGD on uniformly mined tuples.

    Every image serves once per epoch as an anchor. Mean per-batch losses of
    each epoch (measured before the update) are appended to ``history``.
    """
    by_label = _check_dataset(dataset, cfg.loss)
    out = net.copy()
    if cfg.epochs == 0:
        return out
    xs = np.stack([np.asarray(item.pixels, dtype=np.float64) for item in dataset])
    labels = [item.label for item in dataset]
    keys = sorted(by_label)
    lab_idx = np.array([keys.index(y) for y in labels])
    others = {k: np.concatenate([by_label[o] for o in keys if o != k]) for k in keys}
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)

    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            anchors = order[start:start + cfg.batch_size]
            if cfg.loss == "triplet":
                pos = np.empty_like(anchors)
                neg = np.empty_like(anchors)
                for j, a in enumerate(anchors):
                    same = by_label[keys[lab_idx[a]]]
                    p = a
                    while p == a:
                        p = same[rng.integers(len(same))]
                    pos[j] = p
                    pool = others[keys[lab_idx[a]]]
                    neg[j] = pool[rng.integers(len(pool))]
                batch = np.concatenate([anchors, pos, neg])
                emb, cache = out.forward_batch(xs[batch], keep=True)
                b = len(anchors)
                loss, ga, gp, gn = _triplet_batch(emb[:b], emb[b:2 * b], emb[2 * b:], cfg.margin)
                up = np.concatenate([ga, gp, gn]) / b
            else:
                partner = np.empty_like(anchors)
                for j, a in enumerate(anchors):
                    key = keys[lab_idx[a]]
                    pool = by_label[key] if rng.random() < 0.5 else others[key]
                    partner[j] = pool[rng.integers(len(pool))]
                batch = np.concatenate([anchors, partner])
                emb, cache = out.forward_batch(xs[batch], keep=True)
                b = len(anchors)
                same = lab_idx[anchors] == lab_idx[partner]
                loss, g1, g2 = _contrastive_batch(emb[:b], emb[b:], same, cfg.margin)
                up = np.concatenate([g1, g2]) / b
            _, grad = out.backward_batch(cache, up)
            out.params -= cfg.lr * grad
            losses.append(float(loss.mean()))
        epoch_loss = float(np.mean(losses))
        log.debug("epoch %d loss %.6f", epoch, epoch_loss)
        if history is not None:
            history.append(epoch_loss)
    return out


# -- inference ---------------------------------------------------------------

def centroid(net: EmbeddingNetwork, ref: ReferenceSet, label: Label) -> np.ndarray:
    return net.forward_batch(ref.members(label)).mean(axis=0)


def predict(net: EmbeddingNetwork, ref: ReferenceSet, x: np.ndarray) -> Label:
    """Label of the nearest centroid (ties go to the smaller label)."""
    return EmbeddedGallery(net, ref).predict_embedding(forward(net, x))


def top_n(net: EmbeddingNetwork, ref: ReferenceSet, x: np.ndarray, n: int) -> list:
    return EmbeddedGallery(net, ref).top_n_embedding(forward(net, x), n)


def accuracy(net: EmbeddingNetwork, ref: ReferenceSet, samples: Sequence[LabeledImage]) -> float:
    """Top-1 accuracy of centroid inference on ``samples``."""
    if not samples:
        raise DatasetError("no samples to score")
    gal = EmbeddedGallery(net, ref)
    embs = net.forward_batch(np.stack([s.pixels for s in samples]))
    hits = sum(gal.predict_embedding(e) == s.label for e, s in zip(embs, samples))
    return hits / len(samples)
