import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import identity_net, point_gallery
from metricadv.diffnet import ArgumentError
from metricadv.embedding import (DatasetError, EmbeddedGallery, LabeledImage, LookupFailure,
                                 ReferenceSet, TrainConfig, accuracy, centroid, contrastive_loss,
                                 pair_distance, predict, top_n, train, triplet_loss)
from metricadv.models import make_network, train_config
from metricadv.synth import SynthSpec, gen_identities, split


def _pt(*v):
    return np.array(v, dtype=float)


# -- losses ------------------------------------------------------------------------

def test_contrastive_examples():
    net = identity_net(2)
    assert contrastive_loss(net, (_pt(0, 0), "a"), (_pt(2, 0), "a"), 1.0) == pytest.approx(4.0)
    assert contrastive_loss(net, (_pt(0, 0), "a"), (_pt(1, 0), "b"), 3.0) == pytest.approx(2.0)
    assert contrastive_loss(net, (_pt(0, 0), "a"), (_pt(3, 0), "b"), 3.0) == 0.0


@pytest.mark.parametrize("d1,d2,gamma,expected", [(1, 2, 1, 0.0), (2, 1, 1, 4.0), (1.5, 1.5, 0.5, 0.5)])
def test_triplet_examples(d1, d2, gamma, expected):
    net = identity_net(2)
    got = triplet_loss(net, (_pt(0, 0), "a"), (_pt(d1, 0), "a"), (_pt(0, d2), "b"), gamma)
    assert got == pytest.approx(expected, abs=1e-12)


def test_triplet_rejects_same_label_negative():
    net = identity_net(1)
    with pytest.raises(ArgumentError):
        triplet_loss(net, (_pt(0), "a"), (_pt(1), "a"), (_pt(2), "a"), 1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6), st.floats(0.01, 2.0))
def test_triplet_zero_iff_margin_satisfied(vals, gamma):
    net = identity_net(2)
    x, p, n = _pt(*vals[:2]), _pt(*vals[2:4]), _pt(*vals[4:])
    loss = triplet_loss(net, (x, 0), (p, 0), (n, 1), gamma)
    d1, d2 = np.sum((x - p) ** 2), np.sum((x - n) ** 2)
    assert (loss == 0.0) == (d1 + gamma <= d2)
    assert loss >= 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(0.01, 5.0), st.booleans())
def test_contrastive_nonnegative(vals, gamma, same):
    net = identity_net(2)
    assert contrastive_loss(net, (_pt(*vals[:2]), 0), (_pt(*vals[2:]), 0 if same else 1), gamma) >= 0.0


# -- distances -------------------------------------------------------------------

def test_pair_distance_examples():
    net = identity_net(2)
    assert pair_distance(net, _pt(0.3, 0.1), _pt(0.3, 0.1)) == 0.0
    assert pair_distance(net, _pt(0, 0), _pt(3, 4)) == pytest.approx(5.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_pair_distance_metric_properties(seed):
    rng = np.random.default_rng(seed)
    net = make_network("mlp", (4, 4, 3), seed=seed)
    a, b, c = (rng.random((4, 4, 3)) for _ in range(3))
    ab, ba = pair_distance(net, a, b), pair_distance(net, b, a)
    assert ab == ba
    assert ab <= pair_distance(net, a, c) + pair_distance(net, c, b) + 1e-12
    assert 0.0 <= ab <= 2.0 + 1e-12  # unit-norm embeddings


# -- centroids, predict, top-n -------------------------------------------------------

def test_centroid_examples():
    net = identity_net(2)
    ref = point_gallery({"a": [(1, 0), (3, 0)], "b": [(5, 5)]})
    np.testing.assert_allclose(centroid(net, ref, "a"), [2.0, 0.0])
    np.testing.assert_allclose(centroid(net, ref, "b"), [5.0, 5.0])
    with pytest.raises(LookupFailure):
        centroid(net, ref, "zz")


def test_centroid_matches_elementwise_mean():
    rng = np.random.default_rng(0)
    net = make_network("mlp", (4, 4, 3), seed=1)
    imgs = [rng.random((4, 4, 3)) for _ in range(5)]
    ref = ReferenceSet.from_arrays(imgs, ["x"] * 5)
    embs = [net(x) for x in imgs]
    manual = [sum(e[j] for e in embs) / 5 for j in range(net.embedding_dim)]
    np.testing.assert_allclose(centroid(net, ref, "x"), manual, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 5))
def test_centroid_of_union(seed, na, nb):
    rng = np.random.default_rng(seed)
    net = make_network("mlp", (4, 4, 3), seed=seed)
    A = ReferenceSet.from_arrays([rng.random((4, 4, 3)) for _ in range(na)], ["y"] * na)
    B = ReferenceSet.from_arrays([rng.random((4, 4, 3)) for _ in range(nb)], ["y"] * nb)
    lhs = (na + nb) * centroid(net, A.merged(B), "y")
    rhs = na * centroid(net, A, "y") + nb * centroid(net, B, "y")
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_predict_exact_centroid_and_tie_break():
    net = identity_net(2)
    ref = point_gallery({"b": [(0, 1)], "a": [(0, -1)], "c": [(4, 4)]})
    assert predict(net, ref, _pt(4, 4)) == "c"
    assert predict(net, ref, _pt(0, 0)) == "a"  # equidistant to a and b


def _ten_label_setup(seed):
    rng = np.random.default_rng(seed)
    net = make_network("mlp", (4, 4, 3), seed=seed)
    imgs = [rng.random((4, 4, 3)) for _ in range(30)]
    labels = [f"L{k}" for k in range(10) for _ in range(3)]
    return net, ReferenceSet.from_arrays(imgs, labels), rng


def test_predict_and_top_n_match_brute_force():
    net, ref, rng = _ten_label_setup(5)
    for _ in range(10):
        x = rng.random((4, 4, 3))
        e = net(x)
        dists = {y: float(np.linalg.norm(e - centroid(net, ref, y))) for y in ref.labels}
        order = sorted(dists, key=lambda y: (dists[y], y))
        assert predict(net, ref, x) == order[0]
        assert top_n(net, ref, x, 3) == order[:3]
        assert top_n(net, ref, x, 1) == [predict(net, ref, x)]
        assert sorted(top_n(net, ref, x, 10)) == sorted(ref.labels)


def test_top_n_range():
    net, ref, rng = _ten_label_setup(0)
    x = rng.random((4, 4, 3))
    for bad in (0, 11):
        with pytest.raises(ArgumentError):
            top_n(net, ref, x, bad)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_predict_invariant_under_relabeling(seed):
    net, ref, rng = _ten_label_setup(seed)
    perm = dict(zip(ref.labels, np.random.default_rng(seed + 1).permutation(
        [f"M{k}" for k in range(10)]).tolist()))
    relabeled = ReferenceSet(LabeledImage(it.pixels, perm[it.label]) for it in ref.items)
    x = rng.random((4, 4, 3))
    assert perm[predict(net, ref, x)] == predict(net, relabeled, x)


def test_empty_reference_set():
    with pytest.raises(LookupFailure):
        EmbeddedGallery(identity_net(1), ReferenceSet([]))


# -- training ----------------------------------------------------------------------

def _two_identities():
    data = gen_identities(SynthSpec(identities=2, per_identity=20, seed=4))
    return split(data, 10, 5)


def test_train_separates_two_identities():
    tr, gal, probe = _two_identities()
    cfg = train_config("conv_small", seed=0)
    history = []
    net = train(make_network("conv_small", (16, 16, 3), seed=0), tr, cfg, history=history)
    assert accuracy(net, ReferenceSet(gal), probe) >= 0.95
    assert len(history) == cfg.epochs
    assert history[-1] <= history[0]


def test_train_zero_epochs_and_determinism():
    tr, _, _ = _two_identities()
    net0 = make_network("mlp", (16, 16, 3), seed=3)
    unchanged = train(net0, tr, TrainConfig(epochs=0))
    assert unchanged.params.tobytes() == net0.params.tobytes()
    cfg = TrainConfig(epochs=3, seed=9)
    a, b = train(net0, tr, cfg), train(net0, tr, cfg)
    assert a.params.tobytes() == b.params.tobytes()
    assert not np.array_equal(a.params, net0.params)


def test_train_contrastive_runs_and_decreases():
    tr, gal, probe = _two_identities()
    history = []
    train(make_network("mlp", (16, 16, 3), seed=0), tr,
          TrainConfig(loss="contrastive", margin=1.0, epochs=10, lr=0.05), history=history)
    assert history[-1] <= history[0]


def test_train_dataset_errors():
    net = identity_net(2)
    one_label = [LabeledImage(_pt(0, 0), "a"), LabeledImage(_pt(1, 0), "a")]
    with pytest.raises(DatasetError):
        train(net, one_label, TrainConfig(epochs=1))
    singletons = [LabeledImage(_pt(0, 0), "a"), LabeledImage(_pt(1, 0), "b")]
    with pytest.raises(DatasetError):
        train(net, singletons, TrainConfig(epochs=1))


def test_train_config_validation():
    for kw in ({"margin": 0}, {"lr": -1}, {"loss": "center"}):
        with pytest.raises(ArgumentError):
            TrainConfig(**kw)
