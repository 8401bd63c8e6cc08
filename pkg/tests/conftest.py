import numpy as np
import pytest

from metricadv.diffnet import EmbeddingNetwork, dense
from metricadv.embedding import LabeledImage, ReferenceSet
from metricadv.synth import SynthSpec
from metricadv.transfer import build_experiment


def identity_net(dim: int) -> EmbeddingNetwork:
    """f(x) = x on R^dim, as a single dense layer."""
    params = np.concatenate([np.eye(dim).ravel(), np.zeros(dim)])
    return EmbeddingNetwork([dense(dim)], (dim,), params)


def point_gallery(points: dict) -> ReferenceSet:
    """Reference set whose members are given points (for identity nets)."""
    items = [LabeledImage(np.atleast_1d(np.asarray(p, dtype=float)), label)
             for label, pts in points.items() for p in pts]
    return ReferenceSet(items)


@pytest.fixture(scope="session")
def toy_experiment():
    """10 synthetic identities, trained surrogate + two calibrated victims."""
    return build_experiment(SynthSpec(identities=10, per_identity=20), seed=0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_registry import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
