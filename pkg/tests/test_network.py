import numpy as np
import pytest

from pdecnn.network import (DynamicsSpec, Network, cifar100_spec, cifar10_spec, count_weights, init_weights,
                            stl10_spec)
from pdecnn.tensor import ShapeError, make_rng

REFERENCE_COUNTS = {
    (stl10_spec, "parabolic"): 618554, (stl10_spec, "second_order"): 618554, (stl10_spec, "hamiltonian"): 324794,
    (cifar10_spec, "parabolic"): 502570, (cifar10_spec, "second_order"): 502570, (cifar10_spec, "hamiltonian"): 264106,
    (cifar100_spec, "parabolic"): 652484, (cifar100_spec, "second_order"): 652484,
    (cifar100_spec, "hamiltonian"): 362180,
}


@pytest.mark.parametrize("make,family", list(REFERENCE_COUNTS))
def test_weight_counts(make, family):
    spec = make(family)
    assert count_weights(spec) == REFERENCE_COUNTS[(make, family)]
    assert init_weights(spec, make_rng(0)).size == count_weights(spec)


def test_stl10_scores_shape():
    net = Network.create(stl10_spec("parabolic"), 0)
    assert net.predict(make_rng(0).standard_normal((1, 3, 96, 96))).shape == (1, 10)


def test_cifar10_scores_shape():
    net = Network.create(cifar10_spec("hamiltonian"), 0)
    assert net.predict(make_rng(0).standard_normal((2, 3, 32, 32))).shape == (2, 10)


def test_zero_weights_give_bias_scores():
    spec = DynamicsSpec(widths=(4, 8), image_size=8, n_classes=3)
    w = init_weights(spec, make_rng(0)).zeros_like()
    w["cls.mu"][...] = [0.1, -0.2, 0.3]
    net = Network(spec, w)
    s = net.forward(make_rng(1).standard_normal((4, 3, 8, 8))).scores
    assert np.allclose(s, [0.1, -0.2, 0.3])


def test_init_respects_box_and_zero_classifier():
    w = init_weights(cifar10_spec("parabolic"), make_rng(0))
    assert all(np.max(np.abs(w[k])) <= 1 for k in w.block_stencil_keys())
    assert not np.any(w["cls.W"]) and not np.any(w["cls.mu"])


def test_flat_round_trip():
    w = init_weights(DynamicsSpec(widths=(4, 8), image_size=8), make_rng(0))
    flat = w.flat()
    w2 = w.zeros_like()
    w2.set_flat(flat)
    assert all(np.array_equal(w[k], w2[k]) for k in w)


def test_spec_validation():
    with pytest.raises(ValueError):
        DynamicsSpec(family="elliptic")
    with pytest.raises(ValueError):
        DynamicsSpec(family="hamiltonian", widths=(3, 6))
    with pytest.raises(ShapeError):
        DynamicsSpec(widths=(2, 4, 8), image_size=6)
    net = Network.create(DynamicsSpec(widths=(4,), image_size=4), 0)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 1, 4, 4)))
