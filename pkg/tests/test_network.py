import numpy as np
import pytest

from dfalign.autodiff import ShapeError
from dfalign.network import (Architecture, StageNetwork, load_checkpoint, network_grad_check,
                             save_checkpoint)

import oracles


@pytest.fixture(scope="module")
def head_errors():
    return oracles.head_gradient_errors(instances=20, seed=2)


@pytest.mark.parametrize("head", oracles.HEADS)
def test_head_gradients_match_finite_differences(head, head_errors):
    worst, checked = head_errors
    assert checked[head] > 0
    assert worst[head] < 1e-4


def tiny(aux_dim=0, dtype="float64"):
    return Architecture(input_size=16, channels=(2, 4), kernel=3, dense=8, aux_dim=aux_dim,
                        n_landmarks=8, n_clusters=5, dtype=dtype)


def test_output_shapes():
    net = StageNetwork.initialize(tiny(aux_dim=16), np.random.default_rng(0))
    pos, vis, lab = net.predict(np.zeros((3, 16, 16)), np.zeros((3, 16)))
    assert pos.shape == (3, 16) and vis.shape == (3, 8, 3) and lab.shape == (3, 5)


def test_param_shapes_flat_features():
    arch = tiny(aux_dim=4)
    assert arch.flat_features == 4 * 4 * 4
    assert arch.param_shapes()["fc.w"] == (68, 8)


def test_input_validation():
    net = StageNetwork.initialize(tiny(aux_dim=2), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 8, 8)), np.zeros((1, 2)))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 16, 16)))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 16, 16)), np.zeros((1, 3)))
    plain = StageNetwork.initialize(tiny(), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        plain.forward(np.zeros((1, 16, 16)), np.zeros((1, 3)))


def test_architecture_validation():
    with pytest.raises(ValueError):
        Architecture(input_size=18, channels=(2, 4))
    with pytest.raises(ValueError):
        Architecture(kernel=4)
    with pytest.raises(ValueError):
        Architecture(dtype="float16")


def test_predict_batches_agree_with_single_forward():
    rng = np.random.default_rng(1)
    net = StageNetwork.initialize(tiny(), rng)
    images = rng.uniform(size=(5, 16, 16))
    full = net.forward(images).positions.value
    batched = net.predict(images, batch_size=2)[0]
    assert np.allclose(full, batched)


def test_initialization_is_seeded():
    a = StageNetwork.initialize(tiny(), np.random.default_rng(7))
    b = StageNetwork.initialize(tiny(), np.random.default_rng(7))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert all(np.all(v == 0) for k, v in a.params.items() if k.endswith(".b"))


def test_grad_check_on_full_size_landmark_heads():
    rng = np.random.default_rng(4)
    net = StageNetwork.initialize(tiny(dtype="float64"), rng)
    err, n = network_grad_check(net, rng.uniform(size=(2, 16, 16)), entries_per_param=2, rng=rng)
    assert n > 0 and err < 1e-4


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_checkpoint_round_trip(tmp_path, dtype):
    net = StageNetwork.initialize(tiny(aux_dim=3, dtype=dtype), np.random.default_rng(2))
    save_checkpoint(net, tmp_path / "n.dfanet")
    back = load_checkpoint(tmp_path / "n.dfanet")
    assert back.arch == net.arch
    assert all(np.array_equal(back.params[k], net.params[k]) for k in net.params)
    assert back.params["fc.w"].dtype == np.dtype(dtype)


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.dfanet"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(p)
