import numpy as np
import pytest

from brainseg import losses, model, ops
from brainseg.gradcheck import rel_error


@pytest.fixture(scope="module")
def default_model():
    return model.build(model.UNetConfig())


def test_default_parameter_count(default_model):
    assert default_model.param_count() == 31_030_788
    assert model.closed_form_count(model.UNetConfig()) == 31_030_788


def test_minimal_config_count():
    cfg = model.UNetConfig(base_channels=1, depth=1, in_channels=1, num_classes=2)
    shapes = model.layer_shapes(cfg)
    # enc1 x2, bottom x2, up1, dec1 x2, final: eight layers, weight + bias each
    assert len(shapes) == 16
    # by hand: enc 10+10, bottom 20+38, up 9, dec 19+10, final 4
    assert model.closed_form_count(cfg) == 120
    assert model.param_count(model.build(cfg)) == 120


@pytest.mark.parametrize("base, depth", [(2, 2), (3, 3), (8, 4), (5, 1)])
def test_closed_form_matches_enumeration(base, depth):
    cfg = model.UNetConfig(base_channels=base, depth=depth)
    assert model.closed_form_count(cfg) == model.param_count(model.build(cfg))


def test_empty_parameter_map():
    assert model.param_count({}) == 0


def test_canonical_names():
    names = list(model.layer_shapes(model.UNetConfig()))
    assert names[:2] == ["enc1.conv1.weight", "enc1.conv1.bias"]
    assert "up4.weight" in names and "bottom.conv2.bias" in names
    assert names[-2:] == ["final.weight", "final.bias"]


def test_build_deterministic_and_glorot():
    cfg = model.UNetConfig(base_channels=4, depth=2, seed=42)
    a, b = model.build(cfg), model.build(cfg)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    c = model.build(model.UNetConfig(base_channels=4, depth=2, seed=43))
    assert not np.array_equal(a.params["enc1.conv1.weight"], c.params["enc1.conv1.weight"])
    for name, p in a.params.items():
        if name.endswith("bias"):
            assert not p.any()
        else:
            assert np.abs(p).max() <= model.glorot_limit(name, p.shape)


def test_glorot_limit_formula():
    # conv 3x3, 64 -> 128: fan_in 576, fan_out 1152
    assert model.glorot_limit("enc2.conv1.weight", (128, 64, 3, 3)) == pytest.approx(
        np.sqrt(6 / (576 + 1152)))


def test_forward_shape_and_normalisation(default_model):
    x = np.random.default_rng(0).random((2, 1, 64, 64))
    p = default_model.forward(x)
    assert p.shape == (2, 4, 64, 64)
    assert np.abs(p.sum(axis=1) - 1).max() < 1e-6
    assert p.min() >= 0 and p.max() <= 1


def test_fully_convolutional(default_model):
    p = default_model.forward(np.random.default_rng(1).random((1, 1, 128, 128)))
    assert p.shape == (1, 4, 128, 128)


def test_indivisible_input_rejected():
    m = model.build(model.UNetConfig(base_channels=2))
    with pytest.raises(ops.ShapeError, match="multiples of 16"):
        m.forward(np.zeros((1, 1, 40, 64)))


def test_zero_weights_uniform_output():
    m = model.build(model.UNetConfig(base_channels=2, depth=2))
    for k in m.params:
        m.params[k][...] = 0
    p = m.forward(np.random.default_rng(2).random((1, 1, 16, 16)))
    np.testing.assert_array_equal(p, 0.25)


def test_end_to_end_gradient():
    cfg = model.UNetConfig(base_channels=2, depth=2, seed=3)
    m = model.build(cfg, dtype=np.float64)
    rng = np.random.default_rng(0)
    for k in m.params:
        if k.endswith("bias"):
            m.params[k] = rng.uniform(-0.1, 0.1, m.params[k].shape)
    x = rng.uniform(-1, 1, (2, 1, 16, 16))
    t = losses.one_hot(rng.integers(0, 4, (2, 16, 16)), dtype=np.float64)

    def loss():
        return losses.dice_loss(model.forward(m, x), t)[0]

    p, caches = model.forward_train(m, x)
    _, lc = losses.dice_loss(p, t)
    grads = model.backward(m, caches, losses.dice_loss_backward(1.0, lc)[0])
    worst = 0.0
    for name, v in m.params.items():
        flat = v.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-5
            up = loss()
            flat[i] = orig - 1e-5
            down = loss()
            flat[i] = orig
            num[i] = (up - down) / 2e-5
        worst = max(worst, rel_error(grads[name].reshape(-1), num).max())
    assert worst < 1e-3
