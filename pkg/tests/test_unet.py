import numpy as np
import pytest

from epvs.errors import ConfigError, DomainError, ShapeError
from epvs.preprocess import SliceSample
from epvs.unet import (
    TrainConfig,
    UNetConfig,
    UNetModel,
    forward,
    load_checkpoint,
    loss_and_grad,
    parameter_shapes,
    predict_volume,
    save_checkpoint,
    train,
)
from epvs.unet import layers as L
from epvs.unet.checkpoint import CheckpointError, decode_checkpoint, encode_checkpoint
from epvs.unet.model import loss_only
from epvs.unet.training import inverse_frequency_weights, random_crop
from epvs.volume_io import Volume

from oracles import max_relative_grad_error, numeric_gradient


def tiny(norm=True, n=2, seed=0):
    model = UNetModel.initialize(UNetConfig(in_channels=n, depth=1, base_filters=2, normalization=norm, seed=seed))
    # zero biases put pre-activations of dead neighbourhoods exactly on the ReLU kink,
    # where finite differences are meaningless; move them off it
    rng = np.random.default_rng(seed + 100)
    for name, p in model.parameters.items():
        if not name.endswith(".weight"):
            p += rng.uniform(-0.2, 0.2, size=p.shape)
    return model


def tiny_batch(seed=0, n=2, b=2, size=8):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(b, n, size, size))
    y = (rng.random((b, size, size)) < 0.3).astype(np.int64)
    return x, y


@pytest.mark.parametrize("norm", [True, False])
def test_gradient_check(norm):
    model = tiny(norm)
    x, y = tiny_batch()
    err, where = max_relative_grad_error(model, x, y, (1.0, 2.5), loss_and_grad, loss_only)
    assert err < 1e-4, (err, where)


def test_layer_gradients_individually():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 4, 6, 3))
    w = rng.normal(size=(5, 3, 3, 3))
    b = rng.normal(size=5)
    g = rng.normal(size=(2, 4, 6, 5))
    out, cache = L.conv3x3_forward(x, w, b)
    dx, dw, db = L.conv3x3_backward(g, cache)
    f = lambda: float((L.conv3x3_forward(x, w, b)[0] * g).sum())  # noqa: E731
    assert np.allclose(dx, numeric_gradient(f, x), atol=1e-6)
    assert np.allclose(dw, numeric_gradient(f, w), atol=1e-6)
    assert np.allclose(db, numeric_gradient(f, b), atol=1e-6)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 5, 4, 2))
    w = rng.normal(size=(3, 2, 3, 3))
    out, _ = L.conv3x3_forward(x, w)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 4, 3))
    for i in range(5):
        for j in range(4):
            for o in range(3):
                ref[0, i, j, o] = sum(
                    xp[0, i + a, j + c, ch] * w[o, ch, a, c] for a in range(3) for c in range(3) for ch in range(2)
                )
    assert np.allclose(out, ref)


def test_forward_shape_and_softmax():
    model = UNetModel.initialize(UNetConfig(in_channels=4, depth=3, base_filters=4))
    x = np.random.default_rng(3).normal(size=(2, 4, 64, 64))
    out = forward(model, x)
    assert out.shape == (2, 2, 64, 64)
    p = L.softmax(out, axis=1)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_zero_network_constant_logits():
    model = tiny()
    for k in model.parameters:
        model.parameters[k][...] = 0.0
    out = forward(model, np.random.default_rng(4).normal(size=(2, 2, 8, 8)))
    assert np.all(out == out[0, :, 0, 0][None, :, None, None])


def test_loss_saturation_and_uniform():
    y = np.random.default_rng(5).integers(0, 2, size=(2, 4, 4))
    logits = np.where(y[..., None] == np.arange(2), 50.0, -50.0)
    assert L.weighted_cross_entropy(logits, y, np.ones(2))[0] < 1e-3
    assert abs(L.weighted_cross_entropy(np.zeros((2, 4, 4, 2)), y, np.ones(2))[0] - np.log(2)) < 1e-9


def test_shape_errors():
    model = tiny()
    with pytest.raises(ShapeError):
        forward(model, np.zeros((1, 3, 8, 8)))
    with pytest.raises(ShapeError):
        forward(model, np.zeros((1, 2, 7, 8)))
    with pytest.raises(DomainError):
        loss_and_grad(model, np.zeros((1, 2, 8, 8)), np.full((1, 8, 8), 2))
    with pytest.raises(ConfigError):
        UNetConfig(in_channels=5)


def _closed_form_count(n, depth, base, k=2, norm=True):
    """Parameter count from the architecture formula, written out independently."""
    total = 0
    c_in = n
    for lvl in range(depth + 1):
        c = base * 2**lvl
        total += 9 * c_in * c + 9 * c * c + (4 * c if norm else 2 * c)
        c_in = c
    for lvl in range(depth):
        c = base * 2**lvl
        total += 2 * c * c * 4 + c  # up-conv from 2c to c
        total += 9 * 2 * c * c + 9 * c * c + (4 * c if norm else 2 * c)
    return total + base * k + k


@pytest.mark.parametrize("n", [1, 2, 3, 4])
@pytest.mark.parametrize("depth", [1, 2, 3])
@pytest.mark.parametrize("base", [2, 8])
def test_shape_audit_grid(n, depth, base):
    cfg = UNetConfig(in_channels=n, depth=depth, base_filters=base)
    model = UNetModel.initialize(cfg)
    model.audit()
    assert model.num_parameters() == _closed_form_count(n, depth, base)
    assert sum(int(np.prod(s)) for s in parameter_shapes(cfg).values()) == model.num_parameters()


def test_audit_rejects_bad_shapes():
    model = tiny()
    params = dict(model.parameters)
    params["head.bias"] = np.zeros(3)
    with pytest.raises(ShapeError):
        UNetModel(model.config, params, model.buffers)


def test_single_channel_is_same_code_path():
    m1 = UNetModel.initialize(UNetConfig(in_channels=1, depth=1, base_filters=2))
    x = np.random.default_rng(6).normal(size=(1, 1, 8, 8))
    # an n=2 model whose second input channel has zero weights behaves identically
    m2 = UNetModel.initialize(UNetConfig(in_channels=2, depth=1, base_filters=2))
    for k, v in m1.parameters.items():
        if k == "enc0.conv1.weight":
            m2.parameters[k][:, :1] = v
            m2.parameters[k][:, 1:] = 0
        else:
            m2.parameters[k][...] = v
    x2 = np.concatenate([x, np.random.default_rng(7).normal(size=x.shape)], axis=1)
    assert np.allclose(forward(m1, x), forward(m2, x2), atol=1e-12)


def _samples(n, seed, size=16, subject="a"):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        lab = np.zeros((size, size), dtype=np.int64)
        r, c = rng.integers(2, size - 3, size=2)
        lab[r:r + 2, c:c + 2] = 1
        img = rng.normal(0, 0.1, size=(1, size, size)) + lab
        out.append(SliceSample(img, lab, subject, i))
    return out


def test_train_deterministic_and_history():
    cfg = UNetConfig(in_channels=1, depth=1, base_filters=2, seed=3)
    tc = TrainConfig(epochs=3, batch_size=4, seed=5, patience=10)
    tr, va = _samples(8, 0), _samples(4, 1, subject="b")
    m1, h1 = train(cfg, tc, tr, va)
    m2, h2 = train(cfg, tc, tr, va)
    assert all(np.array_equal(m1.parameters[k], m2.parameters[k]) for k in m1.parameters)
    assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss
    assert len(h1.val_loss) <= tc.epochs
    assert h1.val_loss[h1.best_epoch] == min(h1.val_loss)


def test_train_errors():
    cfg = UNetConfig(in_channels=1, depth=1, base_filters=2)
    with pytest.raises(ConfigError):
        train(cfg, TrainConfig(epochs=1), [])
    with pytest.raises(ConfigError):
        train(cfg, TrainConfig(epochs=1), _samples(2, 0, subject="x"), _samples(2, 1, subject="x"))
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)


def test_overfit_single_sample():
    s = _samples(1, 9, size=32)
    cfg = UNetConfig(in_channels=1, depth=2, base_filters=4, seed=0)
    _, hist = train(cfg, TrainConfig(epochs=200, batch_size=1, learning_rate=1e-2, patience=200), s)
    assert hist.train_loss[-1] < 0.05


def test_early_stopping_truncates():
    cfg = UNetConfig(in_channels=1, depth=1, base_filters=2)
    tr = _samples(4, 0)
    # validation labels unrelated to the input: validation loss stops improving quickly
    rng = np.random.default_rng(1)
    va = [SliceSample(rng.normal(size=(1, 16, 16)), (rng.random((16, 16)) < 0.5).astype(int), "v", 0)]
    _, hist = train(cfg, TrainConfig(epochs=60, batch_size=4, learning_rate=5e-2, patience=2), tr, va)
    assert len(hist.val_loss) < 60


def test_inverse_frequency_weights():
    w = inverse_frequency_weights([SliceSample(np.zeros((1, 2, 2)), np.array([[0, 0], [0, 1]]))])
    assert np.allclose(w, (4 / 6, 4 / 2))


def test_random_crop_foreground():
    s = _samples(1, 2, size=16)[0]
    rng = np.random.default_rng(0)
    for _ in range(10):
        c = random_crop(s, 8, 1.0, rng)
        assert c.label.shape == (8, 8) and c.label.any()


def test_predict_volume_geometry():
    cfg = UNetConfig(in_channels=2, depth=2, base_filters=2)
    model = UNetModel.initialize(cfg)
    rng = np.random.default_rng(8)
    aff = np.diag([2.0, 2.0, 2.0, 1.0])
    vols = [Volume(rng.normal(size=(91, 109, 3)), (2, 2, 2), aff) for _ in range(2)]
    prob, binary = predict_volume(model, vols)
    assert prob.dims == binary.dims == (91, 109, 3)
    assert np.array_equal(prob.affine, aff)
    assert prob.data.min() >= 0 and prob.data.max() <= 1
    assert set(np.unique(binary.data)) <= {0.0, 1.0}
    assert np.array_equal(binary.data, (prob.data > 0.5).astype(float))
    with pytest.raises(ShapeError):
        predict_volume(model, vols[:1])


def test_checkpoint_roundtrip(tmp_path):
    model = tiny()
    model.buffers["enc0.norm1.running_mean"][:] = 0.25
    p = tmp_path / "m.ckpt"
    save_checkpoint(model, p)
    back = load_checkpoint(p)
    assert back.config == model.config
    assert all(np.array_equal(back.parameters[k], v) for k, v in model.parameters.items())
    assert all(np.array_equal(back.buffers[k], v) for k, v in model.buffers.items())
    blob = encode_checkpoint(model)
    assert blob[:8] == b"EPVSUNET"
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOTMAGIC" + blob[8:])
    with pytest.raises(Exception):
        decode_checkpoint(blob[:-3])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob + b"\x00")
