import struct

import numpy as np
import pytest
import torch

from conftest import ConstantModel, LookupModel
from nullmark.crypto import transform
from nullmark.data import Split, make_wm_batch
from nullmark.errors import ConfigError, ModelFormatError, SpecError, TrainingError, UnsupportedVersionError
from nullmark.nn import (
    FORMAT_MAGIC,
    Layer,
    ModelSpec,
    TrainConfig,
    build_model,
    composite_loss,
    evaluate_nc,
    load_model,
    mnist_spec,
    save_model,
    small_spec,
    train_epochs,
)


def test_mnist_parameter_count():
    # conv_1: 5*5*1*32 + 32; conv_2: 5*5*32*64 + 64
    # 28 -conv5-> 24 -pool-> 12 -conv5-> 8 -pool-> 4, so fc_1 sees 4*4*64 inputs
    expected = (5 * 5 * 1 * 32 + 32) + (5 * 5 * 32 * 64 + 64) + (4 * 4 * 64 * 512 + 512) + (512 * 10 + 10)
    assert expected == 582_026
    assert build_model(mnist_spec(), 0).num_parameters() == expected


def test_seeded_init_is_identical():
    a, b = build_model(mnist_spec(), 3), build_model(mnist_spec(), 3)
    assert a.weights_hash() == b.weights_hash()
    assert build_model(mnist_spec(), 4).weights_hash() != a.weights_hash()


def test_untrained_is_near_chance(synthetic):
    acc = evaluate_nc(build_model(small_spec(), 0), synthetic.test)
    assert 0.1 - 0.05 <= acc <= 0.1 + 0.05


def test_predict_proba_is_a_distribution(synthetic):
    p = build_model(small_spec(), 0).predict_proba(synthetic.test.inputs[:50])
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)


def test_invalid_specs():
    bad_out = ModelSpec((28, 28, 1), 10, (Layer("dense", "fc", 5, 0, "softmax"),))
    with pytest.raises(SpecError):
        build_model(bad_out)
    conv_after_dense = ModelSpec((28, 28, 1), 10, (
        Layer("dense", "fc_1", 8), Layer("conv", "c", 4, 3), Layer("dense", "out", 10, 0, "softmax")))
    with pytest.raises(SpecError):
        build_model(conv_after_dense)
    too_deep = ModelSpec((4, 4, 1), 2, (Layer("conv", "c", 4, 5), Layer("dense", "out", 2, 0, "softmax")))
    with pytest.raises(SpecError):
        build_model(too_deep)


def test_stub_nc():
    labels = np.arange(1000) % 10
    split = Split(np.random.default_rng(0).random((1000, 4, 4, 1)), labels)
    assert evaluate_nc(ConstantModel(3), split) == pytest.approx(0.1)
    assert evaluate_nc(LookupModel(split), split) == 1.0


def test_config_validation():
    with pytest.raises(ConfigError) as exc:
        TrainConfig(learning_rate=-1, injection_ratio=1.0).validate()
    assert set(exc.value.fields) == {"learning_rate", "injection_ratio"}
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"batch_size": "many"})
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"nonsense": 1})
    assert TrainConfig.from_mapping({"batch_size": "64"}).batch_size == 64


def test_loss_decreases_on_synthetic(synthetic):
    m = build_model(small_spec(), 0)
    train_epochs(m, synthetic.train, [], TrainConfig(learning_rate=0.01, momentum=0.9, max_epochs=3))
    losses = [r.loss for r in m.history]
    assert losses[0] > losses[1] > losses[2]
    assert [r.epoch for r in m.history] == [1, 2, 3]
    assert all(b.seconds >= a.seconds for a, b in zip(m.history, m.history[1:]))


def test_empty_spec_list_is_plain_training(synthetic):
    # the injection ratio has no effect without watermarks
    cfg_a = TrainConfig(learning_rate=0.01, max_epochs=1, injection_ratio=0.0)
    cfg_b = TrainConfig(learning_rate=0.01, max_epochs=1, injection_ratio=0.5)
    a = train_epochs(build_model(small_spec(), 0), synthetic.train, [], cfg_a)
    b = train_epochs(build_model(small_spec(), 0), synthetic.train, [], cfg_b)
    assert a.weights_hash() == b.weights_hash()


def test_training_is_reproducible(synthetic):
    spec = transform(b"sig", 28, 28, 10, 6)
    cfg = TrainConfig(learning_rate=0.01, max_epochs=1)
    a = train_epochs(build_model(small_spec(), 0), synthetic.train, [spec], cfg)
    b = train_epochs(build_model(small_spec(), 0), synthetic.train, [spec], cfg)
    assert a.weights_hash() == b.weights_hash()


def test_divergence_names_epoch(synthetic):
    m = build_model(small_spec(), 0)
    with torch.no_grad():
        m.net.layers["fc_2"].bias.fill_(float("nan"))
    with pytest.raises(TrainingError, match="epoch 1"):
        train_epochs(m, synthetic.train, [], TrainConfig(max_epochs=1))


def test_lr_decay_schedule(synthetic):
    m = build_model(small_spec(), 0)
    cfg = TrainConfig(learning_rate=0.1, decay=0.01, max_epochs=1, batch_size=1000)
    train_epochs(m, synthetic.train, [], cfg)
    # 4 steps: last update used step index 3
    assert m.last_lr == pytest.approx(0.1 / (1 + 0.01 * 3))


# -- gradient check ----------------------------------------------------------


def _tiny():
    spec = ModelSpec((6, 6, 1), 3, (Layer("conv", "conv_1", 2, 3), Layer("dense", "out", 3, 0, "softmax")))
    m = build_model(spec, 5)
    m.net.double()
    return m


def _fd_grad(net, loss_fn, eps=1e-6):
    grads = []
    with torch.no_grad():
        for p in net.parameters():
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return torch.cat([g.flatten() for g in grads])


@pytest.mark.parametrize("part", ["union", "true", "null"])
@pytest.mark.parametrize("lam", [3.0, 2000.0])
def test_composite_gradient_matches_finite_differences(part, lam):
    m = _tiny()
    rng = np.random.default_rng(0)
    x = rng.random((16, 6, 6, 1))
    y = rng.integers(0, 3, 16)
    wm = transform(b"tiny", 6, 6, 3, 2, lam)
    b = make_wm_batch(x, y, wm, 0.5, seed=0)
    xs, ys = {"union": b.union(), "true": (b.true_x, b.true_y), "null": (b.null_x, b.null_y)}[part]

    def loss():
        return composite_loss(m.net, xs, ys, torch.float64)

    m.net.zero_grad()
    loss().backward()
    analytic = torch.cat([p.grad.flatten() for p in m.net.parameters()])
    numeric = _fd_grad(m.net, loss, eps=1e-6 if lam < 100 else 1e-8)
    rel = (analytic - numeric).norm() / numeric.norm().clamp_min(1e-12)
    assert rel <= 1e-4


# -- serialisation -----------------------------------------------------------


@pytest.fixture
def trained(synthetic):
    m = build_model(small_spec(), 1)
    return train_epochs(m, synthetic.train, [], TrainConfig(learning_rate=0.01, max_epochs=1))


def test_save_load_round_trip(tmp_path, trained):
    save_model(trained, tmp_path / "m.nmw")
    back = load_model(tmp_path / "m.nmw")
    x = np.random.default_rng(0).random((100, 28, 28, 1)).astype(np.float32)
    np.testing.assert_allclose(back.predict_proba(x), trained.predict_proba(x), atol=1e-6)
    np.testing.assert_array_equal(back.predict(x), trained.predict(x))
    assert back.spec == trained.spec
    assert back.weights_hash() == trained.weights_hash()
    assert back.last_lr == trained.last_lr
    assert back.meta["step"] == trained.meta["step"]


def test_truncated_file(tmp_path, trained):
    save_model(trained, tmp_path / "m.nmw")
    raw = (tmp_path / "m.nmw").read_bytes()
    for cut in (4, 20, len(raw) - 10):
        (tmp_path / "t.nmw").write_bytes(raw[:cut])
        with pytest.raises(ModelFormatError):
            load_model(tmp_path / "t.nmw")


def test_not_a_model(tmp_path):
    (tmp_path / "x").write_bytes(b"hello world, definitely not weights")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "x")


def test_version_mismatch(tmp_path, trained):
    import json

    save_model(trained, tmp_path / "m.nmw")
    raw = (tmp_path / "m.nmw").read_bytes()
    start = len(FORMAT_MAGIC) + 4
    (hlen,) = struct.unpack_from("<I", raw, len(FORMAT_MAGIC))
    header = json.loads(raw[start:start + hlen])
    header["version"] = 99
    hb = json.dumps(header).encode()
    (tmp_path / "v.nmw").write_bytes(FORMAT_MAGIC + struct.pack("<I", len(hb)) + hb + raw[start + hlen:])
    with pytest.raises(UnsupportedVersionError, match="99"):
        load_model(tmp_path / "v.nmw")
