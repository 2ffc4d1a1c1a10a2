import json
import os

import numpy as np
import pytest

from steerfft import autodiff as ad
from steerfft.checkpoint import VERSION, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from steerfft.data import TEST_NAME, TRAIN_NAME, AmatFormatError, ImageSet, default_data_dir, image_to_pointcloud, load_amat, load_dataset, save_amat
from steerfft.fourier import rotate
from steerfft.model import ModelConfig, SteerableNet, desk_config, load_config, table1_config
from steerfft.train import DivergenceError, TrainConfig, exact_bn_pass, lr_at, train

TINY = dict(conv_channels=(2, 3, 3, 3, 3, 4), linear=(6, 6, 10))


def tiny_data(n, seed=0):
    rng = np.random.default_rng(seed)
    return ImageSet(rng.random((n, 28, 28)), rng.integers(0, 10, n))


def test_amat_single_row(tmp_path):
    p = tmp_path / "one.amat"
    p.write_text(" ".join(["0"] * 784) + " 3\n")
    d = load_amat(p)
    assert d.images.shape == (1, 28, 28) and np.all(d.images == 0)
    assert d.labels.tolist() == [3]


def test_amat_roundtrip_gz(tmp_path):
    d = tiny_data(3)
    p = tmp_path / "x.amat.gz"
    save_amat(p, d)
    back = load_amat(p)
    np.testing.assert_allclose(back.images, d.images, rtol=1e-7)
    np.testing.assert_array_equal(back.labels, d.labels)
    assert len(load_amat(p, limit=2)) == 2


@pytest.mark.parametrize(
    "row,msg",
    [(["0"] * 783 + ["1"], "row 1"), (["0"] * 784 + ["11"], "label"), (["x"] * 785, "row 1")],
)
def test_amat_errors(tmp_path, row, msg):
    p = tmp_path / "bad.amat"
    p.write_text(" ".join(["0"] * 785) + "\n" + " ".join(row) + "\n")
    with pytest.raises(AmatFormatError, match=msg):
        load_amat(p)


def test_original_split_sizes():
    d = default_data_dir()
    if not os.path.exists(os.path.join(d, TRAIN_NAME)):
        pytest.skip("original rotated-MNIST files are not present")
    tr, te = load_dataset(d)
    assert (len(tr), len(te)) == (12_000, 50_000)


def test_bundled_substitute():
    tr, te = load_dataset(n_train=50, n_test=50)
    assert tr.images.shape == (50, 28, 28) and te.images.shape == (50, 28, 28)
    assert tr.images.min() >= 0 and tr.images.max() <= 1
    assert set(tr.labels) <= set(range(10))


def test_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)


def test_image_to_pointcloud():
    pc = image_to_pointcloud(np.zeros((28, 28)))
    assert pc.coords.shape == (784, 2) and np.all(pc.features == 0)
    assert np.ptp(pc.coords[:, 0]) == 27 and np.ptp(pc.coords[:, 1]) == 27
    np.testing.assert_allclose(pc.coords.min(axis=0), -13.5)
    back = pc.rotated(0.8).rotated(-0.8)
    np.testing.assert_allclose(back.coords, pc.coords, atol=1e-12)
    img = np.zeros((28, 28))
    img[0, 27] = 1.0  # top-right pixel
    pc = image_to_pointcloud(img)
    np.testing.assert_allclose(pc.coords[np.argmax(pc.features[0, :, 0, 0].real)], [13.5, 13.5])


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(cfg, 1) == lr_at(cfg, 16) == 0.015
    assert lr_at(cfg, 17) == pytest.approx(0.012)
    assert lr_at(cfg, 18) == pytest.approx(0.015 * 0.8**2)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_config_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        desk_config(coeffs=8)
    with pytest.raises(ValueError):
        desk_config(pad=-1)
    with pytest.raises(ValueError):
        desk_config(spatial=("crop4", "pool", "bogus", "pool", "none", "crop2"))
    assert table1_config().linear[-1] == 40
    assert desk_config().linear[-1] == 10
    cfg = desk_config(activation="c_relu", pad=3)
    assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"preset": "desk", "model": {"activation": "poly2", "pad": 8}, "train": {"epochs": 2}}))
    m, t = load_config(p)
    assert (m.activation, m.pad, m.conv_channels[0], t["epochs"]) == ("poly2", 8, 12, 2)


def test_dropout_only_in_training():
    net = SteerableNet(desk_config(**TINY), "double")
    x = net.input_features(tiny_data(2).images)
    a = net.forward(ad.Tape(retain=False), x).value
    b = net.forward(ad.Tape(retain=False), x).value
    np.testing.assert_array_equal(a, b)


def test_model_forward_is_invariant_under_exact_rotation():
    # C-ReLU keeps the whole stack exactly equivariant, so logits are invariant
    net = SteerableNet(desk_config(activation="c_relu", **TINY), "double")
    x = net.input_features(tiny_data(2).images)
    a = net.forward(ad.Tape(retain=False), x).value
    b = net.forward(ad.Tape(retain=False), x, plan=net.plan.rotated(1.1)).value
    np.testing.assert_allclose(b, a, atol=1e-9 * np.abs(a).max())


def test_training_is_deterministic():
    data = tiny_data(64)
    cfg = TrainConfig(epochs=2, batch_size=32, exact_bn=False)
    runs = []
    for _ in range(2):
        net = SteerableNet(desk_config(**TINY))
        runs.append([m["train_loss"] for m in train(net, data, None, cfg).metrics])
    assert runs[0] == runs[1]


def test_metrics_csv(tmp_path):
    data = tiny_data(32)
    net = SteerableNet(desk_config(**TINY))
    path = tmp_path / "m.csv"
    train(net, data, data, TrainConfig(epochs=1, batch_size=32, exact_bn=False), metrics_path=path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,lr,train_loss,test_error" and len(lines) == 2


def test_divergence_reported():
    net = SteerableNet(desk_config(**TINY))
    bad = tiny_data(8)
    bad.images[0, 0, 0] = np.nan
    with pytest.raises(DivergenceError) as e:
        train(net, bad, None, TrainConfig(epochs=1, batch_size=8))
    assert e.value.epoch == 1 and e.value.step == 0


def test_exact_bn_pass_idempotent():
    net = SteerableNet(desk_config(**TINY), "double")
    data = tiny_data(20)
    before = [p.value.copy() for p in net.parameters()]
    exact_bn_pass(net, data, batch_size=8)
    first = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in net.batch_norms()]
    exact_bn_pass(net, data, batch_size=8)
    for (m, v), bn in zip(first, net.batch_norms()):
        assert np.abs(bn.running_mean - m).max() < 1e-10
        assert np.abs(bn.running_var - v).max() < 1e-10
    for b, p in zip(before, net.parameters()):
        np.testing.assert_array_equal(b, p.value)


def test_exact_bn_matches_full_batch_statistics():
    net = SteerableNet(desk_config(**TINY), "double")
    data = tiny_data(12)
    exact_bn_pass(net, data, batch_size=5)
    from steerfft.conv2d import fourier_moments

    x = net.forward(ad.Tape(retain=False), net.input_features(data.images), stop_at_bn=0).value
    mu, power = fourier_moments(x)
    bn = net.batch_norms()[0]
    np.testing.assert_allclose(bn.running_mean, mu, atol=1e-12)
    np.testing.assert_allclose(bn.running_var, power - mu**2, atol=1e-12)


def _trained_tiny():
    net = SteerableNet(desk_config(**TINY))
    data = tiny_data(16)
    train(net, data, None, TrainConfig(epochs=1, batch_size=16, exact_bn=False))
    return net, data


def test_checkpoint_roundtrip(tmp_path):
    net, data = _trained_tiny()
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, net, TrainConfig(epochs=1))
    back, header = load_checkpoint(p)
    x = net.input_features(data.images[:4])
    a = net.forward(ad.Tape(retain=False), x).value
    b = back.forward(ad.Tape(retain=False), x).value
    assert a.tobytes() == b.tobytes()
    assert header["param_count"] == net.num_parameters()
    assert header["seed"] == net.config.seed and header["train"]["epochs"] == 1


def test_checkpoint_records_table1_param_count(tmp_path):
    net = SteerableNet(table1_config())
    p = tmp_path / "t1.ckpt"
    save_checkpoint(p, net)
    header, _ = read_checkpoint(p)
    assert header["param_count"] == 1_357_264
    assert abs(header["param_count"] / 1_394_986 - 1) < 0.05


def test_checkpoint_damage(tmp_path):
    net, _ = _trained_tiny()
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, net)
    blob = bytearray(p.read_bytes())

    def write(b):
        q = tmp_path / "bad.ckpt"
        q.write_bytes(bytes(b))
        return q

    hdr = bytearray(blob)
    hdr[30] ^= 0xFF
    with pytest.raises(CheckpointError, match="header"):
        read_checkpoint(write(hdr))
    pay = bytearray(blob)
    pay[-10] ^= 0x01
    with pytest.raises(CheckpointError, match="payload"):
        read_checkpoint(write(pay))
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(write(blob[:-100]))
    ver = bytearray(blob)
    ver[8:12] = (VERSION + 1).to_bytes(4, "little")
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(write(ver))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(write(b"NOTACKPT" + blob[8:]))
