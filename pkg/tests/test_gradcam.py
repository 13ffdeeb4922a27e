import json

import numpy as np
import pytest
from hypothesis import given, settings

from embanet import ops
from embanet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from embanet.gradcam import UnknownLayer, gradcam, read_pgm, write_pgm
from embanet.layers import Linear, Module
from embanet.network import build_network

from strategies import seeds


class OneChannel(Module):
    """A = x (a single channel), score = FC(GAP(A)); the map has a closed form."""

    default_cam_layer = "feat"
    layer_names = ["feat"]

    def __init__(self, weights):
        self.fc = Linear(1, len(weights), rng=0, dtype=np.float64)
        self.fc.weight.data = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
        self.activations = {}

    def forward(self, x):
        a = ops.scale(x, factor=1.0)
        self.activations = {"feat": a}
        return self.fc(ops.flatten(ops.global_avg_pool(a)))


def closed_form(x, w):
    cam = np.maximum(w * x, 0.0)
    return cam / cam.max() if cam.max() > 0 else cam


@given(seeds)
def test_single_channel_closed_form(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 1, 5, 6))
    w = rng.standard_normal(3)
    model = OneChannel(w)
    for t in range(3):
        cam = gradcam(model, x, t)
        assert cam.shape == (5, 6)
        assert np.abs(cam - closed_form(x[0, 0], w[t])).max() < 1e-5


@settings(max_examples=5)
@given(seeds)
def test_map_range(seed):
    net = build_network("tiny-emba", seed=seed % 1000)
    x = np.random.default_rng(seed).standard_normal((3, 16, 16)).astype(np.float32)
    for layer in net.layer_names:
        cam = gradcam(net, x, seed % 4, layer)
        assert cam.min() >= 0.0 and cam.max() <= 1.0
        assert cam.max() in (0.0, 1.0)


def test_zero_gradient_class_gives_zero_map():
    net = build_network("tiny-emba", seed=0)
    net.fc.weight.data[2] = 0.0
    cam = gradcam(net, np.ones((1, 3, 16, 16), np.float32), 2)
    assert np.all(cam == 0.0)


def test_gradcam_errors():
    net = build_network("tiny-emba")
    x = np.zeros((3, 16, 16), np.float32)
    with pytest.raises(UnknownLayer) as err:
        gradcam(net, x, 0, "layer9")
    assert "layer2" in str(err.value)
    with pytest.raises(ValueError):
        gradcam(net, x, 4)
    with pytest.raises(ValueError):
        gradcam(net, np.zeros((2, 3, 16, 16), np.float32), 0)


def test_pgm_round_trip(tmp_path):
    h = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "m.pgm", h)
    data = (tmp_path / "m.pgm").read_bytes()
    assert data.startswith(b"P5\n4 3\n255\n") and len(data) == len(b"P5\n4 3\n255\n") + 12
    px, maxval = read_pgm(tmp_path / "m.pgm")
    assert maxval == 255 and px[0, 0] == 0 and px[-1, -1] == 255
    assert np.array_equal(px, np.rint(h * 255).astype(np.uint8))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "bad.pgm", np.zeros(3))


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    net = build_network("tiny-emba", seed=3)
    net.train()
    net(np.random.default_rng(0).standard_normal((4, 3, 16, 16)).astype(np.float32))  # move BN stats
    save_checkpoint(net, tmp_path / "ck", seed=3)
    back = load_checkpoint(tmp_path / "ck")
    assert back.spec == net.spec
    for (na, a), (nb, b) in zip(net.named_parameters(), back.named_parameters()):
        assert na == nb and np.array_equal(a.data, b.data)
    for (na, a), (nb, b) in zip(net.named_buffers(), back.named_buffers()):
        assert na == nb and np.array_equal(a, b)
    x = np.random.default_rng(1).standard_normal((2, 3, 16, 16)).astype(np.float32)
    net.eval(), back.eval()
    assert np.array_equal(net(x), back(x))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    ck = save_checkpoint(build_network("tiny-emba"), tmp_path / "ck")
    man = json.loads((ck / "manifest.json").read_text())
    man["tensors"] = man["tensors"][1:]
    (ck / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointError):
        load_checkpoint(ck)
    man["format"] = "other"
    (ck / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointError):
        load_checkpoint(ck)
    ck2 = save_checkpoint(build_network("tiny-emba"), tmp_path / "ck2")
    blob = (ck2 / "weights.bin").read_bytes()
    (ck2 / "weights.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(ck2)
