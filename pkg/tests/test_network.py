import struct
import zlib

import numpy as np
import pytest

from ghostnet import autodiff as ad
from ghostnet import dataio
from ghostnet import network as nw

from conftest import central_diff, rel_err


def kinds(layers):
    return [l.kind for l in layers]


def test_plain_mlp_preset_layout():
    spec = nw.plain_mlp((2,), 3)
    assert kinds(spec.layers) == ["dense", "relu", "erosion_slot", "dense", "relu", "erosion_slot", "dense"]
    assert [l.attrs.get("out") for l in spec.layers if l.kind == "dense"] == [256, 256, 3]
    lay = nw.analyze(spec)
    assert lay.slot_shapes == [(256,), (256,)] and lay.block_count == 0


def test_res_mlp_preset_has_eight_width_preserving_blocks():
    spec = nw.res_mlp((2,), 2)
    blocks = [l for l in spec.layers if l.kind == "residual_block"]
    assert len(blocks) == 8
    for b in blocks:
        dense = [l for l in b.layers if l.kind == "dense"]
        assert dense[0].attrs["in"] == dense[-1].attrs["out"]
    assert nw.analyze(spec).block_count == 8


def test_small_cnn_preset_has_slot_after_each_relu():
    spec = nw.small_cnn((1, 8, 8), 10)
    k = kinds(spec.layers)
    assert [k[i + 1] for i, x in enumerate(k) if x == "relu"] == ["erosion_slot", "erosion_slot"]
    assert k[-1] == "dense"
    # never a slot directly on the input or on the logits
    assert k[0] != "erosion_slot" and k[-1] != "erosion_slot"


def test_shape_chain_break_names_layer():
    spec = nw.plain_mlp((2,), 2)
    spec.layers[3].attrs["in"] = 7
    with pytest.raises(ValueError, match="layer 3"):
        nw.build(spec)


def test_forward_rejects_wrong_input_shape():
    net = nw.build(nw.plain_mlp((2,), 2))
    with pytest.raises(ad.ShapeError):
        nw.forward(net, np.zeros((4, 3)))


def test_predict_breaks_ties_towards_lowest_index():
    assert nw.predict_logits(np.array([[0.2, 0.2]])).tolist() == [0]
    assert nw.predict_logits(np.array([[0.1, 0.3, 0.3]])).tolist() == [1]


def test_loss_non_negative_and_uniform_value():
    net = nw.build(nw.plain_mlp((2,), 4), seed=0)
    x = np.random.default_rng(0).random((10, 2))
    assert float(nw.loss(net, x, np.arange(10) % 4).data) >= 0
    zero = nw.TrainedNetwork(net.spec, {k: np.zeros_like(v) for k, v in net.weights.items()})
    assert float(nw.loss(zero, x, np.arange(10) % 4).data) == pytest.approx(np.log(4), abs=1e-15)


def test_residual_trunk_is_identity_when_bodies_are_zero():
    spec = nw.res_mlp((5,), 5, width=5, blocks=8)
    # strip stem and head so the network is just the residual trunk
    blocks = [l for l in spec.layers if l.kind == "residual_block"]
    trunk = nw.NetworkSpec((5,), 5, blocks)
    net = nw.build(trunk, seed=0)
    zero = nw.TrainedNetwork(trunk, {k: np.zeros_like(v) for k, v in net.weights.items()})
    x = np.random.default_rng(2).normal(size=(6, 5))
    assert np.array_equal(nw.forward(zero, x).data, x)


def test_weights_are_immutable(spiral_mlp):
    w = next(iter(spiral_mlp.weights.values()))
    with pytest.raises(ValueError):
        w[0] = 1.0


@pytest.mark.parametrize("name", ["plain-mlp", "res-mlp", "small-cnn"])
def test_input_gradient_matches_finite_differences(digit_nets, digits, name):
    net = digit_nets[name]
    rng = np.random.default_rng(4)
    x = digits.x[:3].copy()
    y = digits.y[:3]
    g = nw.input_grad(net, x, y)
    coords = rng.choice(x.size, 20, replace=False)
    fd = central_diff(lambda a: float(nw.loss(net, a, y).data), x.copy(), coords)
    assert rel_err(g.reshape(-1)[coords], fd).max() < 1e-4


def test_training_is_deterministic():
    ds = dataio.gen_synthetic("blobs-kd", 300, 0.1, 0)
    spec = nw.plain_mlp((8,), 4, width=16)
    cfg = nw.TrainConfig(epochs=3, seed=5)
    a = nw.train(nw.build(spec, 5), ds, cfg)
    b = nw.train(nw.build(spec, 5), ds, cfg)
    c = nw.train(nw.build(spec, 6), ds, nw.TrainConfig(epochs=3, seed=6))
    for k in a.weights:
        assert np.array_equal(a.weights[k], b.weights[k])
    assert any(not np.array_equal(a.weights[k], c.weights[k]) for k in a.weights)
    assert a.model_id == b.model_id != c.model_id


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch():
    ds = dataio.gen_synthetic("blobs-kd", 300, 0.1, 0)
    ds.x[ds.splits["train"][0], 0] = np.inf
    net = nw.build(nw.plain_mlp((8,), 4, width=16), 0)
    with pytest.raises(nw.TrainingDiverged) as exc:
        nw.train(net, ds, nw.TrainConfig(epochs=3, seed=0))
    assert exc.value.epoch == 0


def test_spirals_plain_mlp_reaches_accuracy_floor(spiral_mlp):
    assert spiral_mlp.meta["val_accuracy"] >= 0.99


def test_save_load_round_trip(tmp_path, digit_nets, digits):
    for name, net in digit_nets.items():
        p = tmp_path / f"{name}.gnet"
        nw.save(net, p)
        back = nw.load(p)
        assert back.model_id == net.model_id
        assert np.array_equal(nw.forward(back, digits.x[:20]).data, nw.forward(net, digits.x[:20]).data)
        assert back.meta == net.meta


def test_gnet_layout(tmp_path, spiral_mlp):
    blob = nw.to_bytes(spiral_mlp)
    assert blob[:4] == b"GNET"
    assert struct.unpack("<H", blob[4:6])[0] == nw.GNET_VERSION
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def test_corrupted_checksum_names_file(tmp_path, spiral_mlp):
    p = tmp_path / "bad.gnet"
    blob = bytearray(nw.to_bytes(spiral_mlp))
    blob[100] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(nw.ModelFormatError, match="bad.gnet"):
        nw.load(p)


def test_unknown_layer_kind_is_named(tmp_path):
    net = nw.build(nw.plain_mlp((2,), 2, width=4), 0)
    blob = nw.to_bytes(net).replace(b'"relu"', b'"gelu"')
    body = blob[:-4]
    p = tmp_path / "odd.gnet"
    p.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(nw.ModelFormatError, match="gelu"):
        nw.load(p)


def test_version_mismatch_rejected(tmp_path, spiral_mlp):
    blob = bytearray(nw.to_bytes(spiral_mlp))
    blob[4:6] = struct.pack("<H", 99)
    body = bytes(blob[:-4])
    with pytest.raises(nw.ModelFormatError, match="version"):
        nw.from_bytes(body + struct.pack("<I", zlib.crc32(body)))
