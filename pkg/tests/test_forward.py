import numpy as np
import pytest

from conftest import float_net, naive_conv, small_spec
from blq.data import make_fixture_dataset, random_network
from blq.forward import (
    CHUNK,
    NumericError,
    activation,
    dequantized_network,
    forward_dq,
    forward_fp32,
    forward_lq,
    im2col,
    quantize_network,
    segments,
)
from blq.network import Convolution, FullyConnected, MaxPool, NetworkSpec, ReLU, ShapeError, Sigmoid


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-30)


def test_im2col_hand_enumeration():
    x = np.arange(9.0).reshape(1, 3, 3)
    rows = im2col(x, Convolution(1, 2, 2))
    assert rows.tolist() == [[0, 1, 3, 4], [1, 2, 4, 5], [3, 4, 6, 7], [4, 5, 7, 8]]


def test_im2col_column_order_channel_major():
    x = np.stack([np.zeros((2, 2)), np.ones((2, 2))])
    assert im2col(x, Convolution(1, 2, 2)).tolist() == [[0, 0, 0, 0, 1, 1, 1, 1]]


def test_im2col_pointwise_is_reshape():
    x = np.random.default_rng(0).normal(size=(3, 4, 5))
    rows = im2col(x, Convolution(2, 1, 1))
    assert np.array_equal(rows, x.reshape(3, -1).T)


def test_im2col_large_kernel_geometry():
    rows = im2col(np.zeros((3, 224, 224)), Convolution(96, 11, 11, stride=4, padding=2))
    assert rows.shape == (3025, 363)


def test_im2col_rejects_bad_rank():
    with pytest.raises(ShapeError):
        im2col(np.zeros((4, 4)), Convolution(1, 2, 2))


def test_identity_pointwise_conv():
    spec = NetworkSpec("id", (3, 4, 4), (Convolution(3, 1, 1),))
    net = float_net(spec, [(np.eye(3).reshape(3, 3, 1, 1), np.zeros(3))])
    x = np.random.default_rng(1).normal(size=(3, 4, 4))
    assert np.array_equal(forward_fp32(net, x), x)


def test_fc_hand_arithmetic():
    spec = NetworkSpec("fc", (2,), (FullyConnected(2),))
    net = float_net(spec, [([[1, 2], [3, 4]], [0, 0])])
    assert forward_fp32(net, np.array([1.0, 1.0])).tolist() == [3.0, 7.0]


def test_activation_examples():
    x = np.array([[-1.0, 0.0, 2.0]])
    assert activation("relu", x).tolist() == [[0, 0, 2]]
    assert activation("sigmoid", np.zeros((1, 1)))[0, 0] == 0.5
    assert np.allclose(activation("softmax", np.full((1, 4), 3.0)), 0.25)
    assert np.allclose(activation("softmax", np.array([[1000.0, 1000.0]])), 0.5)
    img = np.arange(16.0).reshape(1, 1, 4, 4)
    assert activation("maxpool", img, MaxPool(2, 2)).reshape(-1).tolist() == [5, 7, 13, 15]
    with pytest.raises(ValueError):
        activation("tanh", x)


def test_shape_mismatch_rejected(fixture_net):
    with pytest.raises(ShapeError):
        forward_fp32(fixture_net, np.zeros((1, 8, 8)))


def test_overflow_reports_layer():
    spec = NetworkSpec("big", (2,), (FullyConnected(2), Sigmoid(), FullyConnected(1)))
    net = float_net(spec, [([[1e38, 1e38], [1, 1]], [0, 0]), ([[1, 1]], [0])])
    with pytest.raises(NumericError) as e:
        forward_fp32(net, np.array([1e300, 1e300]))
    assert e.value.layer_index == 0


def test_fp32_matches_naive_oracle():
    rng = np.random.default_rng(11)
    for trial in range(30):
        c, h = int(rng.integers(1, 9)), int(rng.integers(3, 17))
        k = int(rng.integers(1, min(h, 5) + 1))
        groups = int(rng.choice([1, 2])) if c % 2 == 0 else 1
        o = int(rng.integers(1, 5)) * groups
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        conv = Convolution(o, k, k, stride=stride, padding=pad, groups=groups)
        spec = NetworkSpec("one", (c, h, h), (conv,))
        w = rng.normal(size=conv.weight_shape((c, h, h)))
        b = rng.normal(size=o)
        net = float_net(spec, [(w, b)])
        x = rng.normal(size=(c, h, h))
        ref = naive_conv(x, net.params[0].weight, net.params[0].bias, stride, pad, groups)
        assert rel_err(forward_fp32(net, x), ref) <= 1e-5


def test_segments_union_of_boundaries():
    assert segments(10, 4, 6) == ((0, 4, 0, 0), (4, 6, 1, 0), (6, 8, 1, 1), (8, 10, 2, 1))
    assert segments(9, None, None) == ((0, 9, 0, 0),)


def test_on_grid_weights_are_exact():
    spec = NetworkSpec("grid", (2, 4, 4), (Convolution(3, 3, 3, padding=1), ReLU(), FullyConnected(4)))
    rng = np.random.default_rng(2)
    shapes = [layer.weight_shape(s) for _, layer, s in spec.weight_layers()]
    # 3-bit grid over [-1, 1]: every weight is -1 + k*2/7 and both ends appear
    ws = []
    for sh in shapes:
        w = -1 + rng.integers(0, 8, sh) * (2 / 7)
        w.flat[0], w.flat[1] = -1.0, 1.0
        ws.append((w.astype(np.float32), rng.normal(size=sh[0])))
    net = float_net(spec, ws)
    q = quantize_network(net, 3)
    x = rng.normal(size=(5, 2, 4, 4))
    assert rel_err(forward_dq(q, x), forward_fp32(net, x)) <= 1e-5


def test_dq_eight_bit_close(fixture_net, fixture_inputs):
    q = quantize_network(fixture_net, 8)
    assert rel_err(forward_dq(q, fixture_inputs), forward_fp32(fixture_net, fixture_inputs)) <= 1e-2


def test_dq_requires_global(fixture_net, fixture_inputs):
    with pytest.raises(ValueError):
        forward_dq(quantize_network(fixture_net, 4, 9), fixture_inputs)


@pytest.mark.parametrize("mode", ["w", "wa"])
def test_whole_layer_region_collapses_to_dq(fixture_net, fixture_inputs, mode):
    n = max(p.weight.size for p in fixture_net.params)
    dq = quantize_network(fixture_net, 4, None, mode, 4, None)
    lq = quantize_network(fixture_net, 4, n, mode, 4, None)
    assert lq.is_global
    assert forward_lq(lq, fixture_inputs).tobytes() == forward_dq(dq, fixture_inputs).tobytes()


def test_singleton_regions_match_fp32(fixture_net, fixture_inputs):
    q = quantize_network(fixture_net, 2, 1)
    assert rel_err(forward_lq(q, fixture_inputs), forward_fp32(fixture_net, fixture_inputs)) <= 1e-5


def test_wa_singleton_regions_match_fp32(fixture_net, fixture_inputs):
    q = quantize_network(fixture_net, 2, 1, "wa", 2, 1)
    assert rel_err(forward_lq(q, fixture_inputs), forward_fp32(fixture_net, fixture_inputs)) <= 1e-5


def test_dequantized_network_matches_weight_only(fixture_net, fixture_inputs):
    q = quantize_network(fixture_net, 3, 9)
    ref = forward_fp32(dequantized_network(q), fixture_inputs)
    assert rel_err(forward_lq(q, fixture_inputs), ref) <= 1e-5


def _logit_error(out, ref):
    return float(np.sqrt(((out - ref) ** 2).sum(axis=1)).mean())


def test_error_ordering_over_seeds(fixture_spec):
    x = make_fixture_dataset(99, 8)[0]
    for bits in (2, 4):
        dq_err, lq_err = [], []
        for seed in range(100):
            net = random_network(fixture_spec, seed)
            ref = forward_fp32(net, x)
            dq = quantize_network(net, bits, None, "wa", bits, None)
            lq = quantize_network(net, bits, 9, "wa", bits, 9)
            dq_err.append(_logit_error(forward_dq(dq, x), ref))
            lq_err.append(_logit_error(forward_lq(lq, x), ref))
        assert np.mean(lq_err) <= np.mean(dq_err)


def test_monotone_bits(fixture_spec):
    x = make_fixture_dataset(98, 8)[0]
    means = []
    for bits in range(1, 9):
        errs = []
        for seed in range(20):
            net = random_network(fixture_spec, seed)
            q = quantize_network(net, bits, 9, "wa", bits, 9)
            errs.append(_logit_error(forward_lq(q, x), forward_fp32(net, x)))
        means.append(np.mean(errs))
    assert all(b <= a for a, b in zip(means, means[1:]))


def test_two_bit_local_beats_global_on_fixture(fixture_net):
    x = make_fixture_dataset(0, 512)[0]
    ref = forward_fp32(fixture_net, x).argmax(axis=1)
    agree = {}
    for r in (None, 9):
        q = quantize_network(fixture_net, 8, r, "wa", 2, r)
        agree[r] = np.mean(forward_lq(q, x).argmax(axis=1) == ref)
    assert agree[9] > agree[None]


def test_single_sample_and_batch_agree(fixture_net, fixture_inputs):
    q = quantize_network(fixture_net, 4, 9, "wa", 4, 9)
    batch = forward_lq(q, fixture_inputs[:3])
    assert forward_lq(q, fixture_inputs[1]).tobytes() == batch[1].tobytes()


def test_trace_has_one_entry_per_weight_layer(fixture_net, fixture_inputs):
    out, tr = forward_fp32(fixture_net, fixture_inputs, trace=True)
    assert [t.shape for t in tr] == [(64, 8, 16, 16), (64, 16, 8, 8), (64, 10)]


def test_deterministic_across_threads_and_chunks(fixture_net, monkeypatch):
    x = make_fixture_dataset(4, CHUNK * 2 + 17)[0]
    q = quantize_network(fixture_net, 2, 9, "wa", 2, 9)
    monkeypatch.setenv("BLQ_THREADS", "1")
    a = forward_lq(q, x).tobytes()
    fa = forward_fp32(fixture_net, x).tobytes()
    monkeypatch.setenv("BLQ_THREADS", "3")
    assert forward_lq(q, x).tobytes() == a
    assert forward_fp32(fixture_net, x).tobytes() == fa
    # a sample's result does not depend on which chunk it landed in
    assert forward_lq(q, x[CHUNK - 1 : CHUNK + 1]).tobytes() == np.frombuffer(a).reshape(len(x), -1)[CHUNK - 1 : CHUNK + 1].tobytes()


def test_bad_thread_count(fixture_net, fixture_inputs, monkeypatch):
    monkeypatch.setenv("BLQ_THREADS", "zero")
    with pytest.raises(ValueError):
        forward_fp32(fixture_net, fixture_inputs)


def test_random_small_nets_run_all_paths():
    rng = np.random.default_rng(5)
    for i in range(20):
        spec = small_spec(rng)
        net = random_network(spec, i)
        x = rng.normal(size=(3, *spec.input_shape))
        ref = forward_fp32(net, x)
        q = quantize_network(net, 8, 9, "wa", 8, 9)
        assert forward_lq(q, x).shape == ref.shape
