import numpy as np
import pytest

from qcfs.activation import QcfsParams
from qcfs.converter import (THETA_FLOOR, convert, max_activation_threshold,
                            positive_weight_sum_thresholds)
from qcfs.errors import ConversionError, UsageError
from qcfs.network import (AnnModel, SnnModel, act, build_conv_small, build_mlp, dense, init_params, maxpool,
                          transform_to_qcfs, weight_checksum)


def two_layer(lam=(1.37, 0.9), shift=0.5, seed=0):
    m = transform_to_qcfs(build_mlp((5,), (4, 3), 2, seed=seed), L=4, shift=shift)
    for idx, value in zip(m.activation_layers, lam):
        m.qcfs[idx].lam = value
    return m


def test_theta_and_v0_assignment():
    snn = convert(two_layer())
    assert snn.theta[1] == 1.37
    assert snn.v0[1] == pytest.approx(0.685)
    assert snn.theta[3] == 0.9 and snn.v0[3] == 0.45


def test_shift_override_zero():
    snn = convert(two_layer(), shift_override=0.0)
    assert all(v == 0.0 for v in snn.v0.values())


def test_noshift_model_gets_zero_v0():
    snn = convert(two_layer(shift=0.0))
    assert all(v == 0.0 for v in snn.v0.values())


def test_structural_copy():
    ann = two_layer()
    snn = convert(ann)
    assert len(snn.theta) == len(snn.v0) == 2
    assert weight_checksum(snn) == weight_checksum(ann)
    assert all(l.activation == "if_neuron" for l in snn.layers if l.kind == "activation")
    snn.params["0.weight"][0, 0] += 1.0
    assert weight_checksum(snn) != weight_checksum(ann)


def test_convert_twice_identical():
    ann = two_layer()
    a, b = convert(ann), convert(ann)
    assert weight_checksum(a) == weight_checksum(b)
    assert a.theta == b.theta and a.v0 == b.v0


def test_relu_model_not_convertible():
    with pytest.raises(ConversionError, match="layer 1"):
        convert(build_mlp((5,), (4,), 2))


def test_maxpool_not_convertible():
    q = transform_to_qcfs(build_conv_small(seed=0), L=4)
    layers = list(q.layers)
    layers[2] = maxpool(2)
    bad = AnnModel(q.input_shape, layers, q.params, q.qcfs)
    with pytest.raises(ConversionError):
        convert(bad)


def test_conv_model_converts():
    snn = convert(transform_to_qcfs(build_conv_small(seed=1), L=4))
    assert snn.spiking_layers == [1, 4]


# max-activation thresholds

def single_dense():
    layers = [dense(2, 1), act("qcfs")]
    params = {"0.weight": np.array([[2.0, -2.0]]), "0.bias": np.zeros(1)}
    return AnnModel((2,), layers, params, {1: QcfsParams(4, 1.0)})


def test_max_activation_example():
    th = max_activation_threshold(single_dense(), np.array([[0.6, 0.4], [1.0, 0.0]]))
    assert th == {1: 2.0}


def test_zero_network_floor():
    m = two_layer()
    for k in m.params:
        m.params[k][...] = 0.0
    th = max_activation_threshold(m, np.ones((3, 5)))
    assert all(v == THETA_FLOOR for v in th.values())


def test_superset_threshold_not_smaller():
    m = two_layer()
    x = np.random.default_rng(0).normal(size=(40, 5))
    small, big = max_activation_threshold(m, x[:10]), max_activation_threshold(m, x)
    assert all(big[i] >= small[i] for i in small)


def test_empty_calibration():
    with pytest.raises(UsageError):
        max_activation_threshold(single_dense(), np.zeros((0, 2)))


def test_max_act_thresholds_feed_convert():
    m = two_layer()
    th = max_activation_threshold(m, np.random.default_rng(1).normal(size=(20, 5)))
    snn = convert(m, thresholds=th)
    assert snn.theta == th
    assert snn.meta["threshold_mode"] == "max-act"


# positive-weight-sum bound

def test_positive_weight_sum_bound_enumerates_binary_inputs():
    rng = np.random.default_rng(2)
    layers = [dense(4, 3), act("if_neuron"), dense(3, 2), act("if_neuron"), dense(2, 2)]
    params = init_params(layers, 3)
    params["0.bias"] = rng.normal(0, 0.2, 3)
    stub = SnnModel((4,), layers, params, {1: 1.0, 3: 1.0}, {1: 0.0, 3: 0.0})
    theta = positive_weight_sum_thresholds(stub, input_bound=1.0)
    # brute force over binary PSP patterns of the second spiking layer's input
    w, b = params["2.weight"], params["2.bias"]
    brute = max(float(np.max(w @ (np.array(s) * theta[1]) + b))
                for s in np.ndindex(2, 2, 2))
    assert theta[3] >= brute - 1e-12
    w0, b0 = params["0.weight"], params["0.bias"]
    assert theta[1] == pytest.approx(float(np.max(np.maximum(w0, 0).sum(1) + np.maximum(b0, 0))))
