import io
import math

import numpy as np
import pytest

from multer import autodiff as ad
from multer.autodiff import ContractError, NonFiniteError, Tape, Tensor
from multer.gradcheck import KinkProximityError, grad_check
from multer.gradsuite import PRIMITIVES, run_suite
from multer.params import Module, from_json_entries, read_binary, to_json_entries, write_binary


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def loop_matmul(a, b):
    M, P = a.shape
    Q = b.shape[1]
    out = np.zeros((M, Q))
    for i in range(M):
        for j in range(Q):
            for k in range(P):
                out[i, j] += a[i, k] * b[k, j]
    return out


# -- matmul


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(a), Tensor(np.eye(2))).data, a)


def test_matmul_hand_values_match_loop_oracle():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    expected = loop_matmul(a, b)
    np.testing.assert_array_equal(expected, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(ad.matmul(Tensor(a), Tensor(b)).data, expected)


def test_matmul_zeros_annihilate():
    a = np.random.default_rng(0).normal(size=(3, 4))
    assert not ad.matmul(Tensor(a), Tensor(np.zeros((4, 2)))).data.any()


def test_matmul_shape_mismatch():
    with pytest.raises(ContractError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- conv2d


def loop_conv(x, k, stride, padding):
    N, Cin, H, W = x.shape
    Cout, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((N, Cout, Ho, Wo))
    for n in range(N):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    out[n, o, i, j] = (xp[n, :, i * stride : i * stride + kh, j * stride : j * stride + kw] * k[o]).sum()
    return out


def test_conv_all_ones_sums_to_nine():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_identity_kernel_preserves_input():
    x = np.random.default_rng(1).normal(size=(2, 3, 5, 4))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(k), 1, 1).data, x)


def test_conv_shape_arithmetic():
    out = ad.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    assert out.shape == (1, 1, 2, 2)
    assert ad.conv_output_size(300, 7, 2, 3) == 150


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (3, 2)])
def test_conv_matches_loop_oracle(stride, padding):
    rng = np.random.default_rng(stride)
    x, k = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 2))
    np.testing.assert_allclose(ad.conv2d(Tensor(x), Tensor(k), stride, padding).data, loop_conv(x, k, stride, padding), atol=1e-12)


def test_conv_kernel_larger_than_padded_input():
    with pytest.raises(ContractError):
        ad.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))), padding=1)


# -- softmax


def test_softmax_uniform_on_zeros():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(4))).data, [0.25] * 4, rtol=0, atol=1e-15)


def test_softmax_scalar_oracle():
    np.testing.assert_allclose(ad.softmax(Tensor(np.array([0.0, math.log(3.0)]))).data, [0.25, 0.75], atol=1e-15)


def test_softmax_rows_and_shift_invariance():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.normal(scale=5, size=(5, 6))
        p = ad.softmax(Tensor(x), axis=-1).data
        assert np.all(p > 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        q = ad.softmax(Tensor(x + rng.normal(scale=100)), axis=-1).data
        np.testing.assert_allclose(p, q, atol=1e-12)


def test_softmax_large_inputs_stay_finite():
    p = ad.softmax(Tensor(np.array([1000.0, 1000.0, -1000.0]))).data
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0])


# -- pooling


def test_avgpool_values():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert ad.avgpool_global(Tensor(x)).data.item() == 2.5
    assert ad.avgpool_global(Tensor(np.full((1, 2, 3, 3), 7.0))).data.tolist() == [[7.0, 7.0]]
    y = np.random.default_rng(3).normal(size=(2, 5, 1, 1))
    np.testing.assert_array_equal(ad.avgpool_global(Tensor(y)).data, y[:, :, 0, 0])


def test_avgpool_gradient_is_uniform():
    x = leaf(np.random.default_rng(4).normal(size=(1, 2, 3, 4)))
    ad.backward(ad.sum(ad.avgpool_global(x)))
    np.testing.assert_allclose(x.grad, 1.0 / 12)


# -- backward


def test_backward_product_rule():
    x, y = leaf(2.0), leaf(3.0)
    ad.backward(ad.multiply(x, y))
    assert x.grad == 3.0 and y.grad == 2.0


def test_backward_quadratic():
    v = np.array([1.0, -2.0, 0.5])
    x = leaf(v)
    ad.backward(ad.sum(ad.square(x)))
    np.testing.assert_array_equal(x.grad, 2 * v)


def test_backward_inactive_relu():
    x = leaf(-1.0)
    ad.backward(ad.sum(ad.relu(x)))
    assert x.grad == 0.0


def test_relu_subgradient_at_zero_is_zero():
    x = leaf(np.array([0.0, 1.0]))
    ad.backward(ad.sum(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_backward_rejects_nonscalar():
    with pytest.raises(ContractError):
        ad.backward(ad.add(leaf([1.0, 2.0]), 1.0))


def test_unreached_inputs_get_zero_grad():
    x, z = leaf([1.0, 2.0]), leaf([[3.0]])
    ad.backward(ad.sum(x), inputs=[x, z])
    np.testing.assert_array_equal(z.grad, [[0.0]])


def test_shared_subexpression_accumulates():
    x = leaf(3.0)
    y = ad.multiply(x, x)
    ad.backward(ad.add(y, y))
    assert x.grad == 12.0


def test_tape_is_topological_and_visits_once():
    x = leaf([1.0, 2.0])
    h = ad.relu(ad.multiply(x, 2.0))
    loss = ad.sum(ad.add(h, ad.square(h)))
    tape = Tape.trace(loss)
    records = tape.records()
    position = {}
    for i, rec in enumerate(records):
        position[id(rec)] = i
        for inp in rec.inputs:
            if inp.record is not None:
                assert position[id(inp.record)] < i
    assert len({id(r) for r in records}) == len(records)


def test_non_finite_forward_raises():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        ad.multiply(Tensor(np.array([1e308])), Tensor(np.array([1e308])))


def test_reshape_roundtrip_on_data_and_grads():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(3, 4))
    x = leaf(v)
    w = rng.normal(size=(3, 4))
    y = ad.reshape(ad.reshape(x, (2, 6)), (3, 4))
    np.testing.assert_array_equal(y.data, v)
    ad.backward(ad.sum(ad.multiply(y, w)))
    np.testing.assert_array_equal(x.grad, w)


def test_pairwise_sqdist_matches_loop():
    rng = np.random.default_rng(6)
    X, C = rng.normal(size=(7, 4)), rng.normal(size=(3, 4))
    d = ad.pairwise_sqdist(Tensor(X), Tensor(C)).data
    for i in range(7):
        for k in range(3):
            assert abs(d[i, k] - sum((X[i, j] - C[k, j]) ** 2 for j in range(4))) <= 1e-10


def test_outer_product_layout():
    out = ad.outer_product(Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0])))
    np.testing.assert_array_equal(out.data, [3, 4, 6, 8])


def test_l2_normalize_guard():
    assert not ad.l2_normalize(Tensor(np.zeros(5))).data.any()
    v = ad.l2_normalize(Tensor(np.array([3.0, 4.0]))).data
    np.testing.assert_allclose(v, [0.6, 0.8])


def test_cross_entropy_value():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    expected = -np.mean([np.log(np.exp(1.0) / np.exp(logits[0]).sum()), np.log(1 / 3)])
    assert abs(ad.cross_entropy(Tensor(logits), [0, 2]).item() - expected) < 1e-14
    with pytest.raises(ContractError):
        ad.cross_entropy(Tensor(logits), [0, 3])


def test_concat_feature_axis():
    out = ad.concat([Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 2)))], axis=-1)
    np.testing.assert_array_equal(out.data, [[1, 0, 0], [1, 0, 0]])


# -- grad_check


def test_grad_check_quadratic_is_exact():
    x = leaf(np.random.default_rng(7).normal(size=5))
    assert grad_check(lambda: ad.sum(ad.square(x)), [x]) < 1e-8


def test_grad_check_constant_is_zero():
    x = leaf(np.ones(3))
    assert grad_check(lambda: ad.sum(ad.multiply(x, 0.0)), [x]) == 0.0


def test_grad_check_refuses_points_near_kinks():
    x = leaf(np.array([1e-5, 1.0]))
    with pytest.raises(KinkProximityError):
        grad_check(lambda: ad.sum(ad.relu(x)), [x])


def test_grad_check_detects_corruption():
    x = leaf(np.array([1.0, 2.0]))

    def corrupt(grads):
        grads[0][0] += 0.5

    assert grad_check(lambda: ad.sum(ad.square(x)), [x], corrupt=corrupt) > 0.1


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_over_random_instances(name):
    [result] = run_suite(seed=11, instances=20, targets=[name])
    assert result.max_error <= 1e-4, result


# -- parameter serialization


class Toy(Module):
    def __init__(self, rng):
        super().__init__()
        self.add_param("w", rng.normal(size=(3, 2)))
        child = Module()
        child.add_param("b", rng.normal(size=4))
        self.add_child("head", child)


def test_parameter_names_are_dotted_and_unique():
    toy = Toy(np.random.default_rng(0))
    assert [p.name for p in toy.named_parameters()] == ["w", "head.b"]
    with pytest.raises(ContractError):
        toy.add_param("w", np.zeros(1))


def test_json_roundtrip_is_bit_exact():
    toy = Toy(np.random.default_rng(1))
    restored = from_json_entries(to_json_entries(toy.named_parameters()))
    for p in toy.named_parameters():
        assert restored[p.name].tobytes() == p.tensor.data.tobytes()


def test_binary_roundtrip_is_bit_exact():
    toy = Toy(np.random.default_rng(2))
    buf = io.BytesIO()
    write_binary(toy.named_parameters(), buf)
    buf.seek(0)
    restored = read_binary(buf)
    assert list(restored) == ["w", "head.b"]
    for p in toy.named_parameters():
        assert restored[p.name].tobytes() == p.tensor.data.tobytes()


def test_load_state_checks_names_and_shapes():
    toy = Toy(np.random.default_rng(3))
    with pytest.raises(ContractError):
        toy.load_state({"w": np.zeros((3, 2))})
    with pytest.raises(ContractError):
        toy.load_state({"w": np.zeros((2, 3)), "head.b": np.zeros(4)})


def test_pairwise_sqdist_is_nonnegative_at_codewords():
    rng = np.random.default_rng(16)
    C = rng.normal(scale=50, size=(5, 6))
    d = ad.pairwise_sqdist(Tensor(C.copy()), Tensor(C)).data
    assert d.min() >= 0.0
    assert np.abs(np.diag(d)).max() <= 1e-9
