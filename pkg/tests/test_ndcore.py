import io
import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from arcomp import ndcore as nd
from arcomp.errors import DimensionError, DomainError, NumericError
from arcomp.gradcheck import numerical_gradient, relative_error


def fd_check(build, *arrays, step=1e-5):
    """Tape gradient of sum(build(*tensors)) vs central differences, per input."""
    tensors = [nd.parameter(a.copy()) for a in arrays]
    out = build(*tensors)
    out.sum().backward()
    errs = []
    for t in tensors:
        def f():
            with nd.no_grad():
                return float(build(*tensors).data.sum())
        errs.append(relative_error(t.grad, numerical_gradient(f, t.data, step)))
    return max(errs)


class TestMatmul:
    def test_identity(self):
        A = np.array([[1.5, -2.0], [0.25, 4.0]])
        np.testing.assert_array_equal(nd.matmul(np.eye(2), A).data, A)

    def test_hand_arithmetic(self):
        out = nd.matmul(nd.tensor([[1, 2], [3, 4]]), nd.tensor([[1], [1]]))
        np.testing.assert_array_equal(out.data, [[3], [7]])

    def test_gradient_of_sum_is_ones_times_bt(self):
        rng = np.random.default_rng(1)
        A = nd.parameter(rng.normal(size=(3, 4)))
        B = rng.normal(size=(4, 2))
        nd.matmul(A, B).sum().backward()
        np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B.T, rtol=1e-12)
        assert fd_check(lambda a, b: a @ b, A.data, B) < 1e-6

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nd.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_batched_and_vector_forms(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
        np.testing.assert_allclose(nd.matmul(a, b).data, a @ b)
        assert fd_check(lambda x, y: x @ y, a, b) < 1e-6
        M, v = rng.normal(size=(3, 4)), rng.normal(size=4)
        assert fd_check(lambda x, y: x @ y, M, v) < 1e-6
        assert fd_check(lambda x, y: x @ y, v, M.T) < 1e-6

    def test_batch_dims_must_match(self):
        with pytest.raises(DimensionError):
            nd.matmul(np.ones((2, 3, 4)), np.ones((3, 4, 5)))


class TestElementwise:
    def test_sigmoid_zero(self):
        assert nd.sigmoid(nd.tensor(0.0)).item() == 0.5

    def test_tanh_zero(self):
        assert nd.tanh(nd.tensor(0.0)).item() == 0.0

    def test_sigmoid_derivative_at_1_5(self):
        x = nd.parameter(np.array([1.5]))
        nd.sigmoid(x).sum().backward()
        sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
        h = 1e-5
        numeric = (sig(1.5 + h) - sig(1.5 - h)) / (2 * h)
        assert abs(x.grad[0] - numeric) < 1e-8

    def test_dispatch_by_name(self):
        x = np.array([-1.0, 2.0])
        np.testing.assert_array_equal(nd.elementwise("abs", x).data, [1.0, 2.0])
        np.testing.assert_array_equal(nd.elementwise("neg", x).data, [1.0, -2.0])
        np.testing.assert_array_equal(nd.elementwise("add", x, x).data, [-2.0, 4.0])
        np.testing.assert_array_equal(nd.elementwise("sub", x, x).data, [0.0, 0.0])
        np.testing.assert_array_equal(nd.elementwise("mul", x, x).data, [1.0, 4.0])
        with pytest.raises(ValueError):
            nd.elementwise("cosh", x)

    def test_log_domain(self):
        with pytest.raises(DomainError):
            nd.log(nd.tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            nd.log(nd.tensor([-3.0]))

    def test_no_implicit_broadcasting(self):
        with pytest.raises(DimensionError):
            nd.add(np.ones((2, 3)), np.ones(3))
        with pytest.raises(DimensionError):
            nd.mul(np.ones((2, 1)), np.ones((2, 3)))

    def test_scalar_tensor_broadcast(self):
        x = nd.parameter(np.arange(6.0).reshape(2, 3))
        s = nd.parameter(np.array([2.0]))
        (x * s + 1.0).sum().backward()
        np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0))
        assert s.grad.shape == (1,) and s.grad[0] == pytest.approx(15.0)

    @pytest.mark.parametrize("op", ["sigmoid", "tanh", "exp", "abs", "neg"])
    def test_unary_gradients(self, op):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 4))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink of abs
        assert fd_check(lambda t: nd.elementwise(op, t), x) < 1e-5

    def test_log_gradient(self):
        x = np.random.default_rng(4).uniform(0.5, 2.0, size=(5,))
        assert fd_check(nd.log, x) < 1e-5

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary_gradients(self, op):
        rng = np.random.default_rng(5)
        a, b = rng.normal(size=(2, 3)), rng.uniform(0.5, 2.0, size=(2, 3))
        assert fd_check(lambda x, y: nd.elementwise(op, x, y), a, b) < 1e-5


class TestReduce:
    def test_sum(self):
        assert nd.reduce("sum", nd.tensor([1.0, 2.0, 3.0])).item() == 6.0

    def test_mean_of_constant(self):
        assert nd.reduce("mean", np.full((3, 4), 2.5)).item() == 2.5
        np.testing.assert_array_equal(nd.reduce("mean", np.full((3, 4), 2.5), axis=1).data, np.full(3, 2.5))

    def test_sum_gradient_is_ones(self):
        x = nd.parameter(np.random.default_rng(0).normal(size=(2, 5)))
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 5)))

    def test_max_first_index_on_ties(self):
        x = nd.parameter(np.array([1.0, 3.0, 3.0, 0.0]))
        x.max().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0, 0.0])
        y = nd.parameter(np.array([[2.0, 2.0], [1.0, 5.0]]))
        y.max(axis=1).sum().backward()
        np.testing.assert_array_equal(y.grad, [[1.0, 0.0], [0.0, 1.0]])

    def test_invalid_axis(self):
        with pytest.raises(DimensionError):
            nd.reduce("sum", np.ones((2, 2)), axis=2)

    @pytest.mark.parametrize("op", ["sum", "mean", "max"])
    @pytest.mark.parametrize("axis", [None, 0, 1])
    def test_gradients(self, op, axis):
        x = np.random.default_rng(6).normal(size=(3, 4))
        assert fd_check(lambda t: nd.reduce(op, t, axis=axis), x) < 1e-5


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nd.softmax(np.zeros(20)).data, np.full(20, 0.05), atol=1e-15)

    def test_closed_form(self):
        np.testing.assert_allclose(nd.softmax([0.0, math.log(3.0)]).data, [0.25, 0.75], atol=1e-15)

    def test_jacobian(self):
        rng = np.random.default_rng(7)
        s = rng.normal(size=6)
        w = rng.normal(size=6)  # random projection exercises the full Jacobian
        assert fd_check(lambda t: nd.softmax(t) * w, s) < 1e-6

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            nd.softmax([0.0, float("nan")])

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)))
    def test_sums_to_one_for_large_inputs(self, s):
        p = nd.softmax(s).data
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all(p >= 0)


class TestBackward:
    def test_square(self):
        x = nd.parameter(np.array([3.0]))
        (x * x).sum().backward()
        assert x.grad[0] == 6.0

    def test_sigmoid_of_linear(self):
        rng = np.random.default_rng(8)
        W, v = rng.normal(size=(4, 3)), rng.normal(size=3)
        assert fd_check(lambda w, x: nd.sigmoid(w @ x), W, v) < 1e-6

    def test_two_calls_double(self):
        x = nd.parameter(np.array([1.0, -2.0]))
        y = nd.tanh(x).sum()
        y.backward()
        first = x.grad.copy()
        y.backward()
        np.testing.assert_allclose(x.grad, 2 * first, rtol=0, atol=0)

    def test_non_scalar_rejected(self):
        x = nd.parameter(np.ones(3))
        with pytest.raises(DimensionError):
            (x * 2.0).backward()

    def test_every_reachable_tensor_gets_grad(self):
        a = nd.parameter(np.ones(3))
        b = nd.parameter(np.full(3, 2.0))
        mid = a * b
        out = nd.exp(mid).sum()
        out.backward()
        for t in (a, b, mid, out):
            assert t.grad is not None and t.grad.shape == t.shape

    def test_tape_is_topological(self):
        x = nd.parameter(np.ones(2))
        y = x * 2.0
        z = y + y * x
        tape = nd.Tape(z.sum())
        seen = set()
        for node in tape.nodes:
            for parent in node._parents:
                if parent.requires_grad:
                    assert id(parent) in seen
            seen.add(id(node))
        assert len({id(n) for n in tape.nodes}) == len(tape.nodes)

    def test_no_grad_records_nothing(self):
        x = nd.parameter(np.ones(2))
        with nd.no_grad():
            y = (x * 3.0).sum()
        assert not y.requires_grad


class TestShapes:
    def test_transpose_reshape_concat_slice_gradients(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
        assert fd_check(lambda t: nd.transpose(t) * np.arange(6.0).reshape(3, 2), a) < 1e-6
        assert fd_check(lambda t: t.reshape(3, 2) * np.arange(6.0).reshape(3, 2), a) < 1e-6
        assert fd_check(lambda s, t: nd.concat([s, t], axis=1) * np.arange(10.0).reshape(2, 5), a, b) < 1e-6
        assert fd_check(lambda t: t[:, 1:] * np.array([[1.0, 2.0], [3.0, 4.0]]), a) < 1e-6
        assert fd_check(lambda t: t.reshape(2, 1, 3).expand(2, 4, 3) * np.arange(24.0).reshape(2, 4, 3), a) < 1e-6

    def test_concat_errors(self):
        with pytest.raises(DimensionError):
            nd.concat([np.ones((2, 3)), np.ones((3, 3))], axis=1)

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
                      elements=st.floats(allow_nan=False, allow_infinity=False)))
    def test_flatten_roundtrip_preserves_bytes(self, arr):
        t = nd.tensor(arr)
        back = t.flatten().reshape(arr.shape)
        assert back.data.tobytes() == arr.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_composite_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    build = lambda x, y: nd.tanh(x @ y) * nd.sigmoid(x @ y) + nd.exp(0.1 * (x @ y))  # noqa: E731
    assert fd_check(build, a, b) < 1e-5


def test_forward_determinism():
    rng = np.random.default_rng(10)
    a, b = rng.normal(size=(5, 6)), rng.normal(size=(6, 3))
    one = nd.softmax(nd.tanh(nd.matmul(a, b)), axis=1).data
    two = nd.softmax(nd.tanh(nd.matmul(a, b)), axis=1).data
    assert one.tobytes() == two.tobytes()


def test_independent_tapes_in_threads():
    rng = np.random.default_rng(11)
    inputs = [rng.normal(size=(4, 4)) for _ in range(4)]

    def grad_of(arr):
        x = nd.parameter(arr.copy())
        for _ in range(20):
            y = nd.tanh(x @ x.T) @ x
        y.sum().backward()
        return x.grad

    serial = [grad_of(a) for a in inputs]
    results = [None] * len(inputs)

    def worker(i):
        results[i] = grad_of(inputs[i])

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(len(inputs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for s, r in zip(serial, results):
        np.testing.assert_array_equal(s, r)


class TestContainer:
    def test_roundtrip_and_layout(self):
        arr = np.arange(6.0).reshape(2, 3) / 7.0
        blob = nd.dumps(arr)
        assert blob[:4] == b"ARCT"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert int.from_bytes(blob[8:12], "little") == 2
        assert int.from_bytes(blob[12:20], "little") == 2
        assert int.from_bytes(blob[20:28], "little") == 3
        assert np.frombuffer(blob[28:], "<f8").tolist() == arr.reshape(-1).tolist()
        np.testing.assert_array_equal(nd.loads(blob), arr)

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            nd.read_tensor(io.BytesIO(b"XXXX" + bytes(8)))

    def test_named_bundle(self, tmp_path):
        arrays = {"a": np.ones((2, 2)), "b.c": np.arange(3.0)}
        nd.save_named(tmp_path / "p.arct", arrays)
        back = nd.load_named(tmp_path / "p.arct")
        assert list(back) == ["a", "b.c"]
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])
