import numpy as np
import pytest

from mcl_forge import tensor as tn
from mcl_forge.errors import ContractError, DomainError, ShapeError
from mcl_forge.tensor import Tensor, backward, grad_check, no_grad


def naive_matmul(a, b):
    r, k = a.shape
    _, c = b.shape
    out = np.zeros((r, c))
    for i in range(r):
        for j in range(c):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = tn.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_zero(self):
        out = tn.matmul(Tensor(np.eye(2)), Tensor(np.zeros((2, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 3)))

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(tn.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-14, atol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_rank_three_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 2, 2)))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(tn.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_scale_zero(self):
        np.testing.assert_array_equal(tn.scale(Tensor([1.0, 2.0]), 0).data, [0, 0])

    def test_exp_log_round_trip(self):
        x = np.random.default_rng(0).uniform(0.1, 5.0, size=20)
        np.testing.assert_allclose(tn.log(tn.exp(Tensor(x))).data, x, atol=1e-12, rtol=0)

    def test_log_domain(self):
        with pytest.raises(DomainError):
            tn.log(Tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            tn.log(Tensor([-2.0]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            tn.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
        with pytest.raises(ShapeError):
            tn.mul(Tensor([1.0, 2.0]), Tensor([[1.0, 2.0]]))

    def test_scalar_broadcast(self):
        np.testing.assert_array_equal(tn.add(Tensor([1.0, 2.0]), 1.5).data, [2.5, 3.5])
        np.testing.assert_array_equal(tn.sub(3.0, Tensor([1.0, 2.0])).data, [2.0, 1.0])
        np.testing.assert_array_equal((Tensor([1.0, 2.0]) * 2).data, [2.0, 4.0])

    def test_max_subtract(self):
        out = tn.max_subtract(Tensor([[1.0, 3.0, 2.0], [0.0, -1.0, -5.0]]))
        np.testing.assert_array_equal(out.data, [[-2, 0, -1], [0, -1, -5]])

    def test_log_softmax_matches_composition(self):
        x = np.random.default_rng(1).normal(size=(4, 5)) * 3
        z = tn.max_subtract(Tensor(x))
        manual = z.data - np.log(np.exp(z.data).sum(axis=1, keepdims=True))
        np.testing.assert_allclose(tn.log_softmax(Tensor(x)).data, manual, atol=1e-14)

    def test_finite_on_extreme_logits(self):
        out = tn.log_softmax(Tensor([[1000.0, -1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))


class TestBackward:
    def test_sum_gives_ones(self):
        theta = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        backward(tn.tsum(theta))
        np.testing.assert_array_equal(theta.grad, np.ones((3, 4)))

    def test_half_squared_norm(self):
        v = np.random.default_rng(1).normal(size=(2, 5))
        theta = Tensor(v, requires_grad=True)
        backward(tn.scale(tn.tsum(tn.mul(theta, theta)), 0.5))
        np.testing.assert_allclose(theta.grad, v, rtol=1e-15)

    def test_non_scalar_loss(self):
        theta = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(tn.scale(theta, 2.0))

    def test_two_layer_network_against_finite_differences(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.normal(size=(6, 4)))
        w1 = Tensor(rng.normal(size=(4, 7)), requires_grad=True)
        b1 = Tensor(rng.normal(size=7) * 0.1, requires_grad=True)
        w2 = Tensor(rng.normal(size=(7, 3)), requires_grad=True)
        b2 = Tensor(np.zeros(3), requires_grad=True)
        labels = rng.integers(0, 3, size=6)
        onehot = np.eye(3)[labels]

        def loss():
            h = tn.relu(tn.add_bias(tn.matmul(x, w1), b1))
            logits = tn.add_bias(tn.matmul(h, w2), b2)
            return tn.scale(tn.tsum(tn.mul(tn.log_softmax(logits), Tensor(onehot))), -1.0 / 6)

        assert grad_check(loss, [w1, b1, w2, b2], 1e-5) < 1e-5

    def test_repeat_backward_is_deterministic(self):
        rng = np.random.default_rng(2)
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 3)))
        loss = tn.tsum(tn.exp(tn.matmul(x, w)))
        record = backward(loss)
        first = w.grad.copy()
        w.zero_grad()
        backward(loss, record)
        np.testing.assert_array_equal(w.grad, first)

    def test_record_is_topological(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        b = tn.exp(a)
        c = tn.mul(b, a)
        loss = tn.tsum(c)
        record = tn.build_record(loss)
        pos = {id(n): i for i, n in enumerate(record.nodes)}
        for node in record.nodes:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]

    def test_no_grad_records_nothing(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            out = tn.tsum(tn.exp(a))
        assert not out.requires_grad
        with pytest.raises(ContractError):
            backward(out)

    def test_shared_subexpression_accumulates(self):
        a = Tensor([1.5, -0.5], requires_grad=True)
        loss = tn.tsum(tn.add(a, a))
        backward(loss)
        np.testing.assert_array_equal(a.grad, [2.0, 2.0])


class TestGradCheck:
    def test_linear_exact(self):
        theta = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
        coef = Tensor(np.random.default_rng(1).normal(size=(3, 2)))
        assert grad_check(lambda: tn.tsum(tn.mul(theta, coef)), theta, 1e-5) < 1e-10

    def test_quadratic(self):
        theta = Tensor(np.random.default_rng(2).normal(size=5), requires_grad=True)
        assert grad_check(lambda: tn.tsum(tn.mul(theta, theta)), theta, 1e-5) < 1e-9

    def test_softmax_cross_entropy_network(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(5, 3)))
        w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        onehot = Tensor(np.eye(4)[rng.integers(0, 4, size=5)])
        f = lambda: tn.scale(tn.tsum(tn.mul(tn.log_softmax(tn.matmul(x, w)), onehot)), -0.2)
        assert grad_check(f, w, 1e-5) < 1e-5

    def test_rejects_bad_eps(self):
        theta = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            grad_check(lambda: tn.tsum(theta), theta, 0.0)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "scale", "relu", "exp", "log", "max_subtract", "log_softmax", "add_bias", "matmul"])
def test_each_op_passes_grad_check_over_100_seeds(op):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        coef = Tensor(rng.normal(size=(3, 4)))
        params = [a]
        if op == "add":
            out = lambda: tn.add(a, b)
            params = [a, b]
        elif op == "sub":
            out = lambda: tn.sub(a, b)
            params = [a, b]
        elif op == "mul":
            out = lambda: tn.mul(a, b)
            params = [a, b]
        elif op == "scale":
            out = lambda: tn.scale(a, 1.7)
        elif op == "relu":
            out = lambda: tn.relu(a)
        elif op == "exp":
            out = lambda: tn.exp(a)
        elif op == "log":
            a.data = np.abs(a.data) + 0.5
            out = lambda: tn.log(a)
        elif op == "max_subtract":
            out = lambda: tn.max_subtract(a)
        elif op == "log_softmax":
            out = lambda: tn.log_softmax(a, 2.0)
        elif op == "add_bias":
            bias = Tensor(rng.normal(size=4), requires_grad=True)
            out = lambda: tn.add_bias(a, bias)
            params = [a, bias]
        else:
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            out = lambda: tn.matmul(a, w)
            params = [a, w]
        worst = max(worst, grad_check(lambda: tn.tsum(tn.mul(out(), coef)), params, 1e-5))
    assert worst < 1e-5


def test_no_nan_on_large_finite_inputs():
    x = Tensor(np.array([[700.0, -700.0, 0.0], [1e-300, 1e300, -1e300]]), requires_grad=True)
    out = tn.log_softmax(x)
    backward(tn.tsum(out))
    assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(x.grad))
