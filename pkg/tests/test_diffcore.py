import numpy as np
import pytest
from numpy.testing import assert_allclose

from koafusion import diffcore as dc
from koafusion.diffcore import Tensor, grad_check
from koafusion.errors import ContractViolation, NonFiniteValue

SEEDS = range(10)


def leaf(rng, shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


class TestBackwardBasics:
    def test_chain_rule_scalar(self):
        x = Tensor(3.0, requires_grad=True)
        y = (x * x + x) * Tensor(2.0)
        y.backward()
        assert_allclose(x.grad, 14.0)  # d/dx 2(x^2 + x) = 4x + 2

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x * x  # x used three times through two muls
        y.backward()
        assert_allclose(x.grad, 12.0)

    def test_backward_requires_scalar_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractViolation):
            (x * x).backward()

    def test_double_backward_guarded(self):
        x = Tensor(1.0, requires_grad=True)
        y = x * x
        y.backward()
        with pytest.raises(ContractViolation):
            y.backward()

    def test_no_grad_graph_rejected_at_root(self):
        y = Tensor(1.0) * Tensor(2.0)
        with pytest.raises(ContractViolation):
            y.backward()

    def test_tape_is_topologically_ordered(self):
        x = Tensor(1.0, requires_grad=True)
        a = x * x
        b = a + x
        c = b * a
        order = dc.tape(c)
        pos = {id(t): i for i, t in enumerate(order)}
        assert pos[id(x)] < pos[id(a)] < pos[id(b)] < pos[id(c)]

    def test_broadcast_add_sums_gradient(self):
        b = Tensor(np.zeros(3), requires_grad=True)
        x = Tensor(np.ones((4, 3)))
        y = dc.tensor_sum(x + b)
        y.backward()
        assert_allclose(b.grad, np.full(3, 4.0))


class TestNanPolicy:
    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_forward_raises(self):
        with pytest.raises(NonFiniteValue):
            dc.log(Tensor(-1.0, requires_grad=True))
        with pytest.raises(NonFiniteValue):
            Tensor(1.0) / Tensor(0.0)
        with pytest.raises(NonFiniteValue):
            dc.exp(Tensor(1000.0))

    def test_nonfinite_constructor_raises(self):
        with pytest.raises(NonFiniteValue):
            Tensor(np.array([1.0, np.nan]))


class TestPrimitiveGradients:
    """Central-difference checks for every differentiable primitive."""

    @pytest.mark.parametrize("seed", SEEDS)
    def test_arithmetic(self, seed):
        rng = np.random.default_rng(seed)
        a = leaf(rng, (3, 4), lo=0.5, hi=2.5)  # divisor, keep away from zero
        b = leaf(rng, (3, 4))

        def fn(a, b):
            return dc.tensor_sum(a * b + b - b / a + (a + b) * Tensor(0.5))

        assert grad_check(fn, [a, b], eps=1e-6) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_exp_log_pow(self, seed):
        rng = np.random.default_rng(seed)
        a = leaf(rng, (5,), lo=0.2, hi=1.8)

        def fn(a):
            return dc.tensor_sum(dc.exp(a) + dc.log(a) + a ** 2.5 + a ** 0.0)

        assert grad_check(fn, [a], eps=1e-6) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_relu(self, seed):
        rng = np.random.default_rng(seed)
        a = leaf(rng, (4, 4))
        a.data[np.abs(a.data) < 1e-3] += 0.1  # keep coords away from the kink
        w = Tensor(rng.normal(size=(4, 4)))

        def fn(a):
            return dc.tensor_sum(dc.relu(a) * w)

        assert grad_check(fn, [a], eps=1e-5) < 1e-4

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul_2d_and_batched(self, seed):
        rng = np.random.default_rng(seed)
        a = leaf(rng, (3, 4))
        b = leaf(rng, (4, 2))
        c = leaf(rng, (2, 3, 4))
        d = leaf(rng, (2, 4, 2))
        w = Tensor(rng.normal(size=(2, 3, 2)))

        def fn(a, b, c, d):
            y1 = dc.tensor_sum(a @ b)
            y2 = dc.tensor_sum((c @ d) * w)
            return y1 + y2

        assert grad_check(fn, [a, b, c, d], eps=1e-6) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul_broadcast_batch(self, seed):
        rng = np.random.default_rng(seed)
        a = leaf(rng, (3, 4))  # broadcast against a batched rhs
        b = leaf(rng, (5, 4, 2))

        def fn(a, b):
            return dc.tensor_sum(a @ b)

        assert grad_check(fn, [a, b], eps=1e-6) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul_vector_cases(self, seed):
        rng = np.random.default_rng(seed)
        m = leaf(rng, (3, 4))
        v = leaf(rng, (4,))
        u = leaf(rng, (3,))
        w = Tensor(rng.normal(size=3))

        def fn(m, v, u):
            return dc.tensor_sum((m @ v) * w) + dc.tensor_sum(u @ m)

        assert grad_check(fn, [m, v, u], eps=1e-6) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_conv2d(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, (2, 2, 5, 5))
        w = leaf(rng, (3, 2, 3, 3))
        b = leaf(rng, (3,))

        def fn(x, w, b):
            return dc.tensor_sum(dc.conv2d(x, w, b, stride=2, padding=1) ** 2.0)

        assert grad_check(fn, [x, w, b], eps=1e-6) < 1e-5

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax_and_log_softmax(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, (4, 5))
        w = Tensor(rng.normal(size=(4, 5)))

        def fn(x):
            return dc.tensor_sum(dc.softmax(x) * w) + dc.tensor_sum(dc.log_softmax(x) * w)

        assert grad_check(fn, [x], eps=1e-6) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, (3, 6))
        g = leaf(rng, (6,), lo=0.5, hi=1.5)
        b = leaf(rng, (6,))
        w = Tensor(rng.normal(size=(3, 6)))

        def fn(x, g, b):
            return dc.tensor_sum(dc.layer_norm(x, g, b) * w)

        assert grad_check(fn, [x, g, b], eps=1e-6) < 1e-5

    @pytest.mark.parametrize("seed", SEEDS)
    def test_reductions_and_reshapes(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, (2, 3, 4))

        def fn(x):
            y = dc.tensor_sum(x, axis=1, keepdims=True)
            z = dc.transpose(dc.reshape(x, (6, 4)), (1, 0))
            m = dc.mean(x, axis=(0, 2))
            return dc.tensor_sum(y) + dc.tensor_sum(z ** 2.0) + dc.tensor_sum(m * m)

        assert grad_check(fn, [x], eps=1e-6) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_concat_and_gap(self, seed):
        rng = np.random.default_rng(seed)
        a = leaf(rng, (2, 3))
        b = leaf(rng, (2, 2))
        x = leaf(rng, (2, 3, 4, 4))

        def fn(a, b, x):
            joined = dc.concat([a, b], axis=1)
            return dc.tensor_sum(joined ** 2.0) + dc.tensor_sum(dc.global_average_pool(x))

        assert grad_check(fn, [a, b, x], eps=1e-6) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_embedding(self, seed):
        rng = np.random.default_rng(seed)
        table = leaf(rng, (7, 4))
        idx = rng.integers(0, 7, size=6)

        def fn(table):
            return dc.tensor_sum(dc.embedding(table, idx) ** 2.0)

        assert grad_check(fn, [table], eps=1e-6) < 1e-6

    @pytest.mark.parametrize("seed", SEEDS)
    def test_dropout_fixed_mask(self, seed):
        rng = np.random.default_rng(seed)
        x = leaf(rng, (6, 6))

        def fn(x):
            # fresh generator per call keeps the mask identical across evals
            return dc.tensor_sum(dc.dropout(x, 0.4, np.random.default_rng(123), training=True))

        assert grad_check(fn, [x], eps=1e-6) < 1e-6

    def test_div_and_power_edge_rules(self):
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        y = dc.tensor_sum(x ** 0.0)
        y.backward()
        assert_allclose(x.grad, [0.0, 0.0])  # constant-one has zero gradient


class TestDropoutSemantics:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.ones((3, 3)), requires_grad=True)
        assert dc.dropout(x, 0.5, training=False) is x

    def test_inverted_scaling_preserves_expectation(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.ones(2000))
        out = dc.dropout(x, 0.25, rng, training=True)
        assert abs(out.data.mean() - 1.0) < 0.05

    def test_training_requires_rng(self):
        with pytest.raises(ContractViolation):
            dc.dropout(Tensor(np.ones(3)), 0.5, training=True)


class TestGradCheckApi:
    def test_subsampling_bounds_coordinates(self):
        rng = np.random.default_rng(0)
        x = leaf(rng, (50,))
        calls = {"n": 0}

        def fn(x):
            calls["n"] += 1
            return dc.tensor_sum(x * x)

        err = grad_check(fn, [x], max_coords=5)
        assert err < 1e-6
        assert calls["n"] == 1 + 2 * 5  # one analytic pass + 2 per coordinate

    def test_detects_wrong_gradient(self):
        x = Tensor(np.ones(3), requires_grad=True)

        def fn(x):
            out = dc.tensor_sum(x * x)
            broken = Tensor(out.data, _parents=(x,), _op="broken")
            broken.requires_grad = True
            broken._backward = lambda g: dc._accum(x, np.zeros_like(x.data))
            return broken

        assert grad_check(fn, [x]) > 0.5
