import numpy as np
import pytest

from goodlab import tape
from goodlab.tape import Value


def leaf(data):
    return Value(np.asarray(data, dtype=np.float64), requires_grad=True)


def scalarize(v):
    """Reduce any op output to a scalar so gradcheck applies."""
    if v.data.shape == ():
        return v
    return tape.tsum(tape.hadamard(v, v)) if v.data.ndim else v


def _sparse_structure(rng, n, nnz):
    rows = rng.integers(0, n, nnz)
    cols = rng.integers(0, n, nnz)
    return rows, cols


def op_cases(rng):
    """One gradcheckable instance per registered op."""
    n = 5
    rows, cols = _sparse_structure(rng, n, 8)
    indptr = np.array([0, 2, 2, 5, 6, 7])
    seg = np.array([0, 0, 1, 2, 2, 2, 4])
    onehot = np.eye(3)[rng.integers(0, 3, n)]
    target = rng.standard_normal((n, 2))
    cases = {
        "add": lambda a=leaf(rng.standard_normal((3, 2))), b=leaf(rng.standard_normal((3, 2))):
            scalarize(tape.add(a, b)),
        "sub": lambda a=leaf(rng.standard_normal(4)), b=leaf(rng.standard_normal(4)):
            scalarize(tape.sub(a, b)),
        "scale": lambda a=leaf(rng.standard_normal(4)): scalarize(tape.scale(a, -1.7)),
        "scalar_mul": lambda s=leaf(0.8), a=leaf(rng.standard_normal((2, 3))):
            scalarize(tape.scalar_mul(s, a)),
        "hadamard": lambda a=leaf(rng.standard_normal(5)), b=leaf(rng.standard_normal(5)):
            scalarize(tape.hadamard(a, b)),
        "matmul": lambda a=leaf(rng.standard_normal((4, 3))), b=leaf(rng.standard_normal((3, 2))):
            scalarize(tape.matmul(a, b)),
        "sparse_dense_matmul": lambda v=leaf(rng.standard_normal(8)),
            d=leaf(rng.standard_normal((n, 2))):
            scalarize(tape.sparse_dense_matmul(v, rows, cols, n, d)),
        "relu": lambda a=leaf(rng.standard_normal(6) + 0.3): scalarize(tape.relu(a)),
        "leaky_relu": lambda a=leaf(rng.standard_normal(6) + 0.3): scalarize(tape.leaky_relu(a)),
        "sigmoid": lambda a=leaf(rng.standard_normal(5)): scalarize(tape.sigmoid(a)),
        "log": lambda a=leaf(rng.random(5) + 0.5): scalarize(tape.log(a)),
        "powc": lambda a=leaf(rng.random(5) + 0.5): scalarize(tape.powc(a, -0.5)),
        "clamp": lambda a=leaf(rng.standard_normal(6) * 2): scalarize(tape.clamp(a, -1.0, 1.0)),
        "row_softmax": lambda a=leaf(rng.standard_normal((4, 3))): scalarize(tape.row_softmax(a)),
        "segment_softmax": lambda a=leaf(rng.standard_normal(7)):
            scalarize(tape.segment_softmax(a, indptr)),
        "segment_sum": lambda a=leaf(rng.standard_normal(7)):
            scalarize(tape.segment_sum(a, seg, 5)),
        "gather_rows": lambda a=leaf(rng.standard_normal((5, 2))):
            scalarize(tape.gather_rows(a, np.array([0, 2, 2, 4]))),
        "row_sum": lambda a=leaf(rng.standard_normal((4, 3))): scalarize(tape.row_sum(a)),
        "concat1d": lambda a=leaf(rng.standard_normal(3)), b=leaf(rng.standard_normal(4)):
            scalarize(tape.concat1d([a, b])),
        "add_rowvec": lambda a=leaf(rng.standard_normal((4, 3))), b=leaf(rng.standard_normal(3)):
            scalarize(tape.add_rowvec(a, b)),
        "stack_scalars": lambda a=leaf(0.3), b=leaf(-1.2):
            scalarize(tape.stack_scalars([a, b])),
        "tsum": lambda a=leaf(rng.standard_normal(6)): tape.tsum(a),
        "tmean": lambda a=leaf(rng.standard_normal(6)): tape.tmean(a),
        "population_variance": lambda a=leaf(rng.standard_normal(6)):
            tape.population_variance(a),
        "sq_l2_norm": lambda a=leaf(rng.standard_normal((3, 2))): tape.sq_l2_norm(a),
        "row_sqnorm": lambda a=leaf(rng.standard_normal((4, 3))): scalarize(tape.row_sqnorm(a)),
        "cross_entropy_with_logits": lambda a=leaf(rng.standard_normal((n, 3))):
            tape.cross_entropy_with_logits(a, onehot, np.array([0, 2, 3])),
        "mse": lambda a=leaf(rng.standard_normal((n, 2))): tape.mse(a, target, np.array([1, 4])),
    }
    return cases


class TestOpRegistry:
    def test_every_registered_op_has_a_case(self):
        assert set(op_cases(np.random.default_rng(0))) == set(tape.OPS)

    @pytest.mark.parametrize("point", range(10))
    def test_randomized_gradcheck_all_ops(self, point):
        rng = np.random.default_rng(1000 + point)
        for name, build in op_cases(rng).items():
            f = build
            params = [v for v in f.__defaults__ if isinstance(v, Value)]
            err = tape.gradcheck(f, params)
            assert err < 1e-4, f"op {name} gradcheck failed: {err}"


class TestBasics:
    def test_quadratic_derivative(self):
        x = leaf(3.0)
        y = tape.hadamard(x, x)
        tape.backward(y)
        assert x.grad == pytest.approx(6.0)

    def test_uniform_softmax_and_ce_gradient(self):
        logits = leaf(np.zeros((4, 4)))
        sm = tape.row_softmax(logits)
        assert sm.data == pytest.approx(np.full((4, 4), 0.25))
        onehot = np.eye(4)
        loss = tape.cross_entropy_with_logits(logits, onehot)
        tape.backward(loss)
        assert logits.grad == pytest.approx((sm.data - onehot) / 4)

    def test_matmul_chain_gradcheck(self):
        rng = np.random.default_rng(2)
        a, b, c = leaf(rng.standard_normal((5, 4))), leaf(rng.standard_normal((4, 4))), \
            leaf(rng.standard_normal((4, 2)))
        err = tape.gradcheck(lambda: tape.sq_l2_norm(tape.matmul(tape.matmul(a, b), c)), [a, b, c])
        assert err < 1e-4

    def test_population_variance_values(self):
        assert tape.population_variance(leaf([2.0, 2.0, 2.0, 2.0])).item() == 0.0
        assert tape.population_variance(leaf([1.0, 3.0])).item() == 1.0

    def test_backward_deterministic(self):
        rng = np.random.default_rng(3)
        data = rng.standard_normal((6, 3))
        grads = []
        for _ in range(2):
            x = leaf(data.copy())
            y = tape.tsum(tape.row_sqnorm(tape.relu(tape.matmul(x, x.data.T @ np.eye(6)[:, :3]))))
            tape.backward(y)
            grads.append(x.grad.copy())
        assert np.array_equal(grads[0], grads[1])

    def test_nonfinite_intermediate_raises(self):
        x = leaf([1.0, 0.0])
        with pytest.raises(tape.NonFiniteError):
            tape.log(x)


class TestGradcheckContract:
    def test_linear_function_machine_epsilon(self):
        x = leaf(np.array([1.0, -2.0, 3.0]))
        err = tape.gradcheck(lambda: tape.tsum(tape.scale(x, 2.5)), [x])
        assert err < 1e-9

    def test_constant_function_zero(self):
        x = leaf(np.array([1.0, 2.0]))
        err = tape.gradcheck(lambda: tape.tsum(tape.scale(x, 0.0)), [x])
        assert err == 0.0

    def test_eps_validation(self):
        x = leaf(1.0)
        with pytest.raises(ValueError):
            tape.gradcheck(lambda: x, [x], eps=0.1)


class TestOptimizers:
    def test_sgd_single_step(self):
        p = leaf(1.0)
        p.grad = np.asarray(2.0)
        tape.sgd_step([p], lr=0.1)
        assert p.data == pytest.approx(0.8)

    def test_zero_gradient_no_change(self):
        p = leaf(np.array([1.0, 2.0]))
        p.grad = np.zeros(2)
        adam = tape.AdamState([p], lr=0.5)
        adam.step([p])
        assert p.data == pytest.approx(np.array([1.0, 2.0]))

    def test_adam_quadratic_bowl(self):
        p = leaf(np.array([1.0, -1.5]))
        adam = tape.AdamState([p], lr=0.1)
        for _ in range(200):
            tape.zero_grad([p])
            loss = tape.sq_l2_norm(p)
            tape.backward(loss)
            adam.step([p])
        assert tape.sq_l2_norm(p).item() < 1e-6

    def test_nonfinite_gradient_aborts(self):
        p = leaf(1.0)
        p.grad = np.asarray(np.nan)
        with pytest.raises(tape.DivergenceError):
            tape.AdamState([p], lr=0.1).step([p])
        with pytest.raises(tape.DivergenceError):
            tape.sgd_step([p], lr=0.1)
