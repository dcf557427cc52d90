import numpy as np
import pytest

from cvsalign.errors import DegenerateInputError, DeterminismError, NumericError, ShapeError
from cvsalign.numerics import (
    DenseMatrix,
    GradTape,
    add_row_vector,
    finite_diff_check,
    kl_mean_rows,
    l2_normalize_rows,
    matmul,
    scale_by_exp,
    softmax_rows,
    transpose,
    weighted_sum_scalars,
)


def naive_matmul(a, b):
    """Independent triple-loop oracle, accumulating over k in order."""
    rows, inner, cols = len(a), len(b), len(b[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for k in range(inner):
                acc += a[i][k] * b[k][j]
            out[i][j] = acc
    return out


class TestDenseMatrix:
    def test_fields(self):
        m = DenseMatrix([[1.0, 2.0], [3.0, 4.0]])
        assert (m.rows, m.cols) == (2, 2)
        assert m.data.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            DenseMatrix([[1.0, float("nan")]])
        with pytest.raises(NumericError):
            DenseMatrix([[float("inf")]])

    def test_rejects_wrong_ndim(self):
        with pytest.raises(ShapeError):
            DenseMatrix([1.0, 2.0])


class TestMatmul:
    def test_identity(self):
        m = DenseMatrix([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(DenseMatrix.identity(2), m)
        assert out.array.tobytes() == m.array.tobytes()

    def test_hand_checked(self):
        out = matmul(DenseMatrix([[1.0, 2.0], [3.0, 4.0]]), DenseMatrix([[1.0], [1.0]]))
        assert out.array.tolist() == [[3.0], [7.0]]

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(DenseMatrix.zeros(2, 3), DenseMatrix.zeros(2, 3))

    def test_matches_triple_loop_bit_for_bit(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            r, k, c = (int(v) for v in rng.integers(1, 17, size=3))
            a = rng.standard_normal((r, k))
            b = rng.standard_normal((k, c))
            got = matmul(DenseMatrix(a), DenseMatrix(b)).array
            want = np.array(naive_matmul(a.tolist(), b.tolist()))
            assert got.tobytes() == want.tobytes(), f"seed {seed}: accumulation order differs"


class TestL2NormalizeRows:
    def test_three_four_five(self):
        out = l2_normalize_rows(DenseMatrix([[3.0, 4.0]]))
        assert out.array.tolist() == [[0.6, 0.8]]

    def test_unit_row_unchanged(self):
        out = l2_normalize_rows(DenseMatrix([[1.0, 0.0, 0.0]]))
        assert out.array.tolist() == [[1.0, 0.0, 0.0]]

    def test_output_norm_one(self):
        rng = np.random.default_rng(3)
        out = l2_normalize_rows(DenseMatrix(rng.standard_normal((5, 7))))
        norms = np.sqrt((out.array**2).sum(axis=1))
        assert np.abs(norms - 1.0).max() <= 1e-12

    def test_zero_row_names_index(self):
        with pytest.raises(DegenerateInputError, match="row 1"):
            l2_normalize_rows(DenseMatrix([[1.0, 2.0], [0.0, 0.0]]))


class TestSoftmaxRows:
    def test_constant_row_uniform(self):
        out = softmax_rows(DenseMatrix([[5.5, 5.5, 5.5]]))
        assert np.abs(out.array - 1.0 / 3.0).max() <= 1e-15

    def test_one_zero(self):
        out = softmax_rows(DenseMatrix([[1.0, 0.0]]))
        assert abs(out.array[0, 0] - 0.7311) <= 1e-4
        assert abs(out.array[0, 1] - 0.2689) <= 1e-4

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(9)
        out = softmax_rows(DenseMatrix(100.0 * rng.standard_normal((8, 6))))
        sums = out.array.sum(axis=1)
        assert np.abs(sums - 1.0).max() <= 1e-9

    def test_shift_invariance(self):
        rng = np.random.default_rng(10)
        x = rng.standard_normal((4, 5))
        a = softmax_rows(DenseMatrix(x)).array
        b = softmax_rows(DenseMatrix(x + 123.456)).array
        assert np.abs(a - b).max() <= 1e-9


def probe(op, x: DenseMatrix, tape: GradTape | None, seed: int) -> DenseMatrix:
    """Reduce op(x) to a scalar through fixed random matmuls on both sides."""
    out = op(x, tape)
    rng = np.random.default_rng(seed + 10_000)
    u = DenseMatrix(rng.standard_normal((1, out.rows)))
    v = DenseMatrix(rng.standard_normal((out.cols, 1)))
    return matmul(matmul(u, out, tape), v, tape)


@pytest.mark.parametrize(
    "name,op",
    [
        ("matmul_left", lambda x, tape, c: matmul(x, c, tape)),
        ("matmul_right", lambda x, tape, c: matmul(c, x, tape)),
        ("transpose", lambda x, tape, c: transpose(x, tape)),
        ("l2_normalize_rows", lambda x, tape, c: l2_normalize_rows(x, tape)),
        ("softmax_rows", lambda x, tape, c: softmax_rows(x, tape)),
        ("add_row_vector", lambda x, tape, c: add_row_vector(c, x, tape)),
    ],
)
def test_primitive_backward_matches_finite_differences(name, op):
    # 100-seed property: every primitive's backward agrees with central
    # differences at h=1e-5 within 1e-4 relative error.
    for seed in range(100):
        rng = np.random.default_rng(seed)
        if name == "add_row_vector":
            x = DenseMatrix(rng.standard_normal((1, 4)))
            const = DenseMatrix(rng.standard_normal((3, 4)))
        else:
            x = DenseMatrix(rng.standard_normal((3, 4)))
            const = DenseMatrix(rng.standard_normal((4, 3)))

        def loss_fn(params, tape):
            return probe(lambda m, t: op(m, t, const), params["x"], tape, seed)

        report = finite_diff_check(loss_fn, {"x": x}, h=1e-5, tol=1e-4)
        assert report.passed, f"{name} seed {seed}: {report.summary()}"


def test_scale_by_exp_backward():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = DenseMatrix(rng.standard_normal((3, 3)))
        theta = DenseMatrix.scalar(rng.uniform(-1.0, 1.5))

        def loss_fn(params, tape):
            return probe(lambda m, t: scale_by_exp(m, params["theta"], t), params["x"], tape, seed)

        report = finite_diff_check(loss_fn, {"x": x, "theta": theta}, h=1e-5, tol=1e-4)
        assert report.passed, f"seed {seed}: {report.summary()}"


def test_kl_mean_rows_backward():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = DenseMatrix(rng.uniform(0.05, 1.0, size=(3, 4)))
        q = rng.uniform(0.0, 1.0, size=(3, 4))
        q /= q.sum(axis=1, keepdims=True)

        def loss_fn(params, tape):
            return kl_mean_rows(params["p"], q, tape)

        report = finite_diff_check(loss_fn, {"p": p}, h=1e-5, tol=1e-4)
        assert report.passed, f"seed {seed}: {report.summary()}"


def test_weighted_sum_scalars_backward():
    a = DenseMatrix.scalar(1.5)
    b = DenseMatrix.scalar(-0.25)

    def loss_fn(params, tape):
        return weighted_sum_scalars([params["a"], params["b"]], [2.0, -3.0], tape)

    report = finite_diff_check(loss_fn, {"a": a, "b": b}, h=1e-5, tol=1e-4)
    assert report.passed, report.summary()


class TestGradTape:
    def test_accumulators_zeroed_between_backward_passes(self):
        x = DenseMatrix([[1.0, 2.0]])
        tape = GradTape()
        loss = matmul(x, transpose(x, tape), tape)
        tape.backward(loss)
        first = tape.gradient(x)
        tape.backward(loss)
        assert tape.gradient(x).tobytes() == first.tobytes()

    def test_reused_operand_accumulates_both_paths(self):
        # loss = x x^T for a row vector x has gradient 2x.
        x = DenseMatrix([[1.0, -2.0, 0.5]])
        tape = GradTape()
        loss = matmul(x, transpose(x, tape), tape)
        tape.backward(loss)
        assert np.allclose(tape.gradient(x), 2.0 * x.array, rtol=0, atol=0)

    def test_untouched_parameter_gets_zero_gradient(self):
        x = DenseMatrix([[1.0, 2.0]])
        other = DenseMatrix([[3.0, 4.0]])
        tape = GradTape()
        loss = matmul(x, transpose(x, tape), tape)
        tape.backward(loss)
        assert tape.gradient(other).tolist() == [[0.0, 0.0]]

    def test_backward_needs_scalar(self):
        tape = GradTape()
        out = matmul(DenseMatrix([[1.0, 0.0]]), DenseMatrix([[1.0, 2.0], [3.0, 4.0]]), tape)
        with pytest.raises(ShapeError):
            tape.backward(out)


class TestFiniteDiffCheck:
    def test_quadratic_analytic_gradient(self):
        theta = DenseMatrix([[1.0, 2.0]])

        def loss_fn(params, tape):
            t = params["theta"]
            return matmul(t, transpose(t, tape), tape)

        report = finite_diff_check(loss_fn, {"theta": theta}, h=1e-5, tol=1e-4)
        assert report.max_rel_error < 1e-8
        tape = GradTape()
        tape.backward(loss_fn({"theta": theta}, tape))
        assert np.allclose(tape.gradient(theta), [[2.0, 4.0]], rtol=0, atol=1e-15)

    def test_constant_loss_zero_gradient(self):
        x = DenseMatrix([[0.3, -0.7]])
        const = DenseMatrix.scalar(4.25)

        def loss_fn(params, tape):
            return weighted_sum_scalars([const], [1.0], tape)

        report = finite_diff_check(loss_fn, {"x": x}, h=1e-5, tol=1e-4)
        assert report.max_rel_error == 0.0

    def test_detects_nondeterministic_loss(self):
        calls = []

        def loss_fn(params, tape):
            calls.append(1)
            return DenseMatrix.scalar(float(len(calls)))

        with pytest.raises(DeterminismError):
            finite_diff_check(loss_fn, {"x": DenseMatrix([[1.0]])}, h=1e-5, tol=1e-4)

    def test_rejects_nonpositive_h(self):
        with pytest.raises(NumericError):
            finite_diff_check(lambda p, t: DenseMatrix.scalar(0.0), {}, h=0.0)
