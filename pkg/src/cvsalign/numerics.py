"""Dense float64 matrices with reverse-mode gradients for a fixed op set.

The tape is not a general autodiff engine: it records only the primitives
the alignment loss needs (matmul, transpose, bias add, row normalization,
exp-scaling, row softmax, KL-to-target, weighted scalar sums) and replays
them in reverse. Reductions accumulate left to right so that every run is
bit-reproducible and matmul matches a naive triple loop exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInputError, DeterminismError, NumericError, ShapeError

NORM_EPS = 1e-12
LOG_FLOOR = 1e-12

_uid_counter = itertools.count(1)


class DenseMatrix:
    """A rows x cols matrix of 64-bit floats in row-major order."""

    __slots__ = ("array", "uid")

    def __init__(self, values) -> None:
        arr = np.array(values, dtype=np.float64, order="C")
        if arr.ndim != 2:
            raise ShapeError(f"DenseMatrix needs 2-D data, got ndim={arr.ndim}")
        if not np.isfinite(arr).all():
            raise NumericError("DenseMatrix entries must all be finite")
        self.array = arr
        self.uid = next(_uid_counter)

    @property
    def rows(self) -> int:
        return self.array.shape[0]

    @property
    def cols(self) -> int:
        return self.array.shape[1]

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the entries."""
        return self.array.reshape(-1)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "DenseMatrix":
        return cls(np.zeros((rows, cols)))

    @classmethod
    def identity(cls, n: int) -> "DenseMatrix":
        return cls(np.eye(n))

    @classmethod
    def scalar(cls, value: float) -> "DenseMatrix":
        return cls(np.array([[float(value)]]))

    def item(self) -> float:
        if self.array.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.array.shape}")
        return float(self.array[0, 0])

    def copy(self) -> "DenseMatrix":
        return DenseMatrix(self.array.copy())

    def __repr__(self) -> str:
        return f"DenseMatrix({self.rows}x{self.cols})"


class GradTape:
    """Records primitive ops and accumulates gradients keyed by matrix uid.

    `backward` zeroes all accumulators, seeds d(loss)/d(loss) = 1 and replays
    the records in reverse order, visiting each exactly once.
    """

    def __init__(self) -> None:
        self._records: list[Callable[[], None]] = []
        self._grads: dict[int, np.ndarray] = {}

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._records.append(backward_fn)

    def grad_of(self, m: DenseMatrix) -> np.ndarray | None:
        return self._grads.get(m.uid)

    def accumulate(self, m: DenseMatrix, g: np.ndarray) -> None:
        cur = self._grads.get(m.uid)
        if cur is None:
            self._grads[m.uid] = np.array(g, dtype=np.float64)
        else:
            cur += g

    def backward(self, loss: DenseMatrix) -> None:
        if loss.array.shape != (1, 1):
            raise ShapeError("backward expects a 1x1 loss matrix")
        self._grads = {loss.uid: np.ones((1, 1))}
        for fn in reversed(self._records):
            fn()

    def gradient(self, param: DenseMatrix) -> np.ndarray:
        """Accumulated gradient for `param`; zeros if the loss never touched it."""
        g = self._grads.get(param.uid)
        if g is None:
            return np.zeros_like(param.array)
        return g.copy()


def rowsum_ordered(arr: np.ndarray) -> np.ndarray:
    """Per-row sum accumulated left to right over columns. arr (n, m) -> (n,)."""
    acc = np.zeros(arr.shape[0])
    for j in range(arr.shape[1]):
        acc += arr[:, j]
    return acc


def colsum_ordered(arr: np.ndarray) -> np.ndarray:
    """Per-column sum accumulated top to bottom over rows. arr (n, m) -> (m,)."""
    acc = np.zeros(arr.shape[1])
    for i in range(arr.shape[0]):
        acc += arr[i, :]
    return acc


def sum_ordered(arr: np.ndarray) -> float:
    """Scalar sum of a row-major matrix, strictly left to right."""
    acc = 0.0
    for v in arr.reshape(-1):
        acc += v
    return acc


def _matmul_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Accumulates over k in order, one fused multiply per element and one add,
    # which is bit-identical to the naive i/j/k triple loop.
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def matmul(a: DenseMatrix, b: DenseMatrix, tape: GradTape | None = None) -> DenseMatrix:
    """Standard product a @ b with deterministic accumulation order."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dimensions differ ({a.rows}x{a.cols} @ {b.rows}x{b.cols})")
    out = DenseMatrix(_matmul_arrays(a.array, b.array))
    if tape is not None:

        def backward() -> None:
            g = tape.grad_of(out)
            if g is None:
                return
            tape.accumulate(a, _matmul_arrays(g, b.array.T))
            tape.accumulate(b, _matmul_arrays(a.array.T, g))

        tape.record(backward)
    return out


def transpose(m: DenseMatrix, tape: GradTape | None = None) -> DenseMatrix:
    out = DenseMatrix(m.array.T)
    if tape is not None:

        def backward() -> None:
            g = tape.grad_of(out)
            if g is None:
                return
            tape.accumulate(m, g.T)

        tape.record(backward)
    return out


def add_row_vector(m: DenseMatrix, v: DenseMatrix, tape: GradTape | None = None) -> DenseMatrix:
    """Broadcast-add the 1 x cols vector v to every row of m."""
    if v.rows != 1 or v.cols != m.cols:
        raise ShapeError(f"add_row_vector: vector must be 1x{m.cols}, got {v.rows}x{v.cols}")
    out = DenseMatrix(m.array + v.array)
    if tape is not None:

        def backward() -> None:
            g = tape.grad_of(out)
            if g is None:
                return
            tape.accumulate(m, g)
            tape.accumulate(v, colsum_ordered(g)[None, :])

        tape.record(backward)
    return out


def l2_normalize_rows(m: DenseMatrix, tape: GradTape | None = None) -> DenseMatrix:
    """Scale each row to unit L2 norm.

    Backward applies the per-row normalization Jacobian (I - uu^T)/||x||.
    """
    sq = m.array * m.array
    norms = np.sqrt(rowsum_ordered(sq))
    for i, n in enumerate(norms):
        if n <= NORM_EPS:
            raise DegenerateInputError(f"l2_normalize_rows: row {i} has norm {n:.3e} <= {NORM_EPS}")
    unit = m.array / norms[:, None]
    out = DenseMatrix(unit)
    if tape is not None:

        def backward() -> None:
            g = tape.grad_of(out)
            if g is None:
                return
            dot = rowsum_ordered(unit * g)
            tape.accumulate(m, (g - unit * dot[:, None]) / norms[:, None])

        tape.record(backward)
    return out


def scale_by_exp(m: DenseMatrix, theta: DenseMatrix, tape: GradTape | None = None) -> DenseMatrix:
    """Multiply every entry by exp(theta), theta a learnable 1x1 scalar."""
    t = theta.item()
    c = np.exp(t)
    if not np.isfinite(c):
        raise NumericError(f"scale_by_exp: exp({t}) is not finite")
    out = DenseMatrix(m.array * c)
    if tape is not None:

        def backward() -> None:
            g = tape.grad_of(out)
            if g is None:
                return
            tape.accumulate(m, g * c)
            tape.accumulate(theta, np.array([[sum_ordered(g * m.array) * c]]))

        tape.record(backward)
    return out


def softmax_rows(m: DenseMatrix, tape: GradTape | None = None) -> DenseMatrix:
    """Row-wise softmax with max subtraction for stability."""
    shifted = m.array - m.array.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / rowsum_ordered(e)[:, None]
    out = DenseMatrix(p)
    if tape is not None:

        def backward() -> None:
            g = tape.grad_of(out)
            if g is None:
                return
            dot = rowsum_ordered(p * g)
            tape.accumulate(m, p * (g - dot[:, None]))

        tape.record(backward)
    return out


def kl_mean_rows(
    predicted: DenseMatrix,
    target: np.ndarray,
    tape: GradTape | None = None,
) -> DenseMatrix:
    """Mean over rows of sum_k Q[j,k] * (log Q[j,k] - log max(P[j,k], floor)).

    `target` is a constant row-stochastic matrix; 0*log 0 is taken as 0.
    """
    p = predicted.array
    q = np.asarray(target, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError(f"kl_mean_rows: shapes differ {p.shape} vs {q.shape}")
    n = p.shape[0]
    support = q > 0.0
    p_floored = np.maximum(p, LOG_FLOOR)
    terms = np.where(support, q * (np.log(np.where(support, q, 1.0)) - np.log(p_floored)), 0.0)
    value = sum_ordered(rowsum_ordered(terms)[None, :]) / n
    out = DenseMatrix.scalar(value)
    if tape is not None:

        def backward() -> None:
            g = tape.grad_of(out)
            if g is None:
                return
            # d/dP of -Q*log(max(P, floor)) is 0 below the floor.
            live = support & (p > LOG_FLOOR)
            gp = np.where(live, -q / p_floored, 0.0) * (g[0, 0] / n)
            tape.accumulate(predicted, gp)

        tape.record(backward)
    return out


def weighted_sum_scalars(
    terms: Sequence[DenseMatrix],
    weights: Sequence[float],
    tape: GradTape | None = None,
) -> DenseMatrix:
    """Left-to-right sum of w_i * terms_i over 1x1 matrices."""
    if len(terms) != len(weights):
        raise ShapeError("weighted_sum_scalars: lengths differ")
    acc = 0.0
    for t, w in zip(terms, weights):
        acc += w * t.item()
    out = DenseMatrix.scalar(acc)
    if tape is not None:

        def backward() -> None:
            g = tape.grad_of(out)
            if g is None:
                return
            for t, w in zip(terms, weights):
                tape.accumulate(t, g * w)

        tape.record(backward)
    return out


@dataclass
class CheckReport:
    """Result of comparing tape gradients against central finite differences."""

    max_rel_error: float
    worst_param: str
    worst_index: int
    analytic_at_worst: float
    numeric_at_worst: float
    tol: float
    h: float
    failures: list[tuple[str, int, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:.1e}, h {self.h:.1e}) "
            f"worst: {self.worst_param}[{self.worst_index}] "
            f"analytic={self.analytic_at_worst:.6e} numeric={self.numeric_at_worst:.6e}"
        )


def finite_diff_check(
    loss_fn: Callable[[dict[str, DenseMatrix], GradTape | None], DenseMatrix],
    params: dict[str, DenseMatrix],
    h: float = 1e-5,
    tol: float = 1e-4,
    denom_floor: float = 1e-4,
) -> CheckReport:
    """Central-difference check of every parameter coordinate.

    `loss_fn(params, tape)` must evaluate a 1x1 loss, recording on the tape
    when one is given, and must be deterministic; a repeated evaluation that
    differs bit-for-bit raises DeterminismError. Relative error uses
    max(|analytic|, |numeric|, denom_floor) as denominator so coordinates
    with near-zero gradients are judged on an absolute scale.
    """
    if h <= 0.0:
        raise NumericError(f"finite_diff_check: h must be > 0, got {h}")

    tape = GradTape()
    loss = loss_fn(params, tape)
    tape.backward(loss)
    analytic = {name: tape.gradient(p) for name, p in params.items()}

    base = loss_fn(params, None).item()
    again = loss_fn(params, None).item()
    if base != again:
        raise DeterminismError(f"loss_fn returned {base!r} then {again!r} on identical inputs")

    max_rel = 0.0
    worst = ("", 0, 0.0, 0.0)
    failures: list[tuple[str, int, float]] = []
    for name in sorted(params):
        arr = params[name].array
        grad = analytic[name]
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            up = loss_fn(params, None).item()
            flat[idx] = orig - h
            down = loss_fn(params, None).item()
            flat[idx] = orig
            numeric = (up - down) / (2.0 * h)
            a = gflat[idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            if rel >= tol:
                failures.append((name, idx, rel))
            if rel > max_rel or worst[0] == "":
                max_rel = max(max_rel, rel)
                worst = (name, idx, a, numeric)

    return CheckReport(
        max_rel_error=max_rel,
        worst_param=worst[0],
        worst_index=worst[1],
        analytic_at_worst=worst[2],
        numeric_at_worst=worst[3],
        tol=tol,
        h=h,
        failures=failures,
    )
