import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualnet.fastnet import ClassifierHeads
from dualnet.metrics import AccuracyMatrix, acc, evaluate_task, fm, la, mean_std, summarize
from dualnet.tensor import Tensor
from oracles import metrics_scalar


def test_two_task_worked_example():
    m = AccuracyMatrix.from_rows([[0.9], [0.7, 0.8]])
    assert acc(m) == pytest.approx(0.75, abs=1e-15)
    assert fm(m).value == pytest.approx(0.2, abs=1e-15)
    assert la(m) == pytest.approx(0.85, abs=1e-15)


def test_single_task_degenerate():
    m = AccuracyMatrix.from_rows([[0.6]])
    out = summarize(m)
    assert out["FM"] == 0.0 and "single task" in out["FM_status"]
    assert out["ACC"] == out["LA"] == 0.6


@given(st.integers(1, 6), st.floats(0, 1))
def test_constant_matrix(t, c):
    m = AccuracyMatrix.from_rows([[c] * (i + 1) for i in range(t)])
    assert acc(m) == pytest.approx(c) and la(m) == pytest.approx(c)
    assert fm(m).value == pytest.approx(0.0, abs=1e-12)


lower_triangles = st.integers(1, 6).flatmap(
    lambda t: st.lists(st.lists(st.floats(0, 1), min_size=t, max_size=t), min_size=t, max_size=t)
)


@given(lower_triangles)
def test_metrics_match_scalar_oracle_and_bounds(rows):
    tri = [r[: i + 1] for i, r in enumerate(rows)]
    m = AccuracyMatrix.from_rows(tri)
    a, f, l_ = metrics_scalar(tri)
    assert acc(m) == pytest.approx(a) and fm(m).value == pytest.approx(f) and la(m) == pytest.approx(l_)
    assert 0 <= acc(m) <= 1 and 0 <= la(m) <= 1 and abs(fm(m).value) <= 1


@given(lower_triangles)
def test_monotone_columns_have_zero_forgetting(rows):
    t = len(rows)
    tri = [[0.0] * (i + 1) for i in range(t)]
    for j in range(t):
        col = sorted(rows[i][j] for i in range(j, t))
        for k, i in enumerate(range(j, t)):
            tri[i][j] = col[k]
    assert fm(AccuracyMatrix.from_rows(tri)).value <= 1e-12


def test_negative_forgetting_is_not_clamped():
    m = AccuracyMatrix.from_rows([[0.5], [0.6, 0.7], [0.9, 0.8, 0.6]])
    assert fm(m).value == pytest.approx(-0.2)


def test_permutation_consistency():
    # final row and diagonal are invariant when the task order within them is relabelled
    a = np.array([[0.9, 0, 0], [0.7, 0.8, 0], [0.6, 0.75, 0.95]])
    perm = [2, 0, 1]
    m1 = AccuracyMatrix.from_rows(a.tolist())
    final, diag = a[-1][perm], np.diag(a)[perm]
    assert acc(m1) == pytest.approx(final.mean()) and la(m1) == pytest.approx(diag.mean())


def test_matrix_validation():
    m = AccuracyMatrix(2)
    with pytest.raises(IndexError):
        m.set(0, 1, 0.5)
    with pytest.raises(ValueError):
        m.set(1, 0, 1.5)
    with pytest.raises(ValueError):
        acc(m)


def test_mean_std_population():
    assert mean_std([1.0, 3.0]) == (2.0, 1.0)


# ---------------------------------------------------------------- evaluate
class FixedModel:
    """Returns preset logits for every input row, keyed by the first pixel."""

    def __init__(self, heads, table):
        self.heads = heads
        self.table = table

    def predict(self, x, task=None):
        rows = [self.table[int(v)] for v in x.data[:, 0, 0, 0]]
        return Tensor(np.array(rows, dtype=np.float32))


def images(n):
    return np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1) * np.ones((1, 1, 2, 2), dtype=np.float32)


def test_constant_and_perfect_predictors():
    heads = ClassifierHeads(2, "multi", np.random.default_rng(0))
    heads.register_task(0, [10, 11, 12, 13, 14])
    labels = np.repeat([10, 11, 12, 13, 14], 2)
    constant = FixedModel(heads, {i: [5.0, 0, 0, 0, 0] for i in range(10)})
    assert evaluate_task(constant, images(10), labels, "ta", 0).accuracy == pytest.approx(0.2)
    perfect = FixedModel(heads, {i: np.eye(5)[i // 2] for i in range(10)})
    assert evaluate_task(perfect, images(10), labels, "ta", 0).accuracy == 1.0


def test_hand_counted_fixture_and_tf_exclusion(caplog):
    heads = ClassifierHeads(2, "single", np.random.default_rng(0))
    heads.observe_classes([7, 3])
    table = {0: [1, 0], 1: [0, 1], 2: [0, 1], 3: [0, 1], 4: [1, 0], 5: [0, 1]}
    labels = np.array([7, 3, 7, 3, 9, 9])
    # rows 0, 1, 3 correct; rows 4, 5 belong to an unseen class
    with caplog.at_level(logging.WARNING):
        report = evaluate_task(FixedModel(heads, table), images(6), labels, "tf")
    assert report.accuracy == pytest.approx(3 / 4) and report.n_excluded == 2
    assert "never observed" in caplog.text
    with pytest.raises(ValueError):
        evaluate_task(FixedModel(heads, table), images(0), labels[:0], "tf")
