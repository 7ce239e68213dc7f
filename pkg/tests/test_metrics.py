import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from signa.metrics import (
    evaluate, example_based_scores, f_beta, label_based_scores, per_class_report, write_report,
)


def _safe(num, den, vacuous):
    if den == 0:
        return 1.0 if vacuous else 0.0
    return num / den


def _fb(p, r, beta):
    if p == 0 and r == 0:
        return 0.0
    return (1 + beta**2) * p * r / (beta**2 * p + r)


def oracle_scores(pred, target):
    """Plain loops over examples and classes, kept independent of the vectorised code."""
    n, c = len(pred), len(pred[0])
    pe = re = 0.0
    for i in range(n):
        tp = fp = fn = 0
        for j in range(c):
            if pred[i][j] and target[i][j]:
                tp += 1
            elif pred[i][j]:
                fp += 1
            elif target[i][j]:
                fn += 1
        pe += _safe(tp, tp + fp, fn == 0)
        re += _safe(tp, tp + fn, fp == 0)
    pe, re = pe / n, re / n
    pl = rl = 0.0
    for j in range(c):
        tp = fp = fn = 0
        for i in range(n):
            if pred[i][j] and target[i][j]:
                tp += 1
            elif pred[i][j]:
                fp += 1
            elif target[i][j]:
                fn += 1
        pl += _safe(tp, tp + fp, fn == 0)
        rl += _safe(tp, tp + fn, fp == 0)
    pl, rl = pl / c, rl / c
    return {
        "P_e": pe, "R_e": re, "F1_e": _fb(pe, re, 1), "F2_e": _fb(pe, re, 2),
        "P_l": pl, "R_l": rl, "F1_l": _fb(pl, rl, 1), "F2_l": _fb(pl, rl, 2),
    }


def random_pair(r):
    n, c = int(r.integers(1, 12)), int(r.integers(1, 9))
    density = r.uniform(0.05, 0.95)
    pred = (r.random((n, c)) < density).astype(int)
    target = (r.random((n, c)) < r.uniform(0.05, 0.95)).astype(int)
    return pred, target


class TestOracle:
    def test_thousand_pairs(self):
        r = np.random.default_rng(6)
        worst = 0.0
        for _ in range(1000):
            pred, target = random_pair(r)
            got = evaluate(pred, target, [str(j) for j in range(pred.shape[1])]).aggregates()
            want = oracle_scores(pred.tolist(), target.tolist())
            worst = max(worst, max(abs(got[k] - want[k]) for k in want))
        assert worst <= 1e-12

    def test_single_example(self):
        P, R, F1 = example_based_scores([[1, 0, 0]], [[1, 0, 1]], 1)
        assert (P, R) == (1.0, 0.5)
        assert F1 == pytest.approx(2 / 3, abs=1e-15)
        assert example_based_scores([[1, 0, 0]], [[1, 0, 1]], 2)[2] == pytest.approx(5 / 9, abs=1e-15)

    def test_label_based_random_50x8(self, rng):
        pred = (rng.random((50, 8)) < 0.4).astype(int)
        target = (rng.random((50, 8)) < 0.4).astype(int)
        want = oracle_scores(pred.tolist(), target.tolist())
        for beta in (1, 2):
            P, R, F = label_based_scores(pred, target, beta)
            assert abs(P - want["P_l"]) <= 1e-12 and abs(R - want["R_l"]) <= 1e-12
            assert abs(F - want[f"F{beta}_l"]) <= 1e-12


class TestConventions:
    def test_perfect(self, rng):
        t = (rng.random((6, 4)) < 0.5).astype(int)
        assert all(v == 1.0 for v in evaluate(t, t, list("abcd")).aggregates().values())

    def test_empty_prediction(self):
        assert example_based_scores([[0, 0, 0]], [[0, 1, 0]]) == (0.0, 0.0, 0.0)

    def test_both_empty_is_perfect(self):
        assert example_based_scores([[0, 0]], [[0, 0]]) == (1.0, 1.0, 1.0)

    def test_absent_class_row(self):
        pred = np.array([[1, 0], [0, 0]])
        target = np.array([[1, 0], [0, 0]])
        assert per_class_report(pred, target, ["x", "y"])[1] == ("y", 1.0, 1.0, 1.0)

    def test_hand_five_examples(self):
        pred = np.array([[1, 0, 1], [0, 1, 1], [1, 1, 0], [0, 0, 0], [1, 0, 0]])
        target = np.array([[1, 0, 0], [0, 1, 0], [1, 0, 0], [0, 1, 1], [1, 0, 1]])
        rows = per_class_report(pred, target, ["a", "b", "c"])
        # class a: tp 3 fp 0 fn 0; b: tp 1 fp 1 fn 1; c: tp 0 fp 2 fn 2
        assert rows[0] == ("a", 1.0, 1.0, 1.0)
        assert rows[1] == ("b", 0.5, 0.5, 0.5)
        assert rows[2] == ("c", 0.0, 0.0, 0.0)

    @pytest.mark.parametrize("beta", [0, 0.5, 3])
    def test_beta_rejected(self, beta):
        with pytest.raises(ValueError):
            f_beta(0.5, 0.5, beta)
        with pytest.raises(ValueError):
            example_based_scores([[1]], [[1]], beta)

    def test_shape_and_binary_errors(self):
        with pytest.raises(ValueError):
            example_based_scores([[1, 0]], [[1, 0, 0]])
        with pytest.raises(ValueError):
            label_based_scores([[2, 0]], [[1, 0]])

    def test_vocabulary_mismatch(self):
        with pytest.raises(ValueError):
            per_class_report([[1, 0]], [[1, 0]], ["a"])


binary = st.integers(1, 8).flatmap(
    lambda c: st.integers(1, 10).flatmap(
        lambda n: st.tuples(arrays(np.int8, (n, c), elements=st.integers(0, 1)),
                            arrays(np.int8, (n, c), elements=st.integers(0, 1)))
    )
)


class TestProperties:
    @settings(max_examples=200, deadline=None)
    @given(binary)
    def test_bounds_and_f1_identity(self, pair):
        pred, target = pair
        rep = evaluate(pred, target, [str(j) for j in range(pred.shape[1])])
        for v in rep.aggregates().values():
            assert 0.0 <= v <= 1.0
        for p, r, f in ((rep.P_e, rep.R_e, rep.F1_e), (rep.P_l, rep.R_l, rep.F1_l)):
            if p + r > 0:
                assert f == pytest.approx(2 * p * r / (p + r), abs=1e-15)
        assert len(rep.per_class) == pred.shape[1]

    @settings(max_examples=100, deadline=None)
    @given(binary, st.randoms(use_true_random=False))
    def test_class_permutation(self, pair, rnd):
        pred, target = pair
        c = pred.shape[1]
        perm = list(range(c))
        rnd.shuffle(perm)
        vocab = [str(j) for j in range(c)]
        a = evaluate(pred, target, vocab)
        b = evaluate(pred[:, perm], target[:, perm], [vocab[j] for j in perm])
        for k, v in a.aggregates().items():
            assert b.aggregates()[k] == pytest.approx(v, abs=1e-15)
        assert b.per_class == [a.per_class[j] for j in perm]

    @settings(max_examples=200, deadline=None)
    @given(binary, st.data())
    def test_fixing_false_negative_never_lowers_recall(self, pair, data):
        pred, target = pair
        fn = np.argwhere((pred == 0) & (target == 1))
        if len(fn) == 0:
            return
        i, j = fn[data.draw(st.integers(0, len(fn) - 1))]
        fixed = pred.copy()
        fixed[i, j] = 1
        assert example_based_scores(fixed, target)[1] >= example_based_scores(pred, target)[1]


class TestExport:
    def test_report_files(self, tmp_path):
        pred = np.array([[1, 0], [1, 1]])
        target = np.array([[1, 0], [0, 1]])
        rep = evaluate(pred, target, ["water", "ship"])
        base = evaluate(target, target, ["water", "ship"])
        paths = write_report(tmp_path, rep, base)
        with open(paths[0]) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["label", "F1", "P", "R", "baseline_F1", "baseline_P", "baseline_R"]
        assert rows[1] == ["water", "66.67", "50.00", "100.00", "100.00", "100.00", "100.00"]
        assert "| ship |" in paths[1].read_text()
        data = json.loads(paths[2].read_text())
        assert data["n"] == 2 and data["c"] == 2 and len(data["per_class"]) == 2

    def test_perfect_rows(self, tmp_path):
        t = np.eye(3, dtype=int)
        write_report(tmp_path, evaluate(t, t, list("abc")))
        with open(tmp_path / "per_class.csv") as fh:
            rows = list(csv.reader(fh))[1:]
        assert all(r[1:] == ["100.00"] * 3 for r in rows)
