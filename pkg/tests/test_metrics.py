import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score, precision_recall_fscore_support, roc_auc_score

from oracles import macro_ovr_auc, pairwise_auc, step_average_precision
from osa_fusion.errors import InputError
from osa_fusion.metrics import (
    MetricsReport,
    aggregate,
    binary_auc,
    cross_seed_variance,
    evaluate,
    predict_labels,
    read_key_values,
    write_key_values,
    write_metrics_csv,
)


def random_case(seed, n=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(8, 51))
    y = rng.integers(1, 5, size=n)
    y[:4] = [1, 2, 3, 4]
    # coarse scores so ties are common
    logits = np.round(rng.normal(size=(n, 4)), 1)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True), y


class TestEvaluate:
    def test_perfect(self):
        y = np.array([1, 2, 3, 4, 4, 2])
        r = evaluate(np.eye(4)[y - 1], y)
        assert r.accuracy == r.f1 == r.auc == 1.0
        assert r.aupr == [1.0] * 4 and r.class_accuracy == [1.0] * 4

    def test_uniform_predicts_first_class(self):
        y = np.array([1, 1, 4, 4, 4, 2])
        r = evaluate(np.full((6, 4), 0.25), y)
        assert r.accuracy == pytest.approx(2 / 6)
        assert list(predict_labels(np.full((2, 4), 0.25))) == [1, 1]

    def test_constant_prediction_hits_majority_rate(self):
        y = np.array([3, 3, 3, 1, 2])
        p = np.tile([0.1, 0.2, 0.6, 0.1], (5, 1))
        assert evaluate(p, y).accuracy == pytest.approx(0.6)

    def test_hand_built_twelve(self):
        y = np.array([1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4])
        p = np.array([
            [0.7, 0.1, 0.1, 0.1], [0.4, 0.4, 0.1, 0.1], [0.2, 0.5, 0.2, 0.1],
            [0.3, 0.4, 0.2, 0.1], [0.1, 0.6, 0.2, 0.1], [0.4, 0.4, 0.1, 0.1],
            [0.1, 0.2, 0.6, 0.1], [0.1, 0.1, 0.4, 0.4], [0.2, 0.2, 0.3, 0.3],
            [0.1, 0.1, 0.1, 0.7], [0.1, 0.1, 0.4, 0.4], [0.25, 0.25, 0.25, 0.25],
        ])
        r = evaluate(p, y)
        assert abs(r.auc - macro_ovr_auc(p.tolist(), y.tolist(), 4)) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            evaluate(np.full((3, 4), 0.25), [1, 2])

    @pytest.mark.parametrize("seed", range(50))
    def test_auc_and_aupr_against_oracles(self, seed):
        p, y = random_case(seed)
        r = evaluate(p, y)
        assert abs(r.auc - macro_ovr_auc(p.tolist(), y.tolist(), 4)) < 1e-9
        for c in range(1, 5):
            ref = step_average_precision(p[:, c - 1].tolist(), (y == c).tolist())
            assert abs(r.aupr[c - 1] - ref) < 1e-9

    @pytest.mark.parametrize("seed", range(10))
    def test_against_sklearn(self, seed):
        p, y = random_case(seed, n=40)
        r = evaluate(p, y)
        assert r.auc == pytest.approx(roc_auc_score(y, p, multi_class="ovr", average="macro"), abs=1e-12)
        for c in range(1, 5):
            assert r.aupr[c - 1] == pytest.approx(average_precision_score(y == c, p[:, c - 1]), abs=1e-12)
        pr, rc, f1, _ = precision_recall_fscore_support(y, predict_labels(p), average="weighted", zero_division=0)
        assert (r.precision, r.recall, r.f1) == pytest.approx((pr, rc, f1), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 100_000))
    def test_rates_in_unit_interval(self, seed):
        r = evaluate(*random_case(seed))
        for v in (r.accuracy, r.precision, r.recall, r.f1, r.auc, *r.aupr, *r.class_accuracy):
            assert 0.0 <= v <= 1.0
        assert len(r.aupr) == len(r.class_accuracy) == 4


def test_binary_auc_ties():
    assert binary_auc(np.array([0.5, 0.5]), np.array([True, False])) == 0.5
    assert binary_auc(np.array([0.9, 0.1, 0.5]), np.array([True, False, False])) == pairwise_auc(
        [0.9, 0.1, 0.5], [True, False, False])


class TestVariance:
    def test_identical(self):
        assert cross_seed_variance([0.9, 0.9, 0.9]) == 0.0

    def test_percent_convention(self):
        assert cross_seed_variance([0.90, 0.92]) == pytest.approx(1.0)

    def test_single_run(self):
        with pytest.raises(InputError):
            cross_seed_variance([0.9])


class TestSerialisation:
    def report(self, acc=0.9):
        return MetricsReport(acc, 0.8, 0.85, 0.82, 0.95, None, [0.9, 0.8, 0.7, 0.99], [1.0, 0.5, 0.6, 0.95])

    def test_key_values_round_trip(self, tmp_path):
        write_key_values(tmp_path / "m.txt", self.report())
        kv = read_key_values(tmp_path / "m.txt")
        assert kv["accuracy"] == 0.9 and kv["variance"] is None and kv["aupr_severe"] == 0.99

    def test_csv_rows(self, tmp_path):
        runs = [("seed0", self.report(0.9)), ("seed1", self.report(0.92))]
        write_metrics_csv(tmp_path / "m.csv", runs)
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0].startswith("run,Acc,Pre,Rec,F1,AUC,Var,Normal_AUPR,Normal_Acc")
        assert len(lines) == 4 and lines[-1].startswith("mean,91.0000")
        assert aggregate([r for _, r in runs]).variance == pytest.approx(1.0)
