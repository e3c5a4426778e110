import numpy as np
import pytest

from metrics_oracles import brute_force_ap, labelled_rankings, prevalence_oracle
from mctfuse.metrics import (
    REPORT_ROWS, NoPositivesError, ProtocolReport, average_precision, baseline_predict,
    mean_average_precision, per_class_ap, protocol_evaluate,
)


def test_ap_matches_brute_force_exhaustively():
    checked = 0
    for n in range(1, 9):
        for scores, labels in labelled_rankings(n):
            assert average_precision(scores, labels) == float(brute_force_ap(scores, labels))
            checked += 1
    assert checked == sum(2 ** (n - 1) * (2 ** n - 1) for n in range(1, 9))


def test_ap_precision_at_positive_ranks_without_ties(rng):
    for _ in range(50):
        y = rng.integers(0, 2, 12)
        y[0] = 1
        s = rng.permutation(12).astype(float)
        order = np.argsort(-s)
        hits = np.cumsum(y[order])
        want = np.mean([hits[k] / (k + 1) for k in range(12) if y[order][k]])
        assert average_precision(s, y) == pytest.approx(want, rel=1e-12)


def test_ap_is_order_independent_under_ties(rng):
    s = np.array([0.5, 0.5, 0.2, 0.5, 0.9])
    y = np.array([1, 0, 1, 0, 1])
    perm = rng.permutation(5)
    assert average_precision(s, y) == average_precision(s[perm], y[perm])


def test_ap_errors():
    with pytest.raises(NoPositivesError):
        average_precision([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        average_precision([0.1], [2])
    with pytest.raises(ValueError):
        average_precision([np.nan], [1])
    with pytest.raises(ValueError):
        average_precision([0.1, 0.2], [1])


def test_map_skips_classes_without_positives():
    s = np.array([[0.9, 0.1, 0.3], [0.2, 0.8, 0.4]])
    y = np.array([[1, 0, 0], [0, 1, 0]])
    assert per_class_ap(s, y).skipped == [2]
    assert mean_average_precision(s, y) == 1.0


def test_all_ones_baseline_equals_prevalence(rng):
    y = (rng.random((300, 20)) < rng.uniform(0.05, 0.6, 20)).astype(int)
    s = baseline_predict("all-ones", 300)
    assert abs(mean_average_precision(s, y) - prevalence_oracle(y)) < 1e-9


def test_random_baseline_is_reproducible_and_seeded():
    a, b = baseline_predict("random", 10, seed=4), baseline_predict("random", 10, seed=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, baseline_predict("random", 10, seed=5))
    with pytest.raises(ValueError):
        baseline_predict("median", 3)


def _report(rng, n=40):
    y = rng.integers(0, 2, (n, 20))
    y[:, 0] = 1
    tags = np.array(["known_val", "new_val", "known_test", "new_test"] * (n // 4))
    return protocol_evaluate(rng.random((n, 20)), y, tags, {"k": 1})


def test_protocol_means_are_exact(rng):
    r = _report(rng)
    assert r.mean_val == (r.known_val + r.new_val) / 2
    assert r.mean_test == (r.known_test + r.new_test) / 2
    assert all(0.0 <= getattr(r, k) <= 1.0 for k in REPORT_ROWS)


def test_protocol_requires_every_split(rng):
    with pytest.raises(ValueError):
        protocol_evaluate(rng.random((4, 20)), np.ones((4, 20)), ["known_val"] * 4)
    with pytest.raises(ValueError):
        protocol_evaluate(rng.random((4, 20)), np.ones((4, 20)), ["known_val"] * 4, num_labels=10)


def test_report_csv_round_trip(rng, tmp_path):
    r = _report(rng)
    r.save(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "split,metric,value"
    assert [l.split(",")[0] for l in lines[1:7]] == list(REPORT_ROWS)
    back = ProtocolReport.from_csv(tmp_path / "r.csv")
    for k in REPORT_ROWS:
        assert getattr(back, k) == getattr(r, k)
    assert back.per_class == r.per_class
    assert (tmp_path / "r.json").exists()
