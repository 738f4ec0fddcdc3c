import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attnconv.backbone import build_model, efftiny
from attnconv.evaluation import (
    ConfusionMatrix, ThroughputReport, accuracy, argmax, benchmark_throughput, k_run_protocol,
)

REPORTED_RUNS = [96.24, 96.44, 96.51, 96.42, 96.38]


def test_accuracy_examples():
    assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0
    assert accuracy([0, 1, 0, 0], [0, 1, 2, 3]) == 0.5
    with pytest.raises(ValueError):
        accuracy([], [])


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=50))
def test_accuracy_matches_loop_and_trace(pairs):
    p, y = zip(*pairs)
    hits = 0
    for a, b in pairs:
        hits += a == b
    assert accuracy(p, y) == hits / len(pairs)
    cm = ConfusionMatrix.from_predictions(p, y, 5)
    assert cm.accuracy() == np.trace(cm.counts) / len(pairs)


def test_argmax_tie_break():
    assert argmax([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]]).tolist() == [1, 0]


def test_confusion_hand_count():
    cm = ConfusionMatrix.from_predictions([0, 1, 1], [0, 0, 1], 2)
    assert cm.counts.tolist() == [[1, 1], [0, 1]]
    np.testing.assert_array_equal(cm.normalized(), [[0.5, 0.5], [0.0, 1.0]])


def test_confusion_perfect_is_identity():
    y = [0, 1, 2, 2, 1]
    np.testing.assert_array_equal(ConfusionMatrix.from_predictions(y, y, 3).normalized(), np.eye(3))


def test_confusion_out_of_range():
    with pytest.raises(ValueError, match="3"):
        ConfusionMatrix.from_predictions([3], [0], 3)


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=80))
def test_normalized_rows_and_macro_recall(pairs):
    p, y = zip(*pairs)
    cm = ConfusionMatrix.from_predictions(p, y, 6)
    norm = cm.normalized()
    for k in range(6):
        if cm.support[k]:
            assert abs(norm[k].sum() - 1.0) < 1e-9
        else:
            assert k in cm.empty_rows and not norm[k].any()
    recalls = [sum(1 for a, b in pairs if b == k and a == k) / sum(1 for _, b in pairs if b == k)
               for k in range(6) if any(b == k for _, b in pairs)]
    present = [k for k in range(6) if cm.support[k]]
    assert np.trace(norm[np.ix_(present, present)]) / len(present) == pytest.approx(np.mean(recalls), abs=1e-12)
    if len(present) == 6:
        assert np.trace(norm) / 6 == pytest.approx(np.mean(recalls), abs=1e-12)


def test_confusion_outputs(tmp_path):
    cm = ConfusionMatrix.from_predictions([0, 1, 1], [0, 0, 1], 2, ["x", "y"])
    cm.to_csv(tmp_path / "c.csv")
    cm.to_pgm(tmp_path / "c.pgm", cell=4)
    assert (tmp_path / "c.csv").read_text().splitlines()[1] == "x,0.500000,0.500000"
    assert (tmp_path / "c.pgm").read_bytes().startswith(b"P5\n8 8\n255\n")


def test_reported_five_run_mean():
    res = k_run_protocol(lambda s: REPORTED_RUNS[s], k=5)
    assert res.mean == pytest.approx(96.398, abs=1e-9)
    assert res.display() == "96.40"
    assert res.complete and res.seeds == [0, 1, 2, 3, 4]
    assert min(REPORTED_RUNS) <= res.mean <= max(REPORTED_RUNS)


def test_mean_permutation_invariant():
    means = {k_run_protocol(lambda s, o=order: o[s], k=5).mean for order in itertools.permutations(REPORTED_RUNS)}
    assert max(means) - min(means) < 1e-12


def test_single_run_and_zero_variance():
    assert k_run_protocol(lambda s: 0.7, k=1).mean == 0.7
    res = k_run_protocol(lambda s: 0.91, k=3)
    assert res.spread == 0.0


def test_failed_run_marks_incomplete():
    def run(s):
        if s == 1:
            raise RuntimeError("diverged")
        return 0.5

    res = k_run_protocol(run, k=3)
    assert not res.complete and res.accuracies == [0.5, 0.5] and "seed 1" in res.errors[0]
    assert json.loads(json.dumps(res.to_json()))["complete"] is False


def fake_clock(elapsed):
    ticks = iter([100.0, 100.0 + elapsed])
    return lambda: next(ticks)


def test_throughput_identity():
    model = build_model(efftiny())
    rep = benchmark_throughput(model, batch_size=32, warmup_batches=0, timed_batches=39, clock=fake_clock(20.0))
    assert rep.batches_per_second == pytest.approx(1.95)
    assert rep.images_per_second == pytest.approx(62.4)
    assert round(rep.images_per_second) == 62
    assert ThroughputReport(16, 1.0).images_per_second == 16.0


def test_throughput_stable_under_doubling():
    model = build_model(efftiny())
    a = benchmark_throughput(model, batch_size=8, warmup_batches=2, timed_batches=10)
    b = benchmark_throughput(model, batch_size=8, warmup_batches=2, timed_batches=20)
    assert abs(b.batches_per_second - a.batches_per_second) / a.batches_per_second < 0.2
    assert a.images_per_second == a.batches_per_second * 8
