import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fibrosisnet.errors import EmptyInput, NonFiniteInput
from fibrosisnet.scoring import (
    REFERENCE_SCORES,
    ScoredPrediction,
    format_prediction_csv,
    laplace_log_likelihood,
    optimal_sigma,
    read_prediction_csv,
    read_truth_csv,
    render_report,
    report_json,
    score_cohort,
    score_files,
    select_eval_points,
)

from oracles import laplace_mp

CASES = [((2800, 2800, 70), -4.59507), ((3000, 2800, 100), -7.78017), ((4000, 2500, 50), -24.79812)]


@pytest.mark.parametrize("args,expected", CASES)
def test_worked_cases(args, expected):
    # the rounded constants are first confirmed at 50 digits
    assert float(laplace_mp(*args)) == pytest.approx(expected, abs=1e-5)
    assert laplace_log_likelihood(ScoredPrediction(*args)) == pytest.approx(expected, abs=1e-4)
    assert laplace_log_likelihood(ScoredPrediction(*args)) == pytest.approx(float(laplace_mp(*args)), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(100, 6000), st.floats(-2000, 2000), st.floats(0.001, 3000))
def test_matches_high_precision_everywhere(true, err, sigma):
    got = laplace_log_likelihood(ScoredPrediction(true, true + err, sigma))
    assert got == pytest.approx(float(laplace_mp(true, true + err, sigma)), abs=1e-9)
    assert got <= -math.log(math.sqrt(2) * 70) + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.floats(500, 5000), st.floats(-3000, 3000), st.floats(1, 2000))
def test_sign_invariance(t, err, sigma):
    a = laplace_log_likelihood(ScoredPrediction(t, t + err, sigma))
    b = laplace_log_likelihood(ScoredPrediction(t, t - err, sigma))
    assert a == pytest.approx(b, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(1000, 5000), st.floats(1, 2000))
def test_clipping_saturation(err, sigma):
    a = laplace_log_likelihood(ScoredPrediction(3000, 3000 + err, sigma))
    b = laplace_log_likelihood(ScoredPrediction(3000, 3000 + 1000, sigma))
    assert a == b


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 2000), st.floats(0, 2000), st.floats(1, 2000))
def test_monotone_in_error(e1, e2, sigma):
    lo, hi = sorted([e1, e2])
    assert laplace_log_likelihood(ScoredPrediction(3000, 3000 + lo, sigma)) >= laplace_log_likelihood(
        ScoredPrediction(3000, 3000 + hi, sigma)
    )


@pytest.mark.parametrize("delta", [0, 10, 100, 500, 1000])
def test_sigma_scan_argmax(delta):
    step = 0.01
    grid = np.arange(70, 2000 + step, step)
    scores = [laplace_log_likelihood(ScoredPrediction(3000, 3000 + delta, s)) for s in grid]
    best = grid[int(np.argmax(scores))]
    assert abs(best - optimal_sigma(delta)) <= step


def test_optimal_sigma_values():
    assert optimal_sigma(0) == 70
    assert optimal_sigma(10) == 70
    assert optimal_sigma(100) == pytest.approx(141.421356, abs=1e-5)
    assert optimal_sigma(5000) == pytest.approx(math.sqrt(2) * 1000)


def test_non_finite_rejected():
    with pytest.raises(NonFiniteInput):
        laplace_log_likelihood(ScoredPrediction(3000, float("nan"), 100))
    with pytest.raises(NonFiniteInput):
        laplace_log_likelihood(ScoredPrediction(3000, 2900, float("inf")))


def test_cohort_mean():
    p = ScoredPrediction(3000, 2800, 100)
    assert score_cohort([p]) == laplace_log_likelihood(p)
    assert score_cohort([p, p]) == pytest.approx(laplace_log_likelihood(p))
    q = ScoredPrediction(2800, 2800, 70)
    assert score_cohort([p, q]) == pytest.approx((laplace_log_likelihood(p) + laplace_log_likelihood(q)) / 2)
    with pytest.raises(EmptyInput):
        score_cohort([])


def test_eval_point_selection():
    rows = [{"patient": "A", "week": w} for w in (5, 1, 9, 3)] + [{"patient": "B", "week": 2}]
    assert len(select_eval_points(rows, "all")) == 5
    last = select_eval_points(rows, "last3")
    assert [(r["patient"], r["week"]) for r in last] == [("A", 3), ("A", 5), ("A", 9), ("B", 2)]
    with pytest.raises(ValueError):
        select_eval_points(rows, "first")


def test_csv_round_trip_and_file_scoring():
    text = format_prediction_csv([("P1", 20, 2800.0, 230.0), ("ID_00007637202177411956430", 5, 3000.04, 70.0)])
    assert text.splitlines()[1] == "P1_20,2800.0,230.0"
    preds = read_prediction_csv(text)
    assert preds[("ID_00007637202177411956430", 5)] == (3000.0, 70.0)
    truth = "Patient,Weeks,FVC,Percent,Age,Sex,SmokingStatus\nP1,20,2800,70,60,Male,Ex-smoker\nP9,1,2000,70,60,Male,Ex-smoker\n"
    score, n = score_files(text, truth)
    assert n == 1 and score == pytest.approx(laplace_log_likelihood(ScoredPrediction(2800, 2800, 230)))
    assert read_truth_csv("Patient_Week,FVC\nP1_20,2800\n") == {("P1", 20): 2800.0}
    with pytest.raises(ValueError):
        read_prediction_csv("a,b,c\n")
    with pytest.raises(ValueError):
        read_truth_csv("x,y\n1,2\n")


def test_report_contains_reference_rows():
    text = render_report([("mine", -6.5)])
    for name, score in REFERENCE_SCORES:
        assert name in text and f"{score:.4f}" in text
    assert "-6.8188" in text and "-6.8305" in text and "-6.8311" in text and "-6.8336" in text
    assert "mine" in text and "-6.5000" in text
    doc = json.loads(report_json([("mine", -6.5)], 3))
    assert doc["n_points"] == 3 and doc["results"][0]["method"] == "mine"
    assert "Fibrosis-Net" not in render_report([("mine", -6.5)], include_reference=False)
